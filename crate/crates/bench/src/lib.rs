//! Synthetic collections for benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlzg::{Collection, Granularity, Sequence};

pub fn random_acgt(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..4u8)).collect()
}

/// Copy of `src` with independent substitutions at `rate`.
pub fn with_snps(rng: &mut impl Rng, src: &[u8], rate: f64) -> Vec<u8> {
    src.iter()
        .map(|&s| if rng.gen_bool(rate) { (s + rng.gen_range(1..4)) % 4 } else { s })
        .collect()
}

/// A random reference of `ref_len` symbols followed by `copies` SNP copies.
pub fn snp_collection(seed: u64, ref_len: usize, copies: usize, rate: f64) -> Collection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = random_acgt(&mut rng, ref_len);
    let mut seqs = vec![Sequence::new("ref", reference.clone())];
    for i in 0..copies {
        seqs.push(Sequence::new(format!("copy{i}"), with_snps(&mut rng, &reference, rate)));
    }
    Collection::new(seqs, 0, Granularity::WholeSequence).expect("valid collection")
}
