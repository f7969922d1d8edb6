use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlzg::format::read_archive;
use rlzg::{compress, decompress, Collection, Error, Granularity, ParseParams, Sequence};
use xxhash_rust::xxh64::xxh64;

const HEADER_START: usize = 4 + 1 + 8;

fn sample() -> Collection {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference: Vec<u8> = (0..50_000).map(|_| rng.gen_range(0..4)).collect();
    let mut target = reference.clone();
    for _ in 0..40 {
        let i = rng.gen_range(0..target.len());
        target[i] = (target[i] + 1) % 4;
    }
    Collection::new(
        vec![Sequence::new("ref", reference), Sequence::new("tgt", target)],
        0,
        Granularity::WholeSequence,
    )
    .unwrap()
}

fn header_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize
}

/// Appends a section to the header and re-seals the header checksum.
fn with_extra_section(bytes: &[u8], tag: u8, body: &[u8]) -> Vec<u8> {
    let len = header_len(bytes);
    let mut head = bytes[HEADER_START..HEADER_START + len].to_vec();
    head.push(tag);
    head.extend_from_slice(&(body.len() as u64).to_le_bytes());
    head.extend_from_slice(body);
    let rest = &bytes[HEADER_START + len + 8..];
    let mut out = bytes[..5].to_vec();
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&xxh64(&head, 0).to_le_bytes());
    out.extend_from_slice(rest);
    out
}

#[test]
fn unknown_sections_are_skipped() {
    let collection = sample();
    let bytes = compress(&collection, &ParseParams::default()).unwrap();
    let patched = with_extra_section(&bytes, 200, b"future extension");
    let container = read_archive(&patched).unwrap();
    assert!(container.sections.iter().any(|&(tag, len)| tag == 200 && len == 16));
    assert_eq!(decompress(&patched).unwrap(), collection);
}

#[test]
fn header_tamper_is_detected() {
    let bytes = compress(&sample(), &ParseParams::default()).unwrap();
    let mut bad = bytes.clone();
    bad[HEADER_START + 3] ^= 0x40;
    assert!(matches!(read_archive(&bad), Err(Error::Corrupt(_))));
}

#[test]
fn payload_tamper_is_detected() {
    let bytes = compress(&sample(), &ParseParams::default()).unwrap();
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    assert!(read_archive(&bad).is_ok());
    assert!(matches!(decompress(&bad), Err(Error::Corrupt(_))));
}

#[test]
fn version_and_truncation_errors() {
    let bytes = compress(&sample(), &ParseParams::default()).unwrap();
    let mut newer = bytes.clone();
    newer[4] = 9;
    assert!(matches!(
        read_archive(&newer),
        Err(Error::UnsupportedVersion { found: 9, supported: 1 })
    ));
    for cut in [0, 3, 10, HEADER_START + 5, bytes.len() - 1] {
        assert!(read_archive(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
