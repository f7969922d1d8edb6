//! `rlzg`: relative LZ compression of genome collections.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rlzg::archive::window_count;
use rlzg::genome::DEFAULT_LINE_WIDTH;
use rlzg::{parse_fasta, select_reference, write_fasta, Archive, Collection, Granularity, ParseParams, Sequence};

#[derive(Parser)]
#[command(name = "rlzg", version, about = "Reference-relative compression of genome collections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress FASTA files (one sequence per file) into an archive.
    Compress(CompressArgs),
    /// Restore every sequence as `<dir>/<name>.fa`.
    Decompress {
        archive: PathBuf,
        /// Output directory (created if missing).
        #[arg(short, long)]
        output: PathBuf,
        /// Decoding threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Symbols per FASTA line.
        #[arg(long, default_value_t = DEFAULT_LINE_WIDTH, value_parser = parse_width)]
        line_width: usize,
    },
    /// Print a range of one sequence as FASTA.
    Extract {
        archive: PathBuf,
        /// Sequence name as stored in the archive.
        #[arg(long = "seq")]
        sequence: String,
        /// Half-open, 0-based `start:end`.
        #[arg(long, value_parser = parse_range)]
        range: (u64, u64),
        /// Interpret the range within this record of the sequence.
        #[arg(long)]
        record: Option<String>,
        /// Symbols per FASTA line.
        #[arg(long, default_value_t = DEFAULT_LINE_WIDTH, value_parser = parse_width)]
        line_width: usize,
    },
    /// Suggest a reference: the input with the most N-free windows.
    SelectRef {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Window length used to count N-free windows.
        #[arg(long, default_value_t = 13)]
        m1: usize,
    },
    /// Print archive section sizes as key=value lines.
    Stats { archive: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    /// m1=20 with per-record matching.
    Human,
}

#[derive(Args)]
struct CompressArgs {
    /// FASTA files; each file becomes one sequence named after its stem.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Archive path.
    #[arg(short, long)]
    output: PathBuf,
    /// Reference: an input path, a sequence name, or another FASTA file.
    #[arg(long = "ref", conflicts_with = "auto_ref")]
    reference: Option<String>,
    /// Pick the reference with the window-count heuristic.
    #[arg(long)]
    auto_ref: bool,
    /// Match each record only against its counterpart reference record.
    #[arg(long)]
    per_record: bool,
    /// Parameter preset; explicit flags override it.
    #[arg(long, value_enum, default_value = "default")]
    profile: Profile,
    /// Minimum match length.
    #[arg(long)]
    m1: Option<usize>,
    /// Minimum length of a piece after a gap.
    #[arg(long)]
    m2: Option<usize>,
    /// Minimum literal run added to the reservoir.
    #[arg(long)]
    m3: Option<usize>,
    /// Symbols between random-access checkpoints.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Match candidates examined per position.
    #[arg(long)]
    candidate_cap: Option<usize>,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_width(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(w) if w > 0 => Ok(w),
        _ => Err("line width must be a positive integer".into()),
    }
}

fn parse_range(s: &str) -> std::result::Result<(u64, u64), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let start: u64 = a.trim().parse().map_err(|_| format!("bad start {a:?}"))?;
    let end: u64 = b.trim().parse().map_err(|_| format!("bad end {b:?}"))?;
    if start > end {
        return Err(format!("start {start} exceeds end {end}"));
    }
    Ok((start, end))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<rlzg::Error>() {
            use rlzg::Error as E;
            return match e {
                E::InvalidParams(_) | E::InvalidCollection(_) | E::UnknownSequence(_) | E::OutOfRange { .. } => 2,
                E::Io(_) | E::Fasta { .. } => 3,
                e if e.is_corruption() => 4,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RLZG_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rlzg: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compress(args) => compress(args),
        Command::Decompress {
            archive,
            output,
            threads,
            line_width,
        } => decompress(&archive, &output, threads, line_width),
        Command::Extract {
            archive,
            sequence,
            range,
            record,
            line_width,
        } => extract(&archive, &sequence, range, record.as_deref(), line_width),
        Command::SelectRef { inputs, m1 } => select_ref(&inputs, m1),
        Command::Stats { archive } => stats(&archive),
    }
}

fn sequence_name(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| usage(format!("cannot derive a sequence name from {}", path.display())))
}

fn read_sequence(path: &Path) -> Result<Sequence> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let records = parse_fasta(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Sequence::from_records(sequence_name(path)?, records))
}

fn read_archive(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn params_from(args: &CompressArgs) -> Result<ParseParams> {
    let mut p = match args.profile {
        Profile::Default => ParseParams::default(),
        Profile::Human => ParseParams::human(),
    };
    if let Some(v) = args.m1 {
        p.min_match = v;
    }
    if let Some(v) = args.m2 {
        p.min_extension = v;
    }
    if let Some(v) = args.m3 {
        p.min_phrase = v;
    }
    if args.m1.is_some() && args.m3.is_none() {
        p.min_phrase = p.min_phrase.max(p.min_match);
    }
    if let Some(v) = args.checkpoint_interval {
        p.checkpoint_interval = v;
    }
    if let Some(v) = args.candidate_cap {
        p.candidate_cap = v;
    }
    p.validate()?;
    Ok(p)
}

fn compress(args: CompressArgs) -> Result<()> {
    let params = params_from(&args)?;
    let granularity = if args.per_record || matches!(args.profile, Profile::Human) {
        Granularity::PerRecord
    } else {
        Granularity::WholeSequence
    };
    let started = Instant::now();
    let mut sequences = args.inputs.iter().map(|p| read_sequence(p)).collect::<Result<Vec<_>>>()?;

    let reference_index = match (&args.reference, args.auto_ref) {
        (Some(r), _) => {
            let as_path = Path::new(r);
            let by_path = args.inputs.iter().position(|p| p == as_path);
            let by_name = || sequences.iter().position(|s| s.name() == r);
            match by_path.or_else(by_name) {
                Some(i) => i,
                None if as_path.is_file() => {
                    sequences.insert(0, read_sequence(as_path)?);
                    0
                }
                None => return Err(usage(format!("--ref {r:?} is neither an input, a sequence name nor a file"))),
            }
        }
        (None, true) => select_reference(&sequences, params.min_match).map_or(0, |(i, _)| i),
        (None, false) => 0,
    };
    log::info!("reference: {}", sequences[reference_index].name());
    let collection = Collection::new(sequences, reference_index, granularity)?;
    let input_symbols = collection.total_symbols();

    let (bytes, report) = rlzg::compress_with_report(&collection, &params)?;
    fs::write(&args.output, &bytes).with_context(|| format!("writing {}", args.output.display()))?;
    let secs = started.elapsed().as_secs_f64();
    let st = Archive::open(&bytes)?.stats();

    let mb = |n: u64| n as f64 / 1e6;
    let mut out = std::io::stdout().lock();
    writeln!(out, "reference={}", collection.reference().name())?;
    writeln!(out, "sequences={}", collection.sequences().len())?;
    writeln!(out, "input_mb={:.6}", mb(input_symbols))?;
    writeln!(out, "output_mb={:.6}", mb(bytes.len() as u64))?;
    writeln!(out, "bpb={:.6}", st.bits_per_base())?;
    writeln!(out, "bpb_relative={:.6}", st.relative_bits_per_base())?;
    writeln!(out, "factors={}", report.total.offset_factors() + report.total.literal_runs)?;
    writeln!(out, "seconds={secs:.3}")?;
    writeln!(out, "mb_per_s={:.3}", mb(input_symbols) / secs.max(1e-9))?;
    Ok(())
}

fn decompress(archive: &Path, dir: &Path, threads: usize, line_width: usize) -> Result<()> {
    let bytes = read_archive(archive)?;
    let collection = Archive::open(&bytes)?.decompress(threads)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for seq in collection.sequences() {
        let path = dir.join(format!("{}.fa", seq.name()));
        fs::write(&path, write_fasta(seq, line_width)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn extract(archive: &Path, name: &str, (start, end): (u64, u64), record: Option<&str>, line_width: usize) -> Result<()> {
    let bytes = read_archive(archive)?;
    let a = Archive::open(&bytes)?;
    let (offset, label) = match record {
        Some(r) => {
            let range = a.record_range(name, r)?;
            if end > range.end - range.start {
                return Err(rlzg::Error::OutOfRange {
                    start,
                    end,
                    len: range.end - range.start,
                }
                .into());
            }
            (range.start, format!("{name}/{r}"))
        }
        None => (0, name.to_string()),
    };
    let symbols = a.extract(name, offset + start, offset + end)?;
    let seq = Sequence::new(format!("{label}:{start}-{end}"), symbols);
    std::io::stdout().lock().write_all(&write_fasta(&seq, line_width))?;
    Ok(())
}

fn select_ref(inputs: &[PathBuf], m1: usize) -> Result<()> {
    if m1 == 0 {
        return Err(usage("--m1 must be positive"));
    }
    let sequences = inputs.iter().map(|p| read_sequence(p)).collect::<Result<Vec<_>>>()?;
    let (i, windows) = select_reference(&sequences, m1).ok_or_else(|| anyhow!("no inputs"))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "reference={}", sequences[i].name())?;
    writeln!(out, "windows={windows}")?;
    for s in &sequences {
        log::info!("{}: {} windows", s.name(), window_count(s, m1));
    }
    Ok(())
}

fn stats(archive: &Path) -> Result<()> {
    let bytes = read_archive(archive)?;
    let a = Archive::open(&bytes)?;
    let mut out = std::io::stdout().lock();
    for (k, v) in a.stats().key_values() {
        writeln!(out, "{k}={v}")?;
    }
    if a.verify().is_err() {
        bail!(rlzg::Error::Corrupt("payload checksum mismatch".into()));
    }
    Ok(())
}
