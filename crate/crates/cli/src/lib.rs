//! Argument handling for the `kcount` and `kcount-dump` binaries.
//!
//! Options follow the attached-value style of the original tool (`-k27`,
//! `-ci2`, `-cx1e9`), which is why they are parsed by hand.

use std::io::Write;
use std::path::PathBuf;

use kcount_core::kmcdb::Db;
use kcount_core::pipeline::{run, CountConfig, ManualThreads, GIB};
use kcount_core::seqio::{expand_input_list, InputFormat};
use kcount_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

pub const COUNT_USAGE: &str = "\
Usage: kcount [options] <input_file_name> <output_file_name> <working_directory>
       kcount [options] <@input_file_names> <output_file_name> <working_directory>
Parameters:
  input_file_name    single file in FASTQ or FASTA format (gzip allowed)
  @input_file_names  file listing input files, one per line
  output_file_name   base name of the database; .kmc_pre and .kmc_suf are appended
  working_directory  directory for temporary files
Options:
  -v          verbose mode (prints the resource plan and parameters)
  -k<len>     k-mer length (1-256; default: 25)
  -m<size>    memory budget in GB (1-1024; default: 12)
  -p<len>     signature length (5-7; default: 7)
  -x<value>   longest (k,x)-mer extension used while sorting (0-3; default: 3)
  -lp<len>    LUT prefix length (default: chosen automatically)
  -f<a/q/m>   input in FASTA, FASTQ or multi-line FASTA (default: FASTQ)
  -ci<value>  exclude k-mers occurring less than <value> times (default: 2)
  -cx<value>  exclude k-mers occurring more than <value> times (default: 1e9)
  -cs<value>  maximal value of a counter (default: 255)
  -b          turn off transformation of k-mers into canonical form
  -r          turn on RAM-only mode
  -t<value>   total number of threads (default: number of cores)
  -sf<value>  number of FASTQ reading threads
  -sp<value>  number of splitting threads
  -so<value>  number of sorter threads
  -sr<value>  number of sorting threads per sorter
              (-sf, -sp, -so and -sr are used only when all four are given)
";

pub const DUMP_USAGE: &str = "\
Usage: kcount-dump [options] <database> <output_file>
Parameters:
  database     base name of a database (without .kmc_pre / .kmc_suf)
  output_file  text output, one \"<k-mer>\\t<count>\" line per k-mer; - for stdout
Options:
  -ci<value>  exclude k-mers occurring less than <value> times
  -cx<value>  exclude k-mers occurring more than <value> times
";

#[derive(Debug, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parsed `kcount` command line.
#[derive(Clone, Debug)]
pub struct CountInvocation {
    pub config: CountConfig,
    pub verbose: bool,
    /// Names of the split-thread options that were ignored because the set
    /// was incomplete.
    pub ignored: Vec<&'static str>,
}

/// Parse a count such as `2`, `1000000000` or `1e9`.
pub fn parse_count(text: &str) -> Option<u64> {
    if let Ok(v) = text.parse::<u64>() {
        return Some(v);
    }
    let f: f64 = text.parse().ok()?;
    (f.is_finite() && f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64).then_some(f as u64)
}

fn number(flag: &str, text: &str, range: std::ops::RangeInclusive<u64>) -> Result<u64, UsageError> {
    match parse_count(text) {
        Some(v) if range.contains(&v) => Ok(v),
        _ => Err(UsageError(format!(
            "{flag}{text}: expected a value in {}..={}",
            range.start(),
            range.end()
        ))),
    }
}

pub fn parse_count_args(args: &[String]) -> Result<CountInvocation, UsageError> {
    let mut positional = Vec::new();
    let mut config = CountConfig::new(Vec::new(), PathBuf::new(), PathBuf::new());
    let mut verbose = false;
    let mut split: [Option<usize>; 4] = [None; 4];
    const SPLIT_FLAGS: [&str; 4] = ["-sf", "-sp", "-so", "-sr"];

    for arg in args {
        if !arg.starts_with('-') || arg == "-" {
            positional.push(arg.clone());
            continue;
        }
        let a = arg.as_str();
        if let Some(i) = SPLIT_FLAGS.iter().position(|f| a.starts_with(f)) {
            split[i] = Some(number(SPLIT_FLAGS[i], &a[3..], 1..=1024)? as usize);
        } else if let Some(v) = a.strip_prefix("-ci") {
            config.min_count = number("-ci", v, 0..=u64::MAX)?;
        } else if let Some(v) = a.strip_prefix("-cx") {
            config.max_count = number("-cx", v, 0..=u64::MAX)?;
        } else if let Some(v) = a.strip_prefix("-cs") {
            config.counter_cap = number("-cs", v, 1..=u32::MAX as u64)?;
        } else if let Some(v) = a.strip_prefix("-lp") {
            config.lut_prefix_length = Some(number("-lp", v, 0..=15)? as usize);
        } else if a.starts_with("-q") {
            return Err(UsageError("-q: quality-aware counting is not supported".into()));
        } else if let Some(v) = a.strip_prefix("-k") {
            config.k = number("-k", v, 1..=256)? as usize;
        } else if let Some(v) = a.strip_prefix("-m") {
            config.memory_bytes = number("-m", v, 1..=1024)? * GIB;
        } else if let Some(v) = a.strip_prefix("-p") {
            config.m = number("-p", v, 5..=7)? as usize;
        } else if let Some(v) = a.strip_prefix("-x") {
            config.x = number("-x", v, 0..=3)? as usize;
        } else if let Some(v) = a.strip_prefix("-t") {
            config.threads = Some(number("-t", v, 1..=1024)? as usize);
        } else if let Some(v) = a.strip_prefix("-f") {
            config.format = match v {
                "a" => InputFormat::Fasta,
                "q" => InputFormat::Fastq,
                "m" => InputFormat::MultiFasta,
                _ => return Err(UsageError(format!("{a}: expected -fa, -fq or -fm"))),
            };
        } else if a == "-b" {
            config.canonical = false;
        } else if a == "-r" {
            config.ram_only = true;
        } else if a == "-v" {
            verbose = true;
        } else {
            return Err(UsageError(format!("unknown option {a}")));
        }
    }

    let mut ignored = Vec::new();
    match split {
        [Some(readers), Some(splitters), Some(sorters), Some(sorting_threads)] => {
            config.manual_threads = Some(ManualThreads { readers, splitters, sorters, sorting_threads });
        }
        _ => {
            for (i, s) in split.iter().enumerate() {
                if s.is_some() {
                    ignored.push(SPLIT_FLAGS[i]);
                }
            }
        }
    }

    if positional.len() != 3 {
        return Err(UsageError(format!("expected 3 positional arguments, found {}", positional.len())));
    }
    if config.min_count > config.max_count {
        return Err(UsageError(format!(
            "-ci{} exceeds -cx{}",
            config.min_count, config.max_count
        )));
    }
    config.inputs = expand_input_list(&positional[0]).map_err(|e| UsageError(e.to_string()))?;
    if config.inputs.is_empty() {
        return Err(UsageError(format!("{} lists no input files", positional[0])));
    }
    config.output = PathBuf::from(&positional[1]);
    config.work_dir = PathBuf::from(&positional[2]);
    Ok(CountInvocation { config, verbose, ignored })
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        Error::InvariantViolation(_) | Error::OversizedBin { .. } => EXIT_INVARIANT,
        _ => EXIT_IO,
    }
}

fn describe(config: &CountConfig) -> String {
    format!(
        "k={} m={} x={} ci={} cx={} cs={} memory={}B canonical={} ram_only={} format={:?}\n",
        config.k,
        config.effective_m(),
        config.x,
        config.min_count,
        config.max_count,
        config.counter_cap,
        config.memory_bytes,
        config.canonical,
        config.ram_only,
        config.format
    )
}

/// `kcount` entry point. Returns the process exit code.
pub fn main_count(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let inv = match parse_count_args(args) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = writeln!(err, "kcount: {e}\n\n{COUNT_USAGE}");
            return EXIT_USAGE;
        }
    };
    if !inv.ignored.is_empty() {
        let _ = writeln!(
            err,
            "kcount: ignoring {} (-sf, -sp, -so and -sr must be given together)",
            inv.ignored.join(", ")
        );
    }
    match run(&inv.config) {
        Ok(stats) => {
            if inv.verbose {
                let _ = out.write_all(describe(&inv.config).as_bytes());
                let _ = out.write_all(stats.plan_report().as_bytes());
            }
            let _ = out.write_all(stats.report().as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "kcount: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct DumpInvocation {
    pub database: PathBuf,
    pub output: String,
    pub min_count: Option<u32>,
    pub max_count: Option<u32>,
}

pub fn parse_dump_args(args: &[String]) -> Result<DumpInvocation, UsageError> {
    let mut positional = Vec::new();
    let (mut min_count, mut max_count) = (None, None);
    for arg in args {
        let a = arg.as_str();
        if !a.starts_with('-') || a == "-" {
            positional.push(arg.clone());
        } else if let Some(v) = a.strip_prefix("-ci") {
            min_count = Some(number("-ci", v, 0..=u32::MAX as u64)? as u32);
        } else if let Some(v) = a.strip_prefix("-cx") {
            max_count = Some(number("-cx", v, 0..=u32::MAX as u64)? as u32);
        } else {
            return Err(UsageError(format!("unknown option {a}")));
        }
    }
    if positional.len() != 2 {
        return Err(UsageError(format!("expected 2 positional arguments, found {}", positional.len())));
    }
    Ok(DumpInvocation {
        database: PathBuf::from(&positional[0]),
        output: positional[1].clone(),
        min_count,
        max_count,
    })
}

/// Write every listed k-mer as `<k-mer>\t<count>`.
pub fn dump(inv: &DumpInvocation, out: &mut dyn Write) -> kcount_core::Result<u64> {
    let mut db = Db::open_for_listing(&inv.database)?;
    if let Some(v) = inv.min_count {
        db.set_min_count(v);
    }
    if let Some(v) = inv.max_count {
        db.set_max_count(v);
    }
    let mut w = std::io::BufWriter::with_capacity(1 << 16, out);
    let mut n = 0;
    while let Some((kmer, count)) = db.read_next_kmer()? {
        writeln!(w, "{kmer}\t{count}")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// `kcount-dump` entry point. `stdout` receives the listing when the output
/// file is `-`.
pub fn main_dump(args: &[String], stdout: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let inv = match parse_dump_args(args) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = writeln!(err, "kcount-dump: {e}\n\n{DUMP_USAGE}");
            return EXIT_USAGE;
        }
    };
    let result = if inv.output == "-" {
        dump(&inv, stdout)
    } else {
        let path = PathBuf::from(&inv.output);
        std::fs::File::create(&path)
            .map_err(|e| Error::io_at(&path, e))
            .and_then(|mut f| dump(&inv, &mut f))
    };
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "kcount-dump: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn counter_flags() {
        let inv = parse_count_args(&args("-k27 -m24 in.fastq out tmp/")).unwrap();
        assert_eq!(inv.config.k, 27);
        assert_eq!(inv.config.memory_bytes, 24 * GIB);
        assert_eq!(inv.config.inputs, vec![PathBuf::from("in.fastq")]);
        assert_eq!(inv.config.output, PathBuf::from("out"));
        assert_eq!(inv.config.work_dir, PathBuf::from("tmp/"));

        let inv = parse_count_args(&args("-ci1 -cx1e9 -cs65535 -p5 -x0 -fa -b -r -v -t4 -lp3 a b c")).unwrap();
        let c = &inv.config;
        assert_eq!((c.min_count, c.max_count, c.counter_cap), (1, 1_000_000_000, 65535));
        assert_eq!((c.m, c.x, c.threads, c.lut_prefix_length), (5, 0, Some(4), Some(3)));
        assert_eq!(c.format, InputFormat::Fasta);
        assert!(!c.canonical && c.ram_only && inv.verbose);

        let d = parse_count_args(&args("a b c")).unwrap().config;
        assert_eq!((d.k, d.m, d.x, d.min_count, d.max_count, d.counter_cap), (25, 7, 3, 2, 1_000_000_000, 255));
        assert_eq!(d.memory_bytes, 12 * GIB);
    }

    #[test]
    fn split_thread_options_need_all_four() {
        let inv = parse_count_args(&args("-sf2 -sp4 a b c")).unwrap();
        assert_eq!(inv.config.manual_threads, None);
        assert_eq!(inv.ignored, vec!["-sf", "-sp"]);
        let inv = parse_count_args(&args("-sf2 -sp4 -so3 -sr2 a b c")).unwrap();
        assert_eq!(
            inv.config.manual_threads,
            Some(ManualThreads { readers: 2, splitters: 4, sorters: 3, sorting_threads: 2 })
        );
    }

    #[test]
    fn usage_errors() {
        for bad in ["a b", "a b c d", "-k0 a b c", "-p8 a b c", "-x4 a b c", "-fz a b c", "-q a b c", "-zz a b c", "-ci5 -cx4 a b c", "-m0 a b c"] {
            assert!(parse_count_args(&args(bad)).is_err(), "{bad}");
        }
        assert!(parse_dump_args(&args("db")).is_err());
        assert!(parse_dump_args(&args("-k3 db out")).is_err());
        let d = parse_dump_args(&args("-ci3 db -")).unwrap();
        assert_eq!(d.min_count, Some(3));
        assert_eq!(d.output, "-");
    }

    #[test]
    fn numbers() {
        assert_eq!(parse_count("1e9"), Some(1_000_000_000));
        assert_eq!(parse_count("17"), Some(17));
        assert_eq!(parse_count("1.5"), None);
        assert_eq!(parse_count("x"), None);
    }
}
