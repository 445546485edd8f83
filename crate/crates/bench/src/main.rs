use std::path::PathBuf;
use std::process::ExitCode;

use kcount_bench::{compare_partitioning, kx_csv, measure_kx, partition_csv, write_fastq, GenomeParams, ReadParams, SimGenome};

const USAGE: &str = "\
Usage: kcount-bench [--out DIR] [--genome-len N] [--coverage C] [--k K] [--seed S] [--threads T]
Writes partitioning.csv and kx.csv into DIR (default: current directory).";

fn main() -> ExitCode {
    let mut out = PathBuf::from(".");
    let mut genome = GenomeParams::default();
    let mut reads = ReadParams::default();
    let mut k = 28usize;
    let mut threads = std::thread::available_parallelism().map_or(1, |n| n.get());

    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(value) = it.next() else {
            eprintln!("{USAGE}");
            return ExitCode::from(1);
        };
        let ok = match flag.as_str() {
            "--out" => {
                out = PathBuf::from(value);
                true
            }
            "--genome-len" => value.parse().map(|v| genome.length = v).is_ok(),
            "--coverage" => value.parse().map(|v| reads.coverage = v).is_ok(),
            "--k" => value.parse().map(|v| k = v).is_ok(),
            "--seed" => value
                .parse::<u64>()
                .map(|v| {
                    genome.seed = v;
                    reads.seed = v + 1;
                })
                .is_ok(),
            "--threads" => value.parse().map(|v| threads = v).is_ok(),
            _ => false,
        };
        if !ok {
            eprintln!("bad argument {flag} {value}\n{USAGE}");
            return ExitCode::from(1);
        }
    }

    let sim = SimGenome::generate(&genome);
    let sample = sim.reads(&reads);
    let partitions: Vec<_> = [5, 6, 7].iter().map(|&m| compare_partitioning(&sample, k, m)).collect();
    let part = partition_csv(&partitions);

    let work = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("kcount-bench: {e}");
            return ExitCode::from(2);
        }
    };
    let fastq = work.path().join("sim.fq");
    if let Err(e) = write_fastq(&fastq, &sample) {
        eprintln!("kcount-bench: {e}");
        return ExitCode::from(2);
    }
    let rows = match measure_kx(&fastq, k, 0..=3, work.path(), threads) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("kcount-bench: {e}");
            return ExitCode::from(2);
        }
    };
    let kx = kx_csv(k, &rows);
    for (name, text) in [("partitioning.csv", &part), ("kx.csv", &kx)] {
        if let Err(e) = std::fs::write(out.join(name), text) {
            eprintln!("kcount-bench: {}: {e}", out.join(name).display());
            return ExitCode::from(2);
        }
    }
    print!("{part}\n{kx}");
    ExitCode::SUCCESS
}
