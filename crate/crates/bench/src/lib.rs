//! Desk-scale experiments on simulated reads.
//!
//! [`SimGenome`] produces a seeded genome with a configurable GC share and
//! scattered poly-A / poly-T runs, and samples reads from both strands.
//! [`compare_partitioning`] contrasts signature and plain-minimizer
//! partitioning; [`measure_kx`] runs the counter for several `x` and reports
//! how many (k,x)-mer records had to be sorted per k-mer.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use kcount_core::binning::record_size;
use kcount_core::pipeline::{run, CountConfig};
use kcount_core::seqio::for_each_segment;
use kcount_core::signature::{SignatureMode, SignatureScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenomeParams {
    pub length: usize,
    /// Probability of G or C at each position.
    pub gc: f64,
    /// Expected poly-A or poly-T runs per 10 kbp.
    pub homopolymer_rate: f64,
    /// Inclusive length range of those runs.
    pub homopolymer_len: (usize, usize),
    pub seed: u64,
}

impl Default for GenomeParams {
    fn default() -> Self {
        GenomeParams {
            length: 1_000_000,
            gc: 0.41,
            homopolymer_rate: 5.0,
            homopolymer_len: (8, 30),
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReadParams {
    pub read_len: usize,
    pub coverage: f64,
    /// Per-base substitution probability.
    pub error_rate: f64,
    /// Per-base probability of an `N`.
    pub n_rate: f64,
    pub seed: u64,
}

impl Default for ReadParams {
    fn default() -> Self {
        ReadParams {
            read_len: 100,
            coverage: 10.0,
            error_rate: 0.0,
            n_rate: 0.0,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimGenome {
    seq: Vec<u8>,
}

fn revcomp(s: &[u8]) -> Vec<u8> {
    s.iter()
        .rev()
        .map(|&b| match b {
            b'A' => b'T',
            b'C' => b'G',
            b'G' => b'C',
            b'T' => b'A',
            other => other,
        })
        .collect()
}

impl SimGenome {
    pub fn generate(p: &GenomeParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut seq = Vec::with_capacity(p.length);
        let run_prob = p.homopolymer_rate / 10_000.0;
        while seq.len() < p.length {
            if rng.gen_bool(run_prob.min(1.0)) {
                let len = rng.gen_range(p.homopolymer_len.0..=p.homopolymer_len.1);
                let base = if rng.gen_bool(0.5) { b'A' } else { b'T' };
                seq.extend(std::iter::repeat_n(base, len));
                continue;
            }
            let strong = rng.gen_bool(p.gc);
            let first = rng.gen_bool(0.5);
            seq.push(match (strong, first) {
                (true, true) => b'C',
                (true, false) => b'G',
                (false, true) => b'A',
                (false, false) => b'T',
            });
        }
        seq.truncate(p.length);
        SimGenome { seq }
    }

    pub fn from_sequence(seq: Vec<u8>) -> Self {
        SimGenome { seq }
    }

    pub fn sequence(&self) -> &[u8] {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Reads covering the genome `coverage` times on average, each taken
    /// from a random strand.
    pub fn reads(&self, p: &ReadParams) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let len = p.read_len.min(self.seq.len());
        if len == 0 {
            return Vec::new();
        }
        let n = (p.coverage * self.seq.len() as f64 / len as f64).round() as usize;
        (0..n)
            .map(|_| {
                let start = rng.gen_range(0..=self.seq.len() - len);
                let mut read = self.seq[start..start + len].to_vec();
                if rng.gen_bool(0.5) {
                    read = revcomp(&read);
                }
                for b in read.iter_mut() {
                    if p.n_rate > 0.0 && rng.gen_bool(p.n_rate) {
                        *b = b'N';
                    } else if p.error_rate > 0.0 && rng.gen_bool(p.error_rate) {
                        let others: Vec<u8> = b"ACGT".iter().copied().filter(|&c| c != *b).collect();
                        *b = others[rng.gen_range(0..3)];
                    }
                }
                read
            })
            .collect()
    }
}

pub fn write_fastq(path: &Path, reads: &[Vec<u8>]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut qual = Vec::new();
    for (i, r) in reads.iter().enumerate() {
        qual.clear();
        qual.resize(r.len(), b'I');
        writeln!(w, "@sim{i}")?;
        w.write_all(r)?;
        w.write_all(b"\n+\n")?;
        w.write_all(&qual)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PartitionStats {
    pub reads: u64,
    pub kmers: u64,
    pub super_kmers: u64,
    pub avg_super_kmers_per_read: f64,
    /// k-mers falling into the most popular signature.
    pub largest_bucket_kmers: u64,
    /// Bytes the super k-mers would take as bin records.
    pub total_record_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionReport {
    pub k: usize,
    pub m: usize,
    pub signatures: PartitionStats,
    pub minimizers: PartitionStats,
}

pub fn partition_stats(reads: &[Vec<u8>], k: usize, scheme: &SignatureScheme) -> PartitionStats {
    let mut buckets = vec![0u64; scheme.id_count()];
    let mut st = PartitionStats { reads: reads.len() as u64, ..PartitionStats::default() };
    let mut segment = Vec::new();
    let mut scratch = Vec::new();
    for read in reads {
        for_each_segment(read, k, &mut segment, |codes| {
            scheme.for_each_super_kmer(codes, k, &mut scratch, |start, end, sig| {
                let kmers = (end - start + 1 - k) as u64;
                st.super_kmers += 1;
                st.kmers += kmers;
                st.total_record_bytes += record_size(end - start) as u64;
                buckets[sig.index()] += kmers;
            });
        });
    }
    st.largest_bucket_kmers = buckets.into_iter().max().unwrap_or(0);
    st.avg_super_kmers_per_read = if reads.is_empty() { 0.0 } else { st.super_kmers as f64 / reads.len() as f64 };
    st
}

/// Signatures versus plain canonical minimizers on the same reads.
pub fn compare_partitioning(reads: &[Vec<u8>], k: usize, m: usize) -> PartitionReport {
    let m = m.min(k);
    PartitionReport {
        k,
        m,
        signatures: partition_stats(reads, k, &SignatureScheme::new(m, SignatureMode::Signatures)),
        minimizers: partition_stats(reads, k, &SignatureScheme::new(m, SignatureMode::Minimizers)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KxRow {
    pub x: usize,
    pub kmers: u64,
    pub records: u64,
    /// Records sorted per k-mer occurrence.
    pub fraction: f64,
    pub stage1: Duration,
    pub stage2: Duration,
}

/// Count `fastq` once per `x`, recording the sorted fraction and timings.
pub fn measure_kx(
    fastq: &Path,
    k: usize,
    xs: impl IntoIterator<Item = usize>,
    work_dir: &Path,
    threads: usize,
) -> kcount_core::Result<Vec<KxRow>> {
    let mut rows = Vec::new();
    for x in xs {
        let mut c = CountConfig::new(vec![fastq.to_path_buf()], work_dir.join(format!("kx{x}")), work_dir);
        c.k = k;
        c.x = x;
        c.min_count = 1;
        c.memory_bytes = 2 << 30;
        c.threads = Some(threads);
        let stats = run(&c)?;
        for ext in [".kmc_pre", ".kmc_suf"] {
            let mut p = c.output.clone().into_os_string();
            p.push(ext);
            let _ = std::fs::remove_file(p);
        }
        rows.push(KxRow {
            x,
            kmers: stats.total_kmers,
            records: stats.kx_records,
            fraction: if stats.total_kmers == 0 { 1.0 } else { stats.kx_records as f64 / stats.total_kmers as f64 },
            stage1: stats.stage1_time,
            stage2: stats.stage2_time,
        });
    }
    Ok(rows)
}

pub fn partition_csv(reports: &[PartitionReport]) -> String {
    let mut s = String::from("k,m,scheme,reads,kmers,super_kmers,avg_super_kmers_per_read,largest_bucket_kmers,record_bytes\n");
    for r in reports {
        for (name, st) in [("signatures", &r.signatures), ("minimizers", &r.minimizers)] {
            s.push_str(&format!(
                "{},{},{name},{},{},{},{:.4},{},{}\n",
                r.k, r.m, st.reads, st.kmers, st.super_kmers, st.avg_super_kmers_per_read, st.largest_bucket_kmers, st.total_record_bytes
            ));
        }
    }
    s
}

pub fn kx_csv(k: usize, rows: &[KxRow]) -> String {
    let mut s = String::from("k,x,kmers,records,fraction,stage1_s,stage2_s\n");
    for r in rows {
        s.push_str(&format!(
            "{k},{},{},{},{:.4},{:.3},{:.3}\n",
            r.x,
            r.kmers,
            r.records,
            r.fraction,
            r.stage1.as_secs_f64(),
            r.stage2.as_secs_f64()
        ));
    }
    s
}
