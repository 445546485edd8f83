//! The two-stage counting run.
//!
//! Stage 1 streams the inputs through reader threads and splitter threads,
//! which cut reads into super k-mers and hand per-bin chunks to a single bin
//! writer. Stage 2 dispatches bins largest first to sorter workers under a
//! memory gate; finished bins are reordered by id and appended to the
//! database by a single completer, which parks early arrivals on disk when
//! too many pile up.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, RecvTimeoutError};

use crate::binning::{
    build_mapping, for_each_piece, push_record, sample_histogram, BinChunk, BinMapping, BinSet, BinStats, BinWriter,
    SampleBudget, StorageMode, MAX_BINS,
};
use crate::error::{Error, Result};
use crate::kmcdb::{
    counter_size_for, default_lut_prefix_length, valid_lut_prefix_lengths, BinOutput, BinOutputBuilder, DbHeader,
    DbSettings, DbWriter, RecordLayout,
};
use crate::kxmer::MAX_X;
use crate::seq::{words, MAX_K};
use crate::seqio::{for_each_segment, is_gzip, BlockReader, InputFormat, ReadBlock};
use crate::signature::{SignatureMode, SignatureScheme};
use crate::sortcount::{count_bin, BinCountParams, CountFilter, MergeStats};

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
/// Memory held back from the sorters for reading bins and writing output.
pub const OUTPUT_RESERVE: u64 = 512 * MIB;
pub const MIN_BUDGET: u64 = 16 * MIB;

/// Explicit stage-1 and stage-2 thread counts; replace the automatic plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManualThreads {
    pub readers: usize,
    pub splitters: usize,
    pub sorters: usize,
    pub sorting_threads: usize,
}

#[derive(Clone, Debug)]
pub struct CountConfig {
    pub k: usize,
    /// Signature length; clamped to `k` for shorter k-mers.
    pub m: usize,
    pub x: usize,
    pub min_count: u64,
    pub max_count: u64,
    pub counter_cap: u64,
    pub memory_bytes: u64,
    pub canonical: bool,
    pub ram_only: bool,
    /// Total cores to plan for; all available when `None`.
    pub threads: Option<usize>,
    pub manual_threads: Option<ManualThreads>,
    pub format: InputFormat,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
    pub work_dir: PathBuf,
    pub signature_mode: SignatureMode,
    pub lut_prefix_length: Option<usize>,
    /// Fail instead of granting a bin more memory than the budget.
    pub strict_memory: bool,
    pub max_bins: usize,
}

impl CountConfig {
    pub fn new(inputs: Vec<PathBuf>, output: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        CountConfig {
            k: 25,
            m: 7,
            x: 3,
            min_count: 2,
            max_count: 1_000_000_000,
            counter_cap: 255,
            memory_bytes: 12 * GIB,
            canonical: true,
            ram_only: false,
            threads: None,
            manual_threads: None,
            format: InputFormat::Fastq,
            inputs,
            output: output.into(),
            work_dir: work_dir.into(),
            signature_mode: SignatureMode::Signatures,
            lut_prefix_length: None,
            strict_memory: false,
            max_bins: MAX_BINS,
        }
    }

    pub fn effective_m(&self) -> usize {
        self.m.min(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(1..=MAX_K).contains(&self.k) {
            return bad(format!("k = {} outside 1..={MAX_K}", self.k));
        }
        if !(5..=7).contains(&self.m) {
            return bad(format!("signature length {} outside 5..=7", self.m));
        }
        if self.x > MAX_X {
            return bad(format!("x = {} exceeds {MAX_X}", self.x));
        }
        if self.min_count > self.max_count {
            return bad(format!("min count {} exceeds max count {}", self.min_count, self.max_count));
        }
        if self.counter_cap == 0 || self.counter_cap > u32::MAX as u64 {
            return bad(format!("counter cap {} outside 1..=2^32-1", self.counter_cap));
        }
        if self.memory_bytes < MIN_BUDGET {
            return bad(format!("memory budget {} bytes is below {MIN_BUDGET}", self.memory_bytes));
        }
        if !(1..=MAX_BINS).contains(&self.max_bins) {
            return bad(format!("bin count {} outside 1..={MAX_BINS}", self.max_bins));
        }
        if let Some(p) = self.lut_prefix_length {
            if !valid_lut_prefix_lengths(self.k).any(|q| q == p) {
                return bad(format!("prefix length {p} must be <= k, <= 15 and congruent to k mod 4"));
            }
        }
        if let Some(t) = self.manual_threads {
            if t.readers == 0 || t.splitters == 0 || t.sorters == 0 || t.sorting_threads == 0 {
                return bad("explicit thread counts must be positive".into());
            }
        }
        if self.threads == Some(0) {
            return bad("thread count must be positive".into());
        }
        if self.inputs.is_empty() {
            return bad("no input files".into());
        }
        Ok(())
    }
}

/// Reader and splitter thread counts for stage 1.
pub fn plan_stage1(cores: usize, input_sizes: &[u64], compressed: bool) -> (usize, usize) {
    let cores = cores.max(1);
    let readers = if compressed {
        let largest = input_sizes.iter().copied().max().unwrap_or(0);
        let large = input_sizes.iter().filter(|&&s| s as f64 > 0.05 * largest as f64).count();
        large.min(cores / 2).max(1)
    } else {
        1
    };
    (readers, cores.saturating_sub(readers).max(1))
}

/// The size exceeded by the largest tenth of the bins.
pub fn b10(sizes: &[u64]) -> u64 {
    if sizes.is_empty() {
        return 0;
    }
    let mut desc = sizes.to_vec();
    desc.sort_unstable_by(|a, b| b.cmp(a));
    let idx = ((desc.len() as f64 * 0.1).ceil() as usize).max(1);
    desc[idx - 1]
}

/// Spread `threads` over `sorters`, the first ones getting one extra.
pub fn distribute_threads(sorters: usize, threads: usize) -> Vec<usize> {
    let sorters = sorters.max(1);
    let base = (threads / sorters).max(1);
    let extra = if threads >= sorters { threads % sorters } else { 0 };
    (0..sorters).map(|i| base + usize::from(i < extra)).collect()
}

/// Sorter count and per-sorter thread counts for stage 2.
pub fn plan_stage2(cores: usize, stage2_bytes: u64, bin_sizes: &[u64]) -> (usize, Vec<usize>) {
    let cores = cores.max(1);
    let b = b10(bin_sizes);
    let sorters = stage2_bytes.checked_div(b).map_or(1, |n| (n as usize).clamp(1, cores));
    (sorters, distribute_threads(sorters, cores))
}

/// Memory the sorters may share once stage 1 is over.
pub fn stage2_budget(total: u64) -> u64 {
    total - OUTPUT_RESERVE.min(total / 2)
}

/// Upper estimate of the memory needed to count one bin: its raw bytes,
/// the expanded records plus radix scratch, and the encoded output.
pub fn bin_memory_need(stats: &BinStats, k: usize, x: usize, layout: &RecordLayout) -> u64 {
    if stats.kmers == 0 {
        return 0;
    }
    let record = words::words_for(k + x) as u64 * 8;
    stats.bytes + stats.kmers * 2 * record + stats.kmers * (layout.record_bytes() as u64 + 8)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResourcePlan {
    pub cores: usize,
    pub n_readers: usize,
    pub n_splitters: usize,
    pub n_sorters: usize,
    pub threads_per_sorter: Vec<usize>,
    pub block_size: usize,
    pub parts_capacity: usize,
    pub chunk_bytes: usize,
    pub chunks_capacity: usize,
    /// Estimated stage-1 footprint: queues plus splitter buffers.
    pub stage1_bytes: u64,
    /// Memory granted to sorters and parked outputs in stage 2.
    pub stage2_bytes: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RunStats {
    pub reads: u64,
    pub super_kmers: u64,
    /// k-mer occurrences in the input.
    pub total_kmers: u64,
    /// Distinct k-mers before thresholds.
    pub unique_kmers: u64,
    pub below_min: u64,
    pub above_max: u64,
    /// Distinct k-mers written to the database.
    pub stored_kmers: u64,
    pub kx_records: u64,
    pub n_bins: usize,
    pub max_bin_bytes: u64,
    pub bin_bytes: u64,
    /// Largest estimated footprint of either stage.
    pub peak_memory_estimate: u64,
    pub stage2_peak_grant: u64,
    /// `(bin, bytes granted)` for bins larger than the whole stage-2 budget.
    pub oversized_bins: Vec<(u32, u64)>,
    pub spilled_bins: usize,
    pub signature_length: usize,
    pub lut_prefix_length: usize,
    pub plan: ResourcePlan,
    pub header: Option<DbHeader>,
    pub stage1_time: Duration,
    pub stage2_time: Duration,
}

impl RunStats {
    /// Human-readable summary as printed by the command-line counter.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let secs = |d: Duration| d.as_secs_f64();
        let _ = writeln!(s, "1st stage: {:.3}s", secs(self.stage1_time));
        let _ = writeln!(s, "2nd stage: {:.3}s", secs(self.stage2_time));
        let _ = writeln!(s, "Total    : {:.3}s", secs(self.stage1_time + self.stage2_time));
        let _ = writeln!(s, "No. of k-mers below min. threshold : {:>12}", self.below_min);
        let _ = writeln!(s, "No. of k-mers above max. threshold : {:>12}", self.above_max);
        let _ = writeln!(s, "No. of unique k-mers               : {:>12}", self.unique_kmers);
        let _ = writeln!(s, "No. of unique counted k-mers       : {:>12}", self.stored_kmers);
        let _ = writeln!(s, "Total no. of k-mers                : {:>12}", self.total_kmers);
        let _ = writeln!(s, "Total no. of reads                 : {:>12}", self.reads);
        let _ = writeln!(s, "Total no. of super-k-mers          : {:>12}", self.super_kmers);
        s
    }

    pub fn plan_report(&self) -> String {
        let p = &self.plan;
        let mut s = String::new();
        let _ = writeln!(s, "cores               : {}", p.cores);
        let _ = writeln!(s, "readers / splitters : {} / {}", p.n_readers, p.n_splitters);
        let _ = writeln!(s, "sorters             : {} {:?}", p.n_sorters, p.threads_per_sorter);
        let _ = writeln!(s, "block size          : {}", p.block_size);
        let _ = writeln!(s, "bin chunk size      : {}", p.chunk_bytes);
        let _ = writeln!(s, "stage-1 estimate    : {}", p.stage1_bytes);
        let _ = writeln!(s, "stage-2 budget      : {}", p.stage2_bytes);
        let _ = writeln!(s, "bins                : {}", self.n_bins);
        let _ = writeln!(s, "largest bin (bytes) : {}", self.max_bin_bytes);
        let _ = writeln!(s, "signature length    : {}", self.signature_length);
        let _ = writeln!(s, "LUT prefix length   : {}", self.lut_prefix_length);
        let _ = writeln!(s, "peak grant          : {}", self.stage2_peak_grant);
        let _ = writeln!(s, "parked bins         : {}", self.spilled_bins);
        for (bin, grant) in &self.oversized_bins {
            let _ = writeln!(s, "oversized bin {bin}    : granted {grant} bytes");
        }
        s
    }
}

/// First error raised by any worker; later ones are dropped.
#[derive(Default)]
struct Failure {
    set: AtomicBool,
    error: Mutex<Option<Error>>,
}

impl Failure {
    fn raise(&self, e: Error) {
        let mut slot = self.error.lock().unwrap();
        if slot.is_none() {
            *slot = Some(e);
        }
        self.set.store(true, Ordering::SeqCst);
    }

    fn is_set(&self) -> bool {
        self.set.load(Ordering::SeqCst)
    }

    fn take(&self) -> Option<Error> {
        self.error.lock().unwrap().take()
    }
}

struct GateState {
    in_use: u64,
    peak: u64,
    waiting: usize,
    aborted: bool,
}

/// Byte budget shared by sorters and parked outputs.
///
/// A request larger than the whole capacity is granted once nothing else
/// holds memory, so an oversized bin runs alone with exactly its need.
pub struct MemoryGate {
    capacity: u64,
    state: Mutex<GateState>,
    cv: Condvar,
}

impl MemoryGate {
    pub fn new(capacity: u64) -> Self {
        MemoryGate {
            capacity,
            state: Mutex::new(GateState { in_use: 0, peak: 0, waiting: 0, aborted: false }),
            cv: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Block until `need` bytes fit; `None` once the gate is aborted.
    pub fn acquire(&self, need: u64) -> Option<u64> {
        let mut st = self.state.lock().unwrap();
        st.waiting += 1;
        self.cv.notify_all();
        while !st.aborted && st.in_use != 0 && st.in_use + need > self.capacity {
            st = self.cv.wait(st).unwrap();
        }
        st.waiting -= 1;
        if st.aborted {
            return None;
        }
        st.in_use += need;
        st.peak = st.peak.max(st.in_use);
        Some(need)
    }

    pub fn release(&self, amount: u64) {
        if amount == 0 {
            return;
        }
        let mut st = self.state.lock().unwrap();
        st.in_use -= amount;
        self.cv.notify_all();
    }

    pub fn has_waiters(&self) -> bool {
        self.state.lock().unwrap().waiting > 0
    }

    pub fn in_use(&self) -> u64 {
        self.state.lock().unwrap().in_use
    }

    pub fn peak(&self) -> u64 {
        self.state.lock().unwrap().peak
    }

    pub fn abort(&self) {
        self.state.lock().unwrap().aborted = true;
        self.cv.notify_all();
    }
}

struct Stage1Output {
    bins: BinSet,
    reads: u64,
}

/// Count the k-mers of `config.inputs` into the database at `config.output`.
pub fn run(config: &CountConfig) -> Result<RunStats> {
    config.validate()?;
    let k = config.k;
    let m = config.effective_m();
    let scheme = SignatureScheme::new(m, config.signature_mode);
    let cores = config
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);

    let t0 = Instant::now();
    let mut sizes = Vec::with_capacity(config.inputs.len());
    let mut compressed = false;
    for path in &config.inputs {
        sizes.push(std::fs::metadata(path).map_err(|e| Error::io_at(path, e))?.len());
        compressed |= is_gzip(path)?;
    }
    let (readers, splitters) = match config.manual_threads {
        Some(t) => (t.readers, t.splitters),
        None => plan_stage1(cores, &sizes, compressed),
    };
    let readers = readers.min(config.inputs.len()).max(1);

    let hist = sample_histogram(&config.inputs, config.format, k, &scheme, SampleBudget::default())?;
    let mapping = build_mapping(&hist, config.max_bins);
    let n_bins = mapping.n_bins();

    let queue_bytes = config.memory_bytes / 4;
    let half = (queue_bytes / 2) as usize;
    let block_size = (half / (readers + splitters + 4)).clamp(64 << 10, 8 << 20);
    let parts_capacity = (half / block_size).saturating_sub(readers + splitters).clamp(2, 64);
    let chunk_bytes = ((queue_bytes / (splitters * n_bins) as u64) as usize).clamp(4 << 10, 64 << 10);
    let chunks_capacity = (half / chunk_bytes).clamp(4, 4096);
    let stage1_bytes = ((parts_capacity + 2 * (readers + splitters)) * block_size
        + (splitters * n_bins + chunks_capacity) * chunk_bytes) as u64;
    let mut plan = ResourcePlan {
        cores,
        n_readers: readers,
        n_splitters: splitters,
        block_size,
        parts_capacity,
        chunk_bytes,
        chunks_capacity,
        stage1_bytes,
        stage2_bytes: stage2_budget(config.memory_bytes),
        ..ResourcePlan::default()
    };

    let run_dir = tempfile::Builder::new()
        .prefix("kcount-")
        .tempdir_in(&config.work_dir)
        .map_err(|e| Error::io_at(&config.work_dir, e))?;
    let storage = if config.ram_only { StorageMode::Ram } else { StorageMode::Disk(run_dir.path().to_path_buf()) };
    let stage1 = stage_one(config, &scheme, &mapping, &plan, storage)?;
    let stage1_time = t0.elapsed();

    let bin_stats = stage1.bins.stats().to_vec();
    let total_kmers: u64 = bin_stats.iter().map(|s| s.kmers).sum();
    let counter_size = counter_size_for(config.counter_cap);
    let lut = config
        .lut_prefix_length
        .unwrap_or_else(|| default_lut_prefix_length(k, n_bins, total_kmers, counter_size));
    let settings = DbSettings {
        k,
        lut_prefix_length: lut,
        signature_length: m,
        counter_size,
        min_count: config.min_count.min(u32::MAX as u64) as u32,
        max_count: config.max_count.min(u32::MAX as u64) as u32,
    };
    let layout = settings.layout();
    let needs: Vec<u64> = bin_stats.iter().map(|s| bin_memory_need(s, k, config.x, &layout)).collect();
    let (n_sorters, threads_per_sorter) = match config.manual_threads {
        Some(t) => (t.sorters, vec![t.sorting_threads; t.sorters]),
        None => plan_stage2(cores, plan.stage2_bytes, &needs),
    };
    plan.n_sorters = n_sorters;
    plan.threads_per_sorter = threads_per_sorter;

    let t1 = Instant::now();
    let stage2 = stage_two(config, &stage1.bins, &mapping, settings, &needs, &plan, run_dir.path())?;
    let stage2_time = t1.elapsed();
    drop(stage1.bins);
    run_dir.close().map_err(|e| Error::io_at(&config.work_dir, e))?;

    let bin_bytes: u64 = bin_stats.iter().map(|s| s.bytes).sum();
    let ram_bins = if config.ram_only { bin_bytes } else { 0 };
    Ok(RunStats {
        reads: stage1.reads,
        super_kmers: bin_stats.iter().map(|s| s.super_kmers).sum(),
        total_kmers: stage2.merge.total,
        unique_kmers: stage2.merge.unique,
        below_min: stage2.merge.below_min,
        above_max: stage2.merge.above_max,
        stored_kmers: stage2.merge.emitted,
        kx_records: stage2.merge.records,
        n_bins,
        max_bin_bytes: bin_stats.iter().map(|s| s.bytes).max().unwrap_or(0),
        bin_bytes,
        peak_memory_estimate: plan.stage1_bytes.max(stage2.peak_grant + ram_bins),
        stage2_peak_grant: stage2.peak_grant,
        oversized_bins: stage2.oversized,
        spilled_bins: stage2.spilled,
        signature_length: m,
        lut_prefix_length: lut,
        plan,
        header: Some(stage2.header),
        stage1_time,
        stage2_time,
    })
}

fn stage_one(
    config: &CountConfig,
    scheme: &SignatureScheme,
    mapping: &BinMapping,
    plan: &ResourcePlan,
    storage: StorageMode,
) -> Result<Stage1Output> {
    let mut writer = BinWriter::new(mapping.n_bins(), storage)?;
    let (part_tx, part_rx) = bounded::<ReadBlock>(plan.parts_capacity);
    let (chunk_tx, chunk_rx) = bounded::<BinChunk>(plan.chunks_capacity);
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..config.inputs.len()).collect());
    let failure = Failure::default();
    let reads = AtomicU64::new(0);

    std::thread::scope(|s| {
        let (queue, failure, reads) = (&queue, &failure, &reads);
        for _ in 0..plan.n_readers {
            let tx = part_tx.clone();
            s.spawn(move || loop {
                if failure.is_set() {
                    return;
                }
                let Some(idx) = queue.lock().unwrap().pop_front() else { return };
                let path = &config.inputs[idx];
                let reader = match BlockReader::open(path, idx, config.format, plan.block_size) {
                    Ok(r) => r,
                    Err(e) => return failure.raise(e),
                };
                for block in reader {
                    match block {
                        Ok(b) => {
                            if tx.send(b).is_err() {
                                return;
                            }
                        }
                        Err(e) => return failure.raise(e),
                    }
                    if failure.is_set() {
                        return;
                    }
                }
            });
        }
        drop(part_tx);
        for _ in 0..plan.n_splitters {
            let rx = part_rx.clone();
            let tx = chunk_tx.clone();
            s.spawn(move || {
                let n_bins = mapping.n_bins();
                let k = config.k;
                let mut bufs: Vec<BinChunk> =
                    (0..n_bins as u32).map(|bin| BinChunk { bin, ..BinChunk::default() }).collect();
                let mut segment = Vec::new();
                let mut scratch = Vec::new();
                let mut closed = false;
                for block in rx.iter() {
                    if failure.is_set() || closed {
                        return;
                    }
                    reads.fetch_add(block.reads as u64, Ordering::Relaxed);
                    block.for_each_sequence(|read| {
                        for_each_segment(read, k, &mut segment, |codes| {
                            scheme.for_each_super_kmer(codes, k, &mut scratch, |start, end, sig| {
                                let bin = mapping.bin_of(sig);
                                let chunk = &mut bufs[bin as usize];
                                if chunk.data.capacity() == 0 {
                                    chunk.data.reserve(plan.chunk_bytes + 1024);
                                }
                                for_each_piece(start, end, k, |ps, pe| {
                                    push_record(&codes[ps..pe], &mut chunk.data);
                                    chunk.super_kmers += 1;
                                    chunk.kmers += (pe - ps + 1 - k) as u64;
                                });
                                if chunk.data.len() >= plan.chunk_bytes && !closed {
                                    let full = std::mem::replace(chunk, BinChunk { bin, ..BinChunk::default() });
                                    closed = tx.send(full).is_err();
                                }
                            });
                        });
                    });
                }
                for chunk in bufs.into_iter().filter(|c| !c.data.is_empty()) {
                    if failure.is_set() || tx.send(chunk).is_err() {
                        return;
                    }
                }
            });
        }
        drop(part_rx);
        drop(chunk_tx);
        for chunk in chunk_rx.iter() {
            if failure.is_set() {
                break;
            }
            if let Err(e) = writer.append(chunk) {
                failure.raise(e);
                break;
            }
        }
        drop(chunk_rx);
    });
    if let Some(e) = failure.take() {
        return Err(e);
    }
    Ok(Stage1Output { bins: writer.finish()?, reads: reads.into_inner() })
}

struct Stage2Output {
    merge: MergeStats,
    header: DbHeader,
    peak_grant: u64,
    oversized: Vec<(u32, u64)>,
    spilled: usize,
}

struct Finished {
    out: BinOutput,
    accounted: u64,
}

enum Parked {
    Ram(BinOutput, u64),
    Disk(PathBuf),
}

fn spill_path(dir: &Path, bin: u32) -> PathBuf {
    dir.join(format!("sorted_{bin}.out"))
}

fn stage_two(
    config: &CountConfig,
    bins: &BinSet,
    mapping: &BinMapping,
    settings: DbSettings,
    needs: &[u64],
    plan: &ResourcePlan,
    run_dir: &Path,
) -> Result<Stage2Output> {
    let gate = MemoryGate::new(plan.stage2_bytes);
    let mut order: Vec<u32> = (0..needs.len() as u32).filter(|&b| needs[b as usize] > 0).collect();
    order.sort_by(|&a, &b| needs[b as usize].cmp(&needs[a as usize]).then(a.cmp(&b)));
    let mut expected: Vec<u32> = order.clone();
    expected.sort_unstable();

    let mut oversized = Vec::new();
    for &b in &order {
        let need = needs[b as usize];
        if need > gate.capacity() {
            if config.strict_memory {
                return Err(Error::OversizedBin { bin: b, required: need, granted: gate.capacity() });
            }
            oversized.push((b, need));
        }
    }

    let params = BinCountParams {
        k: config.k,
        x: config.x,
        canonical: config.canonical,
        filter: CountFilter {
            min_count: config.min_count,
            max_count: config.max_count,
            counter_cap: config.counter_cap,
        },
        threads: 1,
    };
    let layout = settings.layout();
    let failure = Failure::default();
    let merged = Mutex::new(MergeStats::default());
    let (work_tx, work_rx) = bounded::<(u32, u64)>(0);
    let (done_tx, done_rx) = bounded::<Finished>(plan.n_sorters);
    let ram_only = config.ram_only;
    let park_limit = plan.n_sorters;
    let mut writer = Some(DbWriter::create(&config.output, settings, mapping)?);
    let mut spilled = 0usize;
    let mut header = None;

    std::thread::scope(|s| {
        let (gate, failure, merged) = (&gate, &failure, &merged);
        for &threads in &plan.threads_per_sorter {
            let rx = work_rx.clone();
            let tx = done_tx.clone();
            s.spawn(move || {
                for (bin, grant) in rx.iter() {
                    if failure.is_set() {
                        break;
                    }
                    let result = (|| -> Result<Finished> {
                        let data = bins.load(bin)?;
                        bins.release(bin)?;
                        let mut builder = BinOutputBuilder::new(bin, layout);
                        let mut push_error = None;
                        let st = count_bin(&data, BinCountParams { threads, ..params }, |w, c| {
                            if push_error.is_none() {
                                if let Err(e) = builder.push(w, c) {
                                    push_error = Some(e);
                                }
                            }
                        })?;
                        if let Some(e) = push_error {
                            return Err(e);
                        }
                        drop(data);
                        merged.lock().unwrap().add(&st);
                        let out = builder.finish();
                        let accounted = (out.heap_bytes() as u64).min(grant);
                        gate.release(grant - accounted);
                        Ok(Finished { out, accounted })
                    })();
                    match result {
                        Ok(f) => {
                            if tx.send(f).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            failure.raise(e);
                            gate.abort();
                            break;
                        }
                    }
                }
            });
        }
        drop(work_rx);
        drop(done_tx);

        let writer = &mut writer;
        let spilled = &mut spilled;
        let header = &mut header;
        let expected = &expected;
        s.spawn(move || {
            let result = (|| -> Result<DbHeader> {
                let w = writer.as_mut().expect("writer present");
                let mut parked: BTreeMap<u32, Parked> = BTreeMap::new();
                let mut in_ram = 0usize;
                let mut next = 0usize;
                let mut park = |bin: u32, out: BinOutput, accounted: u64| -> Result<Parked> {
                    let path = spill_path(run_dir, bin);
                    let f = File::create(&path).map_err(|e| Error::io_at(&path, e))?;
                    let mut bw = BufWriter::new(f);
                    out.write_to(&mut bw)
                        .and_then(|_| std::io::Write::flush(&mut bw))
                        .map_err(|e| Error::io_at(&path, e))?;
                    drop(out);
                    gate.release(accounted);
                    *spilled += 1;
                    Ok(Parked::Disk(path))
                };
                let mut drain = |parked: &mut BTreeMap<u32, Parked>, in_ram: &mut usize, next: &mut usize| -> Result<()> {
                    while *next < expected.len() {
                        let Some(p) = parked.remove(&expected[*next]) else { break };
                        match p {
                            Parked::Ram(out, accounted) => {
                                w.write_bin(&out)?;
                                drop(out);
                                gate.release(accounted);
                                *in_ram -= 1;
                            }
                            Parked::Disk(path) => {
                                let f = File::open(&path).map_err(|e| Error::io_at(&path, e))?;
                                let out = BinOutput::read_from(&mut BufReader::new(f)).map_err(|e| Error::io_at(&path, e))?;
                                w.write_bin(&out)?;
                                std::fs::remove_file(&path).map_err(|e| Error::io_at(&path, e))?;
                            }
                        }
                        *next += 1;
                    }
                    Ok(())
                };
                loop {
                    if failure.is_set() {
                        return Err(Error::InvariantViolation("aborted".into()));
                    }
                    match done_rx.recv_timeout(Duration::from_millis(20)) {
                        Ok(Finished { out, accounted }) => {
                            let bin = out.bin;
                            if ram_only {
                                gate.release(accounted);
                                parked.insert(bin, Parked::Ram(out, 0));
                            } else {
                                parked.insert(bin, Parked::Ram(out, accounted));
                            }
                            in_ram += 1;
                            drain(&mut parked, &mut in_ram, &mut next)?;
                            if !ram_only && in_ram > park_limit {
                                // park the bin needed last
                                let far = parked
                                    .iter()
                                    .rev()
                                    .find(|(_, p)| matches!(p, Parked::Ram(..)))
                                    .map(|(&b, _)| b)
                                    .expect("a bin is held in memory");
                                if let Some(Parked::Ram(out, acc)) = parked.remove(&far) {
                                    parked.insert(far, park(far, out, acc)?);
                                    in_ram -= 1;
                                }
                            }
                        }
                        Err(RecvTimeoutError::Timeout) => {
                            if !ram_only && in_ram > 0 && gate.has_waiters() {
                                let held: Vec<u32> = parked
                                    .iter()
                                    .filter(|(_, p)| matches!(p, Parked::Ram(..)))
                                    .map(|(&b, _)| b)
                                    .collect();
                                for b in held {
                                    if let Some(Parked::Ram(out, acc)) = parked.remove(&b) {
                                        parked.insert(b, park(b, out, acc)?);
                                        in_ram -= 1;
                                    }
                                }
                            }
                        }
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
                if failure.is_set() {
                    return Err(Error::InvariantViolation("aborted".into()));
                }
                if next != expected.len() {
                    return Err(Error::InvariantViolation(format!(
                        "{} of {} bins reached the database",
                        next,
                        expected.len()
                    )));
                }
                writer.take().expect("writer present").finish()
            })();
            match result {
                Ok(h) => *header = Some(h),
                Err(e) => {
                    failure.raise(e);
                    gate.abort();
                }
            }
        });

        for &bin in &order {
            if failure.is_set() {
                break;
            }
            let Some(grant) = gate.acquire(needs[bin as usize]) else { break };
            if work_tx.send((bin, grant)).is_err() {
                gate.release(grant);
                break;
            }
        }
        drop(work_tx);
    });

    if let Some(e) = failure.take() {
        return Err(e);
    }
    let merge = merged.into_inner().unwrap();
    Ok(Stage2Output {
        merge,
        header: header.expect("completer finished"),
        peak_grant: gate.peak(),
        oversized,
        spilled,
    })
}
