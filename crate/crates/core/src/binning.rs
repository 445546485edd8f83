//! Signature sampling, signature-to-bin mapping and temporary bin storage.
//!
//! Super k-mers travel to bins as length-prefixed records: a 2-byte
//! little-endian symbol count followed by the packed bases. A bin is either
//! a file `kmc_<bin>.bin` in the working directory or, in RAM-only mode, an
//! in-memory buffer.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::seq::PackedSeq;
use crate::seqio::{for_each_segment, BlockReader, InputFormat};
use crate::signature::{SignatureId, SignatureScheme};

pub const MAX_BINS: usize = 512;
pub const MAX_RECORD_SYMBOLS: usize = u16::MAX as usize;

/// Super k-mer counts per signature id, reserved slot included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignatureHistogram {
    counts: Vec<u64>,
}

impl SignatureHistogram {
    pub fn new(id_count: usize) -> Self {
        SignatureHistogram {
            counts: vec![0; id_count],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        SignatureHistogram { counts }
    }

    pub fn add(&mut self, sig: SignatureId) {
        self.counts[sig.index()] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// How much of each input the sampling pass reads.
#[derive(Clone, Copy, Debug)]
pub struct SampleBudget {
    pub fraction: f64,
    pub cap_bytes: u64,
}

impl Default for SampleBudget {
    fn default() -> Self {
        SampleBudget {
            fraction: 0.05,
            cap_bytes: 32 << 20,
        }
    }
}

impl SampleBudget {
    pub fn bytes_for(&self, file_len: u64) -> u64 {
        ((file_len as f64 * self.fraction) as u64).min(self.cap_bytes)
    }
}

const SAMPLE_BLOCK: usize = 64 << 10;

/// Histogram of super k-mer signatures over a prefix of every input.
///
/// Each input is read in 64 KiB blocks until its budget is spent; at least
/// one block is always taken, so tiny inputs are sampled whole.
pub fn sample_histogram(
    inputs: &[PathBuf],
    format: InputFormat,
    k: usize,
    scheme: &SignatureScheme,
    budget: SampleBudget,
) -> Result<SignatureHistogram> {
    let mut hist = SignatureHistogram::new(scheme.id_count());
    let mut segment = Vec::new();
    let mut scratch = Vec::new();
    for (source, path) in inputs.iter().enumerate() {
        let len = fs::metadata(path).map_err(|e| Error::io_at(path, e))?.len();
        let limit = budget.bytes_for(len);
        let mut reader = BlockReader::open(path, source, format, SAMPLE_BLOCK)?;
        while let Some(block) = reader.next() {
            let block = block?;
            block.for_each_sequence(|read| {
                for_each_segment(read, k, &mut segment, |codes| {
                    scheme.for_each_super_kmer(codes, k, &mut scratch, |_, _, sig| hist.add(sig));
                });
            });
            if reader.consumed() >= limit {
                break;
            }
        }
    }
    Ok(hist)
}

/// Total map from signature id to bin id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinMapping {
    table: Vec<u32>,
    n_bins: u32,
}

impl BinMapping {
    pub fn from_table(table: Vec<u32>, n_bins: u32) -> Self {
        debug_assert!(table.iter().all(|&b| b < n_bins));
        BinMapping { table, n_bins }
    }

    #[inline]
    pub fn bin_of(&self, sig: SignatureId) -> u32 {
        self.table[sig.index()]
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins as usize
    }

    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.table.len() + 4);
        out.extend_from_slice(&self.n_bins.to_le_bytes());
        for b in &self.table {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }
}

/// Merge signatures into at most `max_bins` bins.
///
/// Sampled signatures go largest-first to the currently lightest bin (ties
/// to the lower bin id); unsampled ones are dealt round-robin afterwards.
pub fn build_mapping(hist: &SignatureHistogram, max_bins: usize) -> BinMapping {
    assert!(max_bins >= 1);
    let ids = hist.counts.len();
    let n_bins = max_bins.min(ids).max(1);
    let mut table = vec![0u32; ids];

    let mut sampled: Vec<(u64, usize)> = hist
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(id, &c)| (c, id))
        .collect();
    sampled.sort_by_key(|&(c, id)| (Reverse(c), id));

    let mut loads: BinaryHeap<Reverse<(u64, u32)>> =
        (0..n_bins as u32).map(|b| Reverse((0, b))).collect();
    for (count, id) in sampled {
        let Reverse((load, bin)) = loads.pop().expect("heap holds every bin");
        table[id] = bin;
        loads.push(Reverse((load + count, bin)));
    }

    for (j, id) in (0..ids).filter(|&id| hist.counts[id] == 0).enumerate() {
        table[id] = (j % n_bins) as u32;
    }

    BinMapping {
        table,
        n_bins: n_bins as u32,
    }
}

/// Append one super k-mer record. `codes.len()` must not exceed
/// [`MAX_RECORD_SYMBOLS`].
pub fn push_record(codes: &[u8], out: &mut Vec<u8>) {
    debug_assert!(codes.len() <= MAX_RECORD_SYMBOLS);
    out.extend_from_slice(&(codes.len() as u16).to_le_bytes());
    for chunk in codes.chunks(4) {
        let mut byte = 0u8;
        for (i, &c) in chunk.iter().enumerate() {
            byte |= c << (6 - 2 * i);
        }
        out.push(byte);
    }
}

pub fn record_size(symbols: usize) -> usize {
    2 + symbols.div_ceil(4)
}

pub fn serialize_super_kmer(sk: &PackedSeq) -> Result<Vec<u8>> {
    if sk.len() > MAX_RECORD_SYMBOLS {
        return Err(Error::OversizeRecord { len: sk.len() });
    }
    let mut out = Vec::with_capacity(record_size(sk.len()));
    out.extend_from_slice(&(sk.len() as u16).to_le_bytes());
    out.extend_from_slice(sk.as_bytes());
    Ok(out)
}

/// Decode the record at the start of `bytes`, returning it and its size.
pub fn deserialize_super_kmer(bytes: &[u8]) -> Result<(PackedSeq, usize)> {
    let mut it = RecordIter::new(bytes);
    match it.next() {
        Some(rec) => {
            let (len, packed) = rec?;
            Ok((PackedSeq::from_packed(packed.to_vec(), len), record_size(len)))
        }
        None => Err(Error::InvariantViolation("empty record buffer".into())),
    }
}

/// Cut `[start, end)` into pieces of at most [`MAX_RECORD_SYMBOLS`] symbols
/// overlapping by `k - 1`, so every k-mer lands in exactly one piece.
pub fn for_each_piece<F: FnMut(usize, usize)>(start: usize, end: usize, k: usize, mut f: F) {
    let mut s = start;
    loop {
        let e = end.min(s + MAX_RECORD_SYMBOLS);
        f(s, e);
        if e == end {
            break;
        }
        s = e + 1 - k;
    }
}

/// Iterator over `(symbol count, packed bytes)` records of a bin buffer.
pub struct RecordIter<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> RecordIter<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        RecordIter { data, pos: 0 }
    }
}

impl<'a> Iterator for RecordIter<'a> {
    type Item = Result<(usize, &'a [u8])>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.data.len() {
            return None;
        }
        let rest = &self.data[self.pos..];
        if rest.len() < 2 {
            self.pos = self.data.len();
            return Some(Err(Error::InvariantViolation("truncated bin record header".into())));
        }
        let len = u16::from_le_bytes([rest[0], rest[1]]) as usize;
        let n = len.div_ceil(4);
        if rest.len() < 2 + n {
            self.pos = self.data.len();
            return Some(Err(Error::InvariantViolation("truncated bin record".into())));
        }
        self.pos += 2 + n;
        Some(Ok((len, &rest[2..2 + n])))
    }
}

pub fn unpack_codes(packed: &[u8], len: usize, out: &mut Vec<u8>) {
    out.clear();
    out.reserve(len);
    for i in 0..len {
        out.push((packed[i / 4] >> (6 - 2 * (i % 4))) & 3);
    }
}

/// Serialized super k-mers bound for one bin.
#[derive(Clone, Debug, Default)]
pub struct BinChunk {
    pub bin: u32,
    pub data: Vec<u8>,
    pub super_kmers: u64,
    pub kmers: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinStats {
    pub bytes: u64,
    pub super_kmers: u64,
    pub kmers: u64,
}

#[derive(Clone, Debug)]
pub enum StorageMode {
    Disk(PathBuf),
    Ram,
}

pub fn bin_path(dir: &Path, bin: u32) -> PathBuf {
    dir.join(format!("kmc_{bin}.bin"))
}

enum WriterBackend {
    Disk { dir: PathBuf, files: Vec<Option<File>> },
    Ram { bufs: Vec<Vec<u8>> },
}

/// Append side of the bin store, owned by the disk writer.
pub struct BinWriter {
    backend: WriterBackend,
    stats: Vec<BinStats>,
}

impl BinWriter {
    pub fn new(n_bins: usize, mode: StorageMode) -> Result<Self> {
        let backend = match mode {
            StorageMode::Disk(dir) => {
                fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
                WriterBackend::Disk {
                    dir,
                    files: (0..n_bins).map(|_| None).collect(),
                }
            }
            StorageMode::Ram => WriterBackend::Ram {
                bufs: vec![Vec::new(); n_bins],
            },
        };
        Ok(BinWriter {
            backend,
            stats: vec![BinStats::default(); n_bins],
        })
    }

    pub fn append(&mut self, chunk: BinChunk) -> Result<()> {
        let bin = chunk.bin as usize;
        let st = &mut self.stats[bin];
        st.bytes += chunk.data.len() as u64;
        st.super_kmers += chunk.super_kmers;
        st.kmers += chunk.kmers;
        match &mut self.backend {
            WriterBackend::Disk { dir, files } => {
                let path = bin_path(dir, chunk.bin);
                if files[bin].is_none() {
                    let f = OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(true)
                        .open(&path)
                        .map_err(|e| Error::io_at(&path, e))?;
                    files[bin] = Some(f);
                }
                let file = files[bin].as_mut().expect("opened above");
                file.write_all(&chunk.data).map_err(|e| Error::io_at(&path, e))?;
            }
            WriterBackend::Ram { bufs } => {
                if bufs[bin].is_empty() {
                    bufs[bin] = chunk.data;
                } else {
                    bufs[bin].extend_from_slice(&chunk.data);
                }
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> &[BinStats] {
        &self.stats
    }

    pub fn finish(mut self) -> Result<BinSet> {
        let stats = std::mem::take(&mut self.stats);
        let backend = match std::mem::replace(&mut self.backend, WriterBackend::Ram { bufs: Vec::new() }) {
            WriterBackend::Disk { dir, files } => {
                let mut present = Vec::with_capacity(files.len());
                for (bin, f) in files.into_iter().enumerate() {
                    present.push(f.is_some());
                    if let Some(f) = f {
                        let path = bin_path(&dir, bin as u32);
                        f.sync_data().map_err(|e| Error::io_at(&path, e))?;
                    }
                }
                SetBackend::Disk {
                    dir,
                    present: Mutex::new(present),
                }
            }
            WriterBackend::Ram { bufs } => SetBackend::Ram {
                bufs: Mutex::new(bufs.into_iter().map(Some).collect()),
            },
        };
        Ok(BinSet { backend, stats })
    }
}

impl Drop for BinWriter {
    fn drop(&mut self) {
        if let WriterBackend::Disk { dir, files } = &mut self.backend {
            for (bin, f) in files.iter_mut().enumerate() {
                if f.take().is_some() {
                    let _ = fs::remove_file(bin_path(dir, bin as u32));
                }
            }
        }
    }
}

enum SetBackend {
    Disk { dir: PathBuf, present: Mutex<Vec<bool>> },
    Ram { bufs: Mutex<Vec<Option<Vec<u8>>>> },
}

/// Read side of the bin store. Temporary files still present when the set
/// is dropped are removed.
pub struct BinSet {
    backend: SetBackend,
    stats: Vec<BinStats>,
}

impl BinSet {
    pub fn n_bins(&self) -> usize {
        self.stats.len()
    }

    pub fn stats(&self) -> &[BinStats] {
        &self.stats
    }

    pub fn is_ram(&self) -> bool {
        matches!(self.backend, SetBackend::Ram { .. })
    }

    /// Bytes currently held on disk by bin files.
    pub fn disk_usage(&self) -> Result<u64> {
        match &self.backend {
            SetBackend::Disk { dir, present } => {
                let present = present.lock().unwrap();
                let mut total = 0;
                for (bin, &p) in present.iter().enumerate() {
                    if p {
                        let path = bin_path(dir, bin as u32);
                        total += fs::metadata(&path).map_err(|e| Error::io_at(&path, e))?.len();
                    }
                }
                Ok(total)
            }
            SetBackend::Ram { .. } => Ok(0),
        }
    }

    /// Raw bytes of a bin. In RAM-only mode the buffer is handed over and a
    /// second load returns nothing.
    pub fn load(&self, bin: u32) -> Result<Vec<u8>> {
        match &self.backend {
            SetBackend::Disk { dir, present } => {
                if !present.lock().unwrap()[bin as usize] {
                    return Ok(Vec::new());
                }
                let path = bin_path(dir, bin);
                fs::read(&path).map_err(|e| Error::io_at(&path, e))
            }
            SetBackend::Ram { bufs } => Ok(bufs.lock().unwrap()[bin as usize].take().unwrap_or_default()),
        }
    }

    /// Every super k-mer appended to `bin`, in append order.
    pub fn read_all(&self, bin: u32) -> Result<Vec<PackedSeq>> {
        let data = match &self.backend {
            SetBackend::Ram { bufs } => bufs.lock().unwrap()[bin as usize].clone().unwrap_or_default(),
            SetBackend::Disk { .. } => self.load(bin)?,
        };
        RecordIter::new(&data)
            .map(|r| r.map(|(len, packed)| PackedSeq::from_packed(packed.to_vec(), len)))
            .collect()
    }

    /// Drop a counted bin, deleting its temporary file.
    pub fn release(&self, bin: u32) -> Result<()> {
        match &self.backend {
            SetBackend::Disk { dir, present } => {
                let was = std::mem::replace(&mut present.lock().unwrap()[bin as usize], false);
                if was {
                    let path = bin_path(dir, bin);
                    fs::remove_file(&path).map_err(|e| Error::io_at(&path, e))?;
                }
            }
            SetBackend::Ram { bufs } => {
                bufs.lock().unwrap()[bin as usize] = None;
            }
        }
        Ok(())
    }
}

impl Drop for BinSet {
    fn drop(&mut self) {
        if let SetBackend::Disk { dir, present } = &self.backend {
            if let Ok(present) = present.lock() {
                for (bin, &p) in present.iter().enumerate() {
                    if p {
                        let _ = fs::remove_file(bin_path(dir, bin as u32));
                    }
                }
            }
        }
    }
}
