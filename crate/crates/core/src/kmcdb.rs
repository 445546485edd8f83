//! The two-file counted k-mer database.
//!
//! `<name>.kmc_pre` holds, between two `KMCP` markers, one prefix array of
//! `4^p` u64 record indices per bin plus a trailing guard, the signature to
//! array map, the header and the header's distance from the end. Records in
//! `<name>.kmc_suf` (between `KMCS` markers) carry the remaining `k - p`
//! symbols followed by a little-endian counter. All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::binning::BinMapping;
use crate::error::{Error, Result};
use crate::seq::words::{self, append_be_bytes, extract_window};
use crate::seq::PackedSeq;
use crate::signature::{SignatureMode, SignatureScheme};

pub const PREFIX_MARKER: &[u8; 4] = b"KMCP";
pub const SUFFIX_MARKER: &[u8; 4] = b"KMCS";
pub const VERSION: u32 = 0x200;
pub const HEADER_BYTES: usize = 68;
/// Upper bound for the default prefix length.
pub const MAX_DEFAULT_LUT_PREFIX: usize = 12;

pub fn prefix_path(base: &Path) -> PathBuf {
    with_suffix(base, ".kmc_pre")
}

pub fn suffix_path(base: &Path) -> PathBuf {
    with_suffix(base, ".kmc_suf")
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DbHeader {
    pub kmer_length: u32,
    pub mode: u32,
    pub counter_size: u32,
    pub lut_prefix_length: u32,
    pub signature_length: u32,
    pub min_count: u32,
    pub max_count: u32,
    pub total_kmers: u64,
    pub tmp: [u32; 7],
    pub version: u32,
}

impl DbHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        let mut at = 0;
        let mut put = |bytes: &[u8]| {
            out[at..at + bytes.len()].copy_from_slice(bytes);
            at += bytes.len();
        };
        for v in [
            self.kmer_length,
            self.mode,
            self.counter_size,
            self.lut_prefix_length,
            self.signature_length,
            self.min_count,
            self.max_count,
        ] {
            put(&v.to_le_bytes());
        }
        put(&self.total_kmers.to_le_bytes());
        for v in self.tmp {
            put(&v.to_le_bytes());
        }
        put(&self.version.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_BYTES]) -> Self {
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let mut tmp = [0u32; 7];
        for (i, t) in tmp.iter_mut().enumerate() {
            *t = u32_at(36 + 4 * i);
        }
        DbHeader {
            kmer_length: u32_at(0),
            mode: u32_at(4),
            counter_size: u32_at(8),
            lut_prefix_length: u32_at(12),
            signature_length: u32_at(16),
            min_count: u32_at(20),
            max_count: u32_at(24),
            total_kmers: u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
            tmp,
            version: u32_at(64),
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidHeader { path: path.to_path_buf(), reason });
        if self.version != VERSION {
            return bad(format!("version {:#x}, expected {VERSION:#x}", self.version));
        }
        if self.mode != 0 {
            return bad(format!("unsupported counter mode {}", self.mode));
        }
        if !(1..=4).contains(&self.counter_size) {
            return bad(format!("counter size {} outside 1..=4", self.counter_size));
        }
        let (k, p) = (self.kmer_length, self.lut_prefix_length);
        if k == 0 || k as usize > crate::seq::MAX_K {
            return bad(format!("k-mer length {k} out of range"));
        }
        if p > k || (k - p) % 4 != 0 || p as usize > 15 {
            return bad(format!("prefix length {p} incompatible with k {k}"));
        }
        if !(1..=11).contains(&self.signature_length) || self.signature_length > k {
            return bad(format!("signature length {} out of range", self.signature_length));
        }
        Ok(())
    }

    pub fn layout(&self) -> RecordLayout {
        RecordLayout {
            k: self.kmer_length as usize,
            lut_prefix_length: self.lut_prefix_length as usize,
            counter_size: self.counter_size as usize,
        }
    }
}

/// Smallest counter width in bytes able to hold `cap`.
pub fn counter_size_for(cap: u64) -> u32 {
    match cap {
        0..=0xff => 1,
        0x100..=0xffff => 2,
        0x1_0000..=0xff_ffff => 3,
        _ => 4,
    }
}

/// Prefix lengths allowed for `k`: `p <= k` with `4 | (k - p)`.
pub fn valid_lut_prefix_lengths(k: usize) -> impl Iterator<Item = usize> {
    (k % 4..=k.min(15)).step_by(4)
}

/// Largest valid prefix length up to 12 whose arrays take at most four
/// times the estimated suffix storage; the smallest valid one otherwise.
pub fn default_lut_prefix_length(k: usize, n_bins: usize, estimated_kmers: u64, counter_size: u32) -> usize {
    let mut chosen = k % 4;
    for p in valid_lut_prefix_lengths(k).filter(|&p| p <= MAX_DEFAULT_LUT_PREFIX) {
        let lut = n_bins as u128 * (1u128 << (2 * p)) * 8;
        let suffix = estimated_kmers as u128 * ((k - p) / 4 + counter_size as usize) as u128;
        if lut <= 4 * suffix {
            chosen = p;
        }
    }
    chosen
}

/// How one k-mer is split into LUT prefix, stored suffix and counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordLayout {
    pub k: usize,
    pub lut_prefix_length: usize,
    pub counter_size: usize,
}

impl RecordLayout {
    pub fn suffix_bytes(&self) -> usize {
        (self.k - self.lut_prefix_length) / 4
    }

    pub fn record_bytes(&self) -> usize {
        self.suffix_bytes() + self.counter_size
    }

    pub fn prefix_count(&self) -> usize {
        1 << (2 * self.lut_prefix_length)
    }

    /// LUT prefix of a left-aligned k-mer.
    #[inline]
    pub fn prefix_of(&self, kmer: &[u64]) -> usize {
        match self.lut_prefix_length {
            0 => 0,
            p => (kmer[0] >> (64 - 2 * p)) as usize,
        }
    }

    /// Append the packed suffix of a left-aligned k-mer.
    pub fn push_suffix(&self, kmer: &[u64], scratch: &mut Vec<u64>, out: &mut Vec<u8>) {
        let n = self.k - self.lut_prefix_length;
        scratch.clear();
        scratch.resize(words::words_for(n), 0);
        extract_window(kmer, self.lut_prefix_length, n, scratch);
        append_be_bytes(scratch, self.suffix_bytes(), out);
    }

    pub fn push_counter(&self, count: u32, out: &mut Vec<u8>) {
        out.extend_from_slice(&count.to_le_bytes()[..self.counter_size]);
    }

    pub fn read_counter(&self, bytes: &[u8]) -> u32 {
        let mut le = [0u8; 4];
        le[..self.counter_size].copy_from_slice(&bytes[..self.counter_size]);
        u32::from_le_bytes(le)
    }

    /// Rebuild the k-mer from its prefix and suffix bytes.
    pub fn join(&self, prefix: usize, suffix: &[u8]) -> PackedSeq {
        let p = self.lut_prefix_length;
        let mut codes = Vec::with_capacity(self.k);
        codes.extend((0..p).map(|i| ((prefix >> (2 * (p - 1 - i))) & 3) as u8));
        for &b in suffix {
            codes.extend_from_slice(&[b >> 6, (b >> 4) & 3, (b >> 2) & 3, b & 3]);
        }
        PackedSeq::from_codes(&codes)
    }
}

/// The encoded records of one bin plus the population of each LUT prefix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinOutput {
    pub bin: u32,
    pub kmers: u64,
    /// `(prefix, records)` in ascending prefix order, empty prefixes omitted.
    pub prefix_runs: Vec<(u32, u32)>,
    pub records: Vec<u8>,
}

impl BinOutput {
    pub fn heap_bytes(&self) -> usize {
        self.prefix_runs.capacity() * 8 + self.records.capacity()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.bin.to_le_bytes())?;
        w.write_all(&self.kmers.to_le_bytes())?;
        w.write_all(&(self.prefix_runs.len() as u64).to_le_bytes())?;
        for &(p, n) in &self.prefix_runs {
            w.write_all(&p.to_le_bytes())?;
            w.write_all(&n.to_le_bytes())?;
        }
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&self.records)
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let bin = u32::from_le_bytes(b4);
        r.read_exact(&mut b8)?;
        let kmers = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let runs = u64::from_le_bytes(b8) as usize;
        let mut prefix_runs = Vec::with_capacity(runs);
        for _ in 0..runs {
            r.read_exact(&mut b4)?;
            let p = u32::from_le_bytes(b4);
            r.read_exact(&mut b4)?;
            prefix_runs.push((p, u32::from_le_bytes(b4)));
        }
        r.read_exact(&mut b8)?;
        let mut records = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut records)?;
        Ok(BinOutput { bin, kmers, prefix_runs, records })
    }
}

/// Encodes the strictly increasing k-mer stream of one bin.
pub struct BinOutputBuilder {
    layout: RecordLayout,
    out: BinOutput,
    last: Vec<u64>,
    scratch: Vec<u64>,
}

impl BinOutputBuilder {
    pub fn new(bin: u32, layout: RecordLayout) -> Self {
        BinOutputBuilder {
            layout,
            out: BinOutput { bin, ..BinOutput::default() },
            last: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn push(&mut self, kmer: &[u64], count: u32) -> Result<()> {
        if !self.last.is_empty() && kmer <= &self.last[..] {
            return Err(Error::InvariantViolation(format!(
                "bin {} k-mer stream is not strictly increasing",
                self.out.bin
            )));
        }
        self.last.clear();
        self.last.extend_from_slice(kmer);
        let prefix = self.layout.prefix_of(kmer) as u32;
        match self.out.prefix_runs.last_mut() {
            Some((p, n)) if *p == prefix => *n += 1,
            _ => self.out.prefix_runs.push((prefix, 1)),
        }
        self.layout.push_suffix(kmer, &mut self.scratch, &mut self.out.records);
        self.layout.push_counter(count, &mut self.out.records);
        self.out.kmers += 1;
        Ok(())
    }

    pub fn finish(mut self) -> BinOutput {
        self.out.records.shrink_to_fit();
        self.out
    }
}

/// Parameters recorded in the header and used for encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DbSettings {
    pub k: usize,
    pub lut_prefix_length: usize,
    pub signature_length: usize,
    pub counter_size: u32,
    pub min_count: u32,
    pub max_count: u32,
}

impl DbSettings {
    pub fn layout(&self) -> RecordLayout {
        RecordLayout {
            k: self.k,
            lut_prefix_length: self.lut_prefix_length,
            counter_size: self.counter_size as usize,
        }
    }

    fn check(&self) -> Result<()> {
        let p = self.lut_prefix_length;
        if p > self.k || !(self.k - p).is_multiple_of(4) || p > 15 {
            return Err(Error::InvalidConfig(format!(
                "prefix length {p} must not exceed k = {} and must differ from it by a multiple of 4",
                self.k
            )));
        }
        if !(1..=4).contains(&self.counter_size) {
            return Err(Error::InvalidConfig(format!("counter size {}", self.counter_size)));
        }
        Ok(())
    }
}

/// Streams bins, in ascending id order, into the two database files.
pub struct DbWriter {
    settings: DbSettings,
    map: Vec<u32>,
    n_bins: usize,
    next_bin: usize,
    written: u64,
    pre_path: PathBuf,
    suf_path: PathBuf,
    pre: BufWriter<File>,
    suf: BufWriter<File>,
    buf: Vec<u8>,
    finished: bool,
}

impl DbWriter {
    pub fn create(base: &Path, settings: DbSettings, mapping: &BinMapping) -> Result<Self> {
        settings.check()?;
        let pre_path = prefix_path(base);
        let suf_path = suffix_path(base);
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io_at(p, e));
        let mut pre = open(&pre_path)?;
        let mut suf = open(&suf_path)?;
        pre.write_all(PREFIX_MARKER).map_err(|e| Error::io_at(&pre_path, e))?;
        suf.write_all(SUFFIX_MARKER).map_err(|e| Error::io_at(&suf_path, e))?;
        Ok(DbWriter {
            settings,
            map: mapping.table().to_vec(),
            n_bins: mapping.n_bins(),
            next_bin: 0,
            written: 0,
            pre_path,
            suf_path,
            pre,
            suf,
            buf: Vec::new(),
            finished: false,
        })
    }

    /// Append one bin. Bins skipped since the previous call are written empty.
    pub fn write_bin(&mut self, out: &BinOutput) -> Result<()> {
        let bin = out.bin as usize;
        if bin < self.next_bin || bin >= self.n_bins {
            return Err(Error::InvariantViolation(format!(
                "bin {bin} written out of order (next expected {})",
                self.next_bin
            )));
        }
        let layout = self.settings.layout();
        if out.records.len() as u64 != out.kmers * layout.record_bytes() as u64 {
            return Err(Error::InvariantViolation(format!("bin {bin} record bytes do not match its k-mer count")));
        }
        while self.next_bin < bin {
            self.write_array(&[])?;
        }
        self.suf.write_all(&out.records).map_err(|e| Error::io_at(&self.suf_path, e))?;
        self.write_array(&out.prefix_runs)?;
        self.written += out.kmers;
        Ok(())
    }

    fn write_array(&mut self, runs: &[(u32, u32)]) -> Result<()> {
        let n = self.settings.layout().prefix_count();
        let mut entry = self.written;
        let mut runs = runs.iter().peekable();
        self.buf.clear();
        for p in 0..n {
            while let Some(&&(rp, count)) = runs.peek() {
                if (rp as usize) < p {
                    entry += count as u64;
                    runs.next();
                } else {
                    break;
                }
            }
            self.buf.extend_from_slice(&entry.to_le_bytes());
            if self.buf.len() >= 1 << 16 {
                self.pre.write_all(&self.buf).map_err(|e| Error::io_at(&self.pre_path, e))?;
                self.buf.clear();
            }
        }
        self.pre.write_all(&self.buf).map_err(|e| Error::io_at(&self.pre_path, e))?;
        self.next_bin += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DbHeader> {
        while self.next_bin < self.n_bins {
            self.write_array(&[])?;
        }
        let header = DbHeader {
            kmer_length: self.settings.k as u32,
            mode: 0,
            counter_size: self.settings.counter_size,
            lut_prefix_length: self.settings.lut_prefix_length as u32,
            signature_length: self.settings.signature_length as u32,
            min_count: self.settings.min_count,
            max_count: self.settings.max_count,
            total_kmers: self.written,
            tmp: [0; 7],
            version: VERSION,
        };
        let mut tail = Vec::with_capacity(8 + self.map.len() * 4 + HEADER_BYTES + 8);
        tail.extend_from_slice(&self.written.to_le_bytes());
        for &m in &self.map {
            tail.extend_from_slice(&m.to_le_bytes());
        }
        tail.extend_from_slice(&header.to_bytes());
        tail.extend_from_slice(&(HEADER_BYTES as u32).to_le_bytes());
        tail.extend_from_slice(PREFIX_MARKER);
        let pre_path = self.pre_path.clone();
        let suf_path = self.suf_path.clone();
        self.pre.write_all(&tail).map_err(|e| Error::io_at(&pre_path, e))?;
        self.suf.write_all(SUFFIX_MARKER).map_err(|e| Error::io_at(&suf_path, e))?;
        self.pre.flush().map_err(|e| Error::io_at(&pre_path, e))?;
        self.suf.flush().map_err(|e| Error::io_at(&suf_path, e))?;
        self.finished = true;
        Ok(header)
    }
}

impl Drop for DbWriter {
    fn drop(&mut self) {
        if !self.finished {
            let _ = std::fs::remove_file(&self.pre_path);
            let _ = std::fs::remove_file(&self.suf_path);
        }
    }
}

/// Write a complete database from bins already encoded.
pub fn write_database(base: &Path, settings: DbSettings, mapping: &BinMapping, bins: &[BinOutput]) -> Result<DbHeader> {
    let mut w = DbWriter::create(base, settings, mapping)?;
    for b in bins {
        w.write_bin(b)?;
    }
    w.finish()
}

/// Record range `[entry(p), entry(p + 1))` of LUT prefix `prefix` in array `array`.
pub fn prefix_range(prefixes: &[u64], prefix_count: usize, array: usize, prefix: usize) -> Range<u64> {
    let at = array * prefix_count + prefix;
    prefixes[at]..prefixes[at + 1]
}

struct Listing {
    reader: BufReader<File>,
    index: u64,
    slot: usize,
    eof: bool,
    buf: Vec<u8>,
}

enum Access {
    Random { records: Vec<u8> },
    Listing(Box<Listing>),
}

/// An opened database.
pub struct Db {
    header: DbHeader,
    layout: RecordLayout,
    suf_path: PathBuf,
    n_bins: usize,
    map: Vec<u32>,
    prefixes: Vec<u64>,
    scheme: SignatureScheme,
    canonical: bool,
    min_count: u32,
    max_count: u32,
    access: Access,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io_at(path, e))
}

impl Db {
    pub fn open_for_random_access(base: &Path) -> Result<Self> {
        Self::open(base, true)
    }

    pub fn open_for_listing(base: &Path) -> Result<Self> {
        Self::open(base, false)
    }

    fn open(base: &Path, random: bool) -> Result<Self> {
        let pre_path = prefix_path(base);
        let suf_path = suffix_path(base);
        let pre = read_file(&pre_path)?;
        let parsed = parse_prefix_file(&pre_path, &pre)?;
        let header = parsed.header;
        let layout = header.layout();

        let suf_len = std::fs::metadata(&suf_path).map_err(|e| Error::io_at(&suf_path, e))?.len();
        let expected = 8 + header.total_kmers * layout.record_bytes() as u64;
        let access = if random {
            let suf = read_file(&suf_path)?;
            check_suffix_markers(&suf_path, &suf[..suf.len().min(4)], &suf[suf.len().saturating_sub(4)..])?;
            if suf.len() as u64 != expected {
                return Err(Error::TruncatedFile { path: suf_path, expected, actual: suf.len() as u64 });
            }
            Access::Random { records: suf[4..suf.len() - 4].to_vec() }
        } else {
            let mut f = File::open(&suf_path).map_err(|e| Error::io_at(&suf_path, e))?;
            let mut head = [0u8; 4];
            let mut tail = [0u8; 4];
            if suf_len >= 8 {
                use std::io::{Seek, SeekFrom};
                f.read_exact(&mut head).map_err(|e| Error::io_at(&suf_path, e))?;
                f.seek(SeekFrom::End(-4)).map_err(|e| Error::io_at(&suf_path, e))?;
                f.read_exact(&mut tail).map_err(|e| Error::io_at(&suf_path, e))?;
                f.seek(SeekFrom::Start(4)).map_err(|e| Error::io_at(&suf_path, e))?;
            }
            check_suffix_markers(&suf_path, &head, &tail)?;
            if suf_len != expected {
                return Err(Error::TruncatedFile { path: suf_path, expected, actual: suf_len });
            }
            Access::Listing(Box::new(Listing {
                reader: BufReader::with_capacity(1 << 20, f),
                index: 0,
                slot: 0,
                eof: false,
                buf: vec![0; layout.record_bytes()],
            }))
        };
        Ok(Db {
            header,
            layout,
            suf_path,
            n_bins: parsed.n_bins,
            map: parsed.map,
            prefixes: parsed.prefixes,
            scheme: SignatureScheme::new(header.signature_length as usize, SignatureMode::Signatures),
            canonical: true,
            min_count: header.min_count,
            max_count: header.max_count,
            access,
        })
    }

    pub fn info(&self) -> &DbHeader {
        &self.header
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn map(&self) -> &[u32] {
        &self.map
    }

    pub fn prefixes(&self) -> &[u64] {
        &self.prefixes
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }

    pub fn max_count(&self) -> u32 {
        self.max_count
    }

    pub fn set_min_count(&mut self, value: u32) {
        self.min_count = value;
    }

    pub fn set_max_count(&mut self, value: u32) {
        self.max_count = value;
    }

    /// Query k-mers as given instead of canonicalizing them; for databases
    /// built with canonical counting turned off.
    pub fn set_canonical(&mut self, canonical: bool) {
        self.canonical = canonical;
    }

    /// Signature rules used to locate a query's bin. Must match the rules
    /// the database was built with.
    pub fn set_signature_mode(&mut self, mode: SignatureMode) {
        self.scheme = SignatureScheme::new(self.header.signature_length as usize, mode);
    }

    fn passes(&self, count: u32) -> bool {
        count >= self.min_count && count <= self.max_count
    }

    /// Count of `kmer`, or `None` when absent or filtered out.
    pub fn check_kmer(&self, kmer: &PackedSeq) -> Result<Option<u32>> {
        let Access::Random { records } = &self.access else {
            return Err(Error::WrongMode { expected: "random access" });
        };
        let k = self.layout.k;
        if kmer.len() != k {
            return Err(Error::WrongLength { expected: k, actual: kmer.len() });
        }
        let query = if self.canonical { kmer.canonical().0 } else { kmer.clone() };
        let sig = self.scheme.signature_of_kmer(&query);
        let array = self.map[sig.index()] as usize;
        let w = query.to_words();
        let range = prefix_range(&self.prefixes, self.layout.prefix_count(), array, self.layout.prefix_of(&w));
        let mut suffix = Vec::with_capacity(self.layout.suffix_bytes());
        self.layout.push_suffix(&w, &mut Vec::new(), &mut suffix);

        let rb = self.layout.record_bytes();
        let sb = self.layout.suffix_bytes();
        let (mut lo, mut hi) = (range.start as usize, range.end as usize);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let rec = &records[mid * rb..(mid + 1) * rb];
            match rec[..sb].cmp(&suffix[..]) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => {
                    let count = self.layout.read_counter(&rec[sb..]);
                    return Ok(self.passes(count).then_some(count));
                }
            }
        }
        Ok(None)
    }

    /// Next stored k-mer passing the count filters, in (bin, prefix, suffix)
    /// order. Once the end is reached this keeps returning `None` until
    /// [`Db::restart_listing`].
    pub fn read_next_kmer(&mut self) -> Result<Option<(PackedSeq, u32)>> {
        let (min, max) = (self.min_count, self.max_count);
        let layout = self.layout;
        let total = self.header.total_kmers;
        let pc = layout.prefix_count();
        let Access::Listing(l) = &mut self.access else {
            return Err(Error::WrongMode { expected: "listing" });
        };
        while !l.eof {
            if l.index >= total {
                l.eof = true;
                break;
            }
            l.reader.read_exact(&mut l.buf).map_err(|e| Error::io_at(&self.suf_path, e))?;
            while self.prefixes[l.slot + 1] <= l.index {
                l.slot += 1;
            }
            l.index += 1;
            let sb = layout.suffix_bytes();
            let count = layout.read_counter(&l.buf[sb..]);
            if count >= min && count <= max {
                return Ok(Some((layout.join(l.slot % pc, &l.buf[..sb]), count)));
            }
        }
        Ok(None)
    }

    pub fn restart_listing(&mut self) -> Result<()> {
        let Access::Listing(l) = &mut self.access else {
            return Err(Error::WrongMode { expected: "listing" });
        };
        use std::io::{Seek, SeekFrom};
        l.reader.seek(SeekFrom::Start(4)).map_err(|e| Error::io_at(&self.suf_path, e))?;
        l.index = 0;
        l.slot = 0;
        l.eof = false;
        Ok(())
    }

    /// True once listing has run past the last record.
    pub fn eof(&self) -> bool {
        match &self.access {
            Access::Listing(l) => l.eof,
            Access::Random { .. } => false,
        }
    }

    /// All k-mers passing the filters, regardless of access mode.
    pub fn iter_all(&self) -> Result<Vec<(PackedSeq, u32)>> {
        let records = match &self.access {
            Access::Random { records } => records.clone(),
            Access::Listing(_) => {
                let suf = read_file(&self.suf_path)?;
                suf[4..suf.len() - 4].to_vec()
            }
        };
        let rb = self.layout.record_bytes();
        let sb = self.layout.suffix_bytes();
        let pc = self.layout.prefix_count();
        let mut out = Vec::new();
        let mut slot = 0;
        for i in 0..self.header.total_kmers as usize {
            while self.prefixes[slot + 1] <= i as u64 {
                slot += 1;
            }
            let rec = &records[i * rb..(i + 1) * rb];
            let count = self.layout.read_counter(&rec[sb..]);
            if self.passes(count) {
                out.push((self.layout.join(slot % pc, &rec[..sb]), count));
            }
        }
        Ok(out)
    }
}

fn check_suffix_markers(path: &Path, head: &[u8], tail: &[u8]) -> Result<()> {
    if head != SUFFIX_MARKER {
        return Err(Error::BadMarker { path: path.to_path_buf(), which: "leading KMCS" });
    }
    if tail != SUFFIX_MARKER {
        return Err(Error::BadMarker { path: path.to_path_buf(), which: "trailing KMCS" });
    }
    Ok(())
}

struct ParsedPrefix {
    header: DbHeader,
    n_bins: usize,
    map: Vec<u32>,
    prefixes: Vec<u64>,
}

fn parse_prefix_file(path: &Path, data: &[u8]) -> Result<ParsedPrefix> {
    let len = data.len();
    if len < 4 || &data[..4] != PREFIX_MARKER {
        return Err(Error::BadMarker { path: path.to_path_buf(), which: "leading KMCP" });
    }
    if len < 8 || &data[len - 4..] != PREFIX_MARKER {
        return Err(Error::BadMarker { path: path.to_path_buf(), which: "trailing KMCP" });
    }
    if len < 12 {
        return Err(Error::TruncatedFile { path: path.to_path_buf(), expected: 12, actual: len as u64 });
    }
    let position = u32::from_le_bytes(data[len - 8..len - 4].try_into().unwrap());
    if (position as usize) < HEADER_BYTES || position as usize + 12 > len {
        return Err(Error::BadHeaderPosition { path: path.to_path_buf(), position });
    }
    let header_at = len - 8 - position as usize;
    let header = DbHeader::from_bytes(data[header_at..header_at + HEADER_BYTES].try_into().unwrap());
    header.validate(path)?;
    let layout = header.layout();

    let map_len = (1usize << (2 * header.signature_length)) + 1;
    let map_bytes = map_len * 4;
    let pc = layout.prefix_count();
    let prefix_region = header_at.checked_sub(4 + map_bytes).filter(|&r| r >= 8 && (r / 8 - 1) % pc == 0 && r % 8 == 0);
    let Some(region) = prefix_region else {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: (4 + 8 + map_bytes + HEADER_BYTES + 8) as u64,
            actual: len as u64,
        });
    };
    let n_entries = region / 8;
    let n_bins = (n_entries - 1) / pc;
    let prefixes: Vec<u64> = data[4..4 + region]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let map: Vec<u32> = data[4 + region..header_at]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let invalid = |reason: &str| Err(Error::InvalidHeader { path: path.to_path_buf(), reason: reason.to_string() });
    if prefixes.last() != Some(&header.total_kmers) {
        return invalid("prefix guard differs from total k-mer count");
    }
    if prefixes.windows(2).any(|w| w[0] > w[1]) {
        return invalid("prefix entries decrease");
    }
    if map.iter().any(|&b| b as usize >= n_bins.max(1)) {
        return invalid("signature map names a missing prefix array");
    }
    Ok(ParsedPrefix { header, n_bins, map, prefixes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::build_mapping;
    use crate::binning::SignatureHistogram;
    use crate::signature::SignatureScheme;
    use std::collections::BTreeMap;

    fn settings(k: usize, p: usize, m: usize) -> DbSettings {
        DbSettings { k, lut_prefix_length: p, signature_length: m, counter_size: 1, min_count: 1, max_count: 255 }
    }

    fn mapping(m: usize, bins: usize) -> BinMapping {
        let scheme = SignatureScheme::new(m, SignatureMode::Signatures);
        build_mapping(&SignatureHistogram::new(scheme.id_count()), bins)
    }

    /// Encode a k-mer -> count table with the given mapping.
    fn encode(counts: &BTreeMap<String, u32>, s: DbSettings, map: &BinMapping) -> Vec<BinOutput> {
        let scheme = SignatureScheme::new(s.signature_length, SignatureMode::Signatures);
        let mut per_bin: Vec<Vec<(PackedSeq, u32)>> = vec![Vec::new(); map.n_bins()];
        for (kmer, &c) in counts {
            let seq: PackedSeq = kmer.parse().unwrap();
            per_bin[map.bin_of(scheme.signature_of_kmer(&seq)) as usize].push((seq, c));
        }
        per_bin
            .into_iter()
            .enumerate()
            .map(|(bin, mut v)| {
                v.sort();
                let mut b = BinOutputBuilder::new(bin as u32, s.layout());
                for (seq, c) in v {
                    b.push(&seq.to_words(), c).unwrap();
                }
                b.finish()
            })
            .collect()
    }

    #[test]
    fn header_roundtrip_and_size() {
        let h = DbHeader {
            kmer_length: 27,
            mode: 0,
            counter_size: 2,
            lut_prefix_length: 7,
            signature_length: 7,
            min_count: 2,
            max_count: 1_000_000_000,
            total_kmers: 1 << 40,
            tmp: [0; 7],
            version: VERSION,
        };
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), 68);
        assert_eq!(&bytes[64..], &0x200u32.to_le_bytes());
        assert_eq!(DbHeader::from_bytes(&bytes), h);
    }

    #[test]
    fn counter_size_and_prefix_rules() {
        assert_eq!(counter_size_for(255), 1);
        assert_eq!(counter_size_for(256), 2);
        assert_eq!(counter_size_for(65_535), 2);
        assert_eq!(counter_size_for(1 << 20), 3);
        assert_eq!(counter_size_for(u32::MAX as u64), 4);
        assert_eq!(valid_lut_prefix_lengths(27).collect::<Vec<_>>(), vec![3, 7, 11, 15]);
        assert_eq!(valid_lut_prefix_lengths(4).collect::<Vec<_>>(), vec![0, 4]);
        // nothing fits for an empty input: fall back to the smallest
        assert_eq!(default_lut_prefix_length(27, 512, 0, 1), 3);
        assert_eq!(default_lut_prefix_length(27, 512, 1 << 40, 1), 11);
        let p = default_lut_prefix_length(28, 512, 100_000_000, 1);
        assert!(valid_lut_prefix_lengths(28).any(|q| q == p));
        assert!(512u64 * (1 << (2 * p)) * 8 <= 4 * 100_000_000 * ((28 - p as u64) / 4 + 1));
    }

    #[test]
    fn empty_database_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("empty");
        let map = mapping(5, 4);
        let h = write_database(&base, settings(8, 4, 5), &map, &[]).unwrap();
        assert_eq!(h.total_kmers, 0);
        let pre = std::fs::read(prefix_path(&base)).unwrap();
        assert_eq!(&pre[..4], b"KMCP");
        assert_eq!(&pre[pre.len() - 4..], b"KMCP");
        assert_eq!(u32::from_le_bytes(pre[pre.len() - 8..pre.len() - 4].try_into().unwrap()), 68);
        let suf = std::fs::read(suffix_path(&base)).unwrap();
        assert_eq!(suf, b"KMCSKMCS");
        let mut db = Db::open_for_listing(&base).unwrap();
        assert_eq!(db.info(), &h);
        assert!(db.prefixes().iter().all(|&e| e == 0));
        assert_eq!(db.prefixes().len(), 4 * 256 + 1);
        assert_eq!(db.read_next_kmer().unwrap(), None);
        assert!(db.eof());
    }

    #[test]
    fn small_database_lists_and_queries() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("db");
        let counts: BTreeMap<String, u32> = [("ACGT", 2), ("CGTA", 2), ("GTAC", 1)].iter().map(|(s, c)| (s.to_string(), *c)).collect();
        let s = settings(4, 0, 3);
        let map = mapping(3, 3);
        let bins = encode(&counts, s, &map);
        let header = write_database(&base, s, &map, &bins).unwrap();
        assert_eq!(header.total_kmers, 3);

        let mut listed = Db::open_for_listing(&base).unwrap();
        let mut got = BTreeMap::new();
        while let Some((kmer, c)) = listed.read_next_kmer().unwrap() {
            got.insert(kmer.to_string(), c);
        }
        assert_eq!(got, counts);
        // end of stream latches until restart
        assert!(listed.eof());
        assert_eq!(listed.read_next_kmer().unwrap(), None);
        listed.restart_listing().unwrap();
        assert!(!listed.eof());
        assert!(listed.read_next_kmer().unwrap().is_some());
        assert!(matches!(listed.check_kmer(&"ACGT".parse().unwrap()), Err(Error::WrongMode { .. })));

        let mut ra = Db::open_for_random_access(&base).unwrap();
        assert_eq!(ra.check_kmer(&"ACGT".parse().unwrap()).unwrap(), Some(2));
        // reverse complement of CGTA is TACG
        assert_eq!(ra.check_kmer(&"TACG".parse().unwrap()).unwrap(), Some(2));
        assert_eq!(ra.check_kmer(&"GTAC".parse().unwrap()).unwrap(), Some(1));
        assert_eq!(ra.check_kmer(&"AAAA".parse().unwrap()).unwrap(), None);
        assert!(matches!(ra.check_kmer(&"ACG".parse().unwrap()), Err(Error::WrongLength { expected: 4, actual: 3 })));
        ra.set_min_count(2);
        assert_eq!(ra.check_kmer(&"GTAC".parse().unwrap()).unwrap(), None);
        assert!(matches!(ra.read_next_kmer(), Err(Error::WrongMode { .. })));

        listed.restart_listing().unwrap();
        listed.set_min_count(3);
        assert_eq!(listed.read_next_kmer().unwrap(), None);
    }

    #[test]
    fn suffix_packing_matches_sequence_packing() {
        let layout = RecordLayout { k: 8, lut_prefix_length: 0, counter_size: 1 };
        let mut out = Vec::new();
        let seq: PackedSeq = "CCACAAAT".parse().unwrap();
        layout.push_suffix(&seq.to_words(), &mut Vec::new(), &mut out);
        assert_eq!(out, vec![0x51, 0x03]);
        let layout = RecordLayout { k: 8, lut_prefix_length: 4, counter_size: 1 };
        assert_eq!(layout.prefix_of(&seq.to_words()), 0x51);
        assert_eq!(layout.join(0x51, &[0x03]), seq);
    }

    #[test]
    fn worked_query_example() {
        let scheme = SignatureScheme::new(5, SignatureMode::Signatures);
        let kmer: PackedSeq = "ATACGACAAATG".parse().unwrap();
        let sig = scheme.signature_of_kmer(&kmer);
        assert_eq!(PackedSeq::from_mmer_index(sig.0 as u64, 5).to_string(), "ACGAC");
        assert_eq!(sig.index(), 97);
        let layout = RecordLayout { k: 12, lut_prefix_length: 4, counter_size: 1 };
        let prefix = layout.prefix_of(&kmer.to_words());
        assert_eq!(prefix, 49);
        let mut prefixes = vec![0u64; 2 * 256 + 1];
        prefixes[256 + 49] = 1523;
        prefixes[256 + 50] = 1685;
        assert_eq!(prefix_range(&prefixes, 256, 1, prefix), 1523..1685);
    }

    #[test]
    fn corruption_is_reported_per_check() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("db");
        let counts: BTreeMap<String, u32> = [("ACGTACGT", 3)].iter().map(|(s, c)| (s.to_string(), *c)).collect();
        let s = settings(8, 4, 3);
        let map = mapping(3, 2);
        write_database(&base, s, &map, &encode(&counts, s, &map)).unwrap();
        let pre = std::fs::read(prefix_path(&base)).unwrap();
        let suf = std::fs::read(suffix_path(&base)).unwrap();
        let n = pre.len();

        let reopen = |pre: &[u8], suf: &[u8]| {
            std::fs::write(prefix_path(&base), pre).unwrap();
            std::fs::write(suffix_path(&base), suf).unwrap();
            Db::open_for_random_access(&base).err()
        };
        let mut p = pre.clone();
        p[n - 1] = b'X';
        assert!(matches!(reopen(&p, &suf), Some(Error::BadMarker { which: "trailing KMCP", .. })));
        let mut p = pre.clone();
        p[0] = b'X';
        assert!(matches!(reopen(&p, &suf), Some(Error::BadMarker { which: "leading KMCP", .. })));
        let mut p = pre.clone();
        p[n - 8..n - 4].copy_from_slice(&(n as u32).to_le_bytes());
        assert!(matches!(reopen(&p, &suf), Some(Error::BadHeaderPosition { .. })));
        assert!(matches!(reopen(&pre, &suf[..suf.len() - 5]), Some(Error::BadMarker { .. })));
        let mut short = suf[..suf.len() - 5].to_vec();
        short.extend_from_slice(b"KMCS");
        assert!(matches!(reopen(&pre, &short), Some(Error::TruncatedFile { .. })));
        assert!(reopen(&pre, &suf).is_none());
    }

    #[test]
    fn writer_rejects_unsorted_streams_and_disorder() {
        let layout = RecordLayout { k: 4, lut_prefix_length: 0, counter_size: 1 };
        let mut b = BinOutputBuilder::new(0, layout);
        b.push(&"ACGT".parse::<PackedSeq>().unwrap().to_words(), 1).unwrap();
        assert!(matches!(
            b.push(&"AAAA".parse::<PackedSeq>().unwrap().to_words(), 1),
            Err(Error::InvariantViolation(_))
        ));
        assert!(b.push(&"ACGT".parse::<PackedSeq>().unwrap().to_words(), 1).is_err());

        let dir = tempfile::tempdir().unwrap();
        let map = mapping(3, 3);
        let mut w = DbWriter::create(&dir.path().join("x"), settings(4, 0, 3), &map).unwrap();
        w.write_bin(&BinOutput { bin: 2, ..Default::default() }).unwrap();
        assert!(w.write_bin(&BinOutput { bin: 1, ..Default::default() }).is_err());
        drop(w);
        assert!(!prefix_path(&dir.path().join("x")).exists());
    }

    #[test]
    fn spill_roundtrip() {
        let out = BinOutput { bin: 7, kmers: 2, prefix_runs: vec![(1, 1), (9, 1)], records: vec![1, 2, 3, 4] };
        let mut buf = Vec::new();
        out.write_to(&mut buf).unwrap();
        assert_eq!(BinOutput::read_from(&mut buf.as_slice()).unwrap(), out);
    }
}
