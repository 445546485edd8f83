//! Per-bin sorting of (k,x)-mers and the merge that turns them into counts.
//!
//! Records of equal length `k + x'` form a [`LengthClass`] and are radix
//! sorted on their packed words. Every k-mer then sits at some offset
//! `j <= x'` of some record; records of one class that agree on their first
//! `j` symbols yield their offset-`j` windows in sorted order, so each such
//! group becomes one [`StreamCursor`]. A heap merge over all cursors counts
//! equal k-mers in a single linear pass.

use std::cmp::Ordering;
use std::sync::Mutex;

use crate::binning::{unpack_codes, RecordIter};
use crate::error::Result;
use crate::kxmer::{for_each_run, MAX_X};
use crate::seq::words::{self, extract_window, pack_into, pack_rc_into};
use crate::seq::{Orientation, PackedSeq};

/// Sorted records of one length, stored as fixed-stride packed words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LengthClass {
    symbols: usize,
    stride: usize,
    data: Vec<u64>,
}

impl LengthClass {
    pub fn new(symbols: usize) -> Self {
        LengthClass {
            symbols,
            stride: words::words_for(symbols),
            data: Vec::new(),
        }
    }

    pub fn with_capacity(symbols: usize, records: usize) -> Self {
        let mut c = Self::new(symbols);
        c.data.reserve_exact(records * c.stride);
        c
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn record(&self, i: usize) -> &[u64] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn push(&mut self, seq: &PackedSeq) {
        assert_eq!(seq.len(), self.symbols, "record length differs from class");
        self.data.extend_from_slice(&seq.to_words());
    }

    fn push_codes(&mut self, codes: &[u8], orientation: Orientation) {
        let start = self.data.len();
        self.data.resize(start + self.stride, 0);
        let slot = &mut self.data[start..];
        match orientation {
            Orientation::Forward => pack_into(codes, slot),
            Orientation::Reverse => pack_rc_into(codes, slot),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = PackedSeq> + '_ {
        (0..self.len()).map(move |i| PackedSeq::from_words(self.record(i), self.symbols))
    }

    pub fn heap_bytes(&self) -> usize {
        self.data.capacity() * 8
    }

    /// Sort the records in nondecreasing lexicographic order.
    pub fn sort(&mut self, threads: usize) {
        let nbytes = self.symbols.div_ceil(4);
        radix_sort(&mut self.data, self.stride, nbytes, threads.max(1));
    }

    pub fn is_sorted(&self) -> bool {
        (1..self.len()).all(|i| self.record(i - 1) <= self.record(i))
    }
}

/// Sort same-length records (convenience wrapper over [`LengthClass`]).
pub fn sort_length_class(records: &[PackedSeq]) -> LengthClass {
    let symbols = records.first().map_or(0, |r| r.len());
    let mut class = LengthClass::with_capacity(symbols, records.len());
    for r in records {
        class.push(r);
    }
    class.sort(1);
    class
}

#[inline]
fn digit(rec: &[u64], d: usize) -> usize {
    ((rec[d / 8] >> (56 - 8 * (d % 8))) & 0xff) as usize
}

const SMALL_SORT: usize = 48;

fn insertion_sort(data: &mut [u64], stride: usize) {
    let n = data.len() / stride;
    for i in 1..n {
        let mut j = i;
        while j > 0 && data[(j - 1) * stride..j * stride] > data[j * stride..(j + 1) * stride] {
            for w in 0..stride {
                data.swap((j - 1) * stride + w, j * stride + w);
            }
            j -= 1;
        }
    }
}

/// One counting pass on digit `d` from `src` into `dst`. Returns `false`
/// (and moves nothing) when every record has the same digit.
fn counting_pass(src: &[u64], dst: &mut [u64], stride: usize, d: usize) -> bool {
    let n = src.len() / stride;
    let mut counts = [0usize; 256];
    for i in 0..n {
        counts[digit(&src[i * stride..], d)] += 1;
    }
    if counts.contains(&n) {
        return false;
    }
    let mut next = [0usize; 256];
    let mut sum = 0;
    for (slot, &c) in next.iter_mut().zip(counts.iter()) {
        *slot = sum;
        sum += c;
    }
    for i in 0..n {
        let rec = &src[i * stride..(i + 1) * stride];
        let b = digit(rec, d);
        let at = next[b] * stride;
        dst[at..at + stride].copy_from_slice(rec);
        next[b] += 1;
    }
    true
}

/// LSD radix sort of `data` over digits `1..nbytes`, using `tmp` as scratch.
fn lsd_sort(data: &mut [u64], tmp: &mut [u64], stride: usize, nbytes: usize) {
    let n = data.len() / stride;
    if n <= SMALL_SORT {
        insertion_sort(data, stride);
        return;
    }
    let mut in_data = true;
    for d in (1..nbytes).rev() {
        let moved = if in_data {
            counting_pass(data, tmp, stride, d)
        } else {
            counting_pass(tmp, data, stride, d)
        };
        if moved {
            in_data = !in_data;
        }
    }
    if !in_data {
        data.copy_from_slice(tmp);
    }
}

/// MSD split on the leading byte, then LSD inside each of the 256 buckets.
/// Buckets are shared among `threads` workers.
fn radix_sort(data: &mut Vec<u64>, stride: usize, nbytes: usize, threads: usize) {
    let n = data.len() / stride;
    if n <= SMALL_SORT {
        insertion_sort(data, stride);
        return;
    }
    let mut tmp = vec![0u64; data.len()];
    let mut counts = [0usize; 256];
    for i in 0..n {
        counts[digit(&data[i * stride..], 0)] += 1;
    }
    if !counting_pass(data, &mut tmp, stride, 0) {
        std::mem::swap(data, &mut tmp);
    }
    // sorted-by-first-byte records now live in `tmp`
    let mut jobs: Vec<(&mut [u64], &mut [u64])> = Vec::new();
    let (mut rest_src, mut rest_dst): (&mut [u64], &mut [u64]) = (&mut tmp[..], &mut data[..]);
    for &c in counts.iter() {
        let (a, b) = rest_src.split_at_mut(c * stride);
        let (x, y) = rest_dst.split_at_mut(c * stride);
        rest_src = b;
        rest_dst = y;
        if c > 0 {
            jobs.push((a, x));
        }
    }
    let run = |(src, dst): (&mut [u64], &mut [u64])| {
        // sort in `src`, then copy into place
        lsd_sort(src, dst, stride, nbytes);
        dst.copy_from_slice(src);
    };
    if threads <= 1 || n < 1 << 14 {
        jobs.into_iter().for_each(run);
    } else {
        jobs.sort_by_key(|(s, _)| std::cmp::Reverse(s.len()));
        jobs.reverse();
        let queue = Mutex::new(jobs);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let job = queue.lock().unwrap().pop();
                    match job {
                        Some(job) => run(job),
                        None => break,
                    }
                });
            }
        });
    }
}

/// Records of class `class` with identical first `offset` symbols, read at
/// offset `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamCursor {
    pub class: usize,
    pub offset: usize,
    pub start: usize,
    pub end: usize,
}

impl StreamCursor {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Upper bound on cursors for a given `x`: `sum_{x'<=x} sum_{j<=x'} 4^j`.
pub fn max_cursors(x: usize) -> usize {
    (0..=x).map(|xp| (0..=xp).map(|j| 1usize << (2 * j)).sum::<usize>()).sum()
}

/// One cursor per nonempty group of records sharing their first `j`
/// symbols, for each class and each offset `j` it supports.
pub fn build_cursors(classes: &[LengthClass], k: usize) -> Vec<StreamCursor> {
    let mut cursors = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        if class.is_empty() {
            continue;
        }
        let extra = class.symbols - k;
        for offset in 0..=extra {
            let head = |i: usize| {
                if offset == 0 {
                    0
                } else {
                    class.record(i)[0] >> (64 - 2 * offset)
                }
            };
            let mut start = 0;
            while start < class.len() {
                let h = head(start);
                let mut end = start + 1;
                while end < class.len() && head(end) == h {
                    end += 1;
                }
                cursors.push(StreamCursor {
                    class: ci,
                    offset,
                    start,
                    end,
                });
                start = end;
            }
        }
    }
    cursors
}

/// Count thresholds applied when a k-mer's total is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountFilter {
    /// Drop k-mers seen fewer times.
    pub min_count: u64,
    /// Drop k-mers seen more times.
    pub max_count: u64,
    /// Stored counters saturate here.
    pub counter_cap: u64,
}

impl CountFilter {
    pub fn apply(&self, raw: u64) -> Option<u32> {
        if raw < self.min_count || raw > self.max_count {
            None
        } else {
            Some(raw.min(self.counter_cap).min(u32::MAX as u64) as u32)
        }
    }
}

impl Default for CountFilter {
    fn default() -> Self {
        CountFilter {
            min_count: 2,
            max_count: 1_000_000_000,
            counter_cap: 255,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountedKmer {
    pub kmer: PackedSeq,
    pub count: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MergeStats {
    /// Distinct k-mers before filtering.
    pub unique: u64,
    /// Total k-mer occurrences.
    pub total: u64,
    pub below_min: u64,
    pub above_max: u64,
    pub emitted: u64,
    /// (k,x)-mer records sorted to produce these counts.
    pub records: u64,
}

impl MergeStats {
    pub fn add(&mut self, other: &MergeStats) {
        self.unique += other.unique;
        self.total += other.total;
        self.below_min += other.below_min;
        self.above_max += other.above_max;
        self.emitted += other.emitted;
        self.records += other.records;
    }
}

struct CursorState {
    class: usize,
    offset: usize,
    pos: usize,
    end: usize,
}

/// Merge cursors, calling `sink(kmer_words, count)` for every k-mer that
/// passes `filter`, in strictly increasing k-mer order.
pub fn merge_count_with<F>(
    classes: &[LengthClass],
    cursors: &[StreamCursor],
    k: usize,
    filter: CountFilter,
    mut sink: F,
) -> MergeStats
where
    F: FnMut(&[u64], u32),
{
    let kw = words::words_for(k);
    let mut states: Vec<CursorState> = Vec::with_capacity(cursors.len());
    let mut keys: Vec<u64> = Vec::with_capacity(cursors.len() * kw);
    for c in cursors.iter().filter(|c| !c.is_empty()) {
        states.push(CursorState {
            class: c.class,
            offset: c.offset,
            pos: c.start,
            end: c.end,
        });
        let at = keys.len();
        keys.resize(at + kw, 0);
        extract_window(classes[c.class].record(c.start), c.offset, k, &mut keys[at..]);
    }

    let key = |i: usize| -> std::ops::Range<usize> { i * kw..(i + 1) * kw };
    let less = |keys: &[u64], a: usize, b: usize| keys[key(a)] < keys[key(b)];

    let mut heap: Vec<usize> = (0..states.len()).collect();
    let sift_down = |heap: &mut Vec<usize>, keys: &[u64], mut i: usize| loop {
        let l = 2 * i + 1;
        if l >= heap.len() {
            break;
        }
        let r = l + 1;
        let m = if r < heap.len() && less(keys, heap[r], heap[l]) { r } else { l };
        if less(keys, heap[m], heap[i]) {
            heap.swap(i, m);
            i = m;
        } else {
            break;
        }
    };
    for i in (0..heap.len() / 2).rev() {
        sift_down(&mut heap, &keys, i);
    }

    let mut stats = MergeStats::default();
    let mut current = vec![0u64; kw];
    let mut count = 0u64;
    let mut flush = |current: &[u64], count: u64, stats: &mut MergeStats| {
        if count == 0 {
            return;
        }
        stats.unique += 1;
        stats.total += count;
        match filter.apply(count) {
            Some(c) => {
                stats.emitted += 1;
                sink(current, c);
            }
            None if count < filter.min_count => stats.below_min += 1,
            None => stats.above_max += 1,
        }
    };

    while let Some(&top) = heap.first() {
        let r = key(top);
        if count > 0 && current[..] == keys[r.clone()] {
            count += 1;
        } else {
            flush(&current, count, &mut stats);
            current.copy_from_slice(&keys[r.clone()]);
            count = 1;
        }
        let st = &mut states[top];
        st.pos += 1;
        if st.pos < st.end {
            extract_window(classes[st.class].record(st.pos), st.offset, k, &mut keys[r]);
        } else {
            let last = heap.pop().expect("nonempty");
            if heap.is_empty() {
                break;
            }
            heap[0] = last;
        }
        sift_down(&mut heap, &keys, 0);
    }
    flush(&current, count, &mut stats);
    stats
}

/// Collecting form of [`merge_count_with`].
pub fn merge_count(
    classes: &[LengthClass],
    cursors: &[StreamCursor],
    k: usize,
    filter: CountFilter,
) -> Vec<CountedKmer> {
    let mut out = Vec::new();
    merge_count_with(classes, cursors, k, filter, |w, count| {
        out.push(CountedKmer {
            kmer: PackedSeq::from_words(w, k),
            count,
        })
    });
    out
}

/// Parameters for counting one bin.
#[derive(Clone, Copy, Debug)]
pub struct BinCountParams {
    pub k: usize,
    pub x: usize,
    pub canonical: bool,
    pub filter: CountFilter,
    pub threads: usize,
}

/// Expand serialized super k-mers into sorted (k,x)-mer classes.
pub fn build_classes(bin_data: &[u8], k: usize, x: usize, canonical: bool, threads: usize) -> Result<Vec<LengthClass>> {
    assert!(x <= MAX_X);
    let mut codes = Vec::new();
    let mut per_class = [0usize; MAX_X + 1];
    for rec in RecordIter::new(bin_data) {
        let (len, packed) = rec?;
        unpack_codes(packed, len, &mut codes);
        for_each_run(&codes, k, x, canonical, |run| per_class[run.kmers - 1] += 1);
    }
    let mut classes: Vec<LengthClass> = (0..=x)
        .map(|xp| LengthClass::with_capacity(k + xp, per_class[xp]))
        .collect();
    for rec in RecordIter::new(bin_data) {
        let (len, packed) = rec?;
        unpack_codes(packed, len, &mut codes);
        for_each_run(&codes, k, x, canonical, |run| {
            let stretch = &codes[run.first..run.first + run.kmers + k - 1];
            classes[run.kmers - 1].push_codes(stretch, run.orientation);
        });
    }
    for class in &mut classes {
        class.sort(threads);
    }
    Ok(classes)
}

/// Count every k-mer of a serialized bin.
pub fn count_bin<F>(bin_data: &[u8], params: BinCountParams, sink: F) -> Result<MergeStats>
where
    F: FnMut(&[u64], u32),
{
    let classes = build_classes(bin_data, params.k, params.x, params.canonical, params.threads)?;
    let cursors = build_cursors(&classes, params.k);
    debug_assert!(cursors.len() <= max_cursors(params.x));
    let mut stats = merge_count_with(&classes, &cursors, params.k, params.filter, sink);
    stats.records = classes.iter().map(|c| c.len() as u64).sum();
    Ok(stats)
}

/// Lexicographic comparison of left-aligned words, exposed for callers that
/// verify ordering of emitted k-mers.
pub fn cmp_words(a: &[u64], b: &[u64]) -> Ordering {
    a.cmp(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::push_record;
    use crate::kxmer::expand_super_kmer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn seq(s: &str) -> PackedSeq {
        s.parse().unwrap()
    }

    fn strings(class: &LengthClass) -> Vec<String> {
        class.records().map(|r| r.to_string()).collect()
    }

    fn rc_text(s: &str) -> String {
        s.chars()
            .rev()
            .map(|c| match c {
                'A' => 'T',
                'C' => 'G',
                'G' => 'C',
                _ => 'A',
            })
            .collect()
    }

    fn oracle(reads: &[&str], k: usize) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for r in reads {
            for i in 0..=r.len().saturating_sub(k) {
                if r.len() < k {
                    break;
                }
                let w = &r[i..i + k];
                let c = std::cmp::min(w.to_string(), rc_text(w));
                *m.entry(c).or_insert(0) += 1;
            }
        }
        m
    }

    fn worked_example_classes() -> Vec<LengthClass> {
        let records = expand_super_kmer(&seq("ACGCGACGATGAACTGCCATCTCACA"), 15, 1);
        let short: Vec<PackedSeq> = records.iter().filter(|r| r.bases.len() == 15).map(|r| r.bases.clone()).collect();
        let long: Vec<PackedSeq> = records.iter().filter(|r| r.bases.len() == 16).map(|r| r.bases.clone()).collect();
        vec![sort_length_class(&short), sort_length_class(&long)]
    }

    #[test]
    fn worked_example_sorting_and_cursors() {
        let classes = worked_example_classes();
        assert_eq!(strings(&classes[0]), vec!["ACGCGACGATGAACT", "AGATGGCAGTTCATC"]);
        assert_eq!(
            strings(&classes[1]),
            vec!["ACGATGAACTGCCATC", "ATGAACTGCCATCTCA", "CGACGATGAACTGCCA", "GAACTGCCATCTCACA", "GCAGTTCATCGTCGCG"]
        );
        let cursors = build_cursors(&classes, 15);
        assert_eq!(cursors.len(), 5);
        let suffix_sizes: Vec<usize> = cursors.iter().filter(|c| c.class == 1 && c.offset == 1).map(|c| c.len()).collect();
        // R_A, R_C, R_G; R_T is empty and has no cursor
        assert_eq!(suffix_sizes, vec![2, 1, 2]);
        assert!(max_cursors(1) == 6 && max_cursors(0) == 1 && max_cursors(3) == 112);

        let counted = merge_count(&classes, &cursors, 15, CountFilter { min_count: 1, max_count: u64::MAX, counter_cap: 255 });
        let want = oracle(&["ACGCGACGATGAACTGCCATCTCACA"], 15);
        let got: BTreeMap<String, u64> = counted.iter().map(|c| (c.kmer.to_string(), c.count as u64)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn already_sorted_is_unchanged() {
        let recs: Vec<PackedSeq> = ["AAAA", "ACGT", "CCCC", "GGTA", "TTTT"].iter().map(|s| seq(s)).collect();
        assert_eq!(sort_length_class(&recs).records().collect::<Vec<_>>(), recs);
    }

    fn count_reads(reads: &[&str], k: usize, x: usize, filter: CountFilter) -> Vec<(String, u32)> {
        let mut data = Vec::new();
        for r in reads {
            let codes = seq(r).codes();
            push_record(&codes, &mut data);
        }
        let mut out = Vec::new();
        count_bin(&data, BinCountParams { k, x, canonical: true, filter, threads: 1 }, |w, c| {
            out.push((PackedSeq::from_words(w, k).to_string(), c))
        })
        .unwrap();
        out
    }

    #[test]
    fn merge_count_examples() {
        let open = CountFilter { min_count: 1, max_count: u64::MAX, counter_cap: 255 };
        assert_eq!(
            count_reads(&["ACGTACGT"], 4, 3, open),
            vec![("ACGT".into(), 2), ("CGTA".into(), 2), ("GTAC".into(), 1)]
        );
        let ci2 = CountFilter { min_count: 2, ..open };
        assert_eq!(count_reads(&["ACGTACGT"], 4, 3, ci2), vec![("ACGT".into(), 2), ("CGTA".into(), 2)]);
        let read = "C".repeat(304); // 300 copies of CCCCC -> canonical CCCCC
        assert_eq!(count_reads(&[read.as_str()], 5, 2, open), vec![("CCCCC".into(), 255)]);
        let cx = CountFilter { max_count: 299, ..open };
        assert!(count_reads(&[read.as_str()], 5, 2, cx).is_empty());
    }

    #[test]
    fn parallel_sort_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &symbols in &[7usize, 31, 33, 64, 90] {
            let mut a = LengthClass::new(symbols);
            for _ in 0..40_000 {
                let codes: Vec<u8> = (0..symbols).map(|_| rng.gen_range(0..4)).collect();
                a.push(&PackedSeq::from_codes(&codes));
            }
            let mut b = a.clone();
            let mut reference: Vec<PackedSeq> = a.records().collect();
            reference.sort();
            a.sort(1);
            b.sort(4);
            assert!(a.is_sorted());
            assert_eq!(a, b);
            assert_eq!(a.records().collect::<Vec<_>>(), reference);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sort_matches_std(recs in proptest::collection::vec(proptest::collection::vec(0u8..4, 37), 0..400)) {
            let seqs: Vec<PackedSeq> = recs.iter().map(|c| PackedSeq::from_codes(c)).collect();
            let mut want = seqs.clone();
            want.sort();
            let got: Vec<PackedSeq> = if seqs.is_empty() { vec![] } else { sort_length_class(&seqs).records().collect() };
            prop_assert_eq!(got, want);
        }

        #[test]
        fn counts_match_oracle_for_every_x(
            reads in proptest::collection::vec(proptest::collection::vec(prop::sample::select(vec!['A','C','G','T']), 10..80), 1..30),
            k in 3usize..10,
        ) {
            let texts: Vec<String> = reads.iter().map(|r| r.iter().collect()).collect();
            let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
            let want: Vec<(String, u32)> = oracle(&refs, k).into_iter().map(|(s, c)| (s, c.min(255) as u32)).collect();
            let open = CountFilter { min_count: 1, max_count: u64::MAX, counter_cap: 255 };
            for x in 0..=3 {
                let got = count_reads(&refs, k, x, open);
                prop_assert!(got.windows(2).all(|w| w[0].0 < w[1].0));
                prop_assert_eq!(&got, &want);
            }
        }
    }
}
