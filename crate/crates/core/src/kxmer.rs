//! Decomposition of super k-mers into (k,x)-mers.
//!
//! A (k,x)-mer is a canonical (k+x')-mer, `0 <= x' <= x`, in which every
//! constituent k-mer is itself canonical. Runs of consecutive k-mers with
//! the same orientation are cut greedily every `x + 1` k-mers; reverse runs
//! are stored as the reverse complement of the covered stretch.

use std::cmp::Ordering;

use crate::seq::{compare_with_rc, Orientation, PackedSeq};

pub const MAX_X: usize = 3;

/// One (k+x')-mer standing for `x' + 1` consecutive canonical k-mers.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct KxRecord {
    pub bases: PackedSeq,
}

impl KxRecord {
    /// Number of k-mers this record covers.
    pub fn kmer_count(&self, k: usize) -> usize {
        self.bases.len() + 1 - k
    }

    pub fn kmers(&self, k: usize) -> impl Iterator<Item = PackedSeq> + '_ {
        (0..self.kmer_count(k)).map(move |i| self.bases.subseq(i, k))
    }
}

/// A run of k-mers emitted as one record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    /// Index of the first k-mer in the super k-mer.
    pub first: usize,
    /// Number of k-mers covered, in `1..=x+1`.
    pub kmers: usize,
    pub orientation: Orientation,
}

/// Greedy orientation runs over the k-mers of `codes`.
///
/// With `canonical == false` every k-mer counts as forward, so runs are just
/// consecutive groups of `x + 1` k-mers.
pub fn for_each_run<F>(codes: &[u8], k: usize, x: usize, canonical: bool, mut emit: F)
where
    F: FnMut(Run),
{
    debug_assert!(x <= MAX_X);
    if codes.len() < k {
        return;
    }
    let n = codes.len() - k + 1;
    let strand = |i: usize| {
        if canonical {
            compare_with_rc(&codes[i..i + k])
        } else {
            Ordering::Less
        }
    };
    let mut i = 0;
    while i < n {
        let orientation = match strand(i) {
            Ordering::Greater => Orientation::Reverse,
            _ => Orientation::Forward,
        };
        let mut len = 1;
        while len <= x && i + len < n {
            let compatible = match strand(i + len) {
                Ordering::Equal => true,
                Ordering::Less => orientation == Orientation::Forward,
                Ordering::Greater => orientation == Orientation::Reverse,
            };
            if !compatible {
                break;
            }
            len += 1;
        }
        emit(Run {
            first: i,
            kmers: len,
            orientation,
        });
        i += len;
    }
}

/// Orientation of each constituent k-mer of a super k-mer.
pub fn orientation_profile(sk: &PackedSeq, k: usize) -> Vec<Orientation> {
    let codes = sk.codes();
    if codes.len() < k {
        return Vec::new();
    }
    (0..=codes.len() - k)
        .map(|i| match compare_with_rc(&codes[i..i + k]) {
            Ordering::Greater => Orientation::Reverse,
            _ => Orientation::Forward,
        })
        .collect()
}

/// Split a super k-mer into as few (k,x)-mers as the greedy policy allows.
pub fn expand_super_kmer(sk: &PackedSeq, k: usize, x: usize) -> Vec<KxRecord> {
    expand_codes(&sk.codes(), k, x, true)
}

pub fn expand_codes(codes: &[u8], k: usize, x: usize, canonical: bool) -> Vec<KxRecord> {
    let mut out = Vec::new();
    for_each_run(codes, k, x, canonical, |run| {
        let stretch = PackedSeq::from_codes(&codes[run.first..run.first + run.kmers + k - 1]);
        let bases = match run.orientation {
            Orientation::Forward => stretch,
            Orientation::Reverse => stretch.reverse_complement(),
        };
        out.push(KxRecord { bases });
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::Orientation::{Forward, Reverse};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(s: &str) -> PackedSeq {
        s.parse().unwrap()
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

    /// Symbol-by-symbol recount: 'F', 'R' or 'P' (palindrome) per k-mer,
    /// then greedy grouping with palindromes joining the open run.
    fn oracle_record_count(text: &str, k: usize, x: usize) -> usize {
        let marks: Vec<char> = (0..=text.len() - k)
            .map(|i| {
                let w = &text[i..i + k];
                let r = rc_text(w);
                match w.cmp(r.as_str()) {
                    Ordering::Less => 'F',
                    Ordering::Greater => 'R',
                    Ordering::Equal => 'P',
                }
            })
            .collect();
        let mut count = 0;
        let mut i = 0;
        while i < marks.len() {
            let dir = if marks[i] == 'P' { 'F' } else { marks[i] };
            let mut j = i + 1;
            while j < marks.len() && j - i <= x && (marks[j] == dir || marks[j] == 'P') {
                j += 1;
            }
            count += 1;
            i = j;
        }
        count
    }

    fn canonical_kmers_naive(text: &str, k: usize) -> Vec<String> {
        let mut v: Vec<String> = (0..=text.len() - k)
            .map(|i| {
                let w = &text[i..i + k];
                let r = rc_text(w);
                if w <= r.as_str() { w.to_string() } else { r }
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn worked_expansion_records() {
        let records: Vec<String> = expand_super_kmer(&seq("ACGCGACGATGAACTGCCATCTCACA"), 15, 1)
            .into_iter()
            .map(|r| r.bases.to_string())
            .collect();
        assert_eq!(
            records,
            vec![
                "ACGCGACGATGAACT",
                "GCAGTTCATCGTCGCG",
                "CGACGATGAACTGCCA",
                "ACGATGAACTGCCATC",
                "AGATGGCAGTTCATC",
                "ATGAACTGCCATCTCA",
                "GAACTGCCATCTCACA",
            ]
        );
    }

    #[test]
    fn x_zero_gives_one_record_per_kmer() {
        let sk = seq("ACGCGACGATGAACTGCCATCTCACA");
        let records = expand_super_kmer(&sk, 15, 0);
        assert_eq!(records.len(), 12);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.bases, sk.subseq(i, 15).canonical().0);
        }
    }

    #[test]
    fn orientation_profile_examples() {
        assert_eq!(orientation_profile(&seq("ACGCGACGATGAACTG"), 15), vec![Forward, Reverse]);
        assert!(orientation_profile(&seq(&"C".repeat(40)), 21)
            .iter()
            .all(|&o| o == Forward));
        assert_eq!(
            orientation_profile(&seq("ACGTACGT"), 4),
            vec![Forward, Forward, Forward, Reverse, Forward]
        );
    }

    #[test]
    fn palindrome_joins_open_run() {
        // TTCGAA, k=4: TTCG (reverse), TCGA (palindrome), CGAA (forward)
        let profile_runs = |x| {
            let mut runs = Vec::new();
            let codes = seq("TTCGAA").codes();
            for_each_run(&codes, 4, x, true, |r| runs.push(r));
            runs
        };
        assert_eq!(
            profile_runs(3),
            vec![
                Run { first: 0, kmers: 2, orientation: Reverse },
                Run { first: 2, kmers: 1, orientation: Forward },
            ]
        );
    }

    #[test]
    fn random_super_kmers_match_oracle_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 28;
        let mut totals = [0usize; 4];
        let mut kmers = 0usize;
        for _ in 0..200 {
            let text: String = (0..300).map(|_| ['A', 'C', 'G', 'T'][rng.gen_range(0..4)]).collect();
            kmers += text.len() - k + 1;
            for (x, total) in totals.iter_mut().enumerate() {
                let n = expand_super_kmer(&seq(&text), k, x).len();
                assert_eq!(n, oracle_record_count(&text, k, x));
                *total += n;
            }
        }
        let ratio = totals[3] as f64 / kmers as f64;
        assert!(ratio > 0.25 && ratio <= 1.0, "ratio {ratio}");
        assert_eq!(totals[0], kmers);
        assert!(totals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lossless_on_many_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, x) in &[(5usize, 1usize), (9, 2), (15, 3), (21, 0), (33, 3)] {
            for _ in 0..10_000 {
                let len = rng.gen_range(k..k + 40);
                // a biased alphabet produces palindromes and long runs
                let alphabet = if rng.gen_bool(0.2) { &['A', 'T'][..] } else { &['A', 'C', 'G', 'T'][..] };
                let text: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
                let records = expand_super_kmer(&seq(&text), k, x);
                let mut got: Vec<String> = Vec::new();
                for r in &records {
                    assert!(r.bases.len() >= k && r.bases.len() <= k + x);
                    for kmer in r.kmers(k) {
                        assert_eq!(kmer.canonical().0, kmer);
                        got.push(kmer.to_string());
                    }
                }
                got.sort();
                assert_eq!(got, canonical_kmers_naive(&text, k), "{text} k={k} x={x}");
            }
        }
    }

    proptest! {
        #[test]
        fn adjacent_short_records_differ_in_orientation(
            text in proptest::collection::vec(prop::sample::select(vec!['A','C','G','T']), 20..200)
                .prop_map(|v| v.into_iter().collect::<String>()),
            x in 0usize..=3,
        ) {
            let k = 11;
            let codes = seq(&text).codes();
            let mut runs = Vec::new();
            for_each_run(&codes, k, x, true, |r| runs.push(r));
            for pair in runs.windows(2) {
                if pair[0].orientation == pair[1].orientation {
                    // only a full run, or a palindrome-free break, can separate
                    // two runs of the same orientation
                    let next_first = compare_with_rc(&codes[pair[1].first..pair[1].first + k]);
                    prop_assert!(pair[0].kmers == x + 1 || next_first == Ordering::Equal);
                }
            }
            let n: Vec<usize> = (0..=3).map(|x| expand_super_kmer(&seq(&text), k, x).len()).collect();
            prop_assert!(n.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
