//! Signatures of k-mers and splitting of reads into super k-mers.
//!
//! A signature is the smallest canonical m-mer of a k-mer among those that
//! are *allowed*: an allowed m-mer does not start with `AAA` or `ACA` and
//! has no `AA` anywhere except at its very beginning. A k-mer without any
//! allowed m-mer gets the reserved id `4^m`.

use crate::seq::{encode, PackedSeq};

/// Signature value in `0..=4^m`; `4^m` is the reserved "no signature" slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignatureId(pub u32);

impl SignatureId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Whether m-mers are filtered by the signature rules or every canonical
/// m-mer competes (plain canonical minimizers).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignatureMode {
    #[default]
    Signatures,
    Minimizers,
}

/// Whether the m-mer with base-4 value `idx` may serve as a signature.
pub fn is_allowed_signature(idx: u64, m: usize) -> bool {
    let sym = |i: usize| (idx >> (2 * (m - 1 - i))) & 3;
    if m >= 3 {
        let head = idx >> (2 * (m - 3));
        // AAA = 0b000000, ACA = 0b000100
        if head == 0b00_00_00 || head == 0b00_01_00 {
            return false;
        }
    }
    for i in 1..m.saturating_sub(1) {
        if sym(i) == 0 && sym(i + 1) == 0 {
            return false;
        }
    }
    true
}

/// A read substring whose k-mers all share one signature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperKmer {
    pub bases: PackedSeq,
    pub signature: SignatureId,
    /// Position of the first symbol in the originating segment.
    pub offset: usize,
}

/// Precomputed signature rules for one m.
#[derive(Clone, Debug)]
pub struct SignatureScheme {
    m: usize,
    mode: SignatureMode,
    /// Forward m-mer value -> canonical value if it qualifies, else `4^m`.
    keys: Vec<u32>,
}

impl SignatureScheme {
    pub fn new(m: usize, mode: SignatureMode) -> Self {
        assert!((1..=15).contains(&m), "signature length {m} out of range");
        let n = 1usize << (2 * m);
        let reserved = n as u32;
        let keys = (0..n as u64)
            .map(|fwd| {
                let canon = fwd.min(rc_index(fwd, m));
                if mode == SignatureMode::Minimizers || is_allowed_signature(canon, m) {
                    canon as u32
                } else {
                    reserved
                }
            })
            .collect();
        SignatureScheme { m, mode, keys }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> SignatureMode {
        self.mode
    }

    /// The reserved id, `4^m`.
    pub fn reserved(&self) -> SignatureId {
        SignatureId(1u32 << (2 * self.m))
    }

    /// Number of distinct ids including the reserved slot.
    pub fn id_count(&self) -> usize {
        (1usize << (2 * self.m)) + 1
    }

    fn mmer_keys(&self, codes: &[u8], out: &mut Vec<u32>) {
        out.clear();
        let m = self.m;
        if codes.len() < m {
            return;
        }
        let mask = (1u64 << (2 * m)) - 1;
        let mut fwd = 0u64;
        for (i, &c) in codes.iter().enumerate() {
            fwd = ((fwd << 2) | c as u64) & mask;
            if i + 1 >= m {
                out.push(self.keys[fwd as usize]);
            }
        }
    }

    /// Signature of a k-mer given as symbol codes.
    pub fn signature_of_codes(&self, kmer: &[u8]) -> SignatureId {
        assert!(self.m <= kmer.len(), "k-mer shorter than signature length");
        let mut keys = Vec::with_capacity(kmer.len());
        self.mmer_keys(kmer, &mut keys);
        SignatureId(keys.into_iter().min().unwrap_or(self.reserved().0))
    }

    pub fn signature_of_kmer(&self, kmer: &PackedSeq) -> SignatureId {
        self.signature_of_codes(&kmer.codes())
    }

    /// Walk the maximal runs of consecutive k-mers sharing a signature.
    ///
    /// `emit(start, end, signature)` receives the symbol range of each super
    /// k-mer in read order. `scratch` is reused between calls.
    pub fn for_each_super_kmer<F>(&self, codes: &[u8], k: usize, scratch: &mut Vec<u32>, mut emit: F)
    where
        F: FnMut(usize, usize, SignatureId),
    {
        assert!(self.m <= k);
        if codes.len() < k {
            return;
        }
        self.mmer_keys(codes, scratch);
        let window = k - self.m + 1;
        let n_kmers = codes.len() - k + 1;

        let scan = |from: usize| {
            let mut best = from;
            for j in from + 1..from + window {
                if scratch[j] < scratch[best] {
                    best = j;
                }
            }
            best
        };

        let mut min_pos = scan(0);
        let mut run_start = 0usize;
        let mut run_sig = scratch[min_pos];
        for t in 1..n_kmers {
            let entering = t + window - 1;
            if min_pos < t {
                min_pos = scan(t);
            } else if scratch[entering] < scratch[min_pos] {
                min_pos = entering;
            }
            let sig = scratch[min_pos];
            if sig != run_sig {
                emit(run_start, t - 1 + k, SignatureId(run_sig));
                run_start = t;
                run_sig = sig;
            }
        }
        emit(run_start, n_kmers - 1 + k, SignatureId(run_sig));
    }

    /// Split an `ACGT` segment into super k-mers.
    pub fn split_read(&self, segment: &[u8], k: usize) -> Vec<SuperKmer> {
        let codes: Vec<u8> = segment
            .iter()
            .map(|&b| encode(b).expect("segment must be ACGT only"))
            .collect();
        self.split_codes(&codes, k)
    }

    pub fn split_codes(&self, codes: &[u8], k: usize) -> Vec<SuperKmer> {
        let mut out = Vec::new();
        let mut scratch = Vec::new();
        self.for_each_super_kmer(codes, k, &mut scratch, |start, end, signature| {
            out.push(SuperKmer {
                bases: PackedSeq::from_codes(&codes[start..end]),
                signature,
                offset: start,
            })
        });
        out
    }
}

fn rc_index(idx: u64, m: usize) -> u64 {
    let mut rc = 0u64;
    for i in 0..m {
        rc = (rc << 2) | (3 - ((idx >> (2 * i)) & 3));
    }
    rc
}

pub fn signature_of_kmer(kmer: &PackedSeq, m: usize) -> SignatureId {
    SignatureScheme::new(m, SignatureMode::Signatures).signature_of_kmer(kmer)
}

pub fn split_read(segment: &[u8], k: usize, m: usize) -> Vec<SuperKmer> {
    SignatureScheme::new(m, SignatureMode::Signatures).split_read(segment, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx(s: &str) -> u64 {
        s.parse::<PackedSeq>().unwrap().mmer_index()
    }

    // Independent string-level statement of the three rules.
    fn allowed_by_text(s: &str) -> bool {
        !s.starts_with("AAA")
            && !s.starts_with("ACA")
            && !(1..s.len().saturating_sub(1)).any(|i| &s[i..i + 2] == "AA")
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

    // Brute-force signature by string comparison.
    fn naive_signature(kmer: &str, m: usize, restricted: bool) -> Option<String> {
        (0..=kmer.len() - m)
            .map(|i| {
                let w = &kmer[i..i + m];
                let r = rc_text(w);
                if w <= r.as_str() { w.to_string() } else { r }
            })
            .filter(|c| !restricted || allowed_by_text(c))
            .min()
    }

    #[test]
    fn allowed_examples() {
        assert!(!is_allowed_signature(idx("AAAAAAC"), 7));
        assert!(is_allowed_signature(idx("AACGTGC"), 7));
        assert!(!is_allowed_signature(idx("CGTAACG"), 7));
        assert!(!is_allowed_signature(idx("ACAGTGC"), 7));
    }

    #[test]
    fn allowed_set_size_m7() {
        let by_text = (0..1u64 << 14)
            .filter(|&i| allowed_by_text(&PackedSeq::from_mmer_index(i, 7).to_string()))
            .count();
        let by_code = (0..1u64 << 14).filter(|&i| is_allowed_signature(i, 7)).count();
        assert_eq!(by_text, 12249);
        assert_eq!(by_code, 12249);
    }

    #[test]
    fn allowed_matches_text_rules_small_m() {
        for m in 1..=6 {
            for i in 0..1u64 << (2 * m) {
                let text = PackedSeq::from_mmer_index(i, m).to_string();
                assert_eq!(is_allowed_signature(i, m), allowed_by_text(&text), "{text}");
            }
        }
    }

    #[test]
    fn signature_examples() {
        let sig = |s: &str| signature_of_kmer(&s.parse().unwrap(), 4);
        assert_eq!(sig("CGTTGATC"), SignatureId(idx("AACG") as u32));
        assert_eq!(sig("GATCAATT"), SignatureId(idx("AATT") as u32));
        assert_eq!(sig("AAAAAAAA"), SignatureId(256));
    }

    #[test]
    fn split_read_signature_mode() {
        let sks = split_read(b"CGTTGATCAATTTG", 8, 4);
        let got: Vec<(String, u32)> = sks
            .iter()
            .map(|s| (s.bases.to_string(), s.signature.0))
            .collect();
        assert_eq!(
            got,
            vec![
                ("CGTTGATC".to_string(), idx("AACG") as u32),
                ("GTTGATCAAT".to_string(), idx("ATCA") as u32),
                ("GATCAATTTG".to_string(), idx("AATT") as u32),
            ]
        );
        assert_eq!(sks.iter().map(|s| s.offset).collect::<Vec<_>>(), vec![0, 1, 4]);
    }

    #[test]
    fn split_read_minimizer_mode() {
        let scheme = SignatureScheme::new(4, SignatureMode::Minimizers);
        let sigs: Vec<u32> = scheme
            .split_read(b"CGTTGATCAATTTG", 8)
            .iter()
            .map(|s| s.signature.0)
            .collect();
        let expected: Vec<u32> = ["AACG", "ATCA", "AATT", "AAAT"]
            .iter()
            .map(|s| idx(s) as u32)
            .collect();
        assert_eq!(sigs, expected);
    }

    #[test]
    fn segment_of_length_k_is_one_super_kmer() {
        let sks = split_read(b"ACGTTGCATGCA", 12, 5);
        assert_eq!(sks.len(), 1);
        assert_eq!(sks[0].bases.to_string(), "ACGTTGCATGCA");
    }

    #[test]
    fn homopolymer_uses_reserved_slot() {
        let sks = split_read(b"AAAAAAAAAAAA", 8, 4);
        assert_eq!(sks.len(), 1);
        assert_eq!(sks[0].signature, SignatureId(256));
    }

    fn segment(min: usize, max: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec(prop::sample::select(vec!['A', 'C', 'G', 'T']), min..=max)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn coverage_and_homogeneity(s in segment(12, 300), k in 5usize..=12, m in 3usize..=5) {
            prop_assume!(s.len() >= k);
            let sks = split_read(s.as_bytes(), k, m);
            let mut kmers = Vec::new();
            let mut expected_offset = 0;
            for sk in &sks {
                prop_assert_eq!(sk.offset, expected_offset);
                prop_assert!(sk.bases.len() >= k);
                let text = sk.bases.to_string();
                prop_assert_eq!(&text, &s[sk.offset..sk.offset + text.len()]);
                for i in 0..=text.len() - k {
                    let kmer = &text[i..i + k];
                    let want = naive_signature(kmer, m, true)
                        .map(|c| idx(&c) as u32)
                        .unwrap_or(1 << (2 * m));
                    prop_assert_eq!(sk.signature.0, want);
                    kmers.push(kmer.to_string());
                }
                expected_offset += text.len() - k + 1;
            }
            let all: Vec<String> = (0..=s.len() - k).map(|i| s[i..i + k].to_string()).collect();
            prop_assert_eq!(kmers, all);
        }

        #[test]
        fn minimizer_mode_matches_naive(s in segment(20, 120)) {
            let scheme = SignatureScheme::new(5, SignatureMode::Minimizers);
            for sk in scheme.split_read(s.as_bytes(), 15) {
                let text = sk.bases.to_string();
                for i in 0..=text.len() - 15 {
                    let want = naive_signature(&text[i..i + 15], 5, false).unwrap();
                    prop_assert_eq!(sk.signature.0, idx(&want) as u32);
                }
            }
        }
    }
}
