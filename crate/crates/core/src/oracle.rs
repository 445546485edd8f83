//! Brute-force k-mer counting used as ground truth.
//!
//! Nothing here touches signatures, bins or the packed representation used
//! by the counter; [`naive_count`] walks every window of every read as text.
//! [`naive_count_packed`] is a second, independently written route over
//! integer codes that exists only to cross-check the first.

use std::collections::{BTreeMap, HashMap};

/// Canonical k-mer text to count.
pub type OracleCounts = BTreeMap<String, u64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleParams {
    pub k: usize,
    pub canonical: bool,
    pub min_count: u64,
    pub max_count: u64,
    pub counter_cap: u64,
}

impl OracleParams {
    pub fn new(k: usize) -> Self {
        OracleParams {
            k,
            canonical: true,
            min_count: 1,
            max_count: u64::MAX,
            counter_cap: u64::MAX,
        }
    }
}

fn revcomp(window: &str) -> String {
    window
        .chars()
        .rev()
        .map(|c| match c {
            'A' => 'T',
            'C' => 'G',
            'G' => 'C',
            'T' => 'A',
            other => other,
        })
        .collect()
}

fn finish(raw: OracleCounts, p: &OracleParams) -> OracleCounts {
    raw.into_iter()
        .filter(|&(_, c)| c >= p.min_count && c <= p.max_count)
        .map(|(s, c)| (s, c.min(p.counter_cap)))
        .collect()
}

/// Count every `k`-long window made only of `ACGT` (case-insensitive).
pub fn naive_count<S: AsRef<[u8]>>(reads: &[S], p: OracleParams) -> OracleCounts {
    let mut raw = OracleCounts::new();
    if p.k == 0 {
        return raw;
    }
    for read in reads {
        let text = String::from_utf8_lossy(read.as_ref()).to_ascii_uppercase();
        let text = text.as_str();
        if text.len() < p.k {
            continue;
        }
        for i in 0..=text.len() - p.k {
            let Some(window) = text.get(i..i + p.k) else { continue };
            if !window.chars().all(|c| "ACGT".contains(c)) {
                continue;
            }
            let key = if p.canonical {
                let rc = revcomp(window);
                if rc.as_str() < window { rc } else { window.to_string() }
            } else {
                window.to_string()
            };
            *raw.entry(key).or_insert(0) += 1;
        }
    }
    finish(raw, &p)
}

/// The same count computed over symbol codes with rolling integer windows.
pub fn naive_count_packed<S: AsRef<[u8]>>(reads: &[S], p: OracleParams) -> OracleCounts {
    let k = p.k;
    let mut raw: HashMap<Vec<u8>, u64> = HashMap::new();
    if k == 0 {
        return OracleCounts::new();
    }
    for read in reads {
        let codes: Vec<Option<u8>> = read
            .as_ref()
            .iter()
            .map(|b| match b.to_ascii_uppercase() {
                b'A' => Some(0),
                b'C' => Some(1),
                b'G' => Some(2),
                b'T' => Some(3),
                _ => None,
            })
            .collect();
        let mut valid_run = 0usize;
        for end in 0..codes.len() {
            valid_run = if codes[end].is_some() { valid_run + 1 } else { 0 };
            if valid_run < k {
                continue;
            }
            let fwd: Vec<u8> = codes[end + 1 - k..=end].iter().map(|c| c.unwrap()).collect();
            let key = if p.canonical {
                let rc: Vec<u8> = fwd.iter().rev().map(|c| 3 - c).collect();
                fwd.clone().min(rc)
            } else {
                fwd
            };
            *raw.entry(key).or_insert(0) += 1;
        }
    }
    let raw = raw
        .into_iter()
        .map(|(codes, c)| (codes.iter().map(|&x| b"ACGT"[x as usize] as char).collect(), c))
        .collect();
    finish(raw, &p)
}
