//! Block-oriented FASTQ / FASTA ingestion.
//!
//! A [`BlockReader`] cuts an input file into blocks of roughly
//! `block_size` bytes, always at record boundaries, validating record
//! structure as it goes so that downstream parsing can trust the layout.
//! Gzip input is recognised by its magic bytes and decompressed on the fly.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};
use crate::seq::encode_folded;

pub const DEFAULT_BLOCK_SIZE: usize = 8 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputFormat {
    #[default]
    Fastq,
    Fasta,
    /// FASTA with sequences wrapped over several lines. Parsed exactly like
    /// [`InputFormat::Fasta`], which also accepts wrapped records.
    MultiFasta,
}

/// Whole records from one input, in file order.
#[derive(Clone, Debug)]
pub struct ReadBlock {
    pub source: usize,
    pub format: InputFormat,
    pub data: Vec<u8>,
    pub reads: usize,
}

impl ReadBlock {
    /// Call `f` with each record's sequence. FASTA records split over several
    /// lines are joined first.
    pub fn for_each_sequence<F: FnMut(&[u8])>(&self, mut f: F) {
        match self.format {
            InputFormat::Fastq => {
                for (i, line) in lines(&self.data).enumerate() {
                    if i % 4 == 1 {
                        f(line);
                    }
                }
            }
            InputFormat::Fasta | InputFormat::MultiFasta => {
                let mut joined = Vec::new();
                let mut open = false;
                for line in lines(&self.data) {
                    if line.first() == Some(&b'>') {
                        if open {
                            f(&joined);
                        }
                        joined.clear();
                        open = true;
                    } else {
                        joined.extend_from_slice(line);
                    }
                }
                if open {
                    f(&joined);
                }
            }
        }
    }

    pub fn sequences(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::with_capacity(self.reads);
        self.for_each_sequence(|s| out.push(s.to_vec()));
        out
    }
}

/// Lines without their terminator (`\n` or `\r\n`).
fn lines(data: &[u8]) -> impl Iterator<Item = &[u8]> {
    data.split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .filter(|l| !l.is_empty())
}

pub fn is_gzip(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 2];
    let mut file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut filled = 0;
    while filled < 2 {
        match file.read(&mut magic[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io_at(path, e)),
        }
    }
    Ok(filled == 2 && magic == [0x1f, 0x8b])
}

/// Iterator over the [`ReadBlock`]s of one file.
pub struct BlockReader {
    path: PathBuf,
    source: usize,
    format: InputFormat,
    block_size: usize,
    input: Box<dyn BufRead + Send>,
    line_no: u64,
    /// Header line read past the end of the previous block (FASTA only).
    carry: Vec<u8>,
    consumed: u64,
    done: bool,
}

pub fn open_input(path: &Path, format: InputFormat, block_size: usize) -> Result<BlockReader> {
    BlockReader::open(path, 0, format, block_size)
}

impl BlockReader {
    pub fn open(path: &Path, source: usize, format: InputFormat, block_size: usize) -> Result<Self> {
        let gz = is_gzip(path)?;
        let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
        let input: Box<dyn BufRead + Send> = if gz {
            Box::new(BufReader::with_capacity(1 << 20, MultiGzDecoder::new(BufReader::new(file))))
        } else {
            Box::new(BufReader::with_capacity(1 << 20, file))
        };
        Ok(BlockReader {
            path: path.to_path_buf(),
            source,
            format,
            block_size: block_size.max(1),
            input,
            line_no: 0,
            carry: Vec::new(),
            consumed: 0,
            done: false,
        })
    }

    /// Decompressed bytes handed out so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    fn format_error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn read_line(&mut self, buf: &mut Vec<u8>) -> Result<bool> {
        buf.clear();
        let n = self
            .input
            .read_until(b'\n', buf)
            .map_err(|e| Error::io_at(&self.path, e))?;
        if n > 0 {
            self.line_no += 1;
        }
        Ok(n > 0)
    }

    fn is_blank(line: &[u8]) -> bool {
        line.iter().all(|b| b.is_ascii_whitespace())
    }

    fn next_fastq_block(&mut self) -> Result<Option<ReadBlock>> {
        let mut data = Vec::new();
        let mut reads = 0;
        let mut line = Vec::new();
        while data.len() < self.block_size {
            // header, skipping blank lines between records
            loop {
                if !self.read_line(&mut line)? {
                    self.done = true;
                    return Ok(self.finish_block(data, reads));
                }
                if !Self::is_blank(&line) {
                    break;
                }
            }
            if line[0] != b'@' {
                return Err(self.format_error("expected '@' at start of FASTQ record"));
            }
            data.extend_from_slice(&line);
            if !self.read_line(&mut line)? {
                return Err(self.format_error("truncated FASTQ record (missing sequence)"));
            }
            let seq_len = trimmed_len(&line);
            data.extend_from_slice(&line);
            if !self.read_line(&mut line)? || line.first() != Some(&b'+') {
                return Err(self.format_error("expected '+' separator line"));
            }
            data.extend_from_slice(&line);
            if !self.read_line(&mut line)? {
                return Err(self.format_error("truncated FASTQ record (missing quality)"));
            }
            if trimmed_len(&line) != seq_len {
                return Err(self.format_error("quality length differs from sequence length"));
            }
            data.extend_from_slice(&line);
            ensure_newline(&mut data);
            reads += 1;
        }
        Ok(self.finish_block(data, reads))
    }

    fn next_fasta_block(&mut self) -> Result<Option<ReadBlock>> {
        let mut data = std::mem::take(&mut self.carry);
        let mut reads = usize::from(!data.is_empty());
        let mut line = Vec::new();
        loop {
            if !self.read_line(&mut line)? {
                self.done = true;
                return Ok(self.finish_block(data, reads));
            }
            if Self::is_blank(&line) {
                continue;
            }
            if line[0] == b'>' {
                if data.len() >= self.block_size {
                    self.carry = line;
                    ensure_newline(&mut self.carry);
                    return Ok(self.finish_block(data, reads));
                }
                reads += 1;
            } else if reads == 0 {
                return Err(self.format_error("sequence data before the first '>' header"));
            }
            data.extend_from_slice(&line);
            ensure_newline(&mut data);
        }
    }

    fn finish_block(&mut self, data: Vec<u8>, reads: usize) -> Option<ReadBlock> {
        if reads == 0 {
            return None;
        }
        self.consumed += data.len() as u64;
        Some(ReadBlock {
            source: self.source,
            format: self.format,
            data,
            reads,
        })
    }
}

impl Iterator for BlockReader {
    type Item = Result<ReadBlock>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done && self.carry.is_empty() {
            return None;
        }
        let block = match self.format {
            InputFormat::Fastq => self.next_fastq_block(),
            InputFormat::Fasta | InputFormat::MultiFasta => self.next_fasta_block(),
        };
        match block {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                self.carry.clear();
                Some(Err(e))
            }
        }
    }
}

fn trimmed_len(line: &[u8]) -> usize {
    let mut n = line.len();
    while n > 0 && (line[n - 1] == b'\n' || line[n - 1] == b'\r') {
        n -= 1;
    }
    n
}

fn ensure_newline(data: &mut Vec<u8>) {
    if data.last() != Some(&b'\n') {
        data.push(b'\n');
    }
}

/// Expand `@list` arguments into the paths they name, one per line.
pub fn expand_input_list(arg: &str) -> Result<Vec<PathBuf>> {
    match arg.strip_prefix('@') {
        Some(list) => {
            let path = Path::new(list);
            let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(PathBuf::from)
                .collect())
        }
        None => Ok(vec![PathBuf::from(arg)]),
    }
}

/// Maximal `ACGT` runs of at least `k` symbols, upper-cased.
pub fn segment_read(sequence: &[u8], k: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut scratch = Vec::new();
    for_each_segment(sequence, k, &mut scratch, |codes| {
        out.push(codes.iter().map(|&c| crate::seq::decode(c)).collect());
    });
    out
}

/// Like [`segment_read`] but hands out symbol codes, reusing `scratch`.
pub fn for_each_segment<F: FnMut(&[u8])>(sequence: &[u8], k: usize, scratch: &mut Vec<u8>, mut f: F) {
    scratch.clear();
    for &b in sequence {
        match encode_folded(b) {
            Some(code) => scratch.push(code),
            None => {
                if scratch.len() >= k && k > 0 {
                    f(scratch);
                }
                scratch.clear();
            }
        }
    }
    if scratch.len() >= k && k > 0 {
        f(scratch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, data: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, data).unwrap();
        p
    }

    fn all_sequences(path: &Path, format: InputFormat, block: usize) -> Vec<Vec<u8>> {
        open_input(path, format, block)
            .unwrap()
            .flat_map(|b| b.unwrap().sequences())
            .collect()
    }

    #[test]
    fn fastq_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.fq", b"@r1\nACGTN\n+\nIIIII\n");
        assert_eq!(all_sequences(&p, InputFormat::Fastq, 1 << 20), vec![b"ACGTN".to_vec()]);
    }

    #[test]
    fn fastq_crlf_and_no_trailing_newline() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.fq", b"@r1\r\nACGT\r\n+r1\r\nIIII\r\n@r2\nGG\n+\nII");
        assert_eq!(
            all_sequences(&p, InputFormat::Fastq, 1 << 20),
            vec![b"ACGT".to_vec(), b"GG".to_vec()]
        );
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = Vec::new();
        for i in 0..500 {
            writeln!(text, "@r{i}\nACGTACGTTTGA{}\n+\nIIIIIIIIIIII{}", "C".repeat(i % 7), "I".repeat(i % 7)).unwrap();
        }
        let plain = write(dir.path(), "a.fq", &text);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&text).unwrap();
        let gz = write(dir.path(), "a.fq.gz", &enc.finish().unwrap());
        assert!(is_gzip(&gz).unwrap());
        assert!(!is_gzip(&plain).unwrap());
        assert_eq!(
            all_sequences(&plain, InputFormat::Fastq, 256),
            all_sequences(&gz, InputFormat::Fastq, 256)
        );
    }

    #[test]
    fn fastq_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.fq", b"@r1\nACGT\n+\nIIII\nr2\nACGT\n+\nIIII\n");
        let err = open_input(&p, InputFormat::Fastq, 1 << 20)
            .unwrap()
            .find_map(|b| b.err())
            .unwrap();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "short.fq", b"@r1\nACGT\n+\nIII\n");
        assert!(matches!(
            open_input(&p, InputFormat::Fastq, 1 << 20).unwrap().next(),
            Some(Err(Error::Format { line: 4, .. }))
        ));
    }

    #[test]
    fn multi_fasta_lines_are_joined() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "g.fa", b">chr1 desc\nACGT\nACGT\nAC\n\n>chr2\nGGGG\n>empty\n>chr3\nT\nT\n");
        let want: Vec<Vec<u8>> = vec![b"ACGTACGTAC".to_vec(), b"GGGG".to_vec(), b"".to_vec(), b"TT".to_vec()];
        for block in [1, 8, 1 << 20] {
            assert_eq!(all_sequences(&p, InputFormat::MultiFasta, block), want);
            assert_eq!(all_sequences(&p, InputFormat::Fasta, block), want);
        }
    }

    #[test]
    fn segmentation() {
        assert_eq!(segment_read(b"ACGTNNACGTACGT", 8), vec![b"ACGTACGT".to_vec()]);
        assert_eq!(segment_read(b"acgtacgt", 8), vec![b"ACGTACGT".to_vec()]);
        assert_eq!(segment_read(b"ACGTRACGT", 4), vec![b"ACGT".to_vec(), b"ACGT".to_vec()]);
        assert!(segment_read(b"", 3).is_empty());
    }

    #[test]
    fn input_list_expansion() {
        let dir = tempfile::tempdir().unwrap();
        let list = write(dir.path(), "files.lst", b"a.fq\n\n  b.fq.gz \n");
        let got = expand_input_list(&format!("@{}", list.display())).unwrap();
        assert_eq!(got, vec![PathBuf::from("a.fq"), PathBuf::from("b.fq.gz")]);
        assert_eq!(expand_input_list("x.fq").unwrap(), vec![PathBuf::from("x.fq")]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn read_count_is_independent_of_block_size(
            reads in proptest::collection::vec(1usize..300, 1..400),
            block_kib in prop::sample::select(vec![64usize, 256, 1024, 4096, 16384]),
            small in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut text = Vec::new();
            for (i, &len) in reads.iter().enumerate() {
                let s: String = (0..len).map(|j| b"ACGTN"[(i * 7 + j * 13) % 5] as char).collect();
                writeln!(text, "@read{i}\n{s}\n+\n{}", "#".repeat(len)).unwrap();
            }
            let p = write(dir.path(), "r.fq", &text);
            // tiny blocks stress the boundary handling the large ones never hit
            let block = if small { block_kib } else { block_kib << 10 };
            let mut count = 0;
            let mut seqs = Vec::new();
            for b in open_input(&p, InputFormat::Fastq, block).unwrap() {
                let b = b.unwrap();
                count += b.reads;
                seqs.extend(b.sequences());
            }
            prop_assert_eq!(count, reads.len());
            prop_assert_eq!(seqs, all_sequences(&p, InputFormat::Fastq, usize::MAX));
        }

        #[test]
        fn segments_match_window_oracle(
            seq in proptest::collection::vec(prop::sample::select(b"ACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTACGTN".to_vec()), 0..200),
            k in 1usize..12,
        ) {
            let mut got: Vec<Vec<u8>> = Vec::new();
            for s in segment_read(&seq, k) {
                for w in s.windows(k) {
                    got.push(w.to_vec());
                }
            }
            let want: Vec<Vec<u8>> = seq
                .windows(k)
                .filter(|w| !w.contains(&b'N'))
                .map(|w| w.to_vec())
                .collect();
            prop_assert_eq!(got, want);
        }
    }
}
