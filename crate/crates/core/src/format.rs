//! On-disk formats: the `EMB1` binary embedding file, the TSV embedding file,
//! and the `TOK1` token-level file.
//!
//! All multi-byte integers and floats are little-endian. Embedding values are
//! stored as 32-bit floats and widened to 64 bits on load.
//!
//! Binary layout:
//!
//! ```text
//! "EMB1" | rows: u32 | dim: u32 | has_labels: u8
//! rows * dim f32 values, row-major
//! if has_labels == 1, per row: label_len: u32 | label bytes (UTF-8) | split: u8
//! ```
//!
//! The binary format carries no sample ids; rows are identified by their
//! zero-based index. A labeled file whose labels are all empty loads as an
//! unlabeled dataset that keeps its split tags.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::dataset::{EmbeddedDataset, Split};
use crate::encoder::TokenSequence;
use crate::error::FormatError;
use crate::Result;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const TOKEN_MAGIC: &[u8; 4] = b"TOK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Binary,
    Tsv,
}

impl DataFormat {
    /// `.tsv`/`.txt` is TSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => DataFormat::Tsv,
            _ => DataFormat::Binary,
        }
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "binary" | "bin" => Ok(DataFormat::Binary),
            "tsv" => Ok(DataFormat::Tsv),
            other => Err(format!("unknown format {other:?} (expected binary or tsv)")),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<EmbeddedDataset> {
    match format {
        DataFormat::Binary => decode_binary(&fs::read(path)?),
        DataFormat::Tsv => parse_tsv(&fs::read_to_string(path)?),
    }
}

pub fn save_dataset(ds: &EmbeddedDataset, path: &Path, format: DataFormat) -> Result<()> {
    let bytes = match format {
        DataFormat::Binary => encode_binary(ds),
        DataFormat::Tsv => to_tsv(ds).into_bytes(),
    };
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what.to_string()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn check_magic(cur: &mut Cursor<'_>, expected: &[u8; 4]) -> Result<(), FormatError> {
    let found = cur.take(4, "magic bytes")?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

fn read_header(cur: &mut Cursor<'_>) -> Result<(usize, usize, bool), FormatError> {
    let rows = cur.u32("row count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    let flag = cur.u8("labels flag")?;
    if rows == 0 {
        return Err(FormatError::EmptyDataset);
    }
    if dim == 0 {
        return Err(FormatError::MalformedHeader("dimension is zero".into()));
    }
    if flag > 1 {
        return Err(FormatError::MalformedHeader(format!("labels flag must be 0 or 1, got {flag}")));
    }
    Ok((rows, dim, flag == 1))
}

fn read_value(cur: &mut Cursor<'_>, row: usize, column: usize) -> Result<f64, FormatError> {
    let v = cur.f32("embedding values")?;
    if !v.is_finite() {
        return Err(FormatError::NonFinite { row, column });
    }
    Ok(f64::from(v))
}

type LabelBlock = (Option<Vec<String>>, Vec<Split>);

fn read_labels(cur: &mut Cursor<'_>, rows: usize, present: bool) -> Result<LabelBlock, FormatError> {
    if !present {
        return Ok((None, vec![Split::Train; rows]));
    }
    let mut labels = Vec::with_capacity(rows);
    let mut splits = Vec::with_capacity(rows);
    for row in 0..rows {
        let len = cur.u32("label length")? as usize;
        let bytes = cur.take(len, "label bytes")?;
        let label = std::str::from_utf8(bytes).map_err(|_| FormatError::InvalidUtf8 { row })?;
        labels.push(label.to_string());
        let code = cur.u8("split code")?;
        splits.push(Split::from_code(code).ok_or_else(|| FormatError::UnknownSplit {
            row,
            tag: code.to_string(),
        })?);
    }
    Ok((normalize_labels(labels)?, splits))
}

/// All-empty labels mean an unlabeled file; a mix is rejected.
fn normalize_labels(labels: Vec<String>) -> Result<Option<Vec<String>>, FormatError> {
    if labels.iter().all(String::is_empty) {
        return Ok(None);
    }
    if let Some(row) = labels.iter().position(String::is_empty) {
        return Err(FormatError::PartialLabels { row });
    }
    Ok(Some(labels))
}

pub fn decode_binary(bytes: &[u8]) -> Result<EmbeddedDataset> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, EMBEDDING_MAGIC)?;
    let (rows, dim, has_labels) = read_header(&mut cur)?;
    let mut embeddings = Array2::zeros((rows, dim));
    for row in 0..rows {
        for col in 0..dim {
            embeddings[(row, col)] = read_value(&mut cur, row, col)?;
        }
    }
    let (labels, splits) = read_labels(&mut cur, rows, has_labels)?;
    if cur.remaining() > 0 {
        return Err(FormatError::TrailingBytes(cur.remaining()).into());
    }
    let ids = (0..rows).map(|r| r.to_string()).collect();
    EmbeddedDataset::new(ids, embeddings, labels, splits)
}

fn write_label_block(out: &mut Vec<u8>, ds_labels: Option<&[String]>, splits: &[Split]) {
    for (row, split) in splits.iter().enumerate() {
        let label = ds_labels.map_or("", |l| l[row].as_str());
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
        out.push(split.code());
    }
}

fn needs_label_block(labels: Option<&[String]>, splits: &[Split]) -> bool {
    labels.is_some() || splits.iter().any(|s| *s != Split::Train)
}

pub fn encode_binary(ds: &EmbeddedDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + ds.len() * ds.dim() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    let flagged = needs_label_block(ds.labels(), ds.splits());
    out.push(u8::from(flagged));
    for v in ds.embeddings().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if flagged {
        write_label_block(&mut out, ds.labels(), ds.splits());
    }
    out
}

/// Parses `id<TAB>label<TAB>split<TAB>v1..vH`. An empty label field means
/// the row is unlabeled; a file must be labeled everywhere or nowhere.
pub fn parse_tsv(text: &str) -> Result<EmbeddedDataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FormatError::MalformedHeader("file is empty".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    if cols.len() < 4 || cols[..3] != ["id", "label", "split"] {
        return Err(FormatError::MalformedHeader(format!(
            "expected `id, label, split, v1..vH`, got {:?}",
            cols
        ))
        .into());
    }
    let dim = cols.len() - 3;
    for (i, name) in cols[3..].iter().enumerate() {
        if *name != format!("v{}", i + 1) {
            return Err(FormatError::MalformedHeader(format!(
                "column {} should be v{}, got {name:?}",
                i + 4,
                i + 1
            ))
            .into());
        }
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut values = Vec::new();
    for line in lines.map(|l| l.trim_end_matches('\r')).filter(|l| !l.is_empty()) {
        let row = ids.len();
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != dim + 3 {
            return Err(FormatError::DimensionMismatch {
                row,
                expected: dim,
                found: fields.len().saturating_sub(3),
            }
            .into());
        }
        ids.push(fields[0].to_string());
        labels.push(fields[1].to_string());
        splits.push(
            fields[2]
                .parse::<Split>()
                .map_err(|tag| FormatError::UnknownSplit { row, tag })?,
        );
        for (column, text) in fields[3..].iter().enumerate() {
            let v: f32 = text.trim().parse().map_err(|_| FormatError::InvalidNumber {
                row,
                column,
                text: text.to_string(),
            })?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite { row, column }.into());
            }
            values.push(f64::from(v));
        }
    }
    if ids.is_empty() {
        return Err(FormatError::EmptyDataset.into());
    }
    let rows = ids.len();
    let embeddings = Array2::from_shape_vec((rows, dim), values).expect("row lengths checked");
    EmbeddedDataset::new(ids, embeddings, normalize_labels(labels)?, splits)
}

pub fn to_tsv(ds: &EmbeddedDataset) -> String {
    let mut out = String::from("id\tlabel\tsplit");
    for d in 1..=ds.dim() {
        out.push_str(&format!("\tv{d}"));
    }
    out.push('\n');
    for (row, emb) in ds.embeddings().outer_iter().enumerate() {
        let label = ds.labels().map_or("", |l| l[row].as_str());
        out.push_str(&format!("{}\t{}\t{}", ds.ids()[row], label, ds.splits()[row]));
        for v in emb {
            out.push_str(&format!("\t{}", *v as f32));
        }
        out.push('\n');
    }
    out
}

/// Token-level samples before pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub sequences: Vec<TokenSequence>,
    pub labels: Option<Vec<String>>,
    pub splits: Vec<Split>,
}

impl TokenDataset {
    /// Mean-pools every sequence into a sentence embedding.
    pub fn pool(&self) -> Result<EmbeddedDataset> {
        let dim = self.sequences.first().map_or(0, TokenSequence::dim);
        let mut embeddings = Array2::zeros((self.sequences.len(), dim));
        for (row, seq) in self.sequences.iter().enumerate() {
            embeddings.row_mut(row).assign(&crate::encoder::mean_pool(seq));
        }
        let ids = (0..self.sequences.len()).map(|r| r.to_string()).collect();
        EmbeddedDataset::new(ids, embeddings, self.labels.clone(), self.splits.clone())
    }
}

/// Decodes a `TOK1` file: the `EMB1` layout with a `u32` token count in
/// front of each sample's `count * dim` block.
pub fn decode_tokens(bytes: &[u8]) -> Result<TokenDataset> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, TOKEN_MAGIC)?;
    let (rows, dim, has_labels) = read_header(&mut cur)?;
    let mut sequences = Vec::with_capacity(rows);
    for row in 0..rows {
        let count = cur.u32("token count")? as usize;
        if count == 0 {
            return Err(FormatError::EmptyTokens { row }.into());
        }
        let mut tokens = Array2::zeros((count, dim));
        for t in 0..count {
            for col in 0..dim {
                tokens[(t, col)] = read_value(&mut cur, row, col)?;
            }
        }
        sequences.push(TokenSequence::new(tokens)?);
    }
    let (labels, splits) = read_labels(&mut cur, rows, has_labels)?;
    if cur.remaining() > 0 {
        return Err(FormatError::TrailingBytes(cur.remaining()).into());
    }
    Ok(TokenDataset { sequences, labels, splits })
}

pub fn encode_tokens(ds: &TokenDataset) -> Vec<u8> {
    let dim = ds.sequences.first().map_or(0, TokenSequence::dim);
    let mut out = Vec::new();
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&(ds.sequences.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    let flagged = needs_label_block(ds.labels.as_deref(), &ds.splits);
    out.push(u8::from(flagged));
    for seq in &ds.sequences {
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for v in seq.tokens().iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if flagged {
        write_label_block(&mut out, ds.labels.as_deref(), &ds.splits);
    }
    out
}

pub fn load_tokens(path: &Path) -> Result<TokenDataset> {
    decode_tokens(&fs::read(path)?)
}

/// Sniffs the first four bytes for a known magic.
pub fn detect_magic(path: &Path) -> Result<Option<[u8; 4]>> {
    let mut head = Vec::with_capacity(4);
    fs::File::open(path)?.take(4).read_to_end(&mut head)?;
    Ok(head.try_into().ok())
}
