//! Byte-level text ingestion.
//!
//! Every byte is its own token (ids 0..=255); id 256 is padding. A model
//! reading ingested data needs `vocab_size >= BYTE_VOCAB`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{lm_dataset_from_stream, Dataset, Example, TaskHead};

pub const PAD_TOKEN: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Path {
        path: path.to_path_buf(),
        source,
    })
}

/// Next-token dataset over the bytes of a file, cut into windows of
/// `seq_len` inputs.
pub fn ingest_text(path: impl AsRef<Path>, seq_len: usize, batch_size: usize) -> Result<Dataset> {
    let bytes = read(path.as_ref())?;
    if bytes.is_empty() {
        return Err(Error::domain(format!(
            "{} is empty",
            path.as_ref().display()
        )));
    }
    let stream: Vec<u32> = bytes.into_iter().map(u32::from).collect();
    lm_dataset_from_stream(&stream, seq_len, batch_size)
}

/// Parse `label<TAB>text` lines (label 0 or 1) into a binary classification
/// dataset. Text is truncated to `seq_len` bytes and shorter texts are
/// right-padded with [`PAD_TOKEN`]. Blank lines are skipped.
pub fn parse_labeled(content: &[u8], seq_len: usize, batch_size: usize) -> Result<Dataset> {
    if seq_len == 0 {
        return Err(Error::domain("seq_len must be >= 1"));
    }
    let mut examples: Vec<Example> = Vec::new();
    for (i, raw) in content.split(|&b| b == b'\n').enumerate() {
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let tab = line
            .iter()
            .position(|&b| b == b'\t')
            .ok_or_else(|| parse_err("expected `label<TAB>text`".into()))?;
        let label = match &line[..tab] {
            b"0" => 0,
            b"1" => 1,
            other => {
                return Err(parse_err(format!(
                    "label `{}` is not 0 or 1",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let mut tokens: Vec<u32> = line[tab + 1..]
            .iter()
            .take(seq_len)
            .map(|&b| u32::from(b))
            .collect();
        tokens.resize(seq_len, PAD_TOKEN);
        examples.push((tokens, vec![label]));
    }
    if examples.is_empty() {
        return Err(Error::domain("no labeled lines"));
    }
    Dataset::from_examples(
        TaskHead::Classification { n_classes: 2 },
        &examples,
        batch_size,
    )
}

pub fn ingest_labeled(
    path: impl AsRef<Path>,
    seq_len: usize,
    batch_size: usize,
) -> Result<Dataset> {
    parse_labeled(&read(path.as_ref())?, seq_len, batch_size)
}

/// Write a byte-tokenized classification dataset back as `label<TAB>text`
/// lines, dropping padding.
pub fn export_labeled(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if !dataset.task.is_classification() {
        return Err(Error::domain(
            "only classification datasets export as labeled text",
        ));
    }
    let mut out = Vec::new();
    for (x, y) in dataset.examples() {
        write!(out, "{}\t", y[0])?;
        for &t in x.iter().filter(|&&t| t != PAD_TOKEN) {
            let b =
                u8::try_from(t).map_err(|_| Error::domain(format!("token {t} is not a byte")))?;
            if b == b'\n' {
                return Err(Error::domain("text contains a newline"));
            }
            out.push(b);
        }
        out.push(b'\n');
    }
    std::fs::write(path.as_ref(), out).map_err(|source| Error::Path {
        path: path.as_ref().to_path_buf(),
        source,
    })
}
