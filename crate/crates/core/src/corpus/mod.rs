//! Caption corpora: ingestion from JSONL + `HCM1` files, validation, and the
//! columnar store the clustering and bank builders read from.

pub mod embed;
pub mod format;

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vector::{normalize_in_place, EmbeddingMatrix};

pub use embed::{embed_text, Embedder, EmbedderConfig, EmbedderKind, StubEmbedder};

/// Input unit: one caption and its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

/// Borrowed view of one stored record.
#[derive(Debug, Clone, Copy)]
pub struct RecordRef<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub embedding: &'a [f32],
}

/// Immutable, validated caption collection in ingestion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    ids: Vec<String>,
    texts: Vec<String>,
    embeddings: EmbeddingMatrix,
    normalized: bool,
}

#[derive(Deserialize)]
struct CaptionLine {
    id: String,
    text: String,
}

impl Corpus {
    /// Validates and stores `records`. With `normalize`, each embedding is
    /// scaled to unit length; zero vectors are rejected.
    pub fn from_records(records: Vec<CaptionRecord>, normalize: bool) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.embedding.len())
            .ok_or_else(|| Error::Invalid("corpus is empty".into()))?;
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension is zero".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        let mut texts = Vec::with_capacity(records.len());
        let mut embeddings = EmbeddingMatrix::with_capacity(dim, records.len());
        for (index, mut r) in records.into_iter().enumerate() {
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id));
            }
            if r.text.trim().is_empty() {
                return Err(Error::Invalid(format!("record {:?} has empty text", r.id)));
            }
            if r.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            if normalize && !normalize_in_place(&mut r.embedding) {
                return Err(Error::ZeroNorm { index });
            }
            embeddings.push(&r.embedding)?;
            ids.push(r.id);
            texts.push(r.text);
        }
        Ok(Self {
            ids,
            texts,
            embeddings,
            normalized: normalize,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn record(&self, i: usize) -> RecordRef<'_> {
        RecordRef {
            id: &self.ids[i],
            text: &self.texts[i],
            embedding: self.embeddings.row(i),
        }
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = RecordRef<'_>> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// SHA-256 over ids, texts and raw embedding bits, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update([u8::from(self.normalized)]);
        for r in self.records() {
            h.update((r.id.len() as u64).to_le_bytes());
            h.update(r.id.as_bytes());
            h.update((r.text.len() as u64).to_le_bytes());
            h.update(r.text.as_bytes());
            for x in r.embedding {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Reads line-delimited `{"id","text"}` records. Blank lines are skipped.
pub fn read_captions(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: CaptionLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(malformed("empty caption text".into()));
        }
        out.push((rec.id, rec.text));
    }
    Ok(out)
}

/// Loads captions and embeddings and zips them positionally.
pub fn ingest(captions_file: &Path, embeddings_file: &Path, normalize: bool) -> Result<Corpus> {
    let captions = read_captions(captions_file)?;
    let embeddings = format::read_file(embeddings_file)?;
    if captions.len() != embeddings.len() {
        return Err(Error::CountMismatch {
            captions: captions.len(),
            embeddings: embeddings.len(),
        });
    }
    let records = captions
        .into_iter()
        .zip(embeddings.rows())
        .map(|((id, text), e)| CaptionRecord {
            id,
            text,
            embedding: e.to_vec(),
        })
        .collect();
    Corpus::from_records(records, normalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(
        dir: &Path,
        lines: &[&str],
        rows: &[[f32; 4]],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let cap = dir.join("captions.jsonl");
        let mut f = std::fs::File::create(&cap).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        let emb = dir.join("emb.hcm1");
        format::write_file(&emb, &EmbeddingMatrix::from_rows(4, rows).unwrap()).unwrap();
        (cap, emb)
    }

    #[test]
    fn ingest_zips_positionally() {
        let dir = tempfile::tempdir().unwrap();
        let (cap, emb) = write_fixture(
            dir.path(),
            &[
                r#"{"id":"a","text":"crack the eggs"}"#,
                r#"{"id":"b","text":"whisk"}"#,
                r#"{"id":"c","text":"pour into the pan"}"#,
            ],
            &[
                [3.0, 4.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 2.0, 0.0],
            ],
        );
        let c = ingest(&cap, &emb, true).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.dim(), 4);
        assert_eq!(c.record(0).embedding, &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(c.record(2).text, "pour into the pan");
        let raw = ingest(&cap, &emb, false).unwrap();
        assert_eq!(raw.record(0).embedding, &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (cap, emb) = write_fixture(
            dir.path(),
            &[r#"{"id":"a","text":"x"}"#],
            &[[1.0; 4], [1.0; 4]],
        );
        assert!(matches!(
            ingest(&cap, &emb, true),
            Err(Error::CountMismatch {
                captions: 1,
                embeddings: 2
            })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (cap, emb) = write_fixture(
            dir.path(),
            &[r#"{"id":"a","text":"x"}"#, r#"{"id":"b""#],
            &[[1.0; 4], [1.0; 4]],
        );
        match ingest(&cap, &emb, true) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_and_zero_norm() {
        let dir = tempfile::tempdir().unwrap();
        let (cap, emb) = write_fixture(
            dir.path(),
            &[r#"{"id":"a","text":"x"}"#, r#"{"id":"a","text":"y"}"#],
            &[[1.0; 4], [1.0; 4]],
        );
        assert!(matches!(
            ingest(&cap, &emb, true),
            Err(Error::DuplicateId(_))
        ));

        let (cap, emb) = write_fixture(
            dir.path(),
            &[r#"{"id":"a","text":"x"}"#, r#"{"id":"b","text":"y"}"#],
            &[[1.0; 4], [0.0; 4]],
        );
        assert!(matches!(
            ingest(&cap, &emb, true),
            Err(Error::ZeroNorm { index: 1 })
        ));
        assert!(ingest(&cap, &emb, false).is_ok());
    }

    #[test]
    fn missing_file_names_path() {
        let err = ingest(
            Path::new("/nonexistent/c.jsonl"),
            Path::new("/nonexistent/e"),
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/c.jsonl"));
    }

    #[test]
    fn permuted_input_gives_same_record_set() {
        let recs: Vec<CaptionRecord> = (0..5)
            .map(|i| CaptionRecord {
                id: format!("r{i}"),
                text: format!("caption {i}"),
                embedding: vec![i as f32 + 1.0, 1.0, -(i as f32)],
            })
            .collect();
        let mut rev = recs.clone();
        rev.reverse();
        let a = Corpus::from_records(recs, true).unwrap();
        let b = Corpus::from_records(rev, true).unwrap();
        let set = |c: &Corpus| {
            let mut v: Vec<(String, String, Vec<u32>)> = c
                .records()
                .map(|r| {
                    (
                        r.id.into(),
                        r.text.into(),
                        r.embedding.iter().map(|x| x.to_bits()).collect(),
                    )
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(set(&a), set(&b));
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
