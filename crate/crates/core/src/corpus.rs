//! Data ingestion, mixture sampling, filtering, chunking, and fixed-length
//! sequence packing.
//!
//! Input corpora are JSONL shards (one object per line, `text` required,
//! `source` optional and defaulting to the shard label). Packed output is the
//! binary `packtok v1` format plus a plain-text provenance sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid mixture spec: {0}")]
    InvalidMixture(String),
    #[error("mixture source {0:?} has no document stream")]
    MissingSource(String),
    #[error("packing requires seq_len >= 2, got {0}")]
    SeqLenTooSmall(usize),
    #[error("bad magic in packed token file (expected 'packtok v1')")]
    BadMagic,
    #[error("packed token file truncated")]
    Truncated,
    #[error("io error: {0}")]
    PlainIo(#[from] std::io::Error),
}

/// A single text document with its source label.
#[derive(Debug, Clone)]
pub struct Document {
    pub text: String,
    pub source: String,
    /// Filled by `filter_short` after tokenization.
    pub token_count: Option<usize>,
}

/// Sampling proportions over source labels, plus the interleaving seed.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub entries: Vec<(String, f64)>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(entries: Vec<(String, f64)>, seed: u64) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::InvalidMixture("no entries".into()));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidMixture(format!(
                "proportions sum to {total}, expected 1.0"
            )));
        }
        if entries.iter().any(|(_, p)| *p < 0.0 || *p > 1.0) {
            return Err(CorpusError::InvalidMixture(
                "proportions must lie in [0,1]".into(),
            ));
        }
        Ok(MixtureSpec { entries, seed })
    }
}

/// What to do when one mixture source runs out while others remain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExhaustPolicy {
    /// Stop emitting entirely (default), with a provenance note.
    #[default]
    StopAll,
    /// Renormalize the remaining sources and continue.
    Redistribute,
}

/// Fixed-length token window with document-boundary metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<TokenId>,
    /// Sorted offsets where a new document begins. Contains 0 iff the window
    /// starts a document; at every interior boundary b > 0, ids[b-1] is the
    /// end-of-text id.
    pub boundaries: Vec<usize>,
    pub chunk_index: usize,
}

/// Filter and accounting stats carried alongside a packed dataset.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub docs_kept: u64,
    pub docs_dropped: u64,
    pub skipped_records: u64,
    pub tokens_per_source: BTreeMap<String, u64>,
    pub separator_count: u64,
    pub emitted_tokens: u64,
    pub dropped_tail_tokens: u64,
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("docs_kept {}\n", self.docs_kept));
        s.push_str(&format!("docs_dropped {}\n", self.docs_dropped));
        s.push_str(&format!("skipped_records {}\n", self.skipped_records));
        for (src, n) in &self.tokens_per_source {
            s.push_str(&format!("tokens[{src}] {n}\n"));
        }
        s.push_str(&format!("separator_count {}\n", self.separator_count));
        s.push_str(&format!("emitted_tokens {}\n", self.emitted_tokens));
        s.push_str(&format!(
            "dropped_tail_tokens {}\n",
            self.dropped_tail_tokens
        ));
        for note in &self.notes {
            s.push_str(&format!("note {note}\n"));
        }
        s
    }
}

/// An ordered collection of fixed-length training windows.
#[derive(Debug, Clone)]
pub struct PackedDataset {
    pub seq_len: usize,
    pub vocab_size: u32,
    pub sequences: Vec<PackedSequence>,
    pub provenance: Provenance,
}

impl PackedDataset {
    /// Build directly from raw token rows; used for synthetic corpora.
    pub fn from_raw(
        seq_len: usize,
        vocab_size: u32,
        rows: Vec<(Vec<u32>, Vec<usize>)>,
    ) -> Result<Self, CorpusError> {
        if seq_len < 2 {
            return Err(CorpusError::SeqLenTooSmall(seq_len));
        }
        let mut sequences = Vec::with_capacity(rows.len());
        for (ids, boundaries) in rows {
            assert_eq!(ids.len(), seq_len, "row length must equal seq_len");
            sequences.push(PackedSequence {
                ids: ids.into_iter().map(TokenId::trusted).collect(),
                boundaries,
                chunk_index: 0,
            });
        }
        let emitted = (sequences.len() * seq_len) as u64;
        Ok(PackedDataset {
            seq_len,
            vocab_size,
            sequences,
            provenance: Provenance {
                emitted_tokens: emitted,
                ..Provenance::default()
            },
        })
    }

    pub fn n_tokens(&self) -> u64 {
        (self.sequences.len() * self.seq_len) as u64
    }
}

/// Supported corpus input formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

#[derive(Debug, Clone, Default)]
pub struct IngestStats {
    pub records: u64,
    pub skipped: u64,
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    #[serde(default)]
    source: Option<String>,
}

/// Read documents from shard files in file order. Malformed records are
/// counted and skipped; unreadable files are fatal.
pub fn ingest(
    paths: &[PathBuf],
    format: CorpusFormat,
) -> Result<(Vec<Document>, IngestStats), CorpusError> {
    let CorpusFormat::Jsonl = format;
    let mut docs = Vec::new();
    let mut stats = IngestStats::default();
    for path in paths {
        let shard_label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".into());
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<JsonlRecord>(line) {
                Ok(rec) if !rec.text.is_empty() => {
                    stats.records += 1;
                    docs.push(Document {
                        text: rec.text,
                        source: rec.source.unwrap_or_else(|| shard_label.clone()),
                        token_count: None,
                    });
                }
                _ => stats.skipped += 1,
            }
        }
    }
    Ok((docs, stats))
}

#[derive(Debug, Clone, Default)]
pub struct FilterStats {
    pub kept: u64,
    pub dropped: u64,
}

/// Tokenize and drop documents shorter than `min_tokens`. Every emitted
/// document carries its token count.
pub fn filter_short(
    docs: Vec<Document>,
    vocab: &Vocab,
    min_tokens: usize,
) -> (Vec<Document>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for mut doc in docs {
        let n = vocab.encode(&doc.text, false).len();
        if n >= min_tokens {
            doc.token_count = Some(n);
            stats.kept += 1;
            kept.push(doc);
        } else {
            stats.dropped += 1;
        }
    }
    (kept, stats)
}

/// Seeded-deterministic interleaving of per-source document streams.
///
/// Each emitted document is drawn from source s with probability equal to
/// s's proportion. Returns the interleaved stream and any exhaustion note.
pub fn sample_mixture(
    mut streams: BTreeMap<String, Vec<Document>>,
    spec: &MixtureSpec,
    policy: ExhaustPolicy,
) -> Result<(Vec<Document>, Vec<String>), CorpusError> {
    for (src, _) in &spec.entries {
        if !streams.contains_key(src) {
            return Err(CorpusError::MissingSource(src.clone()));
        }
    }
    // Consume front-to-back without repeated shifting.
    let mut cursors: BTreeMap<String, usize> = BTreeMap::new();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut active: Vec<(String, f64)> = spec.entries.clone();
    let mut out = Vec::new();
    let mut notes = Vec::new();

    'outer: loop {
        let total: f64 = active.iter().map(|(_, p)| p).sum();
        if active.is_empty() || total <= 0.0 {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = active.len() - 1;
        for (i, (_, p)) in active.iter().enumerate() {
            if u < *p {
                chosen = i;
                break;
            }
            u -= p;
        }
        let src = active[chosen].0.clone();
        let stream = streams.get_mut(&src).expect("checked above");
        let cursor = cursors.entry(src.clone()).or_insert(0);
        if *cursor < stream.len() {
            out.push(stream[*cursor].clone());
            *cursor += 1;
            if *cursor == stream.len() {
                match policy {
                    ExhaustPolicy::StopAll => {
                        notes.push(format!("source {src} exhausted; stop-all policy ended sampling"));
                        break 'outer;
                    }
                    ExhaustPolicy::Redistribute => {
                        notes.push(format!(
                            "source {src} exhausted; redistributed to remaining sources"
                        ));
                        active.remove(chosen);
                    }
                }
            }
        } else {
            active.remove(chosen);
        }
    }
    Ok((out, notes))
}

/// Partition an already-shuffled stream into `n_chunks` streams with
/// near-equal token counts (greedy least-loaded assignment; deterministic).
pub fn split_chunks(docs: Vec<Document>, n_chunks: usize) -> Vec<Vec<Document>> {
    let mut chunks: Vec<Vec<Document>> = (0..n_chunks).map(|_| Vec::new()).collect();
    let mut loads = vec![0u64; n_chunks];
    for doc in docs {
        let weight = doc.token_count.unwrap_or(doc.text.len()) as u64;
        let target = loads
            .iter()
            .enumerate()
            .min_by_key(|&(i, &l)| (l, i))
            .map(|(i, _)| i)
            .unwrap_or(0);
        loads[target] += weight;
        chunks[target].push(doc);
    }
    chunks
}

/// Concatenate documents (end-of-text id between consecutive documents) and
/// chop into fixed-length windows. The final partial window is dropped and
/// the windows are uniformly shuffled with the given seed.
pub fn pack(
    docs: &[Document],
    vocab: &Vocab,
    seq_len: usize,
    seed: u64,
    chunk_index: usize,
) -> Result<PackedDataset, CorpusError> {
    if seq_len < 2 {
        return Err(CorpusError::SeqLenTooSmall(seq_len));
    }
    let eot = vocab.eot_id();
    let mut stream: Vec<TokenId> = Vec::new();
    let mut doc_starts: Vec<usize> = Vec::new();
    let mut provenance = Provenance::default();

    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(eot);
            provenance.separator_count += 1;
        }
        doc_starts.push(stream.len());
        let ids = vocab.encode(&doc.text, false);
        *provenance
            .tokens_per_source
            .entry(doc.source.clone())
            .or_insert(0) += ids.len() as u64;
        stream.extend(ids);
        provenance.docs_kept += 1;
    }

    let n_windows = stream.len() / seq_len;
    let mut sequences = Vec::with_capacity(n_windows);
    let mut start_iter = doc_starts.iter().peekable();
    for w in 0..n_windows {
        let lo = w * seq_len;
        let hi = lo + seq_len;
        let mut boundaries = Vec::new();
        while let Some(&&p) = start_iter.peek() {
            if p < hi {
                boundaries.push(p - lo);
                start_iter.next();
            } else {
                break;
            }
        }
        sequences.push(PackedSequence {
            ids: stream[lo..hi].to_vec(),
            boundaries,
            chunk_index,
        });
    }
    provenance.emitted_tokens = (n_windows * seq_len) as u64;
    provenance.dropped_tail_tokens = (stream.len() - n_windows * seq_len) as u64;

    // Uniform Fisher-Yates shuffle of the constructed windows.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..sequences.len()).rev() {
        let j = rng.gen_range(0..=i);
        sequences.swap(i, j);
    }

    Ok(PackedDataset {
        seq_len,
        vocab_size: vocab.vocab_size(),
        sequences,
        provenance,
    })
}

const PACKTOK_MAGIC: &[u8] = b"packtok v1\n";

/// Write the binary token file: magic, little-endian u32 {vocab_size,
/// seq_len, n_sequences}, then per record seq_len u32 ids followed by u16
/// boundary count and u16 boundary offsets.
pub fn write_packtok(dataset: &PackedDataset, path: &Path) -> Result<(), CorpusError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PACKTOK_MAGIC);
    buf.extend_from_slice(&dataset.vocab_size.to_le_bytes());
    buf.extend_from_slice(&(dataset.seq_len as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.sequences.len() as u32).to_le_bytes());
    for seq in &dataset.sequences {
        for id in &seq.ids {
            buf.extend_from_slice(&id.value().to_le_bytes());
        }
        buf.extend_from_slice(&(seq.boundaries.len() as u16).to_le_bytes());
        for &b in &seq.boundaries {
            buf.extend_from_slice(&(b as u16).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_packtok(path: &Path) -> Result<PackedDataset, CorpusError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() < PACKTOK_MAGIC.len() || &bytes[..PACKTOK_MAGIC.len()] != PACKTOK_MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let mut pos = PACKTOK_MAGIC.len();
    let take_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32, CorpusError> {
        let end = *pos + 4;
        if end > bytes.len() {
            return Err(CorpusError::Truncated);
        }
        let v = u32::from_le_bytes(bytes[*pos..end].try_into().unwrap());
        *pos = end;
        Ok(v)
    };
    let vocab_size = take_u32(&bytes, &mut pos)?;
    let seq_len = take_u32(&bytes, &mut pos)? as usize;
    let n_sequences = take_u32(&bytes, &mut pos)? as usize;
    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut ids = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            ids.push(TokenId::trusted(take_u32(&bytes, &mut pos)?));
        }
        let end = pos + 2;
        if end > bytes.len() {
            return Err(CorpusError::Truncated);
        }
        let n_bounds = u16::from_le_bytes(bytes[pos..end].try_into().unwrap()) as usize;
        pos = end;
        let mut boundaries = Vec::with_capacity(n_bounds);
        for _ in 0..n_bounds {
            let end = pos + 2;
            if end > bytes.len() {
                return Err(CorpusError::Truncated);
            }
            boundaries.push(u16::from_le_bytes(bytes[pos..end].try_into().unwrap()) as usize);
            pos = end;
        }
        sequences.push(PackedSequence {
            ids,
            boundaries,
            chunk_index: 0,
        });
    }
    let emitted = (sequences.len() * seq_len) as u64;
    Ok(PackedDataset {
        seq_len,
        vocab_size,
        sequences,
        provenance: Provenance {
            emitted_tokens: emitted,
            ..Provenance::default()
        },
    })
}
