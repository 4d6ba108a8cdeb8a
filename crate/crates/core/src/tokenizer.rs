//! Byte-level BPE tokenizer with code-oriented special tokens.
//!
//! All 256 single bytes are base tokens, so any UTF-8 input is encodable.
//! Special tokens (end-of-text plus whitespace/tab run tokens) are matched
//! before BPE, longest first. Specials occupy the highest ids.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Canonical end-of-text marker string.
pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Default maximum whitespace/tab run length covered by run tokens.
pub const DEFAULT_MAX_RUN: usize = 16;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocab size {target} too small: need more than {minimum} (256 bytes + {n_specials} specials)")]
    TargetTooSmall {
        target: u32,
        minimum: u32,
        n_specials: usize,
    },
    #[error("insufficient merges: corpus sample supports only {achieved} tokens of requested {target}")]
    InsufficientMerges { achieved: u32, target: u32 },
    #[error("special token list must include {END_OF_TEXT}")]
    MissingEndOfText,
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("token id {id} out of range for vocab of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocab file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Token id, always in `[0, vocab_size)` for the vocab that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(u32);

impl TokenId {
    pub fn new(value: u32, vocab_size: u32) -> Result<Self, TokenizerError> {
        if value >= vocab_size {
            return Err(TokenizerError::IdOutOfRange {
                id: value,
                vocab_size,
            });
        }
        Ok(TokenId(value))
    }

    /// Construct without a range check; callers must guarantee validity.
    pub(crate) fn trusted(value: u32) -> Self {
        TokenId(value)
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecialKind {
    /// Matched in text only when `allow_special` is set (e.g. end-of-text).
    Control,
    /// A run of n consecutive spaces; always matched.
    SpaceRun(usize),
    /// A run of n consecutive tabs; always matched.
    TabRun(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialSpec {
    pub name: String,
    pub kind: SpecialKind,
}

impl SpecialSpec {
    pub fn end_of_text() -> Self {
        Self::control(END_OF_TEXT)
    }

    pub fn control(name: &str) -> Self {
        SpecialSpec {
            name: name.to_string(),
            kind: SpecialKind::Control,
        }
    }

    pub fn space_run(n: usize) -> Self {
        SpecialSpec {
            name: format!("space-run-{n}"),
            kind: SpecialKind::SpaceRun(n),
        }
    }

    pub fn tab_run(n: usize) -> Self {
        SpecialSpec {
            name: format!("tab-run-{n}"),
            kind: SpecialKind::TabRun(n),
        }
    }

    /// The literal text this special renders to on decode.
    pub fn text(&self) -> String {
        match self.kind {
            SpecialKind::Control => self.name.clone(),
            SpecialKind::SpaceRun(n) => " ".repeat(n),
            SpecialKind::TabRun(n) => "\t".repeat(n),
        }
    }

    fn from_name(name: &str) -> Self {
        if let Some(n) = name.strip_prefix("space-run-").and_then(|s| s.parse().ok()) {
            return SpecialSpec::space_run(n);
        }
        if let Some(n) = name.strip_prefix("tab-run-").and_then(|s| s.parse().ok()) {
            return SpecialSpec::tab_run(n);
        }
        SpecialSpec::control(name)
    }
}

/// End-of-text plus space/tab run tokens for runs of length `2..=max_run`.
pub fn default_specials(max_run: usize) -> Vec<SpecialSpec> {
    let mut specials = vec![SpecialSpec::end_of_text()];
    for n in 2..=max_run {
        specials.push(SpecialSpec::space_run(n));
    }
    for n in 2..=max_run {
        specials.push(SpecialSpec::tab_run(n));
    }
    specials
}

/// BPE merge table plus special-token registry.
///
/// Immutable after construction; `encode`/`decode` are pure and reentrant.
#[derive(Debug, Clone)]
pub struct Vocab {
    /// Merge rules in rank order, as byte strings.
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// Ordinary token id -> bytes (ids 0..=255 are single bytes).
    token_bytes: Vec<Vec<u8>>,
    /// (left id, right id) -> (rank, merged id).
    merge_map: HashMap<(u32, u32), (u32, u32)>,
    /// Specials in id order, occupying the highest ids.
    specials: Vec<(SpecialSpec, u32)>,
    /// Control specials sorted by text length descending for longest-first match.
    control_match: Vec<(String, u32)>,
    /// Run length -> id, per run char.
    space_runs: HashMap<usize, u32>,
    tab_runs: HashMap<usize, u32>,
    vocab_size: u32,
    eot: u32,
}

impl Vocab {
    /// Train a byte-level BPE vocab on a corpus sample.
    ///
    /// Specials occupy the highest ids. Merges are greedy highest-frequency
    /// pairs; ties break on the lexicographically smaller byte pair so
    /// training is deterministic.
    pub fn train_bpe(
        corpus_sample: &str,
        target_size: u32,
        specials: Vec<SpecialSpec>,
    ) -> Result<Self, TokenizerError> {
        let n_specials = specials.len();
        let minimum = 256 + n_specials as u32;
        if target_size <= minimum {
            return Err(TokenizerError::TargetTooSmall {
                target: target_size,
                minimum,
                n_specials,
            });
        }
        if !specials
            .iter()
            .any(|s| s.kind == SpecialKind::Control && s.name == END_OF_TEXT)
        {
            return Err(TokenizerError::MissingEndOfText);
        }

        let special_texts: Vec<Vec<u8>> =
            specials.iter().map(|s| s.text().into_bytes()).collect();

        // Segment the sample the same way encode does, so no merge can ever
        // straddle a special-token match.
        let matcher = SpecialMatcher::build(&specials, true);
        let mut segments: Vec<Vec<u32>> = Vec::new();
        for piece in matcher.split_ordinary(corpus_sample) {
            if !piece.is_empty() {
                segments.push(piece.iter().map(|&b| b as u32).collect());
            }
        }

        let mut token_bytes: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
        let n_merges = (target_size - minimum) as usize;

        for _ in 0..n_merges {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for seg in &segments {
                for w in seg.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            // Deterministic best pair: highest count, then smallest byte pair.
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &counts {
                let merged: Vec<u8> = {
                    let mut m = token_bytes[pair.0 as usize].clone();
                    m.extend_from_slice(&token_bytes[pair.1 as usize]);
                    m
                };
                if special_texts.contains(&merged) {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bp, bc)) => {
                        count > *bc
                            || (count == *bc
                                && (
                                    &token_bytes[pair.0 as usize],
                                    &token_bytes[pair.1 as usize],
                                ) < (
                                    &token_bytes[bp.0 as usize],
                                    &token_bytes[bp.1 as usize],
                                ))
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let (pair, _) = best.ok_or(TokenizerError::InsufficientMerges {
                achieved: minimum + merges.len() as u32,
                target: target_size,
            })?;

            let new_id = token_bytes.len() as u32;
            let mut merged = token_bytes[pair.0 as usize].clone();
            merged.extend_from_slice(&token_bytes[pair.1 as usize]);
            token_bytes.push(merged);
            merges.push((
                token_bytes[pair.0 as usize].clone(),
                token_bytes[pair.1 as usize].clone(),
            ));
            for seg in &mut segments {
                apply_merge(seg, pair, new_id);
            }
        }

        Self::assemble(merges, specials, target_size)
    }

    /// Build the vocab from a merge list and special registry.
    fn assemble(
        merges: Vec<(Vec<u8>, Vec<u8>)>,
        specials: Vec<SpecialSpec>,
        vocab_size: u32,
    ) -> Result<Self, TokenizerError> {
        let mut token_bytes: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        let mut token_to_id: HashMap<Vec<u8>, u32> = token_bytes
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), i as u32))
            .collect();
        let mut merge_map = HashMap::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lid = *token_to_id
                .get(left)
                .ok_or_else(|| TokenizerError::Parse {
                    line: rank + 2,
                    msg: "merge references unknown left token".into(),
                })?;
            let rid = *token_to_id
                .get(right)
                .ok_or_else(|| TokenizerError::Parse {
                    line: rank + 2,
                    msg: "merge references unknown right token".into(),
                })?;
            let new_id = token_bytes.len() as u32;
            let mut merged = left.clone();
            merged.extend_from_slice(right);
            token_bytes.push(merged.clone());
            token_to_id.insert(merged, new_id);
            merge_map.insert((lid, rid), (rank as u32, new_id));
        }

        let n_ordinary = token_bytes.len() as u32;
        let first_special = vocab_size - specials.len() as u32;
        debug_assert_eq!(n_ordinary, first_special);

        let mut eot = None;
        let mut specials_with_ids = Vec::new();
        let mut control_match = Vec::new();
        let mut space_runs = HashMap::new();
        let mut tab_runs = HashMap::new();
        for (i, spec) in specials.into_iter().enumerate() {
            let id = first_special + i as u32;
            match spec.kind {
                SpecialKind::Control => {
                    if spec.name == END_OF_TEXT {
                        eot = Some(id);
                    }
                    control_match.push((spec.name.clone(), id));
                }
                SpecialKind::SpaceRun(n) => {
                    space_runs.insert(n, id);
                }
                SpecialKind::TabRun(n) => {
                    tab_runs.insert(n, id);
                }
            }
            specials_with_ids.push((spec, id));
        }
        control_match.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let eot = eot.ok_or(TokenizerError::MissingEndOfText)?;

        Ok(Vocab {
            merges,
            token_bytes,
            merge_map,
            specials: specials_with_ids,
            control_match,
            space_runs,
            tab_runs,
            vocab_size,
            eot,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn eot_id(&self) -> TokenId {
        TokenId(self.eot)
    }

    pub fn special_id(&self, name: &str) -> Option<TokenId> {
        self.specials
            .iter()
            .find(|(s, _)| s.name == name)
            .map(|&(_, id)| TokenId(id))
    }

    pub fn id(&self, raw: u32) -> Result<TokenId, TokenizerError> {
        TokenId::new(raw, self.vocab_size)
    }

    /// Encode UTF-8 text to token ids. Specials are matched longest-first
    /// before BPE; control specials (like end-of-text) match their literal
    /// text only when `allow_special` is set.
    pub fn encode(&self, text: &str, allow_special: bool) -> Vec<TokenId> {
        let matcher = self.matcher(allow_special);
        let mut out = Vec::new();
        let mut pending: Vec<u8> = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match matcher.match_at(bytes, i) {
                Some((len, ids)) => {
                    self.bpe_segment(&pending, &mut out);
                    pending.clear();
                    out.extend(ids.iter().map(|&id| TokenId(id)));
                    i += len;
                }
                None => {
                    pending.push(bytes[i]);
                    i += 1;
                }
            }
        }
        self.bpe_segment(&pending, &mut out);
        out
    }

    /// Decode token ids back to text. Special ids render their canonical
    /// strings. Errors on any out-of-range id.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let raw = id.value();
            if (raw as usize) < self.token_bytes.len() {
                bytes.extend_from_slice(&self.token_bytes[raw as usize]);
            } else if raw < self.vocab_size {
                let idx = (raw - self.token_bytes.len() as u32) as usize;
                bytes.extend_from_slice(self.specials[idx].0.text().as_bytes());
            } else {
                return Err(TokenizerError::UnknownTokenId(raw));
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn matcher(&self, allow_special: bool) -> SpecialMatcher {
        SpecialMatcher {
            controls: if allow_special {
                self.control_match.clone()
            } else {
                Vec::new()
            },
            space_runs: self.space_runs.clone(),
            tab_runs: self.tab_runs.clone(),
        }
    }

    /// BPE over one ordinary-byte segment, applying merges lowest rank first.
    fn bpe_segment(&self, segment: &[u8], out: &mut Vec<TokenId>) {
        if segment.is_empty() {
            return;
        }
        let mut ids: Vec<u32> = segment.iter().map(|&b| b as u32).collect();
        loop {
            let mut best: Option<(u32, (u32, u32), u32)> = None; // (rank, pair, merged)
            for w in ids.windows(2) {
                if let Some(&(rank, merged)) = self.merge_map.get(&(w[0], w[1])) {
                    if best.map_or(true, |(br, _, _)| rank < br) {
                        best = Some((rank, (w[0], w[1]), merged));
                    }
                }
            }
            match best {
                Some((_, pair, merged)) => apply_merge(&mut ids, pair, merged),
                None => break,
            }
        }
        out.extend(ids.into_iter().map(TokenId));
    }

    /// Serialize to the versioned plain-text vocab format.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("bpevocab v1 {}\n", self.vocab_size);
        for (left, right) in &self.merges {
            s.push_str(&escape(left));
            s.push(' ');
            s.push_str(&escape(right));
            s.push('\n');
        }
        s.push_str("#specials\n");
        for (spec, id) in &self.specials {
            s.push_str(&format!("{}\t{}\n", spec.name, id));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TokenizerError::Parse {
            line: 1,
            msg: "empty vocab file".into(),
        })?;
        let vocab_size = header
            .strip_prefix("bpevocab v1 ")
            .and_then(|s| s.parse().ok())
            .ok_or(TokenizerError::Parse {
                line: 1,
                msg: format!("bad header {header:?}, expected 'bpevocab v1 <size>'"),
            })?;

        let mut merges = Vec::new();
        let mut specials: Vec<(SpecialSpec, u32)> = Vec::new();
        let mut in_specials = false;
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line == "#specials" {
                in_specials = true;
                continue;
            }
            if in_specials {
                let (name, id) = line.split_once('\t').ok_or(TokenizerError::Parse {
                    line: lineno,
                    msg: "expected '<name>\\t<id>'".into(),
                })?;
                let id: u32 = id.parse().map_err(|_| TokenizerError::Parse {
                    line: lineno,
                    msg: format!("bad special id {id:?}"),
                })?;
                specials.push((SpecialSpec::from_name(name), id));
            } else {
                let (left, right) = line.split_once(' ').ok_or(TokenizerError::Parse {
                    line: lineno,
                    msg: "expected '<left> <right>' merge rule".into(),
                })?;
                merges.push((
                    unescape(left).map_err(|msg| TokenizerError::Parse { line: lineno, msg })?,
                    unescape(right).map_err(|msg| TokenizerError::Parse { line: lineno, msg })?,
                ));
            }
        }
        // Specials must be dense at the top of the id space.
        specials.sort_by_key(|&(_, id)| id);
        let first = vocab_size - specials.len() as u32;
        for (i, &(_, id)) in specials.iter().enumerate() {
            if id != first + i as u32 {
                return Err(TokenizerError::Parse {
                    line: 0,
                    msg: format!("special ids not dense at top of vocab (saw {id})"),
                });
            }
        }
        Self::assemble(
            merges,
            specials.into_iter().map(|(s, _)| s).collect(),
            vocab_size,
        )
    }
}

/// Replace every non-overlapping occurrence of `pair` in `ids` with `merged`.
fn apply_merge(ids: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

/// Longest-first special matcher shared by encode and train-time segmentation.
struct SpecialMatcher {
    controls: Vec<(String, u32)>,
    space_runs: HashMap<usize, u32>,
    tab_runs: HashMap<usize, u32>,
}

impl SpecialMatcher {
    fn build(specials: &[SpecialSpec], match_controls: bool) -> Self {
        let mut controls = Vec::new();
        let mut space_runs = HashMap::new();
        let mut tab_runs = HashMap::new();
        for (i, spec) in specials.iter().enumerate() {
            match spec.kind {
                SpecialKind::Control => {
                    if match_controls {
                        controls.push((spec.name.clone(), i as u32));
                    }
                }
                SpecialKind::SpaceRun(n) => {
                    space_runs.insert(n, i as u32);
                }
                SpecialKind::TabRun(n) => {
                    tab_runs.insert(n, i as u32);
                }
            }
        }
        controls.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        SpecialMatcher {
            controls,
            space_runs,
            tab_runs,
        }
    }

    /// If a special matches at `pos`, return consumed byte length and the
    /// special ids it maps to.
    fn match_at(&self, bytes: &[u8], pos: usize) -> Option<(usize, Vec<u32>)> {
        for (text, id) in &self.controls {
            if bytes[pos..].starts_with(text.as_bytes()) {
                return Some((text.len(), vec![*id]));
            }
        }
        let b = bytes[pos];
        let runs = match b {
            b' ' => &self.space_runs,
            b'\t' => &self.tab_runs,
            _ => return None,
        };
        if runs.is_empty() {
            return None;
        }
        let run_len = bytes[pos..].iter().take_while(|&&x| x == b).count();
        if run_len < 2 {
            return None;
        }
        let (consumed, ids) = decompose_run(run_len, runs);
        if consumed == 0 {
            return None;
        }
        Some((consumed, ids))
    }

    /// Split text into maximal ordinary-byte segments (specials removed).
    fn split_ordinary<'a>(&self, text: &'a str) -> Vec<&'a [u8]> {
        let bytes = text.as_bytes();
        let mut segments = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < bytes.len() {
            if let Some((len, _)) = self.match_at(bytes, i) {
                if i > start {
                    segments.push(&bytes[start..i]);
                }
                i += len;
                start = i;
            } else {
                i += 1;
            }
        }
        if start < bytes.len() {
            segments.push(&bytes[start..]);
        }
        segments
    }
}

/// Greedily cover a run of `n` identical chars with run tokens, never leaving
/// a single leftover char when a shorter token can avoid it.
fn decompose_run(n: usize, runs: &HashMap<usize, u32>) -> (usize, Vec<u32>) {
    let max_run = *runs.keys().max().expect("non-empty runs");
    let mut remaining = n;
    let mut ids = Vec::new();
    while remaining >= 2 {
        let mut k = remaining.min(max_run);
        // Avoid stranding exactly one char if a shorter token fits.
        if remaining - k == 1 && k > 2 {
            k -= 1;
        }
        let found = (2..=k).rev().find(|len| runs.contains_key(len));
        match found {
            Some(len) => {
                ids.push(runs[&len]);
                remaining -= len;
            }
            None => break,
        }
    }
    (n - remaining, ids)
}

/// Escape token bytes into printable line-safe form: printable ASCII except
/// space and '%' pass through, everything else becomes %XX.
fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'%' {
            s.push(b as char);
        } else {
            s.push_str(&format!("%{b:02X}"));
        }
    }
    s
}

fn unescape(s: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s
                .get(i + 1..i + 3)
                .ok_or_else(|| "truncated %XX escape".to_string())?;
            let b = u8::from_str_radix(hex, 16).map_err(|_| format!("bad escape %{hex}"))?;
            out.push(b);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}
