//! The norm base: dialogues, their embeddings and extracted norms, with exact
//! top-k dialogue retrieval and a directory layout on disk.
//!
//! Layout of a saved base:
//!
//! ```text
//! base/
//!   dialogues.jsonl   dialogues in id order
//!   norms.jsonl       norms in insertion order
//!   embeddings.bin    dialogue embeddings in id order
//!   manifest.json     provider, dimension, threshold, counts
//! ```
//!
//! `embeddings.bin` is little-endian: magic `NFEB`, `u32` version, `u32`
//! dimension, `u32` count, `u32` provider-id length and bytes, then per record
//! a `u32` id length, id bytes and `dimension` `f32` values.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Dialogue, DialogueProvenance, NormStatement, Verification};
use crate::embeddings::{cosine_slices, EmbedError, Embedder, EmbeddingVector};
use crate::normpool::sort_by_similarity;

pub const DIALOGUES_FILE: &str = "dialogues.jsonl";
pub const NORMS_FILE: &str = "norms.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

const MAGIC: &[u8; 4] = b"NFEB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BaseError {
    #[error("dialogue id {0:?} already stored")]
    DuplicateDialogue(String),
    #[error("unknown dialogue id {0:?}")]
    UnknownDialogue(String),
    #[error("norm id {0:?} already stored")]
    DuplicateNorm(String),
    #[error("invalid {kind} {id:?}: {message}")]
    Invalid {
        kind: &'static str,
        id: String,
        message: String,
    },
    #[error("base uses provider {base:?} but embedder is {embedder:?}")]
    ProviderMismatch { base: String, embedder: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub provider_id: String,
    pub dimension: usize,
    pub pool_threshold: f64,
    pub dialogue_count: usize,
    pub norm_count: usize,
    pub usable_norm_count: usize,
}

pub struct NormBase {
    embedder: Arc<dyn Embedder>,
    pool_threshold: f64,
    dialogues: BTreeMap<String, Dialogue>,
    embeddings: BTreeMap<String, EmbeddingVector>,
    norms: Vec<NormStatement>,
    norm_ids: HashSet<String>,
    by_dialogue: HashMap<String, Vec<usize>>,
}

impl std::fmt::Debug for NormBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NormBase")
            .field("provider_id", &self.embedder.provider_id())
            .field("dialogues", &self.dialogues.len())
            .field("norms", &self.norms.len())
            .finish()
    }
}

impl NormBase {
    pub fn new(embedder: Arc<dyn Embedder>, pool_threshold: f64) -> Self {
        Self {
            embedder,
            pool_threshold,
            dialogues: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            norms: Vec::new(),
            norm_ids: HashSet::new(),
            by_dialogue: HashMap::new(),
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn provider_id(&self) -> &str {
        self.embedder.provider_id()
    }

    pub fn pool_threshold(&self) -> f64 {
        self.pool_threshold
    }

    /// Embedding text of a dialogue: utterance texts without speakers, one per line.
    pub fn dialogue_text(dialogue: &Dialogue) -> String {
        dialogue.plain_text()
    }

    pub fn add_dialogue(&mut self, dialogue: Dialogue) -> Result<String, BaseError> {
        if self.dialogues.contains_key(&dialogue.id) {
            return Err(BaseError::DuplicateDialogue(dialogue.id));
        }
        dialogue.validate().map_err(|message| BaseError::Invalid {
            kind: "dialogue",
            id: dialogue.id.clone(),
            message,
        })?;
        let vector = self.embedder.embed(&Self::dialogue_text(&dialogue))?;
        let id = dialogue.id.clone();
        self.embeddings.insert(id.clone(), vector);
        self.dialogues.insert(id.clone(), dialogue);
        Ok(id)
    }

    /// Adds a norm whose source dialogue is already stored.
    pub fn add_norm(&mut self, norm: NormStatement) -> Result<(), BaseError> {
        if !self.dialogues.contains_key(&norm.source_dialogue_id) {
            return Err(BaseError::UnknownDialogue(norm.source_dialogue_id));
        }
        if self.norm_ids.contains(&norm.id) {
            return Err(BaseError::DuplicateNorm(norm.id));
        }
        norm.validate().map_err(|message| BaseError::Invalid {
            kind: "norm",
            id: norm.id.clone(),
            message,
        })?;
        if let Some(v) = &norm.embedding {
            if v.len() != self.embedder.dimension() {
                return Err(BaseError::Invalid {
                    kind: "norm",
                    id: norm.id.clone(),
                    message: format!(
                        "embedding dimension {} != {}",
                        v.len(),
                        self.embedder.dimension()
                    ),
                });
            }
        }
        self.norm_ids.insert(norm.id.clone());
        self.by_dialogue
            .entry(norm.source_dialogue_id.clone())
            .or_default()
            .push(self.norms.len());
        self.norms.push(norm);
        Ok(())
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.get(id)
    }

    /// Dialogues in id order.
    pub fn dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.values()
    }

    pub fn dialogue_count(&self) -> usize {
        self.dialogues.len()
    }

    pub fn dialogue_embedding(&self, id: &str) -> Option<&EmbeddingVector> {
        self.embeddings.get(id)
    }

    /// All norms in insertion order, including rejected ones.
    pub fn norms(&self) -> &[NormStatement] {
        &self.norms
    }

    /// Exact top-k stored dialogues by cosine to `query`, never including a
    /// stored dialogue with the query's id.
    pub fn retrieve_similar(
        &self,
        query: &Dialogue,
        k: usize,
    ) -> Result<Vec<(String, f64)>, BaseError> {
        self.retrieve_filtered(query, k, None)
    }

    /// As [`retrieve_similar`](Self::retrieve_similar), optionally restricted
    /// to one dialogue provenance.
    pub fn retrieve_filtered(
        &self,
        query: &Dialogue,
        k: usize,
        provenance: Option<DialogueProvenance>,
    ) -> Result<Vec<(String, f64)>, BaseError> {
        if k == 0 || self.dialogues.is_empty() {
            return Ok(Vec::new());
        }
        let fresh;
        let qv = match self.embeddings.get(&query.id) {
            Some(stored) => stored,
            None => {
                fresh = self.embedder.embed(&Self::dialogue_text(query))?;
                &fresh
            }
        };
        let mut scored: Vec<(String, f64)> = self
            .embeddings
            .iter()
            .filter(|(id, _)| **id != query.id)
            .filter(|(id, _)| {
                provenance.is_none_or(|p| self.dialogues[id.as_str()].provenance == p)
            })
            .map(|(id, v)| (id.clone(), cosine_slices(v.values(), qv.values())))
            .collect();
        sort_by_similarity(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    /// Non-rejected norms of the given dialogues, deduplicated by id, in
    /// dialogue order then insertion order.
    pub fn norms_for<S: AsRef<str>>(
        &self,
        dialogue_ids: &[S],
    ) -> Result<Vec<&NormStatement>, BaseError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for id in dialogue_ids {
            let id = id.as_ref();
            if !self.dialogues.contains_key(id) {
                return Err(BaseError::UnknownDialogue(id.to_string()));
            }
            for &idx in self.by_dialogue.get(id).map(Vec::as_slice).unwrap_or(&[]) {
                let norm = &self.norms[idx];
                if norm.is_usable() && seen.insert(norm.id.as_str()) {
                    out.push(norm);
                }
            }
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            provider_id: self.provider_id().to_string(),
            dimension: self.embedder.dimension(),
            pool_threshold: self.pool_threshold,
            dialogue_count: self.dialogues.len(),
            norm_count: self.norms.len(),
            usable_norm_count: self.norms.iter().filter(|n| n.is_usable()).count(),
        }
    }

    /// Counts of norms per verification state.
    pub fn verification_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.norms {
            let key = match n.verification {
                Verification::Unverified => "unverified",
                Verification::Accepted => "accepted",
                Verification::Rejected => "rejected",
            };
            *counts.entry(key).or_insert(0) += 1;
        }
        counts
    }

    pub fn save(&self, dir: &Path) -> Result<(), BaseError> {
        fs::create_dir_all(dir).map_err(|source| BaseError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let dialogues: Vec<Dialogue> = self.dialogues.values().cloned().collect();
        corpus::save_dialogues(&dialogues, &dir.join(DIALOGUES_FILE))?;
        corpus::save_norms(&self.norms, &dir.join(NORMS_FILE))?;
        let path = dir.join(EMBEDDINGS_FILE);
        fs::write(&path, self.encode_embeddings())
            .map_err(|source| BaseError::Io { path, source })?;
        let path = dir.join(MANIFEST_FILE);
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&path, manifest + "\n").map_err(|source| BaseError::Io { path, source })?;
        Ok(())
    }

    fn encode_embeddings(&self) -> Vec<u8> {
        let dim = self.embedder.dimension();
        let provider = self.provider_id().as_bytes();
        let mut out =
            Vec::with_capacity(20 + provider.len() + self.embeddings.len() * (8 + 4 * dim));
        out.extend_from_slice(MAGIC);
        for n in [
            FORMAT_VERSION,
            dim as u32,
            self.embeddings.len() as u32,
            provider.len() as u32,
        ] {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(provider);
        for (id, v) in &self.embeddings {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Loads a saved base. Stored embeddings are used as-is, so retrieval is
    /// bit-identical to the base that was saved.
    pub fn load(dir: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, BaseError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|source| BaseError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| BaseError::Format {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        if manifest.provider_id != embedder.provider_id()
            || manifest.dimension != embedder.dimension()
        {
            return Err(BaseError::ProviderMismatch {
                base: manifest.provider_id,
                embedder: embedder.provider_id().to_string(),
            });
        }
        let mut base = NormBase::new(embedder, manifest.pool_threshold);
        for d in corpus::load_dialogues(&dir.join(DIALOGUES_FILE))? {
            base.dialogues.insert(d.id.clone(), d);
        }
        let emb_path = dir.join(EMBEDDINGS_FILE);
        let bytes = fs::read(&emb_path).map_err(|source| BaseError::Io {
            path: emb_path.clone(),
            source,
        })?;
        base.embeddings =
            decode_embeddings(&bytes, &manifest, base.provider_id().into()).map_err(|message| {
                BaseError::Format {
                    path: emb_path.clone(),
                    message,
                }
            })?;
        if let Some(id) = base
            .dialogues
            .keys()
            .find(|id| !base.embeddings.contains_key(*id))
        {
            return Err(BaseError::Format {
                path: emb_path,
                message: format!("no embedding for dialogue {id:?}"),
            });
        }
        for n in corpus::load_norms(&dir.join(NORMS_FILE))? {
            base.add_norm(n)?;
        }
        if base.dialogues.len() != manifest.dialogue_count
            || base.norms.len() != manifest.norm_count
        {
            return Err(BaseError::Format {
                path: manifest_path,
                message: "record counts disagree with manifest".into(),
            });
        }
        Ok(base)
    }
}

fn decode_embeddings(
    bytes: &[u8],
    manifest: &Manifest,
    provider: Arc<str>,
) -> Result<BTreeMap<String, EmbeddingVector>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let plen = cur.u32()? as usize;
    let pid = std::str::from_utf8(cur.take(plen)?).map_err(|e| e.to_string())?;
    if dim != manifest.dimension || pid != manifest.provider_id {
        return Err("header disagrees with manifest".into());
    }
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let values: Vec<f32> = cur
            .take(4 * dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let v = EmbeddingVector::from_unit(values, provider.clone())
            .map_err(|_| format!("embedding of {id:?} is not unit length"))?;
        out.insert(id, v);
    }
    if cur.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or("truncated file")?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::embeddings::HashedNgramEmbedder;

    fn base() -> NormBase {
        NormBase::new(Arc::new(HashedNgramEmbedder::default()), 0.97)
    }

    fn dialogue(id: &str, lines: &[&str]) -> Dialogue {
        Dialogue::new(
            id,
            lines.iter().map(|t| Utterance::new("A", *t)).collect(),
            DialogueProvenance::Real,
            None,
        )
    }

    fn norm(id: &str, src: &str, v: Verification) -> NormStatement {
        NormStatement {
            id: id.into(),
            text: format!("规范 {id}"),
            source_dialogue_id: src.into(),
            frame: None,
            verification: v,
            embedding: None,
        }
    }

    #[test]
    fn add_get_and_duplicate() {
        let mut b = base();
        let d = dialogue("d1", &["你好", "您好"]);
        assert_eq!(b.add_dialogue(d.clone()).unwrap(), "d1");
        assert_eq!(b.dialogue("d1"), Some(&d));
        assert!(matches!(
            b.add_dialogue(d),
            Err(BaseError::DuplicateDialogue(_))
        ));
        let v = b.dialogue_embedding("d1").unwrap();
        assert!((corpus::l2_norm(v.values()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn retrieval_bounds_and_self_exclusion() {
        let mut b = base();
        assert!(b
            .retrieve_similar(&dialogue("q", &["x"]), 5)
            .unwrap()
            .is_empty());
        b.add_dialogue(dialogue("a", &["今天天气不错"])).unwrap();
        b.add_dialogue(dialogue("b", &["明天要下雨"])).unwrap();
        b.add_dialogue(dialogue("c", &["去吃饭吧"])).unwrap();
        assert_eq!(
            b.retrieve_similar(&dialogue("q", &["天气"]), 5)
                .unwrap()
                .len(),
            3
        );

        let twin = dialogue("zz", &["明天要下雨"]);
        let hits = b.retrieve_similar(&twin, 5).unwrap();
        assert_eq!(hits[0].0, "b");
        assert_eq!(hits[0].1, 1.0);

        let stored = b.dialogue("b").unwrap().clone();
        let hits = b.retrieve_similar(&stored, 5).unwrap();
        assert!(hits.iter().all(|(id, _)| id != "b"));
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn provenance_filter() {
        let mut b = base();
        b.add_dialogue(dialogue("real", &["你好"])).unwrap();
        let mut syn = dialogue("syn", &["你好"]);
        syn.provenance = DialogueProvenance::Synthetic;
        syn.frame = crate::frames::frame_at(0);
        b.add_dialogue(syn).unwrap();
        let q = dialogue("q", &["你好"]);
        let hits = b
            .retrieve_filtered(&q, 5, Some(DialogueProvenance::Synthetic))
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "syn");
    }

    #[test]
    fn norms_for_collects_usable_norms_in_order() {
        let mut b = base();
        for id in ["d1", "d2", "d3"] {
            b.add_dialogue(dialogue(id, &[id])).unwrap();
        }
        b.add_norm(norm("d1#1#1", "d1", Verification::Accepted))
            .unwrap();
        b.add_norm(norm("d1#1#2", "d1", Verification::Accepted))
            .unwrap();
        for i in 1..=3 {
            b.add_norm(norm(&format!("d2#1#{i}"), "d2", Verification::Accepted))
                .unwrap();
        }
        b.add_norm(norm("d3#1#1", "d3", Verification::Rejected))
            .unwrap();

        let ids = |v: Vec<&NormStatement>| v.iter().map(|n| n.id.clone()).collect::<Vec<_>>();
        assert_eq!(b.norms_for(&["d1", "d2"]).unwrap().len(), 5);
        assert_eq!(
            ids(b.norms_for(&["d2", "d1"]).unwrap())[..4],
            ["d2#1#1", "d2#1#2", "d2#1#3", "d1#1#1"]
        );
        assert!(b.norms_for(&["d3"]).unwrap().is_empty());
        assert!(b.norms_for::<&str>(&[]).unwrap().is_empty());
        assert_eq!(b.norms_for(&["d1", "d1"]).unwrap().len(), 2);
        assert!(matches!(
            b.norms_for(&["nope"]),
            Err(BaseError::UnknownDialogue(_))
        ));
    }

    #[test]
    fn norms_require_known_dialogue() {
        let mut b = base();
        assert!(matches!(
            b.add_norm(norm("n", "missing", Verification::Accepted)),
            Err(BaseError::UnknownDialogue(_))
        ));
    }

    #[test]
    fn save_load_preserves_retrieval_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = base();
        for i in 0..20 {
            b.add_dialogue(dialogue(
                &format!("d{i:02}"),
                &[&format!("第{i}段对话，内容{}", i % 3)],
            ))
            .unwrap();
        }
        b.add_norm(norm("d01#1#1", "d01", Verification::Accepted))
            .unwrap();
        b.save(dir.path()).unwrap();
        let loaded = NormBase::load(dir.path(), Arc::new(HashedNgramEmbedder::default())).unwrap();
        assert_eq!(loaded.manifest(), b.manifest());
        let q = dialogue("q", &["第7段对话，内容1"]);
        let before = b.retrieve_similar(&q, 10).unwrap();
        let after = loaded.retrieve_similar(&q, 10).unwrap();
        assert_eq!(before.len(), after.len());
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1.to_bits(), y.1.to_bits());
        }
        assert!(matches!(
            NormBase::load(dir.path(), Arc::new(HashedNgramEmbedder::new(64))),
            Err(BaseError::ProviderMismatch { .. })
        ));
    }

    #[test]
    fn truncated_embedding_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = base();
        b.add_dialogue(dialogue("a", &["你好"])).unwrap();
        b.save(dir.path()).unwrap();
        let path = dir.path().join(EMBEDDINGS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            NormBase::load(dir.path(), Arc::new(HashedNgramEmbedder::default())),
            Err(BaseError::Format { .. })
        ));
    }
}
