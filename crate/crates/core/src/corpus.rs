//! Dialogue and norm-statement records with JSONL persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{FrameProvenance, SocioculturalFrame, ValidationReport};

pub const DEFAULT_LANGUAGE: &str = "zh";

/// Tolerance on the L2 norm of stored embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("invalid record {id:?}: {message}")]
    Invalid { id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueProvenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub language: String,
    pub provenance: DialogueProvenance,
    pub frame: Option<SocioculturalFrame>,
}

impl Dialogue {
    pub fn new(
        id: impl Into<String>,
        utterances: Vec<Utterance>,
        provenance: DialogueProvenance,
        frame: Option<SocioculturalFrame>,
    ) -> Self {
        Self {
            id: id.into(),
            utterances,
            language: DEFAULT_LANGUAGE.to_string(),
            provenance,
            frame,
        }
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.utterances.is_empty() {
            return Err("no utterances".into());
        }
        if let Some(i) = self
            .utterances
            .iter()
            .position(|u| u.text.trim().is_empty())
        {
            return Err(format!("utterance {i} has empty text"));
        }
        if self.provenance == DialogueProvenance::Synthetic {
            match self.frame {
                Some(f) if f.provenance == FrameProvenance::Gold => {}
                _ => return Err("synthetic dialogue requires a gold frame".into()),
            }
        }
        Ok(())
    }

    /// Utterance texts without speaker tags, joined by newline.
    pub fn plain_text(&self) -> String {
        self.utterances
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verification {
    Unverified,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStatement {
    pub id: String,
    pub text: String,
    pub source_dialogue_id: String,
    pub frame: Option<SocioculturalFrame>,
    pub verification: Verification,
    pub embedding: Option<Vec<f32>>,
}

impl NormStatement {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.text.trim().is_empty() {
            return Err("empty text".into());
        }
        if let Some(values) = &self.embedding {
            let norm = l2_norm(values);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(format!("embedding norm {norm} is not unit length"));
            }
        }
        Ok(())
    }

    /// Whether the statement may be served to downstream consumers.
    pub fn is_usable(&self) -> bool {
        self.verification != Verification::Rejected
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

// Wire records. Field order here is the on-disk field order.

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    #[serde(default = "default_language")]
    language: String,
    provenance: DialogueProvenance,
    #[serde(default)]
    frame: Option<BTreeMap<String, String>>,
    #[serde(default)]
    frame_provenance: Option<FrameProvenance>,
    utterances: Vec<Utterance>,
}

fn default_language() -> String {
    DEFAULT_LANGUAGE.to_string()
}

#[derive(Serialize, Deserialize)]
struct NormRecord {
    id: String,
    text: String,
    source_dialogue_id: String,
    #[serde(default)]
    frame: Option<BTreeMap<String, String>>,
    #[serde(default)]
    frame_provenance: Option<FrameProvenance>,
    verification: Verification,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
}

fn frame_from_record(
    labels: Option<BTreeMap<String, String>>,
    provenance: Option<FrameProvenance>,
    default_provenance: Option<FrameProvenance>,
) -> Result<Option<SocioculturalFrame>, String> {
    match labels {
        None => Ok(None),
        Some(labels) => {
            let provenance = provenance
                .or(default_provenance)
                .ok_or("frame present without frame_provenance")?;
            SocioculturalFrame::from_labels(&labels, provenance)
                .map(Some)
                .map_err(|r: ValidationReport| format!("invalid frame: {r}"))
        }
    }
}

impl TryFrom<DialogueRecord> for Dialogue {
    type Error = String;

    fn try_from(rec: DialogueRecord) -> Result<Self, String> {
        let frame = frame_from_record(rec.frame, rec.frame_provenance, None)?;
        let dialogue = Dialogue {
            id: rec.id,
            utterances: rec.utterances,
            language: rec.language,
            provenance: rec.provenance,
            frame,
        };
        dialogue.validate()?;
        Ok(dialogue)
    }
}

impl From<&Dialogue> for DialogueRecord {
    fn from(d: &Dialogue) -> Self {
        DialogueRecord {
            id: d.id.clone(),
            language: d.language.clone(),
            provenance: d.provenance,
            frame: d.frame.map(|f| f.to_labels()),
            frame_provenance: d.frame.map(|f| f.provenance),
            utterances: d.utterances.clone(),
        }
    }
}

impl TryFrom<NormRecord> for NormStatement {
    type Error = String;

    fn try_from(rec: NormRecord) -> Result<Self, String> {
        // Norm snapshots written by other tools may omit the provenance.
        let frame =
            frame_from_record(rec.frame, rec.frame_provenance, Some(FrameProvenance::Gold))?;
        let norm = NormStatement {
            id: rec.id,
            text: rec.text,
            source_dialogue_id: rec.source_dialogue_id,
            frame,
            verification: rec.verification,
            embedding: rec.embedding,
        };
        norm.validate()?;
        Ok(norm)
    }
}

impl From<&NormStatement> for NormRecord {
    fn from(n: &NormStatement) -> Self {
        NormRecord {
            id: n.id.clone(),
            text: n.text.clone(),
            source_dialogue_id: n.source_dialogue_id.clone(),
            frame: n.frame.map(|f| f.to_labels()),
            frame_provenance: n.frame.map(|f| f.provenance),
            verification: n.verification,
            embedding: n.embedding.clone(),
        }
    }
}

/// Serializes a dialogue as one canonical JSON line (no trailing newline).
pub fn dialogue_to_json(d: &Dialogue) -> String {
    serde_json::to_string(&DialogueRecord::from(d)).expect("dialogue serializes")
}

pub fn dialogue_from_json(line: &str) -> Result<Dialogue, String> {
    let rec: DialogueRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Dialogue::try_from(rec)
}

pub fn norm_to_json(n: &NormStatement) -> String {
    serde_json::to_string(&NormRecord::from(n)).expect("norm serializes")
}

pub fn norm_from_json(line: &str) -> Result<NormStatement, String> {
    let rec: NormRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    NormStatement::try_from(rec)
}

/// Reads non-blank lines of a JSONL file, parsing each with `parse` and
/// rejecting repeated ids.
fn read_jsonl<T>(
    path: &Path,
    parse: impl Fn(&str) -> Result<T, String>,
    id_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item = parse(&line).map_err(|message| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        let id = id_of(&item).to_string();
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id,
            });
        }
        out.push(item);
    }
    Ok(out)
}

fn write_lines<'a>(
    path: &Path,
    lines: impl Iterator<Item = String> + 'a,
) -> Result<usize, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut count = 0;
    for line in lines {
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
        count += 1;
    }
    w.flush().map_err(io_err)?;
    Ok(count)
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    read_jsonl(path, dialogue_from_json, |d: &Dialogue| &d.id)
}

pub fn save_dialogues(dialogues: &[Dialogue], path: &Path) -> Result<usize, CorpusError> {
    for d in dialogues {
        d.validate().map_err(|message| CorpusError::Invalid {
            id: d.id.clone(),
            message,
        })?;
    }
    write_lines(path, dialogues.iter().map(dialogue_to_json))
}

pub fn load_norms(path: &Path) -> Result<Vec<NormStatement>, CorpusError> {
    read_jsonl(path, norm_from_json, |n: &NormStatement| &n.id)
}

/// Writes norms as JSONL. Every norm is validated before the file is touched.
pub fn save_norms(norms: &[NormStatement], path: &Path) -> Result<usize, CorpusError> {
    for n in norms {
        n.validate().map_err(|message| CorpusError::Invalid {
            id: n.id.clone(),
            message,
        })?;
    }
    write_lines(path, norms.iter().map(norm_to_json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::frame_at;
    use proptest::prelude::*;
    use std::fs;

    fn sample_dialogue(id: &str) -> Dialogue {
        Dialogue::new(
            id,
            vec![
                Utterance::new("A", "王经理，报告我已经发到您邮箱了。"),
                Utterance::new("B", "好的，我下午看一下。"),
            ],
            DialogueProvenance::Synthetic,
            frame_at(1234),
        )
    }

    fn unit(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    fn sample_norm(i: usize) -> NormStatement {
        NormStatement {
            id: format!("d1#1#{i}"),
            text: format!("下属应当及时向上级汇报工作进展 {i}。"),
            source_dialogue_id: "d1".into(),
            frame: frame_at(i * 31),
            verification: Verification::Accepted,
            embedding: Some(unit(8, i % 8)),
        }
    }

    #[test]
    fn loads_three_dialogues() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|id| sample_dialogue(id))
            .collect();
        save_dialogues(&ds, &path).unwrap();
        let loaded = load_dialogues(&path).unwrap();
        assert_eq!(loaded, ds);
    }

    #[test]
    fn empty_file_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_dialogues(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_utterances_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = dialogue_to_json(&sample_dialogue("a"));
        let bad = r#"{"id":"b","provenance":"real"}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_dialogues(&path) {
            Err(CorpusError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("utterances"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_dialogue_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let line = dialogue_to_json(&sample_dialogue("a"));
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(
            load_dialogues(&path),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn synthetic_without_gold_frame_is_invalid() {
        let mut d = sample_dialogue("a");
        d.frame = d.frame.map(|f| f.with_provenance(FrameProvenance::Silver));
        assert!(d.validate().is_err());
        d.frame = None;
        assert!(d.validate().is_err());
        d.provenance = DialogueProvenance::Real;
        assert!(d.validate().is_ok());
    }

    #[test]
    fn saves_five_norms_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        let norms: Vec<_> = (0..5).map(sample_norm).collect();
        assert_eq!(save_norms(&norms, &path).unwrap(), 5);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 5);
        assert_eq!(load_norms(&path).unwrap(), norms);
    }

    #[test]
    fn non_unit_embedding_is_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        let mut bad = sample_norm(0);
        bad.embedding = Some(vec![0.5, 0.0, 0.0]);
        let err = save_norms(&[sample_norm(1), bad], &path).unwrap_err();
        assert!(matches!(err, CorpusError::Invalid { .. }));
        assert!(!path.exists());
    }

    #[test]
    fn dialogue_save_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        // Hand-written input with a different key order and synonym labels.
        let raw = r#"{"utterances":[{"text":"你好","speaker":"A"},{"speaker":"B","text":"您好"}],"frame_provenance":"silver","frame":{"topic":"daily life","location":"homes","social_relation":"peer to peer","social_distance":"friend","formality":"informal setting","norm_category":"greeting"},"provenance":"real","id":"x"}"#;
        fs::write(&a, format!("{raw}\n")).unwrap();
        let loaded = load_dialogues(&a).unwrap();
        save_dialogues(&loaded, &b).unwrap();
        let first = fs::read(&b).unwrap();
        save_dialogues(&load_dialogues(&b).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&b).unwrap(), first);
    }

    fn arb_norm() -> impl Strategy<Value = NormStatement> {
        (
            "[a-z0-9#]{1,12}",
            "\\PC{1,30}",
            "[a-z0-9]{1,8}",
            proptest::option::of(0usize..32_000),
            0u8..3,
            proptest::option::of(proptest::collection::vec(-1.0f32..1.0, 1..16)),
        )
            .prop_filter_map("valid", |(id, text, src, frame, ver, emb)| {
                if text.trim().is_empty() {
                    return None;
                }
                let embedding = emb.and_then(|v| {
                    let n = l2_norm(&v);
                    (n > 1e-3).then(|| v.iter().map(|x| (f64::from(*x) / n) as f32).collect())
                });
                let norm = NormStatement {
                    id,
                    text,
                    source_dialogue_id: src,
                    frame: frame.and_then(frame_at),
                    verification: [
                        Verification::Unverified,
                        Verification::Accepted,
                        Verification::Rejected,
                    ][ver as usize],
                    embedding,
                };
                norm.validate().is_ok().then_some(norm)
            })
    }

    proptest! {
        #[test]
        fn norm_json_round_trip_is_lossless(norm in arb_norm()) {
            let line = norm_to_json(&norm);
            prop_assert_eq!(norm_from_json(&line).unwrap(), norm);
        }
    }
}
