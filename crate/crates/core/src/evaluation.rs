//! Metrics: Likert aggregation, soft overlap between statement sets, macro
//! multi-class scores and norm distributions over factor labels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NormStatement;
use crate::embeddings::{cosine_slices, EmbedError, Embedder, EmbeddingVector};
use crate::frames::Factor;
use crate::llm::{run_bounded, Gateway};
use crate::prompts::{parse_factor_label, Prompts};

/// Bucket for norms whose classification reply could not be read.
pub const UNCLASSIFIED: &str = "unclassified";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    Empty,
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid record {norm_id}/{rater_id}: {message}")]
    InvalidRecord {
        norm_id: String,
        rater_id: String,
        message: String,
    },
    #[error("threshold must be a finite value in [-1, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("gold label {0:?} is not in the class set")]
    UnknownGoldLabel(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Criterion {
    Relevance,
    WellFormedness,
    Correctness,
    Insightfulness,
    Relatableness,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Relevance,
        Criterion::WellFormedness,
        Criterion::Correctness,
        Criterion::Insightfulness,
        Criterion::Relatableness,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Criterion::Relevance => "relevance",
            Criterion::WellFormedness => "well_formedness",
            Criterion::Correctness => "correctness",
            Criterion::Insightfulness => "insightfulness",
            Criterion::Relatableness => "relatableness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertRecord {
    pub norm_id: String,
    pub rater_id: String,
    pub relevance: u8,
    pub well_formedness: u8,
    pub correctness: u8,
    pub insightfulness: u8,
    pub relatableness: u8,
}

impl LikertRecord {
    pub fn score(&self, c: Criterion) -> u8 {
        match c {
            Criterion::Relevance => self.relevance,
            Criterion::WellFormedness => self.well_formedness,
            Criterion::Correctness => self.correctness,
            Criterion::Insightfulness => self.insightfulness,
            Criterion::Relatableness => self.relatableness,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for c in Criterion::ALL {
            let s = self.score(c);
            if !(1..=5).contains(&s) {
                return Err(EvalError::InvalidRecord {
                    norm_id: self.norm_id.clone(),
                    rater_id: self.rater_id.clone(),
                    message: format!("{} score {s} outside 1..=5", c.key()),
                });
            }
        }
        Ok(())
    }
}

const LIKERT_HEADER: [&str; 7] = [
    "norm_id",
    "rater_id",
    "relevance",
    "well_formedness",
    "correctness",
    "insightfulness",
    "relatableness",
];

/// Reads Likert ratings from CSV, reporting the offending line on error.
pub fn load_likert_csv(path: &Path) -> Result<Vec<LikertRecord>, EvalError> {
    let schema = |line: u64, message: String| EvalError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => EvalError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => schema(1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| schema(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != LIKERT_HEADER {
        return Err(schema(
            1,
            format!("expected header {}", LIKERT_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<LikertRecord>() {
        let record = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            schema(line, e.to_string())
        })?;
        record
            .validate()
            .map_err(|e| schema(out.len() as u64 + 2, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikertSummary {
    pub records: usize,
    /// Mean per criterion, rounded to three decimals.
    pub means: BTreeMap<&'static str, f64>,
}

pub fn aggregate_likert(records: &[LikertRecord]) -> Result<LikertSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut means = BTreeMap::new();
    for r in records {
        r.validate()?;
    }
    for c in Criterion::ALL {
        let sum: u64 = records.iter().map(|r| u64::from(r.score(c))).sum();
        let mean = sum as f64 / records.len() as f64;
        means.insert(c.key(), round3(mean));
    }
    Ok(LikertSummary {
        records: records.len(),
        means,
    })
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Harmonic mean of `p` and `r`, zero when both are zero.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Soft overlap between a reference set `a` and a compared set `b`.
///
/// Matching is directional: an element of `a` is matched if some element of
/// `b` reaches the threshold, and vice versa. `precision` is the matched share
/// of `a` and `recall` the matched share of `b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapResult {
    pub size_a: usize,
    pub size_b: usize,
    pub matched_a: usize,
    pub matched_b: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Overlap over pre-computed embeddings.
pub fn overlap_vectors(
    a: &[EmbeddingVector],
    b: &[EmbeddingVector],
    threshold: f64,
) -> Result<OverlapResult, EvalError> {
    if !threshold.is_finite() || !(-1.0..=1.0).contains(&threshold) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    if let Some(first) = a.first().or(b.first()) {
        for v in a.iter().chain(b) {
            if v.provider_id() != first.provider_id() {
                return Err(EmbedError::ProviderMismatch {
                    left: first.provider_id().to_string(),
                    right: v.provider_id().to_string(),
                }
                .into());
            }
        }
    }
    let mut hit_b = vec![false; b.len()];
    let mut matched_a = 0;
    for x in a {
        let mut hit = false;
        for (j, y) in b.iter().enumerate() {
            if cosine_slices(x.values(), y.values()) >= threshold {
                hit = true;
                hit_b[j] = true;
            }
        }
        matched_a += usize::from(hit);
    }
    let matched_b = hit_b.iter().filter(|&&h| h).count();
    let precision = ratio(matched_a, a.len());
    let recall = ratio(matched_b, b.len());
    Ok(OverlapResult {
        size_a: a.len(),
        size_b: b.len(),
        matched_a,
        matched_b,
        precision,
        recall,
        f1: f1_score(precision, recall),
        threshold,
    })
}

/// Overlap between two statement sets, embedding every text with `embedder`.
pub fn overlap(
    a: &[NormStatement],
    b: &[NormStatement],
    threshold: f64,
    embedder: &dyn Embedder,
) -> Result<OverlapResult, EvalError> {
    let embed = |set: &[NormStatement]| -> Result<Vec<EmbeddingVector>, EvalError> {
        set.iter()
            .map(|n| embedder.embed(&n.text).map_err(EvalError::from))
            .collect()
    };
    overlap_vectors(&embed(a)?, &embed(b)?, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub label: String,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroReport {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Mean of per-class F1, not the harmonic mean of the macro averages.
    pub macro_f1: f64,
}

/// Macro precision/recall/F1 over `classes`. A prediction outside the class
/// set is a miss for its gold class and no class's false positive.
pub fn macro_scores<G, P, C>(pairs: &[(G, P)], classes: &[C]) -> Result<MacroReport, EvalError>
where
    G: AsRef<str>,
    P: AsRef<str>,
    C: AsRef<str>,
{
    let labels: BTreeSet<&str> = classes.iter().map(AsRef::as_ref).collect();
    let mut counts: BTreeMap<&str, (usize, usize, usize, usize)> =
        labels.iter().map(|&l| (l, (0, 0, 0, 0))).collect();
    for (gold, pred) in pairs {
        let (gold, pred) = (gold.as_ref(), pred.as_ref());
        let Some(g) = counts.get_mut(gold) else {
            return Err(EvalError::UnknownGoldLabel(gold.to_string()));
        };
        g.3 += 1;
        if gold == pred {
            g.0 += 1;
            continue;
        }
        g.2 += 1;
        if let Some(p) = counts.get_mut(pred) {
            p.1 += 1;
        }
    }
    let per_class: Vec<ClassScores> = counts
        .into_iter()
        .map(|(label, (tp, fp, fn_, support))| {
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassScores {
                label: label.to_string(),
                support,
                tp,
                fp,
                fn_,
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(MacroReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub factor: Factor,
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    /// `(norm id, message)` for norms whose classification call failed.
    pub errors: Vec<(String, String)>,
}

/// Classifies every norm into one label of `factor` via the chat model.
/// Norm-category classification may answer "others"; failed or unreadable
/// replies land in the "unclassified" bucket.
pub fn classify_distribution(
    norms: &[NormStatement],
    factor: Factor,
    gateway: &Gateway,
    prompts: &Prompts,
) -> DistributionReport {
    let allow_others = factor == Factor::NormCategory;
    let results = run_bounded(norms, gateway.max_in_flight(), |n| {
        let prompt = prompts
            .norm_classification(n, factor)
            .map_err(|e| e.to_string())?;
        let reply = gateway.ask(prompt).map_err(|e| e.to_string())?;
        Ok::<_, String>(parse_factor_label(&reply, factor, allow_others))
    });
    let mut counts = BTreeMap::new();
    let mut errors = Vec::new();
    for (norm, result) in norms.iter().zip(results) {
        let label = match result {
            Ok(Some(label)) => label,
            Ok(None) => UNCLASSIFIED,
            Err(message) => {
                errors.push((norm.id.clone(), message));
                UNCLASSIFIED
            }
        };
        *counts.entry(label.to_string()).or_insert(0) += 1;
    }
    DistributionReport {
        factor,
        total: norms.len(),
        counts,
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Verification;
    use crate::embeddings::HashedNgramEmbedder;
    use crate::llm::{ScriptEntry, ScriptedBackend};
    use crate::prompts::PromptPurpose;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn rec(norm: &str, rater: &str, s: [u8; 5]) -> LikertRecord {
        LikertRecord {
            norm_id: norm.into(),
            rater_id: rater.into(),
            relevance: s[0],
            well_formedness: s[1],
            correctness: s[2],
            insightfulness: s[3],
            relatableness: s[4],
        }
    }

    #[test]
    fn likert_means() {
        let all5 = aggregate_likert(&[rec("a", "r", [5; 5]), rec("b", "r", [5; 5])]).unwrap();
        assert!(all5.means.values().all(|&m| m == 5.0));
        let s = aggregate_likert(&[
            rec("a", "r", [3, 1, 1, 1, 1]),
            rec("b", "r", [4, 2, 2, 2, 5]),
        ])
        .unwrap();
        assert_eq!(s.means["relevance"], 3.5);
        assert_eq!(s.means["relatableness"], 3.0);
        let third = aggregate_likert(&[
            rec("a", "r", [1; 5]),
            rec("b", "r", [1; 5]),
            rec("c", "r", [2; 5]),
        ])
        .unwrap();
        assert_eq!(third.means["correctness"], 1.333);
    }

    #[test]
    fn likert_rejects_empty_and_out_of_range() {
        assert!(matches!(aggregate_likert(&[]), Err(EvalError::Empty)));
        assert!(aggregate_likert(&[rec("a", "r", [0, 1, 1, 1, 1])]).is_err());
        assert!(aggregate_likert(&[rec("a", "r", [1, 1, 1, 1, 6])]).is_err());
    }

    #[test]
    fn likert_csv_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(
            &p,
            "norm_id,rater_id,relevance,well_formedness,correctness,insightfulness,relatableness\n\
             n1,r1,5,4,3,2,1\nn2,r1,5,4,9,2,1\n",
        )
        .unwrap();
        match load_likert_csv(&p) {
            Err(EvalError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(
            &p,
            "norm_id,rater_id,relevance,well_formedness,correctness,insightfulness,relatableness\n\
             n1,r1,5,4,3,2,1\nn2,r1,five,4,3,2,1\n",
        )
        .unwrap();
        assert!(matches!(
            load_likert_csv(&p),
            Err(EvalError::Schema { line: 3, .. })
        ));
        std::fs::write(&p, "norm_id,rater,relevance\n").unwrap();
        assert!(matches!(
            load_likert_csv(&p),
            Err(EvalError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn f1_reproduces_published_rows() {
        assert!((f1_score(0.928, 0.959) - 0.943).abs() <= 0.002);
        assert!((f1_score(0.938, 0.961) - 0.949).abs() <= 0.001);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    fn norm(id: &str, text: &str) -> NormStatement {
        NormStatement {
            id: id.into(),
            text: text.into(),
            source_dialogue_id: "d".into(),
            frame: None,
            verification: Verification::Accepted,
            embedding: None,
        }
    }

    #[test]
    fn overlap_identical_and_disjoint() {
        let e = HashedNgramEmbedder::default();
        let a = vec![norm("1", "见面要问好"), norm("2", "吃饭不要说话")];
        let same = overlap(&a, &a, 0.97, &e).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let b = vec![
            norm("3", "Always queue politely"),
            norm("4", "Tip the driver"),
        ];
        let none = overlap(&a, &b, 0.97, &e).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(overlap(&a, &b, 1.5, &e).is_err());
    }

    #[test]
    fn overlap_is_directional() {
        // Two elements of a both match the single element of b.
        let p = "p";
        let v = |x: &[f64]| EmbeddingVector::normalized(x, p).unwrap();
        let a = vec![v(&[1.0, 0.0]), v(&[1.0, 0.01]), v(&[0.0, 1.0])];
        let b = vec![v(&[1.0, 0.005])];
        let r = overlap_vectors(&a, &b, 0.99).unwrap();
        assert_eq!((r.matched_a, r.matched_b), (2, 1));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.recall, 1.0);
        let mixed = vec![EmbeddingVector::normalized(&[1.0, 0.0], "q").unwrap()];
        assert!(matches!(
            overlap_vectors(&a, &mixed, 0.9),
            Err(EvalError::Embed(EmbedError::ProviderMismatch { .. }))
        ));
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn macro_matches_hand_confusion_matrix() {
        // A: tp 2, fp 2 (B->A, C->A), fn 0
        // B: tp 1, fp 0, fn 1
        // C: tp 0, fp 0, fn 1
        let pairs = [("A", "A"), ("A", "A"), ("B", "B"), ("B", "A"), ("C", "A")];
        let r = macro_scores(&pairs, &["A", "B", "C"]).unwrap();
        let a = &r.per_class[0];
        assert_eq!((a.tp, a.fp, a.fn_), (2, 2, 0));
        assert!(close(a.precision, 0.5) && close(a.recall, 1.0) && close(a.f1, 2.0 / 3.0));
        let b = &r.per_class[1];
        assert!(close(b.precision, 1.0) && close(b.recall, 0.5) && close(b.f1, 2.0 / 3.0));
        let c = &r.per_class[2];
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
        assert!(close(r.macro_precision, 0.5));
        assert!(close(r.macro_recall, 0.5));
        assert!(close(r.macro_f1, 4.0 / 9.0));
        assert!(r.macro_f1 < r.macro_precision.min(r.macro_recall));
    }

    #[test]
    fn macro_perfect_and_sentinel() {
        let r = macro_scores(&[("x", "x"), ("y", "y")], &["x", "y"]).unwrap();
        assert_eq!(
            (r.macro_precision, r.macro_recall, r.macro_f1),
            (1.0, 1.0, 1.0)
        );
        let s = macro_scores(&[("x", "x"), ("y", "unparseable")], &["x", "y"]).unwrap();
        assert_eq!(s.per_class[0].fp, 0);
        assert_eq!(s.per_class[1].fn_, 1);
        assert!(matches!(
            macro_scores(&[("z", "x")], &["x", "y"]),
            Err(EvalError::UnknownGoldLabel(_))
        ));
    }

    #[test]
    fn distribution_buckets() {
        let norms: Vec<NormStatement> = (0..10)
            .map(|i| norm(&format!("n{i}"), &format!("规范{i}")))
            .collect();
        let backend = Arc::new(
            ScriptedBackend::new(vec![
                ScriptEntry::rule(Some(PromptPurpose::PredictFactor), "规范[0-2]", "others"),
                ScriptEntry::rule(Some(PromptPurpose::PredictFactor), "规范[3-5]", "requests"),
                ScriptEntry::rule(Some(PromptPurpose::PredictFactor), "规范[6-8]", "嗯……"),
            ])
            .unwrap(),
        );
        let gw = Gateway::new(backend, "m", 3);
        let prompts = Prompts::builtin();
        let r = classify_distribution(&norms, Factor::NormCategory, &gw, &prompts);
        assert_eq!(r.counts.values().sum::<usize>(), 10);
        assert_eq!(r.counts["others"], 3);
        assert_eq!(r.counts["requests"], 3);
        assert_eq!(r.counts[UNCLASSIFIED], 4);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].0, "n9");

        let topic = classify_distribution(&norms[..3], Factor::Formality, &gw, &prompts);
        assert_eq!(topic.counts[UNCLASSIFIED], 3);
    }

    proptest! {
        #[test]
        fn overlap_direction_and_harmonic_mean(
            a in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 0..12),
            b in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 0..12),
            t in 0.0f64..1.0,
        ) {
            let embed = |s: &[Vec<f64>]| -> Vec<EmbeddingVector> {
                s.iter().filter_map(|x| EmbeddingVector::normalized(x, "p").ok()).collect()
            };
            let (a, b) = (embed(&a), embed(&b));
            let ab = overlap_vectors(&a, &b, t).unwrap();
            let ba = overlap_vectors(&b, &a, t).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert!(ab.matched_a <= ab.size_a && ab.matched_b <= ab.size_b);
            prop_assert!((ab.f1 - f1_score(ab.precision, ab.recall)).abs() <= 1e-12);
        }

        #[test]
        fn single_class_macro_equals_binary(outcomes in prop::collection::vec(any::<bool>(), 1..40)) {
            let pairs: Vec<(&str, &str)> = outcomes.iter().map(|&ok| ("x", if ok { "x" } else { "other" })).collect();
            let r = macro_scores(&pairs, &["x"]).unwrap();
            let tp = outcomes.iter().filter(|&&o| o).count();
            let p = if tp == 0 { 0.0 } else { 1.0 };
            let rc = tp as f64 / outcomes.len() as f64;
            prop_assert_eq!(r.macro_precision, p);
            prop_assert_eq!(r.macro_recall, rc);
            prop_assert_eq!(r.macro_f1, f1_score(p, rc));
        }
    }
}
