//! Social-factor prediction prompted with the norms of the most similar
//! dialogues in a norm base.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, NormStatement};
use crate::frames::Factor;
use crate::llm::{run_bounded, Gateway, GatewayError};
use crate::normbase::{BaseError, NormBase};
use crate::prompts::{parse_factor_label, PromptError, Prompts};

/// Label recorded when the reply matches no candidate.
pub const UNPARSEABLE: &str = "unparseable";
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Per-factor predictions for one dialogue; a failed retrieval fails them all.
pub type FactorPredictions = Result<BTreeMap<Factor, Result<Prediction, RagError>>, RagError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    One,
    All,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::One => "one",
            NormMode::All => "all",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "0" => Ok(NormMode::None),
            "one" | "1" => Ok(NormMode::One),
            "all" => Ok(NormMode::All),
            other => Err(format!(
                "unknown norm mode {other:?} (expected none, one or all)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionTask {
    pub target_dialogue: Dialogue,
    pub factor: Factor,
    pub norm_mode: NormMode,
    pub k: usize,
    pub seed: u64,
}

impl PredictionTask {
    pub fn new(target_dialogue: Dialogue, factor: Factor, norm_mode: NormMode) -> Self {
        Self {
            target_dialogue,
            factor,
            norm_mode,
            k: DEFAULT_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub factor: Factor,
    pub predicted_label: String,
    pub norms_used: Vec<String>,
    pub retrieved: Vec<(String, f64)>,
}

impl Prediction {
    pub fn is_parsed(&self) -> bool {
        self.predicted_label != UNPARSEABLE
    }
}

/// One line of a prediction batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub factor: String,
    pub gold_label: Option<String>,
    pub predicted_label: String,
    pub norm_mode: NormMode,
    pub k: usize,
    pub norms_used: Vec<String>,
}

impl PredictionRecord {
    pub fn new(
        dialogue: &Dialogue,
        prediction: &Prediction,
        norm_mode: NormMode,
        k: usize,
    ) -> Self {
        Self {
            dialogue_id: dialogue.id.clone(),
            factor: prediction.factor.key().to_string(),
            gold_label: dialogue
                .frame
                .map(|f| f.label(prediction.factor).to_string()),
            predicted_label: prediction.predicted_label.clone(),
            norm_mode,
            k,
            norms_used: prediction.norms_used.clone(),
        }
    }
}

/// Picks the norms to show the model.
pub fn select_norms<'n>(
    pool: &[&'n NormStatement],
    mode: NormMode,
    seed: u64,
) -> Vec<&'n NormStatement> {
    match mode {
        NormMode::None => Vec::new(),
        NormMode::All => pool.to_vec(),
        NormMode::One if pool.is_empty() => Vec::new(),
        NormMode::One => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![pool[rng.gen_range(0..pool.len())]]
        }
    }
}

pub struct Predictor<'a> {
    base: &'a NormBase,
    gateway: &'a Gateway,
    prompts: &'a Prompts,
}

impl<'a> Predictor<'a> {
    pub fn new(base: &'a NormBase, gateway: &'a Gateway, prompts: &'a Prompts) -> Self {
        Self {
            base,
            gateway,
            prompts,
        }
    }

    pub fn predict_factor(&self, task: &PredictionTask) -> Result<Prediction, RagError> {
        if task.k < 1 {
            return Err(RagError::InvalidK);
        }
        let retrieved = self.base.retrieve_similar(&task.target_dialogue, task.k)?;
        self.predict_with(
            &task.target_dialogue,
            task.factor,
            task.norm_mode,
            task.seed,
            retrieved,
        )
    }

    /// Six predictions sharing one retrieval. Per-factor failures are kept
    /// in place.
    pub fn predict_all_factors(
        &self,
        dialogue: &Dialogue,
        norm_mode: NormMode,
        k: usize,
        seed: u64,
    ) -> FactorPredictions {
        self.predict_factors(dialogue, &Factor::ALL, norm_mode, k, seed)
    }

    pub fn predict_factors(
        &self,
        dialogue: &Dialogue,
        factors: &[Factor],
        norm_mode: NormMode,
        k: usize,
        seed: u64,
    ) -> FactorPredictions {
        if k < 1 {
            return Err(RagError::InvalidK);
        }
        let retrieved = self.base.retrieve_similar(dialogue, k)?;
        Ok(factors
            .iter()
            .map(|&f| {
                (
                    f,
                    self.predict_with(dialogue, f, norm_mode, seed, retrieved.clone()),
                )
            })
            .collect())
    }

    /// Predicts `factors` for every `(dialogue, seed)` item, running items
    /// concurrently within the gateway bound. Output keeps input order.
    pub fn predict_batch(
        &self,
        items: &[(Dialogue, u64)],
        factors: &[Factor],
        norm_mode: NormMode,
        k: usize,
    ) -> Vec<FactorPredictions> {
        run_bounded(items, self.gateway.max_in_flight(), |(d, seed)| {
            self.predict_factors(d, factors, norm_mode, k, *seed)
        })
    }

    fn predict_with(
        &self,
        dialogue: &Dialogue,
        factor: Factor,
        norm_mode: NormMode,
        seed: u64,
        retrieved: Vec<(String, f64)>,
    ) -> Result<Prediction, RagError> {
        let ids: Vec<&str> = retrieved.iter().map(|(id, _)| id.as_str()).collect();
        let available = self.base.norms_for(&ids)?;
        let chosen = select_norms(&available, norm_mode, seed);
        let prompt = self.prompts.factor_prediction(dialogue, &chosen, factor)?;
        let reply = self.gateway.ask(prompt)?;
        let predicted_label = parse_factor_label(&reply, factor, false)
            .unwrap_or(UNPARSEABLE)
            .to_string();
        Ok(Prediction {
            factor,
            predicted_label,
            norms_used: chosen.iter().map(|n| n.id.clone()).collect(),
            retrieved,
        })
    }
}
