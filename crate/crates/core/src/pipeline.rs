//! End-to-end construction: synthetic dialogue generation, silver-frame
//! prediction, norm extraction, verification, deduplication and storage.
//!
//! Model calls for different dialogues run concurrently (bounded by the
//! gateway), but pool admission happens afterwards in input order so that a
//! scripted backend always yields the same base.

use std::collections::HashSet;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Dialogue, DialogueProvenance, NormStatement, Utterance, Verification};
use crate::embeddings::{EmbedError, Embedder};
use crate::frames::{FrameProvenance, SocioculturalFrame};
use crate::llm::{run_bounded, Gateway, GatewayError};
use crate::normbase::{BaseError, NormBase};
use crate::normpool::{Decision, NormPool, PoolConfig, PoolError, DEFAULT_THRESHOLD};
use crate::prompts::{self, PromptError, Prompts};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("generated reply has fewer than 2 utterances: {0:?}")]
    GenerationParse(String),
    #[error("dialogue {0:?} has no frame")]
    NoFrame(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error("invalid extraction config: {0}")]
    Config(String),
    #[error("duplicate dialogue id {0:?} in input")]
    DuplicateInput(String),
    #[error("every dialogue failed ({} of {})", .0.failures.len(), .0.dialogues)]
    AllFailed(Box<BuildSummary>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    /// Per-pass cap is `cap_multiplier × utterance count`.
    pub cap_multiplier: usize,
    pub passes: usize,
    pub verify: bool,
    pub pool: PoolConfig,
}

impl ExtractionConfig {
    /// Defaults (2× cap, two passes, verification on, 0.97 pool) for the
    /// given embedding provider.
    pub fn for_provider(provider_id: &str) -> Self {
        Self {
            cap_multiplier: 2,
            passes: 2,
            verify: true,
            pool: PoolConfig::new(DEFAULT_THRESHOLD, provider_id).expect("default threshold"),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cap_multiplier < 1 {
            return Err("cap_multiplier must be at least 1".into());
        }
        if self.passes < 1 {
            return Err("passes must be at least 1".into());
        }
        Ok(())
    }

    pub fn cap_for(&self, dialogue: &Dialogue) -> usize {
        self.cap_multiplier * dialogue.utterances.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Frame,
    Extract,
    Verify,
    Embed,
    Pool,
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageError {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PassReport {
    pub pass: usize,
    pub parsed: usize,
    pub verified: usize,
    pub rejected: usize,
    pub novel: usize,
    pub duplicates: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub dialogue_id: String,
    pub frame_used: Option<SocioculturalFrame>,
    pub frame_provenance: Option<FrameProvenance>,
    pub raw_count: usize,
    /// Statements that passed the verification stage (all parsed statements
    /// when verification is disabled).
    pub verified_count: usize,
    pub novel_count: usize,
    pub rejected_count: usize,
    pub duplicate_count: usize,
    pub passes: Vec<PassReport>,
    pub errors: Vec<StageError>,
}

impl ExtractionReport {
    fn new(dialogue_id: &str, frame: Option<SocioculturalFrame>) -> Self {
        Self {
            dialogue_id: dialogue_id.to_string(),
            frame_used: frame,
            frame_provenance: frame.map(|f| f.provenance),
            raw_count: 0,
            verified_count: 0,
            novel_count: 0,
            rejected_count: 0,
            duplicate_count: 0,
            passes: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// True when no pass produced a reply.
    pub fn all_passes_failed(&self) -> bool {
        !self.passes.is_empty() && self.passes.iter().all(|p| p.failed)
    }
}

/// Output of the model-facing stages for one dialogue.
#[derive(Debug, Clone)]
pub struct Candidates {
    dialogue_id: String,
    frame: SocioculturalFrame,
    /// Statements that passed verification, in pass/ordinal order.
    passed: Vec<NormStatement>,
    rejected: Vec<NormStatement>,
    report: ExtractionReport,
}

/// Result of extracting one dialogue.
#[derive(Debug, Clone)]
pub struct Extraction {
    /// Novel statements admitted to the pool, with embeddings.
    pub accepted: Vec<NormStatement>,
    /// Statements refused by verification, kept for auditing.
    pub rejected: Vec<NormStatement>,
    pub report: ExtractionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DialogueFailure {
    pub dialogue_id: String,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildSummary {
    pub dialogues: usize,
    pub succeeded: usize,
    pub silver_frames: usize,
    pub raw_count: usize,
    pub verified_count: usize,
    pub rejected_count: usize,
    pub duplicate_count: usize,
    pub novel_count: usize,
    pub failures: Vec<DialogueFailure>,
    pub reports: Vec<ExtractionReport>,
}

impl BuildSummary {
    fn absorb(&mut self, report: &ExtractionReport) {
        self.raw_count += report.raw_count;
        self.verified_count += report.verified_count;
        self.rejected_count += report.rejected_count;
        self.duplicate_count += report.duplicate_count;
        self.novel_count += report.novel_count;
    }
}

static SPEAKER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:\*\*)?([AB])(?:\*\*)?\s*[:：]\s*(?:\*\*)?\s*(.*?)\s*$")
        .expect("valid regex")
});

/// Parses `A:` / `B:` lines into utterances.
pub fn parse_generated_dialogue(reply: &str) -> Vec<Utterance> {
    reply
        .lines()
        .filter_map(|line| SPEAKER_LINE.captures(line))
        .filter(|c| !c[2].is_empty())
        .map(|c| Utterance::new(&c[1], &c[2]))
        .collect()
}

pub struct Pipeline<'a> {
    gateway: &'a Gateway,
    prompts: &'a Prompts,
    embedder: Arc<dyn Embedder>,
}

impl<'a> Pipeline<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a Prompts, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            gateway,
            prompts,
            embedder,
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Generates a synthetic dialogue for `frame`, re-prompting once if the
    /// reply has fewer than two utterances.
    pub fn generate_dialogue(
        &self,
        id: &str,
        frame: &SocioculturalFrame,
        turns: usize,
    ) -> Result<Dialogue, PipelineError> {
        let prompt = self.prompts.dialogue_generation(frame, turns)?;
        let mut last = String::new();
        for _ in 0..2 {
            let reply = self.gateway.ask(prompt.clone())?;
            let utterances = parse_generated_dialogue(&reply);
            if utterances.len() >= 2 {
                return Ok(Dialogue::new(
                    id,
                    utterances,
                    DialogueProvenance::Synthetic,
                    Some(frame.with_provenance(FrameProvenance::Gold)),
                ));
            }
            last = reply;
        }
        Err(PipelineError::GenerationParse(last))
    }

    /// Returns the dialogue's frame, predicting and attaching a silver frame
    /// when none is present. An attached frame is never replaced.
    pub fn ensure_frame(
        &self,
        dialogue: &mut Dialogue,
    ) -> Result<SocioculturalFrame, PipelineError> {
        if let Some(frame) = dialogue.frame {
            return Ok(frame);
        }
        let prompt = self.prompts.frame_prediction(dialogue)?;
        let mut last_err = None;
        for _ in 0..2 {
            let reply = self.gateway.ask(prompt.clone())?;
            match prompts::parse_frame_reply(&reply) {
                Ok(frame) => {
                    dialogue.frame = Some(frame);
                    return Ok(frame);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("loop ran").into())
    }

    fn ask_with_reparse<T>(
        &self,
        prompt: &prompts::PromptText,
        parse: impl Fn(&str) -> Result<T, PromptError>,
    ) -> Result<T, PipelineError> {
        let mut last = None;
        for _ in 0..2 {
            let reply = self.gateway.ask(prompt.clone())?;
            match parse(&reply) {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("loop ran").into())
    }

    /// Model-facing stages for one framed dialogue: every extraction pass and
    /// the verification of each parsed statement.
    pub fn collect_candidates(
        &self,
        dialogue: &Dialogue,
        config: &ExtractionConfig,
    ) -> Result<Candidates, PipelineError> {
        let frame = dialogue
            .frame
            .ok_or_else(|| PipelineError::NoFrame(dialogue.id.clone()))?;
        let cap = config.cap_for(dialogue);
        let prompt = self.prompts.extraction(dialogue, &frame, cap)?;
        let mut report = ExtractionReport::new(&dialogue.id, Some(frame));
        let mut passed = Vec::new();
        let mut rejected = Vec::new();

        for pass in 1..=config.passes {
            let mut pr = PassReport {
                pass,
                ..PassReport::default()
            };
            let items = match self.ask_with_reparse(&prompt, |r| prompts::parse_norm_list(r, cap)) {
                Ok(items) => items,
                Err(e) => {
                    pr.failed = true;
                    report.errors.push(StageError {
                        stage: Stage::Extract,
                        pass: Some(pass),
                        message: e.to_string(),
                    });
                    report.passes.push(pr);
                    continue;
                }
            };
            pr.parsed = items.len();
            for (ordinal, text) in items.into_iter().enumerate() {
                let mut norm = NormStatement {
                    id: format!("{}#{}#{}", dialogue.id, pass, ordinal + 1),
                    text,
                    source_dialogue_id: dialogue.id.clone(),
                    frame: Some(frame),
                    verification: Verification::Unverified,
                    embedding: None,
                };
                if config.verify {
                    let verdict = self
                        .prompts
                        .verification(&norm, dialogue, &frame)
                        .map_err(PipelineError::from)
                        .and_then(|p| self.ask_with_reparse(&p, prompts::parse_verdict));
                    match verdict {
                        Ok(v) => norm.verification = v,
                        Err(e) => {
                            report.errors.push(StageError {
                                stage: Stage::Verify,
                                pass: Some(pass),
                                message: format!("{}: {e}", norm.id),
                            });
                            continue;
                        }
                    }
                }
                if norm.verification == Verification::Rejected {
                    pr.rejected += 1;
                    rejected.push(norm);
                } else {
                    pr.verified += 1;
                    passed.push(norm);
                }
            }
            report.passes.push(pr);
        }
        for p in &report.passes {
            report.raw_count += p.parsed;
            report.verified_count += p.verified;
            report.rejected_count += p.rejected;
        }
        Ok(Candidates {
            dialogue_id: dialogue.id.clone(),
            frame,
            passed,
            rejected,
            report,
        })
    }

    /// Embeds verified candidates and offers them to the pool in order.
    pub fn admit(&self, candidates: Candidates, pool: &NormPool) -> Extraction {
        let Candidates {
            passed,
            rejected,
            mut report,
            ..
        } = candidates;
        let mut accepted = Vec::new();
        for norm in passed {
            let pass = pass_of(&norm.id);
            let vector = match self.embedder.embed(&norm.text) {
                Ok(v) => v,
                Err(e) => {
                    report.errors.push(StageError {
                        stage: Stage::Embed,
                        pass,
                        message: format!("{}: {e}", norm.id),
                    });
                    continue;
                }
            };
            let slot = pass.and_then(|p| report.passes.iter_mut().find(|r| r.pass == p));
            match pool.try_insert_embedded(&norm, &vector) {
                Ok(outcome) => {
                    let novel = outcome.decision == Decision::Novel;
                    if let Some(slot) = slot {
                        if novel {
                            slot.novel += 1;
                        } else {
                            slot.duplicates += 1;
                        }
                    }
                    if novel {
                        report.novel_count += 1;
                        accepted.push(NormStatement {
                            embedding: Some(vector.into_values()),
                            ..norm
                        });
                    } else {
                        report.duplicate_count += 1;
                    }
                }
                Err(e) => report.errors.push(StageError {
                    stage: Stage::Pool,
                    pass,
                    message: format!("{}: {e}", norm.id),
                }),
            }
        }
        Extraction {
            accepted,
            rejected,
            report,
        }
    }

    /// Extracts, verifies and pools the norms of one framed dialogue.
    pub fn extract_norms(
        &self,
        dialogue: &Dialogue,
        config: &ExtractionConfig,
        pool: &NormPool,
    ) -> Result<Extraction, PipelineError> {
        let candidates = self.collect_candidates(dialogue, config)?;
        Ok(self.admit(candidates, pool))
    }

    /// Runs frame assignment and extraction over every dialogue and stores the
    /// results. Fails only if no dialogue succeeds.
    pub fn build_base(
        &self,
        dialogues: Vec<Dialogue>,
        config: &ExtractionConfig,
    ) -> Result<(NormBase, BuildSummary), PipelineError> {
        config.validate().map_err(PipelineError::Config)?;
        let mut seen = HashSet::new();
        for d in &dialogues {
            if !seen.insert(d.id.as_str()) {
                return Err(PipelineError::DuplicateInput(d.id.clone()));
            }
        }
        if config.pool.provider_id != self.embedder.provider_id() {
            return Err(PoolError::ProviderMismatch {
                expected: config.pool.provider_id.clone(),
                got: self.embedder.provider_id().to_string(),
            }
            .into());
        }

        let staged = run_bounded(&dialogues, self.gateway.max_in_flight(), |d| {
            let mut d = d.clone();
            let had_frame = d.frame.is_some();
            let outcome = match self.ensure_frame(&mut d) {
                Ok(_) => self
                    .collect_candidates(&d, config)
                    .map_err(|e| (Stage::Extract, e)),
                Err(e) => Err((Stage::Frame, e)),
            };
            (d, !had_frame, outcome)
        });

        let pool = NormPool::new(config.pool.clone());
        let mut base = NormBase::new(self.embedder.clone(), config.pool.threshold);
        let mut summary = BuildSummary {
            dialogues: dialogues.len(),
            ..BuildSummary::default()
        };
        for (dialogue, predicted, outcome) in staged {
            let id = dialogue.id.clone();
            if predicted && dialogue.frame.is_some() {
                summary.silver_frames += 1;
            }
            if let Err(e) = base.add_dialogue(dialogue) {
                summary.failures.push(DialogueFailure {
                    dialogue_id: id,
                    stage: Stage::Store,
                    message: e.to_string(),
                });
                continue;
            }
            let candidates = match outcome {
                Ok(c) => c,
                Err((stage, e)) => {
                    summary.failures.push(DialogueFailure {
                        dialogue_id: id,
                        stage,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let extraction = self.admit(candidates, &pool);
            for norm in extraction.accepted.into_iter().chain(extraction.rejected) {
                base.add_norm(norm)?;
            }
            summary.absorb(&extraction.report);
            if extraction.report.all_passes_failed() {
                let message = extraction
                    .report
                    .errors
                    .first()
                    .map(|e| e.message.clone())
                    .unwrap_or_default();
                summary.failures.push(DialogueFailure {
                    dialogue_id: id,
                    stage: Stage::Extract,
                    message,
                });
            } else {
                summary.succeeded += 1;
            }
            summary.reports.push(extraction.report);
        }
        if summary.dialogues > 0 && summary.succeeded == 0 {
            return Err(PipelineError::AllFailed(Box::new(summary)));
        }
        Ok((base, summary))
    }
}

impl Candidates {
    pub fn dialogue_id(&self) -> &str {
        &self.dialogue_id
    }

    pub fn frame(&self) -> &SocioculturalFrame {
        &self.frame
    }

    pub fn report(&self) -> &ExtractionReport {
        &self.report
    }
}

fn pass_of(norm_id: &str) -> Option<usize> {
    norm_id.rsplit('#').nth(1)?.parse().ok()
}
