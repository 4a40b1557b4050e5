use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use normforge::config::{ConfigError, RunConfig};
use normforge::corpus::{self, DialogueProvenance};
use normforge::embeddings::Embedder;
use normforge::evaluation::{self, MacroReport};
use normforge::frames::{frame_at, Factor, FrameProvenance, SocioculturalFrame, FRAME_SPACE_SIZE};
use normforge::llm::{run_bounded, Gateway};
use normforge::normbase::NormBase;
use normforge::pipeline::{Pipeline, PipelineError};
use normforge::prompts::Prompts;
use normforge::rag::{PredictionRecord, Predictor};

use crate::{BuildArgs, Cli, Command, EvalCommand, GenerateArgs, PredictArgs, StatsArgs};

/// An error with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn processing(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    config: RunConfig,
    prompts: Prompts,
}

impl Ctx {
    fn gateway(&self) -> Result<Gateway, Failure> {
        let backend = self.config.build_backend()?;
        Ok(Gateway::new(
            backend,
            self.config.gateway.model_id.clone(),
            self.config.gateway.max_in_flight,
        ))
    }

    fn embedder(&self) -> Arc<dyn Embedder> {
        self.config.build_embedder()
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(b) = cli.backend {
        config.gateway.backend = b;
    }
    if let Some(s) = &cli.script {
        config.scripted.script = Some(s.clone());
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.max_in_flight {
        config.gateway.max_in_flight = n;
    }
    match &cli.command {
        Command::Build(a) => {
            if let Some(p) = a.passes {
                config.extraction.passes = p;
            }
            if let Some(c) = a.cap_multiplier {
                config.extraction.cap_multiplier = c;
            }
            if a.no_verify {
                config.extraction.verify = false;
            }
            if let Some(t) = a.threshold {
                config.pool.threshold = t;
            }
        }
        Command::Predict(a) => {
            if let Some(k) = a.k {
                config.rag.k = k;
            }
            if let Some(m) = a.norm_mode {
                config.rag.norm_mode = m;
            }
        }
        _ => {}
    }
    config.validate()?;
    let prompts = match &cli.templates {
        Some(dir) => Prompts::from_dir(dir).map_err(usage)?,
        None => Prompts::builtin(),
    };
    let ctx = Ctx { config, prompts };
    match &cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Build(a) => build(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Eval(e) => eval(&ctx, e),
        Command::Stats(a) => stats(&ctx, a),
    }
}

/// Prints `value` as pretty JSON and optionally writes it to `out`.
fn emit(value: &impl Serialize, out: Option<&Path>) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(processing)? + "\n";
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(processing)?;
    }
    Ok(())
}

fn parse_factor(name: &str) -> Result<Factor, Failure> {
    Factor::parse(name).ok_or_else(|| usage(anyhow!("unknown factor {name:?}")))
}

fn read_frames(path: &Path) -> Result<Vec<SocioculturalFrame>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(processing)?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let diag = |m: String| processing(anyhow!("{}:{}: {m}", path.display(), i + 1));
        let raw: BTreeMap<String, Value> =
            serde_json::from_str(line).map_err(|e| diag(e.to_string()))?;
        let labels: BTreeMap<String, String> = raw
            .into_iter()
            .filter_map(|(k, v)| v.as_str().map(|s| (k, s.to_string())))
            .collect();
        let frame = SocioculturalFrame::from_labels(&labels, FrameProvenance::Gold)
            .map_err(|report| diag(report.to_string()))?;
        frames.push(frame);
    }
    Ok(frames)
}

fn generate(ctx: &Ctx, args: &GenerateArgs) -> CmdResult {
    if args.turns < 2 {
        return Err(usage(anyhow!("--turns must be at least 2")));
    }
    let frames = match (&args.frames, args.sweep) {
        (Some(path), _) => read_frames(path)?,
        (None, Some(n)) => {
            if n == 0 || n > FRAME_SPACE_SIZE {
                return Err(usage(anyhow!("--sweep must be in 1..={FRAME_SPACE_SIZE}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
            rand::seq::index::sample(&mut rng, FRAME_SPACE_SIZE, n)
                .into_iter()
                .map(|i| frame_at(i).expect("index within frame space"))
                .collect()
        }
        (None, None) => unreachable!("clap requires a frame source"),
    };
    let gateway = ctx.gateway()?;
    let pipeline = Pipeline::new(&gateway, &ctx.prompts, ctx.embedder());
    let jobs: Vec<(String, SocioculturalFrame)> = frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| (format!("syn-{:04}", i + 1), f))
        .collect();
    let results = run_bounded(&jobs, gateway.max_in_flight(), |(id, frame)| {
        pipeline.generate_dialogue(id, frame, args.turns)
    });
    let mut dialogues = Vec::new();
    let mut failures = Vec::new();
    for ((id, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(d) => dialogues.push(d),
            Err(e) => {
                eprintln!("frame {id}: {e}");
                failures.push(json!({"id": id, "error": e.to_string()}));
            }
        }
    }
    corpus::save_dialogues(&dialogues, &args.out).map_err(processing)?;
    emit(
        &json!({"generated": dialogues.len(), "failed": failures.len(), "failures": failures}),
        None,
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(processing(anyhow!(
            "{} of {} frames failed",
            failures.len(),
            jobs.len()
        )))
    }
}

fn build(ctx: &Ctx, args: &BuildArgs) -> CmdResult {
    let dialogues = corpus::load_dialogues(&args.dialogues).map_err(processing)?;
    let gateway = ctx.gateway()?;
    let embedder = ctx.embedder();
    let config = ctx.config.extraction_config(embedder.provider_id())?;
    let pipeline = Pipeline::new(&gateway, &ctx.prompts, embedder);
    match pipeline.build_base(dialogues, &config) {
        Ok((base, summary)) => {
            base.save(&args.out_base).map_err(processing)?;
            for f in &summary.failures {
                log::warn!(
                    "dialogue {} failed at {:?}: {}",
                    f.dialogue_id,
                    f.stage,
                    f.message
                );
            }
            emit(&summary, args.report.as_deref())
        }
        Err(PipelineError::AllFailed(summary)) => {
            emit(&summary, args.report.as_deref())?;
            Err(processing(anyhow!("every dialogue failed")))
        }
        Err(e) => Err(processing(e)),
    }
}

fn macro_by_factor(
    records: &[PredictionRecord],
    only: Option<Factor>,
    classes: Option<&[String]>,
) -> Result<BTreeMap<String, MacroReport>, Failure> {
    let mut by_factor: BTreeMap<Factor, Vec<(&str, &str)>> = BTreeMap::new();
    for r in records {
        let factor = parse_factor(&r.factor)?;
        if only.is_some_and(|o| o != factor) {
            continue;
        }
        if let Some(gold) = &r.gold_label {
            by_factor
                .entry(factor)
                .or_default()
                .push((gold.as_str(), r.predicted_label.as_str()));
        }
    }
    let mut out = BTreeMap::new();
    for (factor, pairs) in by_factor {
        let set: Vec<String> = match classes {
            Some(c) => c.to_vec(),
            None => {
                let candidates = factor.candidates();
                let mut seen: BTreeSet<&str> = pairs.iter().map(|p| p.0).collect();
                seen.extend(pairs.iter().map(|p| p.1).filter(|l| candidates.contains(l)));
                seen.into_iter().map(String::from).collect()
            }
        };
        let report = evaluation::macro_scores(&pairs, &set).map_err(processing)?;
        out.insert(factor.key().to_string(), report);
    }
    Ok(out)
}

fn predict(ctx: &Ctx, args: &PredictArgs) -> CmdResult {
    let factors = match &args.factor {
        Some(name) => vec![parse_factor(name)?],
        None => Factor::ALL.to_vec(),
    };
    let base = NormBase::load(&args.base, ctx.embedder()).map_err(processing)?;
    let dialogues = corpus::load_dialogues(&args.dialogues).map_err(processing)?;
    let gateway = ctx.gateway()?;
    let (mode, k) = (ctx.config.rag.norm_mode, ctx.config.rag.k);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
    let items: Vec<_> = dialogues.into_iter().map(|d| (d, rng.next_u64())).collect();
    let predictor = Predictor::new(&base, &gateway, &ctx.prompts);
    let results = predictor.predict_batch(&items, &factors, mode, k);

    let mut records = Vec::new();
    let mut failures = 0usize;
    for ((dialogue, _), result) in items.iter().zip(results) {
        let per_factor = match result {
            Ok(m) => m,
            Err(e) => {
                eprintln!("dialogue {}: {e}", dialogue.id);
                failures += factors.len();
                continue;
            }
        };
        for (factor, r) in per_factor {
            match r {
                Ok(p) => records.push(PredictionRecord::new(dialogue, &p, mode, k)),
                Err(e) => {
                    eprintln!("dialogue {} factor {factor}: {e}", dialogue.id);
                    failures += 1;
                }
            }
        }
    }
    write_jsonl(&args.out, &records)?;
    let macros: BTreeMap<String, Value> = macro_by_factor(&records, None, None)?
        .into_iter()
        .map(|(f, m)| {
            let v = json!({
                "macro_precision": m.macro_precision,
                "macro_recall": m.macro_recall,
                "macro_f1": m.macro_f1,
            });
            (f, v)
        })
        .collect();
    emit(
        &json!({
            "predictions": records.len(),
            "failed": failures,
            "norm_mode": mode,
            "k": k,
            "macro": macros,
        }),
        None,
    )?;
    if failures == 0 {
        Ok(())
    } else {
        Err(processing(anyhow!("{failures} predictions failed")))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CmdResult {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(processing)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(processing)?;
    f.write_all(&buf).map_err(processing)
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(processing)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| processing(anyhow!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn eval(ctx: &Ctx, cmd: &EvalCommand) -> CmdResult {
    match cmd {
        EvalCommand::Overlap {
            a,
            b,
            threshold,
            out,
        } => {
            let a = corpus::load_norms(a).map_err(processing)?;
            let b = corpus::load_norms(b).map_err(processing)?;
            let embedder = ctx.embedder();
            let r =
                evaluation::overlap(&a, &b, *threshold, embedder.as_ref()).map_err(processing)?;
            emit(&json!({"overlap": r}), out.as_deref())
        }
        EvalCommand::Likert { csv, out } => {
            let records = evaluation::load_likert_csv(csv).map_err(processing)?;
            let summary = evaluation::aggregate_likert(&records).map_err(processing)?;
            emit(&json!({"likert": summary}), out.as_deref())
        }
        EvalCommand::Macro {
            predictions,
            factor,
            classes,
            out,
        } => {
            let only = factor.as_deref().map(parse_factor).transpose()?;
            let records = read_predictions(predictions)?;
            let report = macro_by_factor(&records, only, classes.as_deref())?;
            emit(&json!({"macro": report}), out.as_deref())
        }
        EvalCommand::Distribution {
            norms,
            factor,
            include_rejected,
            out,
        } => {
            let factor = parse_factor(factor)?;
            let mut norms = corpus::load_norms(norms).map_err(processing)?;
            if !include_rejected {
                norms.retain(|n| n.is_usable());
            }
            let gateway = ctx.gateway()?;
            let report = evaluation::classify_distribution(&norms, factor, &gateway, &ctx.prompts);
            for (id, e) in &report.errors {
                eprintln!("norm {id}: {e}");
            }
            emit(&json!({"distribution": report}), out.as_deref())
        }
    }
}

fn stats(ctx: &Ctx, args: &StatsArgs) -> CmdResult {
    let base = NormBase::load(&args.base, ctx.embedder()).map_err(processing)?;
    let mut frames: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sources: BTreeMap<&str, usize> = BTreeMap::new();
    for d in base.dialogues() {
        let f = match d.frame.map(|f| f.provenance) {
            Some(FrameProvenance::Gold) => "gold",
            Some(FrameProvenance::Silver) => "silver",
            None => "none",
        };
        *frames.entry(f).or_default() += 1;
        let s = match d.provenance {
            DialogueProvenance::Real => "real",
            DialogueProvenance::Synthetic => "synthetic",
        };
        *sources.entry(s).or_default() += 1;
    }
    emit(
        &json!({
            "manifest": base.manifest(),
            "verification": base.verification_counts(),
            "dialogue_provenance": sources,
            "frame_provenance": frames,
        }),
        None,
    )
}
