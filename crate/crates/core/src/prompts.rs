//! Prompt construction from template files and parsing of model replies.
//!
//! Templates are plain text with `[section]` headers (`[system]`, `[user]`,
//! and for some purposes extra fragments) and `{name}` placeholders. A
//! placeholder with no bound value is a hard error at render time. Bodies are
//! Chinese; the English markers (`DIALOGUE:`, `NORMS:`, `factor: value`)
//! keep reply parsing language-independent.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, NormStatement, Verification};
use crate::frames::{
    normalize_label, Factor, FrameProvenance, SocioculturalFrame, ValidationReport, OTHERS_LABEL,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("max_norms must be at least 1")]
    InvalidMaxNorms,
    #[error("a generated dialogue needs at least 2 turns, got {0}")]
    InvalidTurns(usize),
    #[error("dialogue {0:?} has no utterances")]
    EmptyDialogue(String),
    #[error("norm text is empty")]
    EmptyNorm,
    #[error("template {template}: no value for placeholder {{{name}}}")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template}: {message}")]
    TemplateFormat { template: String, message: String },
    #[error("reading template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("reply contains no list items")]
    EmptyReply,
    #[error("frame reply did not resolve: {0}")]
    FrameParse(ValidationReport),
    #[error("reply is neither yes nor no: {0:?}")]
    Verdict(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPurpose {
    Extract,
    Verify,
    PredictFrame,
    GenerateDialogue,
    PredictFactor,
}

impl PromptPurpose {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptPurpose::Extract => "extract",
            PromptPurpose::Verify => "verify",
            PromptPurpose::PredictFrame => "predict_frame",
            PromptPurpose::GenerateDialogue => "generate_dialogue",
            PromptPurpose::PredictFactor => "predict_factor",
        }
    }
}

impl fmt::Display for PromptPurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A rendered chat prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    system: String,
    user: String,
    purpose: PromptPurpose,
}

impl PromptText {
    pub fn new(
        system: impl Into<String>,
        user: impl Into<String>,
        purpose: PromptPurpose,
    ) -> Option<Self> {
        let user = user.into();
        if user.trim().is_empty() {
            return None;
        }
        Some(Self {
            system: system.into(),
            user,
            purpose,
        })
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn purpose(&self) -> PromptPurpose {
        self.purpose
    }
}

/// One parsed template file.
#[derive(Debug, Clone)]
pub struct Template {
    name: String,
    sections: BTreeMap<String, String>,
}

impl Template {
    /// Parses template text. Lines starting with `#` before the first section
    /// header are comments.
    pub fn parse(name: &str, text: &str) -> Result<Self, PromptError> {
        let header = Regex::new(r"^\[([a-z_]+)\]\s*$").expect("valid regex");
        let mut sections = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for line in text.lines() {
            if let Some(caps) = header.captures(line) {
                if let Some((sec, body)) = current.take() {
                    sections.insert(sec, body.join("\n"));
                }
                current = Some((caps[1].to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            } else if !(line.starts_with('#') || line.trim().is_empty()) {
                return Err(PromptError::TemplateFormat {
                    template: name.to_string(),
                    message: format!("text outside a section: {line:?}"),
                });
            }
        }
        if let Some((sec, body)) = current {
            sections.insert(sec, body.join("\n"));
        }
        for required in ["system", "user"] {
            if !sections.contains_key(required) {
                return Err(PromptError::TemplateFormat {
                    template: name.to_string(),
                    message: format!("missing [{required}] section"),
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            sections: sections
                .into_iter()
                .map(|(k, v)| (k, v.trim_end().to_string()))
                .collect(),
        })
    }

    /// Renders one section, substituting `{name}` placeholders. `{{` and `}}`
    /// are literal braces.
    pub fn render(&self, section: &str, vars: &Vars) -> Result<String, PromptError> {
        let src = self
            .sections
            .get(section)
            .ok_or_else(|| PromptError::TemplateFormat {
                template: self.name.clone(),
                message: format!("missing [{section}] section"),
            })?;
        let mut out = String::with_capacity(src.len() + 256);
        let mut rest = src.as_str();
        while let Some(pos) = rest.find(['{', '}']) {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if tail.starts_with("{{") || tail.starts_with("}}") {
                out.push_str(&tail[..1]);
                rest = &tail[2..];
                continue;
            }
            if tail.starts_with('}') {
                return Err(PromptError::TemplateFormat {
                    template: self.name.clone(),
                    message: "unmatched '}'".into(),
                });
            }
            let end = tail.find('}').ok_or_else(|| PromptError::TemplateFormat {
                template: self.name.clone(),
                message: "unterminated placeholder".into(),
            })?;
            let name = &tail[1..end];
            let value = vars
                .get(name)
                .ok_or_else(|| PromptError::MissingPlaceholder {
                    template: self.name.clone(),
                    name: name.to_string(),
                })?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Placeholder bindings.
#[derive(Debug, Default, Clone)]
pub struct Vars(BTreeMap<String, String>);

impl Vars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn with_frame(mut self, frame: &SocioculturalFrame) -> Self {
        for f in Factor::ALL {
            self.0
                .insert(format!("frame.{}", f.key()), frame.label(f).to_string());
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

const TEMPLATE_FILES: [&str; 6] = [
    "extract",
    "verify",
    "predict_frame",
    "generate_dialogue",
    "predict_factor",
    "classify_norm",
];

/// The full template set; every prompt builder lives here.
#[derive(Debug, Clone)]
pub struct Prompts {
    extract: Template,
    verify: Template,
    predict_frame: Template,
    generate_dialogue: Template,
    predict_factor: Template,
    classify_norm: Template,
}

impl Prompts {
    /// Templates shipped with the crate.
    pub fn builtin() -> Self {
        let t = |name: &str, text: &str| Template::parse(name, text).expect("builtin template");
        Self {
            extract: t("extract", include_str!("../templates/extract.txt")),
            verify: t("verify", include_str!("../templates/verify.txt")),
            predict_frame: t(
                "predict_frame",
                include_str!("../templates/predict_frame.txt"),
            ),
            generate_dialogue: t(
                "generate_dialogue",
                include_str!("../templates/generate_dialogue.txt"),
            ),
            predict_factor: t(
                "predict_factor",
                include_str!("../templates/predict_factor.txt"),
            ),
            classify_norm: t(
                "classify_norm",
                include_str!("../templates/classify_norm.txt"),
            ),
        }
    }

    /// Loads `<name>.txt` for every purpose from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut loaded = BTreeMap::new();
        for name in TEMPLATE_FILES {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|source| PromptError::TemplateIo {
                path: path.display().to_string(),
                source,
            })?;
            loaded.insert(name, Template::parse(name, &text)?);
        }
        let mut take = |name: &str| loaded.remove(name).expect("loaded above");
        Ok(Self {
            extract: take("extract"),
            verify: take("verify"),
            predict_frame: take("predict_frame"),
            generate_dialogue: take("generate_dialogue"),
            predict_factor: take("predict_factor"),
            classify_norm: take("classify_norm"),
        })
    }

    fn finish(
        template: &Template,
        vars: &Vars,
        purpose: PromptPurpose,
    ) -> Result<PromptText, PromptError> {
        let system = template.render("system", vars)?;
        let user = template.render("user", vars)?;
        PromptText::new(system, user, purpose).ok_or_else(|| PromptError::TemplateFormat {
            template: template.name.clone(),
            message: "rendered user text is empty".into(),
        })
    }

    /// Four-part extraction prompt: dialogue header, frame body, directed
    /// question, output-format constraint.
    pub fn extraction(
        &self,
        dialogue: &Dialogue,
        frame: &SocioculturalFrame,
        max_norms: usize,
    ) -> Result<PromptText, PromptError> {
        if max_norms < 1 {
            return Err(PromptError::InvalidMaxNorms);
        }
        let vars = Vars::new()
            .set("dialogue", render_dialogue(dialogue)?)
            .with_frame(frame)
            .set("max_norms", max_norms.to_string());
        Self::finish(&self.extract, &vars, PromptPurpose::Extract)
    }

    pub fn frame_prediction(&self, dialogue: &Dialogue) -> Result<PromptText, PromptError> {
        let candidates = Factor::ALL
            .iter()
            .map(|f| format!("{}: {}", f.display_name(), f.candidates().join(" | ")))
            .collect::<Vec<_>>()
            .join("\n");
        let vars = Vars::new()
            .set("dialogue", render_dialogue(dialogue)?)
            .set("candidates", candidates);
        Self::finish(&self.predict_frame, &vars, PromptPurpose::PredictFrame)
    }

    pub fn verification(
        &self,
        norm: &NormStatement,
        dialogue: &Dialogue,
        frame: &SocioculturalFrame,
    ) -> Result<PromptText, PromptError> {
        if norm.text.trim().is_empty() {
            return Err(PromptError::EmptyNorm);
        }
        let vars = Vars::new()
            .set("norm", norm.text.trim())
            .set("dialogue", render_dialogue(dialogue)?)
            .with_frame(frame);
        Self::finish(&self.verify, &vars, PromptPurpose::Verify)
    }

    pub fn dialogue_generation(
        &self,
        frame: &SocioculturalFrame,
        turns: usize,
    ) -> Result<PromptText, PromptError> {
        if turns < 2 {
            return Err(PromptError::InvalidTurns(turns));
        }
        let vars = Vars::new()
            .with_frame(frame)
            .set("turns", turns.to_string());
        Self::finish(
            &self.generate_dialogue,
            &vars,
            PromptPurpose::GenerateDialogue,
        )
    }

    /// Factor prediction prompt; the norms section is omitted when `norms` is
    /// empty.
    pub fn factor_prediction(
        &self,
        dialogue: &Dialogue,
        norms: &[&NormStatement],
        factor: Factor,
    ) -> Result<PromptText, PromptError> {
        let section = if norms.is_empty() {
            String::new()
        } else {
            let list = render_norm_list(norms.iter().map(|n| n.text.trim()));
            self.predict_factor
                .render("norms_section", &Vars::new().set("norm_list", list))?
        };
        let vars = Vars::new()
            .set("dialogue", render_dialogue(dialogue)?)
            .set("norms", section)
            .set("factor", factor.key())
            .set("factor_name", factor.display_name())
            .set("candidates", factor.candidates().join(" | "));
        Self::finish(&self.predict_factor, &vars, PromptPurpose::PredictFactor)
    }

    /// Asks which label of `factor` a norm statement belongs to; the
    /// norm-category candidates include the analysis-only "others" label.
    pub fn norm_classification(
        &self,
        norm: &NormStatement,
        factor: Factor,
    ) -> Result<PromptText, PromptError> {
        if norm.text.trim().is_empty() {
            return Err(PromptError::EmptyNorm);
        }
        let mut candidates = factor.candidates();
        if factor == Factor::NormCategory {
            candidates.push(OTHERS_LABEL);
        }
        let vars = Vars::new()
            .set("norm", norm.text.trim())
            .set("factor", factor.key())
            .set("factor_name", factor.display_name())
            .set("candidates", candidates.join(" | "));
        Self::finish(&self.classify_norm, &vars, PromptPurpose::PredictFactor)
    }
}

/// `speaker: text` lines.
pub fn render_dialogue(dialogue: &Dialogue) -> Result<String, PromptError> {
    if dialogue.utterances.is_empty() {
        return Err(PromptError::EmptyDialogue(dialogue.id.clone()));
    }
    Ok(dialogue
        .utterances
        .iter()
        .map(|u| format!("{}: {}", u.speaker.trim(), u.text.trim()))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Reference numbered-list rendering, the format the extraction prompt asks for.
pub fn render_norm_list<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    items
        .into_iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reference `factor: value` rendering of a frame.
pub fn render_frame_reply(frame: &SocioculturalFrame) -> String {
    Factor::ALL
        .iter()
        .map(|f| format!("{}: {}", f.display_name(), frame.label(*f)))
        .collect::<Vec<_>>()
        .join("\n")
}

static LIST_ITEM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:\*\*)?(?:\d{1,3}\s*[.)．、）:：]|[-*•·])(?:\*\*)?\s*(.*)$")
        .expect("valid regex")
});

/// Extracts numbered or bulleted items, keeping at most `max_norms`.
pub fn parse_norm_list(reply: &str, max_norms: usize) -> Result<Vec<String>, PromptError> {
    let items: Vec<String> = reply
        .lines()
        .filter_map(|line| LIST_ITEM.captures(line))
        .map(|caps| caps[1].trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if items.is_empty() {
        return Err(PromptError::EmptyReply);
    }
    Ok(items.into_iter().take(max_norms).collect())
}

/// Parses `factor: value` lines into a silver frame.
pub fn parse_frame_reply(reply: &str) -> Result<SocioculturalFrame, PromptError> {
    let mut raw = BTreeMap::new();
    for line in reply.lines() {
        let Some(idx) = line.find([':', '：']) else {
            continue;
        };
        let (key, value) = line.split_at(idx);
        let value = value.trim_start_matches([':', '：']);
        let key = key.trim().trim_start_matches(['-', '*', '•']);
        let key = key.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.');
        if let Some(factor) = Factor::parse(key) {
            raw.entry(factor.key().to_string())
                .or_insert_with(|| value.trim().to_string());
        }
    }
    SocioculturalFrame::from_labels(&raw, FrameProvenance::Silver).map_err(PromptError::FrameParse)
}

/// Leading yes/no, case-insensitive.
pub fn parse_verdict(reply: &str) -> Result<Verification, PromptError> {
    let trimmed = reply
        .trim_start_matches(|c: char| c.is_whitespace() || "*\"'`“‘「".contains(c))
        .to_lowercase();
    let word: String = trimmed.chars().take_while(|c| c.is_alphabetic()).collect();
    match word.as_str() {
        "yes" => Ok(Verification::Accepted),
        "no" => Ok(Verification::Rejected),
        _ => Err(PromptError::Verdict(reply.chars().take(80).collect())),
    }
}

/// Matches a reply against the factor's candidate labels; `allow_others`
/// additionally admits the analysis-only "others" label.
pub fn parse_factor_label(reply: &str, factor: Factor, allow_others: bool) -> Option<&'static str> {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = strip_answer_marker(line);
    if let Some(label) = factor.resolve(line) {
        return Some(label);
    }
    let norm = normalize_label(line);
    (allow_others && (norm == OTHERS_LABEL || norm == "other" || norm == "其他"))
        .then_some(OTHERS_LABEL)
}

fn strip_answer_marker(line: &str) -> &str {
    for marker in ["answer:", "answer：", "答案:", "答案：", "answer"] {
        if line.len() >= marker.len()
            && line.is_char_boundary(marker.len())
            && line[..marker.len()].eq_ignore_ascii_case(marker)
        {
            return line[marker.len()..].trim();
        }
    }
    line
}
