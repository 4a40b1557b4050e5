//! Sociocultural frame taxonomy: the six social factors, their closed value
//! sets, label normalization, validation and enumeration of the frame space.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! label_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $label:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            /// Every value in declaration order.
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Canonical textual label.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            /// Canonical labels in declaration order.
            pub fn labels() -> Vec<&'static str> {
                Self::ALL.iter().map(|v| v.label()).collect()
            }

            fn from_normalized(text: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| normalize_label(v.label()) == text)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

label_enum!(
    NormCategory {
        Greetings => "greetings",
        Requests => "requests",
        Apologies => "apologies",
        Persuasion => "persuasion",
        Criticism => "criticism",
    }
);

label_enum!(
    Formality {
        Formal => "formal",
        Informal => "informal",
    }
);

label_enum!(
    SocialDistance {
        Family => "family",
        Friends => "friends",
        RomanticPartners => "romantic partners",
        Working => "working",
        Strangers => "strangers",
    }
);

label_enum!(
    SocialRelation {
        PeerPeer => "peer-peer",
        ElderJunior => "elder-junior",
        ChiefSubordinate => "chief-subordinate",
        MentorMentee => "mentor-mentee",
        CommanderSoldier => "commander-soldier",
        StudentProfessor => "student-professor",
        CustomerServer => "customer-server",
        PartnerPartner => "partner-partner",
    }
);

label_enum!(
    Location {
        OpenArea => "open area",
        Online => "online",
        Home => "home",
        PoliceStation => "police station",
        Restaurant => "restaurant",
        Store => "store",
        Hotel => "hotel",
        RefugeeCamp => "refugee camp",
    }
);

label_enum!(
    Topic {
        Sales => "sales",
        EverydayLife => "everyday life",
        OfficeAffairs => "office affairs",
        SchoolLife => "school life",
        Culinary => "culinary",
        Farming => "farming",
        PovertyAssistance => "poverty assistance",
        PoliceCorruption => "police corruption",
        CounterTerrorism => "counter-terrorism",
        ChildDisappearance => "child disappearance",
    }
);

/// Whether a frame was annotated by a human or predicted by a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameProvenance {
    Gold,
    Silver,
}

/// One of the six social factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    NormCategory,
    Formality,
    SocialDistance,
    SocialRelation,
    Location,
    Topic,
}

impl Serialize for Factor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.key())
    }
}

/// Label accepted for the norm-category factor in analysis output only.
pub const OTHERS_LABEL: &str = "others";

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::NormCategory,
        Factor::Formality,
        Factor::SocialDistance,
        Factor::SocialRelation,
        Factor::Location,
        Factor::Topic,
    ];

    /// Field key used in serialized frames.
    pub fn key(self) -> &'static str {
        match self {
            Factor::NormCategory => "norm_category",
            Factor::Formality => "formality",
            Factor::SocialDistance => "social_distance",
            Factor::SocialRelation => "social_relation",
            Factor::Location => "location",
            Factor::Topic => "topic",
        }
    }

    /// Human-readable name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            Factor::NormCategory => "norm category",
            Factor::Formality => "formality",
            Factor::SocialDistance => "social distance",
            Factor::SocialRelation => "social relation",
            Factor::Location => "location",
            Factor::Topic => "topic",
        }
    }

    /// The closed candidate label set of this factor.
    pub fn candidates(self) -> Vec<&'static str> {
        match self {
            Factor::NormCategory => NormCategory::labels(),
            Factor::Formality => Formality::labels(),
            Factor::SocialDistance => SocialDistance::labels(),
            Factor::SocialRelation => SocialRelation::labels(),
            Factor::Location => Location::labels(),
            Factor::Topic => Topic::labels(),
        }
    }

    /// Parses a factor name in key form ("social_relation"), display form
    /// ("Social Relation") or Chinese form ("社会关系").
    pub fn parse(name: &str) -> Option<Factor> {
        let norm = normalize_label(name);
        Factor::ALL.into_iter().find(|f| {
            norm == normalize_label(f.key())
                || norm == normalize_label(f.display_name())
                || norm == f.chinese_name()
                || (*f == Factor::NormCategory && (norm == "category" || norm == "norm"))
        })
    }

    pub fn chinese_name(self) -> &'static str {
        match self {
            Factor::NormCategory => "规范类别",
            Factor::Formality => "正式程度",
            Factor::SocialDistance => "社会距离",
            Factor::SocialRelation => "社会关系",
            Factor::Location => "地点",
            Factor::Topic => "话题",
        }
    }

    /// Resolves free text to the canonical label of this factor, applying
    /// normalization and the synonym table.
    pub fn resolve(self, text: &str) -> Option<&'static str> {
        let norm = normalize_label(text);
        if norm.is_empty() {
            return None;
        }
        let direct = match self {
            Factor::NormCategory => NormCategory::from_normalized(&norm).map(NormCategory::label),
            Factor::Formality => Formality::from_normalized(&norm).map(Formality::label),
            Factor::SocialDistance => {
                SocialDistance::from_normalized(&norm).map(SocialDistance::label)
            }
            Factor::SocialRelation => {
                SocialRelation::from_normalized(&norm).map(SocialRelation::label)
            }
            Factor::Location => Location::from_normalized(&norm).map(Location::label),
            Factor::Topic => Topic::from_normalized(&norm).map(Topic::label),
        };
        direct.or_else(|| {
            SYNONYMS
                .iter()
                .find(|(f, syn, _)| *f == self && normalize_label(syn) == norm)
                .map(|(_, _, label)| *label)
        })
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// (factor, synonym, canonical label)
const SYNONYMS: &[(Factor, &str, &str)] = &[
    (Factor::NormCategory, "greeting", "greetings"),
    (Factor::NormCategory, "request", "requests"),
    (Factor::NormCategory, "apology", "apologies"),
    (Factor::NormCategory, "apologize", "apologies"),
    (Factor::NormCategory, "persuade", "persuasion"),
    (Factor::NormCategory, "criticisms", "criticism"),
    (Factor::NormCategory, "criticize", "criticism"),
    (Factor::NormCategory, "问候", "greetings"),
    (Factor::NormCategory, "请求", "requests"),
    (Factor::NormCategory, "道歉", "apologies"),
    (Factor::NormCategory, "说服", "persuasion"),
    (Factor::NormCategory, "批评", "criticism"),
    (Factor::Formality, "formal setting", "formal"),
    (Factor::Formality, "informal setting", "informal"),
    (Factor::Formality, "正式", "formal"),
    (Factor::Formality, "非正式", "informal"),
    (Factor::SocialDistance, "working relationship", "working"),
    (Factor::SocialDistance, "working relationships", "working"),
    (Factor::SocialDistance, "work", "working"),
    (Factor::SocialDistance, "colleagues", "working"),
    (
        Factor::SocialDistance,
        "romantic partner",
        "romantic partners",
    ),
    (Factor::SocialDistance, "friend", "friends"),
    (Factor::SocialDistance, "stranger", "strangers"),
    (Factor::SocialDistance, "家人", "family"),
    (Factor::SocialDistance, "朋友", "friends"),
    (Factor::SocialDistance, "恋人", "romantic partners"),
    (Factor::SocialDistance, "工作关系", "working"),
    (Factor::SocialDistance, "陌生人", "strangers"),
    (Factor::SocialRelation, "peer-to-peer", "peer-peer"),
    (Factor::SocialRelation, "peer to peer", "peer-peer"),
    (Factor::SocialRelation, "peers", "peer-peer"),
    (Factor::SocialRelation, "elder junior", "elder-junior"),
    (Factor::SocialRelation, "同辈", "peer-peer"),
    (Factor::SocialRelation, "长辈-晚辈", "elder-junior"),
    (Factor::SocialRelation, "上级-下级", "chief-subordinate"),
    (Factor::SocialRelation, "导师-学员", "mentor-mentee"),
    (Factor::SocialRelation, "长官-士兵", "commander-soldier"),
    (Factor::SocialRelation, "学生-教授", "student-professor"),
    (Factor::SocialRelation, "顾客-服务员", "customer-server"),
    (Factor::SocialRelation, "伴侣-伴侣", "partner-partner"),
    (Factor::Location, "open areas", "open area"),
    (Factor::Location, "online platform", "online"),
    (Factor::Location, "online platforms", "online"),
    (Factor::Location, "homes", "home"),
    (Factor::Location, "police stations", "police station"),
    (Factor::Location, "restaurants", "restaurant"),
    (Factor::Location, "stores", "store"),
    (Factor::Location, "shop", "store"),
    (Factor::Location, "hotels", "hotel"),
    (Factor::Location, "refugee camps", "refugee camp"),
    (Factor::Location, "户外", "open area"),
    (Factor::Location, "线上", "online"),
    (Factor::Location, "家", "home"),
    (Factor::Location, "派出所", "police station"),
    (Factor::Location, "餐厅", "restaurant"),
    (Factor::Location, "商店", "store"),
    (Factor::Location, "酒店", "hotel"),
    (Factor::Location, "难民营", "refugee camp"),
    (Factor::Topic, "everyday life trivialities", "everyday life"),
    (Factor::Topic, "daily life", "everyday life"),
    (Factor::Topic, "office affair", "office affairs"),
    (Factor::Topic, "culinary topics", "culinary"),
    (Factor::Topic, "food", "culinary"),
    (
        Factor::Topic,
        "cases of child disappearance",
        "child disappearance",
    ),
    (Factor::Topic, "missing child", "child disappearance"),
    (Factor::Topic, "销售", "sales"),
    (Factor::Topic, "日常生活", "everyday life"),
    (Factor::Topic, "办公事务", "office affairs"),
    (Factor::Topic, "校园生活", "school life"),
    (Factor::Topic, "烹饪", "culinary"),
    (Factor::Topic, "农业", "farming"),
    (Factor::Topic, "扶贫", "poverty assistance"),
    (Factor::Topic, "警察腐败", "police corruption"),
    (Factor::Topic, "反恐", "counter-terrorism"),
    (Factor::Topic, "儿童失踪", "child disappearance"),
];

const EDGE_PUNCTUATION: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '`', '*', '(', ')', '[', ']', '。', '，', '；', '：',
    '！', '？', '“', '”', '‘', '’', '「', '」', '《', '》', '（', '）', '、',
];

/// Canonicalizes a label: lowercase, dash and underscore variants folded to a
/// single space, whitespace collapsed, edge punctuation stripped.
pub fn normalize_label(text: &str) -> String {
    let folded: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| match c {
            '-' | '_' | '‐' | '‑' | '‒' | '–' | '—' | '―' | '−' | '－' | '~' | '/' => {
                ' '
            }
            c if c.is_whitespace() => ' ',
            c => c,
        })
        .collect();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut current = collapsed;
    loop {
        let next = current
            .trim_matches(|c: char| EDGE_PUNCTUATION.contains(&c) || c.is_whitespace())
            .to_string();
        if next == current {
            return current;
        }
        current = next;
    }
}

/// The six-factor situational context of a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SocioculturalFrame {
    pub norm_category: NormCategory,
    pub formality: Formality,
    pub social_distance: SocialDistance,
    pub social_relation: SocialRelation,
    pub location: Location,
    pub topic: Topic,
    pub provenance: FrameProvenance,
}

impl SocioculturalFrame {
    /// Canonical label of the given factor.
    pub fn label(&self, factor: Factor) -> &'static str {
        match factor {
            Factor::NormCategory => self.norm_category.label(),
            Factor::Formality => self.formality.label(),
            Factor::SocialDistance => self.social_distance.label(),
            Factor::SocialRelation => self.social_relation.label(),
            Factor::Location => self.location.label(),
            Factor::Topic => self.topic.label(),
        }
    }

    /// Flat key → label map with the six factor keys.
    pub fn to_labels(&self) -> BTreeMap<String, String> {
        Factor::ALL
            .iter()
            .map(|f| (f.key().to_string(), self.label(*f).to_string()))
            .collect()
    }

    /// Builds a frame from a textual map, reporting every invalid field.
    pub fn from_labels(
        raw: &BTreeMap<String, String>,
        provenance: FrameProvenance,
    ) -> Result<Self, ValidationReport> {
        let report = validate_frame(raw);
        if !report.is_ok() {
            return Err(report);
        }
        let get = |f: Factor| {
            let text = lookup(raw, f).unwrap_or_default();
            f.resolve(text).expect("validated")
        };
        let pick = |f: Factor| normalize_label(get(f));
        Ok(SocioculturalFrame {
            norm_category: NormCategory::from_normalized(&pick(Factor::NormCategory))
                .expect("validated"),
            formality: Formality::from_normalized(&pick(Factor::Formality)).expect("validated"),
            social_distance: SocialDistance::from_normalized(&pick(Factor::SocialDistance))
                .expect("validated"),
            social_relation: SocialRelation::from_normalized(&pick(Factor::SocialRelation))
                .expect("validated"),
            location: Location::from_normalized(&pick(Factor::Location)).expect("validated"),
            topic: Topic::from_normalized(&pick(Factor::Topic)).expect("validated"),
            provenance,
        })
    }

    pub fn with_provenance(mut self, provenance: FrameProvenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Position of this frame in the deterministic enumeration order.
    pub fn space_index(&self) -> usize {
        let digits = [
            self.norm_category as usize,
            self.formality as usize,
            self.social_distance as usize,
            self.social_relation as usize,
            self.location as usize,
            self.topic as usize,
        ];
        digits
            .iter()
            .zip(RADICES.iter())
            .fold(0, |acc, (d, r)| acc * r + d)
    }
}

impl fmt::Display for SocioculturalFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Factor::ALL
            .iter()
            .map(|fac| format!("{}={}", fac.key(), self.label(*fac)))
            .collect();
        write!(f, "{}", parts.join(", "))
    }
}

// Serialized form is the flat label map; provenance travels separately.
impl Serialize for SocioculturalFrame {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(6))?;
        for f in Factor::ALL {
            map.serialize_entry(f.key(), self.label(f))?;
        }
        map.end()
    }
}

/// Outcome of validating a textual frame.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// (field name, offending text); offending text is empty for a missing field.
    pub violations: Vec<(String, String)>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|(field, text)| {
                if text.is_empty() {
                    format!("{field}: missing")
                } else {
                    format!("{field}: unknown value {text:?}")
                }
            })
            .collect();
        f.write_str(&parts.join("; "))
    }
}

fn lookup(raw: &BTreeMap<String, String>, factor: Factor) -> Option<&str> {
    raw.get(factor.key()).map(String::as_str).or_else(|| {
        raw.iter()
            .find(|(k, _)| Factor::parse(k) == Some(factor))
            .map(|(_, v)| v.as_str())
    })
}

/// Checks that all six factors are present and resolve to enumeration
/// members. Keys may be given in key, display or Chinese form.
pub fn validate_frame(raw: &BTreeMap<String, String>) -> ValidationReport {
    let mut violations = Vec::new();
    for factor in Factor::ALL {
        match lookup(raw, factor) {
            None => violations.push((factor.key().to_string(), String::new())),
            Some(text) if factor.resolve(text).is_none() => {
                let offending = if text.trim().is_empty() {
                    String::new()
                } else {
                    text.to_string()
                };
                violations.push((factor.key().to_string(), offending))
            }
            Some(_) => {}
        }
    }
    ValidationReport { violations }
}

const RADICES: [usize; 6] = [5, 2, 5, 8, 8, 10];

/// Number of distinct frames.
pub const FRAME_SPACE_SIZE: usize = 5 * 2 * 5 * 8 * 8 * 10;

/// Frame at the given position of the enumeration order (gold provenance).
pub fn frame_at(index: usize) -> Option<SocioculturalFrame> {
    if index >= FRAME_SPACE_SIZE {
        return None;
    }
    let mut digits = [0usize; 6];
    let mut rest = index;
    for (slot, radix) in digits.iter_mut().zip(RADICES.iter()).rev() {
        *slot = rest % radix;
        rest /= radix;
    }
    Some(SocioculturalFrame {
        norm_category: NormCategory::ALL[digits[0]],
        formality: Formality::ALL[digits[1]],
        social_distance: SocialDistance::ALL[digits[2]],
        social_relation: SocialRelation::ALL[digits[3]],
        location: Location::ALL[digits[4]],
        topic: Topic::ALL[digits[5]],
        provenance: FrameProvenance::Gold,
    })
}

/// Iterator over every frame, fields varying in declaration order with the
/// last field (topic) fastest.
#[derive(Debug, Clone)]
pub struct FrameSpace {
    next: usize,
}

impl Iterator for FrameSpace {
    type Item = SocioculturalFrame;

    fn next(&mut self) -> Option<Self::Item> {
        let frame = frame_at(self.next)?;
        self.next += 1;
        Some(frame)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = FRAME_SPACE_SIZE - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for FrameSpace {}

/// Returns the size of the frame space and an iterator over it.
pub fn enumerate_frame_space() -> (usize, FrameSpace) {
    (FRAME_SPACE_SIZE, FrameSpace { next: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn office_frame() -> BTreeMap<String, String> {
        map(&[
            ("norm_category", "requests"),
            ("formality", "formal"),
            ("social_relation", "chief-subordinate"),
            ("topic", "office affairs"),
            ("social_distance", "working"),
            ("location", "online"),
        ])
    }

    #[test]
    fn accepts_office_affairs_frame() {
        let report = validate_frame(&office_frame());
        assert!(report.is_ok(), "{report}");
        let frame =
            SocioculturalFrame::from_labels(&office_frame(), FrameProvenance::Gold).unwrap();
        assert_eq!(frame.social_relation, SocialRelation::ChiefSubordinate);
        assert_eq!(frame.topic, Topic::OfficeAffairs);
    }

    #[test]
    fn empty_input_reports_all_six() {
        let report = validate_frame(&BTreeMap::new());
        assert!(!report.is_ok());
        let fields: Vec<&str> = report.violations.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(
            fields,
            vec![
                "norm_category",
                "formality",
                "social_distance",
                "social_relation",
                "location",
                "topic"
            ]
        );
    }

    #[test]
    fn unknown_value_is_reported_verbatim() {
        let mut raw = office_frame();
        raw.insert("social_relation".into(), "cousin-cousin".into());
        let report = validate_frame(&raw);
        assert_eq!(
            report.violations,
            vec![("social_relation".to_string(), "cousin-cousin".to_string())]
        );
    }

    #[test]
    fn synonyms_and_dash_variants_resolve() {
        assert_eq!(
            Factor::SocialDistance.resolve("Working relationships"),
            Some("working")
        );
        assert_eq!(
            Factor::Formality.resolve("informal setting"),
            Some("informal")
        );
        assert_eq!(
            Factor::SocialRelation.resolve("chief–subordinate"),
            Some("chief-subordinate")
        );
        assert_eq!(
            Factor::SocialRelation.resolve("chief_subordinate"),
            Some("chief-subordinate")
        );
        assert_eq!(
            Factor::Topic.resolve("Counter terrorism."),
            Some("counter-terrorism")
        );
        assert_eq!(Factor::Location.resolve("派出所"), Some("police station"));
        assert_eq!(Factor::NormCategory.resolve("others"), None);
    }

    #[test]
    fn factor_names_parse_in_all_forms() {
        assert_eq!(
            Factor::parse("social_relation"),
            Some(Factor::SocialRelation)
        );
        assert_eq!(
            Factor::parse("Social Relation"),
            Some(Factor::SocialRelation)
        );
        assert_eq!(Factor::parse("社会关系"), Some(Factor::SocialRelation));
        assert_eq!(Factor::parse("weather"), None);
    }

    #[test]
    fn frame_space_has_expected_size_and_order() {
        let (count, iter) = enumerate_frame_space();
        assert_eq!(count, 32_000);
        assert_eq!(iter.len(), 32_000);
        let (_, mut iter) = enumerate_frame_space();
        let first = iter.next().unwrap();
        assert_eq!(first.norm_category, NormCategory::Greetings);
        assert_eq!(first.formality, Formality::Formal);
        assert_eq!(first.social_distance, SocialDistance::Family);
        assert_eq!(first.social_relation, SocialRelation::PeerPeer);
        assert_eq!(first.location, Location::OpenArea);
        assert_eq!(first.topic, Topic::Sales);
        let second = iter.next().unwrap();
        assert_eq!(second.topic, Topic::EverydayLife);
        assert_eq!(second.location, Location::OpenArea);
    }

    #[test]
    fn frame_space_is_duplicate_free() {
        let (count, iter) = enumerate_frame_space();
        let mut seen = HashSet::new();
        for (i, frame) in iter.enumerate() {
            assert_eq!(frame.space_index(), i);
            assert!(seen.insert(frame));
        }
        assert_eq!(seen.len(), count);
    }

    #[test]
    fn every_enumerated_frame_round_trips_through_labels() {
        let (_, iter) = enumerate_frame_space();
        for frame in iter.step_by(7) {
            let labels = frame.to_labels();
            assert!(validate_frame(&labels).is_ok());
            let back = SocioculturalFrame::from_labels(&labels, FrameProvenance::Gold).unwrap();
            assert_eq!(back, frame);
        }
    }

    #[test]
    fn candidate_sets_sum_to_38() {
        let total: usize = Factor::ALL.iter().map(|f| f.candidates().len()).sum();
        assert_eq!(total, 38);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_label(&s);
            prop_assert_eq!(normalize_label(&once), once);
        }

        #[test]
        fn label_variants_resolve(idx in 0usize..FRAME_SPACE_SIZE, upper in any::<bool>()) {
            let frame = frame_at(idx).unwrap();
            for f in Factor::ALL {
                let label = frame.label(f);
                let variant = if upper { label.to_uppercase().replace(' ', "_") } else { format!("  {label}. ") };
                prop_assert_eq!(f.resolve(&variant), Some(label));
            }
        }
    }
}
