//! Requirement interpretation: rule-based extraction of a [`SpecSet`] from
//! free text, with an optional language-model path that falls back to the
//! rules on any failure.

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::llm::{extract_json, LlmClient};
use crate::model::{ModelError, Priority, SpecEntry, SpecSet};

/// System prompt sent with every interpretation request.
pub const SYSTEM_PROMPT: &str = include_str!("../assets/specint_prompt.txt");

pub const DEFAULT_HINF: f64 = 10.0;
pub const DEFAULT_SETTLING: f64 = 5.0;
pub const DEFAULT_OVERSHOOT: f64 = 0.20;
pub const DEFAULT_OVERSHOOT_SLACK: f64 = 0.05;
/// Slack of an H-infinity target when none is stated, relative to the target.
pub const HINF_SLACK_RATIO: f64 = 0.1;
/// Slack of a settling target when none is stated, relative to the target.
pub const SETTLING_SLACK_RATIO: f64 = 0.2;
pub const FAST_SETTLING: f64 = 2.5;
pub const SMOOTH_OVERSHOOT: f64 = 0.075;
pub const STRONG_REJECTION_HINF: f64 = 1.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    User,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementText {
    pub text: String,
    pub source: TextSource,
}

impl RequirementText {
    pub fn user(text: impl Into<String>) -> Self {
        Self { text: text.into(), source: TextSource::User }
    }

    pub fn fixture(text: impl Into<String>) -> Self {
        Self { text: text.into(), source: TextSource::Fixture }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecJsonEntry {
    pub target: f64,
    pub priority: Priority,
    pub slack: f64,
}

impl From<SpecJsonEntry> for SpecEntry {
    fn from(e: SpecJsonEntry) -> Self {
        SpecEntry::new(e.target, e.slack, e.priority)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayJson {
    pub target: f64,
    pub priority: Priority,
}

/// Interpretation output document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecJson {
    pub h_infinity_norm: SpecJsonEntry,
    pub settling_time: SpecJsonEntry,
    pub overshoot: SpecJsonEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_rate: Option<DecayJson>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Hinf,
    Settling,
    Overshoot,
    Decay,
}

fn default_entry(kind: Kind) -> SpecJsonEntry {
    match kind {
        Kind::Hinf => SpecJsonEntry { target: DEFAULT_HINF, priority: Priority::Medium, slack: HINF_SLACK_RATIO * DEFAULT_HINF },
        Kind::Settling => SpecJsonEntry {
            target: DEFAULT_SETTLING,
            priority: Priority::Medium,
            slack: SETTLING_SLACK_RATIO * DEFAULT_SETTLING,
        },
        Kind::Overshoot => SpecJsonEntry { target: DEFAULT_OVERSHOOT, priority: Priority::Low, slack: DEFAULT_OVERSHOOT_SLACK },
        Kind::Decay => unreachable!("decay has no default"),
    }
}

fn default_slack(kind: Kind, target: f64) -> f64 {
    match kind {
        Kind::Hinf => HINF_SLACK_RATIO * target,
        Kind::Settling => SETTLING_SLACK_RATIO * target,
        Kind::Overshoot => DEFAULT_OVERSHOOT_SLACK,
        Kind::Decay => 0.0,
    }
}

impl Default for SpecJson {
    fn default() -> Self {
        Self {
            h_infinity_norm: default_entry(Kind::Hinf),
            settling_time: default_entry(Kind::Settling),
            overshoot: default_entry(Kind::Overshoot),
            decay_rate: None,
        }
    }
}

fn entry_valid(kind: Kind, e: &SpecJsonEntry) -> Result<(), String> {
    let name = match kind {
        Kind::Hinf => "h_infinity_norm",
        Kind::Settling => "settling_time",
        Kind::Overshoot => "overshoot",
        Kind::Decay => "decay_rate",
    };
    if !e.target.is_finite() || !e.slack.is_finite() {
        return Err(format!("{name}: non-finite field"));
    }
    if e.slack < 0.0 {
        return Err(format!("{name}: slack {} < 0", e.slack));
    }
    match kind {
        Kind::Overshoot if !(0.0..1.0).contains(&e.target) => Err(format!("{name}: target {} outside [0, 1)", e.target)),
        Kind::Hinf | Kind::Settling if !(e.target > 0.0) => Err(format!("{name}: target {} <= 0", e.target)),
        _ => Ok(()),
    }
}

impl SpecJson {
    /// Finite fields, positive H-infinity and settling targets, overshoot in
    /// `[0, 1)`, non-negative slacks and decay rate.
    pub fn validate(&self) -> Result<(), String> {
        entry_valid(Kind::Hinf, &self.h_infinity_norm)?;
        entry_valid(Kind::Settling, &self.settling_time)?;
        entry_valid(Kind::Overshoot, &self.overshoot)?;
        if let Some(d) = &self.decay_rate {
            if !(d.target >= 0.0 && d.target.is_finite()) {
                return Err(format!("decay_rate: target {} must be finite and >= 0", d.target));
            }
        }
        Ok(())
    }

    /// Strict-but-tolerant reading of a model reply: `h_infinity_norm` is
    /// required, missing entries take defaults, missing slacks take the rule
    /// defaults, and `decay_rate` may be a bare number.
    pub fn from_value(v: &Value) -> Result<Self, String> {
        let raw: RawSpec = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
        let fill = |kind: Kind, raw: Option<RawEntry>, explicit_priority: Priority| -> SpecJsonEntry {
            match raw {
                Some(r) => SpecJsonEntry {
                    target: r.target,
                    priority: r.priority.unwrap_or(explicit_priority),
                    slack: r.slack.unwrap_or_else(|| default_slack(kind, r.target)),
                },
                None => default_entry(kind),
            }
        };
        let hinf = raw.h_infinity_norm.ok_or("h_infinity_norm is required")?;
        let out = Self {
            h_infinity_norm: fill(Kind::Hinf, Some(hinf), Priority::High),
            settling_time: fill(Kind::Settling, raw.settling_time, Priority::High),
            overshoot: fill(Kind::Overshoot, raw.overshoot, Priority::High),
            decay_rate: raw.decay_rate.map(|d| d.0),
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Deserialize)]
struct RawEntry {
    target: f64,
    #[serde(default)]
    priority: Option<Priority>,
    #[serde(default)]
    slack: Option<f64>,
}

struct RawDecay(DecayJson);

impl<'de> Deserialize<'de> for RawDecay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Obj { target: f64, #[serde(default)] priority: Option<Priority> },
        }
        Ok(RawDecay(match Repr::deserialize(d)? {
            Repr::Num(target) => DecayJson { target, priority: Priority::Medium },
            Repr::Obj { target, priority } => DecayJson { target, priority: priority.unwrap_or(Priority::Medium) },
        }))
    }
}

#[derive(Deserialize)]
struct RawSpec {
    #[serde(default)]
    h_infinity_norm: Option<RawEntry>,
    #[serde(default)]
    settling_time: Option<RawEntry>,
    #[serde(default)]
    overshoot: Option<RawEntry>,
    #[serde(default)]
    decay_rate: Option<RawDecay>,
}

/// Interpretation result with provenance flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedSpec {
    pub spec: SpecJson,
    /// The language-model path failed and the rules were used instead.
    pub fallback: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Number(f64),
    Sym(char),
}

fn tokenize(clause: &str) -> Vec<Token> {
    let chars: Vec<char> = clause.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || (chars[i] == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit))) {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            if let Ok(v) = s.parse() {
                out.push(Token::Number(v));
            }
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '-' | '_' | '∞')) {
                i += 1;
            }
            let w: String = chars[start..i].iter().collect::<String>().to_lowercase();
            out.push(Token::Word(w.trim_end_matches('-').to_string()));
        } else {
            if matches!(c, '%' | '±' | '≥' | '≤' | '<' | '>') {
                out.push(Token::Sym(c));
            }
            i += 1;
        }
    }
    out
}

/// Splits at `;`, `!`, `?`, newlines, and periods not inside a number.
fn clauses(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.replace("+/-", "±").chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let boundary = match c {
            ';' | '!' | '?' | '\n' => true,
            '.' => !chars.get(i + 1).is_some_and(char::is_ascii_digit),
            _ => false,
        };
        if boundary {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    out.push(cur);
    out.retain(|c| !c.trim().is_empty());
    out
}

fn keyword(word: &str) -> Option<Kind> {
    const HINF: [&str; 11] =
        ["h-infinity", "h_infinity", "hinf", "h-inf", "h∞", "h_inf", "gamma", "γ", "disturbance", "attenuation", "l2-gain"];
    if word.starts_with("settl") {
        Some(Kind::Settling)
    } else if word.starts_with("overshoot") {
        Some(Kind::Overshoot)
    } else if word.starts_with("decay") || word == "alpha" || word == "α" {
        Some(Kind::Decay)
    } else if HINF.contains(&word) {
        Some(Kind::Hinf)
    } else {
        None
    }
}

fn priority_word(word: &str) -> Option<Priority> {
    match word {
        "critical" => Some(Priority::Critical),
        "high" => Some(Priority::High),
        "medium" => Some(Priority::Medium),
        "low" => Some(Priority::Low),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unit {
    None,
    Percent,
    Seconds,
    Millis,
}

fn unit_of(tok: Option<&Token>) -> Unit {
    match tok {
        Some(Token::Sym('%')) => Unit::Percent,
        Some(Token::Word(w)) if matches!(w.as_str(), "s" | "sec" | "secs" | "second" | "seconds") => Unit::Seconds,
        Some(Token::Word(w)) if matches!(w.as_str(), "ms" | "millisecond" | "milliseconds") => Unit::Millis,
        _ => Unit::None,
    }
}

fn is_word(tok: Option<&Token>, words: &[&str]) -> bool {
    matches!(tok, Some(Token::Word(w)) if words.contains(&w.as_str()))
}

/// Nearest keyword position by token distance; ties go to the earlier one.
fn nearest(keys: &[(usize, Kind)], pos: usize) -> Option<Kind> {
    keys.iter().min_by_key(|(k, _)| (k.abs_diff(pos), *k > pos)).map(|(_, kind)| *kind)
}

fn convert(kind: Kind, value: f64, unit: Unit) -> f64 {
    match (kind, unit) {
        (_, Unit::Percent) => value / 100.0,
        (Kind::Settling, Unit::Millis) => value / 1000.0,
        (Kind::Overshoot, Unit::None) if value >= 1.0 => value / 100.0,
        _ => value,
    }
}

#[derive(Default)]
struct Found {
    target: Option<f64>,
    slack: Option<f64>,
    priority: Option<Priority>,
    qualitative: Option<f64>,
}

/// Deterministic keyword and number extraction.
///
/// Numbers bind to the nearest specification keyword in the same clause. A
/// number next to `tolerance`/`slack` or after `±` is a slack, otherwise a
/// target. Priority words bind the same way. Explicit targets default to high
/// priority, or medium when the text also grants a tolerance. Qualitative
/// words ("fast", "smooth", "strongly reject") apply only when no number was
/// given for that specification.
pub fn parse_rules(req: &RequirementText) -> ParsedSpec {
    let mut found: [Found; 4] = Default::default();
    let slot = |k: Kind| match k {
        Kind::Hinf => 0,
        Kind::Settling => 1,
        Kind::Overshoot => 2,
        Kind::Decay => 3,
    };
    let mut warnings = Vec::new();
    let mut any_keyword = false;

    for clause in clauses(&req.text) {
        let toks = tokenize(&clause);
        let keys: Vec<(usize, Kind)> = toks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                Token::Word(w) => keyword(w).map(|k| (i, k)),
                _ => None,
            })
            .collect();
        any_keyword |= !keys.is_empty();

        for (i, tok) in toks.iter().enumerate() {
            match tok {
                Token::Number(v) => {
                    let unit = unit_of(toks.get(i + 1));
                    let after = i + if unit == Unit::None { 1 } else { 2 };
                    let is_slack = matches!(i.checked_sub(1).and_then(|j| toks.get(j)), Some(Token::Sym('±')))
                        || is_word(toks.get(after), &["tolerance", "slack"])
                        || (i >= 2 && is_word(toks.get(i - 1), &["of"]) && is_word(toks.get(i - 2), &["tolerance", "slack"]))
                        || is_word(i.checked_sub(1).and_then(|j| toks.get(j)), &["tolerance", "slack"]);
                    let Some(kind) = nearest(&keys, i) else {
                        warnings.push(format!("number {v} in {:?} has no specification keyword", clause.trim()));
                        continue;
                    };
                    let value = convert(kind, *v, unit);
                    let f = &mut found[slot(kind)];
                    if is_slack {
                        f.slack.get_or_insert(value);
                    } else {
                        f.target.get_or_insert(value);
                    }
                }
                Token::Word(w) => {
                    if let Some(p) = priority_word(w) {
                        let tagged = w == "critical"
                            || is_word(toks.get(i + 1), &["priority"])
                            || is_word(i.checked_sub(1).and_then(|j| toks.get(j)), &["priority"]);
                        if let (true, Some(kind)) = (tagged, nearest(&keys, i)) {
                            found[slot(kind)].priority.get_or_insert(p);
                        }
                    }
                    let qual = match w.as_str() {
                        "fast" | "faster" => Some((Kind::Settling, FAST_SETTLING)),
                        "smooth" | "smoothly" => Some((Kind::Overshoot, SMOOTH_OVERSHOOT)),
                        "strongly" if matches!(toks.get(i + 1), Some(Token::Word(n)) if n.starts_with("reject")) => {
                            Some((Kind::Hinf, STRONG_REJECTION_HINF))
                        }
                        _ => None,
                    };
                    if let Some((kind, v)) = qual {
                        any_keyword = true;
                        found[slot(kind)].qualitative.get_or_insert(v);
                    }
                }
                Token::Sym(_) => {}
            }
        }
    }

    if !any_keyword {
        warnings.push("no specification keywords found; using defaults".into());
    }

    let mut spec = SpecJson::default();
    for (kind, entry) in [
        (Kind::Hinf, &mut spec.h_infinity_norm),
        (Kind::Settling, &mut spec.settling_time),
        (Kind::Overshoot, &mut spec.overshoot),
    ] {
        let f = &found[slot(kind)];
        let candidate = match (f.target, f.qualitative) {
            (Some(t), _) => {
                let implied = if f.slack.is_some() { Priority::Medium } else { Priority::High };
                SpecJsonEntry {
                    target: t,
                    priority: f.priority.unwrap_or(implied),
                    slack: f.slack.unwrap_or_else(|| default_slack(kind, t)),
                }
            }
            (None, Some(q)) => SpecJsonEntry {
                target: q,
                priority: f.priority.unwrap_or(Priority::Medium),
                slack: f.slack.unwrap_or_else(|| default_slack(kind, q)),
            },
            (None, None) => {
                let mut d = default_entry(kind);
                if let Some(p) = f.priority {
                    d.priority = p;
                }
                if let Some(s) = f.slack {
                    d.slack = s;
                }
                d
            }
        };
        match entry_valid(kind, &candidate) {
            Ok(()) => *entry = candidate,
            Err(e) => warnings.push(format!("{e}; default used")),
        }
    }
    let decay = &found[slot(Kind::Decay)];
    if let Some(t) = decay.target {
        spec.decay_rate = Some(DecayJson { target: t, priority: decay.priority.unwrap_or(Priority::Medium) });
    }
    ParsedSpec { spec, fallback: false, warnings }
}

/// Model-assisted interpretation; any failure returns the rule result with
/// `fallback = true`.
pub fn parse_llm(req: &RequirementText, client: &dyn LlmClient) -> ParsedSpec {
    let reply = client.complete(SYSTEM_PROMPT, &req.text);
    let parsed = reply
        .map_err(|e| e.to_string())
        .and_then(|r| extract_json(&r).map_err(|e| e.to_string()))
        .and_then(|v| SpecJson::from_value(&v));
    match parsed {
        Ok(spec) => ParsedSpec { spec, fallback: false, warnings: Vec::new() },
        Err(reason) => {
            log::info!("interpretation falls back to rules: {reason}");
            let mut out = parse_rules(req);
            out.fallback = true;
            out.warnings.insert(0, format!("model reply rejected: {reason}"));
            out
        }
    }
}

/// SpecSet with the floor at zero; the decay override is carried over.
pub fn to_specset(j: &SpecJson) -> Result<SpecSet, ModelError> {
    let specs = SpecSet {
        hinf: j.h_infinity_norm.into(),
        hinf_min: 0.0,
        settling_time: j.settling_time.into(),
        overshoot: j.overshoot.into(),
        decay_rate: j.decay_rate.map(|d| d.target),
    };
    specs.validate()?;
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LlmError;
    use proptest::prelude::*;

    const NN1_TEXT: &str = "Design a robust H-infinity controller for the NN1 system with the following requirements: \
Minimize overshoot (target less than 10%, high priority); Fast settling time (target 16 seconds with 2s tolerance); \
Good disturbance rejection (H-infinity norm less than 20); Ensure adequate stability margins with decay rate α ≥ 0.25.";

    #[test]
    fn nn1_paragraph() {
        let out = parse_rules(&RequirementText::fixture(NN1_TEXT));
        let s = out.spec;
        assert_eq!(s.settling_time, SpecJsonEntry { target: 16.0, priority: Priority::Medium, slack: 2.0 });
        assert_eq!(s.overshoot, SpecJsonEntry { target: 0.1, priority: Priority::High, slack: 0.05 });
        assert_eq!(s.h_infinity_norm, SpecJsonEntry { target: 20.0, priority: Priority::High, slack: 2.0 });
        assert_eq!(s.decay_rate, Some(DecayJson { target: 0.25, priority: Priority::Medium }));
        assert!(!out.fallback);
    }

    #[test]
    fn plain_text_gives_defaults_with_warning() {
        let out = parse_rules(&RequirementText::user("design a controller"));
        assert_eq!(out.spec, SpecJson::default());
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn percent_overshoot_is_high_priority() {
        let s = parse_rules(&RequirementText::user("overshoot below 5%")).spec;
        assert_eq!(s.overshoot.target, 0.05);
        assert_eq!(s.overshoot.priority, Priority::High);
    }

    #[test]
    fn qualitative_words() {
        let s = parse_rules(&RequirementText::user("A fast and smooth response. It must strongly reject disturbances.")).spec;
        assert_eq!(s.settling_time.target, FAST_SETTLING);
        assert_eq!(s.overshoot.target, SMOOTH_OVERSHOOT);
        assert_eq!(s.h_infinity_norm.target, STRONG_REJECTION_HINF);
    }

    #[test]
    fn tie_binds_to_preceding_keyword() {
        let s = parse_rules(&RequirementText::user("settling 3 overshoot")).spec;
        assert_eq!(s.settling_time.target, 3.0);
        assert_eq!(s.overshoot.target, DEFAULT_OVERSHOOT);
    }

    #[test]
    fn out_of_range_number_falls_back_to_default() {
        let out = parse_rules(&RequirementText::user("overshoot under 150%"));
        assert_eq!(out.spec.overshoot.target, DEFAULT_OVERSHOOT);
        assert!(out.warnings.iter().any(|w| w.contains("overshoot")));
    }

    #[test]
    fn specset_alpha() {
        let s = to_specset(&parse_rules(&RequirementText::fixture(NN1_TEXT)).spec).unwrap();
        assert_eq!(s.alpha(), 0.25);
        assert_eq!(s.hinf_min, 0.0);
        let mut j = parse_rules(&RequirementText::fixture(NN1_TEXT)).spec;
        j.decay_rate = None;
        assert_eq!(to_specset(&j).unwrap().alpha(), 0.24375);
        j.settling_time.target = 0.0;
        assert!(to_specset(&j).is_err());
    }

    struct Canned(Result<String, LlmError>);

    impl LlmClient for Canned {
        fn complete(&self, _s: &str, _u: &str) -> Result<String, LlmError> {
            self.0.clone()
        }
    }

    #[test]
    fn llm_reply_accepted() {
        let reply = r#"{
  "settling_time": {"target": 16.0, "priority": "medium", "slack": 2.0},
  "overshoot": {"target": 0.1, "priority": "high", "slack": 0.05},
  "h_infinity_norm": {"target": 20.0, "priority": "high", "slack": 2.0},
  "decay_rate": {"target": 0.25, "priority": "medium"}
}"#;
        let out = parse_llm(&RequirementText::user("x"), &Canned(Ok(reply.into())));
        assert!(!out.fallback);
        assert_eq!(out.spec.h_infinity_norm.target, 20.0);
        assert_eq!(out.spec.decay_rate.unwrap().target, 0.25);
    }

    #[test]
    fn llm_failures_fall_back() {
        let req = RequirementText::user("overshoot below 5%");
        for reply in [
            Ok("I cannot help".to_string()),
            Ok(r#"{"h_infinity_norm": {"target": 5}, "settling_time": {"target": -3}}"#.to_string()),
            Ok(r#"{"settling_time": {"target": 3}}"#.to_string()),
            Err(LlmError::Unavailable("timeout".into())),
        ] {
            let out = parse_llm(&req, &Canned(reply));
            assert!(out.fallback);
            assert_eq!(out.spec.overshoot.target, 0.05);
        }
    }

    proptest! {
        #[test]
        fn rules_are_total_and_valid(text in "\\PC{0,120}") {
            let a = parse_rules(&RequirementText::user(text.clone()));
            prop_assert!(a.spec.validate().is_ok());
            prop_assert!(to_specset(&a.spec).is_ok());
            prop_assert_eq!(a, parse_rules(&RequirementText::user(text)));
        }

        #[test]
        fn rules_valid_on_keyword_soup(words in prop::collection::vec(prop_oneof![
            Just("settling".to_string()), Just("overshoot".to_string()), Just("gamma".to_string()),
            Just("decay".to_string()), Just("%".to_string()), Just("s".to_string()), Just("±".to_string()),
            Just("tolerance".to_string()), Just("high priority".to_string()), Just(";".to_string()),
            (0.0f64..500.0).prop_map(|v| format!("{v:.3}")),
        ], 0..20)) {
            let out = parse_rules(&RequirementText::user(words.join(" ")));
            prop_assert!(to_specset(&out.spec).is_ok());
        }
    }
}
