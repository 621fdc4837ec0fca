//! Specification adaptation after failed verification: heuristic and
//! model-assisted refinement, the gamma floor, and infeasibility relaxation.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::llm::{extract_json, LlmClient};
use crate::model::{Priority, SpecSet};
use crate::verify::{Severity, Violation, ViolationKind};

/// System prompt sent with every adaptation request.
pub const SYSTEM_PROMPT: &str = include_str!("../assets/adapt_prompt.txt");

/// Relative settling relaxation on overshoot violations (full phase).
pub const SETTLING_RELAX: f64 = 0.175;
/// Relative overshoot tightening on overshoot violations (full phase).
pub const OVERSHOOT_TIGHTEN: f64 = 0.075;
/// Relative H-infinity tightening on rejection violations (full phase).
pub const HINF_TIGHTEN: f64 = 0.125;
/// Relative decay-rate increase on settling-only violations (full phase).
pub const DECAY_BOOST: f64 = 0.1;
/// H-infinity target growth after an infeasible synthesis.
pub const INFEASIBLE_GAMMA_RELAX: f64 = 1.25;
/// Slack growth of the lowest-priority time-domain spec after infeasibility.
pub const INFEASIBLE_SLACK_RELAX: f64 = 1.5;
/// Past designs summarized in a model request.
pub const MEMORY_DIGEST_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionSource {
    Llm,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptDecision {
    /// Refined specs; `hinf_min` already equals `gamma_floor_after`.
    pub updated_specs: SpecSet,
    pub gamma_floor_after: f64,
    pub rationale: String,
    pub source: DecisionSource,
}

/// Compact view of an earlier iteration for model prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub iteration: usize,
    pub gamma: Option<f64>,
    pub gamma_min: f64,
    pub settling_median_s: Option<f64>,
    pub overshoot_median: Option<f64>,
    pub violations: usize,
}

fn is_transient(kind: ViolationKind) -> bool {
    matches!(kind, ViolationKind::SettlingTime | ViolationKind::Overshoot)
}

fn severity_factors(s: Severity) -> (f64, f64) {
    match s {
        Severity::Low => (0.05, 1.2),
        Severity::Medium => (0.10, 2.0),
        Severity::High => (0.20, 5.0),
        Severity::Critical => (0.20, 10.0),
    }
}

/// Severity-and-history floor update. Only settling and overshoot
/// violations count; without them the floor is unchanged.
pub fn update_gamma_floor(specs: &SpecSet, violations: &[Violation], gamma_last: f64, iter: usize) -> f64 {
    let Some(severity) = violations.iter().filter(|v| is_transient(v.kind)).map(|v| v.severity).max() else {
        return specs.hinf_min;
    };
    let (base_ratio, m) = severity_factors(severity);
    let target = specs.hinf.target;
    let base = base_ratio * target;
    let growth = 1.0 + 0.1 * (iter.max(1) - 1).min(5) as f64;
    let hist = if gamma_last.is_finite() { gamma_last * m * growth } else { 0.0 };
    let raised = specs.hinf_min.max(base).max(hist);
    raised.min(specs.floor_cap())
}

/// Adjustment scale of iteration `iter`: small early, large late.
pub fn phase_factor(iter: usize) -> f64 {
    match iter {
        0..=3 => 0.5,
        4..=7 => 1.0,
        _ => 2.0,
    }
}

fn has(violations: &[Violation], kind: ViolationKind) -> bool {
    violations.iter().any(|v| v.kind == kind)
}

/// Deterministic refinement followed by the floor update.
///
/// Overshoot: settling target up, overshoot target down. Rejection: the
/// H-infinity target down, never below `floor / 0.9`. Settling alone: the
/// decay rate up. Magnitudes scale with [`phase_factor`].
pub fn refine_heuristic(specs: &SpecSet, violations: &[Violation], gamma_last: f64, iter: usize) -> AdaptDecision {
    let p = phase_factor(iter);
    let mut s = *specs;
    let mut notes = Vec::new();
    if has(violations, ViolationKind::Overshoot) {
        s.settling_time.target *= 1.0 + SETTLING_RELAX * p;
        s.overshoot.target *= 1.0 - OVERSHOOT_TIGHTEN * p;
        notes.push(format!(
            "overshoot: settling target {:.4} -> {:.4}, overshoot target {:.4} -> {:.4}",
            specs.settling_time.target, s.settling_time.target, specs.overshoot.target, s.overshoot.target
        ));
    } else if has(violations, ViolationKind::SettlingTime) {
        let alpha = specs.alpha() * (1.0 + DECAY_BOOST * p);
        s.decay_rate = Some(alpha);
        notes.push(format!("settling: decay rate {:.4} -> {alpha:.4}", specs.alpha()));
    }
    if has(violations, ViolationKind::Hinf) {
        let lowest = specs.hinf_min / crate::model::FLOOR_CAP_RATIO;
        s.hinf.target = (specs.hinf.target * (1.0 - HINF_TIGHTEN * p)).max(lowest);
        notes.push(format!("rejection: gamma target {:.4} -> {:.4}", specs.hinf.target, s.hinf.target));
    }
    if notes.is_empty() {
        notes.push("no adjustable violation; specs unchanged".into());
    }
    finish(s, violations, gamma_last, iter, notes.join("; "), DecisionSource::Heuristic)
}

fn finish(mut s: SpecSet, violations: &[Violation], gamma_last: f64, iter: usize, rationale: String, source: DecisionSource) -> AdaptDecision {
    s.hinf_min = update_gamma_floor(&s, violations, gamma_last, iter);
    AdaptDecision { gamma_floor_after: s.hinf_min, updated_specs: s, rationale, source }
}

/// Relaxation after an infeasible synthesis: larger H-infinity target, more
/// slack on the lowest-priority time-domain spec (overshoot on ties), floor
/// re-capped.
pub fn relax_on_infeasible(specs: &SpecSet) -> SpecSet {
    let mut s = *specs;
    s.hinf.target *= INFEASIBLE_GAMMA_RELAX;
    if s.settling_time.priority < s.overshoot.priority {
        s.settling_time.slack *= INFEASIBLE_SLACK_RELAX;
    } else {
        s.overshoot.slack *= INFEASIBLE_SLACK_RELAX;
    }
    s.cap_floor();
    s
}

fn feedback_line(v: &Violation) -> String {
    let name = match v.kind {
        ViolationKind::SettlingTime => "settling_time",
        ViolationKind::Overshoot => "overshoot",
        ViolationKind::Hinf => "h_infinity_norm",
        ViolationKind::InfeasibleSynthesis => "infeasible_synthesis",
    };
    let sev = serde_json::to_value(v.severity).ok().and_then(|s| s.as_str().map(str::to_uppercase)).unwrap_or_default();
    format!("  - {name}: Measured {}, target {} [{sev} severity]", v.measured, v.target)
}

/// User message for the adaptation request.
pub fn adaptation_prompt(specs: &SpecSet, violations: &[Violation], memory: &[DesignSummary], iter: usize) -> String {
    let lines: Vec<String> = violations.iter().map(feedback_line).collect();
    let recent = &memory[memory.len().saturating_sub(MEMORY_DIGEST_LEN)..];
    format!(
        "Iteration: {iter}\n\nCurrent specifications:\n{}\n\nViolations:\n{}\n\nRecent designs:\n{}\n\n\
Reply with one JSON object containing an \"updates\" object. Allowed keys: \
\"settling_time\", \"overshoot\", \"h_infinity_norm\" (each with optional \"target\", \"slack\", \"priority\"; \
\"h_infinity_norm\" may also carry \"min\", the gamma floor, which must not decrease) and \"decay_rate\" \
(number or {{\"target\": number}}). Include a short \"rationale\".",
        serde_json::to_string_pretty(specs).unwrap_or_default(),
        lines.join("\n"),
        serde_json::to_string_pretty(recent).unwrap_or_default(),
    )
}

fn num(obj: &Map<String, Value>, key: &str) -> Result<Option<f64>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| format!("{key} is not a number")),
    }
}

/// Applies an `updates` object to `specs`; returns the proposed floor too.
fn apply_updates(specs: &SpecSet, doc: &Value) -> Result<(SpecSet, Option<f64>, String), String> {
    let updates = doc.get("updates").and_then(Value::as_object).ok_or("reply has no \"updates\" object")?;
    let mut s = *specs;
    let mut floor = None;
    for (key, val) in updates {
        match key.as_str() {
            "settling_time" | "overshoot" | "h_infinity_norm" => {
                let obj = val.as_object().ok_or_else(|| format!("{key} update is not an object"))?;
                let entry = match key.as_str() {
                    "settling_time" => &mut s.settling_time,
                    "overshoot" => &mut s.overshoot,
                    _ => &mut s.hinf,
                };
                if let Some(t) = num(obj, "target")? {
                    entry.target = t;
                }
                if let Some(sl) = num(obj, "slack")? {
                    entry.slack = sl;
                }
                if let Some(p) = obj.get("priority") {
                    entry.priority = serde_json::from_value::<Priority>(p.clone()).map_err(|e| format!("{key}.priority: {e}"))?;
                }
                if key == "h_infinity_norm" {
                    floor = num(obj, "min")?;
                }
            }
            "decay_rate" => {
                let v = match val {
                    Value::Object(o) => num(o, "target")?,
                    other => other.as_f64(),
                };
                let v = v.ok_or("decay_rate update has no numeric target")?;
                s.decay_rate = Some(v);
            }
            other => return Err(format!("unknown update key {other:?}")),
        }
    }
    let rationale = doc.get("rationale").and_then(Value::as_str).unwrap_or("model update").to_string();
    Ok((s, floor, rationale))
}

/// Model-assisted refinement. Every update is re-validated and a proposed
/// floor below the current one is rejected; any failure falls back to
/// [`refine_heuristic`]. The floor update runs on the result either way.
pub fn refine_llm(
    specs: &SpecSet,
    violations: &[Violation],
    memory: &[DesignSummary],
    gamma_last: f64,
    iter: usize,
    client: &dyn LlmClient,
) -> AdaptDecision {
    let user = adaptation_prompt(specs, violations, memory, iter);
    let attempt = client
        .complete(SYSTEM_PROMPT, &user)
        .map_err(|e| e.to_string())
        .and_then(|reply| extract_json(&reply).map_err(|e| e.to_string()))
        .and_then(|doc| apply_updates(specs, &doc))
        .and_then(|(mut s, floor, rationale)| {
            if let Some(f) = floor {
                if !(f >= specs.hinf_min) {
                    return Err(format!("proposed floor {f} is below the current floor {}", specs.hinf_min));
                }
                s.hinf_min = f;
            }
            if s.decay_rate.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
                return Err("decay rate must be finite and >= 0".into());
            }
            if s.hinf_min > s.floor_cap() {
                return Err(format!("floor {} exceeds 0.9 x target {}", s.hinf_min, s.hinf.target));
            }
            s.validate().map_err(|e| e.to_string())?;
            Ok((s, rationale))
        });
    match attempt {
        Ok((s, rationale)) => finish(s, violations, gamma_last, iter, rationale, DecisionSource::Llm),
        Err(reason) => {
            log::info!("adaptation falls back to heuristic: {reason}");
            let mut d = refine_heuristic(specs, violations, gamma_last, iter);
            d.rationale = format!("model update rejected ({reason}); {}", d.rationale);
            d
        }
    }
}

/// Refinement strategy used by the design loop.
pub struct Adapter<'a> {
    pub client: Option<&'a dyn LlmClient>,
    /// When false the floor stays at its initial value.
    pub floor_enabled: bool,
}

impl Adapter<'_> {
    pub fn refine(
        &self,
        specs: &SpecSet,
        violations: &[Violation],
        memory: &[DesignSummary],
        gamma_last: f64,
        iter: usize,
    ) -> AdaptDecision {
        let mut d = match self.client {
            Some(c) => refine_llm(specs, violations, memory, gamma_last, iter, c),
            None => refine_heuristic(specs, violations, gamma_last, iter),
        };
        if !self.floor_enabled {
            d.updated_specs.hinf_min = specs.hinf_min.min(d.updated_specs.floor_cap());
            d.gamma_floor_after = d.updated_specs.hinf_min;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LlmError;
    use crate::model::SpecEntry;
    use proptest::prelude::*;

    fn specs(gt: f64, floor: f64) -> SpecSet {
        SpecSet {
            hinf: SpecEntry::new(gt, 2.0, Priority::High),
            hinf_min: floor,
            settling_time: SpecEntry::new(16.0, 2.0, Priority::Medium),
            overshoot: SpecEntry::new(0.1, 0.05, Priority::High),
            decay_rate: None,
        }
    }

    fn viol(kind: ViolationKind, severity: Severity) -> Violation {
        Violation { kind, measured: 1.0, target: 1.0, severity }
    }

    #[test]
    fn critical_overshoot_floor() {
        let v = [viol(ViolationKind::Overshoot, Severity::Critical)];
        assert_eq!(update_gamma_floor(&specs(20.0, 0.0), &v, 14.64, 1), 18.0);
    }

    #[test]
    fn low_severity_floor() {
        let v = [viol(ViolationKind::SettlingTime, Severity::Low)];
        let f = update_gamma_floor(&specs(20.0, 0.0), &v, 1.0, 1);
        assert!((f - 1.2).abs() < 1e-15);
    }

    #[test]
    fn iteration_factor_saturates() {
        let v = [viol(ViolationKind::SettlingTime, Severity::Low)];
        let s = specs(1000.0, 0.0);
        let f6 = update_gamma_floor(&s, &v, 1.0, 6);
        assert_eq!(f6, update_gamma_floor(&s, &v, 1.0, 7));
        assert!((f6 - 50.0).abs() < 1e-12);
        assert!(update_gamma_floor(&s, &v, 100.0, 5) < update_gamma_floor(&s, &v, 100.0, 6));
    }

    #[test]
    fn hinf_only_leaves_floor() {
        let v = [viol(ViolationKind::Hinf, Severity::Critical)];
        assert_eq!(update_gamma_floor(&specs(20.0, 3.0), &v, 14.0, 2), 3.0);
    }

    #[test]
    fn heuristic_overshoot_iteration_three() {
        let v = [viol(ViolationKind::Overshoot, Severity::Critical), viol(ViolationKind::SettlingTime, Severity::Low)];
        let d = refine_heuristic(&specs(20.0, 18.0), &v, 18.0, 3);
        assert!((d.updated_specs.settling_time.target - 17.4).abs() < 1e-12);
        assert!((d.updated_specs.overshoot.target - 0.1 * (1.0 - 0.0375)).abs() < 1e-15);
        assert_eq!(d.gamma_floor_after, 18.0);
        assert_eq!(d.source, DecisionSource::Heuristic);
    }

    #[test]
    fn heuristic_hinf_aggressive() {
        let v = [viol(ViolationKind::Hinf, Severity::High)];
        let d = refine_heuristic(&specs(20.0, 0.0), &v, 5.0, 9);
        assert_eq!(d.updated_specs.hinf.target, 15.0);
        let d = refine_heuristic(&specs(20.0, 17.1), &v, 5.0, 9);
        assert!((d.updated_specs.hinf.target - 19.0).abs() < 1e-12);
        assert!(d.gamma_floor_after <= d.updated_specs.floor_cap() + 1e-12);
    }

    #[test]
    fn heuristic_settling_only_raises_decay() {
        let v = [viol(ViolationKind::SettlingTime, Severity::Medium)];
        let d = refine_heuristic(&specs(20.0, 0.0), &v, 5.0, 5);
        assert!((d.updated_specs.decay_rate.unwrap() - 0.24375 * 1.1).abs() < 1e-12);
    }

    #[test]
    fn relax_infeasible() {
        let mut s = specs(20.0, 18.0);
        s.settling_time.priority = Priority::High;
        s.overshoot.priority = Priority::Low;
        let r = relax_on_infeasible(&s);
        assert_eq!(r.hinf.target, 25.0);
        assert_eq!(r.hinf_min, 18.0);
        assert_eq!(r.overshoot.slack, 0.05 * 1.5);
        assert_eq!(r.settling_time.slack, 2.0);
    }

    struct Canned(Result<String, LlmError>);

    impl LlmClient for Canned {
        fn complete(&self, _s: &str, _u: &str) -> Result<String, LlmError> {
            self.0.clone()
        }
    }

    #[test]
    fn llm_update_adopted() {
        let reply = r#"{
  "diagnosis": {"severity": "major"},
  "updates": {
    "settling_time": {"target": 17.0, "rationale": "Relax further"},
    "h_infinity_norm": {"min": 18.0, "rationale": "Maintain floor"}
  },
  "strategy": {"approach": "trade_off", "confidence": "medium"}
}"#;
        let v = [viol(ViolationKind::Overshoot, Severity::Critical)];
        let d = refine_llm(&specs(20.0, 18.0), &v, &[], 18.0, 3, &Canned(Ok(reply.into())));
        assert_eq!(d.source, DecisionSource::Llm);
        assert_eq!(d.updated_specs.settling_time.target, 17.0);
        assert_eq!(d.gamma_floor_after, 18.0);
    }

    #[test]
    fn llm_lowering_floor_rejected() {
        let reply = r#"{"updates": {"h_infinity_norm": {"min": 5.0}}}"#;
        let v = [viol(ViolationKind::Overshoot, Severity::Critical)];
        let d = refine_llm(&specs(20.0, 18.0), &v, &[], 18.0, 3, &Canned(Ok(reply.into())));
        assert_eq!(d.source, DecisionSource::Heuristic);
        assert_eq!(d.gamma_floor_after, 18.0);
    }

    #[test]
    fn llm_timeout_falls_back() {
        let v = [viol(ViolationKind::Overshoot, Severity::High)];
        let d = refine_llm(&specs(20.0, 0.0), &v, &[], 10.0, 1, &Canned(Err(LlmError::Unavailable("timeout".into()))));
        assert_eq!(d.source, DecisionSource::Heuristic);
    }

    #[test]
    fn disabled_floor_stays_put() {
        let a = Adapter { client: None, floor_enabled: false };
        let v = [viol(ViolationKind::Overshoot, Severity::Critical)];
        let d = a.refine(&specs(20.0, 0.0), &v, &[], 14.64, 1);
        assert_eq!(d.gamma_floor_after, 0.0);
    }

    fn severity() -> impl Strategy<Value = Severity> {
        prop_oneof![Just(Severity::Low), Just(Severity::Medium), Just(Severity::High), Just(Severity::Critical)]
    }

    fn kind() -> impl Strategy<Value = ViolationKind> {
        prop_oneof![
            Just(ViolationKind::SettlingTime),
            Just(ViolationKind::Overshoot),
            Just(ViolationKind::Hinf),
            Just(ViolationKind::InfeasibleSynthesis)
        ]
    }

    proptest! {
        #[test]
        fn floor_is_order_independent(vs in prop::collection::vec((kind(), severity()), 1..5), g in 0.0f64..50.0, it in 1usize..12) {
            let v: Vec<Violation> = vs.iter().map(|(k, s)| viol(*k, *s)).collect();
            let mut r = v.clone();
            r.reverse();
            let s = specs(20.0, 1.0);
            prop_assert_eq!(update_gamma_floor(&s, &v, g, it), update_gamma_floor(&s, &r, g, it));
        }

        #[test]
        fn heuristic_sequences_keep_floor_monotone(steps in prop::collection::vec((prop::collection::vec((kind(), severity()), 1..4), 0.0f64..40.0, any::<bool>()), 1..12)) {
            let mut s = specs(20.0, 0.0);
            for (i, (vs, g, infeasible)) in steps.iter().enumerate() {
                let before = s.hinf_min;
                if *infeasible {
                    s = relax_on_infeasible(&s);
                } else {
                    let v: Vec<Violation> = vs.iter().map(|(k, sv)| viol(*k, *sv)).collect();
                    s = refine_heuristic(&s, &v, *g, i + 1).updated_specs;
                }
                prop_assert!(s.hinf_min >= before);
                prop_assert!(s.hinf_min <= s.floor_cap() + 1e-12);
                prop_assert!(s.validate().is_ok());
            }
        }
    }
}
