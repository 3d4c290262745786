//! Answer verification and the tool-aware reward.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::protocol::{Status, TaskKind, Trajectory};

/// How a predicted answer is compared with the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Choice,
    Numeric,
    Exact,
}

impl VerifierKind {
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::MultipleChoice => VerifierKind::Choice,
            TaskKind::Numeric => VerifierKind::Numeric,
            TaskKind::FreeText => VerifierKind::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierMap {
    pub multiple_choice: VerifierKind,
    pub numeric: VerifierKind,
    pub free_text: VerifierKind,
}

impl Default for VerifierMap {
    fn default() -> Self {
        Self {
            multiple_choice: VerifierKind::Choice,
            numeric: VerifierKind::Numeric,
            free_text: VerifierKind::Exact,
        }
    }
}

impl VerifierMap {
    pub fn get(&self, kind: TaskKind) -> VerifierKind {
        match kind {
            TaskKind::MultipleChoice => self.multiple_choice,
            TaskKind::Numeric => self.numeric,
            TaskKind::FreeText => self.free_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Bonus per tool call on correct rollouts; 0 disables it.
    pub tool_coef: f64,
    pub verifiers: VerifierMap,
    pub numeric_rel_tol: f64,
    /// Used instead of the relative test when both values are this close to zero.
    pub numeric_abs_tol: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tool_coef: 0.1,
            verifiers: VerifierMap::default(),
            numeric_rel_tol: 1e-2,
            numeric_abs_tol: 1e-6,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.tool_coef >= 0.0) || !self.tool_coef.is_finite() {
            return Err(("tool_coef", "must be finite and >= 0".into()));
        }
        if !(self.numeric_rel_tol >= 0.0) {
            return Err(("numeric_rel_tol", "must be >= 0".into()));
        }
        if !(self.numeric_abs_tol >= 0.0) {
            return Err(("numeric_abs_tol", "must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_acc: u8,
    pub n_tc: u32,
    pub tool_bonus: f64,
    pub total: f64,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("trajectory {0} is broken and cannot be scored")]
    Broken(String),
}

/// `r_acc + coef·n_tc` when correct, `0` otherwise.
pub fn compute_reward(r_acc: u8, n_tc: u32, coef: f64) -> RewardRecord {
    assert!(r_acc <= 1, "r_acc must be 0 or 1, got {r_acc}");
    let tool_bonus = if r_acc == 1 { coef * n_tc as f64 } else { 0.0 };
    RewardRecord {
        r_acc,
        n_tc,
        tool_bonus,
        total: r_acc as f64 + tool_bonus,
    }
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (a, b) in [('"', '"'), ('\'', '\''), ('`', '`'), ('\u{201c}', '\u{201d}')] {
        if s.len() >= 2 && s.starts_with(a) && s.ends_with(b) {
            return s[a.len_utf8()..s.len() - b.len_utf8()].trim();
        }
    }
    s
}

fn choice_letter(s: &str) -> Option<char> {
    static OPTION: OnceLock<Regex> = OnceLock::new();
    let re = OPTION.get_or_init(|| {
        Regex::new(r"^(?i:option\s+)?[(\[]?([A-Za-z])(?:[)\].:]|\s|$)").unwrap()
    });
    re.captures(s.trim())
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

fn verify_choice(pred: &str, gold: &str) -> bool {
    let clean = |s: &str| -> String {
        s.chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect()
    };
    let (p, g) = (clean(pred), clean(gold));
    if !p.is_empty() && p == g {
        return true;
    }
    // "(B) the red car" against "B"
    match (choice_letter(pred), g.len()) {
        (Some(l), 1) => g.starts_with(l.to_ascii_lowercase()),
        _ => false,
    }
}

/// Leading number of `s` after dropping currency signs, thousands separators
/// and any unit suffix. `None` when no number leads the text.
pub fn parse_numeric(s: &str) -> Option<f64> {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let re = NUM.get_or_init(|| {
        Regex::new(r"^[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?(?:\s*/\s*\d+(?:\.\d*)?)?").unwrap()
    });
    let s: String = strip_quotes(s)
        .trim()
        .trim_start_matches(['$', '€', '£', '~', '≈'])
        .chars()
        .filter(|c| *c != ',')
        .collect();
    let s = s.trim_start();
    let m = re.find(s)?;
    let text = m.as_str();
    let value = match text.split_once('/') {
        Some((n, d)) => {
            let d: f64 = d.trim().parse().ok()?;
            if d == 0.0 {
                return None;
            }
            n.trim().parse::<f64>().ok()? / d
        }
        None => text.parse().ok()?,
    };
    let rest = s[m.end()..].trim();
    // A trailing digit run would mean the number was cut mid-token.
    if rest.starts_with(|c: char| c.is_ascii_digit()) {
        return None;
    }
    value.is_finite().then_some(value)
}

fn verify_numeric(pred: &str, gold: &str, cfg: &RewardConfig) -> bool {
    let (Some(p), Some(g)) = (parse_numeric(pred), parse_numeric(gold)) else {
        return false;
    };
    let diff = (p - g).abs();
    if p.abs().max(g.abs()) <= cfg.numeric_abs_tol {
        return diff <= cfg.numeric_abs_tol;
    }
    diff <= cfg.numeric_rel_tol * p.abs().max(g.abs())
}

/// Lowercase, collapse whitespace, drop one trailing period.
pub fn normalize_text(s: &str) -> String {
    let s = strip_quotes(s).to_lowercase();
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ");
    joined.strip_suffix('.').unwrap_or(&joined).trim_end().to_owned()
}

/// 1 when `pred` matches `gold` under the verifier configured for `kind`.
pub fn verify_answer(pred: &str, gold: &str, kind: TaskKind, cfg: &RewardConfig) -> u8 {
    let pred = strip_quotes(pred);
    let ok = match cfg.verifiers.get(kind) {
        VerifierKind::Choice => verify_choice(pred, gold),
        VerifierKind::Numeric => verify_numeric(pred, gold, cfg),
        VerifierKind::Exact => normalize_text(pred) == normalize_text(gold),
    };
    ok as u8
}

/// Scores a finished trajectory. Unanswered trajectories score 0.
pub fn score_trajectory(
    t: &Trajectory,
    gold: &str,
    kind: TaskKind,
    cfg: &RewardConfig,
) -> Result<RewardRecord, RewardError> {
    let r_acc = match t.status() {
        Status::Broken(_) => return Err(RewardError::Broken(t.id().to_owned())),
        Status::Unanswered => 0,
        Status::Completed => t
            .final_answer()
            .map(|a| verify_answer(a, gold, kind, cfg))
            .unwrap_or(0),
    };
    Ok(compute_reward(r_acc, t.n_tc(), cfg.tool_coef))
}
