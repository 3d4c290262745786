use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const BUILTIN_RULES: &str = include_str!("../../assets/tool_rules.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolCategory {
    Crop,
    ZoomOrContrast,
    NumericalAnalysis,
    Segmentation,
    RenderMarks,
    FetchFramesAndPlot,
    NoOperation,
    Other,
}

impl ToolCategory {
    pub const ALL: [ToolCategory; 8] = [
        ToolCategory::Crop,
        ToolCategory::ZoomOrContrast,
        ToolCategory::NumericalAnalysis,
        ToolCategory::Segmentation,
        ToolCategory::RenderMarks,
        ToolCategory::FetchFramesAndPlot,
        ToolCategory::NoOperation,
        ToolCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToolCategory::Crop => "crop",
            ToolCategory::ZoomOrContrast => "zoom_or_contrast",
            ToolCategory::NumericalAnalysis => "numerical_analysis",
            ToolCategory::Segmentation => "segmentation",
            ToolCategory::RenderMarks => "render_marks",
            ToolCategory::FetchFramesAndPlot => "fetch_frames_and_plot",
            ToolCategory::NoOperation => "no_operation",
            ToolCategory::Other => "other",
        }
    }
}

impl fmt::Display for ToolCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleSpec {
    category: ToolCategory,
    #[serde(default)]
    note: String,
    /// Every pattern must match.
    #[serde(default)]
    all: Vec<String>,
    /// At least one pattern must match, when nonempty.
    #[serde(default)]
    any: Vec<String>,
    /// No pattern may match.
    #[serde(default)]
    none: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleFile {
    version: u32,
    rules: Vec<RuleSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rule file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule file: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule {index} ({category}): {reason}")]
    Invalid {
        index: usize,
        category: ToolCategory,
        reason: String,
    },
}

#[derive(Debug, Clone)]
struct Rule {
    category: ToolCategory,
    all: Vec<Regex>,
    any: Vec<Regex>,
    none: Vec<Regex>,
}

impl Rule {
    fn matches(&self, code: &str) -> bool {
        self.all.iter().all(|r| r.is_match(code))
            && (self.any.is_empty() || self.any.iter().any(|r| r.is_match(code)))
            && !self.none.iter().any(|r| r.is_match(code))
    }
}

/// Ordered classification rules; the first matching rule decides and code
/// matching none is `other`.
#[derive(Debug, Clone)]
pub struct ToolRules {
    rules: Vec<Rule>,
}

impl ToolRules {
    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let file: RuleFile = serde_json::from_str(text)?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for (index, spec) in file.rules.into_iter().enumerate() {
            let invalid = |reason: String| RuleError::Invalid {
                index,
                category: spec.category,
                reason,
            };
            if spec.all.is_empty() && spec.any.is_empty() {
                return Err(invalid("needs at least one `all` or `any` pattern".into()));
            }
            let compile = |pats: &[String]| -> Result<Vec<Regex>, RuleError> {
                pats.iter()
                    .map(|p| Regex::new(p).map_err(|e| invalid(e.to_string())))
                    .collect()
            };
            rules.push(Rule {
                category: spec.category,
                all: compile(&spec.all)?,
                any: compile(&spec.any)?,
                none: compile(&spec.none)?,
            });
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self, RuleError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn builtin() -> &'static ToolRules {
        static RULES: OnceLock<ToolRules> = OnceLock::new();
        RULES.get_or_init(|| ToolRules::from_json(BUILTIN_RULES).expect("shipped rule table is valid"))
    }

    pub fn classify(&self, code: &str) -> ToolCategory {
        self.rules
            .iter()
            .find(|r| r.matches(code))
            .map_or(ToolCategory::Other, |r| r.category)
    }
}

/// Classifies with the shipped rule table.
pub fn classify_tool_category(code: &str) -> ToolCategory {
    ToolRules::builtin().classify(code)
}
