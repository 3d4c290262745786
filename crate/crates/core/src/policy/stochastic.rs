use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EpisodeTag, Generation, GenerationParams, Policy, PolicyError, PolicyMessage};
use crate::protocol::{Modality, PromptSample};
use crate::rng;

/// Probability of a correct answer after `n` tool calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectnessCurve {
    Constant { p: f64 },
    /// `clamp(base + slope·n, 0, 1)`.
    Linear { base: f64, slope: f64 },
    /// `p[n]`, with the last entry extending to larger `n`.
    Table { p: Vec<f64> },
}

impl CorrectnessCurve {
    pub fn p(&self, n: u32) -> f64 {
        match self {
            CorrectnessCurve::Constant { p } => *p,
            CorrectnessCurve::Linear { base, slope } => (base + slope * n as f64).clamp(0.0, 1.0),
            CorrectnessCurve::Table { p } => p
                .get(n as usize)
                .or(p.last())
                .copied()
                .unwrap_or(0.0),
        }
    }
}

/// Distribution of the number of code turns a mock episode plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnDistribution {
    Fixed { n: u32 },
    /// Inclusive on both ends.
    Uniform { min: u32, max: u32 },
    /// Unnormalized weights for `n = 0, 1, 2, ...`.
    Weights { w: Vec<f64> },
}

impl TurnDistribution {
    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match self {
            TurnDistribution::Fixed { n } => *n,
            TurnDistribution::Uniform { min, max } => rng.random_range(*min..=*max.max(min)),
            TurnDistribution::Weights { w } => {
                let total: f64 = w.iter().sum();
                let mut x = rng.random::<f64>() * total;
                for (n, wi) in w.iter().enumerate() {
                    if x < *wi {
                        return n as u32;
                    }
                    x -= wi;
                }
                w.len().saturating_sub(1) as u32
            }
        }
    }

    fn max(&self) -> u32 {
        match self {
            TurnDistribution::Fixed { n } => *n,
            TurnDistribution::Uniform { min, max } => *max.max(min),
            TurnDistribution::Weights { w } => w.len().saturating_sub(1) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StochasticSpec {
    pub curve: CorrectnessCurve,
    pub turns: TurnDistribution,
    /// Wrong answers are drawn from the entries that differ from the gold answer.
    pub answer_pool: Vec<String>,
}

impl Default for StochasticSpec {
    fn default() -> Self {
        Self {
            curve: CorrectnessCurve::Linear {
                base: 0.2,
                slope: 0.2,
            },
            turns: TurnDistribution::Uniform { min: 0, max: 4 },
            answer_pool: ["A", "B", "C", "D", "0", "1", "2", "3"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl StochasticSpec {
    pub fn validate(&self, max_turns: u32) -> Result<(), String> {
        let hi = max_turns.max(self.turns.max());
        for n in 0..=hi {
            let p = self.curve.p(n);
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("curve p({n}) = {p} is outside [0, 1]"));
            }
        }
        match &self.turns {
            TurnDistribution::Weights { w } if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 => {
                Err("turn weights must be nonnegative with a positive sum".into())
            }
            TurnDistribution::Uniform { min, max } if min > max => Err("turns.min > turns.max".into()),
            _ if self.answer_pool.is_empty() => Err("answer_pool is empty".into()),
            _ => Ok(()),
        }
    }
}

/// Plans each episode from a seeded stream: `n` code turns, then an answer
/// that is correct with probability `p(n)`.
///
/// Stateless: call `k` of an episode is a pure function of the run seed, the
/// sample id, the rollout index and `k`.
#[derive(Debug, Clone)]
pub struct StochasticMock {
    spec: StochasticSpec,
    golds: HashMap<String, String>,
}

/// What one mock episode will do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePlan {
    pub code_turns: u32,
    pub answer: String,
    pub correct: bool,
}

impl StochasticMock {
    pub fn new(spec: StochasticSpec, golds: HashMap<String, String>) -> Self {
        Self { spec, golds }
    }

    pub fn for_samples(spec: StochasticSpec, samples: &[PromptSample]) -> Self {
        let golds = samples
            .iter()
            .map(|s| (s.id.clone(), s.gold_answer.clone()))
            .collect();
        Self::new(spec, golds)
    }

    pub fn spec(&self) -> &StochasticSpec {
        &self.spec
    }

    pub fn plan(&self, seed: u64, sample_id: &str, rollout: u32) -> Result<EpisodePlan, PolicyError> {
        let gold = self
            .golds
            .get(sample_id)
            .ok_or_else(|| PolicyError::InvalidRequest(format!("no gold answer for {sample_id}")))?;
        let mut r = rng::stream(seed, sample_id, rollout as u64);
        let n = self.spec.turns.sample(&mut r);
        let correct = r.random::<f64>() < self.spec.curve.p(n);
        let answer = if correct {
            gold.clone()
        } else {
            let wrong: Vec<&String> = self
                .spec
                .answer_pool
                .iter()
                .filter(|a| a.trim() != gold.trim())
                .collect();
            if wrong.is_empty() {
                format!("not {gold}")
            } else {
                wrong[r.random_range(0..wrong.len())].clone()
            }
        };
        Ok(EpisodePlan {
            code_turns: n,
            answer,
            correct,
        })
    }
}

fn code_turn(modality: Modality, k: u32) -> String {
    match modality {
        Modality::Image => {
            let x = (k % 4) * 112;
            format!(
                "Zooming into region {k} to inspect details.\n<code>\nimport matplotlib.pyplot as plt\ncrop = image_clue_0.crop(({x}, {x}, {}, {}))\nplt.imshow(crop)\nplt.axis('off')\nplt.show()\n</code>",
                x + 224,
                x + 224
            )
        }
        Modality::Video => format!(
            "Sampling a frame to check the scene.\n<code>\nimport matplotlib.pyplot as plt\nframe = video_clue_0[{}]\nplt.imshow(frame.asnumpy())\nplt.axis('off')\nplt.show()\n</code>",
            k * 10
        ),
    }
}

impl Policy for StochasticMock {
    fn generate(
        &self,
        _messages: &[PolicyMessage],
        params: &GenerationParams,
        episode: &EpisodeTag,
    ) -> Result<Generation, PolicyError> {
        let plan = self.plan(params.seed, &episode.sample_id, episode.rollout_index)?;
        let text = if episode.call_index < plan.code_turns {
            code_turn(episode.modality, episode.call_index)
        } else {
            format!(
                "Based on the evidence gathered, I can answer.\n<answer>\n\\boxed{{{}}}\n</answer>",
                plan.answer
            )
        };
        Ok(Generation::from_text(text, &params.stop))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_model_output;

    fn mock(spec: StochasticSpec) -> StochasticMock {
        StochasticMock::new(spec, HashMap::from([("s".to_string(), "C".to_string())]))
    }

    fn tag(rollout: u32, call: u32) -> EpisodeTag {
        EpisodeTag {
            sample_id: "s".into(),
            rollout_index: rollout,
            modality: Modality::Image,
            call_index: call,
        }
    }

    #[test]
    fn curves() {
        let lin = CorrectnessCurve::Linear { base: 0.2, slope: 0.2 };
        assert_eq!(lin.p(0), 0.2);
        assert_eq!(lin.p(10), 1.0);
        let t = CorrectnessCurve::Table { p: vec![0.1, 0.5] };
        assert_eq!((t.p(0), t.p(1), t.p(7)), (0.1, 0.5, 0.5));
    }

    #[test]
    fn always_correct_fixed_turns() {
        let m = mock(StochasticSpec {
            curve: CorrectnessCurve::Constant { p: 1.0 },
            turns: TurnDistribution::Fixed { n: 2 },
            ..StochasticSpec::default()
        });
        let params = GenerationParams::default();
        for r in 0..20 {
            for k in 0..2 {
                let g = m.generate(&[], &params, &tag(r, k)).unwrap();
                assert!(parse_model_output(&g.text).unwrap().needs_execution);
            }
            let g = m.generate(&[], &params, &tag(r, 2)).unwrap();
            assert_eq!(parse_model_output(&g.text).unwrap().answer(), Some("C"));
        }
    }

    #[test]
    fn never_correct() {
        let m = mock(StochasticSpec {
            curve: CorrectnessCurve::Constant { p: 0.0 },
            ..StochasticSpec::default()
        });
        for r in 0..50 {
            let plan = m.plan(3, "s", r).unwrap();
            assert!(!plan.correct);
            assert_ne!(plan.answer, "C");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let m = mock(StochasticSpec::default());
        let params = GenerationParams {
            seed: 11,
            ..GenerationParams::default()
        };
        let a = m.generate(&[], &params, &tag(4, 1)).unwrap();
        let b = m.generate(&[], &params, &tag(4, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_sample_rejected() {
        let m = StochasticMock::new(StochasticSpec::default(), HashMap::new());
        assert!(m.generate(&[], &GenerationParams::default(), &tag(0, 0)).is_err());
    }

    #[test]
    fn validation() {
        assert!(StochasticSpec::default().validate(4).is_ok());
        let bad = StochasticSpec {
            curve: CorrectnessCurve::Linear { base: 0.5, slope: -1.0 },
            ..StochasticSpec::default()
        };
        // clamped, still valid
        assert!(bad.validate(4).is_ok());
        let bad = StochasticSpec {
            curve: CorrectnessCurve::Table { p: vec![1.5] },
            ..StochasticSpec::default()
        };
        assert!(bad.validate(4).is_err());
    }
}
