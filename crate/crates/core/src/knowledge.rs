//! The set of frozen past-task functions, subset selection for relaxed
//! matching, and per-sample loss assembly.
//!
//! Task numbers are 1-based throughout this module: snapshot `i` is the
//! function frozen after finishing task `i`.

use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FunctionSnapshot, LossSpec};
use crate::numerics::ProbVector;

/// Append-only list of past-task functions with strictly nested class coverage.
#[derive(Debug, Clone, Default)]
pub struct FunctionSet {
    snapshots: Vec<FunctionSnapshot>,
}

impl FunctionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, snapshot: FunctionSnapshot) -> Result<()> {
        let covered = snapshot.covered_classes();
        if covered.start != 0 {
            return Err(Error::Sequencing(format!(
                "snapshot coverage must start at class 0, got {covered:?}"
            )));
        }
        if let Some(prev) = self.snapshots.last() {
            if covered.end <= prev.covered_classes().end {
                return Err(Error::Sequencing(format!(
                    "snapshot coverage {covered:?} does not extend {:?}",
                    prev.covered_classes()
                )));
            }
        }
        self.snapshots.push(snapshot);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Snapshot frozen after `task` (1-based).
    pub fn get(&self, task: usize) -> Result<&FunctionSnapshot> {
        task.checked_sub(1)
            .and_then(|i| self.snapshots.get(i))
            .ok_or(Error::Index {
                index: task,
                len: self.snapshots.len(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &FunctionSnapshot> {
        self.snapshots.iter()
    }
}

/// Which past functions the current task matches against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "SchemeRepr")]
pub enum MatchingScheme {
    /// Every previous function.
    Strong,
    /// The most recent function plus the first `fraction` of the earlier ones.
    Scheme1PrefixPlusLast { fraction: f64 },
    /// Only the first `fraction` of the previous functions (at least one).
    Scheme2PrefixOnly { fraction: f64 },
    /// Functions `1, 1 + step, 1 + 2 step, ...`.
    Scheme3Interval { step: usize },
    /// `count` functions drawn without replacement, reseeded per task.
    Scheme4Random { count: usize, seed: u64 },
    /// Only the most recent function (classic LwF).
    SingleShotLast,
    /// A single fixed function, if it exists yet.
    SingleFunction { index: usize },
    /// No matching at all.
    NonePlainSgd,
}

// Unit variants of an internally tagged enum swallow unknown keys, so
// deserialization goes through empty struct variants instead.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SchemeRepr {
    Strong {},
    #[serde(alias = "scheme1")]
    Scheme1PrefixPlusLast {
        fraction: f64,
    },
    #[serde(alias = "scheme2")]
    Scheme2PrefixOnly {
        fraction: f64,
    },
    #[serde(alias = "scheme3")]
    Scheme3Interval {
        step: usize,
    },
    #[serde(alias = "scheme4")]
    Scheme4Random {
        count: usize,
        seed: u64,
    },
    #[serde(alias = "lwf")]
    SingleShotLast {},
    SingleFunction {
        index: usize,
    },
    #[serde(alias = "plain_sgd", alias = "none")]
    NonePlainSgd {},
}

impl From<SchemeRepr> for MatchingScheme {
    fn from(r: SchemeRepr) -> Self {
        match r {
            SchemeRepr::Strong {} => MatchingScheme::Strong,
            SchemeRepr::Scheme1PrefixPlusLast { fraction } => {
                MatchingScheme::Scheme1PrefixPlusLast { fraction }
            }
            SchemeRepr::Scheme2PrefixOnly { fraction } => {
                MatchingScheme::Scheme2PrefixOnly { fraction }
            }
            SchemeRepr::Scheme3Interval { step } => MatchingScheme::Scheme3Interval { step },
            SchemeRepr::Scheme4Random { count, seed } => {
                MatchingScheme::Scheme4Random { count, seed }
            }
            SchemeRepr::SingleShotLast {} => MatchingScheme::SingleShotLast,
            SchemeRepr::SingleFunction { index } => MatchingScheme::SingleFunction { index },
            SchemeRepr::NonePlainSgd {} => MatchingScheme::NonePlainSgd,
        }
    }
}

impl MatchingScheme {
    pub fn name(&self) -> String {
        match self {
            MatchingScheme::Strong => "strong".into(),
            MatchingScheme::Scheme1PrefixPlusLast { fraction } => format!("scheme1({fraction})"),
            MatchingScheme::Scheme2PrefixOnly { fraction } => format!("scheme2({fraction})"),
            MatchingScheme::Scheme3Interval { step } => format!("scheme3({step})"),
            MatchingScheme::Scheme4Random { count, seed } => format!("scheme4({count},{seed})"),
            MatchingScheme::SingleShotLast => "single_shot_last".into(),
            MatchingScheme::SingleFunction { index } => format!("single_function({index})"),
            MatchingScheme::NonePlainSgd => "none_plain_sgd".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let path = "scheme";
        match *self {
            MatchingScheme::Scheme1PrefixPlusLast { fraction }
            | MatchingScheme::Scheme2PrefixOnly { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::config(
                        format!("{path}.fraction"),
                        format!("{fraction} is outside the range (0, 1]"),
                    ));
                }
            }
            MatchingScheme::Scheme3Interval { step } if step < 2 => {
                return Err(Error::config(
                    format!("{path}.step"),
                    format!("{step} must be at least 2"),
                ));
            }
            MatchingScheme::Scheme4Random { count, .. } if count < 1 => {
                return Err(Error::config(format!("{path}.count"), "must be at least 1"));
            }
            MatchingScheme::SingleFunction { index } if index < 1 => {
                return Err(Error::config(
                    format!("{path}.index"),
                    "task numbers start at 1",
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Selected task numbers at task `t`, sorted and without duplicates.
    pub fn subset_for(&self, t: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if *self == MatchingScheme::NonePlainSgd {
            return Ok(Vec::new());
        }
        if t < 2 {
            return Err(Error::Sequencing(format!(
                "scheme {} needs at least one previous task, current task is {t}",
                self.name()
            )));
        }
        let previous = t - 1;
        let subset = match *self {
            MatchingScheme::Strong => (1..=previous).collect(),
            MatchingScheme::Scheme1PrefixPlusLast { fraction } => {
                let prefix = (fraction * (t - 2) as f64).floor() as usize;
                let mut s: Vec<usize> = (1..=prefix).collect();
                s.push(previous);
                s.dedup();
                s
            }
            MatchingScheme::Scheme2PrefixOnly { fraction } => {
                let prefix = ((fraction * previous as f64).floor() as usize).max(1);
                (1..=prefix).collect()
            }
            MatchingScheme::Scheme3Interval { step } => (1..=previous).step_by(step).collect(),
            MatchingScheme::Scheme4Random { count, seed } => {
                if count >= previous {
                    (1..=previous).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(t as u64);
                    let mut s: Vec<usize> = index::sample(&mut rng, previous, count)
                        .into_iter()
                        .map(|i| i + 1)
                        .collect();
                    s.sort_unstable();
                    s
                }
            }
            MatchingScheme::SingleShotLast => vec![previous],
            MatchingScheme::SingleFunction { index } => {
                if index <= previous {
                    vec![index]
                } else {
                    Vec::new()
                }
            }
            MatchingScheme::NonePlainSgd => unreachable!(),
        };
        Ok(subset)
    }
}

/// Selects the matching subset at task `t` from a set holding `t - 1` snapshots.
pub fn select_subset(set: &FunctionSet, scheme: &MatchingScheme, t: usize) -> Result<Vec<usize>> {
    if set.len() + 1 != t {
        return Err(Error::Sequencing(format!(
            "function set holds {} snapshots at task {t}",
            set.len()
        )));
    }
    scheme.subset_for(t)
}

/// Total number of function matchings performed over a run of `total_tasks`.
pub fn total_matching_count(scheme: &MatchingScheme, total_tasks: usize) -> Result<usize> {
    if total_tasks < 2 {
        return Err(Error::Sequencing(
            "matching count needs at least two tasks".into(),
        ));
    }
    (2..=total_tasks).try_fold(0, |acc, t| Ok(acc + scheme.subset_for(t)?.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of each KL term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Softmax temperature shared by teacher targets and student outputs.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Divide each KL weight by the subset size.
    #[serde(default)]
    pub normalize_kl: bool,
    #[serde(default)]
    pub kl_support: KlSupport,
}

/// Class support of each matching term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSupport {
    /// Teacher and student distributions both span the teacher's covered classes.
    Covered,
    /// The student spans every class seen so far; the teacher target is
    /// embedded with zero mass on classes it never covered.
    #[default]
    Seen,
    /// Both span every class seen so far, using the teacher's own logits.
    Full,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    2.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: default_lambda(),
            temperature: default_temperature(),
            normalize_kl: false,
            kl_support: KlSupport::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    NewTaskCe,
    MatchKl,
}

/// One summand of the per-sample objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossComponent {
    pub kind: ComponentKind,
    /// Task number of the matched snapshot, for KL terms.
    pub target_snapshot: Option<usize>,
    pub class_range: Range<usize>,
    pub weight: f64,
    pub loss: LossSpec,
}

/// Assembles `[CE, KL_i for i in subset]` for one sample of task `t`.
///
/// `task_classes` is the output range owned by task `t`; the CE term spans
/// every class seen so far, `0..task_classes.end`.
pub fn build_losses(
    set: &FunctionSet,
    subset: &[usize],
    x: &[f64],
    label: usize,
    task_classes: Range<usize>,
    weights: &LossWeights,
) -> Result<Vec<LossComponent>> {
    if !task_classes.contains(&label) {
        return Err(Error::Index {
            index: label,
            len: task_classes.end,
        });
    }
    let seen = 0..task_classes.end;
    let mut out = Vec::with_capacity(subset.len() + 1);
    out.push(LossComponent {
        kind: ComponentKind::NewTaskCe,
        target_snapshot: None,
        class_range: seen.clone(),
        weight: 1.0,
        loss: LossSpec::CrossEntropy {
            label,
            classes: seen.clone(),
        },
    });
    let kl_weight = if weights.normalize_kl && !subset.is_empty() {
        weights.lambda / subset.len() as f64
    } else {
        weights.lambda
    };
    for &task in subset {
        let snapshot = set.get(task)?;
        let (classes, target) = match weights.kl_support {
            KlSupport::Covered => (
                snapshot.covered_classes(),
                snapshot.target_distribution(x, weights.temperature)?,
            ),
            KlSupport::Seen => {
                let mut probs = snapshot
                    .target_distribution(x, weights.temperature)?
                    .into_inner();
                probs.resize(seen.end, 0.0);
                (0..seen.end, ProbVector::new(probs)?)
            }
            KlSupport::Full => {
                let logits = snapshot.forward(x)?;
                (
                    0..seen.end,
                    crate::numerics::softmax(&logits[..seen.end], weights.temperature)?,
                )
            }
        };
        out.push(LossComponent {
            kind: ComponentKind::MatchKl,
            target_snapshot: Some(task),
            class_range: classes.clone(),
            weight: kl_weight,
            loss: LossSpec::Kl {
                target,
                classes,
                temperature: weights.temperature,
            },
        });
    }
    Ok(out)
}
