//! Gradient credit assignment: pairwise cosine matrix, conflict extraction,
//! sequential projection onto normal planes, and the parameter update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::knowledge::{ComponentKind, LossComponent};
use crate::network::Network;
use crate::numerics::{self, DEGENERATE_NORM};

/// Per-objective gradients `g_1 .. g_t`, all of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    grads: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        let first = grads.first().ok_or(Error::Empty("gradient set"))?.len();
        if let Some(bad) = grads.iter().find(|g| g.len() != first) {
            return Err(Error::dim(first, bad.len()));
        }
        Ok(GradientSet { grads })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    pub fn as_slice(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn into_inner(self) -> Vec<Vec<f64>> {
        self.grads
    }
}

/// Symmetric matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    size: usize,
    phi: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.phi[a * self.size + b]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.phi.chunks_exact(self.size)
    }

    /// Mean over the strict upper triangle; `None` for a single gradient.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let n = self.size;
        if n < 2 {
            return None;
        }
        let sum: f64 = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .map(|(a, b)| self.get(a, b))
            .sum();
        Some(sum / (n * (n - 1) / 2) as f64)
    }
}

/// Upper-triangle index pair `a < b` with negative similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConflictPair {
    pub a: usize,
    pub b: usize,
}

/// Which member of a conflicting pair gets projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionRole {
    /// `g_a` (lower index) onto the normal plane of `g_b`.
    #[default]
    ProjectLower,
    /// `g_b` onto the normal plane of `g_a`.
    ProjectUpper,
    /// Both members, each against the other's value before this pair.
    Symmetric,
}

pub fn assignment_matrix(set: &GradientSet) -> AssignmentMatrix {
    let n = set.len();
    let norms: Vec<f64> = set.grads.iter().map(|g| numerics::norm(g)).collect();
    let mut phi = vec![0.0; n * n];
    for a in 0..n {
        phi[a * n + a] = if norms[a] < DEGENERATE_NORM { 0.0 } else { 1.0 };
        for b in a + 1..n {
            let value = if norms[a] < DEGENERATE_NORM || norms[b] < DEGENERATE_NORM {
                0.0
            } else {
                (numerics::dot(&set.grads[a], &set.grads[b]) / (norms[a] * norms[b]))
                    .clamp(-1.0, 1.0)
            };
            phi[a * n + b] = value;
            phi[b * n + a] = value;
        }
    }
    AssignmentMatrix { size: n, phi }
}

/// Conflicting pairs from the upper triangle, row-major.
pub fn extract_conflicts(matrix: &AssignmentMatrix) -> Vec<ConflictPair> {
    let n = matrix.size;
    (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| ConflictPair { a, b }))
        .filter(|p| matrix.get(p.a, p.b) < 0.0)
        .collect()
}

/// Outcome of a conflict-resolution pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResolveStats {
    pub projected: usize,
    /// Pairs skipped because the reference gradient had vanished.
    pub degenerate: usize,
}

/// Applies the projections in order, each seeing the results of earlier ones.
pub fn resolve_conflicts(
    set: &GradientSet,
    pairs: &[ConflictPair],
    role: ProjectionRole,
) -> Result<(GradientSet, ResolveStats)> {
    let mut grads = set.grads.clone();
    let mut stats = ResolveStats::default();
    for pair in pairs {
        if pair.a >= pair.b || pair.b >= grads.len() {
            return Err(Error::Index {
                index: pair.b,
                len: grads.len(),
            });
        }
        let (target, reference) = match role {
            ProjectionRole::ProjectLower => (pair.a, pair.b),
            ProjectionRole::ProjectUpper => (pair.b, pair.a),
            ProjectionRole::Symmetric => {
                let (lo, hi) = grads.split_at_mut(pair.b);
                let (ga, gb) = (&mut lo[pair.a], &mut hi[0]);
                let ab = numerics::dot(ga, gb);
                let aa = numerics::dot(ga, ga);
                let bb = numerics::dot(gb, gb);
                if aa.sqrt() < DEGENERATE_NORM || bb.sqrt() < DEGENERATE_NORM {
                    stats.degenerate += 1;
                    continue;
                }
                let before_a = ga.clone();
                numerics::axpy(-ab / bb, gb, ga);
                numerics::axpy(-ab / aa, &before_a, gb);
                stats.projected += 2;
                continue;
            }
        };
        let ref_sq = numerics::dot(&grads[reference], &grads[reference]);
        if ref_sq.sqrt() < DEGENERATE_NORM {
            stats.degenerate += 1;
            continue;
        }
        let coeff = numerics::dot(&grads[target], &grads[reference]) / ref_sq;
        let (lo, hi) = grads.split_at_mut(target.max(reference));
        let (t, r) = if target < reference {
            (&mut lo[target], &hi[0])
        } else {
            (&mut hi[0], &lo[reference])
        };
        numerics::axpy(-coeff, r, t);
        stats.projected += 1;
    }
    Ok((GradientSet { grads }, stats))
}

/// Weighted elementwise sum.
pub fn combine(set: &GradientSet, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != set.len() {
        return Err(Error::dim(set.len(), weights.len()));
    }
    let mut out = vec![0.0; set.dim()];
    for (g, w) in set.grads.iter().zip(weights) {
        numerics::axpy(*w, g, &mut out);
    }
    Ok(out)
}

/// Combined update direction with optional surgery, plus what happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Surgery {
    pub combined: Vec<f64>,
    pub matrix: AssignmentMatrix,
    pub conflicts: Vec<ConflictPair>,
    pub stats: ResolveStats,
}

/// Builds the matrix, and when `enabled` removes conflicts before combining.
pub fn surgery(
    set: &GradientSet,
    weights: &[f64],
    enabled: bool,
    role: ProjectionRole,
) -> Result<Surgery> {
    let matrix = assignment_matrix(set);
    let conflicts = extract_conflicts(&matrix);
    let (combined, stats) = if enabled && !conflicts.is_empty() {
        let (resolved, stats) = resolve_conflicts(set, &conflicts, role)?;
        (combine(&resolved, weights)?, stats)
    } else {
        (combine(set, weights)?, ResolveStats::default())
    };
    Ok(Surgery {
        combined,
        matrix,
        conflicts,
        stats,
    })
}

/// Optimizer choice and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleKind {
    Sgd {
        lr: f64,
    },
    Adam {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "adam_beta1")]
        beta1: f64,
        #[serde(default = "adam_beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Rmsprop {
        #[serde(default = "rmsprop_lr")]
        lr: f64,
        #[serde(default = "rmsprop_decay")]
        decay: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Adadelta {
        #[serde(default = "adadelta_decay")]
        decay: f64,
        #[serde(default = "adadelta_eps")]
        eps: f64,
    },
}

fn adam_lr() -> f64 {
    1e-3
}
fn adam_beta1() -> f64 {
    0.9
}
fn adam_beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn rmsprop_lr() -> f64 {
    1e-3
}
fn rmsprop_decay() -> f64 {
    0.9
}
fn adadelta_decay() -> f64 {
    0.95
}
fn adadelta_eps() -> f64 {
    1e-6
}

impl RuleKind {
    pub fn sgd(lr: f64) -> Self {
        RuleKind::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        RuleKind::Adam {
            lr,
            beta1: adam_beta1(),
            beta2: adam_beta2(),
            eps: adam_eps(),
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        RuleKind::Rmsprop {
            lr,
            decay: rmsprop_decay(),
            eps: adam_eps(),
        }
    }

    pub fn adadelta() -> Self {
        RuleKind::Adadelta {
            decay: adadelta_decay(),
            eps: adadelta_eps(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Sgd { .. } => "sgd",
            RuleKind::Adam { .. } => "adam",
            RuleKind::Rmsprop { .. } => "rmsprop",
            RuleKind::Adadelta { .. } => "adadelta",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{name}"), what.to_string()))
            }
        };
        match *self {
            RuleKind::Sgd { lr } => check("lr", lr > 0.0, "must be positive"),
            RuleKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                check("lr", lr > 0.0, "must be positive")?;
                check("beta1", (0.0..1.0).contains(&beta1), "must be in [0, 1)")?;
                check("beta2", (0.0..1.0).contains(&beta2), "must be in [0, 1)")?;
                check("eps", eps > 0.0, "must be positive")
            }
            RuleKind::Rmsprop { lr, decay, eps } => {
                check("lr", lr > 0.0, "must be positive")?;
                check("decay", (0.0..1.0).contains(&decay), "must be in [0, 1)")?;
                check("eps", eps > 0.0, "must be positive")
            }
            RuleKind::Adadelta { decay, eps } => {
                check("decay", (0.0..1.0).contains(&decay), "must be in [0, 1)")?;
                check("eps", eps > 0.0, "must be positive")
            }
        }
    }
}

/// An optimizer together with its accumulated state.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRule {
    kind: RuleKind,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl UpdateRule {
    pub fn new(kind: RuleKind, param_count: usize) -> Result<Self> {
        kind.validate()?;
        let (first, second) = match kind {
            RuleKind::Sgd { .. } => (Vec::new(), Vec::new()),
            RuleKind::Rmsprop { .. } => (Vec::new(), vec![0.0; param_count]),
            RuleKind::Adam { .. } | RuleKind::Adadelta { .. } => {
                (vec![0.0; param_count], vec![0.0; param_count])
            }
        };
        Ok(UpdateRule {
            kind,
            steps: 0,
            first,
            second,
        })
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place; state is untouched on error.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::dim(params.len(), grad.len()));
        }
        if !self.second.is_empty() && self.second.len() != params.len() {
            return Err(Error::dim(self.second.len(), params.len()));
        }
        numerics::ensure_finite(grad, "combined gradient")?;
        self.steps += 1;
        match self.kind {
            RuleKind::Sgd { lr } => numerics::axpy(-lr, grad, params),
            RuleKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powf(self.steps as f64);
                let c2 = 1.0 - beta2.powf(self.steps as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            RuleKind::Rmsprop { lr, decay, eps } => {
                for i in 0..params.len() {
                    let g = grad[i];
                    self.second[i] = decay * self.second[i] + (1.0 - decay) * g * g;
                    params[i] -= lr * g / (self.second[i].sqrt() + eps);
                }
            }
            RuleKind::Adadelta { decay, eps } => {
                // first: running E[dx^2], second: running E[g^2]
                for i in 0..params.len() {
                    let g = grad[i];
                    self.second[i] = decay * self.second[i] + (1.0 - decay) * g * g;
                    let delta = -((self.first[i] + eps).sqrt() / (self.second[i] + eps).sqrt()) * g;
                    self.first[i] = decay * self.first[i] + (1.0 - decay) * delta * delta;
                    params[i] += delta;
                }
            }
        }
        Ok(())
    }
}

/// One training input with its loss components.
#[derive(Debug, Clone)]
pub struct SampleObjective {
    pub x: Vec<f64>,
    pub components: Vec<LossComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CreditSettings {
    pub enabled: bool,
    pub role: ProjectionRole,
}

/// Per-iteration record.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub conflicts: usize,
    pub degenerate_pairs: usize,
    pub mean_phi: Option<f64>,
    /// Batch-mean loss per component, in gradient order (KL terms, then CE).
    pub losses: Vec<f64>,
    /// Component labels in gradient order, e.g. `kl_1`, `ce`.
    pub labels: Vec<String>,
}

/// Positions of components reordered to `[KL.., CE]`.
fn gradient_order(components: &[LossComponent]) -> Vec<usize> {
    let kl = (0..components.len()).filter(|&i| components[i].kind == ComponentKind::MatchKl);
    let ce = (0..components.len()).filter(|&i| components[i].kind == ComponentKind::NewTaskCe);
    kl.chain(ce).collect()
}

/// Batch-mean per-component gradients and losses in gradient order.
pub fn component_gradients(
    net: &Network,
    batch: &[SampleObjective],
    exec: Execution,
) -> Result<(GradientSet, Vec<f64>, Vec<LossComponent>)> {
    let first = batch.first().ok_or(Error::Empty("batch"))?;
    if first.components.is_empty() {
        return Err(Error::Empty("loss components"));
    }
    let order = gradient_order(&first.components);
    let k = order.len();
    let per_sample = exec.map(batch, |sample| -> Result<Vec<(f64, Vec<f64>)>> {
        if sample.components.len() != k {
            return Err(Error::dim(k, sample.components.len()));
        }
        let trace = net.trace(&sample.x)?;
        order
            .iter()
            .map(|&i| {
                net.backward_from_trace(&trace, &sample.components[i].loss)
                    .map(|lg| (lg.loss, lg.grad))
            })
            .collect()
    });
    let n = net.params().len();
    let mut grads = vec![vec![0.0; n]; k];
    let mut losses = vec![0.0; k];
    let scale = 1.0 / batch.len() as f64;
    for sample in per_sample {
        for (j, (loss, grad)) in sample?.into_iter().enumerate() {
            losses[j] += loss * scale;
            numerics::axpy(scale, &grad, &mut grads[j]);
        }
    }
    let ordered = order.iter().map(|&i| first.components[i].clone()).collect();
    Ok((GradientSet::new(grads)?, losses, ordered))
}

/// One optimizer iteration over a mini-batch.
pub fn credit_step(
    rule: &mut UpdateRule,
    net: &mut Network,
    batch: &[SampleObjective],
    settings: CreditSettings,
    exec: Execution,
) -> Result<IterationDiagnostics> {
    let (grads, losses, components) = component_gradients(net, batch, exec)?;
    let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
    let result = surgery(&grads, &weights, settings.enabled, settings.role)?;
    let mut params = net.params().to_vec();
    rule.step(&mut params, &result.combined)?;
    net.set_params(params)?;
    Ok(IterationDiagnostics {
        conflicts: result.conflicts.len(),
        degenerate_pairs: result.stats.degenerate,
        mean_phi: result.matrix.mean_off_diagonal(),
        losses,
        labels: components
            .iter()
            .map(|c| match c.target_snapshot {
                Some(task) => format!("kl_{task}"),
                None => "ce".to_string(),
            })
            .collect(),
    })
}
