//! Fully-connected classifier with analytic backpropagation.
//!
//! Parameters are flattened layer by layer: the weight matrix (row-major,
//! `fan_out` rows of `fan_in` entries) followed by the bias vector.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{self, ProbVector, LOG_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub total_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, total_classes: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            total_classes,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// `(fan_in, fan_out)` for each affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.total_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.total_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("model", "all layer widths must be positive"));
        }
        Ok(())
    }

    fn check_range(&self, range: &Range<usize>) -> Result<()> {
        if range.start >= range.end || range.end > self.total_classes {
            return Err(Error::Range {
                start: range.start,
                end: range.end,
                total: self.total_classes,
            });
        }
        Ok(())
    }
}

/// Per-sample objective evaluated on a slice of the output logits.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Cross-entropy of a softmax over `classes` against a global `label`.
    CrossEntropy { label: usize, classes: Range<usize> },
    /// `KL(target || softmax(logits[classes] / temperature))`.
    Kl {
        target: ProbVector,
        classes: Range<usize>,
        temperature: f64,
    },
}

impl LossSpec {
    pub fn classes(&self) -> &Range<usize> {
        match self {
            LossSpec::CrossEntropy { classes, .. } | LossSpec::Kl { classes, .. } => classes,
        }
    }

    fn validate(&self, spec: &MlpSpec) -> Result<()> {
        spec.check_range(self.classes())?;
        match self {
            LossSpec::CrossEntropy { label, classes } => {
                if !classes.contains(label) {
                    return Err(Error::Index {
                        index: *label,
                        len: classes.end,
                    });
                }
            }
            LossSpec::Kl {
                target,
                classes,
                temperature,
            } => {
                if target.len() != classes.len() {
                    return Err(Error::dim(classes.len(), target.len()));
                }
                if !(*temperature > 0.0) {
                    return Err(Error::Numeric(format!("temperature {temperature}")));
                }
            }
        }
        Ok(())
    }

    /// Loss value and its gradient with respect to the full logit vector.
    fn evaluate(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let mut upstream = vec![0.0; logits.len()];
        match self {
            LossSpec::CrossEntropy { label, classes } => {
                let probs = numerics::softmax_unchecked(&logits[classes.clone()], 1.0);
                let local = label - classes.start;
                let value = -probs[local].max(LOG_CLAMP).ln();
                for (k, p) in probs.iter().enumerate() {
                    upstream[classes.start + k] = p - if k == local { 1.0 } else { 0.0 };
                }
                (value, upstream)
            }
            LossSpec::Kl {
                target,
                classes,
                temperature,
            } => {
                let student = numerics::softmax_unchecked(&logits[classes.clone()], *temperature);
                let value = numerics::kl_unchecked(target.as_slice(), &student);
                for (k, (s, q)) in student.iter().zip(target.as_slice()).enumerate() {
                    upstream[classes.start + k] = (s - q) / temperature;
                }
                (value, upstream)
            }
        }
    }
}

/// Forward evaluation over raw `(spec, params)`; shared by live networks and snapshots.
fn forward_impl(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Ok(trace_impl(spec, params, x)?
        .pop()
        .expect("at least one layer"))
}

/// Activations of every layer, input first, logits last.
fn trace_impl(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if x.len() != spec.input_dim {
        return Err(Error::dim(spec.input_dim, x.len()));
    }
    let shapes = spec.layer_shapes();
    let last = shapes.len() - 1;
    let mut activations = Vec::with_capacity(shapes.len() + 1);
    activations.push(x.to_vec());
    let mut offset = 0;
    for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let input = activations.last().expect("non-empty");
        let out: Vec<f64> = weights
            .chunks_exact(fan_in)
            .zip(bias)
            .map(|(row, b)| {
                let z = numerics::dot(row, input) + b;
                if layer == last {
                    z
                } else {
                    spec.activation.apply(z)
                }
            })
            .collect();
        activations.push(out);
    }
    Ok(activations)
}

/// Cached forward pass of one input through a live network.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("non-empty")
    }
}

/// Loss value and flattened parameter gradient of a single objective.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights from a ChaCha stream keyed by `seed`; zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Network { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::dim(spec.param_count(), params.len()));
        }
        numerics::ensure_finite(&params, "params")?;
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameter vector; the length must not change.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim(self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_impl(&self.spec, &self.params, x)
    }

    pub fn trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        Ok(ForwardTrace {
            activations: trace_impl(&self.spec, &self.params, x)?,
        })
    }

    /// Argmax over the first `seen_classes` logits.
    pub fn predict(&self, x: &[f64], seen_classes: usize) -> Result<usize> {
        predict_from_logits(&self.forward(x)?, seen_classes)
    }

    pub fn backward(&self, x: &[f64], loss: &LossSpec) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(x, loss)?.grad)
    }

    pub fn loss_and_gradient(&self, x: &[f64], loss: &LossSpec) -> Result<LossGradient> {
        let trace = self.trace(x)?;
        self.backward_from_trace(&trace, loss)
    }

    /// Backpropagates `loss` through a trace produced by this network.
    pub fn backward_from_trace(
        &self,
        trace: &ForwardTrace,
        loss: &LossSpec,
    ) -> Result<LossGradient> {
        loss.validate(&self.spec)?;
        let (value, mut delta) = loss.evaluate(trace.logits());
        let shapes = self.spec.layer_shapes();
        let mut grad = vec![0.0; self.params.len()];
        let mut offset = self.params.len();
        for layer in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[layer];
            offset -= fan_in * fan_out + fan_out;
            let input = &trace.activations[layer];
            let (w_grad, b_grad) =
                grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for (o, d) in delta.iter().enumerate() {
                b_grad[o] = *d;
                if *d != 0.0 {
                    for (g, a) in w_grad[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g = d * a;
                    }
                }
            }
            if layer == 0 {
                break;
            }
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    numerics::axpy(*d, &weights[o * fan_in..(o + 1) * fan_in], &mut next);
                }
            }
            for (n, a) in next.iter_mut().zip(input) {
                *n *= self.spec.activation.derivative_from_output(*a);
            }
            delta = next;
        }
        Ok(LossGradient { loss: value, grad })
    }

    /// Frozen copy covering the classes `covered`.
    pub fn snapshot(&self, covered: Range<usize>) -> Result<FunctionSnapshot> {
        self.spec.check_range(&covered)?;
        Ok(FunctionSnapshot {
            spec: self.spec.clone(),
            params: Arc::from(self.params.as_slice()),
            covered,
        })
    }
}

pub(crate) fn predict_from_logits(logits: &[f64], seen_classes: usize) -> Result<usize> {
    if seen_classes == 0 || seen_classes > logits.len() {
        return Err(Error::Range {
            start: 0,
            end: seen_classes,
            total: logits.len(),
        });
    }
    // first index wins ties
    let mut best = 0;
    for (k, z) in logits[..seen_classes].iter().enumerate().skip(1) {
        if *z > logits[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Immutable past-task function together with the classes it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSnapshot {
    spec: MlpSpec,
    params: Arc<[f64]>,
    covered: Range<usize>,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"PLWFSNAP";
const SNAPSHOT_VERSION: u32 = 1;

impl FunctionSnapshot {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn covered_classes(&self) -> Range<usize> {
        self.covered.clone()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_impl(&self.spec, &self.params, x)
    }

    /// Softmax over the covered logits only.
    pub fn target_distribution(&self, x: &[f64], temperature: f64) -> Result<ProbVector> {
        let logits = self.forward(x)?;
        numerics::softmax(&logits[self.covered.clone()], temperature)
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn params_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter() {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Binary record: magic, version, spec, covered range, params as `f64` LE.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&[match self.spec.activation {
            Activation::Relu => 0u8,
            Activation::Tanh => 1u8,
        }])?;
        let mut header = vec![
            self.spec.input_dim as u64,
            self.spec.hidden_dims.len() as u64,
        ];
        header.extend(self.spec.hidden_dims.iter().map(|&h| h as u64));
        header.extend([
            self.spec.total_classes as u64,
            self.covered.start as u64,
            self.covered.end as u64,
            self.params.len() as u64,
        ]);
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in self.params.iter() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        }
        let bad = |msg: &str| Error::Data(format!("snapshot record: {msg}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        if u32::from_le_bytes(version) != SNAPSHOT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut act = [0u8; 1];
        r.read_exact(&mut act)?;
        let activation = match act[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            _ => return Err(bad("unknown activation")),
        };
        let input_dim = u64_of(&mut r)? as usize;
        let depth = u64_of(&mut r)? as usize;
        if depth > 1024 {
            return Err(bad("implausible depth"));
        }
        let hidden_dims = (0..depth)
            .map(|_| u64_of(&mut r).map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let total_classes = u64_of(&mut r)? as usize;
        let covered = u64_of(&mut r)? as usize..u64_of(&mut r)? as usize;
        let count = u64_of(&mut r)? as usize;
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            total_classes,
            activation,
        };
        spec.validate()?;
        if count != spec.param_count() {
            return Err(bad("parameter count does not match spec"));
        }
        let params = (0..count)
            .map(|_| u64_of(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let net = Network::from_params(spec, params)?;
        net.snapshot(covered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(2, vec![4], 2)
    }

    #[test]
    fn param_count_formula() {
        let net = Network::init(small_spec(), 0).unwrap();
        assert_eq!(net.params().len(), 2 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(net.params().len(), 22);
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::init(small_spec(), 7).unwrap();
        let b = Network::init(small_spec(), 7).unwrap();
        let c = Network::init(small_spec(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // biases start at zero, weights within the Glorot bound
        let limit = (6.0f64 / 6.0).sqrt();
        assert!(a.params()[..8].iter().all(|w| w.abs() <= limit));
        assert!(a.params()[8..12].iter().all(|b| *b == 0.0));
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let spec = MlpSpec::new(3, vec![5, 4], 6);
        let net = Network::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn identity_layers_pass_non_negative_input() {
        let spec = MlpSpec::new(3, vec![3], 3);
        let mut params = Vec::new();
        for _ in 0..2 {
            for r in 0..3 {
                for c in 0..3 {
                    params.push(if r == c { 1.0 } else { 0.0 });
                }
            }
            params.extend([0.0; 3]);
        }
        let net = Network::from_params(spec, params).unwrap();
        let x = [0.5, 2.0, 0.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::init(small_spec(), 1).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::Dimension {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn loss_ranges_are_validated() {
        let net = Network::init(small_spec(), 1).unwrap();
        let bad = LossSpec::CrossEntropy {
            label: 0,
            classes: 0..5,
        };
        assert!(matches!(
            net.backward(&[0.0, 0.0], &bad),
            Err(Error::Range { .. })
        ));
        let outside = LossSpec::CrossEntropy {
            label: 1,
            classes: 0..1,
        };
        assert!(net.backward(&[0.0, 0.0], &outside).is_err());
    }

    #[test]
    fn kl_at_its_own_output_has_zero_gradient() {
        let net = Network::init(MlpSpec::new(3, vec![8], 4), 3).unwrap();
        let x = [0.3, -0.7, 1.1];
        let logits = net.forward(&x).unwrap();
        let target = numerics::softmax(&logits[0..3], 2.0).unwrap();
        let lg = net
            .loss_and_gradient(
                &x,
                &LossSpec::Kl {
                    target,
                    classes: 0..3,
                    temperature: 2.0,
                },
            )
            .unwrap();
        assert!(lg.loss.abs() < 1e-12);
        assert!(numerics::norm(&lg.grad) < 1e-8);
    }

    #[test]
    fn masked_logits_get_no_gradient() {
        let spec = MlpSpec::new(2, vec![], 4);
        let net = Network::init(spec, 5).unwrap();
        let g = net
            .backward(
                &[1.0, 2.0],
                &LossSpec::CrossEntropy {
                    label: 1,
                    classes: 0..2,
                },
            )
            .unwrap();
        // rows 2 and 3 of the single weight matrix and their biases
        assert!(g[4..8].iter().all(|v| *v == 0.0));
        assert!(g[10..12].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut net = Network::init(small_spec(), 11).unwrap();
        let snap = net.snapshot(0..2).unwrap();
        let x = [0.4, -0.2];
        let before = snap.forward(&x).unwrap();
        assert_eq!(before, net.forward(&x).unwrap());
        let digest = snap.params_digest();
        let shifted = net.params().iter().map(|p| p + 0.5).collect();
        net.set_params(shifted).unwrap();
        assert_ne!(net.forward(&x).unwrap(), before);
        assert_eq!(snap.forward(&x).unwrap(), before);
        assert_eq!(snap.params_digest(), digest);
    }

    #[test]
    fn snapshot_record_round_trips_bit_exact() {
        let net = Network::init(
            MlpSpec::new(3, vec![5, 4], 6).with_activation(Activation::Tanh),
            9,
        )
        .unwrap();
        let snap = net.snapshot(0..4).unwrap();
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        let back = FunctionSnapshot::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, snap);
        buf[0] = b'X';
        assert!(FunctionSnapshot::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn predict_restricts_to_seen_classes() {
        assert_eq!(predict_from_logits(&[0.1, 0.5, 9.0], 2).unwrap(), 1);
        assert_eq!(predict_from_logits(&[0.1, 0.5, 9.0], 3).unwrap(), 2);
        assert!(predict_from_logits(&[0.1], 0).is_err());
    }

    #[test]
    fn perfect_prediction_has_vanishing_gradient() {
        // a linear layer with a huge margin for class 0
        let spec = MlpSpec::new(1, vec![], 2);
        let net = Network::from_params(spec, vec![100.0, -100.0, 0.0, 0.0]).unwrap();
        let lg = net
            .loss_and_gradient(
                &[1.0],
                &LossSpec::CrossEntropy {
                    label: 0,
                    classes: 0..2,
                },
            )
            .unwrap();
        assert_abs_diff_eq!(lg.loss, 0.0, epsilon = 1e-12);
        assert!(numerics::norm(&lg.grad) < 1e-8);
    }
}
