//! Fully-connected networks with hand-derived reverse-mode gradients, Adam,
//! Polyak blending and a JSON checkpoint format.
//!
//! All evaluation is batched: inputs are `batch x features` matrices and
//! weight matrices are stored `fan_in x fan_out`, so a layer is `X W + b`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "twinsync-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    /// `ln(1 + e^z)`, keeps outputs positive.
    Softplus,
    /// Bernoulli logits squashed into `(-LOGIT_BOUND, LOGIT_BOUND)` by a
    /// scaled tanh. Unbounded logits can be pushed so far out that the
    /// policy gradient underflows Adam's epsilon and the device is never
    /// tried again.
    Logits,
}

pub const LOGIT_BOUND: f64 = 6.0;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln sigma(z)`, stable for large |z|.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
    pub output: OutputTransform,
}

/// Intermediate values from a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

/// Gradients with the same layout as [`Mlp`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|x| x * k);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|x| x * k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Entry `idx` in the flat order used by [`Mlp::param_mut`].
    pub fn get(&self, idx: usize) -> f64 {
        let mut i = idx;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if i < w.len() {
                // logical row-major order; backward may hand back transposed layouts
                return w[[i / w.ncols(), i % w.ncols()]];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("gradient index {idx} out of range")
    }
}

impl Mlp {
    /// Layer sizes `[in, h1, ..., out]`; uniform init in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        output: OutputTransform,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)));
            biases.push(Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)));
        }
        Self {
            weights,
            biases,
            activation,
            output,
        }
    }

    pub fn zeros(sizes: &[usize], activation: Activation, output: OutputTransform) -> Self {
        Self {
            weights: sizes.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect(),
            biases: sizes.windows(2).map(|p| Array1::zeros(p[1])).collect(),
            activation,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("non-empty").ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Checks the chained shapes and finiteness of every entry.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(Error::Dimension {
                    expected: w.ncols(),
                    got: b.len(),
                });
            }
            if i + 1 < self.weights.len() && w.ncols() != self.weights[i + 1].nrows() {
                return Err(Error::Dimension {
                    expected: w.ncols(),
                    got: self.weights[i + 1].nrows(),
                });
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn activate(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn activate_grad(&self, z: f64) -> f64 {
        match self.activation {
            // subgradient 0 at the kink
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }

    fn transform(&self, z: f64) -> f64 {
        match self.output {
            OutputTransform::Identity => z,
            OutputTransform::Logits => LOGIT_BOUND * (z / LOGIT_BOUND).tanh(),
            OutputTransform::Softplus => softplus(z),
        }
    }

    fn transform_grad(&self, z: f64) -> f64 {
        match self.output {
            OutputTransform::Identity => 1.0,
            OutputTransform::Logits => 1.0 - (z / LOGIT_BOUND).tanh().powi(2),
            OutputTransform::Softplus => sigmoid(z),
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched evaluation without caching.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.weights.len() - 1;
        let mut h = x.dot(&self.weights[0]) + &self.biases[0];
        for l in 0..=last {
            if l > 0 {
                h = h.dot(&self.weights[l]) + &self.biases[l];
            }
            if l < last {
                h.mapv_inplace(|z| self.activate(z));
            } else {
                h.mapv_inplace(|z| self.transform(z));
            }
        }
        Ok(h)
    }

    /// Single-vector convenience wrapper.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Batched evaluation that keeps what [`Mlp::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last + 1);
        let mut h = x.to_owned();
        for l in 0..=last {
            let z = h.dot(&self.weights[l]) + &self.biases[l];
            inputs.push(h);
            h = if l < last {
                z.mapv(|v| self.activate(v))
            } else {
                z.mapv(|v| self.transform(v))
            };
            pre.push(z);
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Reverse pass. `upstream` is dLoss/dOutput per batch row; parameter
    /// gradients are summed over the batch. Returns the input gradient too.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let last = self.weights.len() - 1;
        let out_pre = &cache.pre[last];
        if upstream.dim() != out_pre.dim() {
            return Err(Error::Dimension {
                expected: out_pre.len(),
                got: upstream.len(),
            });
        }
        let mut delta = upstream.to_owned();
        Zip::from(&mut delta).and(out_pre).for_each(|d, &z| *d *= self.transform_grad(z));
        let mut gw = Vec::with_capacity(last + 1);
        let mut gb = Vec::with_capacity(last + 1);
        for l in (0..=last).rev() {
            gw.push(cache.inputs[l].t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            let mut back = delta.dot(&self.weights[l].t());
            if l > 0 {
                Zip::from(&mut back)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &z| *d *= self.activate_grad(z));
            }
            delta = back;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    /// Mutable access in flat order: per layer, weights row-major, then biases.
    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                let cols = w.ncols();
                return &mut w[[i / cols, i % cols]];
            }
            i -= w.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {idx} out of range")
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.dim() == b.dim())
    }
}

/// Adam moments for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    pub step_count: u64,
    pub learning_rate: f64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step_count: 0,
            learning_rate,
        }
    }
}

fn adam_apply(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let mhat = *m / c1;
    let vhat = *v / c2;
    *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
}

/// One bias-corrected Adam descent step. Non-finite gradients are rejected
/// and leave both the parameters and the optimizer untouched.
pub fn adam_update(net: &mut Mlp, grads: &Gradients, opt: &mut Adam) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient passed to adam_update".into()));
    }
    if grads.weights.len() != net.weights.len()
        || grads.weights.iter().zip(&net.weights).any(|(g, w)| g.dim() != w.dim())
        || grads.biases.iter().zip(&net.biases).any(|(g, b)| g.dim() != b.dim())
    {
        return Err(Error::Dimension {
            expected: net.num_params(),
            got: grads.weights.iter().map(|w| w.len()).sum::<usize>()
                + grads.biases.iter().map(|b| b.len()).sum::<usize>(),
        });
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = opt.learning_rate;
    for l in 0..net.weights.len() {
        Zip::from(&mut net.weights[l])
            .and(&grads.weights[l])
            .and(&mut opt.m.weights[l])
            .and(&mut opt.v.weights[l])
            .for_each(|p, &g, m, v| adam_apply(p, g, m, v, lr, c1, c2));
        Zip::from(&mut net.biases[l])
            .and(&grads.biases[l])
            .and(&mut opt.m.biases[l])
            .and(&mut opt.v.biases[l])
            .for_each(|p, &g, m, v| adam_apply(p, g, m, v, lr, c1, c2));
    }
    Ok(())
}

/// `target <- rho * online + (1 - rho) * target`.
pub fn polyak_blend(target: &mut Mlp, online: &Mlp, rho: f64) -> Result<()> {
    if !target.same_shape(online) {
        return Err(Error::Dimension {
            expected: target.num_params(),
            got: online.num_params(),
        });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(crate::error::invalid("rho must lie in [0, 1]"));
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        Zip::from(t).and(o).for_each(|t, &o| *t = rho * o + (1.0 - rho) * *t);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        Zip::from(t).and(o).for_each(|t, &o| *t = rho * o + (1.0 - rho) * *t);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub activation: Activation,
    pub output: OutputTransform,
    /// `w0, b0, w1, b1, ...`
    pub arrays: BTreeMap<String, ArrayRecord>,
}

/// Versioned named collection of networks plus scalar extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub networks: BTreeMap<String, NetworkRecord>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            networks: BTreeMap::new(),
            scalars: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, net: &Mlp) {
        let mut arrays = BTreeMap::new();
        for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            arrays.insert(
                format!("w{l}"),
                ArrayRecord {
                    shape: vec![w.nrows(), w.ncols()],
                    data: w.iter().copied().collect(),
                },
            );
            arrays.insert(
                format!("b{l}"),
                ArrayRecord {
                    shape: vec![b.len()],
                    data: b.to_vec(),
                },
            );
        }
        self.networks.insert(
            name.to_string(),
            NetworkRecord {
                activation: net.activation,
                output: net.output,
                arrays,
            },
        );
    }

    pub fn network(&self, name: &str) -> Result<Mlp> {
        let rec = self
            .networks
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing network `{name}`")))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0.. {
            let (Some(w), Some(b)) = (rec.arrays.get(&format!("w{l}")), rec.arrays.get(&format!("b{l}"))) else {
                break;
            };
            if w.shape.len() != 2 || b.shape.len() != 1 {
                return Err(Error::Checkpoint(format!("`{name}` layer {l}: bad rank")));
            }
            let wa = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
                .map_err(|e| Error::Checkpoint(format!("`{name}` w{l}: {e}")))?;
            let ba = Array1::from_shape_vec(b.shape[0], b.data.clone())
                .map_err(|e| Error::Checkpoint(format!("`{name}` b{l}: {e}")))?;
            weights.push(wa);
            biases.push(ba);
        }
        let net = Mlp {
            weights,
            biases,
            activation: rec.activation,
            output: rec.output,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format tag `{}`", ck.format)));
        }
        Ok(ck)
    }
}
