//! Dense ReLU networks with hand-written backprop, batched column-wise.

use nalgebra::{DMatrix, DVector, RealField};
use rand::Rng;
use serde::{Deserialize, Serialize};
use simba::scalar::SupersetOf;

use crate::error::{Error, Result};

/// Network scalar: `f32` for training throughput, `f64` for gradient checks.
pub trait Float: RealField + Copy + SupersetOf<f64> + Send + Sync {
    const NAME: &'static str;
}

impl Float for f32 {
    const NAME: &'static str = "f32";
}

impl Float for f64 {
    const NAME: &'static str = "f64";
}

#[inline]
pub fn to_t<T: Float>(x: f64) -> T {
    nalgebra::convert(x)
}

#[inline]
pub fn to_f64<T: Float>(x: T) -> f64 {
    x.to_subset().expect("float widening")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Float> {
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Float> {
    widths: Vec<usize>,
    pub layers: Vec<Dense<T>>,
    output: OutputActivation,
}

/// Activations kept for the backward pass; `acts[0]` is the input batch.
pub struct Cache<T: Float> {
    acts: Vec<DMatrix<T>>,
}

impl<T: Float> Cache<T> {
    pub fn output(&self) -> &DMatrix<T> {
        self.acts.last().expect("non-empty cache")
    }
}

/// Parameter-shaped gradient (or Adam moment) storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T: Float> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Float> Grads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| Dense { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// Row-major weights then bias, layer by layer, widened to f64.
fn flatten_layers<T: Float>(layers: &[Dense<T>]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        for i in 0..l.w.nrows() {
            out.extend(l.w.row(i).iter().map(|v| to_f64(*v)));
        }
        out.extend(l.b.iter().map(|v| to_f64(*v)));
    }
    out
}

impl<T: Float> Mlp<T> {
    /// He-uniform hidden layers; the output layer starts small (±3e-3).
    pub fn new<R: Rng>(widths: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let lim = if i + 1 == n { 3e-3 } else { (6.0 / fan_in as f64).sqrt() };
                Dense {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| to_t(rng.gen_range(-lim..lim))),
                    b: DVector::from_fn(fan_out, |_, _| to_t(if i + 1 == n { rng.gen_range(-lim..lim) } else { 0.0 })),
                }
            })
            .collect();
        Ok(Mlp { widths: widths.to_vec(), layers, output })
    }

    pub fn from_params(widths: &[usize], output: OutputActivation, params: &[f64]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Format(format!("invalid layer widths {widths:?}")));
        }
        let mut net = Mlp {
            widths: widths.to_vec(),
            layers: widths
                .windows(2)
                .map(|w| Dense { w: DMatrix::zeros(w[1], w[0]), b: DVector::zeros(w[1]) })
                .collect(),
            output,
        };
        net.set_params(params)?;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("widths validated")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Format(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            let w = &params[k..k + r * c];
            l.w = DMatrix::from_fn(r, c, |i, j| to_t(w[i * c + j]));
            k += r * c;
            l.b = DVector::from_fn(r, |i, _| to_t(params[k + i]));
            k += r;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn forward_cached(&self, x: &DMatrix<T>) -> Cache<T> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * acts.last().expect("input pushed");
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i < last {
                z.apply(|v| *v = v.max(T::zero()));
            } else if self.output == OutputActivation::Tanh {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Cache { acts }
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        self.forward_cached(x).acts.pop().expect("non-empty cache")
    }

    /// Single f64 input, f64 output.
    pub fn forward_one(&self, x: &DVector<f64>) -> DVector<f64> {
        let out = self.forward(&DMatrix::from_fn(x.len(), 1, |i, _| to_t(x[i])));
        DVector::from_iterator(out.len(), out.iter().map(|v| to_f64(*v)))
    }

    /// Gradients of a loss with respect to parameters and input, given
    /// `d loss / d output` for the cached batch.
    pub fn backward(&self, cache: &Cache<T>, d_out: &DMatrix<T>) -> (Grads<T>, DMatrix<T>) {
        self.backward_impl(cache, d_out, true)
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn input_gradient(&self, cache: &Cache<T>, d_out: &DMatrix<T>) -> DMatrix<T> {
        self.backward_impl(cache, d_out, false).1
    }

    fn backward_impl(&self, cache: &Cache<T>, d_out: &DMatrix<T>, params: bool) -> (Grads<T>, DMatrix<T>) {
        let last = self.layers.len() - 1;
        let mut delta = d_out.clone();
        if self.output == OutputActivation::Tanh {
            delta.zip_apply(cache.output(), |d, y| *d *= T::one() - y * y);
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..=last).rev() {
            let a_prev = &cache.acts[i];
            if params {
                let gw = &delta * a_prev.transpose();
                let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
                grads.push(Dense { w: gw, b: gb });
            }
            let mut d_prev = self.layers[i].w.transpose() * &delta;
            if i > 0 {
                d_prev.zip_apply(a_prev, |d, a| {
                    if a <= T::zero() {
                        *d = T::zero()
                    }
                });
            }
            delta = d_prev;
        }
        grads.reverse();
        (Grads { layers: grads }, delta)
    }

    /// Polyak averaging toward `source`: θ ← (1−τ)θ + τθ_src.
    pub fn soft_update(&mut self, source: &Mlp<T>, tau: f64) {
        let tau: T = to_t(tau);
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.w.zip_apply(&s.w, |a, b| *a += tau * (b - *a));
            t.b.zip_apply(&s.b, |a, b| *a += tau * (b - *a));
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Grads<T>,
    pub v: Grads<T>,
    pub t: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(net: &Mlp<T>, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Grads::zeros_like(net), v: Grads::zeros_like(net), t: 0 }
    }

    pub fn step(&mut self, net: &mut Mlp<T>, g: &Grads<T>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step: T = to_t(self.lr * c2.sqrt() / c1);
        let eps_hat: T = to_t(self.eps * c2.sqrt());
        let (b1, b2): (T, T) = (to_t(self.beta1), to_t(self.beta2));
        for (((layer, gl), ml), vl) in net.layers.iter_mut().zip(&g.layers).zip(&mut self.m.layers).zip(&mut self.v.layers) {
            update(layer.w.as_mut_slice(), gl.w.as_slice(), ml.w.as_mut_slice(), vl.w.as_mut_slice(), b1, b2, step, eps_hat);
            update(layer.b.as_mut_slice(), gl.b.as_slice(), ml.b.as_mut_slice(), vl.b.as_mut_slice(), b1, b2, step, eps_hat);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update<T: Float>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], b1: T, b2: T, step: T, eps: T) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        p[i] -= step * m[i] / (v[i].sqrt() + eps);
    }
}
