//! Per-cell dense predictor: `F → hidden (tanh) → K + 7` raw outputs.
//!
//! Raw output layout: `K` score logits, 4 pre-softplus offsets, the pair
//! `(a, b)` for `(sin 2θ, cos 2θ)`, and one centerness logit. With
//! `hidden == 0` the model is a single affine map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::normalize_angle;
use crate::losses::MapGrad;
use crate::pseudo_label::{CellPrediction, DensePredictionMap};
use crate::scenes::FeatureField;

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_LR: f64 = 0.0025;
const SCORE_PRIOR_BIAS: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self += k · other`
    pub fn axpy(&mut self, k: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|x| *x *= k);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub num_features: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub params: ParamVector,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Kept strictly inside (0, 1) so saturated cells still form a valid map.
fn squashed_prob(x: f64) -> f64 {
    sigmoid(x).clamp(1e-15, 1.0 - 1e-15)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl ToyModel {
    pub fn num_outputs(num_classes: usize) -> usize {
        num_classes + 7
    }

    pub fn param_count(num_features: usize, hidden: usize, num_classes: usize) -> usize {
        let o = Self::num_outputs(num_classes);
        if hidden == 0 {
            o * num_features + o
        } else {
            hidden * num_features + hidden + o * hidden + o
        }
    }

    pub fn zeros(num_features: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        if num_features == 0 || num_classes == 0 {
            return Err(Error::invalid("model needs at least one feature and one class"));
        }
        Ok(Self {
            num_features,
            hidden,
            num_classes,
            params: ParamVector::zeros(Self::param_count(num_features, hidden, num_classes)),
        })
    }

    /// Scaled-normal weights, zero biases except a negative prior on score
    /// logits and `b = 1` on the cosine output.
    pub fn init<R: Rng + ?Sized>(num_features: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(num_features, hidden, num_classes)?;
        let o = m.outputs();
        let in2 = if hidden == 0 { num_features } else { hidden };
        if hidden > 0 {
            let n1 = Normal::new(0.0, 1.0 / (num_features as f64).sqrt()).expect("valid sigma");
            let (w1, _, _, _) = m.layout();
            for x in &mut m.params.0[w1.clone()] {
                *x = n1.sample(rng);
            }
        }
        let n2 = Normal::new(0.0, 0.5 / (in2 as f64).sqrt()).expect("valid sigma");
        let (_, _, w2, b2) = m.layout();
        for x in &mut m.params.0[w2] {
            *x = n2.sample(rng);
        }
        let b2 = &mut m.params.0[b2];
        b2[..num_classes].iter_mut().for_each(|x| *x = SCORE_PRIOR_BIAS);
        b2[o - 2] = 1.0;
        Ok(m)
    }

    fn outputs(&self) -> usize {
        Self::num_outputs(self.num_classes)
    }

    // Ranges of (W1, b1, W2, b2); the first two are empty for a linear model.
    fn layout(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let (f, h, o) = (self.num_features, self.hidden, self.outputs());
        if h == 0 {
            (0..0, 0..0, 0..o * f, o * f..o * f + o)
        } else {
            let w1 = 0..h * f;
            let b1 = w1.end..w1.end + h;
            let w2 = b1.end..b1.end + o * h;
            let b2 = w2.end..w2.end + o;
            (w1, b1, w2, b2)
        }
    }

    fn check_features(&self, features: &FeatureField) -> Result<()> {
        if features.channels != self.num_features {
            return Err(Error::invalid(format!(
                "feature field has {} channels, model expects {}",
                features.channels, self.num_features
            )));
        }
        Ok(())
    }

    /// Hidden activations and raw outputs for one cell.
    fn raw_cell(&self, x: &[f64], hidden: &mut [f64], raw: &mut [f64]) {
        let (w1, b1, w2, b2) = self.layout();
        let p = &self.params.0;
        let input: &[f64] = if self.hidden == 0 {
            x
        } else {
            let (w1, b1) = (&p[w1], &p[b1]);
            for (j, h) in hidden.iter_mut().enumerate() {
                let row = &w1[j * self.num_features..(j + 1) * self.num_features];
                *h = (b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh();
            }
            hidden
        };
        let n_in = input.len();
        let (w2, b2) = (&p[w2], &p[b2]);
        for (k, r) in raw.iter_mut().enumerate() {
            let row = &w2[k * n_in..(k + 1) * n_in];
            *r = b2[k] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn squash(&self, raw: &[f64]) -> CellPrediction {
        let k = self.num_classes;
        let angle = normalize_angle(0.5 * raw[k + 4].atan2(raw[k + 5])).unwrap_or_default();
        CellPrediction {
            scores: raw[..k].iter().map(|&z| squashed_prob(z)).collect(),
            offsets: [0, 1, 2, 3].map(|j| softplus(raw[k + j])),
            angle,
            centerness: squashed_prob(raw[k + 6]),
        }
    }

    pub fn forward_cell(&self, x: &[f64]) -> CellPrediction {
        let mut hidden = vec![0.0; self.hidden];
        let mut raw = vec![0.0; self.outputs()];
        self.raw_cell(x, &mut hidden, &mut raw);
        self.squash(&raw)
    }

    pub fn forward(&self, features: &FeatureField) -> Result<DensePredictionMap> {
        self.check_features(features)?;
        let mut map = DensePredictionMap::new(features.grid, self.num_classes);
        let mut hidden = vec![0.0; self.hidden];
        let mut raw = vec![0.0; self.outputs()];
        for idx in 0..features.grid.num_cells() {
            self.raw_cell(features.cell(idx), &mut hidden, &mut raw);
            map.set_cell(idx, &self.squash(&raw));
        }
        Ok(map)
    }

    /// Parameter gradient of `Σ_cells ⟨upstream, outputs⟩`; cells are visited
    /// in index order and cells with an all-zero upstream are skipped.
    pub fn backward(&self, features: &FeatureField, upstream: &MapGrad) -> Result<ParamVector> {
        self.check_features(features)?;
        if upstream.num_classes != self.num_classes || upstream.num_cells() != features.grid.num_cells() {
            return Err(Error::invalid("upstream gradient shape does not match prediction map"));
        }
        let mut grad = ParamVector::zeros(self.params.len());
        let (w1r, b1r, w2r, b2r) = self.layout();
        let (k, o, f) = (self.num_classes, self.outputs(), self.num_features);
        let mut hidden = vec![0.0; self.hidden];
        let mut raw = vec![0.0; o];
        let mut draw = vec![0.0; o];
        let mut dh = vec![0.0; self.hidden];
        for idx in 0..features.grid.num_cells() {
            let up = upstream.cell(idx);
            if up.iter().all(|&g| g == 0.0) {
                continue;
            }
            let x = features.cell(idx);
            self.raw_cell(x, &mut hidden, &mut raw);
            for c in 0..k {
                let s = sigmoid(raw[c]);
                draw[c] = up[c] * s * (1.0 - s);
            }
            for j in 0..4 {
                draw[k + j] = up[k + j] * sigmoid(raw[k + j]);
            }
            let (a, b) = (raw[k + 4], raw[k + 5]);
            let r2 = (a * a + b * b).max(1e-300);
            draw[k + 4] = up[k + 4] * 0.5 * b / r2;
            draw[k + 5] = -up[k + 4] * 0.5 * a / r2;
            let s = sigmoid(raw[k + 6]);
            draw[k + 6] = up[k + 5] * s * (1.0 - s);

            let input: &[f64] = if self.hidden == 0 { x } else { &hidden };
            let n_in = input.len();
            let g = &mut grad.0;
            for (r, &d) in draw.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g[b2r.start + r] += d;
                let row = w2r.start + r * n_in;
                for (gi, v) in g[row..row + n_in].iter_mut().zip(input) {
                    *gi += d * v;
                }
            }
            if self.hidden > 0 {
                let w2 = &self.params.0[w2r.clone()];
                for (j, dhj) in dh.iter_mut().enumerate() {
                    let back: f64 = (0..o).map(|r| draw[r] * w2[r * n_in + j]).sum();
                    *dhj = back * (1.0 - hidden[j] * hidden[j]);
                }
                for (j, &d) in dh.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g[b1r.start + j] += d;
                    let row = w1r.start + j * f;
                    for (gi, v) in g[row..row + f].iter_mut().zip(x) {
                        *gi += d * v;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Classical momentum with decoupled weight decay:
/// `v ← μv + g`, `θ ← θ − lr·v − lr·wd·θ`.
pub fn sgd_step(
    params: &mut ParamVector,
    velocity: &mut ParamVector,
    grads: &ParamVector,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("parameter, velocity and gradient lengths differ"));
    }
    if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            reason: format!("non-finite gradient at parameter {i}"),
        });
    }
    for ((t, v), g) in params.0.iter_mut().zip(velocity.0.iter_mut()).zip(&grads.0) {
        *v = momentum * *v + g;
        *t -= lr * *v + lr * weight_decay * *t;
    }
    Ok(())
}
