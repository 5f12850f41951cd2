//! Feed-forward encoder producing unit-norm embeddings, plus the
//! angular-margin classification head it is trained with.

use std::hash::{DefaultHasher, Hasher};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::linalg::normalize_rows;
use crate::error::{DdlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-pre).exp()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Architecture description used to initialise an [`EncoderNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    /// One unit-norm row per identity class.
    pub head: Array2<f64>,
}

/// Activations retained by [`EncoderNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input to each layer; `inputs[0]` is the batch.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
    /// Row norms of the final layer output before normalisation.
    norms: Array1<f64>,
    embeddings: Array2<f64>,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Array2<f64> {
        self.embeddings
    }
}

/// Gradients with the same layout as the parameters of an [`EncoderNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub head: Array2<f64>,
}

impl ParamGrads {
    pub fn zeros_like(net: &EncoderNet) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
            head: Array2::zeros(net.head.raw_dim()),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 1);
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{i}.weight"), w.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), b.as_slice().expect("standard layout")));
        }
        out.push(("head.weight".into(), self.head.as_slice().expect("standard layout")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.as_slice_mut().expect("standard layout"));
        out
    }
}

impl EncoderNet {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero biases and random
    /// unit-norm head rows.
    pub fn random(spec: &EncoderSpec, classes: usize, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.embedding_dim == 0 || classes == 0 {
            return Err(DdlError::InvalidConfig(
                "encoder dims and class count must be positive".into(),
            ));
        }
        if spec.hidden.iter().any(|&h| h == 0) {
            return Err(DdlError::InvalidConfig("hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.embedding_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                });
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        let mut head = Array2::from_shape_fn((classes, spec.embedding_dim), |_| {
            StandardNormal.sample(&mut rng)
        });
        normalize_rows(&mut head)?;
        Ok(Self {
            layers,
            activation: spec.activation,
            head,
        })
    }

    pub fn from_parts(layers: Vec<Dense>, activation: Activation, head: Array2<f64>) -> Result<Self> {
        let net = Self {
            layers,
            activation,
            head,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DdlError::ShapeMismatch("encoder has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(DdlError::ShapeMismatch(format!(
                    "layer{i}: bias length {} vs {} outputs",
                    l.bias.len(),
                    l.weight.nrows()
                )));
            }
            if i > 0 && self.layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(DdlError::ShapeMismatch(format!(
                    "layer{i} expects {} inputs but layer{} emits {}",
                    l.weight.ncols(),
                    i - 1,
                    self.layers[i - 1].weight.nrows()
                )));
            }
        }
        if self.head.ncols() != self.embedding_dim() {
            return Err(DdlError::ShapeMismatch(format!(
                "head width {} vs embedding dim {}",
                self.head.ncols(),
                self.embedding_dim()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn classes(&self) -> usize {
        self.head.nrows()
    }

    /// Hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.tensors() {
            h.write(name.as_bytes());
            h.write_usize(t.len());
            for x in t {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        out.push(("head.weight".into(), self.head.as_slice().expect("standard layout")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in self.layers.iter_mut() {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardCache> {
        if batch.ncols() != self.input_dim() {
            return Err(DdlError::ShapeMismatch(format!(
                "batch has {} columns, encoder expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            inputs.push(a);
            a = if i < last {
                z.mapv(|x| self.activation.apply(x))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let mut embeddings = a;
        let norms = normalize_rows(&mut embeddings)?;
        Ok(ForwardCache {
            fingerprint: self.fingerprint(),
            inputs,
            pre,
            norms,
            embeddings,
        })
    }

    /// Convenience wrapper returning only the embeddings.
    pub fn embed(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch)?.into_embeddings())
    }

    /// Back-propagates `grad_embeddings` (dL/de, one row per sample) to the
    /// encoder layers. The head gradient is left at zero.
    pub fn backward(&self, cache: &ForwardCache, grad_embeddings: ArrayView2<f64>) -> Result<ParamGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(DdlError::StaleCache);
        }
        if grad_embeddings.raw_dim() != cache.embeddings.raw_dim() {
            return Err(DdlError::ShapeMismatch(format!(
                "upstream gradient {:?} vs embeddings {:?}",
                grad_embeddings.shape(),
                cache.embeddings.shape()
            )));
        }
        // d e / d z = (I - e e^T) / |z| per row.
        let e = &cache.embeddings;
        let radial = (e * &grad_embeddings).sum_axis(Axis(1));
        let mut g = &grad_embeddings - &(e * &radial.insert_axis(Axis(1)));
        g /= &cache.norms.view().insert_axis(Axis(1));

        let mut grads = ParamGrads::zeros_like(self);
        for i in (0..self.layers.len()).rev() {
            grads.weights[i] = g.t().dot(&cache.inputs[i]);
            grads.biases[i] = g.sum_axis(Axis(0));
            if i > 0 {
                let mut ga = g.dot(&self.layers[i].weight);
                ndarray::Zip::from(&mut ga)
                    .and(&cache.pre[i - 1])
                    .for_each(|x, &p| *x *= self.activation.derivative(p));
                g = ga;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 5,
            hidden: vec![7],
            embedding_dim: 4,
            activation: Activation::Tanh,
        }
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_single_layer_passes_unit_input() {
        let layer = Dense {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let net = EncoderNet::from_parts(vec![layer], Activation::Tanh, Array2::eye(3)).unwrap();
        let x = array![[0.6, 0.0, 0.8]];
        let e = net.embed(x.view()).unwrap();
        assert_eq!(e, x);
    }

    #[test]
    fn forward_is_deterministic_and_unit_norm() {
        let net = EncoderNet::random(&small_spec(), 3, 11).unwrap();
        let x = random_batch(9, 5, 2);
        let a = net.embed(x.view()).unwrap();
        let b = net.embed(x.view()).unwrap();
        assert_eq!(a, b);
        for row in a.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = EncoderNet::random(&small_spec(), 3, 11).unwrap();
        let x = random_batch(2, 6, 2);
        assert!(matches!(net.forward(x.view()), Err(DdlError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = EncoderNet::random(&small_spec(), 3, 1).unwrap();
        let x = random_batch(4, 5, 3);
        let cache = net.forward(x.view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((4, 4)).view()).unwrap();
        assert_eq!(g, ParamGrads::zeros_like(&net));
    }

    #[test]
    fn radial_gradient_vanishes_through_normalisation() {
        // L = 1/2 |e|^2 has dL/de = e, which is purely radial.
        let net = EncoderNet::random(&small_spec(), 3, 5).unwrap();
        let x = random_batch(6, 5, 4);
        let cache = net.forward(x.view()).unwrap();
        let g = net.backward(&cache, cache.embeddings().view()).unwrap();
        for (_, t) in g.tensors() {
            assert!(t.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn backward_detects_stale_cache() {
        let mut net = EncoderNet::random(&small_spec(), 3, 5).unwrap();
        let x = random_batch(2, 5, 4);
        let cache = net.forward(x.view()).unwrap();
        net.layers[0].bias[0] += 1e-3;
        let err = net.backward(&cache, Array2::zeros((2, 4)).view()).unwrap_err();
        assert!(matches!(err, DdlError::StaleCache));
    }

    fn scalar_loss(net: &EncoderNet, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        let e = net.embed(x.view()).unwrap();
        (&e * w).sum() + 0.5 * e.mapv(|v| v.powi(3)).sum()
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let h = 1e-5;
        for seed in 0..5u64 {
            let net = EncoderNet::random(
                &EncoderSpec {
                    input_dim: 4,
                    hidden: vec![6, 5],
                    embedding_dim: 3,
                    activation: if seed % 2 == 0 {
                        Activation::Tanh
                    } else {
                        Activation::Softplus
                    },
                },
                2,
                seed,
            )
            .unwrap();
            let x = random_batch(5, 4, 100 + seed);
            let w = random_batch(5, 3, 200 + seed);
            let cache = net.forward(x.view()).unwrap();
            let e = cache.embeddings().clone();
            let upstream = &w + &(e.mapv(|v| 1.5 * v * v));
            let analytic = net.backward(&cache, upstream.view()).unwrap();
            let flat: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
            // head is not touched by the encoder loss
            let tensor_count = flat.len() - 1;
            for ti in 0..tensor_count {
                for k in 0..flat[ti].len() {
                    let mut plus = net.clone();
                    plus.tensors_mut()[ti][k] += h;
                    let mut minus = net.clone();
                    minus.tensors_mut()[ti][k] -= h;
                    let fd = (scalar_loss(&plus, &x, &w) - scalar_loss(&minus, &x, &w)) / (2.0 * h);
                    let a = flat[ti][k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-5, "tensor {ti} idx {k}: analytic {a} fd {fd}");
                }
            }
        }
    }

    #[test]
    fn jacobian_vector_products_match_central_differences() {
        let h = 1e-5;
        let net = EncoderNet::random(&small_spec(), 2, 8).unwrap();
        let x = random_batch(3, 5, 9);
        let dir = random_batch(1, 7, 10).row(0).to_owned();
        let cache = net.forward(x.view()).unwrap();
        let probe = random_batch(3, 4, 12);
        let grads = net.backward(&cache, probe.view()).unwrap();
        // directional derivative of <probe, e> along a hidden-layer bias direction
        let analytic = grads.biases[0].dot(&dir);
        let mut plus = net.clone();
        plus.layers[0].bias.scaled_add(h, &dir);
        let mut minus = net.clone();
        minus.layers[0].bias.scaled_add(-h, &dir);
        let f = |n: &EncoderNet| (&n.embed(x.view()).unwrap() * &probe).sum();
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert!((analytic - fd).abs() / fd.abs().max(1e-3) < 1e-5);
    }
}
