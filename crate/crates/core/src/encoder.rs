//! Trainable embedding network: a small multilayer perceptron whose output is
//! L2-normalized, together with its Adam optimizer and step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, ensure_same_shape, matmul, matmul_transpose, normalize_in_place, transpose_matmul, Matrix,
    Rng,
};

/// One affine layer. `weight` is stored `out x in` so `z = x * weight^T + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// MLP with rectified hidden layers, a linear output layer and a final
/// L2-normalization of every output row.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Dense>,
    version: u64,
}

/// Activations recorded by [`Encoder::forward`] for exact backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer (the batch, then post-activation hidden states).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Matrix>,
    /// Norm of each output row before normalization.
    output_norms: Vec<f64>,
    features: Matrix,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every encoder parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.data(), g.bias.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl Encoder {
    /// Glorot-uniform weights, zero biases. `layer_dims` runs input -> ... -> output.
    pub fn new(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::DimMismatch(format!(
                "encoder needs at least two positive layer dims, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                Dense {
                    weight: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::DimMismatch("encoder has no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimMismatch(format!(
                    "layer {i}: bias length {} vs {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::DimMismatch(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Dense::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Incremented on every parameter update; caches from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "encoder expects {} input columns, batch has {}",
                self.input_dim(),
                batch.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = matmul_transpose(&current, &layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let next = if i < last {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(z);
        }

        let mut output_norms = Vec::with_capacity(current.rows());
        for r in 0..current.rows() {
            let n = crate::numerics::norm(current.row(r));
            normalize_in_place(current.row_mut(r)).map_err(|norm| Error::ZeroRow { row: r, norm })?;
            output_norms.push(n);
        }
        let cache = ForwardCache {
            version: self.version,
            inputs,
            pre_activations,
            output_norms,
            features: current.clone(),
        };
        Ok((current, cache))
    }

    /// Forward pass without keeping the activation record.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(f, _)| f)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_features: &Matrix) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                encoder: self.version,
            });
        }
        ensure_same_shape(&cache.features, grad_features)?;

        let mut grad = normalization_backward(&cache.features, &cache.output_norms, grad_features);
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // Rectifier derivative; zero at the kink.
                let pre = &cache.pre_activations[i];
                for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &cache.inputs[i];
            let weight = transpose_matmul(&grad, input)?;
            let mut bias = vec![0.0; grad.cols()];
            for row in grad.row_iter() {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            layers.push(DenseGrad { weight, bias });
            if i > 0 {
                grad = matmul(&grad, &self.layers[i].weight)?;
            }
        }
        layers.reverse();
        Ok(Gradients { layers })
    }
}

/// Backpropagates through row normalization `f = z / |z|`:
/// `dL/dz = (g - f (f . g)) / |z|`.
pub fn normalization_backward(features: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(grad.rows(), grad.cols());
    for r in 0..grad.rows() {
        let f = features.row(r);
        let g = grad.row(r);
        let radial = dot(f, g);
        let inv = 1.0 / norms[r];
        for ((o, &fi), &gi) in out.row_mut(r).iter_mut().zip(f).zip(g) {
            *o = (gi - fi * radial) * inv;
        }
    }
    out
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moments: Vec<Vec<f64>>,
    second_moments: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moments, &self.second_moments)
    }

    pub(crate) fn restore(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        first_moments: Vec<Vec<f64>>,
        second_moments: Vec<Vec<f64>>,
        step: u64,
    ) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first_moments,
            second_moments,
            step,
        }
    }

    /// One Adam step over matching parameter and gradient slices.
    ///
    /// Moment buffers are allocated lazily on the first call and must keep
    /// the same shapes afterwards.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, weight_decay: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first_moments.is_empty() {
            self.first_moments = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second_moments = self.first_moments.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first_moments[k];
            let v = &mut self.second_moments[k];
            assert_eq!(p.len(), g.len(), "gradient shape mismatch in tensor {k}");
            assert_eq!(m.len(), g.len(), "moment shape mismatch in tensor {k}");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Applies one optimizer step to the encoder and invalidates older caches.
pub fn apply_gradients(enc: &mut Encoder, opt: &mut Adam, grads: &Gradients, weight_decay: f64) {
    opt.update(enc.param_slices_mut(), grads.slices(), weight_decay);
    enc.version += 1;
}

/// Step decay: `base_lr * decay_factor^floor(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.base_lr;
        }
        self.base_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    fn identity_encoder() -> Encoder {
        Encoder::from_layers(vec![Dense {
            weight: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        }])
        .unwrap()
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_layer_only_normalizes() {
        let enc = identity_encoder();
        let (f, _) = enc.forward(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert!((f.get(0, 0) - 0.6).abs() < 1e-15 && (f.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_yield_normalized_bias() {
        let enc = Encoder::from_layers(vec![Dense {
            weight: Matrix::zeros(2, 3),
            bias: vec![3.0, -4.0],
        }])
        .unwrap();
        let mut rng = Rng::new(1);
        let f = enc.embed(&random_batch(&mut rng, 5, 3)).unwrap();
        for row in f.row_iter() {
            assert!((row[0] - 0.6).abs() < 1e-15 && (row[1] + 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic_and_unit_norm() {
        let mut rng = Rng::new(2);
        let enc = Encoder::new(&[6, 8, 4], &mut rng).unwrap();
        let x = random_batch(&mut rng, 7, 6);
        let a = enc.embed(&x).unwrap();
        let b = enc.embed(&x).unwrap();
        assert_eq!(a, b);
        for row in a.row_iter() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let enc = identity_encoder();
        assert!(matches!(
            enc.forward(&Matrix::zeros(1, 3)),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn from_layers_rejects_broken_chain() {
        let err = Encoder::from_layers(vec![
            Dense {
                weight: Matrix::zeros(4, 3),
                bias: vec![0.0; 4],
            },
            Dense {
                weight: Matrix::zeros(2, 5),
                bias: vec![0.0; 2],
            },
        ]);
        assert!(matches!(err, Err(Error::DimMismatch(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut rng = Rng::new(3);
        let enc = Encoder::new(&[5, 7, 3], &mut rng).unwrap();
        let (f, cache) = enc.forward(&random_batch(&mut rng, 4, 5)).unwrap();
        let grads = enc.backward(&cache, &Matrix::zeros(f.rows(), f.cols())).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn radial_gradient_is_annihilated_by_normalization() {
        let mut rng = Rng::new(4);
        let enc = Encoder::new(&[5, 6, 4], &mut rng).unwrap();
        let (f, cache) = enc.forward(&random_batch(&mut rng, 3, 5)).unwrap();
        let mut g = f.clone();
        g.scale(2.5);
        let dz = normalization_backward(&f, &cache.output_norms, &g);
        assert!(dz.data().iter().all(|v| v.abs() <= 1e-10));
        let grads = enc.backward(&cache, &g).unwrap();
        for s in grads.slices() {
            assert!(s.iter().all(|v| v.abs() <= 1e-10));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(5);
        let mut enc = Encoder::new(&[3, 2], &mut rng).unwrap();
        let (f, cache) = enc.forward(&random_batch(&mut rng, 2, 3)).unwrap();
        let mut g = Matrix::zeros(f.rows(), f.cols());
        g.set(0, 0, 1.0);
        let grads = enc.backward(&cache, &g).unwrap();
        let mut opt = Adam::new(1e-3);
        apply_gradients(&mut enc, &mut opt, &grads, 0.0);
        assert!(matches!(
            enc.backward(&cache, &g),
            Err(Error::StaleCache { cache: 0, encoder: 1 })
        ));
    }

    /// Scalar objective `sum(g * f)` has feature gradient `g`, so parameter
    /// gradients can be checked against central differences of that sum.
    #[test]
    fn single_layer_gradients_match_central_differences() {
        let mut rng = Rng::new(6);
        let enc = Encoder::new(&[4, 3], &mut rng).unwrap();
        let x = random_batch(&mut rng, 1, 4);
        let g = random_batch(&mut rng, 1, 3);
        let objective = |e: &Encoder| -> f64 {
            let f = e.embed(&x).unwrap();
            f.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = enc.forward(&x).unwrap();
        let analytic = enc.backward(&cache, &g).unwrap();
        let h = 1e-5;
        let flat_analytic: Vec<f64> = analytic.slices().concat();
        let mut k = 0;
        let n_tensors = enc.param_slices().len();
        for t in 0..n_tensors {
            let len = enc.param_slices()[t].len();
            for i in 0..len {
                let mut plus = enc.clone();
                plus.param_slices_mut()[t][i] += h;
                let mut minus = enc.clone();
                minus.param_slices_mut()[t][i] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = flat_analytic[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel <= 1e-6 || (a - numeric).abs() < 1e-10, "param {k}: {a} vs {numeric}");
                k += 1;
            }
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut rng = Rng::new(8);
        let mut enc = Encoder::new(&[3, 4, 2], &mut rng).unwrap();
        let before = enc.clone();
        let zero = Gradients {
            layers: enc
                .layers()
                .iter()
                .map(|l| DenseGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        };
        let mut opt = Adam::new(1e-2);
        for _ in 0..3 {
            apply_gradients(&mut enc, &mut opt, &zero, 0.0);
        }
        assert_eq!(enc.param_slices(), before.param_slices());
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn adam_matches_hand_stepped_recurrence() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut opt = Adam::new(lr);
        let mut p = [0.5];
        let mut m = 0.0;
        let mut v = 0.0;
        let mut want = 0.5;
        for t in 1..=2 {
            let g = 1.0;
            opt.update(vec![&mut p[..]], vec![&[g][..]], 0.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - f64::powi(b1, t));
            let v_hat = v / (1.0 - f64::powi(b2, t));
            want -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p[0] - want).abs() <= 1e-12, "{} vs {}", p[0], want);
        // Bias-corrected unit gradients move by ~lr each step.
        assert!((p[0] - (0.5 - 2.0 * lr)).abs() < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_geometrically() {
        let lr = 3.5e-4;
        let mut opt = Adam::new(lr);
        let mut p = [2.0, -1.0];
        for _ in 0..4 {
            opt.update(vec![&mut p[..]], vec![&[0.0, 0.0][..]], 0.0005);
        }
        let factor = (1.0 - lr * 0.0005f64).powi(4);
        assert!((p[0] - 2.0 * factor).abs() < 1e-15);
        assert!((p[1] + factor).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule {
            base_lr: 3.5e-4,
            decay_factor: 0.1,
            decay_every: 50,
            total_epochs: 150,
        };
        assert_eq!(s.lr(0), 3.5e-4);
        assert_eq!(s.lr(49), 3.5e-4);
        assert!((s.lr(50) - 3.5e-5).abs() < 1e-18);
        assert!((s.lr(100) - 3.5e-6).abs() < 1e-19);
    }
}
