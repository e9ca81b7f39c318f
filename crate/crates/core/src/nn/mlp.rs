//! Dense MLP encoder whose output rows are projected onto the unit sphere.
//!
//! Hidden layers use ReLU, the last layer is linear, and the result is
//! L2-normalized per row. Backward propagates through the normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::matrix::{dot, norm, Matrix, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// `y = act(x Wᵀ + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    layers: Vec<Dense>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    /// Normalized output.
    output: Matrix,
    /// Norm of each row of the last pre-normalization activation.
    norms: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradient for each layer's weight and bias, laid out like the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// Flat views in the same order as [`MlpEncoder::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&x| x == 0.0))
    }
}

impl MlpEncoder {
    /// Build from layer widths `[input, hidden.., output]` with uniform
    /// Glorot initialization and zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Argument(format!(
                "encoder needs at least two positive layer widths, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("encoder has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(Error::Shape(format!(
                        "layer {} expects {} inputs but layer {i} emits {}",
                        i + 1,
                        next.in_dim(),
                        l.out_dim()
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Layer widths `[input, hidden.., output]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.output)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, encoder expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut z = x.matmul_t(&layer.weight)?;
            for r in 0..z.rows() {
                z.row_mut(r)
                    .iter_mut()
                    .zip(&layer.bias)
                    .for_each(|(v, b)| *v += b);
            }
            let mut a = z.clone();
            if layer.activation == Activation::Relu {
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        let norms: Vec<f64> = x.row_iter().map(norm).collect();
        for (r, &n) in norms.iter().enumerate() {
            let d = guard(n);
            x.row_mut(r).iter_mut().for_each(|v| *v /= d);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: x,
            norms,
        })
    }

    /// Parameter gradients of `Σ output_grad ⊙ forward(batch)`.
    pub fn backward(&self, batch: &Matrix, output_grad: &Matrix) -> Result<Gradients> {
        let cache = self.forward_cached(batch)?;
        self.backward_cached(&cache, output_grad)
    }

    pub fn backward_cached(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Gradients> {
        if output_grad.shape() != cache.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} for output {:?}",
                output_grad.shape(),
                cache.output.shape()
            )));
        }
        let mut delta = normalize_backward(&cache.output, &cache.norms, output_grad);
        let n = self.layers.len();
        let mut weights = vec![Matrix::zeros(0, 0); n];
        let mut biases = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if layer.activation == Activation::Relu {
                delta
                    .data_mut()
                    .iter_mut()
                    .zip(cache.pre[i].data())
                    .for_each(|(d, &z)| {
                        if z <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            weights[i] = delta.t_matmul(&cache.inputs[i])?;
            let mut db = vec![0.0; layer.out_dim()];
            for row in delta.row_iter() {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            biases[i] = db;
            if i > 0 {
                delta = delta.matmul(&layer.weight)?;
            }
        }
        Ok(Gradients { weights, biases })
    }

    /// Named mutable parameter slices, `layer{i}.weight` then `layer{i}.bias`.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), l.weight.data_mut()),
                    (format!("layer{i}.bias"), l.bias.as_mut_slice()),
                ]
            })
            .collect()
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data().len(), l.bias.len()])
            .collect()
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for x in l.weight.data().iter().chain(&l.bias) {
                h = (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        c.put_u64(
            format!("{prefix}.dims"),
            self.dims().iter().map(|&d| d as u64).collect(),
        );
        for (i, l) in self.layers.iter().enumerate() {
            c.put_matrix(format!("{prefix}.layer{i}.weight"), &l.weight);
            c.put_f64(format!("{prefix}.layer{i}.bias"), l.bias.clone());
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let dims = c.u64s(&format!("{prefix}.dims"))?;
        if dims.len() < 2 {
            return Err(Error::Load(format!("{prefix}: fewer than two layer widths")));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let weight = c.matrix(&format!("{prefix}.layer{i}.weight"))?;
            if weight.shape() != (dims[i + 1] as usize, dims[i] as usize) {
                return Err(Error::Load(format!(
                    "{prefix}.layer{i}: weight {:?} disagrees with dims {dims:?}",
                    weight.shape()
                )));
            }
            layers.push(Dense {
                weight,
                bias: c.f64s(&format!("{prefix}.layer{i}.bias"))?.to_vec(),
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            });
        }
        Self::from_layers(layers).map_err(|e| Error::Load(e.to_string()))
    }
}

/// Backward of row-wise `y = x / |x|`: `(g − y (y·g)) / |x|`.
/// `norms` are the raw row norms; rows that went through the epsilon guard
/// are treated as a plain scale by `1 / (|x| + ε)`.
pub fn normalize_backward(output: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (r, &n) in norms.iter().enumerate() {
        let y = output.row(r);
        let row = out.row_mut(r);
        if n < NORM_EPS {
            let d = guard(n);
            row.iter_mut().for_each(|g| *g /= d);
            continue;
        }
        let yg = dot(y, row);
        row.iter_mut()
            .zip(y)
            .for_each(|(g, &yi)| *g = (*g - yi * yg) / n);
    }
    out
}

fn guard(n: f64) -> f64 {
    if n < NORM_EPS {
        n + NORM_EPS
    } else {
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn identity_encoder() -> MlpEncoder {
        MlpEncoder::from_layers(vec![Dense {
            weight: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_normalizes() {
        let out = identity_encoder()
            .forward(&Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap())
            .unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_row_maps_to_zero() {
        let out = identity_encoder().forward(&Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let enc = identity_encoder();
        assert!(matches!(enc.forward(&Matrix::zeros(1, 3)), Err(Error::Shape(_))));
        let batch = Matrix::zeros(2, 2);
        assert!(matches!(
            enc.backward(&batch, &Matrix::zeros(3, 2)),
            Err(Error::Shape(_))
        ));
        let bad = vec![
            Dense {
                weight: Matrix::zeros(3, 2),
                bias: vec![0.0; 3],
                activation: Activation::Relu,
            },
            Dense {
                weight: Matrix::zeros(2, 4),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            },
        ];
        assert!(MlpEncoder::from_layers(bad).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = substream(1, "t", 0);
        let enc = MlpEncoder::new(&[4, 6, 3], &mut rng).unwrap();
        let batch = Matrix::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let g = enc.backward(&batch, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn normalization_jacobian_is_tangent_projector() {
        // at |x| = 1 the Jacobian of x/|x| is I − x xᵀ
        let x = [0.6, 0.0, 0.8];
        let g = [0.3, -1.2, 0.5];
        let out = Matrix::from_vec(1, 3, x.to_vec()).unwrap();
        let grad = Matrix::from_vec(1, 3, g.to_vec()).unwrap();
        let got = normalize_backward(&out, &[1.0], &grad);
        for i in 0..3 {
            let expected: f64 = (0..3)
                .map(|j| (if i == j { 1.0 } else { 0.0 } - x[i] * x[j]) * g[j])
                .sum();
            assert!((got.get(0, i) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = substream(3, "t", 0);
        let enc = MlpEncoder::new(&[5, 7, 4], &mut rng).unwrap();
        let mut c = Container::new("encoder");
        enc.write_to(&mut c, "voice");
        let back = MlpEncoder::read_from(&Container::decode(&c.encode()).unwrap(), "voice").unwrap();
        assert_eq!(back, enc);
    }

    proptest! {
        #[test]
        fn outputs_are_unit_norm(seed in 0u64..1000, rows in 1usize..6, width in 1usize..9) {
            let mut rng = substream(seed, "enc", 0);
            let enc = MlpEncoder::new(&[3, width, 4], &mut rng).unwrap();
            let data: Vec<f64> = (0..rows * 3).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            let out = enc.forward(&Matrix::from_vec(rows, 3, data).unwrap()).unwrap();
            for row in out.row_iter() {
                let n = crate::nn::matrix::norm(row);
                // an all-dead ReLU layer with zero bias yields the guarded zero row
                prop_assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
            }
        }
    }
}
