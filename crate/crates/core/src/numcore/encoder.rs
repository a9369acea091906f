//! Tanh MLP encoder with L2-normalized outputs and its exact reverse pass.

use crate::error::{Error, Result};
use crate::numcore::matrix::{dot, DenseMatrix};
use crate::rng::StreamRng;
use crate::ROTATION_CLASSES;

/// Rows whose pre-normalization norm is at or below this floor map to the
/// first basis vector and pass no gradient.
pub const NORM_FLOOR: f64 = 1e-12;

/// One affine layer; `weight` is `(out x in)`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Encoder parameters: a stack of affine layers with tanh between them (the
/// last layer is linear, its rows are then L2-normalized) plus a rotation
/// head mapping representations to [`ROTATION_CLASSES`] logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<LinearLayer>,
    pub rot_head: DenseMatrix,
}

/// Per-layer gradient, same shape as the corresponding [`LinearLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Gradients for every parameter of an [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub rot_head: DenseMatrix,
}

/// Intermediate state of one forward pass, kept for the reverse pass.
///
/// `activations[0]` is the input batch; `activations[l + 1]` is the output of
/// layer `l` (post-tanh for hidden layers, pre-normalization for the last).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<DenseMatrix>,
    pub prenorm_norms: Vec<f64>,
    pub reps: DenseMatrix,
}

impl EncoderParams {
    /// Validates layer chaining and the rotation-head shape.
    pub fn new(layers: Vec<LinearLayer>, rot_head: DenseMatrix) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!(
                    "layer {l}: bias length {} vs output dim {}",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if l > 0 && layer.input_dim() != layers[l - 1].output_dim() {
                return Err(Error::Shape(format!(
                    "layer {l}: input dim {} does not chain from {}",
                    layer.input_dim(),
                    layers[l - 1].output_dim()
                )));
            }
        }
        let rep_dim = layers.last().expect("nonempty").output_dim();
        if rot_head.rows() != rep_dim || rot_head.cols() != ROTATION_CLASSES {
            return Err(Error::Shape(format!(
                "rotation head {}x{} vs expected {}x{}",
                rot_head.rows(),
                rot_head.cols(),
                rep_dim,
                ROTATION_CLASSES
            )));
        }
        Ok(EncoderParams { layers, rot_head })
    }

    /// Seeded initialization: weights are normal with scale `1/sqrt(fan_in)`,
    /// biases zero, rotation head normal with scale `1/sqrt(rep_dim)`.
    pub fn init(rng: &mut StreamRng, input_dim: usize, hidden: &[usize], rep_dim: usize) -> Self {
        Self::init_scaled(rng, input_dim, hidden, rep_dim, 1.0)
    }

    /// [`Self::init`] with the weight scale multiplied by `gain`. Gains above 1
    /// make the initial map rougher (more augmentation-sensitive); the rotation
    /// head keeps its `1/sqrt(rep_dim)` scale regardless.
    pub fn init_scaled(
        rng: &mut StreamRng,
        input_dim: usize,
        hidden: &[usize],
        rep_dim: usize,
        gain: f64,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(rep_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = gain / (fan_in as f64).sqrt();
                LinearLayer {
                    weight: DenseMatrix::from_fn(fan_out, fan_in, |_, _| rng.normal() * scale),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        let rot_scale = 1.0 / (rep_dim as f64).sqrt();
        let rot_head = DenseMatrix::from_fn(rep_dim, ROTATION_CLASSES, |_, _| {
            rng.normal() * rot_scale
        });
        EncoderParams { layers, rot_head }
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn rep_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    /// Unit-norm representations of a batch (rows are samples).
    pub fn forward(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_cached(batch)?.reps)
    }

    /// Forward pass keeping every intermediate needed by [`Self::backward`].
    pub fn forward_cached(&self, batch: &DenseMatrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch width {} vs encoder input dim {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = activations[l].matmul_bt(&layer.weight)?;
            for r in 0..n {
                let row = z.row_mut(r);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if l < last {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(z);
        }
        let prenorm = activations.last().expect("nonempty");
        let mut prenorm_norms = Vec::with_capacity(n);
        let mut reps = DenseMatrix::zeros(n, self.rep_dim());
        for r in 0..n {
            let row = prenorm.row(r);
            let norm = dot(row, row).sqrt();
            prenorm_norms.push(norm);
            let out = reps.row_mut(r);
            if norm <= NORM_FLOOR {
                out[0] = 1.0;
            } else {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        Ok(ForwardCache {
            activations,
            prenorm_norms,
            reps,
        })
    }

    /// Rotation-head logits for already-normalized representations.
    pub fn rot_logits(&self, reps: &DenseMatrix) -> Result<DenseMatrix> {
        reps.matmul(&self.rot_head)
    }

    /// Reverse pass from a gradient w.r.t. the normalized representations.
    /// The returned rotation-head gradient is zero; objectives that use the
    /// head fill it in themselves.
    pub fn backward(&self, cache: &ForwardCache, d_reps: &DenseMatrix) -> Result<Gradients> {
        let n = cache.reps.rows();
        if d_reps.rows() != n || d_reps.cols() != self.rep_dim() {
            return Err(Error::Shape(format!(
                "representation gradient {}x{} vs {}x{}",
                d_reps.rows(),
                d_reps.cols(),
                n,
                self.rep_dim()
            )));
        }
        // Through row normalization: r = z / |z|, dz = (g - (g . r) r) / |z|.
        let prenorm = cache.activations.last().expect("nonempty");
        let mut d_act = DenseMatrix::zeros(n, prenorm.cols());
        for r in 0..n {
            let norm = cache.prenorm_norms[r];
            if norm <= NORM_FLOOR {
                continue;
            }
            let g = d_reps.row(r);
            let rep = cache.reps.row(r);
            let gr = dot(g, rep);
            let out = d_act.row_mut(r);
            for c in 0..out.len() {
                out[c] = (g[c] - gr * rep[c]) / norm;
            }
        }
        let last = self.layers.len() - 1;
        let mut layer_grads = vec![None; self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let mut d_z = d_act;
            if l < last {
                // d_act is w.r.t. post-tanh output a; dz = da * (1 - a^2).
                let a = &cache.activations[l + 1];
                for (v, &av) in d_z.data_mut().iter_mut().zip(a.data()) {
                    *v *= 1.0 - av * av;
                }
            }
            let d_weight = d_z.matmul_at(&cache.activations[l])?;
            let d_bias = d_z.col_sums();
            d_act = d_z.matmul(&self.layers[l].weight)?;
            layer_grads[l] = Some(LayerGrad {
                weight: d_weight,
                bias: d_bias,
            });
        }
        Ok(Gradients {
            layers: layer_grads.into_iter().map(|g| g.expect("filled")).collect(),
            rot_head: DenseMatrix::zeros(self.rep_dim(), ROTATION_CLASSES),
        })
    }

    /// Total number of scalar parameters (weights, biases, rotation head).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum::<usize>()
            + self.rot_head.data().len()
    }

    /// Flattens all parameters in a stable order: per layer weight then bias,
    /// finally the rotation head.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend_from_slice(layer.weight.data());
            flat.extend_from_slice(&layer.bias);
        }
        flat.extend_from_slice(self.rot_head.data());
        flat
    }

    /// Rebuilds parameters with this one's shapes from a flat vector in
    /// [`Self::to_flat`] order.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<EncoderParams> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector length {} vs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        let mut take = |len: usize| {
            let slice = flat[pos..pos + len].to_vec();
            pos += len;
            slice
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (o, i) = (l.output_dim(), l.input_dim());
                Ok(LinearLayer {
                    weight: DenseMatrix::new(o, i, take(o * i))?,
                    bias: take(o),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rot_head = DenseMatrix::new(
            self.rot_head.rows(),
            self.rot_head.cols(),
            take(self.rot_head.data().len()),
        )?;
        EncoderParams::new(layers, rot_head)
    }
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Gradients {
        Gradients {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: DenseMatrix::zeros(l.output_dim(), l.input_dim()),
                    bias: vec![0.0; l.output_dim()],
                })
                .collect(),
            rot_head: DenseMatrix::zeros(params.rot_head.rows(), params.rot_head.cols()),
        }
    }

    /// Accumulates `other` into `self`.
    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, 1.0)?;
            if a.bias.len() != b.bias.len() {
                return Err(Error::Shape("gradient bias length mismatch".into()));
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        self.rot_head.add_scaled(&other.rot_head, 1.0)
    }

    /// Flat view in the same order as [`EncoderParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            flat.extend_from_slice(layer.weight.data());
            flat.extend_from_slice(&layer.bias);
        }
        flat.extend_from_slice(self.rot_head.data());
        flat
    }

    /// Builds gradients shaped like `params` from a flat vector.
    pub fn from_flat_like(params: &EncoderParams, flat: &[f64]) -> Result<Gradients> {
        let p = params.from_flat_like(flat)?;
        Ok(Gradients {
            layers: p
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: l.weight.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            rot_head: p.rot_head.clone(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// One gradient-descent step: `params - lr * grads`. `lr = 0` is a no-op.
pub fn sgd_step(params: &EncoderParams, grads: &Gradients, lr: f64) -> Result<EncoderParams> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
    }
    if params.layers.len() != grads.layers.len() {
        return Err(Error::Shape("gradient layer count mismatch".into()));
    }
    let mut out = params.clone();
    for (layer, grad) in out.layers.iter_mut().zip(&grads.layers) {
        layer.weight.add_scaled(&grad.weight, -lr)?;
        if layer.bias.len() != grad.bias.len() {
            return Err(Error::Shape("gradient bias length mismatch".into()));
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
    out.rot_head.add_scaled(&grads.rot_head, -lr)?;
    Ok(out)
}

/// Exponential moving average: `m * target + (1 - m) * online`.
pub fn ema_update(
    target: &EncoderParams,
    online: &EncoderParams,
    m: f64,
) -> Result<EncoderParams> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} must lie in [0, 1]")));
    }
    let t = target.to_flat();
    let o = online.to_flat();
    if t.len() != o.len() {
        return Err(Error::Shape("target/online parameter shapes differ".into()));
    }
    let mixed: Vec<f64> = t
        .iter()
        .zip(&o)
        .map(|(tv, ov)| m * tv + (1.0 - m) * ov)
        .collect();
    target.from_flat_like(&mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn single_layer(weight: DenseMatrix, bias: Vec<f64>) -> EncoderParams {
        let d = weight.rows();
        EncoderParams::new(
            vec![LinearLayer { weight, bias }],
            DenseMatrix::zeros(d, ROTATION_CLASSES),
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_normalizes_rows() {
        let params = single_layer(
            DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            vec![0.0, 0.0],
        );
        let batch = DenseMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let reps = params.forward(&batch).unwrap();
        assert!((reps.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((reps.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_input_maps_to_normalized_bias() {
        let params = single_layer(DenseMatrix::zeros(2, 2), vec![1.0, 1.0]);
        let batch = DenseMatrix::zeros(1, 2);
        let reps = params.forward(&batch).unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((reps.get(0, 0) - inv_sqrt2).abs() < 1e-15);
        assert!((reps.get(0, 1) - inv_sqrt2).abs() < 1e-15);
    }

    #[test]
    fn random_net_outputs_unit_rows() {
        let mut rng = StreamRng::for_purpose(9, Purpose::ParamInit);
        let params = EncoderParams::init(&mut rng, 6, &[8, 8], 5);
        let batch = DenseMatrix::from_fn(5, 6, |r, c| ((r * 7 + c) as f64).sin());
        let reps = params.forward(&batch).unwrap();
        for row in reps.iter_rows() {
            let norm = dot(row, row).sqrt();
            assert!((norm - 1.0).abs() <= 1e-12, "row norm {norm}");
        }
    }

    #[test]
    fn singular_rows_hit_first_basis_vector_and_pass_no_gradient() {
        let params = single_layer(DenseMatrix::zeros(3, 2), vec![0.0; 3]);
        let batch = DenseMatrix::new(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let cache = params.forward_cached(&batch).unwrap();
        for r in 0..2 {
            assert_eq!(cache.reps.row(r), &[1.0, 0.0, 0.0]);
        }
        let d_reps = DenseMatrix::from_fn(2, 3, |_, _| 1.0);
        let grads = params.backward(&cache, &d_reps).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut rng = StreamRng::for_purpose(2, Purpose::ParamInit);
        let params = EncoderParams::init(&mut rng, 3, &[4], 2);
        let mut grads = Gradients::zeros_like(&params);
        grads.layers[0].weight.set(0, 0, 123.0);
        let stepped = sgd_step(&params, &grads, 0.0).unwrap();
        assert_eq!(stepped, params);
    }

    #[test]
    fn sgd_single_entry_update() {
        let params = single_layer(DenseMatrix::new(1, 1, vec![1.0]).unwrap(), vec![0.0]);
        let mut grads = Gradients::zeros_like(&params);
        grads.layers[0].weight.set(0, 0, 0.5);
        let stepped = sgd_step(&params, &grads, 0.1).unwrap();
        assert!((stepped.layers()[0].weight.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step_on_dyadic_values() {
        let params = single_layer(
            DenseMatrix::new(2, 2, vec![1.0, -0.5, 0.25, 2.0]).unwrap(),
            vec![0.5, -0.25],
        );
        let flat_a: Vec<f64> = vec![0.25; params.param_count()];
        let flat_b: Vec<f64> = vec![0.5; params.param_count()];
        let ga = Gradients::from_flat_like(&params, &flat_a).unwrap();
        let gb = Gradients::from_flat_like(&params, &flat_b).unwrap();
        let mut summed = ga.clone();
        summed.add(&gb).unwrap();
        let two = sgd_step(&sgd_step(&params, &ga, 0.5).unwrap(), &gb, 0.5).unwrap();
        let one = sgd_step(&params, &summed, 0.5).unwrap();
        assert_eq!(two.to_flat(), one.to_flat());
    }

    #[test]
    fn ema_endpoints() {
        let mut rng = StreamRng::for_purpose(4, Purpose::ParamInit);
        let target = EncoderParams::init(&mut rng, 3, &[4], 2);
        let online = EncoderParams::init(&mut rng, 3, &[4], 2);
        assert_eq!(ema_update(&target, &online, 1.0).unwrap(), target);
        assert_eq!(ema_update(&target, &online, 0.0).unwrap(), online);
    }

    #[test]
    fn ema_geometric_decay_toward_frozen_online() {
        let mut rng = StreamRng::for_purpose(8, Purpose::ParamInit);
        let mut target = EncoderParams::init(&mut rng, 3, &[4], 2);
        let online = EncoderParams::init(&mut rng, 3, &[4], 2);
        let gap = |t: &EncoderParams| {
            t.to_flat()
                .iter()
                .zip(online.to_flat())
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        };
        let initial = gap(&target);
        for _ in 0..100 {
            target = ema_update(&target, &online, 0.9).unwrap();
        }
        let expected = 0.9_f64.powi(100);
        let ratio = gap(&target) / initial;
        assert!(
            (ratio / expected - 1.0).abs() < 1e-9,
            "decay ratio {ratio} vs {expected}"
        );
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let mut rng = StreamRng::for_purpose(6, Purpose::ParamInit);
        let params = EncoderParams::init(&mut rng, 5, &[7, 3], 4);
        let rebuilt = params.from_flat_like(&params.to_flat()).unwrap();
        assert_eq!(rebuilt, params);
        assert_eq!(params.to_flat().len(), params.param_count());
    }
}
