//! The fixed set of training objectives and their analytic gradients.
//!
//! Gradients are hand-derived per objective; there is no general autodiff.
//! [`finite_diff_grads`] provides the central-difference oracle that every
//! analytic path is tested against.

use crate::error::{Error, Result};
use crate::numcore::encoder::{EncoderParams, Gradients};
use crate::numcore::matrix::{dot, DenseMatrix};
use crate::ROTATION_CLASSES;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// One training objective together with its inputs. The encoder parameters
/// being differentiated are always the online ones; anything else entering a
/// variant (targets, probabilities, centroids) is treated as a constant.
#[derive(Debug)]
pub enum LossSpec<'a> {
    /// Mean over rows of `0.5 * |f(x) - t|^2` against fixed targets.
    /// Diagnostic objective used by tests and the gradient checker.
    MeanSquared {
        batch: &'a DenseMatrix,
        targets: &'a DenseMatrix,
    },
    /// Mean cross-entropy from fixed target assignment probabilities to the
    /// online soft assignment of the augmented batch: the target branch is a
    /// constant, so no gradient flows through it.
    Cluster {
        aug_batch: &'a DenseMatrix,
        target_probs: &'a DenseMatrix,
        /// Column-per-cluster centroid matrix, `rep_dim x n_clusters`.
        centroids: &'a DenseMatrix,
        tau: f64,
    },
    /// Mean cross-entropy of the rotation head against drawn rotation labels.
    Rotation {
        rotated_batch: &'a DenseMatrix,
        labels: &'a [usize],
    },
    /// Spectral contrastive objective over a clean/augmented batch pair:
    /// `-2 mean_i <f(x_i), f(x~_i)> + mean_{i != j} <f(x_i), f(x_j)>^2`.
    Spectral {
        batch: &'a DenseMatrix,
        aug_batch: &'a DenseMatrix,
    },
}

impl LossSpec<'_> {
    fn name(&self) -> &'static str {
        match self {
            LossSpec::MeanSquared { .. } => "mean-squared",
            LossSpec::Cluster { .. } => "cluster",
            LossSpec::Rotation { .. } => "rotation",
            LossSpec::Spectral { .. } => "spectral",
        }
    }
}

/// Loss value and analytic gradients w.r.t. `params` for one objective.
pub fn compute_loss_and_grads(
    params: &EncoderParams,
    spec: &LossSpec<'_>,
) -> Result<(f64, Gradients)> {
    let (loss, grads) = match spec {
        LossSpec::MeanSquared { batch, targets } => mean_squared(params, batch, targets)?,
        LossSpec::Cluster {
            aug_batch,
            target_probs,
            centroids,
            tau,
        } => cluster(params, aug_batch, target_probs, centroids, *tau)?,
        LossSpec::Rotation {
            rotated_batch,
            labels,
        } => rotation(params, rotated_batch, labels)?,
        LossSpec::Spectral { batch, aug_batch } => spectral(params, batch, aug_batch)?,
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite {} loss value {loss}",
            spec.name()
        )));
    }
    Ok((loss, grads))
}

/// Loss value only.
pub fn compute_loss(params: &EncoderParams, spec: &LossSpec<'_>) -> Result<f64> {
    Ok(compute_loss_and_grads(params, spec)?.0)
}

fn require_nonempty(batch: &DenseMatrix, what: &str) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::Config(format!("{what} needs a nonempty batch")));
    }
    Ok(())
}

fn mean_squared(
    params: &EncoderParams,
    batch: &DenseMatrix,
    targets: &DenseMatrix,
) -> Result<(f64, Gradients)> {
    require_nonempty(batch, "mean-squared loss")?;
    let cache = params.forward_cached(batch)?;
    if targets.rows() != cache.reps.rows() || targets.cols() != cache.reps.cols() {
        return Err(Error::Shape(format!(
            "targets {}x{} vs representations {}x{}",
            targets.rows(),
            targets.cols(),
            cache.reps.rows(),
            cache.reps.cols()
        )));
    }
    let n = batch.rows() as f64;
    let mut loss = 0.0;
    let mut d_reps = cache.reps.clone();
    d_reps.add_scaled(targets, -1.0)?;
    for row in d_reps.iter_rows() {
        loss += 0.5 * dot(row, row);
    }
    loss /= n;
    d_reps.scale(1.0 / n);
    let grads = params.backward(&cache, &d_reps)?;
    Ok((loss, grads))
}

fn cluster(
    params: &EncoderParams,
    aug_batch: &DenseMatrix,
    target_probs: &DenseMatrix,
    centroids: &DenseMatrix,
    tau: f64,
) -> Result<(f64, Gradients)> {
    require_nonempty(aug_batch, "cluster loss")?;
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if centroids.rows() != params.rep_dim() {
        return Err(Error::Shape(format!(
            "centroid dim {} vs representation dim {}",
            centroids.rows(),
            params.rep_dim()
        )));
    }
    let n = aug_batch.rows();
    let g = centroids.cols();
    if target_probs.rows() != n || target_probs.cols() != g {
        return Err(Error::Shape(format!(
            "target probabilities {}x{} vs expected {n}x{g}",
            target_probs.rows(),
            target_probs.cols()
        )));
    }
    let cache = params.forward_cached(aug_batch)?;
    let mut logits = cache.reps.matmul(centroids)?;
    logits.scale(1.0 / tau);
    let q = softmax_rows(&logits);
    let mut loss = 0.0;
    for i in 0..n {
        for c in 0..g {
            let p = target_probs.get(i, c);
            if p != 0.0 {
                let qv = q.get(i, c);
                if qv <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "online assignment probability underflowed to zero at sample {i}, \
                         cluster {c}, with nonzero target mass {p}"
                    )));
                }
                loss -= p * qv.ln();
            }
        }
    }
    loss /= n as f64;
    // dL/dlogits = (q - p) / n, then back through the 1/tau scaling.
    let mut d_logits = q;
    d_logits.add_scaled(target_probs, -1.0)?;
    d_logits.scale(1.0 / (n as f64 * tau));
    let d_reps = d_logits.matmul_bt(centroids)?;
    let grads = params.backward(&cache, &d_reps)?;
    Ok((loss, grads))
}

fn rotation(
    params: &EncoderParams,
    rotated_batch: &DenseMatrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    require_nonempty(rotated_batch, "rotation loss")?;
    let n = rotated_batch.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} rotated samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= ROTATION_CLASSES) {
        return Err(Error::Range(format!(
            "rotation label {bad} outside 0..{ROTATION_CLASSES}"
        )));
    }
    let cache = params.forward_cached(rotated_batch)?;
    let logits = params.rot_logits(&cache.reps)?;
    let probs = softmax_rows(&logits);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.get(i, label);
        if p <= 0.0 {
            return Err(Error::Numerical(format!(
                "rotation probability underflowed to zero at sample {i}, label {label}"
            )));
        }
        loss -= p.ln();
    }
    loss /= n as f64;
    let mut d_logits = probs;
    for (i, &label) in labels.iter().enumerate() {
        let v = d_logits.get(i, label);
        d_logits.set(i, label, v - 1.0);
    }
    d_logits.scale(1.0 / n as f64);
    let d_rot_head = cache.reps.matmul_at(&d_logits)?;
    let d_reps = d_logits.matmul_bt(&params.rot_head)?;
    let mut grads = params.backward(&cache, &d_reps)?;
    grads.rot_head = d_rot_head;
    Ok((loss, grads))
}

fn spectral(
    params: &EncoderParams,
    batch: &DenseMatrix,
    aug_batch: &DenseMatrix,
) -> Result<(f64, Gradients)> {
    let n = batch.rows();
    if n < 2 {
        return Err(Error::Config(
            "spectral loss needs at least two samples".into(),
        ));
    }
    if aug_batch.rows() != n {
        return Err(Error::Shape(format!(
            "clean batch has {n} rows, augmented batch {}",
            aug_batch.rows()
        )));
    }
    let clean = params.forward_cached(batch)?;
    let aug = params.forward_cached(aug_batch)?;
    let nf = n as f64;
    let pairs = nf * (nf - 1.0);

    let mut align = 0.0;
    for i in 0..n {
        align += dot(clean.reps.row(i), aug.reps.row(i));
    }
    // Gram of clean representations with zeroed diagonal: only i != j pairs
    // enter the repulsion term.
    let mut gram = clean.reps.matmul_bt(&clean.reps)?;
    let mut repulse = 0.0;
    for i in 0..n {
        gram.set(i, i, 0.0);
        for j in 0..n {
            let v = gram.get(i, j);
            repulse += v * v;
        }
    }
    let loss = -2.0 * align / nf + repulse / pairs;

    // d/dr_i = -(2/n) r~_i + (4 / (n(n-1))) sum_{j != i} <r_i, r_j> r_j.
    let mut d_clean = gram.matmul(&clean.reps)?;
    d_clean.scale(4.0 / pairs);
    d_clean.add_scaled(&aug.reps, -2.0 / nf)?;
    let mut d_aug = clean.reps.clone();
    d_aug.scale(-2.0 / nf);

    let mut grads = params.backward(&clean, &d_clean)?;
    grads.add(&params.backward(&aug, &d_aug)?)?;
    Ok((loss, grads))
}

/// Central-difference gradients `(f(p + eps) - f(p - eps)) / (2 eps)` per
/// scalar parameter; the oracle for every analytic gradient in this module.
pub fn finite_diff_grads<F>(params: &EncoderParams, mut f: F, eps: f64) -> Result<Gradients>
where
    F: FnMut(&EncoderParams) -> Result<f64>,
{
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Config(format!("step size {eps} must be positive")));
    }
    let flat = params.to_flat();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += eps;
        let mut minus = flat.clone();
        minus[i] -= eps;
        let fp = f(&params.from_flat_like(&plus)?)?;
        let fm = f(&params.from_flat_like(&minus)?)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Gradients::from_flat_like(params, &grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::encoder::{LinearLayer, NORM_FLOOR};
    use crate::rng::{Purpose, StreamRng};

    fn random_params(seed: u64, d_in: usize, rep: usize) -> EncoderParams {
        let mut rng = StreamRng::for_purpose(seed, Purpose::GradCheck);
        EncoderParams::init(&mut rng, d_in, &[6], rep)
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> DenseMatrix {
        let mut rng = StreamRng::for_purpose(seed.wrapping_add(1), Purpose::GradCheck);
        DenseMatrix::from_fn(n, d, |_, _| rng.normal())
    }

    fn max_rel_err(analytic: &Gradients, fd: &Gradients) -> f64 {
        analytic
            .to_flat()
            .iter()
            .zip(fd.to_flat())
            .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn mean_squared_is_zero_at_its_own_output() {
        let params = random_params(1, 4, 3);
        let batch = random_batch(1, 5, 4);
        let targets = params.forward(&batch).unwrap();
        let (loss, grads) = compute_loss_and_grads(
            &params,
            &LossSpec::MeanSquared {
                batch: &batch,
                targets: &targets,
            },
        )
        .unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grads.max_abs() < 1e-12);
    }

    #[test]
    fn zero_rotation_head_gives_uniform_log_loss() {
        let mut rng = StreamRng::for_purpose(2, Purpose::GradCheck);
        let mut params = EncoderParams::init(&mut rng, 4, &[5], 3);
        params.rot_head = DenseMatrix::zeros(3, ROTATION_CLASSES);
        let batch = random_batch(2, 6, 4);
        let labels = vec![0, 1, 2, 3, 0, 1];
        let loss = compute_loss(
            &params,
            &LossSpec::Rotation {
                rotated_batch: &batch,
                labels: &labels,
            },
        )
        .unwrap();
        assert!((loss - (ROTATION_CLASSES as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn spectral_on_collapsed_encoder_is_minus_one() {
        // Zero weights with a nonzero bias map every input to the same
        // unit vector: attraction gives -2, repulsion gives +1.
        let params = EncoderParams::new(
            vec![LinearLayer {
                weight: DenseMatrix::zeros(3, 4),
                bias: vec![0.3, -0.4, 0.5],
            }],
            DenseMatrix::zeros(3, ROTATION_CLASSES),
        )
        .unwrap();
        let batch = random_batch(3, 5, 4);
        let aug = random_batch(4, 5, 4);
        let loss = compute_loss(
            &params,
            &LossSpec::Spectral {
                batch: &batch,
                aug_batch: &aug,
            },
        )
        .unwrap();
        assert!((loss - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_recovers_square_derivative() {
        let params = EncoderParams::new(
            vec![LinearLayer {
                weight: DenseMatrix::new(1, 1, vec![3.0]).unwrap(),
                bias: vec![0.0],
            }],
            DenseMatrix::zeros(1, ROTATION_CLASSES),
        )
        .unwrap();
        let fd = finite_diff_grads(
            &params,
            |p| Ok(p.layers()[0].weight.get(0, 0).powi(2)),
            1e-5,
        )
        .unwrap();
        assert!((fd.layers[0].weight.get(0, 0) - 6.0).abs() < 1e-6);
        let fd_const = finite_diff_grads(&params, |_| Ok(42.0), 1e-5).unwrap();
        assert_eq!(fd_const.max_abs(), 0.0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_per_objective() {
        let params = random_params(5, 4, 3);
        let batch = random_batch(5, 5, 4);
        let aug = random_batch(6, 5, 4);
        let mut crng = StreamRng::for_purpose(7, Purpose::GradCheck);
        let mut centroids = DenseMatrix::from_fn(3, 4, |_, _| crng.normal());
        for c in 0..centroids.cols() {
            let norm: f64 = (0..centroids.rows())
                .map(|r| centroids.get(r, c).powi(2))
                .sum::<f64>()
                .sqrt();
            for r in 0..centroids.rows() {
                centroids.set(r, c, centroids.get(r, c) / norm.max(NORM_FLOOR));
            }
        }
        let target_probs = softmax_rows(&random_batch(8, 5, 4));
        let targets = random_params(9, 4, 3).forward(&batch).unwrap();
        let labels = vec![3, 1, 0, 2, 1];

        let specs = [
            LossSpec::MeanSquared {
                batch: &batch,
                targets: &targets,
            },
            LossSpec::Cluster {
                aug_batch: &aug,
                target_probs: &target_probs,
                centroids: &centroids,
                tau: 0.1,
            },
            LossSpec::Rotation {
                rotated_batch: &batch,
                labels: &labels,
            },
            LossSpec::Spectral {
                batch: &batch,
                aug_batch: &aug,
            },
        ];
        for spec in &specs {
            let (_, analytic) = compute_loss_and_grads(&params, spec).unwrap();
            let fd = finite_diff_grads(&params, |p| compute_loss(p, spec), 1e-5).unwrap();
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "{} gradient error {err}", spec.name());
        }
    }

    #[test]
    fn cluster_loss_treats_target_probabilities_as_constants() {
        // Moving the target distribution changes the loss value, but the
        // returned gradients only ever cover the online parameters.
        let params = random_params(11, 4, 3);
        let aug = random_batch(11, 4, 4);
        let centroids = DenseMatrix::from_fn(3, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let p1 = DenseMatrix::from_fn(4, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let p2 = DenseMatrix::from_fn(4, 2, |_, _| 0.5);
        let l1 = compute_loss(
            &params,
            &LossSpec::Cluster {
                aug_batch: &aug,
                target_probs: &p1,
                centroids: &centroids,
                tau: 0.5,
            },
        )
        .unwrap();
        let l2 = compute_loss(
            &params,
            &LossSpec::Cluster {
                aug_batch: &aug,
                target_probs: &p2,
                centroids: &centroids,
                tau: 0.5,
            },
        )
        .unwrap();
        assert!((l1 - l2).abs() > 1e-9, "loss should depend on the targets");
    }
}
