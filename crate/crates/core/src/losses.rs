//! Training objectives evaluated on representations: soft centroid
//! assignments, the cluster agreement loss, the rotation-prediction
//! degeneracy loss, and the spectral contrastive baseline.
//!
//! These are the measurement-side forms. The differentiable forms used for
//! parameter updates live in [`crate::numcore::LossSpec`]; tests here pin
//! the two layers to each other.

use crate::clustering::Centroids;
use crate::datasets::{rotate_sample, InputLayout};
use crate::error::{Error, Result};
use crate::numcore::{compute_loss, dot, softmax_rows, DenseMatrix, EncoderParams, LossSpec};
use crate::rng::StreamRng;
use crate::ROTATION_CLASSES;

/// Soft cluster assignments: row-wise softmax of centroid similarities at
/// temperature `tau`. Rows of the result sum to 1.
pub fn assignment_probs(
    reps: &DenseMatrix,
    centroids: &Centroids,
    tau: f64,
) -> Result<DenseMatrix> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let mut logits = reps.matmul(centroids.matrix())?;
    for v in logits.data_mut() {
        *v /= tau;
    }
    Ok(softmax_rows(&logits))
}

/// Mean cross-entropy between the target model's assignment of each clean
/// sample and the online model's assignment of its augmentation. The target
/// distribution acts as a fixed label; no gradient notion applies here.
pub fn cluster_loss(
    online_aug_reps: &DenseMatrix,
    target_clean_reps: &DenseMatrix,
    centroids: &Centroids,
    tau: f64,
) -> Result<f64> {
    if online_aug_reps.rows() != target_clean_reps.rows() || online_aug_reps.rows() == 0 {
        return Err(Error::Shape(format!(
            "online batch {} vs target batch {} rows",
            online_aug_reps.rows(),
            target_clean_reps.rows()
        )));
    }
    let p = assignment_probs(target_clean_reps, centroids, tau)?;
    let q = assignment_probs(online_aug_reps, centroids, tau)?;
    let n = p.rows();
    let mut total = 0.0;
    for i in 0..n {
        for (g, (&pi, &qi)) in p.row(i).iter().zip(q.row(i)).enumerate() {
            if pi > 0.0 {
                if qi <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "assignment probability underflowed for sample {i}, cluster {g}; \
                         temperature {tau} is too sharp"
                    )));
                }
                total -= pi * qi.ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// Rotation-prediction loss: each sample gets a uniformly drawn rotation
/// index, is rotated accordingly, encoded by `params`, and classified by the
/// rotation head; returns the mean cross-entropy against the drawn indices.
pub fn degeneracy_loss(
    params: &EncoderParams,
    batch: &DenseMatrix,
    layout: InputLayout,
    rng: &mut StreamRng,
) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(Error::Config("rotation batch cannot be empty".into()));
    }
    let mut rotated = DenseMatrix::zeros(batch.rows(), batch.cols());
    let mut labels = Vec::with_capacity(batch.rows());
    for i in 0..batch.rows() {
        let idx = rng.next_range(ROTATION_CLASSES);
        rotated.row_mut(i).copy_from_slice(&rotate_sample(batch.row(i), idx, layout)?);
        labels.push(idx);
    }
    compute_loss(
        params,
        &LossSpec::Rotation {
            rotated_batch: &rotated,
            labels: &labels,
        },
    )
}

/// Spectral contrastive loss on a batch of representations and their
/// augmented counterparts: `-2 mean_i <r_i, r~_i> + mean_{i!=j} <r_i, r_j>^2`.
pub fn specloss_local(reps: &DenseMatrix, aug_reps: &DenseMatrix) -> Result<f64> {
    if reps.rows() != aug_reps.rows() || reps.cols() != aug_reps.cols() {
        return Err(Error::Shape(format!(
            "batch {}x{} vs augmented {}x{}",
            reps.rows(),
            reps.cols(),
            aug_reps.rows(),
            aug_reps.cols()
        )));
    }
    let n = reps.rows();
    if n < 2 {
        return Err(Error::Config(format!(
            "spectral loss needs at least 2 samples, got {n}"
        )));
    }
    let mut align = 0.0;
    for i in 0..n {
        align += dot(reps.row(i), aug_reps.row(i));
    }
    let mut spread = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                spread += dot(reps.row(i), reps.row(j)).powi(2);
            }
        }
    }
    Ok(-2.0 * align / n as f64 + spread / (n * (n - 1)) as f64)
}
