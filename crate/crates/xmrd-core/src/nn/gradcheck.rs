//! Finite-difference verification of the analytic backward pass.
//!
//! The probe loss is a fixed random projection of the output features,
//! `L = sum(features * P)`, so its analytic gradient is a plain backward
//! pass with `P` as the output gradient. Every forward runs in training
//! mode with a fresh, identically seeded random stream so dropout masks
//! replay exactly across the two perturbed evaluations.
//!
//! Per-parameter error is `|analytic - fd| / max(|analytic|, |fd|, 1)`:
//! components whose gradient magnitude is below the loss scale of one are
//! compared absolutely, because a central difference with step `1e-5` on a
//! loss of order one carries cancellation noise near `1e-11` and cannot
//! certify relative agreement for vanishing gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{Batch, Encoder, Mode};
use crate::error::Result;
use crate::rng::substream;

const FD_STEP: f64 = 1e-5;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub encoder: String,
    pub checked_parameters: usize,
    pub total_parameters: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the analytic gradient of every (or a seeded subsample of)
/// parameter against central finite differences with step `1e-5`.
pub fn gradient_check(
    encoder: &Encoder<f64>,
    batch: &Batch<f64>,
    tolerance: f64,
    max_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let projection = {
        let mut rng = substream(seed, "gradcheck-projection");
        let n = batch.len();
        let d = encoder.feature_dim();
        Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
    };

    let loss = |enc: &Encoder<f64>| -> Result<f64> {
        let mut rng = substream(seed, "gradcheck-dropout");
        let (f, _) = enc.forward(batch, Mode::Train, Some(&mut rng))?;
        Ok((&f * &projection).sum())
    };

    // Analytic gradient via one traced forward/backward.
    let analytic = {
        let mut rng = substream(seed, "gradcheck-dropout");
        let (_, trace) = encoder.forward(batch, Mode::Train, Some(&mut rng))?;
        let (grads, _) = encoder.backward(&trace, &projection)?;
        grads.flatten()
    };

    // Parameter bookkeeping: flatten() order matches export_arrays order
    // restricted to differentiable slots (running statistics carry no
    // gradient and are skipped here).
    let slots = differentiable_slots(encoder);
    let total: usize = slots.iter().map(|(_, len)| len).sum();
    debug_assert_eq!(total, analytic.len());

    let indices: Vec<usize> = if total <= max_params {
        (0..total).collect()
    } else {
        let mut rng = substream(seed, "gradcheck-select");
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max_params {
            picked.insert(rng.random_range(0..total));
        }
        picked.into_iter().collect()
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for &idx in &indices {
        let (name, offset) = locate(&slots, idx);
        let fd = {
            let mut plus = encoder.clone();
            perturb(&mut plus, idx, FD_STEP);
            let mut minus = encoder.clone();
            perturb(&mut minus, idx, -FD_STEP);
            (loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP)
        };
        let a = analytic[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{offset}]");
        }
    }

    Ok(GradCheckReport {
        encoder: encoder.name().to_string(),
        checked_parameters: indices.len(),
        total_parameters: total,
        max_rel_error: max_rel,
        worst_parameter: worst,
        tolerance,
        pass: max_rel < tolerance,
    })
}

/// Runs the finite-difference check over one stack per layer kind plus a
/// full vision branch and a full language branch, each well under 5000
/// parameters.
pub fn standard_suite(tolerance: f64, max_params: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    use super::LayerSpec::*;

    let vector_input = |n: usize, c: usize, label: &str| {
        let mut rng = substream(seed, &format!("gradcheck-input-{label}"));
        Batch::from_vectors(Array2::from_shape_fn((n, c), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    };
    let sequence_input = |n: usize, t: usize, c: usize, lengths: Vec<usize>, label: &str| {
        let mut rng = substream(seed, &format!("gradcheck-input-{label}"));
        Batch {
            data: ndarray::Array3::from_shape_fn((n, t, c), |_| {
                rng.sample::<f64, _>(StandardNormal)
            }),
            lengths: Some(lengths),
        }
    };

    let mut cases: Vec<(Encoder<f64>, Batch<f64>)> = vec![
        (
            Encoder::stack("dense", (1, 6), &[Dense { units: 5 }], seed)?,
            vector_input(4, 6, "dense"),
        ),
        (
            Encoder::stack(
                "relu",
                (1, 6),
                &[Dense { units: 5 }, Relu, Dense { units: 4 }],
                seed,
            )?,
            vector_input(4, 6, "relu"),
        ),
        (
            Encoder::stack(
                "batch_norm",
                (1, 6),
                &[Dense { units: 5 }, BatchNorm, Dense { units: 4 }],
                seed,
            )?,
            vector_input(5, 6, "batch_norm"),
        ),
        (
            Encoder::stack(
                "dropout",
                (1, 6),
                &[Dense { units: 6 }, Dropout { keep_prob: 0.5 }, Dense { units: 4 }],
                seed,
            )?,
            vector_input(4, 6, "dropout"),
        ),
        (
            Encoder::stack(
                "conv1d_k3",
                (5, 3),
                &[Conv1dK3 { channels: 4 }, GlobalAvgPool { masked: false }],
                seed,
            )?,
            sequence_input(3, 5, 3, vec![5, 5, 5], "conv1d_k3"),
        ),
        (
            Encoder::stack(
                "masked_pool",
                (6, 3),
                &[Conv1dK3 { channels: 4 }, Relu, GlobalAvgPool { masked: true }],
                seed,
            )?,
            sequence_input(3, 6, 3, vec![2, 6, 4], "masked_pool"),
        ),
        (
            Encoder::stack(
                "residual",
                (1, 6),
                &[
                    Dense { units: 6 },
                    Residual {
                        body: vec![Dense { units: 6 }, Relu, Dense { units: 6 }],
                    },
                    Dense { units: 3 },
                ],
                seed,
            )?,
            vector_input(4, 6, "residual"),
        ),
        (
            Encoder::vision(
                8,
                &[
                    Dense { units: 16 },
                    BatchNorm,
                    Relu,
                    Dense { units: 12 },
                    BatchNorm,
                    Relu,
                    Dropout { keep_prob: 0.5 },
                    Dense { units: 8 },
                    BatchNorm,
                ],
                seed,
            )?,
            vector_input(6, 8, "vision"),
        ),
        (
            Encoder::language(
                6,
                5,
                &[
                    Conv1dK3 { channels: 8 },
                    BatchNorm,
                    Relu,
                    Conv1dK3 { channels: 8 },
                    GlobalAvgPool { masked: true },
                ],
                seed,
            )?,
            sequence_input(4, 6, 5, vec![3, 6, 2, 4], "language"),
        ),
    ];

    cases
        .drain(..)
        .map(|(encoder, batch)| gradient_check(&encoder, &batch, tolerance, max_params, seed))
        .collect()
}

/// Exported arrays that carry gradients, in flatten() order.
fn differentiable_slots(encoder: &Encoder<f64>) -> Vec<(String, usize)> {
    encoder
        .export_arrays("")
        .into_iter()
        .filter(|(name, _, _)| !name.contains("running_"))
        .map(|(name, _, data)| (name, data.len()))
        .collect()
}

fn locate(slots: &[(String, usize)], mut idx: usize) -> (String, usize) {
    for (name, len) in slots {
        if idx < *len {
            return (name.clone(), idx);
        }
        idx -= len;
    }
    unreachable!("index bounded by total parameter count");
}

/// Adds `delta` to the idx-th differentiable parameter (flatten() order).
fn perturb(encoder: &mut Encoder<f64>, mut idx: usize, delta: f64) {
    let mut arrays = encoder.export_arrays("");
    for (name, _, data) in arrays.iter_mut() {
        if name.contains("running_") {
            continue;
        }
        if idx < data.len() {
            data[idx] += delta;
            encoder.import_arrays("", &arrays).expect("same structure");
            return;
        }
        idx -= data.len();
    }
    unreachable!("index bounded by total parameter count");
}
