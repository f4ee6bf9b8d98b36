//! Batch-all triplet loss, focal loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Multiply the triplet term by `1 / (2 * margin)`.
    #[serde(default)]
    pub inverse_margin_prefactor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            gamma: 2.0,
            lambda: 1.0,
            inverse_margin_prefactor: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletStats {
    pub n_active: usize,
    pub n_total: usize,
    pub mean_positive_dist: f64,
    pub mean_negative_dist: f64,
    /// The batch held a single identity, so no triplet could be formed.
    pub single_class: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub triplet: f64,
    pub focal: f64,
    pub total: f64,
    pub n_active_triplets: usize,
    pub n_total_triplets: usize,
    pub mean_positive_dist: f64,
    pub mean_negative_dist: f64,
    pub single_class: bool,
}

/// Batch-all triplet loss over part features `[B, P, D]`.
///
/// Per part, every `(anchor, positive, negative)` contributes
/// `max(margin + d(a,p) - d(a,n), 0)` with Euclidean `d`; the part loss is the
/// sum over active (positive) hinges divided by their count, and parts are
/// averaged.
pub fn triplet_loss<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    labels: &[usize],
    margin: f64,
    inverse_margin_prefactor: bool,
) -> Result<(Var, TripletStats)> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::shape(
            "triplet_loss",
            format!("features must be [B,P,D], got {shape:?}"),
        ));
    }
    let (b, parts) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(TensorError::shape(
            "triplet_loss",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    if b < 2 {
        return Err(TensorError::invalid(
            "triplet_loss",
            "batch needs at least 2 samples",
        ));
    }
    if !(margin > 0.0) {
        return Err(TensorError::invalid(
            "triplet_loss",
            format!("margin {margin} must be positive"),
        ));
    }
    let by_part = tape.permute(features, &[1, 0, 2])?;
    let dist = tape.pairwise_distance(by_part)?;
    let d = tape.value(dist).clone();
    let m = S::lit(margin);
    let factor = if inverse_margin_prefactor {
        1.0 / (2.0 * margin)
    } else {
        1.0
    };

    let mut grad = Tensor::<S>::zeros(d.shape());
    let mut total = 0.0f64;
    let mut stats = TripletStats::default();
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for g in 0..parts {
        let at = |i: usize, j: usize| d.data()[(g * b + i) * b + j];
        let mut sum = S::zero();
        let mut active: Vec<(usize, usize, usize)> = Vec::new();
        for a in 0..b {
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                pos_sum += at(a, p).as_f64();
                pos_n += 1;
                for n in 0..b {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    stats.n_total += 1;
                    let h = m + at(a, p) - at(a, n);
                    if h > S::zero() {
                        sum += h;
                        active.push((a, p, n));
                    }
                }
            }
            for n in 0..b {
                if labels[n] != labels[a] {
                    neg_sum += at(a, n).as_f64();
                    neg_n += 1;
                }
            }
        }
        stats.n_active += active.len();
        if active.is_empty() {
            continue;
        }
        let count = active.len() as f64;
        total += sum.as_f64() / count;
        let w = S::lit(factor / (count * parts as f64));
        let gd = grad.data_mut();
        for (a, p, n) in active {
            gd[(g * b + a) * b + p] += w;
            gd[(g * b + a) * b + n] -= w;
        }
    }
    stats.single_class = stats.n_total == 0;
    stats.mean_positive_dist = if pos_n > 0 {
        pos_sum / pos_n as f64
    } else {
        0.0
    };
    stats.mean_negative_dist = if neg_n > 0 {
        neg_sum / neg_n as f64
    } else {
        0.0
    };
    let value = S::lit(factor * total / parts as f64);
    let out = tape.scalar_with_grad(dist, value, grad)?;
    Ok((out, stats))
}

/// Mean over samples and parts of `-(1-p)^gamma * ln p`, with `p` the softmax
/// probability of the true class. Logits are `[B, P, C]` (or `[B, C]`).
pub fn focal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    labels: &[usize],
    gamma: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 && shape.len() != 3 {
        return Err(TensorError::shape(
            "focal_loss",
            format!("logits must be [B,P,C] or [B,C], got {shape:?}"),
        ));
    }
    if !(gamma >= 0.0) {
        return Err(TensorError::invalid(
            "focal_loss",
            format!("gamma {gamma} must be >= 0"),
        ));
    }
    let b = shape[0];
    let classes = *shape.last().expect("rank >= 2");
    let per_sample: usize = shape[1..shape.len() - 1].iter().product();
    if labels.len() != b {
        return Err(TensorError::shape(
            "focal_loss",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::invalid(
            "focal_loss",
            format!("label {bad} outside [0, {classes})"),
        ));
    }
    let x = tape.value(logits).clone();
    let rows = b * per_sample;
    let inv_rows = S::one() / S::lit(rows as f64);
    let gam = S::lit(gamma);
    let mut grad = Tensor::<S>::zeros(&shape);
    let mut total = S::zero();
    for r in 0..rows {
        let y = labels[r / per_sample];
        let z = &x.data()[r * classes..(r + 1) * classes];
        let mx = z.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = mx + z.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
        let log_p = z[y] - lse;
        let p = log_p.exp();
        let q = S::one() - p;
        let w = if gamma == 0.0 { S::one() } else { q.powf(gam) };
        total += -w * log_p;
        // dL/dz_k = [gamma (1-p)^(gamma-1) p ln p - (1-p)^gamma] (delta_ky - s_k)
        let lead = if gamma == 0.0 || q <= S::zero() {
            S::zero()
        } else {
            gam * q.powf(gam - S::one()) * p * log_p
        };
        let coef = (lead - w) * inv_rows;
        let g = &mut grad.data_mut()[r * classes..(r + 1) * classes];
        for (k, gk) in g.iter_mut().enumerate() {
            let s_k = (z[k] - lse).exp();
            let delta = if k == y { S::one() } else { S::zero() };
            *gk = coef * (delta - s_k);
        }
    }
    tape.scalar_with_grad(logits, total * inv_rows, grad)
}

/// `triplet + lambda * focal`. Passing `logits = None` drops the focal term.
pub fn joint_loss<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    logits: Option<Var>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    if !(cfg.lambda >= 0.0) {
        return Err(TensorError::invalid(
            "joint_loss",
            format!("lambda {} must be >= 0", cfg.lambda),
        ));
    }
    let (trip, stats) = triplet_loss(
        tape,
        features,
        labels,
        cfg.margin,
        cfg.inverse_margin_prefactor,
    )?;
    let triplet = tape.value(trip).item().as_f64();
    let (total, focal) = match logits {
        Some(l) => {
            let foc = focal_loss(tape, l, labels, cfg.gamma)?;
            let focal = tape.value(foc).item().as_f64();
            let weighted = tape.scale(foc, cfg.lambda)?;
            (tape.add(trip, weighted)?, focal)
        }
        None => (trip, 0.0),
    };
    let report = LossReport {
        triplet,
        focal,
        total: tape.value(total).item().as_f64(),
        n_active_triplets: stats.n_active,
        n_total_triplets: stats.n_total,
        mean_positive_dist: stats.mean_positive_dist,
        mean_negative_dist: stats.mean_negative_dist,
        single_class: stats.single_class,
    };
    Ok((total, report))
}
