//! Contrastive losses over per-image dictionaries.
//!
//! The improved loss averages exp-similarities over *all* positive keys in
//! the numerator while the denominator sums over negative keys only:
//!
//! `L = -log[ (1/J) Σ_j exp(q·k⁺_j/τ) / Σ_i exp(q·k⁻_i/τ) ]`
//!
//! Every pristine row serves as query in turn (optionally a seeded
//! subsample), with the remaining pristine rows as its positive keys; the
//! per-image value is the mean over queries. The overall loss averages
//! per-image values without ever pooling rows across images. The
//! batch-merged and single-positive-key variants exist for ablations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dict::{build_dictionary, Dictionary};
use crate::tensor::{flatten_features, l2_normalize_rows, FeatureMap, FeatureMatrix, ForgeryMask};
use crate::{Error, Result};

pub(crate) const NORMALIZE_EPS: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Temperature dividing all dot-product logits.
    pub tau: f64,
    /// Cap on queries per image; `None` means every positive row is a query.
    pub query_subsample: Option<usize>,
    /// Seed for query subsampling and vanilla-variant key picks.
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            query_subsample: Some(256),
            seed: 0,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.query_subsample == Some(0) {
            return Err(Error::Config("query_subsample must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss value plus one gradient row per dictionary row, f64 row-major,
/// positives first.
#[derive(Debug, Clone)]
pub struct DictionaryGrad {
    pub loss: f64,
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// Internal f64 row-major matrix; all loss math runs in f64 built exactly
/// from the f32 inputs.
#[derive(Debug, Clone, Default)]
pub(crate) struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_f32(m: &FeatureMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shifted log-sum-exp; input must be nonempty and free of NaN.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() && m < 0.0 {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `v` written into `out`, numerically shifted.
fn softmax_into(v: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in v {
        let e = (x - m).exp();
        out.push(e);
        sum += e;
    }
    for e in out.iter_mut() {
        *e /= sum;
    }
}

/// Picks the query rows from a positive pool of `pool` rows: all of them, or
/// a seeded uniform subsample of `cap`, returned in ascending order.
fn select_queries(pool: usize, cfg: &LossConfig) -> Vec<usize> {
    match cfg.query_subsample {
        Some(cap) if cap < pool => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx: Vec<usize> = (0..pool).collect();
            for i in 0..cap {
                let j = rng.gen_range(i..pool);
                idx.swap(i, j);
            }
            idx.truncate(cap);
            idx.sort_unstable();
            idx
        }
        _ => (0..pool).collect(),
    }
}

pub(crate) struct KernelOut {
    pub loss: f64,
    /// Gradient per positive row (row-major), empty unless requested.
    pub pos_grad: Vec<f64>,
    /// Gradient per negative row (row-major), empty unless requested.
    pub neg_grad: Vec<f64>,
}

/// Core of both loss variants. `single_key = false` computes the improved
/// loss (all remaining positives in the numerator, negatives-only
/// denominator); `single_key = true` computes the original formulation with
/// one seeded positive key and that key included in the denominator.
pub(crate) fn contrastive_kernel(
    pos: &Mat64,
    neg: &Mat64,
    cfg: &LossConfig,
    single_key: bool,
    with_grad: bool,
) -> Result<KernelOut> {
    cfg.validate()?;
    let (p, k, cols) = (pos.rows, neg.rows, pos.cols);
    if p < 2 || k == 0 {
        return Err(Error::UndefinedLoss);
    }
    let queries = select_queries(p, cfg);
    let inv_q = 1.0 / queries.len() as f64;
    let inv_tau = 1.0 / cfg.tau;

    let mut pos_grad = vec![0.0; if with_grad { p * cols } else { 0 }];
    let mut neg_grad = vec![0.0; if with_grad { k * cols } else { 0 }];

    // Key picks for the single-key variant, drawn in query order.
    let mut key_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut loss_sum = 0.0f64;
    let mut pos_logits: Vec<f64> = Vec::with_capacity(p);
    let mut neg_logits: Vec<f64> = Vec::with_capacity(k);
    let mut weights: Vec<f64> = Vec::new();

    for &qi in &queries {
        let q = pos.row(qi);
        neg_logits.clear();
        for i in 0..k {
            neg_logits.push(dot(q, neg.row(i)) * inv_tau);
        }

        if single_key {
            // Remaining positives indexed 0..p-1 skipping qi.
            let draw = key_rng.gen_range(0..p - 1);
            let key = if draw >= qi { draw + 1 } else { draw };
            let s_pos = dot(q, pos.row(key)) * inv_tau;
            // Denominator includes the positive term, softmax-CE style.
            let mut all = Vec::with_capacity(k + 1);
            all.push(s_pos);
            all.extend_from_slice(&neg_logits);
            let lse = log_sum_exp(&all);
            loss_sum += lse - s_pos;
            if with_grad {
                softmax_into(&all, &mut weights);
                let w_pos = weights[0];
                // d/ds_pos = w_pos - 1, d/ds_neg_i = w_i.
                let scale_q = inv_q * inv_tau;
                for c in 0..cols {
                    let mut gq = (w_pos - 1.0) * pos.row(key)[c];
                    for i in 0..k {
                        gq += weights[i + 1] * neg.row(i)[c];
                    }
                    pos_grad[qi * cols + c] += scale_q * gq;
                    pos_grad[key * cols + c] += scale_q * (w_pos - 1.0) * q[c];
                }
                for i in 0..k {
                    let w = weights[i + 1] * scale_q;
                    for c in 0..cols {
                        neg_grad[i * cols + c] += w * q[c];
                    }
                }
            }
        } else {
            pos_logits.clear();
            for j in 0..p {
                if j != qi {
                    pos_logits.push(dot(q, pos.row(j)) * inv_tau);
                }
            }
            let j_count = pos_logits.len() as f64;
            let lse_pos = log_sum_exp(&pos_logits);
            let lse_neg = log_sum_exp(&neg_logits);
            loss_sum += -(lse_pos - j_count.ln()) + lse_neg;
            if with_grad {
                let scale_q = inv_q * inv_tau;
                softmax_into(&pos_logits, &mut weights);
                // Queries pull toward the softmax-weighted positive mean...
                for (slot, w) in weights.iter().enumerate() {
                    let j = if slot >= qi { slot + 1 } else { slot };
                    let w = *w * scale_q;
                    for c in 0..cols {
                        pos_grad[qi * cols + c] -= w * pos.row(j)[c];
                        pos_grad[j * cols + c] -= w * q[c];
                    }
                }
                // ...and away from the softmax-weighted negative mean.
                softmax_into(&neg_logits, &mut weights);
                for (i, w) in weights.iter().enumerate() {
                    let w = *w * scale_q;
                    for c in 0..cols {
                        pos_grad[qi * cols + c] += w * neg.row(i)[c];
                        neg_grad[i * cols + c] += w * q[c];
                    }
                }
            }
        }
    }

    let loss = loss_sum * inv_q;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss is {loss}")));
    }
    Ok(KernelOut {
        loss,
        pos_grad,
        neg_grad,
    })
}

/// Improved-loss value for one dictionary: mean over queries.
pub fn info_nce_pp(d: &Dictionary, cfg: &LossConfig) -> Result<f64> {
    let pos = Mat64::from_f32(d.positives());
    let neg = Mat64::from_f32(d.negatives());
    Ok(contrastive_kernel(&pos, &neg, cfg, false, false)?.loss)
}

/// Improved-loss value and its analytic gradient for every dictionary row.
pub fn info_nce_pp_grad(d: &Dictionary, cfg: &LossConfig) -> Result<DictionaryGrad> {
    let pos = Mat64::from_f32(d.positives());
    let neg = Mat64::from_f32(d.negatives());
    let out = contrastive_kernel(&pos, &neg, cfg, false, true)?;
    Ok(DictionaryGrad {
        loss: out.loss,
        positives: out.pos_grad,
        negatives: out.neg_grad,
    })
}

/// Original single-positive-key loss (ablation baseline); the positive key
/// is a seeded pick among the remaining pristine rows and the denominator
/// includes it.
pub fn info_nce_vanilla(d: &Dictionary, cfg: &LossConfig) -> Result<f64> {
    let pos = Mat64::from_f32(d.positives());
    let neg = Mat64::from_f32(d.negatives());
    Ok(contrastive_kernel(&pos, &neg, cfg, true, false)?.loss)
}

/// Derives the per-image loss seed so that image 0 of a batch uses the seed
/// as-is (a one-image batch must equal the plain per-image loss).
pub(crate) fn image_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn image_pools(f: &FeatureMap, y: &ForgeryMask) -> Result<(Mat64, Mat64)> {
    let rows = l2_normalize_rows(&flatten_features(f), NORMALIZE_EPS);
    let d = build_dictionary(&rows, y)?;
    Ok((Mat64::from_f32(d.positives()), Mat64::from_f32(d.negatives())))
}

/// Overall loss: the mean of per-image improved losses, computed strictly
/// image by image. Images where the loss is undefined (no forged rows, or
/// fewer than two pristine rows) contribute 0 but still count in the mean.
/// Accumulation is sequential in image order, in f64.
pub fn overall_loss(batch: &[(FeatureMap, ForgeryMask)], cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut sum = 0.0f64;
    for (i, (f, y)) in batch.iter().enumerate() {
        let (pos, neg) = image_pools(f, y)?;
        let cfg_i = LossConfig {
            seed: image_seed(cfg.seed, i),
            ..cfg.clone()
        };
        match contrastive_kernel(&pos, &neg, &cfg_i, false, false) {
            Ok(out) => sum += out.loss,
            Err(Error::UndefinedLoss) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(sum / batch.len() as f64)
}

/// Rejected alternative kept for the ablation: pools every image's pristine
/// rows into one positive set and forged rows into one negative set, then
/// computes a single improved loss over the merged dictionary.
pub fn overall_loss_batchmerged(batch: &[(FeatureMap, ForgeryMask)], cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut cols = None;
    let mut pos_data = Vec::new();
    let mut neg_data = Vec::new();
    for (f, y) in batch {
        let (pos, neg) = image_pools(f, y)?;
        if *cols.get_or_insert(pos.cols) != pos.cols {
            return Err(Error::Dimension("channel mismatch across batch".into()));
        }
        pos_data.extend_from_slice(&pos.data);
        neg_data.extend_from_slice(&neg.data);
    }
    let cols = cols.unwrap();
    let pos = Mat64::new(pos_data.len() / cols, cols, pos_data);
    let neg = Mat64::new(neg_data.len() / cols, cols, neg_data);
    Ok(contrastive_kernel(&pos, &neg, cfg, false, false)?.loss)
}
