//! Seeded mini-batch training of the patch embedder against the contrastive
//! objective. Per-image loss terms may be computed in parallel; the
//! reduction into the batch gradient always runs in fixed image order in
//! f64, so a given seed replays bit-for-bit regardless of thread count.

use rayon::prelude::*;

use crate::extractor::{backward_cells, forward_cells, ExtractorParams, ParamGrads64};
use crate::loss::{contrastive_kernel, image_seed, Mat64, NORMALIZE_EPS};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::synth::mix_seed;
use crate::tensor::ForgeryMask;
use crate::{Error, LossConfig, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Overall loss: mean of per-image improved losses.
    ImageByImage,
    /// Ablation: one improved loss over the pooled batch dictionary.
    BatchMerged,
    /// Ablation: original single-positive-key loss, still image by image.
    Vanilla,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: LossVariant,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub patch: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 4,
            seed: 0,
            variant: LossVariant::ImageByImage,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            patch: 4,
            hidden: 64,
            dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ExtractorParams,
    /// Overall loss per step.
    pub curve: Vec<f64>,
}

/// Normalized rows plus what the backward pass needs to undo the
/// normalization.
struct NormalizedRows {
    rows: Mat64,
    norms: Vec<f64>,
}

fn normalize_rows64(raw: &Mat64) -> NormalizedRows {
    let eps = NORMALIZE_EPS as f64;
    let mut data = Vec::with_capacity(raw.data.len());
    let mut norms = Vec::with_capacity(raw.rows);
    for r in 0..raw.rows {
        let row = raw.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let m = norm.max(eps);
        data.extend(row.iter().map(|v| v / m));
        norms.push(norm);
    }
    NormalizedRows {
        rows: Mat64::new(raw.rows, raw.cols, data),
        norms,
    }
}

/// Pulls a gradient over normalized rows back to the raw rows:
/// g_raw = (g - (g·y) y) / ‖x‖ above the eps floor, g / eps below it.
fn normalize_backward(normalized: &NormalizedRows, grad: &Mat64) -> Mat64 {
    let eps = NORMALIZE_EPS as f64;
    let cols = normalized.rows.cols;
    let mut out = Vec::with_capacity(grad.data.len());
    for r in 0..grad.rows {
        let g = grad.row(r);
        let y = normalized.rows.row(r);
        let norm = normalized.norms[r];
        if norm >= eps {
            let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            out.extend((0..cols).map(|c| (g[c] - gy * y[c]) / norm));
        } else {
            out.extend(g.iter().map(|v| v / eps));
        }
    }
    Mat64::new(grad.rows, cols, out)
}

fn partition64(rows: &Mat64, mask: &ForgeryMask) -> Result<(Mat64, Mat64, Vec<usize>, Vec<usize>)> {
    let cells = mask.height() * mask.width();
    if rows.rows != cells {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {}x{} mask",
            rows.rows,
            mask.height(),
            mask.width()
        )));
    }
    let cols = rows.cols;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for (r, &m) in mask.data().iter().enumerate() {
        if m == 0 {
            pos.extend_from_slice(rows.row(r));
            pos_idx.push(r);
        } else {
            neg.extend_from_slice(rows.row(r));
            neg_idx.push(r);
        }
    }
    Ok((
        Mat64::new(pos_idx.len(), cols, pos),
        Mat64::new(neg_idx.len(), cols, neg),
        pos_idx,
        neg_idx,
    ))
}

fn scatter_row_grads(
    cells: usize,
    cols: usize,
    pos_idx: &[usize],
    neg_idx: &[usize],
    pos_grad: &[f64],
    neg_grad: &[f64],
) -> Mat64 {
    let mut grid = vec![0.0f64; cells * cols];
    for (slot, &r) in pos_idx.iter().enumerate() {
        grid[r * cols..(r + 1) * cols].copy_from_slice(&pos_grad[slot * cols..(slot + 1) * cols]);
    }
    for (slot, &r) in neg_idx.iter().enumerate() {
        grid[r * cols..(r + 1) * cols].copy_from_slice(&neg_grad[slot * cols..(slot + 1) * cols]);
    }
    Mat64::new(cells, cols, grid)
}

/// Loss and parameter gradient for one image under an image-by-image
/// variant. `None` when the image's loss is undefined (counts as 0 in the
/// batch mean).
fn image_loss_grad(
    image: &Tensor,
    mask: &ForgeryMask,
    params: &ExtractorParams,
    loss_cfg: &LossConfig,
    single_key: bool,
) -> Result<Option<(f64, ParamGrads64)>> {
    let cache = forward_cells(image, params)?;
    let normalized = normalize_rows64(&cache.rows);
    let (pos, neg, pos_idx, neg_idx) = partition64(&normalized.rows, mask)?;
    let kernel = match contrastive_kernel(&pos, &neg, loss_cfg, single_key, true) {
        Ok(k) => k,
        Err(Error::UndefinedLoss) => return Ok(None),
        Err(e) => return Err(e),
    };
    let cells = cache.rows.rows;
    let grad_norm = scatter_row_grads(
        cells,
        params.dim,
        &pos_idx,
        &neg_idx,
        &kernel.pos_grad,
        &kernel.neg_grad,
    );
    let grad_raw = normalize_backward(&normalized, &grad_norm);
    let mut grads = ParamGrads64::zeros(params);
    backward_cells(&cache, params, &grad_raw.data, &mut grads);
    Ok(Some((kernel.loss, grads)))
}

/// Loss and gradient for one step under the batch-merged ablation: pools
/// every image's rows into a single dictionary before the kernel runs.
fn merged_loss_grad(
    batch: &[&(Tensor, ForgeryMask)],
    params: &ExtractorParams,
    loss_cfg: &LossConfig,
) -> Result<Option<(f64, ParamGrads64)>> {
    let forwards: Vec<_> = batch
        .par_iter()
        .map(|(image, mask)| -> Result<_> {
            let cache = forward_cells(image, params)?;
            let normalized = normalize_rows64(&cache.rows);
            let parts = partition64(&normalized.rows, mask)?;
            Ok((cache, normalized, parts))
        })
        .collect::<Result<_>>()?;

    let cols = params.dim;
    let mut pos_data = Vec::new();
    let mut neg_data = Vec::new();
    for (_, _, (pos, neg, _, _)) in &forwards {
        pos_data.extend_from_slice(&pos.data);
        neg_data.extend_from_slice(&neg.data);
    }
    let pos = Mat64::new(pos_data.len() / cols, cols, pos_data);
    let neg = Mat64::new(neg_data.len() / cols, cols, neg_data);
    let kernel = match contrastive_kernel(&pos, &neg, loss_cfg, false, true) {
        Ok(k) => k,
        Err(Error::UndefinedLoss) => return Ok(None),
        Err(e) => return Err(e),
    };

    // Slice the merged gradients back out per image and backprop each.
    let mut pos_off = 0usize;
    let mut neg_off = 0usize;
    let mut slices = Vec::with_capacity(forwards.len());
    for (_, _, (ipos, ineg, _, _)) in &forwards {
        let p = ipos.rows * cols;
        let n = ineg.rows * cols;
        slices.push((pos_off, p, neg_off, n));
        pos_off += p;
        neg_off += n;
    }
    let per_image: Vec<ParamGrads64> = forwards
        .par_iter()
        .zip(&slices)
        .map(|((cache, normalized, (_, _, pos_idx, neg_idx)), &(po, pl, no, nl))| {
            let grad_norm = scatter_row_grads(
                cache.rows.rows,
                cols,
                pos_idx,
                neg_idx,
                &kernel.pos_grad[po..po + pl],
                &kernel.neg_grad[no..no + nl],
            );
            let grad_raw = normalize_backward(normalized, &grad_norm);
            let mut grads = ParamGrads64::zeros(params);
            backward_cells(cache, params, &grad_raw.data, &mut grads);
            grads
        })
        .collect();

    let mut total = ParamGrads64::zeros(params);
    for g in &per_image {
        total.add_assign(g);
    }
    Ok(Some((kernel.loss, total)))
}

/// Loss of one image through the full differentiable chain (extract →
/// normalize → dictionary → contrastive loss). `None` when the image has no
/// forged rows or fewer than two pristine rows.
pub fn image_loss(
    image: &Tensor,
    mask: &ForgeryMask,
    params: &ExtractorParams,
    loss_cfg: &LossConfig,
    variant: LossVariant,
) -> Result<Option<f64>> {
    Ok(image_loss_param_grads(image, mask, params, loss_cfg, variant)?.map(|(l, _)| l))
}

/// Loss plus exact parameter gradients for one image; the single-image
/// counterpart of one training step.
pub fn image_loss_param_grads(
    image: &Tensor,
    mask: &ForgeryMask,
    params: &ExtractorParams,
    loss_cfg: &LossConfig,
    variant: LossVariant,
) -> Result<Option<(f64, crate::extractor::ParamGrads)>> {
    let single_key = variant == LossVariant::Vanilla;
    Ok(image_loss_grad(image, mask, params, loss_cfg, single_key)?
        .map(|(loss, grads)| (loss, grads.to_f32())))
}

/// Runs seeded mini-batch Adam over (image, ground-truth mask) pairs in
/// dataset order (wrapping), one batch per step. Returns the trained
/// parameters and the per-step loss curve.
pub fn train(cfg: &TrainConfig, data: &[(Tensor, ForgeryMask)]) -> Result<TrainResult> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut params = ExtractorParams::init(cfg.patch, cfg.hidden, cfg.dim, mix_seed(cfg.seed, 0x1417));
    let mut opt = [
        AdamState::new(params.w1.len()),
        AdamState::new(params.b1.len()),
        AdamState::new(params.w2.len()),
        AdamState::new(params.b2.len()),
    ];
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<&(Tensor, ForgeryMask)> = (0..cfg.batch_size)
            .map(|k| &data[(step * cfg.batch_size + k) % data.len()])
            .collect();
        let step_seed = mix_seed(cfg.loss.seed, step as u64);

        let (loss, mut grads) = match cfg.variant {
            LossVariant::BatchMerged => {
                let loss_cfg = LossConfig {
                    seed: step_seed,
                    ..cfg.loss.clone()
                };
                match merged_loss_grad(&batch, &params, &loss_cfg)? {
                    Some(v) => v,
                    None => (0.0, ParamGrads64::zeros(&params)),
                }
            }
            LossVariant::ImageByImage | LossVariant::Vanilla => {
                let single_key = cfg.variant == LossVariant::Vanilla;
                let results: Vec<Option<(f64, ParamGrads64)>> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, (image, mask))| {
                        let loss_cfg = LossConfig {
                            seed: image_seed(step_seed, k),
                            ..cfg.loss.clone()
                        };
                        image_loss_grad(image, mask, &params, &loss_cfg, single_key)
                    })
                    .collect::<Result<_>>()?;
                let mut loss_sum = 0.0;
                let mut total = ParamGrads64::zeros(&params);
                for r in results.iter().flatten() {
                    loss_sum += r.0;
                    total.add_assign(&r.1);
                }
                let inv_b = 1.0 / cfg.batch_size as f64;
                total.scale(inv_b);
                (loss_sum * inv_b, total)
            }
        };

        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {loss}")));
        }
        curve.push(loss);

        grads.scale(1.0); // no-op; grads are already the batch gradient
        let g = grads.to_f32();
        adam_step(&cfg.adam, &mut opt[0], &mut params.w1, &g.w1)?;
        adam_step(&cfg.adam, &mut opt[1], &mut params.b1, &g.b1)?;
        adam_step(&cfg.adam, &mut opt[2], &mut params.w2, &g.w2)?;
        adam_step(&cfg.adam, &mut opt[3], &mut params.b2, &g.b2)?;
    }

    Ok(TrainResult { params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_synthetic, SynthConfig};

    fn small_synth(seed: u64, count: usize) -> Vec<(Tensor, ForgeryMask)> {
        gen_synthetic(&SynthConfig {
            image_size: 32,
            count,
            seed,
            ..Default::default()
        })
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.mask))
        .collect()
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            hidden: 16,
            dim: 8,
            loss: LossConfig {
                query_subsample: Some(32),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_over_training() {
        let data = small_synth(1, 8);
        let result = train(&small_cfg(200), &data).unwrap();
        assert_eq!(result.curve.len(), 200);
        let early: f64 = result.curve[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = result.curve[190..].iter().sum::<f64>() / 10.0;
        assert!(
            late < early,
            "loss should drop: early {early:.4} late {late:.4}"
        );
        assert!(result.curve[199] < result.curve[0]);
    }

    #[test]
    fn zero_lr_leaves_params_at_init() {
        let data = small_synth(2, 4);
        let mut cfg = small_cfg(5);
        cfg.adam.lr = 0.0;
        let result = train(&cfg, &data).unwrap();
        let init = ExtractorParams::init(cfg.patch, cfg.hidden, cfg.dim, mix_seed(cfg.seed, 0x1417));
        assert_eq!(result.params, init);
    }

    #[test]
    fn replay_is_bit_identical() {
        let data = small_synth(3, 6);
        let cfg = small_cfg(12);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn replay_is_thread_count_independent() {
        let data = small_synth(4, 6);
        let cfg = small_cfg(8);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| train(&cfg, &data).unwrap())
        };
        let single = run(1);
        let multi = run(4);
        assert_eq!(single.params, multi.params);
        assert_eq!(single.curve, multi.curve);
    }

    #[test]
    fn variants_produce_distinct_curves() {
        let data: Vec<(Tensor, ForgeryMask)> = gen_synthetic(&SynthConfig {
            image_size: 32,
            count: 8,
            seed: 5,
            conflict_pair: true,
            ..Default::default()
        })
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.mask))
        .collect();
        let mut cfg = small_cfg(6);
        let image = train(&cfg, &data).unwrap();
        cfg.variant = LossVariant::BatchMerged;
        let batch = train(&cfg, &data).unwrap();
        cfg.variant = LossVariant::Vanilla;
        let vanilla = train(&cfg, &data).unwrap();
        assert_ne!(image.curve, batch.curve);
        assert_ne!(image.curve, vanilla.curve);
        assert_ne!(batch.curve, vanilla.curve);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // Full chain: extract -> normalize -> dictionary -> improved loss.
        // Uses a tiny instance so central differences are cheap.
        use rand::{Rng, SeedableRng};
        let mut outer = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut valid_trials = 0;
        for trial in 0..6 {
            let params = ExtractorParams::init(2, 6, 3, 100 + trial);
            let data: Vec<f32> = (0..6 * 4 * 3).map(|_| outer.gen_range(0.0..1.0)).collect();
            let image = Tensor::new(vec![6, 4, 3], data).unwrap();
            let mask = ForgeryMask::new(3, 2, vec![0, 0, 0, 0, 1, 1]).unwrap();
            let loss_cfg = LossConfig {
                tau: 0.5,
                query_subsample: None,
                seed: 0,
            };
            // A cell with every hidden unit dead yields an all-zero feature
            // row, where the eps-guarded normalization has gradient 1/eps:
            // correct but invisible to finite differences. Skip such
            // degenerate fixtures.
            {
                let cache = forward_cells(&image, &params).unwrap();
                let min_norm = (0..cache.rows.rows)
                    .map(|r| cache.rows.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min);
                if min_norm < 1e-6 {
                    continue;
                }
            }
            valid_trials += 1;
            let (loss, grads) =
                image_loss_grad(&image, &mask, &params, &loss_cfg, false)
                    .unwrap()
                    .unwrap();
            assert!(loss.is_finite());

            let loss_of = |p: &ExtractorParams| -> f64 {
                let cache = forward_cells(&image, p).unwrap();
                let normalized = normalize_rows64(&cache.rows);
                let (pos, neg, _, _) = partition64(&normalized.rows, &mask).unwrap();
                contrastive_kernel(&pos, &neg, &loss_cfg, false, false)
                    .unwrap()
                    .loss
            };
            let gates = |p: &ExtractorParams| -> Vec<bool> {
                forward_cells(&image, p)
                    .unwrap()
                    .hidden
                    .iter()
                    .map(|&h| h > 0.0)
                    .collect()
            };
            let h = 1e-4f32;
            let mut worst = 0.0f64;
            let mut checked = 0usize;
            for (get, set, analytic) in [
                (
                    (&|p: &ExtractorParams| p.w1.clone()) as &dyn Fn(&ExtractorParams) -> Vec<f32>,
                    (&|p: &mut ExtractorParams, i: usize, v: f32| p.w1[i] = v)
                        as &dyn Fn(&mut ExtractorParams, usize, f32),
                    &grads.w1,
                ),
                (&|p| p.b1.clone(), &|p, i, v| p.b1[i] = v, &grads.b1),
                (&|p| p.w2.clone(), &|p, i, v| p.w2[i] = v, &grads.w2),
                (&|p| p.b2.clone(), &|p, i, v| p.b2[i] = v, &grads.b2),
            ] {
                let base = get(&params);
                let step = (base.len() / 10).max(1);
                for i in (0..base.len()).step_by(step) {
                    let mut plus = params.clone();
                    set(&mut plus, i, base[i] + h);
                    let mut minus = params.clone();
                    set(&mut minus, i, base[i] - h);
                    // ReLU kinks make central differences meaningless; only
                    // compare where the gate pattern is stable.
                    if gates(&plus) != gates(&minus) {
                        continue;
                    }
                    let delta = (get(&plus)[i] - get(&minus)[i]) as f64;
                    let fd = (loss_of(&plus) - loss_of(&minus)) / delta;
                    let a = analytic[i];
                    let denom = a.abs().max(fd.abs()).max(1e-4);
                    worst = worst.max(((a - fd) / denom).abs());
                    checked += 1;
                }
            }
            assert!(checked >= 30, "only {checked} smooth parameters checked");
            assert!(worst < 1e-3, "trial {trial}: max rel err {worst}");
        }
        assert!(valid_trials >= 3, "only {valid_trials} non-degenerate trials");
    }
}
