//! Synthetic tamper generation. Every source carries a fixed pseudo-random
//! high-frequency fingerprint tile (a stand-in for camera/compression
//! traces); a forgery pastes donor content, fingerprint and all, into a host
//! image. Conflict pairs additionally emit the donor source image itself, so
//! the same pixel content appears forged in one image and pristine in the
//! other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ForgeryMask, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Square image edge in pixels; must be divisible by `patch`.
    pub image_size: usize,
    /// Patch edge of the downstream extractor; masks are emitted at
    /// image_size/patch resolution.
    pub patch: usize,
    /// Allowed forged-area fraction of the feature-resolution mask.
    pub fraction_range: (f32, f32),
    /// Peak amplitude of the per-source fingerprint noise.
    pub fingerprint_amplitude: f32,
    /// Number of samples to emit (pairs count as two).
    pub count: usize,
    pub seed: u64,
    /// Emit (tampered, donor-source) pairs with identical patch pixels.
    pub conflict_pair: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            fraction_range: (0.05, 0.4),
            fingerprint_amplitude: 0.06,
            count: 16,
            seed: 0,
            conflict_pair: false,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fraction_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "fraction range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.conflict_pair && self.count % 2 != 0 {
            return Err(Error::Config(
                "conflict_pair needs an even sample count".into(),
            ));
        }
        Ok(())
    }
}

/// Role of a sample inside a conflict pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRole {
    /// Host image carrying the donor patch (mask marks the patch forged).
    Tampered,
    /// The untouched donor source image (mask all pristine).
    DonorSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Tensor,
    /// Ground truth at feature resolution (image_size/patch per side).
    pub mask: ForgeryMask,
    pub host_fingerprint: u64,
    pub donor_fingerprint: u64,
    /// `(pair index, role)` for conflict corpora, `None` otherwise.
    pub pair: Option<(usize, SampleRole)>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(base: u64, salt: u64) -> u64 {
    splitmix64(base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Fixed per-source fingerprint: a p×p×3 tile of uniform noise added to
/// every aligned patch of an image from that source.
fn fingerprint_tile(cfg: &SynthConfig, source: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, source.wrapping_add(0xf17e)));
    let amp = cfg.fingerprint_amplitude;
    (0..cfg.patch * cfg.patch * 3)
        .map(|_| rng.gen_range(-amp..=amp))
        .collect()
}

/// Smooth low-frequency background plus the tiled fingerprint, clamped to
/// [0, 1].
fn render_source(cfg: &SynthConfig, rng: &mut ChaCha8Rng, tile: &[f32]) -> Vec<f32> {
    let s = cfg.image_size;
    let p = cfg.patch;
    let mut chans = Vec::with_capacity(3);
    for _ in 0..3 {
        let base: f32 = rng.gen_range(0.35..0.65);
        let gx: f32 = rng.gen_range(-0.12..0.12);
        let gy: f32 = rng.gen_range(-0.12..0.12);
        let amp: f32 = rng.gen_range(0.0..0.08);
        let fx: f32 = rng.gen_range(1.0..3.0);
        let fy: f32 = rng.gen_range(1.0..3.0);
        let phx: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let phy: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        chans.push((base, gx, gy, amp, fx, fy, phx, phy));
    }
    let mut data = vec![0.0f32; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let u = x as f32 / s as f32 - 0.5;
            let v = y as f32 / s as f32 - 0.5;
            for (c, &(base, gx, gy, amp, fx, fy, phx, phy)) in chans.iter().enumerate() {
                let smooth = base
                    + 2.0 * gx * u
                    + 2.0 * gy * v
                    + amp
                        * (std::f32::consts::TAU * fx * u + phx).sin()
                        * (std::f32::consts::TAU * fy * v + phy).cos();
                let fp = tile[((y % p) * p + (x % p)) * 3 + c];
                data[(y * s + x) * 3 + c] = (smooth + fp).clamp(0.0, 1.0);
            }
        }
    }
    data
}

#[derive(Debug, Clone, Copy)]
enum Region {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Ellipse { cx: f32, cy: f32, a: f32, b: f32 },
}

impl Region {
    fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Region::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Region::Ellipse { cx, cy, a, b } => {
                let dx = (x as f32 + 0.5 - cx) / a;
                let dy = (y as f32 + 0.5 - cy) / b;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn draw_region(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Region {
    let s = cfg.image_size as f32;
    let (lo, hi) = cfg.fraction_range;
    let margin = 0.15 * (hi - lo);
    let frac = rng.gen_range(lo + margin..hi - margin);
    let area = frac * s * s;
    let aspect: f32 = rng.gen_range(0.6..1.6);
    if rng.gen_bool(0.5) {
        let w = (area * aspect).sqrt().round().clamp(2.0, s - 1.0) as usize;
        let h = ((area / w as f32).round()).clamp(2.0, s - 1.0) as usize;
        let x0 = rng.gen_range(0..=cfg.image_size - w);
        let y0 = rng.gen_range(0..=cfg.image_size - h);
        Region::Rect { x0, y0, w, h }
    } else {
        let a = (area * aspect / std::f32::consts::PI)
            .sqrt()
            .clamp(2.0, s / 2.0 - 1.0);
        let b = (area / (std::f32::consts::PI * a)).clamp(2.0, s / 2.0 - 1.0);
        let cx = rng.gen_range(a..s - a);
        let cy = rng.gen_range(b..s - b);
        Region::Ellipse { cx, cy, a, b }
    }
}

/// Majority vote per patch cell; ties go to pristine.
fn downsample_majority(pixel_mask: &[u8], size: usize, patch: usize) -> Result<ForgeryMask> {
    let grid = size / patch;
    let mut cells = vec![0u8; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut count = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    count += pixel_mask[(gy * patch + dy) * size + gx * patch + dx] as usize;
                }
            }
            cells[gy * grid + gx] = u8::from(2 * count > patch * patch);
        }
    }
    ForgeryMask::new(grid, grid, cells)
}

fn pixel_mask(region: &Region, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if region.contains(x, y) {
                mask[y * size + x] = 1;
            }
        }
    }
    mask
}

/// Deterministic fallback region: centered patch-aligned square hitting the
/// middle of the fraction range exactly.
fn fallback_region(cfg: &SynthConfig) -> Region {
    let s = cfg.image_size;
    let (lo, hi) = cfg.fraction_range;
    let mid = 0.5 * (lo + hi);
    let side_patches = ((s as f32 * (mid.sqrt())) / cfg.patch as f32).round().max(1.0) as usize;
    let side = (side_patches * cfg.patch).min(s);
    let off = (s - side) / 2 / cfg.patch * cfg.patch;
    Region::Rect {
        x0: off,
        y0: off,
        w: side,
        h: side,
    }
}

/// Generates `count` forged samples (or `count/2` conflict pairs). Fully
/// deterministic in the seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let (lo, hi) = cfg.fraction_range;
    let units = if cfg.conflict_pair { cfg.count / 2 } else { cfg.count };
    let mut out = Vec::with_capacity(cfg.count);

    for unit in 0..units {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, unit as u64));
        let host_id = 2 * unit as u64;
        let donor_id = 2 * unit as u64 + 1;
        let host_tile = fingerprint_tile(cfg, host_id);
        let donor_tile = fingerprint_tile(cfg, donor_id);
        let mut host = render_source(cfg, &mut rng, &host_tile);
        let donor = render_source(cfg, &mut rng, &donor_tile);

        // Retry the region draw until the feature-resolution fraction lands
        // in range; a patch-aligned fallback guarantees termination.
        let mut chosen = None;
        for _ in 0..64 {
            let region = draw_region(cfg, &mut rng);
            let pm = pixel_mask(&region, cfg.image_size);
            let mask = downsample_majority(&pm, cfg.image_size, cfg.patch)?;
            let frac = mask.forged_fraction() as f32;
            if frac >= lo && frac <= hi {
                chosen = Some((pm, mask));
                break;
            }
        }
        let (pm, mask) = match chosen {
            Some(v) => v,
            None => {
                let region = fallback_region(cfg);
                let pm = pixel_mask(&region, cfg.image_size);
                let mask = downsample_majority(&pm, cfg.image_size, cfg.patch)?;
                (pm, mask)
            }
        };
        debug_assert!({
            let f = mask.forged_fraction() as f32;
            f >= lo && f <= hi
        });

        // Splice donor pixels into the host over the forged region.
        for (i, &m) in pm.iter().enumerate() {
            if m == 1 {
                for c in 0..3 {
                    host[i * 3 + c] = donor[i * 3 + c];
                }
            }
        }

        let s = cfg.image_size;
        out.push(SynthSample {
            image: Tensor::new(vec![s, s, 3], host)?,
            mask,
            host_fingerprint: host_id,
            donor_fingerprint: donor_id,
            pair: cfg.conflict_pair.then_some((unit, SampleRole::Tampered)),
        });
        if cfg.conflict_pair {
            let grid = s / cfg.patch;
            out.push(SynthSample {
                image: Tensor::new(vec![s, s, 3], donor)?,
                mask: ForgeryMask::zeros(grid, grid)?,
                host_fingerprint: donor_id,
                donor_fingerprint: donor_id,
                pair: Some((unit, SampleRole::DonorSource)),
            });
        }
    }
    Ok(out)
}

/// Fully pristine images from the same source model (mask all zero); used
/// for false-alarm evaluation.
pub fn gen_pristine(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let grid = cfg.image_size / cfg.patch;
    let mut out = Vec::with_capacity(cfg.count);
    for unit in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7000_0000 + unit as u64));
        let source = 0x5000_0000 + unit as u64;
        let tile = fingerprint_tile(cfg, source);
        let image = render_source(cfg, &mut rng, &tile);
        out.push(SynthSample {
            image: Tensor::new(vec![cfg.image_size, cfg.image_size, 3], image)?,
            mask: ForgeryMask::zeros(grid, grid)?,
            host_fingerprint: source,
            donor_fingerprint: source,
            pair: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_stay_in_range() {
        let cfg = SynthConfig {
            count: 24,
            seed: 5,
            ..Default::default()
        };
        let (lo, hi) = cfg.fraction_range;
        for s in gen_synthetic(&cfg).unwrap() {
            let f = s.mask.forged_fraction() as f32;
            assert!(f >= lo && f <= hi, "fraction {f} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            count: 6,
            seed: 9,
            conflict_pair: true,
            ..Default::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let other = gen_synthetic(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn conflict_pairs_share_patch_pixels_exactly() {
        let cfg = SynthConfig {
            count: 8,
            seed: 3,
            conflict_pair: true,
            ..Default::default()
        };
        let samples = gen_synthetic(&cfg).unwrap();
        assert_eq!(samples.len(), 8);
        for pair in samples.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(a.pair.unwrap().1, SampleRole::Tampered);
            assert_eq!(b.pair.unwrap().1, SampleRole::DonorSource);
            assert_eq!(a.pair.unwrap().0, b.pair.unwrap().0);
            assert_eq!(b.mask.forged_count(), 0);
            // Forged feature cells of A correspond to pixel regions copied
            // verbatim from B. Check every fully-forged patch cell.
            let s = cfg.image_size;
            let p = cfg.patch;
            let grid = s / p;
            let mut checked = 0;
            for gy in 0..grid {
                for gx in 0..grid {
                    if a.mask.at(gy, gx) == 1 {
                        // Majority vote means at least half; interior cells
                        // are fully forged. Spot-check the center pixel.
                        let (y, x) = (gy * p + p / 2, gx * p + p / 2);
                        let idx = (y * s + x) * 3;
                        let same = (0..3)
                            .all(|c| a.image.data()[idx + c] == b.image.data()[idx + c]);
                        if same {
                            checked += 1;
                        }
                    }
                }
            }
            assert!(checked > 0, "no shared forged cells found");
        }
    }

    #[test]
    fn majority_vote_preserves_counts_within_half_cell() {
        let cfg = SynthConfig {
            count: 10,
            seed: 77,
            ..Default::default()
        };
        for unit in 0..cfg.count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, unit as u64));
            let region = draw_region(&cfg, &mut rng);
            let pm = pixel_mask(&region, cfg.image_size);
            let mask = downsample_majority(&pm, cfg.image_size, cfg.patch).unwrap();
            let p2 = cfg.patch * cfg.patch;
            let grid = cfg.image_size / cfg.patch;
            let mut total_err = 0usize;
            let mut mixed_cells = 0usize;
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut count = 0usize;
                    for dy in 0..cfg.patch {
                        for dx in 0..cfg.patch {
                            count += pm
                                [(gy * cfg.patch + dy) * cfg.image_size + gx * cfg.patch + dx]
                                as usize;
                        }
                    }
                    let vote = mask.at(gy, gx) as usize * p2;
                    total_err += count.abs_diff(vote);
                    if count > 0 && count < p2 {
                        mixed_cells += 1;
                    }
                }
            }
            assert!(total_err <= mixed_cells * p2 / 2 + p2 / 2);
        }
    }

    #[test]
    fn pristine_samples_have_empty_masks() {
        let cfg = SynthConfig {
            count: 4,
            seed: 1,
            ..Default::default()
        };
        for s in gen_pristine(&cfg).unwrap() {
            assert_eq!(s.mask.forged_count(), 0);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn odd_conflict_count_rejected() {
        let cfg = SynthConfig {
            count: 5,
            conflict_pair: true,
            ..Default::default()
        };
        assert!(gen_synthetic(&cfg).is_err());
    }
}
