//! Trainable patch embedder: each non-overlapping p×p×3 patch is flattened
//! and pushed through affine → ReLU → affine to produce one feature cell.
//! Forward and backward accumulate in f64; parameters are stored f32.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::Mat64;
use crate::tensor::{FeatureMap, Tensor};
use crate::{config, io, Error, Result};

/// Weights of the two-layer patch embedder.
///
/// `w1` is (p·p·3)×hidden row-major (input index major), `w2` is hidden×dim.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub patch: usize,
    pub hidden: usize,
    pub dim: usize,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl ExtractorParams {
    pub fn in_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Seeded Xavier-uniform initialization, zero biases.
    pub fn init(patch: usize, hidden: usize, dim: usize, seed: u64) -> Self {
        let in_dim = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |count: usize, fan_in: usize, fan_out: usize| -> Vec<f32> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..count).map(|_| rng.gen_range(-a..a) as f32).collect()
        };
        Self {
            patch,
            hidden,
            dim,
            w1: uniform(in_dim * hidden, in_dim, hidden),
            b1: vec![0.0; hidden],
            w2: uniform(hidden * dim, hidden, dim),
            b2: vec![0.0; dim],
        }
    }

    fn check(&self) -> Result<()> {
        let in_dim = self.in_dim();
        if self.patch == 0 || self.hidden == 0 || self.dim == 0 {
            return Err(Error::Dimension("patch, hidden, dim must be >= 1".into()));
        }
        if self.w1.len() != in_dim * self.hidden
            || self.b1.len() != self.hidden
            || self.w2.len() != self.hidden * self.dim
            || self.b2.len() != self.dim
        {
            return Err(Error::Dimension("parameter shapes inconsistent".into()));
        }
        let all = [&self.w1, &self.b1, &self.w2, &self.b2];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("extractor parameter".into()));
        }
        Ok(())
    }

    /// Writes the four weight tensors as FTZ files plus a key=value manifest.
    pub fn save_dir(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let in_dim = self.in_dim();
        io::save_tensor(
            &Tensor::new(vec![in_dim, self.hidden], self.w1.clone())?,
            dir.join("w1.ftz"),
        )?;
        io::save_tensor(&Tensor::new(vec![self.hidden], self.b1.clone())?, dir.join("b1.ftz"))?;
        io::save_tensor(
            &Tensor::new(vec![self.hidden, self.dim], self.w2.clone())?,
            dir.join("w2.ftz"),
        )?;
        io::save_tensor(&Tensor::new(vec![self.dim], self.b2.clone())?, dir.join("b2.ftz"))?;
        let manifest = format!(
            "patch={}\nhidden={}\ndim={}\nseed={}\n",
            self.patch, self.hidden, self.dim, seed
        );
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = config::parse_kv(&std::fs::read_to_string(dir.join("manifest.txt"))?)?;
        let get = |key: &str| -> Result<usize> {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("manifest missing {key}")))?
                .parse()
                .map_err(|_| Error::Config(format!("manifest key {key} not a number")))
        };
        let (patch, hidden, dim) = (get("patch")?, get("hidden")?, get("dim")?);
        let params = Self {
            patch,
            hidden,
            dim,
            w1: io::load_tensor(dir.join("w1.ftz"))?.data().to_vec(),
            b1: io::load_tensor(dir.join("b1.ftz"))?.data().to_vec(),
            w2: io::load_tensor(dir.join("w2.ftz"))?.data().to_vec(),
            b2: io::load_tensor(dir.join("b2.ftz"))?.data().to_vec(),
        };
        params.check()?;
        Ok(params)
    }
}

/// Gradients with the same shapes as [`ExtractorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ParamGrads64 {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ParamGrads64 {
    pub fn zeros(params: &ExtractorParams) -> Self {
        Self {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *v *= s;
        }
    }

    pub fn to_f32(&self) -> ParamGrads {
        ParamGrads {
            w1: self.w1.iter().map(|&v| v as f32).collect(),
            b1: self.b1.iter().map(|&v| v as f32).collect(),
            w2: self.w2.iter().map(|&v| v as f32).collect(),
            b2: self.b2.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-image forward state kept for the backward pass.
pub(crate) struct ForwardCache {
    pub grid_h: usize,
    pub grid_w: usize,
    /// cells × in_dim flattened patches.
    pub patches: Vec<f64>,
    /// cells × hidden post-ReLU activations.
    pub hidden: Vec<f64>,
    /// cells × dim feature rows.
    pub rows: Mat64,
}

pub(crate) fn forward_cells(image: &Tensor, params: &ExtractorParams) -> Result<ForwardCache> {
    params.check()?;
    let dims = image.dims();
    if dims.len() != 3 || dims[2] != 3 {
        return Err(Error::Dimension(format!(
            "extractor wants HxWx3 input, got {dims:?}"
        )));
    }
    let (h, w) = (dims[0], dims[1]);
    let p = params.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w} not divisible by patch {p}"
        )));
    }
    let (grid_h, grid_w) = (h / p, w / p);
    let cells = grid_h * grid_w;
    let (in_dim, hid, dim) = (params.in_dim(), params.hidden, params.dim);

    let mut patches = vec![0.0f64; cells * in_dim];
    let mut hidden = vec![0.0f64; cells * hid];
    let mut rows = vec![0.0f64; cells * dim];

    let data = image.data();
    for ci in 0..grid_h {
        for cj in 0..grid_w {
            let cell = ci * grid_w + cj;
            let patch = &mut patches[cell * in_dim..(cell + 1) * in_dim];
            for dy in 0..p {
                let src = ((ci * p + dy) * w + cj * p) * 3;
                let dst = dy * p * 3;
                for k in 0..p * 3 {
                    patch[dst + k] = data[src + k] as f64;
                }
            }
            let hrow = &mut hidden[cell * hid..(cell + 1) * hid];
            for (j, h_out) in hrow.iter_mut().enumerate() {
                let mut acc = params.b1[j] as f64;
                for (i, &x) in patch.iter().enumerate() {
                    acc += x * params.w1[i * hid + j] as f64;
                }
                *h_out = acc.max(0.0); // ReLU; subgradient at 0 is 0
            }
            let frow = &mut rows[cell * dim..(cell + 1) * dim];
            for (o, f_out) in frow.iter_mut().enumerate() {
                let mut acc = params.b2[o] as f64;
                for (j, &a) in hrow.iter().enumerate() {
                    acc += a * params.w2[j * dim + o] as f64;
                }
                *f_out = acc;
            }
        }
    }
    Ok(ForwardCache {
        grid_h,
        grid_w,
        patches,
        hidden,
        rows: Mat64::new(cells, dim, rows),
    })
}

/// Accumulates exact parameter gradients for `row_grads` (cells × dim) into
/// `out`.
pub(crate) fn backward_cells(
    cache: &ForwardCache,
    params: &ExtractorParams,
    row_grads: &[f64],
    out: &mut ParamGrads64,
) {
    let cells = cache.grid_h * cache.grid_w;
    let (in_dim, hid, dim) = (params.in_dim(), params.hidden, params.dim);
    debug_assert_eq!(row_grads.len(), cells * dim);

    let mut d_hidden = vec![0.0f64; hid];
    for cell in 0..cells {
        let df = &row_grads[cell * dim..(cell + 1) * dim];
        let a1 = &cache.hidden[cell * hid..(cell + 1) * hid];
        let patch = &cache.patches[cell * in_dim..(cell + 1) * in_dim];

        for (o, &g) in df.iter().enumerate() {
            out.b2[o] += g;
        }
        for (j, dh) in d_hidden.iter_mut().enumerate() {
            let w2row = &params.w2[j * dim..(j + 1) * dim];
            let mut acc = 0.0;
            for (o, &g) in df.iter().enumerate() {
                acc += g * w2row[o] as f64;
                out.w2[j * dim + o] += a1[j] * g;
            }
            // ReLU gate: post-activation 0 means the pre-activation was <= 0.
            *dh = if a1[j] > 0.0 { acc } else { 0.0 };
        }
        for (j, &dh) in d_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            out.b1[j] += dh;
            for (i, &x) in patch.iter().enumerate() {
                out.w1[i * hid + j] += x * dh;
            }
        }
    }
}

/// Runs the embedder over an H×W×3 image; output is (H/p)×(W/p)×dim.
pub fn extract(image: &Tensor, params: &ExtractorParams) -> Result<FeatureMap> {
    let cache = forward_cells(image, params)?;
    let data: Vec<f32> = cache.rows.data.iter().map(|&v| v as f32).collect();
    FeatureMap::new(cache.grid_h, cache.grid_w, params.dim, data)
}

/// Exact parameter gradients for an upstream gradient over the feature map.
pub fn extract_backward(
    image: &Tensor,
    params: &ExtractorParams,
    upstream: &FeatureMap,
) -> Result<ParamGrads> {
    let cache = forward_cells(image, params)?;
    if upstream.height() != cache.grid_h
        || upstream.width() != cache.grid_w
        || upstream.channels() != params.dim
    {
        return Err(Error::Dimension(format!(
            "upstream grad {}x{}x{} vs feature map {}x{}x{}",
            upstream.height(),
            upstream.width(),
            upstream.channels(),
            cache.grid_h,
            cache.grid_w,
            params.dim
        )));
    }
    let row_grads: Vec<f64> = upstream.data().iter().map(|&v| v as f64).collect();
    let mut out = ParamGrads64::zeros(params);
    backward_cells(&cache, params, &row_grads, &mut out);
    Ok(out.to_f32())
}
