//! Dense tensor containers plus the shared shape plumbing: flattening,
//! row normalization, and bilinear resizing.

use crate::{Error, Result};

/// Row-major dense container of finite `f32` values, up to 4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting empty/oversized shapes, zero extents,
    /// length mismatches, and non-finite payloads.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::Dimension(format!(
                "tensor rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in dims {dims:?}")));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "dims {dims:?} imply {expect} elements, payload has {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {pos} is {}",
                data[pos]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Dense Ĥ×Ŵ×Ĉ embedding grid produced by an extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self {
            tensor: Tensor::new(vec![height, width, channels], data)?,
        })
    }

    /// Reinterprets a rank-3 tensor as a feature map.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.dims().len() != 3 {
            return Err(Error::Dimension(format!(
                "feature map needs rank 3, got dims {:?}",
                tensor.dims()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f32 {
        let (w, ch) = (self.width(), self.channels());
        self.tensor.data()[(i * w + j) * ch + c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }
}

/// Ĥ×Ŵ binary grid; 1 = forged, 0 = pristine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgeryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ForgeryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "mask dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} bytes, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Format(format!(
                "mask value at {pos} is {}, expected 0 or 1",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn forged_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn forged_fraction(&self) -> f64 {
        self.forged_count() as f64 / self.data.len() as f64
    }
}

/// ĤŴ×Ĉ matrix of flattened feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Flattens an Ĥ×Ŵ×Ĉ map into ĤŴ rows of Ĉ values, raster order: row `r`
/// holds cell `(r / Ŵ, r mod Ŵ)`.
pub fn flatten_features(f: &FeatureMap) -> FeatureMatrix {
    FeatureMatrix {
        rows: f.height() * f.width(),
        cols: f.channels(),
        data: f.data().to_vec(),
    }
}

/// Inverse of [`flatten_features`]; exact round trip.
pub fn unflatten_features(m: &FeatureMatrix, height: usize, width: usize) -> Result<FeatureMap> {
    if m.rows() != height * width {
        return Err(Error::Dimension(format!(
            "{} rows cannot reshape to {height}x{width}",
            m.rows()
        )));
    }
    FeatureMap::new(height, width, m.cols(), m.data.clone())
}

/// Divides each row by `max(‖row‖₂, eps)`. Norms accumulate in f64.
pub fn l2_normalize_rows(m: &FeatureMatrix, eps: f32) -> FeatureMatrix {
    assert!(eps > 0.0, "eps must be positive");
    let mut out = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let norm = row_norm(row).max(eps as f64);
        out.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    FeatureMatrix {
        rows: m.rows,
        cols: m.cols,
        data: out,
    }
}

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Channelwise bilinear resize with half-pixel centers: the source coordinate
/// of destination index `d` is `(d + 0.5) * src/dst - 0.5`, clamped to the
/// border.
pub fn resize_bilinear(f: &FeatureMap, target_h: usize, target_w: usize) -> FeatureMap {
    assert!(target_h >= 1 && target_w >= 1, "target dims must be >= 1");
    let (sh, sw, c) = (f.height(), f.width(), f.channels());
    let mut data = vec![0.0f32; target_h * target_w * c];

    let row_coords = axis_coords(sh, target_h);
    let col_coords = axis_coords(sw, target_w);

    for (ti, &(i0, i1, fi)) in row_coords.iter().enumerate() {
        for (tj, &(j0, j1, fj)) in col_coords.iter().enumerate() {
            for ch in 0..c {
                let v00 = f.at(i0, j0, ch) as f64;
                let v01 = f.at(i0, j1, ch) as f64;
                let v10 = f.at(i1, j0, ch) as f64;
                let v11 = f.at(i1, j1, ch) as f64;
                let top = v00 * (1.0 - fj) + v01 * fj;
                let bot = v10 * (1.0 - fj) + v11 * fj;
                data[(ti * target_w + tj) * c + ch] = (top * (1.0 - fi) + bot * fi) as f32;
            }
        }
    }
    FeatureMap::new(target_h, target_w, c, data).expect("finite inputs stay finite")
}

/// Per destination index: (low source index, high source index, fraction).
fn axis_coords(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = (d as f64 + 0.5) * scale - 0.5;
            let pos = pos.clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
