//! File formats: FTZ binary tensors, PGM masks, PPM images, CSV reports.
//!
//! Decoders are total over arbitrary bytes: any malformed input yields an
//! `Err`, never a panic, and no allocation is sized from unvalidated header
//! fields. The byte-slice entry points (`decode_*`) are fuzzed.

use std::fs;
use std::path::Path;

use crate::tensor::{ForgeryMask, Tensor};
use crate::{Error, Result};

const FTZ_MAGIC: &[u8; 4] = b"FTZ1";
const FTZ_DTYPE_F32: u8 = 1;

/// Serializes a tensor: magic `FTZ1`, u8 dtype (1 = f32), u8 ndim, then
/// ndim little-endian u32 extents, then the row-major f32 payload.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(FTZ_MAGIC);
    out.push(FTZ_DTYPE_F32);
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an FTZ byte stream. Rejects bad magic, unknown dtype, bad rank,
/// zero extents, payload length mismatches, and non-finite values.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(Error::Format("ftz: shorter than fixed header".into()));
    }
    if &bytes[0..4] != FTZ_MAGIC {
        return Err(Error::Format("ftz: bad magic, expected \"FTZ1\"".into()));
    }
    if bytes[4] != FTZ_DTYPE_F32 {
        return Err(Error::Format(format!("ftz: unsupported dtype {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::Format(format!("ftz: rank {ndim} outside 1..=4")));
    }
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("ftz: truncated extents".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let off = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if d == 0 {
            return Err(Error::Format("ftz: zero extent".into()));
        }
        dims.push(d as usize);
        count = count.saturating_mul(d as u64);
    }
    let payload = &bytes[header..];
    if payload.len() as u64 != count.saturating_mul(4) {
        return Err(Error::Format(format!(
            "ftz: dims {dims:?} imply {count} f32 values, payload holds {} bytes",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Binary PGM (P5, maxval 255): 0 = pristine, 255 = forged.
pub fn encode_mask(m: &ForgeryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.data().iter().map(|&v| if v == 1 { 255u8 } else { 0u8 }));
    out
}

/// Parses a binary PGM; any pixel ≥ 128 is treated as forged.
pub fn decode_mask(bytes: &[u8]) -> Result<ForgeryMask> {
    let (w, h, maxval, pixels) = parse_pnm_header(bytes, b"P5")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("pgm: maxval {maxval} outside 1..=255")));
    }
    let need = w as u64 * h as u64;
    if pixels.len() as u64 != need {
        return Err(Error::Format(format!(
            "pgm: {w}x{h} needs {need} bytes, got {}",
            pixels.len()
        )));
    }
    let data = pixels.iter().map(|&v| u8::from(v >= 128)).collect();
    ForgeryMask::new(h as usize, w as usize, data)
}

pub fn save_mask(m: &ForgeryMask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mask(m))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<ForgeryMask> {
    decode_mask(&fs::read(path)?)
}

/// Binary PPM (P6, maxval 255) from an H×W×3 tensor of values in [0, 1].
pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    if dims.len() != 3 || dims[2] != 3 {
        return Err(Error::Dimension(format!(
            "ppm wants an HxWx3 tensor, got dims {dims:?}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", dims[1], dims[0]).into_bytes();
    out.extend(
        t.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Parses a binary PPM into an H×W×3 tensor with values in [0, 1].
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, maxval, pixels) = parse_pnm_header(bytes, b"P6")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("ppm: maxval {maxval} outside 1..=255")));
    }
    let need = (w as u64 * h as u64).saturating_mul(3);
    if pixels.len() as u64 != need {
        return Err(Error::Format(format!(
            "ppm: {w}x{h} needs {need} bytes, got {}",
            pixels.len()
        )));
    }
    let scale = 1.0 / maxval as f32;
    let data = pixels.iter().map(|&v| v as f32 * scale).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_image(t)?)?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

/// Parses a PNM header (`magic`, width, height, maxval) tolerating comments
/// and arbitrary whitespace; returns the raster slice after the single
/// whitespace byte that terminates the maxval token.
fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(u32, u32, u32, &'a [u8])> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(Error::Format(format!(
            "pnm: bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        pos = skip_pnm_separators(bytes, pos)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Format("pnm: expected decimal field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text
            .parse::<u32>()
            .map_err(|_| Error::Format(format!("pnm: field {text} overflows u32")))?;
    }
    // Exactly one whitespace byte separates the maxval from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("pnm: missing raster separator".into()));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("pnm: degenerate size {w}x{h}")));
    }
    Ok((w, h, maxval, &bytes[pos..]))
}

fn skip_pnm_separators(bytes: &[u8], mut pos: usize) -> Result<usize> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        if pos >= bytes.len() {
            return Err(Error::Format("pnm: truncated header".into()));
        }
        return Ok(pos);
    }
}

/// Writes CSV rows with a header line, "." decimals and "\n" line endings.
pub fn write_csv(path: impl AsRef<Path>, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..60)
            .map(|i| ((i * 2654435761_usize) % 10_000) as f32 / 9_999.0 - 0.5)
            .collect();
        let t = Tensor::new(vec![3, 4, 5], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ftz");
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_tensor_rejected() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_rejected() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_payload_rejected_on_load() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        let nan = f32::NAN.to_le_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&nan);
        assert!(matches!(decode_tensor(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mask_round_trip_all_zero() {
        let m = ForgeryMask::zeros(3, 5).unwrap();
        let back = decode_mask(&encode_mask(&m)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn mask_threshold_rule() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.push(200);
        bytes.push(127);
        let m = decode_mask(&bytes).unwrap();
        assert_eq!(m.data(), &[1, 0]);
    }

    #[test]
    fn mask_save_load_is_canonical() {
        // Any >=128 source becomes 1, re-encoding yields exactly {0,255}.
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[130, 5, 255]);
        let m = decode_mask(&bytes).unwrap();
        let canon = encode_mask(&m);
        let again = decode_mask(&canon).unwrap();
        assert_eq!(m, again);
        assert_eq!(&canon[canon.len() - 3..], &[255, 0, 255]);
    }

    #[test]
    fn pnm_rejects_bad_headers() {
        assert!(decode_mask(b"P5").is_err());
        assert!(decode_mask(b"P5\n0 4\n255\n").is_err());
        assert!(decode_mask(b"P5\n2 2\n255\nab").is_err());
        assert!(decode_mask(b"P6\n1 1\n255\nabc").is_err());
        assert!(decode_image(b"P5\n1 1\n255\nx").is_err());
        assert!(decode_mask(b"P5\n99999999999 1\n255\n").is_err());
    }

    #[test]
    fn pnm_header_comments_ok() {
        let mut bytes = b"P5\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let m = decode_mask(&bytes).unwrap();
        assert_eq!(m.data(), &[0, 1]);
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let data: Vec<f32> = (0..2 * 2 * 3).map(|i| i as f32 / 11.0).collect();
        let t = Tensor::new(vec![2, 2, 3], data).unwrap();
        let back = decode_image(&encode_image(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
