//! Binary netpbm readers/writers: P6 (RGB, 8-bit) for images and P5
//! (grayscale, 8-bit) for masks and heatmaps. Output bytes are a pure
//! function of the pixel values, which keeps dataset builds reproducible.

use crate::error::{RefsegError, Result};
use std::io::Write;
use std::path::Path;
use tapegrad::Tensor;

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(RefsegError::io(format!("creating {}", path.display())))?;
    file.write_all(bytes)
        .map_err(RefsegError::io(format!("writing {}", path.display())))?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an [H, W, 3] tensor with values in [0, 1] as a binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.shape.len() != 3 || image.shape[2] != 3 {
        return Err(RefsegError::Format(format!(
            "write_ppm expects [H, W, 3], got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[0], image.shape[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data.iter().map(|&v| quantize(v)));
    write_atomic(path, &bytes)
}

/// Write an [H, W] tensor with values in [0, 1] as a binary PGM.
pub fn write_pgm(path: &Path, gray: &Tensor) -> Result<()> {
    if gray.shape.len() != 2 {
        return Err(RefsegError::Format(format!(
            "write_pgm expects [H, W], got {:?}",
            gray.shape
        )));
    }
    let (h, w) = (gray.shape[0], gray.shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(gray.data.iter().map(|&v| quantize(v)));
    write_atomic(path, &bytes)
}

/// 0/255 encoding of a binary mask.
pub fn write_mask_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    write_pgm(path, mask)
}

/// Min-max scale an arbitrary [H, W] map into [0, 1] and write it as PGM.
/// Constant maps come out all-zero.
pub fn write_heatmap_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.shape.len() != 2 {
        return Err(RefsegError::Format(format!(
            "write_heatmap_pgm expects [H, W], got {:?}",
            map.shape
        )));
    }
    let lo = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = if span > 0.0 {
        map.data.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; map.data.len()]
    };
    write_pgm(path, &Tensor::new(map.shape.clone(), scaled))
}

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

/// Parse "P6\n<w> <h>\n<maxval>\n" allowing comments and arbitrary
/// whitespace, as the format permits.
fn parse_header(bytes: &[u8], magic: &[u8], path: &Path) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(RefsegError::Format(format!(
            "{}: expected {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 && pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                let text = std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| RefsegError::Format(format!("{}: bad header", path.display())))?;
                let value: usize = text
                    .parse()
                    .map_err(|_| RefsegError::Format(format!("{}: bad header field {text}", path.display())))?;
                fields.push(value);
            }
        }
    }
    if fields.len() != 3 {
        return Err(RefsegError::Format(format!("{}: truncated header", path.display())));
    }
    if fields[2] != 255 {
        return Err(RefsegError::Format(format!(
            "{}: only maxval 255 is supported, got {}",
            path.display(),
            fields[2]
        )));
    }
    // A single whitespace byte separates the header from the raster.
    Ok(PnmHeader { width: fields[0], height: fields[1], data_offset: pos + 1 })
}

/// Read a binary PPM into an [H, W, 3] tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(RefsegError::io(format!("reading {}", path.display())))?;
    let header = parse_header(&bytes, b"P6", path)?;
    let n = header.width * header.height * 3;
    let raster = bytes
        .get(header.data_offset..header.data_offset + n)
        .ok_or_else(|| RefsegError::Format(format!("{}: truncated raster", path.display())))?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![header.height, header.width, 3], data))
}

/// Read a binary PGM into an [H, W] tensor with values in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(RefsegError::io(format!("reading {}", path.display())))?;
    let header = parse_header(&bytes, b"P5", path)?;
    let n = header.width * header.height;
    let raster = bytes
        .get(header.data_offset..header.data_offset + n)
        .ok_or_else(|| RefsegError::Format(format!("{}: truncated raster", path.display())))?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![header.height, header.width], data))
}

/// Read a mask PGM as strict 0/1 values (threshold at half intensity).
pub fn read_mask_pgm(path: &Path) -> Result<Tensor> {
    let gray = read_pgm(path)?;
    let data = gray.data.iter().map(|&v| f64::from(v > 0.5)).collect();
    Ok(Tensor::new(gray.shape, data))
}
