//! IDX files: two zero bytes, a type code (only `0x08`, unsigned byte, is
//! accepted), a dimension count, one big-endian `u32` per dimension, then
//! the raw row-major payload. Images are 3-D `[N, rows, cols]`, labels 1-D `[N]`.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::Tensor;

const TYPE_U8: u8 = 0x08;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses the header and returns `(dims, payload offset)`.
fn header(bytes: &[u8], expected_ndims: u8) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != TYPE_U8 {
        return Err(format_err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    if bytes[3] != expected_ndims {
        return Err(format_err(3, format!("expected {expected_ndims} dimensions, found {}", bytes[3])));
    }
    let mut dims = Vec::with_capacity(expected_ndims as usize);
    let mut off = 4;
    for _ in 0..expected_ndims {
        let Some(chunk) = bytes.get(off..off + 4) else {
            return Err(format_err(bytes.len(), "truncated dimension header"));
        };
        dims.push(u32::from_be_bytes(chunk.try_into().expect("four bytes")) as usize);
        off += 4;
    }
    let payload: usize = dims.iter().product();
    if bytes.len() < off + payload {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {payload} bytes after offset {off}"),
        ));
    }
    if bytes.len() > off + payload {
        return Err(format_err(off + payload, "trailing bytes after payload"));
    }
    Ok((dims, off))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let (dims, off) = header(bytes, 3)?;
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: bytes[off..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, off) = header(bytes, 1)?;
    Ok(bytes[off..].to_vec())
}

/// Loads an image/label file pair, scales pixels to `[0, 1]` and optionally
/// average-pools each image down to `edge x edge`.
pub fn load_idx_images(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    downsample_to: Option<usize>,
) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&fs::read(labels_path.as_ref())?)?;
    if labels.len() != images.count {
        // offset 4 is the label count field
        return Err(format_err(
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    if images.count == 0 || images.rows == 0 || images.cols == 0 {
        return Err(format_err(4, "image file holds no pixels"));
    }
    let (out_rows, out_cols) = match downsample_to {
        None => (images.rows, images.cols),
        Some(edge) => {
            if edge == 0 || images.rows % edge != 0 || images.cols % edge != 0 {
                return Err(Error::config(format!(
                    "cannot pool {}x{} images down to {edge}x{edge}",
                    images.rows, images.cols
                )));
            }
            (edge, edge)
        }
    };
    let (fr, fc) = (images.rows / out_rows, images.cols / out_cols);
    let pool = (fr * fc) as f64;
    let mut data = Vec::with_capacity(images.count * out_rows * out_cols);
    for img in images.pixels.chunks(images.rows * images.cols) {
        for r in 0..out_rows {
            for c in 0..out_cols {
                let mut sum = 0.0;
                for dr in 0..fr {
                    for dc in 0..fc {
                        sum += f64::from(img[(r * fr + dr) * images.cols + c * fc + dc]);
                    }
                }
                data.push(sum / pool / 255.0);
            }
        }
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let name = images_path
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Tensor::new(vec![images.count, out_rows * out_cols], data)?,
        labels,
        num_classes,
        Some([0.0, 1.0]),
        name,
    )
}
