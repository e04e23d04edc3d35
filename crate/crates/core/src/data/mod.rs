//! Dataset ingestion: MNIST IDX files, binary PPM directories, seeded splits.

mod rng;

pub use rng::Rng;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complete images in `[0, 1]`, stored `[rows x cols x channels]`, with class ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX", format!("truncated {what} header")))
}

/// Decode an IDX image file: returns `(rows, cols, images)` with pixels scaled by 1/255.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Tensor>)> {
    decode_idx_images_prefix(bytes, usize::MAX)
}

/// Like [`decode_idx_images`], but decodes at most `limit` images.
pub fn decode_idx_images_prefix(bytes: &[u8], limit: usize) -> Result<(usize, usize, Vec<Tensor>)> {
    let magic = read_u32(bytes, 0, "image")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format("IDX", format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, "image")? as usize;
    let rows = read_u32(bytes, 8, "image")? as usize;
    let cols = read_u32(bytes, 12, "image")? as usize;
    let size = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * size {
        return Err(Error::format(
            "IDX",
            format!("truncated image payload: {} of {} bytes", payload.len(), count * size),
        ));
    }
    let images = payload
        .chunks_exact(size.max(1))
        .take(count.min(limit))
        .map(|px| {
            let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
            Tensor::from_vec([rows, cols, 1], data).expect("sized by construction")
        })
        .collect();
    Ok((rows, cols, images))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "label")?;
    if magic != LABEL_MAGIC {
        return Err(Error::format("IDX", format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, "label")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::format(
            "IDX",
            format!("truncated label payload: {} of {count} bytes", payload.len()),
        ));
    }
    Ok(payload[..count].iter().map(|&b| usize::from(b)).collect())
}

/// Re-encode grayscale images as an IDX image file (pixels rounded to bytes).
pub fn encode_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first().map(|t| t.dims()) {
        Some(&[r, c, 1]) => (r, c),
        Some(d) => return Err(Error::shape("encode_idx_images", d, &[0, 0, 1])),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.dims() != [rows, cols, 1] {
            return Err(Error::shape("encode_idx_images", img.dims(), &[rows, cols, 1]));
        }
        out.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load a pair of IDX files (images, labels).
pub fn parse_idx(images_file: impl AsRef<Path>, labels_file: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx_prefix(images_file, labels_file, usize::MAX)
}

/// Load the first `limit` examples of a pair of IDX files.
pub fn parse_idx_prefix(
    images_file: impl AsRef<Path>,
    labels_file: impl AsRef<Path>,
    limit: usize,
) -> Result<Dataset> {
    let (_, _, images) = decode_idx_images_prefix(&read_file(images_file.as_ref())?, limit)?;
    let mut labels = decode_idx_labels(&read_file(labels_file.as_ref())?)?;
    labels.truncate(limit);
    if images.len() != labels.len() {
        return Err(Error::format(
            "IDX",
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(Dataset { images, labels })
}

/// Decode a binary (P6) PPM with maxval 255 into `[rows x cols x 3]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode_netpbm(bytes, "PPM", "P6", 3)
}

/// Decode a binary (P5) PGM with maxval 255 into `[rows x cols x 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode_netpbm(bytes, "PGM", "P5", 1)
}

/// Quantize a value in `[0, 1]` to a byte; out-of-range values are clamped.
pub fn pixel_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encode a single-channel image `[rows x cols x 1]` as binary PGM.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let &[rows, cols, 1] = img.dims() else {
        return Err(Error::Unsupported(format!(
            "PGM needs a [rows x cols x 1] image, got {:?}",
            img.dims()
        )));
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| pixel_byte(v)));
    Ok(out)
}

fn decode_netpbm(bytes: &[u8], kind: &'static str, magic: &str, channels: usize) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(kind, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::format(kind, format!("unsupported magic {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(kind, format!("bad header field {s:?}")))
    };
    let (cols, rows, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(kind, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = rows * cols * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format(kind, "truncated raster"))?;
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_vec([rows, cols, channels], data)
}

/// Load every `*.ppm` in a directory (sorted by name). The label is the run of
/// leading digits in the file name, e.g. `7_00012.ppm` has label 7.
pub fn load_ppm_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    let mut ds = Dataset::default();
    for path in paths {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
        let label = digits
            .parse::<usize>()
            .map_err(|_| Error::format("PPM", format!("{}: no numeric label prefix", path.display())))?;
        ds.images.push(decode_ppm(&read_file(&path)?)?);
        ds.labels.push(label);
    }
    Ok(ds)
}

/// Seeded Fisher-Yates shuffle, then consecutive prefixes of the requested sizes.
pub fn split(dataset: &Dataset, sizes: (usize, usize), rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let (a, b) = sizes;
    if a + b > dataset.len() {
        return Err(Error::Config(format!(
            "split sizes {a}+{b} exceed dataset size {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    Ok((dataset.subset(&order[..a]), dataset.subset(&order[a..a + b])))
}
