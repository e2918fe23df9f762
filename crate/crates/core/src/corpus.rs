//! Image and model persistence, plus the procedural two-class corpus that
//! stands in for real radiographs at desk scale.
//!
//! Images persist as binary PGM (`P5`, maxval 255) in a
//! `<root>/<class>/<id>.pgm` layout. Model parameters persist in the
//! `AGB1` checkpoint format defined by [`save_checkpoint`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::selection::{LabeledDataset, Provenance, Record};

/// One stored image: square power-of-two grayscale, u8 pixels quantized
/// from `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub class_label: String,
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn new(id: String, class_label: String, size: usize, pixels: Vec<u8>) -> Result<Self> {
        if !size.is_power_of_two() {
            return Err(Error::Dataset(format!(
                "image `{id}` size {size} is not a power of two"
            )));
        }
        if pixels.len() != size * size {
            return Err(Error::Dataset(format!(
                "image `{id}`: {} pixels for size {size}",
                pixels.len()
            )));
        }
        Ok(ImageRecord {
            id,
            class_label,
            size,
            pixels,
        })
    }
}

/// `[-1, 1]` to u8 by `round((x + 1) * 127.5)`, clamped to `[0, 255]`.
pub fn quantize(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// u8 back to `[-1, 1]`; the quantize/dequantize round trip stays within
/// `1/127.5` of the original.
pub fn dequantize(q: u8) -> f32 {
    q as f32 / 127.5 - 1.0
}

pub fn quantize_image(pixels: &Tensor<f32>) -> Vec<u8> {
    pixels.data().iter().map(|&x| quantize(x)).collect()
}

// ---- PGM ------------------------------------------------------------

/// Write one image as binary PGM with the exact header
/// `P5\n<W> <H>\n255\n` followed by raw bytes.
pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Read a binary PGM. Accepts whitespace and `#` comments between header
/// tokens; requires maxval 255 and the exact declared pixel count.
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |message: &str| Error::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    };

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fail("missing P5 magic"));
    }
    let mut pos = 2usize;
    let token = |pos: &mut usize| -> Result<usize> {
        // skip whitespace and comment lines
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail("expected integer in header"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("bad integer in header"))
    };

    let width = token(&mut pos)?;
    let height = token(&mut pos)?;
    let maxval = token(&mut pos)?;
    if maxval != 255 {
        return Err(fail("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing separator after maxval"));
    }
    pos += 1;
    let expected = width * height;
    if bytes.len() - pos < expected {
        return Err(fail("truncated pixel data"));
    }
    if bytes.len() - pos > expected {
        return Err(fail("trailing bytes after pixel data"));
    }
    Ok((width, height, bytes[pos..].to_vec()))
}

/// Write a dataset as `<root>/<class>/<id>.pgm`.
pub fn save_corpus(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    dataset.check_unique_ids()?;
    for name in dataset.class_names() {
        fs::create_dir_all(root.join(name))?;
    }
    for r in dataset.records() {
        let path = root
            .join(&dataset.class_names()[r.class])
            .join(format!("{}.pgm", r.id));
        save_pgm(
            &path,
            dataset.width(),
            dataset.height(),
            &quantize_image(&r.pixels),
        )?;
    }
    Ok(())
}

/// Load a PGM directory tree. Classes are the subdirectory names sorted;
/// ids are file stems sorted within each class. All images must share one
/// square power-of-two geometry.
pub fn load_corpus(root: &Path) -> Result<LabeledDataset> {
    let mut class_names: Vec<String> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut size: Option<usize> = None;
    let mut dataset: Option<LabeledDataset> = None;
    for (class_idx, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<std::path::PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} is empty",
                dir.display()
            )));
        }
        for path in files {
            let (w, h, pixels) = load_pgm(&path)?;
            if w != h || !w.is_power_of_two() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    message: format!("expected square power-of-two image, got {w}x{h}"),
                });
            }
            match size {
                None => {
                    size = Some(w);
                    dataset = Some(LabeledDataset::new(
                        class_names.clone(),
                        Provenance::Original,
                        h,
                        w,
                    ));
                }
                Some(s) if s != w => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        message: format!("image is {w}x{h}, corpus is {s}x{s}"),
                    });
                }
                _ => {}
            }
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let data: Vec<f32> = pixels.iter().map(|&q| dequantize(q)).collect();
            dataset.as_mut().unwrap().push(Record {
                id,
                class: class_idx,
                pixels: Tensor::from_vec(vec![1, h, w], data),
            })?;
        }
    }
    let dataset = dataset.unwrap();
    dataset.check_unique_ids()?;
    Ok(dataset)
}

// ---- checkpoints ------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"AGB1";
const CHECKPOINT_VERSION: u32 = 1;

/// Named f32 tensors in the `AGB1` container:
///
/// ```text
/// "AGB1"  version:u32  entry_count:u32
/// per entry: name_len:u32  name:utf-8  ndim:u32  dims:u32*  data:f32*
/// ```
///
/// All integers and floats little-endian. Save/load round-trips bitwise.
pub fn save_checkpoint(entries: &[(String, Tensor<f32>)], path: &Path) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    for (name, _) in entries {
        if !names.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate checkpoint entry `{name}`"
            )));
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let fail = |message: String| Error::Format {
        path: path.display().to_string(),
        message,
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(fail(format!("truncated at byte {pos}", pos = *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic, expected AGB1".into()));
    }
    let version = take_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = take_u32(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut names = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| fail("entry name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(fail(format!("duplicate entry `{name}`")));
        }
        let ndim = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

// ---- procedural corpus -------------------------------------------------

/// Two-class synthetic corpus in `[-1, 1]`:
///
/// * `class_0`: dark field with one smooth centered elliptical gradient
///   lobe plus mild Gaussian pixel noise;
/// * `class_1`: the same base plus 2..=5 bright Gaussian "opacity"
///   patches at random interior positions.
///
/// Patch intensity is tuned so the classes overlap on mean brightness (a
/// single threshold lands around 0.8 accuracy) while remaining nearly
/// separable for a small CNN.
pub fn generate_synthetic_corpus(
    n_per_class: usize,
    size: usize,
    rng: &mut RngStream,
) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be positive".into()));
    }
    if size < 16 || !size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "size must be a power of two >= 16, got {size}"
        )));
    }
    let mut dataset = LabeledDataset::new(
        vec!["class_0".into(), "class_1".into()],
        Provenance::Original,
        size,
        size,
    );
    for class in 0..2usize {
        for i in 0..n_per_class {
            let pixels = synth_image(class, size, rng);
            dataset.push(Record {
                id: format!("c{class}_{i:05}"),
                class,
                pixels,
            })?;
        }
    }
    Ok(dataset)
}

fn synth_image(class: usize, size: usize, rng: &mut RngStream) -> Tensor<f32> {
    let s = size as f64;
    let cx = s * rng.next_range(0.44, 0.56);
    let cy = s * rng.next_range(0.44, 0.56);
    let ax = s * rng.next_range(0.25, 0.31);
    let ay = s * rng.next_range(0.25, 0.31);
    let amp = rng.next_range(1.0, 1.3);

    let mut img = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let rx = (x as f64 + 0.5 - cx) / ax;
            let ry = (y as f64 + 0.5 - cy) / ay;
            let lobe = amp * (-(rx * rx + ry * ry) / 2.0).exp();
            img[y * size + x] = (-0.85 + lobe) as f32;
        }
    }

    if class == 1 {
        let patches = 2 + rng.next_usize(4); // 2..=5
        for _ in 0..patches {
            let px = s * rng.next_range(0.25, 0.75);
            let py = s * rng.next_range(0.25, 0.75);
            let sigma = s * rng.next_range(0.05, 0.10);
            let pamp = rng.next_range(0.45, 0.80);
            // only touch the local window around the patch
            let r = (3.0 * sigma).ceil() as isize;
            let (ix, iy) = (px as isize, py as isize);
            for y in (iy - r).max(0)..(iy + r).min(size as isize) {
                for x in (ix - r).max(0)..(ix + r).min(size as isize) {
                    let dx = (x as f64 + 0.5 - px) / sigma;
                    let dy = (y as f64 + 0.5 - py) / sigma;
                    img[y as usize * size + x as usize] +=
                        (pamp * (-(dx * dx + dy * dy) / 2.0).exp()) as f32;
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = (*v + 0.06 * rng.next_normal_f64() as f32).clamp(-1.0, 1.0);
    }
    Tensor::from_vec(vec![1, size, size], img)
}
