//! On-disk datasets: `<root>/<split>/images/*.png` paired by stem with
//! single-channel `<root>/<split>/masks/*.png`, plus `<root>/classes.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::loss::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    /// Display colour for overlays.
    pub color: [u8; 3],
}

/// Ordered class list; position is the class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTable {
    pub classes: Vec<ClassEntry>,
}

impl ClassTable {
    /// `background` plus `class1..` with the default palette.
    pub fn generic(num_classes: usize) -> Self {
        Self {
            classes: (0..num_classes)
                .map(|i| ClassEntry {
                    name: if i == 0 {
                        "background".into()
                    } else {
                        format!("class{i}")
                    },
                    color: default_palette(i),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn color(&self, class: u8) -> [u8; 3] {
        self.classes
            .get(class as usize)
            .map(|c| c.color)
            .unwrap_or_else(|| default_palette(class as usize))
    }
}

/// Distinct colours; class 0 is black.
pub fn default_palette(class: usize) -> [u8; 3] {
    const P: [[u8; 3]; 12] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
    ];
    P[class % P.len()]
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_class_table(root: &Path) -> Result<ClassTable> {
    let path = root.join("classes.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let table: ClassTable = serde_json::from_str(&text).map_err(|e| data_err(&path, e.to_string()))?;
    if table.is_empty() || table.len() > 256 {
        return Err(data_err(&path, format!("needs 1..=256 classes, found {}", table.len())));
    }
    Ok(table)
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| data_err(&path, "file name is not UTF-8"))?
            .to_string();
        out.insert(stem, path);
    }
    Ok(out)
}

/// Decode any PNG as RGB `[1, 3, h, w]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| data_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Read an 8-bit grayscale or palette PNG as raw class indices.
fn load_mask(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| data_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| data_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| data_err(path, e.to_string()))?;
    let ok_color = matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed);
    if !ok_color || info.bit_depth != png::BitDepth::Eight {
        return Err(data_err(
            path,
            format!(
                "mask must be 8-bit single-channel (gray or palette), found {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    LabelMap::new([1, h, w], data)
}

/// Load every image/mask pair of a split in lexicographic stem order.
pub fn load_dataset(root: &Path, split: &str, num_classes: usize) -> Result<Vec<SegSample>> {
    let dir = root.join(split);
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    for (stem, path) in &masks {
        if !images.contains_key(stem) {
            return Err(data_err(path, "mask has no matching image"));
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| data_err(img_path, "image has no matching mask"))?;
        let image = load_image(img_path)?;
        let mask = load_mask(mask_path)?;
        if mask.shape()[1..] != [image.h(), image.w()] {
            return Err(data_err(
                mask_path,
                format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.shape()[2],
                    mask.shape()[1],
                    image.w(),
                    image.h()
                ),
            ));
        }
        if let Some(&bad) = mask.data().iter().find(|&&v| v as usize >= num_classes) {
            return Err(data_err(
                mask_path,
                format!("class id {bad} out of range for {num_classes} classes"),
            ));
        }
        samples.push(SegSample::new(stem.clone(), image, mask)?);
    }
    if samples.is_empty() {
        return Err(data_err(&dir, "split contains no samples"));
    }
    Ok(samples)
}

pub fn save_mask_png(path: &Path, mask: &[u8], width: usize, height: usize) -> Result<()> {
    image::GrayImage::from_raw(width as u32, height as u32, mask.to_vec())
        .ok_or_else(|| Error::InvalidArgument("mask buffer does not match its size".into()))?
        .save(path)
        .map_err(|e| data_err(path, e.to_string()))
}

pub fn save_rgb_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::InvalidArgument("rgb buffer does not match its size".into()))?
        .save(path)
        .map_err(|e| data_err(path, e.to_string()))
}

/// Bilinear resize of `[n, c, h, w]` to `[n, c, oh, ow]` with half-pixel centres.
pub fn resize_bilinear(x: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = x.shape();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize {w}x{h} to {ow}x{oh}")));
    }
    let axis = |o: usize, out: usize, inp: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(inp - 1), (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..ow).map(|o| axis(o, ow, w)).collect();
    let ys: Vec<_> = (0..oh).map(|o| axis(o, oh, h)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] + (p[y0 * w + x1] - p[y0 * w + x0]) * fx;
                let bot = p[y1 * w + x0] + (p[y1 * w + x1] - p[y1 * w + x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}
