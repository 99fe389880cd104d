//! On-disk formats: dataset directories, prediction exports and plots.
//!
//! Dataset layout: `images/*.png` (8-bit RGB), `labels/*.png` (8-bit class
//! indices), `masks/*.png` (0/1, OE splits only) and `manifest.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{normalize_for_display, Prediction, SmoothingConfig};
use crate::synthdata::{
    generate_inlier_dataset, generate_outlier_dataset, validation_oe_set, DatasetConfig, Image, LabelMap, Split,
};
use crate::train::Histogram;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Quantises `[0, 1]` channels to bytes.
pub fn image_to_rgb8(img: &Image) -> RgbImage {
    let bytes = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(img.w as u32, img.h as u32, bytes).expect("buffer matches dimensions")
}

pub fn rgb8_to_image(img: &RgbImage) -> Image {
    Image { h: img.height() as usize, w: img.width() as usize, data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect() }
}

pub fn save_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    GrayImage::from_raw(label.w as u32, label.h as u32, label.data.clone())
        .expect("buffer matches dimensions")
        .save(path)?;
    Ok(())
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let g = image::open(path)?.into_luma8();
    Ok(LabelMap { h: g.height() as usize, w: g.width() as usize, data: g.into_raw() })
}

/// One listed sample; paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// `inlier-train`, `inlier-val`, `outlier-train`, `outlier-val` or `oe-val`.
    pub set: String,
    pub image: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub samples: Vec<SampleEntry>,
    pub crate_version: String,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text)?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Generates every split of `cfg` and writes it under `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "labels", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut samples = Vec::new();
    let mut put = |set: &str, i: usize, image: &Image, label: &LabelMap, mask: Option<&LabelMap>| -> Result<()> {
        let stem = format!("{set}_{i:04}.png");
        let entry = SampleEntry {
            set: set.to_string(),
            image: format!("images/{stem}"),
            label: format!("labels/{stem}"),
            mask: mask.map(|_| format!("masks/{stem}")),
        };
        image_to_rgb8(image).save(dir.join(&entry.image))?;
        save_label_png(&dir.join(&entry.label), label)?;
        if let (Some(m), Some(p)) = (mask, &entry.mask) {
            save_label_png(&dir.join(p), m)?;
        }
        samples.push(entry);
        Ok(())
    };
    for (set, split) in [("inlier-train", Split::Train), ("inlier-val", Split::Val)] {
        for (i, s) in generate_inlier_dataset(cfg, split)?.iter().enumerate() {
            put(set, i, &s.image, &s.label, None)?;
        }
    }
    for (set, split) in [("outlier-train", Split::Train), ("outlier-val", Split::Val)] {
        for (i, s) in generate_outlier_dataset(cfg, split)?.iter().enumerate() {
            put(set, i, &s.image, &s.label, None)?;
        }
    }
    for (i, s) in validation_oe_set(cfg)?.iter().enumerate() {
        put("oe-val", i, &s.image, &s.label, Some(&s.mask))?;
    }
    let manifest = DatasetManifest { config: cfg.clone(), samples, crate_version: env!("CARGO_PKG_VERSION").into() };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Fixed palette for class maps: index 0 is black, classes follow.
pub fn class_palette() -> Vec<[u8; 3]> {
    let mut p = vec![[0u8; 3]; 256];
    let base = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25], [145, 30, 180], [70, 240, 240]];
    for (i, c) in p.iter_mut().enumerate().skip(1) {
        *c = base[(i - 1) % base.len()];
    }
    p[254] = [255, 255, 255];
    p
}

/// Writes an 8-bit palette PNG whose pixel values are the class indices.
pub fn save_indexed_png(path: &Path, classes: &[u8], h: usize, w: usize) -> Result<()> {
    if classes.len() != h * w {
        return Err(Error::Shape(format!("{} classes for a {h}x{w} map", classes.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(class_palette().concat());
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(classes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Reads back the raw indices and the palette of an indexed PNG.
pub fn load_indexed_png(path: &Path) -> Result<(Vec<u8>, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec()).unwrap_or_default();
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    Ok((buf, frame.height as usize, frame.width as usize, palette))
}

/// Writes a little-endian float32 array in NPY version 1.0 format.
pub fn save_npy_f32(path: &Path, values: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::Shape(format!("{} values for shape {shape:?}", values.len())));
    }
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let tuple = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {tuple}, }}");
    // magic (6) + version (2) + length (2) + header + newline is a multiple of 64
    let pad = 64 - (10 + header.len() + 1) % 64;
    header.push_str(&" ".repeat(pad % 64));
    header.push('\n');
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(b"\x93NUMPY\x01\x00")?;
    out.write_all(&(header.len() as u16).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    for v in values {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an array written by [`save_npy_f32`].
pub fn load_npy_f32(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(Error::Format("not an NPY 1.0 file".into()));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|e| Error::Format(e.to_string()))?;
    if !header.contains("'descr': '<f4'") || !header.contains("'fortran_order': False") {
        return Err(Error::Format(format!("unsupported NPY header {header}")));
    }
    let inner = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Format("NPY header lacks a shape".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f32> =
        bytes[10 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if data.len() != shape.iter().product::<usize>() {
        return Err(Error::Format("NPY payload does not match its shape".into()));
    }
    Ok((data, shape))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Sidecar metadata written next to every prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub source: String,
    pub height: usize,
    pub width: usize,
    pub smoothing: SmoothingConfig,
    pub segnet_checksum: String,
    pub segnet_file_sha256: String,
    pub rpl_file_sha256: String,
    pub score_min: f64,
    pub score_max: f64,
}

/// Paths written by [`export_prediction`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedFiles {
    pub class_map: PathBuf,
    pub scores: PathBuf,
    pub preview: PathBuf,
    pub meta: PathBuf,
}

/// Writes `<stem>_classes.png`, `<stem>_anomaly.npy`, `<stem>_anomaly.png`
/// and `<stem>.json` under `dir`.
pub fn export_prediction(dir: &Path, stem: &str, pred: &Prediction, meta: &PredictionMeta) -> Result<ExportedFiles> {
    fs::create_dir_all(dir)?;
    let files = ExportedFiles {
        class_map: dir.join(format!("{stem}_classes.png")),
        scores: dir.join(format!("{stem}_anomaly.npy")),
        preview: dir.join(format!("{stem}_anomaly.png")),
        meta: dir.join(format!("{stem}.json")),
    };
    let (h, w) = (pred.scores.h, pred.scores.w);
    save_indexed_png(&files.class_map, &pred.class_map, h, w)?;
    save_npy_f32(&files.scores, &pred.scores.smoothed, &[h, w])?;
    GrayImage::from_raw(w as u32, h as u32, normalize_for_display(&pred.scores.smoothed))
        .expect("buffer matches dimensions")
        .save(&files.preview)?;
    fs::write(&files.meta, serde_json::to_string_pretty(meta)?)?;
    Ok(files)
}

/// Blue-to-red colour ramp over a min-max normalised map.
pub fn heatmap(values: &[f64], h: usize, w: usize) -> RgbImage {
    let bytes = normalize_for_display(values);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let t = bytes[y as usize * w + x as usize] as f64 / 255.0;
        Rgb([(255.0 * t) as u8, (255.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8])
    })
}

/// Overlaid bar chart of per-bin inlier (blue) and outlier (red) fractions.
pub fn histogram_plot(hist: &Histogram, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let bins = hist.inlier.len();
    let norm = |counts: &[usize]| -> Vec<f64> {
        let total = counts.iter().sum::<usize>().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    };
    let (fi, fo) = (norm(&hist.inlier), norm(&hist.outlier));
    let peak = fi.iter().chain(&fo).copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let bar_w = (width as usize / bins.max(1)).max(1);
    for b in 0..bins {
        for (frac, colour, tint) in [(fi[b], Rgb([40, 90, 220]), 0u8), (fo[b], Rgb([220, 50, 40]), 1u8)] {
            let bar_h = ((frac / peak) * (height as f64 - 1.0)).round() as u32;
            for x in b * bar_w..((b + 1) * bar_w).min(width as usize) {
                for y in height - bar_h..height {
                    let p = img.get_pixel_mut(x as u32, y);
                    // overlap of both bars shows as purple
                    *p = if tint == 1 && p.0 != [255, 255, 255] { Rgb([150, 60, 150]) } else { colour };
                }
            }
        }
    }
    img
}
