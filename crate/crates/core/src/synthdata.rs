//! Synthetic inlier scenes, outlier objects, and outlier-exposure mixing.
//!
//! Inlier scenes are Voronoi partitions of the canvas into class regions,
//! each class painted with its own colour and texture. Outlier images are
//! blobs with saturated, patterned textures on a muted gradient background;
//! none of the outlier textures reuse an inlier class palette.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::normal;
use crate::tensor::Tensor;

/// Which split of a generated dataset to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00,
            Split::Val => 0x7661_6c00,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub outlier_label: u8,
    /// Side length of generated inlier scenes before cropping.
    pub scene_size: usize,
    pub crop_size: usize,
    pub scale_ratios: Vec<f64>,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub outlier_train_count: usize,
    pub outlier_val_count: usize,
    /// Outlier objects pasted per OE sample.
    pub objects_per_image: usize,
    /// Voronoi sites per inlier scene.
    pub regions: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            outlier_label: 254,
            scene_size: 80,
            crop_size: 64,
            scale_ratios: vec![0.1, 0.125, 0.25, 0.5, 0.75],
            seed: 7,
            train_count: 200,
            val_count: 40,
            outlier_train_count: 100,
            outlier_val_count: 40,
            objects_per_image: 1,
            regions: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return config_err("num_classes must be at least 1");
        }
        if (self.outlier_label as usize) <= self.num_classes {
            return config_err(format!(
                "outlier label {} must exceed the class count {}",
                self.outlier_label, self.num_classes
            ));
        }
        if self.outlier_label == 255 {
            return config_err("label 255 is reserved");
        }
        if self.crop_size < 32 {
            return config_err(format!("crop_size {} below the minimum of 32", self.crop_size));
        }
        if self.scene_size < self.crop_size {
            return config_err("scene_size must be at least crop_size");
        }
        if self.scale_ratios.is_empty() {
            return config_err("scale_ratios must be nonempty");
        }
        if let Some(s) = self.scale_ratios.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
            return config_err(format!("scale ratio {s} outside (0, 1]"));
        }
        if self.regions == 0 {
            return config_err("regions must be at least 1");
        }
        if self.objects_per_image == 0 {
            return config_err("objects_per_image must be at least 1");
        }
        Ok(())
    }
}

/// An RGB image with channels in `[0, 1]`, row-major, channels fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, c: [f64; 3]) {
        let o = (y * self.w + x) * 3;
        for k in 0..3 {
            self.data[o + k] = c[k].clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { n: 1, h: self.h, w: self.w, c: 3, data: self.data.clone() }
    }

    fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut out = Image::new(h, w);
        for y in 0..h {
            let src = ((y0 + y) * self.w + x0) * 3;
            out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }
}

/// Single-channel integer map (class indices or a binary mask).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let mut out = LabelMap::new(h, w);
        for y in 0..h {
            let src = (y0 + y) * self.w + x0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        out
    }

    /// Nearest-neighbour resize (half-pixel centres).
    pub fn resize_nearest(&self, h: usize, w: usize) -> LabelMap {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = LabelMap::new(h, w);
        for y in 0..h {
            let sy = (((y as f64 + 0.5) * self.h as f64 / h as f64) as usize).min(self.h - 1);
            for x in 0..w {
                let sx = (((x as f64 + 0.5) * self.w as f64 / w as f64) as usize).min(self.w - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InlierSample {
    pub image: Image,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSample {
    pub image: Image,
    pub label: LabelMap,
}

/// An outlier-exposure composite: mixed image, mixed labels, and the binary
/// mask `m = [label == P]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OeSample {
    pub image: Image,
    pub label: LabelMap,
    pub mask: LabelMap,
}

/// Top-left offset used for a crop, recorded so it can be replayed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOffset {
    pub y: usize,
    pub x: usize,
}

/// Deterministic per-item seed derivation (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INLIER_PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.47], // road
    [0.22, 0.52, 0.20], // vegetation
    [0.52, 0.70, 0.92], // sky
    [0.60, 0.42, 0.30], // building
    [0.75, 0.62, 0.66], // sidewalk
    [0.15, 0.20, 0.42], // car
    [0.42, 0.36, 0.20], // terrain
    [0.80, 0.80, 0.74], // wall
];

fn inlier_colour(class: usize) -> [f64; 3] {
    if class <= INLIER_PALETTE.len() {
        INLIER_PALETTE[class - 1]
    } else {
        // Muted, deterministic extra colours for larger class counts.
        let t = class as f64 * 0.618_033_988_75;
        let f = |p: f64| 0.3 + 0.35 * (0.5 + 0.5 * (2.0 * std::f64::consts::PI * (t + p)).sin());
        [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
    }
}

/// Class-correlated texture on top of the base colour.
fn inlier_texel(class: usize, y: usize, x: usize, phase: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = inlier_colour(class);
    let (yf, xf) = (y as f64, x as f64);
    let pattern = match (class - 1) % 4 {
        0 => 0.0,
        1 => 0.08 * ((xf * 0.35 + phase).sin() * (yf * 0.31 + phase).cos()),
        2 => 0.06 * (yf * 0.05 + phase).sin(),
        _ => {
            if ((y as f64 + phase * 3.0) as i64).rem_euclid(4) < 2 {
                0.07
            } else {
                -0.07
            }
        }
    };
    let noise = 0.04;
    [
        base[0] + pattern + noise * normal(rng),
        base[1] + pattern + noise * normal(rng),
        base[2] + pattern + noise * normal(rng),
    ]
}

fn generate_inlier(cfg: &DatasetConfig, seed: u64) -> InlierSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.scene_size;
    let sites: Vec<(f64, f64, usize, f64)> = (0..cfg.regions)
        .map(|_| {
            (
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(1..=cfg.num_classes),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut image = Image::new(n, n);
    let mut label = LabelMap::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let site = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                    let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one region");
            label.set(y, x, site.2 as u8);
            let texel = inlier_texel(site.2, y, x, site.3, &mut rng);
            image.set_rgb(y, x, texel);
        }
    }
    InlierSample { image, label }
}

pub fn generate_inlier_dataset(cfg: &DatasetConfig, split: Split) -> Result<Vec<InlierSample>> {
    cfg.validate()?;
    let count = match split {
        Split::Train => cfg.train_count,
        Split::Val => cfg.val_count,
    };
    Ok((0..count)
        .map(|i| generate_inlier(cfg, derive_seed(cfg.seed, split.stream(), i as u64)))
        .collect())
}

fn outlier_texel(kind: usize, y: usize, x: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let jitter = 0.03 * normal(rng);
    let c = match kind {
        0 => {
            if ((y / 3) + (x / 3)) % 2 == 0 {
                [0.95, 0.10, 0.85]
            } else {
                [0.98, 0.92, 0.10]
            }
        }
        1 => {
            if (x + y) % 6 < 3 {
                [1.00, 0.55, 0.00]
            } else {
                [0.55, 0.10, 0.05]
            }
        }
        2 => {
            if (y % 4 < 2) && (x % 4 < 2) {
                [0.10, 0.95, 0.95]
            } else {
                [0.45, 0.05, 0.65]
            }
        }
        _ => {
            if x % 4 < 2 {
                [0.98, 0.98, 0.98]
            } else {
                [0.90, 0.05, 0.10]
            }
        }
    };
    [c[0] + jitter, c[1] + jitter, c[2] + jitter]
}

/// Fraction of pixels labelled as outlier foreground.
pub fn foreground_fraction(label: &LabelMap, outlier_label: u8) -> f64 {
    label.data.iter().filter(|&&v| v == outlier_label).count() as f64 / label.data.len() as f64
}

pub const MIN_BLOB_FRACTION: f64 = 0.02;
pub const MAX_BLOB_FRACTION: f64 = 0.5;

fn generate_outlier(cfg: &DatasetConfig, seed: u64) -> OutlierSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.crop_size;
    let nf = n as f64;
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut image = Image::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let t = 0.5 + 0.5 * ((x as f64 * angle.cos() + y as f64 * angle.sin()) / nf).clamp(-1.0, 1.0);
            let c: [f64; 3] = std::array::from_fn(|k| bg_a[k] * (1.0 - t) + bg_b[k] * t + 0.03 * normal(&mut rng));
            image.set_rgb(y, x, c);
        }
    }
    // Rejection loop on the measured area keeps every sample in range.
    let label = loop {
        let blobs = rng.gen_range(1..=3);
        let mut label = LabelMap::new(n, n);
        let shapes: Vec<_> = (0..blobs)
            .map(|_| {
                let cy = rng.gen_range(0.2 * nf..0.8 * nf);
                let cx = rng.gen_range(0.2 * nf..0.8 * nf);
                let ry = rng.gen_range(0.08 * nf..0.3 * nf);
                let rx = rng.gen_range(0.08 * nf..0.3 * nf);
                let wobble = rng.gen_range(0.0..0.25);
                let lobes = rng.gen_range(2..6) as f64;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (cy, cx, ry, rx, wobble, lobes, phase)
            })
            .collect();
        for y in 0..n {
            for x in 0..n {
                let inside = shapes.iter().any(|&(cy, cx, ry, rx, wobble, lobes, phase)| {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let theta = dy.atan2(dx);
                    let r = 1.0 + wobble * (lobes * theta + phase).sin();
                    dy * dy + dx * dx <= r * r
                });
                if inside {
                    label.set(y, x, cfg.outlier_label);
                }
            }
        }
        let frac = foreground_fraction(&label, cfg.outlier_label);
        if (MIN_BLOB_FRACTION..=MAX_BLOB_FRACTION).contains(&frac) {
            break label;
        }
    };
    let kind = rng.gen_range(0..4);
    for y in 0..n {
        for x in 0..n {
            if label.get(y, x) == cfg.outlier_label {
                let t = outlier_texel(kind, y, x, &mut rng);
                image.set_rgb(y, x, t);
            }
        }
    }
    OutlierSample { image, label }
}

pub fn generate_outlier_dataset(cfg: &DatasetConfig, split: Split) -> Result<Vec<OutlierSample>> {
    cfg.validate()?;
    let count = match split {
        Split::Train => cfg.outlier_train_count,
        Split::Val => cfg.outlier_val_count,
    };
    let stream = split.stream() ^ 0x6f75_746c;
    Ok((0..count)
        .map(|i| generate_outlier(cfg, derive_seed(cfg.seed, stream, i as u64)))
        .collect())
}

/// Bilinear image resize with half-pixel centres; identity at equal size.
pub fn resize_image(img: &Image, h: usize, w: usize) -> Image {
    if h == img.h && w == img.w {
        return img.clone();
    }
    let t = crate::nn::upsample_bilinear(&img.to_tensor(), h, w);
    Image { h, w, data: t.data }
}

/// Size of the outlier after scaling by `scale`.
pub fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

fn composite(
    mut base: OeSample,
    outlier: &OutlierSample,
    scale: f64,
    placement_seed: u64,
    outlier_label: u8,
) -> Result<OeSample> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Placement(format!("scale {scale} outside (0, 1]")));
    }
    let (sh, sw) = scaled_size(outlier.image.h, outlier.image.w, scale);
    if sh > base.image.h || sw > base.image.w {
        return Err(Error::Placement(format!(
            "scaled outlier {sh}x{sw} larger than inlier {}x{}",
            base.image.h, base.image.w
        )));
    }
    let img = resize_image(&outlier.image, sh, sw);
    let lab = outlier.label.resize_nearest(sh, sw);
    let mut rng = ChaCha8Rng::seed_from_u64(placement_seed);
    let y0 = rng.gen_range(0..=base.image.h - sh);
    let x0 = rng.gen_range(0..=base.image.w - sw);
    for y in 0..sh {
        for x in 0..sw {
            if lab.get(y, x) == outlier_label {
                let o = ((y0 + y) * base.image.w + x0 + x) * 3;
                let s = (y * sw + x) * 3;
                base.image.data[o..o + 3].copy_from_slice(&img.data[s..s + 3]);
                base.label.set(y0 + y, x0 + x, outlier_label);
                base.mask.set(y0 + y, x0 + x, 1);
            }
        }
    }
    Ok(base)
}

/// Outlier-exposure mixing: `x = (1-m) x_in + m x_out`,
/// `y = (1-m) y_in + m y_out` with `m = [y_out == P]` after the outlier is
/// scaled and placed uniformly at random.
pub fn mix_oe(
    inlier: &InlierSample,
    outlier: &OutlierSample,
    scale: f64,
    placement_seed: u64,
    outlier_label: u8,
) -> Result<OeSample> {
    let base = OeSample {
        image: inlier.image.clone(),
        label: inlier.label.clone(),
        mask: LabelMap::new(inlier.label.h, inlier.label.w),
    };
    composite(base, outlier, scale, placement_seed, outlier_label)
}

/// Pastes additional objects into an existing composite.
pub fn mix_more(
    sample: OeSample,
    outlier: &OutlierSample,
    scale: f64,
    placement_seed: u64,
    outlier_label: u8,
) -> Result<OeSample> {
    composite(sample, outlier, scale, placement_seed, outlier_label)
}

/// Samples that can be cropped with image/label/mask kept aligned.
pub trait Crop: Sized {
    fn dims(&self) -> (usize, usize);
    fn crop_at(&self, offset: CropOffset, size: usize) -> Self;

    fn random_offset(&self, crop_size: usize, seed: u64) -> Result<CropOffset> {
        let (h, w) = self.dims();
        if crop_size == 0 || crop_size > h || crop_size > w {
            return Err(Error::Shape(format!("crop {crop_size} larger than image {h}x{w}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(CropOffset { y: rng.gen_range(0..=h - crop_size), x: rng.gen_range(0..=w - crop_size) })
    }
}

impl Crop for InlierSample {
    fn dims(&self) -> (usize, usize) {
        (self.label.h, self.label.w)
    }

    fn crop_at(&self, o: CropOffset, size: usize) -> Self {
        Self { image: self.image.crop(o.y, o.x, size, size), label: self.label.crop(o.y, o.x, size, size) }
    }
}

impl Crop for OeSample {
    fn dims(&self) -> (usize, usize) {
        (self.label.h, self.label.w)
    }

    fn crop_at(&self, o: CropOffset, size: usize) -> Self {
        Self {
            image: self.image.crop(o.y, o.x, size, size),
            label: self.label.crop(o.y, o.x, size, size),
            mask: self.mask.crop(o.y, o.x, size, size),
        }
    }
}

/// Random aligned square crop. Returns the crop and the offset used.
pub fn augment_crop<S: Crop>(sample: &S, crop_size: usize, seed: u64) -> Result<(S, CropOffset)> {
    let offset = sample.random_offset(crop_size, seed)?;
    Ok((sample.crop_at(offset, crop_size), offset))
}

/// Pads (with zeros) or centre-crops an outlier image to `size x size`.
pub fn fit_outlier(sample: &OutlierSample, size: usize) -> OutlierSample {
    let mut image = Image::new(size, size);
    let mut label = LabelMap::new(size, size);
    let (h, w) = (sample.label.h, sample.label.w);
    let place = |src: usize, dst: usize| -> (usize, usize, usize) {
        if src >= dst {
            ((src - dst) / 2, 0, dst)
        } else {
            (0, (dst - src) / 2, src)
        }
    };
    let (sy, dy, ny) = place(h, size);
    let (sx, dx, nx) = place(w, size);
    for y in 0..ny {
        for x in 0..nx {
            image.set_rgb(dy + y, dx + x, sample.image.rgb(sy + y, sx + x));
            label.set(dy + y, dx + x, sample.label.get(sy + y, sx + x));
        }
    }
    OutlierSample { image, label }
}

/// Draws OE training composites from fixed inlier/outlier pools.
#[derive(Clone, Debug)]
pub struct OeSampler<'a> {
    pub cfg: &'a DatasetConfig,
    pub inliers: &'a [InlierSample],
    pub outliers: &'a [OutlierSample],
}

/// One OE composite together with the vanilla outlier image used for it.
#[derive(Clone, Debug, PartialEq)]
pub struct OePair {
    pub oe: OeSample,
    pub vanilla: OutlierSample,
}

impl<'a> OeSampler<'a> {
    pub fn new(cfg: &'a DatasetConfig, inliers: &'a [InlierSample], outliers: &'a [OutlierSample]) -> Result<Self> {
        cfg.validate()?;
        if inliers.is_empty() || outliers.is_empty() {
            return config_err("OE sampling needs nonempty inlier and outlier pools");
        }
        Ok(Self { cfg, inliers, outliers })
    }

    /// The `index`-th composite of the stream identified by `seed`.
    pub fn draw(&self, seed: u64, index: u64) -> Result<OePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6f65, index));
        let inlier = self.inliers.choose(&mut rng).expect("nonempty");
        let (cropped, _) = augment_crop(inlier, self.cfg.crop_size, rng.gen())?;
        let mut sample = OeSample {
            mask: LabelMap::new(cropped.label.h, cropped.label.w),
            image: cropped.image,
            label: cropped.label,
        };
        let mut first = None;
        for _ in 0..self.cfg.objects_per_image {
            let outlier = self.outliers.choose(&mut rng).expect("nonempty");
            let scale = *self.cfg.scale_ratios.choose(&mut rng).expect("nonempty");
            sample = mix_more(sample, outlier, scale, rng.gen(), self.cfg.outlier_label)?;
            first.get_or_insert(outlier);
        }
        let vanilla = fit_outlier(first.expect("at least one object"), self.cfg.crop_size);
        Ok(OePair { oe: sample, vanilla })
    }

    /// A fixed list of composites (used for evaluation splits).
    pub fn fixed_set(&self, seed: u64, count: usize) -> Result<Vec<OeSample>> {
        (0..count as u64).map(|i| self.draw(seed, i).map(|p| p.oe)).collect()
    }
}

/// The held-out OE evaluation set for a dataset configuration.
pub fn validation_oe_set(cfg: &DatasetConfig) -> Result<Vec<OeSample>> {
    let inliers = generate_inlier_dataset(cfg, Split::Val)?;
    let outliers = generate_outlier_dataset(cfg, Split::Val)?;
    OeSampler::new(cfg, &inliers, &outliers)?.fixed_set(derive_seed(cfg.seed, 0x6576_616c, 0), cfg.val_count)
}

/// Centre crops of the held-out inlier scenes at `crop_size`.
pub fn validation_inliers(cfg: &DatasetConfig) -> Result<Vec<InlierSample>> {
    let size = cfg.crop_size;
    Ok(generate_inlier_dataset(cfg, Split::Val)?
        .iter()
        .map(|s| {
            let (h, w) = s.dims();
            s.crop_at(CropOffset { y: (h - size) / 2, x: (w - size) / 2 }, size)
        })
        .collect())
}
