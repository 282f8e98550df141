//! Shared data model: images, labelled pairs, palettes and the training
//! configuration, plus pair validation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image; the `[0, 1]` range is checked by [`validate_pair`]
    /// and [`Image::check_range`], not here.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn check_range(&self) -> Result<()> {
        for (i, &v) in self.pixels.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range {
                    row: i / self.width,
                    col: i % self.width,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// `(1, 1, H, W)` feature map view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.clone())
            .expect("image length matches its dimensions")
    }

    /// Reads batch item `b` of a `(B, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, b: usize) -> Result<Self> {
        if t.shape().len() != 4 || t.shape()[1] != 1 {
            return Err(Error::Shape(format!(
                "expected a (B, 1, H, W) tensor, got {:?}",
                t.shape()
            )));
        }
        let (_, _, h, w) = t.dims4();
        Image::new(h, w, t.data()[b * h * w..(b + 1) * h * w].to_vec())
    }

    /// 8-bit quantization `round(255·v)` with clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Three-channel image, interleaved `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_gray(img: &Image) -> Self {
        let data = img.pixels().iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            height: img.height(),
            width: img.width(),
            data,
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        RgbImage::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    fn check_range(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                let p = i / 3;
                return Err(Error::Range {
                    row: p / self.width,
                    col: p % self.width,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// Luminance `Y = 0.299R + 0.587G + 0.114B`, clamped to `[0, 1]`.
pub fn rgb_to_luma(rgb: &RgbImage) -> Image {
    let pixels = rgb
        .data
        .chunks_exact(3)
        .map(|p| (KR * p[0] + KG * p[1] + KB * p[2]).clamp(0.0, 1.0))
        .collect();
    Image {
        height: rgb.height,
        width: rgb.width,
        pixels,
    }
}

/// Replaces the luminance of `rgb` with `luma`, keeping its Cb/Cr chroma.
pub fn reattach_chroma(luma: &Image, rgb: &RgbImage) -> Result<RgbImage> {
    if luma.dims() != rgb.dims() {
        return Err(Error::ShapeMismatch(format!(
            "luma {:?} vs colour {:?}",
            luma.dims(),
            rgb.dims()
        )));
    }
    let mut data = Vec::with_capacity(rgb.data.len());
    for (y, p) in luma.pixels().iter().zip(rgb.data.chunks_exact(3)) {
        let y0 = KR * p[0] + KG * p[1] + KB * p[2];
        let cb = 0.5 * (p[2] - y0) / (1.0 - KB);
        let cr = 0.5 * (p[0] - y0) / (1.0 - KR);
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / KG;
        data.extend([r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]);
    }
    RgbImage::new(rgb.height, rgb.width, data)
}

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} label map needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn check_classes(&self, class_count: usize) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize >= class_count {
                return Err(Error::Label {
                    row: i / self.width,
                    col: i % self.width,
                    label: l,
                    class_count,
                    file: None,
                });
            }
        }
        Ok(())
    }
}

/// Registered infrared/visible pair with an optional ground-truth map.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub ir: Image,
    pub vis_rgb: RgbImage,
    pub vis_luma: Image,
    pub label: Option<LabelMap>,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        ir: Image,
        vis_rgb: RgbImage,
        label: Option<LabelMap>,
    ) -> Self {
        let vis_luma = rgb_to_luma(&vis_rgb);
        Self {
            id: id.into(),
            ir,
            vis_rgb,
            vis_luma,
            label,
        }
    }

    /// Pair whose visible image is already single-channel.
    pub fn from_gray(
        id: impl Into<String>,
        ir: Image,
        vis: Image,
        label: Option<LabelMap>,
    ) -> Self {
        let vis_rgb = RgbImage::from_gray(&vis);
        Self {
            id: id.into(),
            ir,
            vis_rgb,
            vis_luma: vis,
            label,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ir.dims()
    }

    /// The `h × w` window at `(top, left)` of every image in the pair.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImagePair> {
        let (ph, pw) = self.dims();
        if top + h > ph || left + w > pw || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{}: crop {h}x{w} at ({top}, {left}) exceeds {ph}x{pw}",
                self.id
            )));
        }
        let rows = |width: usize, ch: usize| {
            move |r: usize| {
                (top + r) * width * ch + left * ch..(top + r) * width * ch + (left + w) * ch
            }
        };
        let gray = |img: &Image| -> Result<Image> {
            let f = rows(pw, 1);
            Image::new(
                h,
                w,
                (0..h)
                    .flat_map(|r| img.pixels()[f(r)].iter().copied())
                    .collect(),
            )
        };
        let f3 = rows(pw, 3);
        let rgb = RgbImage::new(
            h,
            w,
            (0..h)
                .flat_map(|r| self.vis_rgb.data()[f3(r)].iter().copied())
                .collect(),
        )?;
        let label = match &self.label {
            Some(l) => {
                let f = rows(pw, 1);
                Some(LabelMap::new(
                    h,
                    w,
                    (0..h)
                        .flat_map(|r| l.labels()[f(r)].iter().copied())
                        .collect(),
                )?)
            }
            None => None,
        };
        Ok(ImagePair {
            id: format!("{}@r{top}c{left}", self.id),
            ir: gray(&self.ir)?,
            vis_rgb: rgb,
            vis_luma: gray(&self.vis_luma)?,
            label,
        })
    }
}

/// Returns the pair unchanged when every pair invariant holds under `config`.
pub fn validate_pair(pair: ImagePair, config: &TrainConfig) -> Result<ImagePair> {
    let (h, w) = pair.ir.dims();
    if pair.vis_rgb.dims() != (h, w) || pair.vis_luma.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "{}: infrared {h}x{w} vs visible {}x{}",
            pair.id,
            pair.vis_rgb.height(),
            pair.vis_rgb.width()
        )));
    }
    if let Some(label) = &pair.label {
        if label.dims() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "{}: infrared {h}x{w} vs label {}x{}",
                pair.id,
                label.height(),
                label.width()
            )));
        }
    }
    check_spatial(h, w, config.scales)?;
    if pair.label.is_some() && (h % LABELLED_STRIDE != 0 || w % LABELLED_STRIDE != 0) {
        return Err(Error::Shape(format!(
            "{}: labelled pairs feed the segmentation net and must be divisible by {LABELLED_STRIDE}, got {h}x{w}",
            pair.id
        )));
    }
    pair.ir.check_range()?;
    pair.vis_rgb.check_range()?;
    pair.vis_luma.check_range()?;
    if let Some(label) = &pair.label {
        label.check_classes(config.class_count)?;
    }
    Ok(pair)
}

/// Spatial stride of the segmentation network; labelled pairs must be
/// divisible by it.
pub const LABELLED_STRIDE: usize = 8;

/// `H, W ≥ 8` and both divisible by `2^(scales-1)`.
pub fn check_spatial(h: usize, w: usize, scales: usize) -> Result<()> {
    let div = 1usize << scales.saturating_sub(1);
    if h < 8 || w < 8 || h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} must be at least 8x8 and divisible by {div} for {scales} scales"
        )));
    }
    Ok(())
}

/// Class names with an optional ignored index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPalette {
    class_names: Vec<String>,
    ignore_index: Option<u32>,
}

impl LabelPalette {
    pub fn new(class_names: Vec<String>, ignore_index: Option<u32>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Config("palette needs at least one class".into()));
        }
        let unique: BTreeSet<&String> = class_names.iter().collect();
        if unique.len() != class_names.len() {
            return Err(Error::Config("palette class names must be unique".into()));
        }
        if let Some(i) = ignore_index {
            if i as usize >= class_names.len() {
                return Err(Error::Config(format!("ignore index {i} out of range")));
            }
        }
        Ok(Self {
            class_names,
            ignore_index,
        })
    }

    /// Background plus the seven MFNet foreground classes.
    pub fn mfnet() -> Self {
        let names = [
            "unlabeled",
            "car",
            "person",
            "bike",
            "curve",
            "car stop",
            "color cone",
            "bump",
        ];
        Self::new(names.iter().map(|s| s.to_string()).collect(), None).expect("static palette")
    }

    /// Palette of the synthetic scene generator.
    pub fn synthetic() -> Self {
        let names = ["background", "hot-target", "cold-structure", "glare-zone"];
        Self::new(names.iter().map(|s| s.to_string()).collect(), None).expect("static palette")
    }

    /// Generic `class0..classK-1` names.
    pub fn numbered(class_count: usize) -> Self {
        Self::new(
            (0..class_count).map(|i| format!("class{i}")).collect(),
            None,
        )
        .expect("numbered names are unique")
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn ignore_index(&self) -> Option<u32> {
        self.ignore_index
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.class_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| i as u32)
    }

    /// Classes entering mAcc/mIoU: everything except class 0 and the
    /// ignored index.
    pub fn scored_classes(&self) -> Vec<u32> {
        (1..self.class_count() as u32)
            .filter(|&c| Some(c) != self.ignore_index)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// Efficient self-attention.
    Sla,
    /// Squeeze-and-excitation channel gating.
    Cha,
    /// Spatial gating.
    Spa,
    /// No strengthening; the fusion block is a plain average.
    None,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sla => "sla",
            Self::Cha => "cha",
            Self::Spa => "spa",
            Self::None => "none",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sla" => Ok(Self::Sla),
            "cha" => Ok(Self::Cha),
            "spa" => Ok(Self::Spa),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown attention variant `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WarmStartRule {
    Average,
    Max,
}

impl fmt::Display for WarmStartRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Max => "max",
        })
    }
}

impl FromStr for WarmStartRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "avg" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown warm-start rule `{other}`"))),
        }
    }
}

/// Every hyperparameter of both networks and both training phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub attention: AttentionVariant,
    pub class_count: usize,
    pub seg_width: usize,
    pub warm_start_rule: WarmStartRule,
    pub lambda: f64,
    pub class_mask: BTreeSet<u32>,
    pub warm_start_epochs: usize,
    pub semantic_epochs: usize,
    pub lr_warm: f64,
    pub lr_semantic: f64,
    pub lr_seg: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub skip_warm_start: bool,
    /// When false the semantic phase drops the cross-entropy term and only
    /// the correlation regularizer drives the fusion network.
    pub sem_loss: bool,
    pub clip_norm: f64,
    /// Side of the square warm-start tiles; 0 trains on whole images.
    pub crop: usize,
    /// Tile side for the semantic phase; 0 trains on whole images.
    pub semantic_crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            base_channels: 16,
            attention: AttentionVariant::Sla,
            class_count: 4,
            seg_width: 8,
            warm_start_rule: WarmStartRule::Average,
            lambda: 1.0,
            class_mask: BTreeSet::new(),
            warm_start_epochs: 20,
            semantic_epochs: 40,
            lr_warm: 1e-3,
            lr_semantic: 1e-4,
            lr_seg: 1e-3,
            batch_size: 1,
            seed: 0,
            skip_warm_start: false,
            sem_loss: true,
            clip_norm: 5.0,
            crop: 32,
            semantic_crop: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], with their sections.
pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "model.scales",
    "model.base_channels",
    "model.attention",
    "model.class_count",
    "model.seg_width",
    "train.warm_start_rule",
    "train.lambda",
    "train.class_mask",
    "train.warm_start_epochs",
    "train.semantic_epochs",
    "train.lr_warm",
    "train.lr_semantic",
    "train.lr_seg",
    "train.batch_size",
    "train.seed",
    "train.skip_warm_start",
    "train.sem_loss",
    "train.clip_norm",
    "train.crop",
    "train.semantic_crop",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_mask(value: &str) -> Result<BTreeSet<u32>> {
    let v = value.trim();
    if v.is_empty() || v == "{}" || v.eq_ignore_ascii_case("none") {
        return Ok(BTreeSet::new());
    }
    v.split(',')
        .map(|s| parse::<u32>("train.class_mask", s))
        .collect()
}

impl TrainConfig {
    /// Sets `section.key` from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.scales" => self.scales = parse(key, value)?,
            "model.base_channels" => self.base_channels = parse(key, value)?,
            "model.attention" => self.attention = value.trim().parse()?,
            "model.class_count" => self.class_count = parse(key, value)?,
            "model.seg_width" => self.seg_width = parse(key, value)?,
            "train.warm_start_rule" => self.warm_start_rule = value.trim().parse()?,
            "train.lambda" => self.lambda = parse(key, value)?,
            "train.class_mask" => self.class_mask = parse_mask(value)?,
            "train.warm_start_epochs" => self.warm_start_epochs = parse(key, value)?,
            "train.semantic_epochs" => self.semantic_epochs = parse(key, value)?,
            "train.lr_warm" => self.lr_warm = parse(key, value)?,
            "train.lr_semantic" => self.lr_semantic = parse(key, value)?,
            "train.lr_seg" => self.lr_seg = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.skip_warm_start" => self.skip_warm_start = parse(key, value)?,
            "train.sem_loss" => self.sem_loss = parse(key, value)?,
            "train.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.crop" => self.crop = parse(key, value)?,
            "train.semantic_crop" => self.semantic_crop = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`TRAIN_CONFIG_KEYS`] order; floats use the
    /// shortest round-tripping representation.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mask = self
            .class_mask
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let values = [
            self.scales.to_string(),
            self.base_channels.to_string(),
            self.attention.to_string(),
            self.class_count.to_string(),
            self.seg_width.to_string(),
            self.warm_start_rule.to_string(),
            self.lambda.to_string(),
            mask,
            self.warm_start_epochs.to_string(),
            self.semantic_epochs.to_string(),
            self.lr_warm.to_string(),
            self.lr_semantic.to_string(),
            self.lr_seg.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.skip_warm_start.to_string(),
            self.sem_loss.to_string(),
            self.clip_norm.to_string(),
            self.crop.to_string(),
            self.semantic_crop.to_string(),
        ];
        TRAIN_CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scales) {
            return Err(Error::Config(format!(
                "scales must be in [2, 4], got {}",
                self.scales
            )));
        }
        if self.base_channels == 0 || self.seg_width == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for lr in [self.lr_warm, self.lr_semantic, self.lr_seg] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rates must be positive, got {lr}"
                )));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        for (key, crop) in [
            ("train.crop", self.crop),
            ("train.semantic_crop", self.semantic_crop),
        ] {
            if crop == 0 {
                continue;
            }
            check_spatial(crop, crop, self.scales)
                .map_err(|e| Error::Config(format!("{key} = {crop}: {e}")))?;
            if crop % LABELLED_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "{key} must be a multiple of {LABELLED_STRIDE}, got {crop}"
                )));
            }
        }
        if let Some(&c) = self
            .class_mask
            .iter()
            .find(|&&c| c as usize >= self.class_count)
        {
            return Err(Error::Config(format!(
                "class mask entry {c} >= class_count"
            )));
        }
        Ok(())
    }
}
