//! Paired-directory datasets and the seeded synthetic scene generator.
//!
//! On disk a split lives under `root/{split}/` with `ir/` (8-bit
//! grayscale), `vis/` (8-bit RGB) and optionally `labels/` (8-bit
//! single-channel class indices) holding PNG files matched by stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{
    validate_pair, Image, ImagePair, LabelMap, LabelPalette, RgbImage, TrainConfig,
};

pub const CLASS_BACKGROUND: u32 = 0;
pub const CLASS_HOT: u32 = 1;
pub const CLASS_STRUCTURE: u32 = 2;
pub const CLASS_GLARE: u32 = 3;

/// Brightest visible value outside glare; glare alone saturates.
const VIS_CEILING: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?} (train, val, test)"
            ))),
        }
    }
}

/// Parameters of the synthetic generator. Output is a pure function of
/// these fields.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Square side length in pixels.
    pub size: usize,
    pub count: usize,
    pub class_count: usize,
    pub seed: u64,
    pub glare_probability: f64,
    /// Inclusive range of hot blobs per scene.
    pub blob_range: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            count: 32,
            class_count: 4,
            seed: 0,
            glare_probability: 0.5,
            blob_range: (1, 4),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 8 != 0 {
            return Err(Error::Config(format!(
                "synthetic size must be a multiple of 8 and at least 16, got {}",
                self.size
            )));
        }
        if self.count == 0 {
            return Err(Error::Config(
                "synthetic image count must be positive".into(),
            ));
        }
        if !(4..=256).contains(&self.class_count) {
            return Err(Error::Config(format!(
                "synthetic scenes need 4..=256 classes, got {}",
                self.class_count
            )));
        }
        if !(0.0..=1.0).contains(&self.glare_probability) {
            return Err(Error::Config(format!(
                "glare probability {} outside [0, 1]",
                self.glare_probability
            )));
        }
        let (lo, hi) = self.blob_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "blob range {lo}..={hi} is empty or starts at 0"
            )));
        }
        Ok(())
    }

    /// The same spec with the seed salted per split, so train and val never
    /// share scenes.
    pub fn for_split(&self, split: Split) -> Self {
        let salt = match split {
            Split::Train => 0,
            Split::Val => 0x7A1_0000_0001,
            Split::Test => 0x7E5_0000_0002,
        };
        Self {
            seed: self.seed ^ salt,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub ir: f64,
    pub vis: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Striped rectangle present only in the visible image.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub period: usize,
    pub vertical_stripes: bool,
    pub lo: f64,
    pub hi: f64,
}

impl Structure {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }

    fn value(&self, row: usize, col: usize) -> f64 {
        let t = if self.vertical_stripes {
            col - self.left
        } else {
            row - self.top
        };
        if (t / self.period) % 2 == 0 {
            self.lo
        } else {
            self.hi
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Disc {
    pub cy: f64,
    pub cx: f64,
    pub r: f64,
}

impl Disc {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        dy * dy + dx * dx <= self.r * self.r
    }
}

/// Geometric description of one synthetic scene. Shapes are tested at
/// pixel centres `(row + 0.5, col + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub size: usize,
    /// Visible background `base + gy·y/size + gx·x/size`.
    pub vis_ramp: (f64, f64, f64),
    pub ir_ramp: (f64, f64, f64),
    /// Per-channel multipliers applied to the non-glare visible gray value.
    pub tint: [f64; 3],
    pub hot: Vec<Ellipse>,
    pub structures: Vec<Structure>,
    pub glare: Option<Disc>,
}

fn ramp((base, gy, gx): (f64, f64, f64), row: usize, col: usize, size: usize) -> f64 {
    base + gy * row as f64 / size as f64 + gx * col as f64 / size as f64
}

impl Scene {
    fn hot_at(&self, y: f64, x: f64) -> Option<&Ellipse> {
        self.hot.iter().rev().find(|e| e.contains(y, x))
    }

    fn glare_at(&self, y: f64, x: f64) -> bool {
        self.glare.as_ref().is_some_and(|d| d.contains(y, x))
    }

    /// Hot targets win over glare, glare over structures.
    pub fn label_at(&self, row: usize, col: usize) -> u32 {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        if self.hot_at(y, x).is_some() {
            CLASS_HOT
        } else if self.glare_at(y, x) {
            CLASS_GLARE
        } else if self.structures.iter().any(|s| s.contains(row, col)) {
            CLASS_STRUCTURE
        } else {
            CLASS_BACKGROUND
        }
    }

    /// Rasterizes the scene, quantizing every channel to 8 bits.
    pub fn render(&self) -> ImagePair {
        let n = self.size;
        let mut ir = Vec::with_capacity(n * n);
        let mut rgb = Vec::with_capacity(3 * n * n);
        let mut labels = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
                let hot = self.hot_at(y, x);
                ir.push(hot.map_or_else(|| ramp(self.ir_ramp, row, col, n), |e| e.ir));

                let mut v = ramp(self.vis_ramp, row, col, n);
                if let Some(s) = self.structures.iter().rev().find(|s| s.contains(row, col)) {
                    v = s.value(row, col);
                }
                if let Some(e) = hot {
                    v = e.vis;
                }
                if self.glare_at(y, x) {
                    rgb.extend([1.0; 3]);
                } else {
                    let v = v.clamp(0.0, VIS_CEILING);
                    rgb.extend(self.tint.map(|t| v * t));
                }
                labels.push(self.label_at(row, col));
            }
        }
        let ir = Image::from_u8(n, n, &Image::new(n, n, ir).expect("n·n pixels").to_u8())
            .expect("n·n bytes");
        let rgb = RgbImage::new(n, n, rgb).expect("3·n·n samples");
        let rgb = RgbImage::from_u8(n, n, &rgb.to_u8()).expect("3·n·n bytes");
        let labels = LabelMap::new(n, n, labels).expect("n·n labels");
        ImagePair::new(self.id.clone(), ir, rgb, Some(labels))
    }
}

fn draw_scene(rng: &mut ChaCha8Rng, spec: &SynthSpec, index: usize) -> Scene {
    let n = spec.size as f64;
    let vis_ramp = (
        rng.gen_range(0.35..0.55),
        rng.gen_range(-0.15..0.15),
        rng.gen_range(-0.15..0.15),
    );
    let ir_ramp = (
        rng.gen_range(0.15..0.3),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    );
    let tint = [
        rng.gen_range(0.9..1.0),
        rng.gen_range(0.9..1.0),
        rng.gen_range(0.9..1.0),
    ];

    let structure_count = rng.gen_range(1..=2);
    let structures = (0..structure_count)
        .map(|_| {
            let height = rng.gen_range(spec.size / 8..=spec.size / 3);
            let width = rng.gen_range(spec.size / 8..=spec.size / 3);
            Structure {
                top: rng.gen_range(0..=spec.size - height),
                left: rng.gen_range(0..=spec.size - width),
                height,
                width,
                period: rng.gen_range(2..=4),
                vertical_stripes: rng.gen_bool(0.5),
                lo: rng.gen_range(0.55..0.65),
                hi: rng.gen_range(0.8..VIS_CEILING),
            }
        })
        .collect();

    let blob_count = rng.gen_range(spec.blob_range.0..=spec.blob_range.1);
    let hot = (0..blob_count)
        .map(|_| {
            let ry = rng.gen_range(n / 16.0..n / 7.0);
            let rx = rng.gen_range(n / 16.0..n / 7.0);
            Ellipse {
                cy: rng.gen_range(ry..n - ry),
                cx: rng.gen_range(rx..n - rx),
                ry,
                rx,
                ir: rng.gen_range(0.8..0.95),
                vis: rng.gen_range(0.1..0.2),
            }
        })
        .collect();

    let glare = rng.gen_bool(spec.glare_probability).then(|| Disc {
        cy: rng.gen_range(0.0..n),
        cx: rng.gen_range(0.0..n),
        r: rng.gen_range(n / 8.0..n / 4.0),
    });

    Scene {
        id: format!("{index:05}"),
        size: spec.size,
        vis_ramp,
        ir_ramp,
        tint,
        hot,
        structures,
        glare,
    }
}

/// Scene descriptions of `spec`, in id order.
pub fn generate_scenes(spec: &SynthSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.count)
        .map(|i| draw_scene(&mut rng, spec, i))
        .collect())
}

/// Rendered, 8-bit quantized synthetic pairs with ground truth.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<ImagePair>> {
    Ok(generate_scenes(spec)?.iter().map(Scene::render).collect())
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

struct RawPng {
    width: usize,
    height: usize,
    channels: usize,
    indexed: bool,
    bytes: Vec<u8>,
}

fn read_png(path: &Path, expand: bool) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| unreadable(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    let t = if expand {
        png::Transformations::EXPAND | png::Transformations::STRIP_16
    } else {
        png::Transformations::STRIP_16
    };
    decoder.set_transformations(t);
    let mut reader = decoder.read_info().map_err(|e| unreadable(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| unreadable(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unreadable(
            path,
            format!("unsupported bit depth {:?}", info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    let (channels, indexed) = match info.color_type {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::Indexed => (1, true),
        png::ColorType::GrayscaleAlpha => (2, false),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (4, false),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    if info.line_size != width * channels {
        return Err(unreadable(path, "padded scanlines"));
    }
    Ok(RawPng {
        width,
        height,
        channels,
        indexed,
        bytes: buf,
    })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(std::io::Error::other)?;
    writer
        .write_image_data(bytes)
        .map_err(std::io::Error::other)?;
    writer.finish().map_err(std::io::Error::other)?;
    Ok(())
}

/// Single-channel image; colour inputs are reduced to luminance.
pub fn load_gray(path: &Path) -> Result<Image> {
    let raw = read_png(path, true)?;
    let rgb = to_rgb(&raw);
    let (h, w) = (raw.height, raw.width);
    if raw.channels <= 2 {
        let gray: Vec<u8> = rgb.chunks_exact(3).map(|p| p[0]).collect();
        return Image::from_u8(h, w, &gray);
    }
    Ok(crate::types::rgb_to_luma(&RgbImage::from_u8(h, w, &rgb)?))
}

/// Three-channel image; grayscale inputs are replicated.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let raw = read_png(path, true)?;
    RgbImage::from_u8(raw.height, raw.width, &to_rgb(&raw))
}

fn to_rgb(raw: &RawPng) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.width * raw.height * 3);
    for p in raw.bytes.chunks_exact(raw.channels) {
        match raw.channels {
            1 | 2 => out.extend([p[0]; 3]),
            _ => out.extend(&p[..3]),
        }
    }
    out
}

/// Class-index map from an 8-bit grayscale or palette-indexed PNG.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let raw = read_png(path, false)?;
    if raw.channels != 1 {
        return Err(unreadable(path, "labels must be single-channel"));
    }
    debug_assert!(raw.indexed || raw.bytes.len() == raw.width * raw.height);
    LabelMap::new(
        raw.height,
        raw.width,
        raw.bytes.iter().map(|&b| b as u32).collect(),
    )
}

pub fn save_gray(path: &Path, img: &Image) -> Result<()> {
    write_png(
        path,
        img.width(),
        img.height(),
        png::ColorType::Grayscale,
        &img.to_u8(),
    )
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_png(
        path,
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        &img.to_u8(),
    )
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let bytes = labels
        .labels()
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit in 8 bits")))
        })
        .collect::<Result<Vec<u8>>>()?;
    write_png(
        path,
        labels.width(),
        labels.height(),
        png::ColorType::Grayscale,
        &bytes,
    )
}

/// Writes `pairs` under `root/{split}/{ir,vis,labels}/{id}.png`.
pub fn save_split(root: &Path, split: Split, pairs: &[ImagePair]) -> Result<()> {
    let dir = root.join(split.as_str());
    let has_labels = pairs.iter().any(|p| p.label.is_some());
    for sub in ["ir", "vis"]
        .into_iter()
        .chain(has_labels.then_some("labels"))
    {
        fs::create_dir_all(dir.join(sub))?;
    }
    for p in pairs {
        let file = format!("{}.png", p.id);
        save_gray(&dir.join("ir").join(&file), &p.ir)?;
        save_rgb(&dir.join("vis").join(&file), &p.vis_rgb)?;
        if let Some(l) = &p.label {
            save_labels(&dir.join("labels").join(&file), l)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

/// Validated entries of one split, sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
    pub rejected: Vec<Rejection>,
    pub palette: LabelPalette,
}

impl DatasetManifest {
    /// One tab-separated `id ir vis label` line per entry (`-` for no
    /// label), then one `# rejected` comment per rejection.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# root = {}\n# split = {}\n",
            self.root.display(),
            self.split
        );
        for e in &self.entries {
            let label = e
                .label
                .as_ref()
                .map_or("-".to_string(), |p| p.display().to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.ir.display(),
                e.vis.display(),
                label
            ));
        }
        for r in &self.rejected {
            out.push_str(&format!("# rejected {}: {}\n", r.id, r.reason));
        }
        out
    }

    pub fn load_pairs(&self, config: &TrainConfig) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .map(|e| load_entry(e, &self.palette, config))
            .collect()
    }
}

/// Loads and validates one entry; label errors name the label file.
pub fn load_entry(
    entry: &DatasetEntry,
    palette: &LabelPalette,
    config: &TrainConfig,
) -> Result<ImagePair> {
    let ir = load_gray(&entry.ir)?;
    let vis = load_rgb(&entry.vis)?;
    let label = match &entry.label {
        Some(path) => {
            let l = load_labels(path)?;
            l.check_classes(palette.class_count())
                .map_err(|e| with_file(e, path))?;
            Some(l)
        }
        None => None,
    };
    let pair = ImagePair::new(entry.id.clone(), ir, vis, label);
    validate_pair(pair, config).map_err(|e| match (&e, &entry.label) {
        (Error::Label { .. }, Some(path)) => with_file(e, path),
        (Error::ShapeMismatch(msg), _) => Error::ShapeMismatch(format!("{}: {msg}", entry.id)),
        _ => e,
    })
}

fn with_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Label {
            row,
            col,
            label,
            class_count,
            ..
        } => Error::Label {
            row,
            col,
            label,
            class_count,
            file: Some(path.to_path_buf()),
        },
        other => other,
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for item in fs::read_dir(dir).map_err(|e| unreadable(dir, e))? {
        let path = item?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Matches `dir/ir`, `dir/vis` and (when present) `dir/labels` PNGs by
/// stem. Stems missing a counterpart are rejected; nothing is decoded.
pub fn match_pair_files(dir: &Path) -> Result<(Vec<DatasetEntry>, Vec<Rejection>)> {
    let (ir_dir, vis_dir, label_dir) = (dir.join("ir"), dir.join("vis"), dir.join("labels"));
    if !ir_dir.is_dir() || !vis_dir.is_dir() {
        return Err(Error::EmptyDataset(format!(
            "{} needs ir/ and vis/ subdirectories",
            dir.display()
        )));
    }
    let ir = png_stems(&ir_dir)?;
    let vis = png_stems(&vis_dir)?;
    let labels = if label_dir.is_dir() {
        Some(png_stems(&label_dir)?)
    } else {
        None
    };

    let stems: BTreeSet<&String> = ir.keys().chain(vis.keys()).collect();
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for stem in stems {
        let reason = match (ir.get(stem), vis.get(stem)) {
            (None, _) => Some("missing ir image"),
            (_, None) => Some("missing visible image"),
            _ => match &labels {
                Some(l) if !l.contains_key(stem) => Some("missing label map"),
                _ => None,
            },
        };
        match reason {
            Some(reason) => rejected.push(Rejection {
                id: stem.clone(),
                reason: reason.into(),
            }),
            None => entries.push(DatasetEntry {
                id: stem.clone(),
                ir: ir[stem].clone(),
                vis: vis[stem].clone(),
                label: labels.as_ref().map(|l| l[stem].clone()),
            }),
        }
    }
    Ok((entries, rejected))
}

/// Scans and fully loads one split.
pub fn load_dataset(
    root: &Path,
    split: Split,
    palette: &LabelPalette,
    config: &TrainConfig,
) -> Result<(DatasetManifest, Vec<ImagePair>)> {
    let dir = root.join(split.as_str());
    let (entries, rejected) = match_pair_files(&dir)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no complete pairs under {}",
            dir.display()
        )));
    }
    let pairs = entries
        .iter()
        .map(|e| load_entry(e, palette, config))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
        rejected,
        palette: palette.clone(),
    };
    Ok((manifest, pairs))
}

/// Manifest of the validated, sorted pairs of one split.
pub fn scan_dataset(
    root: &Path,
    split: Split,
    palette: &LabelPalette,
    config: &TrainConfig,
) -> Result<DatasetManifest> {
    load_dataset(root, split, palette, config).map(|(m, _)| m)
}

/// Tile origins along an axis of length `len`: steps of `crop`, with the
/// last tile flush with the far edge.
pub fn tile_origins(len: usize, crop: usize) -> Vec<usize> {
    if crop == 0 || crop >= len {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..=len - crop).step_by(crop).collect();
    if out.last() != Some(&(len - crop)) {
        out.push(len - crop);
    }
    out
}

/// Every pair cut into `crop × crop` tiles in row-major tile order;
/// `crop = 0`, or a pair no larger than `crop`, keeps the pair whole.
pub fn tile_pairs(pairs: &[ImagePair], crop: usize) -> Result<Vec<ImagePair>> {
    let mut out = Vec::new();
    for p in pairs {
        let (h, w) = p.dims();
        if crop == 0 || (h <= crop && w <= crop) {
            out.push(p.clone());
            continue;
        }
        let (ch, cw) = (crop.min(h), crop.min(w));
        for &top in &tile_origins(h, ch) {
            for &left in &tile_origins(w, cw) {
                out.push(p.crop(top, left, ch, cw)?);
            }
        }
    }
    Ok(out)
}

/// Index batches for one epoch. The order depends only on `(seed, epoch)`;
/// the last batch may be short.
pub fn epoch_batches(
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Borrowed batches of `items` for one epoch.
pub fn batch_iterator<'a, T>(
    items: &'a [T],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> impl Iterator<Item = Vec<&'a T>> + 'a {
    epoch_batches(items.len(), batch_size, seed, epoch, shuffle)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &items[i]).collect())
}
