//! Fusion statistics (spatial frequency, average gradient, cumulative
//! curves) and segmentation scoring from a confusion matrix.
//!
//! All values are computed on `[0, 1]` images. Figures quoted on 8-bit
//! images are 255 times larger for SF and AG.
//!
//! * `SF = √(RF² + CF²)`, where `RF²` is the mean squared difference between
//!   horizontally adjacent pixels and `CF²` the same for vertical
//!   neighbours.
//! * `AG` is the mean over the `(H−1)×(W−1)` pixels that have both forward
//!   differences of `√((Δx² + Δy²)/2)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::corr;
use crate::types::{Image, LabelMap};

pub fn spatial_frequency(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let mut rf = 0.0;
    for r in 0..h {
        for c in 1..w {
            rf += (img.get(r, c) - img.get(r, c - 1)).powi(2);
        }
    }
    let mut cf = 0.0;
    for r in 1..h {
        for c in 0..w {
            cf += (img.get(r, c) - img.get(r - 1, c)).powi(2);
        }
    }
    let rf = if w > 1 {
        rf / (h * (w - 1)) as f64
    } else {
        0.0
    };
    let cf = if h > 1 {
        cf / ((h - 1) * w) as f64
    } else {
        0.0
    };
    (rf + cf).sqrt()
}

pub fn average_gradient(img: &Image) -> f64 {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let dx = img.get(r, c + 1) - img.get(r, c);
            let dy = img.get(r + 1, c) - img.get(r, c);
            sum += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    sum / ((h - 1) * (w - 1)) as f64
}

/// Points `(k/n, v_k)` of the sorted values: a fraction `x` of the inputs
/// is no larger than `y`.
pub fn cumulative_curve(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Empty("cumulative curve of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.into_iter()
        .enumerate()
        .map(|(k, y)| ((k + 1) as f64 / n, y))
        .collect())
}

/// Two-column CSV (`fraction,value`) of a curve.
pub fn curve_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fraction,value\n");
    for (x, y) in points {
        writeln!(s, "{x},{y}").unwrap();
    }
    s
}

/// `K × K` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            k: class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel of one prediction; pixels whose truth equals
    /// `ignore` are skipped.
    pub fn accumulate(
        &mut self,
        pred: &LabelMap,
        truth: &LabelMap,
        ignore: Option<u32>,
    ) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs truth {:?}",
                pred.dims(),
                truth.dims()
            )));
        }
        pred.check_classes(self.k)?;
        truth.check_classes(self.k)?;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if Some(t) == ignore {
                continue;
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::ShapeMismatch(
                "confusion matrices of different sizes".into(),
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: u32,
    /// Recall `TP/(TP+FN)`; `None` when the class has no ground truth.
    pub acc: Option<f64>,
    /// `TP/(TP+FP+FN)`; `None` when the class is absent from both truth
    /// and prediction.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    pub per_class: Vec<ClassScore>,
    pub macc: f64,
    pub miou: f64,
}

/// Per-class accuracy (recall) and IoU plus their means over
/// `scored_classes`. Undefined entries are left out of the means.
pub fn class_scores(cm: &ConfusionMatrix, scored_classes: &[u32]) -> Result<SegScores> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix has no counts".into()));
    }
    let k = cm.class_count();
    let mut per_class = Vec::with_capacity(scored_classes.len());
    for &c in scored_classes {
        let c_idx = c as usize;
        if c_idx >= k {
            return Err(Error::Label {
                row: 0,
                col: 0,
                label: c,
                class_count: k,
                file: None,
            });
        }
        let tp = cm.get(c_idx, c_idx) as f64;
        let gt: f64 = (0..k).map(|p| cm.get(c_idx, p) as f64).sum();
        let pred: f64 = (0..k).map(|t| cm.get(t, c_idx) as f64).sum();
        let fn_ = gt - tp;
        let fp = pred - tp;
        let acc = (gt > 0.0).then(|| tp / gt);
        let iou = (tp + fp + fn_ > 0.0).then(|| tp / (tp + fp + fn_));
        per_class.push(ClassScore { class: c, acc, iou });
    }
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let macc = mean(per_class.iter().filter_map(|s| s.acc).collect());
    let miou = mean(per_class.iter().filter_map(|s| s.iou).collect());
    Ok(SegScores {
        per_class,
        macc,
        miou,
    })
}

/// Fusion statistics of one fused image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub sf: f64,
    pub ag: f64,
    pub corr_ir: f64,
    pub corr_vis: f64,
}

pub fn image_metrics(id: &str, fused: &Image, ir: &Image, vis: &Image) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        id: id.to_string(),
        sf: spatial_frequency(fused),
        ag: average_gradient(fused),
        corr_ir: corr(ir, fused)?,
        corr_vis: corr(vis, fused)?,
    })
}

/// Everything one evaluation run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub class_names: Vec<String>,
    pub segmentation: Option<SegScores>,
    pub sf_curve: Vec<(f64, f64)>,
    pub ag_curve: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn new(
        images: Vec<ImageMetrics>,
        class_names: Vec<String>,
        segmentation: Option<SegScores>,
    ) -> Result<Self> {
        let sf: Vec<f64> = images.iter().map(|m| m.sf).collect();
        let ag: Vec<f64> = images.iter().map(|m| m.ag).collect();
        let (sf_curve, ag_curve) = if images.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (cumulative_curve(&sf)?, cumulative_curve(&ag)?)
        };
        Ok(Self {
            images,
            class_names,
            segmentation,
            sf_curve,
            ag_curve,
        })
    }

    fn mean_of(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().map(f).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_sf(&self) -> f64 {
        self.mean_of(|m| m.sf)
    }

    pub fn mean_ag(&self) -> f64 {
        self.mean_of(|m| m.ag)
    }

    pub fn mean_corr_sum(&self) -> f64 {
        self.mean_of(|m| m.corr_ir + m.corr_vis)
    }

    pub fn miou(&self) -> Option<f64> {
        self.segmentation.as_ref().map(|s| s.miou)
    }

    fn class_name(&self, c: u32) -> String {
        self.class_names
            .get(c as usize)
            .cloned()
            .unwrap_or_else(|| format!("class{c}"))
    }

    /// `key = value` lines: counts, means, per-image values and per-class
    /// scores (percentages, two decimals, for the class table).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images = {}", self.images.len()).unwrap();
        writeln!(s, "mean_sf = {:.6}", self.mean_sf()).unwrap();
        writeln!(s, "mean_ag = {:.6}", self.mean_ag()).unwrap();
        writeln!(s, "mean_corr_sum = {:.6}", self.mean_corr_sum()).unwrap();
        for m in &self.images {
            writeln!(
                s,
                "image.{} = sf {:.6} ag {:.6} corr_ir {:.6} corr_vis {:.6}",
                m.id, m.sf, m.ag, m.corr_ir, m.corr_vis
            )
            .unwrap();
        }
        if let Some(seg) = &self.segmentation {
            for cs in &seg.per_class {
                writeln!(
                    s,
                    "class.{} = acc {} iou {}",
                    self.class_name(cs.class).replace(' ', "_"),
                    fmt_pct(cs.acc),
                    fmt_pct(cs.iou)
                )
                .unwrap();
            }
            writeln!(s, "macc = {:.2}", 100.0 * seg.macc).unwrap();
            writeln!(s, "miou = {:.2}", 100.0 * seg.miou).unwrap();
        }
        s
    }

    /// `class,acc,iou` rows in percent, then `mAcc` and `mIoU` rows.
    pub fn class_table_csv(&self) -> Option<String> {
        let seg = self.segmentation.as_ref()?;
        let mut s = String::from("class,acc,iou\n");
        for cs in &seg.per_class {
            writeln!(
                s,
                "{},{},{}",
                self.class_name(cs.class),
                fmt_pct(cs.acc),
                fmt_pct(cs.iou)
            )
            .unwrap();
        }
        writeln!(s, "mAcc,{:.2},", 100.0 * seg.macc).unwrap();
        writeln!(s, "mIoU,,{:.2}", 100.0 * seg.miou).unwrap();
        Some(s)
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", 100.0 * x),
        None => "-".into(),
    }
}
