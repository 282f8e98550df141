//! Training objectives and their analytic gradients.
//!
//! * warm-start: mean absolute deviation of the fused image from the
//!   pixel-wise average (or maximum) of the sources;
//! * regularizer: `1 / (Corr(ir, f) + Corr(vis, f))` with Pearson
//!   correlation and the denominator clamped below at [`REG_DENOM_FLOOR`];
//! * semantic: pixel-averaged cross-entropy, skipping pixels whose label is
//!   in the class mask;
//! * semantic-training: `sem + λ·reg`.
//!
//! Every `*_with_grad` function returns the gradient with respect to the
//! fused image (or the logits, for cross-entropy).

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{Image, LabelMap, WarmStartRule};

/// Added to each variance before the square root in [`corr`].
pub const CORR_EPS: f64 = 1e-8;
/// Lower clamp of the regularizer's denominator.
pub const REG_DENOM_FLOOR: f64 = 1e-3;

/// A scalar objective with its named parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub(crate) fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            components: vec![(name.to_string(), value)],
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

fn same_dims(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Mean `|f - t|` and its gradient (`sign(f - t)/n`, zero at the kink).
fn l1_to_target(fused: &[f64], target: impl Iterator<Item = f64>) -> (f64, Vec<f64>) {
    let n = fused.len() as f64;
    let mut sum = 0.0;
    let grad = fused
        .iter()
        .zip(target)
        .map(|(&f, t)| {
            let d = f - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (sum / n, grad)
}

fn ws_target(rule: WarmStartRule, a: f64, b: f64) -> f64 {
    match rule {
        WarmStartRule::Average => (a + b) / 2.0,
        WarmStartRule::Max => a.max(b),
    }
}

pub fn l_ws_with_grad(
    rule: WarmStartRule,
    fused: &Image,
    ir: &Image,
    vis: &Image,
) -> Result<(LossValue, Tensor)> {
    same_dims(fused, ir, "warm-start loss")?;
    same_dims(fused, vis, "warm-start loss")?;
    let target = ir
        .pixels()
        .iter()
        .zip(vis.pixels())
        .map(|(&a, &b)| ws_target(rule, a, b));
    let (v, g) = l1_to_target(fused.pixels(), target);
    let (h, w) = fused.dims();
    Ok((
        LossValue::single("ws", v),
        Tensor::new(vec![1, 1, h, w], g)?,
    ))
}

/// `1/(HW) · ‖I_f − (I_ir + I_vis)/2‖₁`.
pub fn l_ws_average(fused: &Image, ir: &Image, vis: &Image) -> Result<LossValue> {
    Ok(l_ws_with_grad(WarmStartRule::Average, fused, ir, vis)?.0)
}

/// `1/(HW) · ‖I_f − max(I_ir, I_vis)‖₁`.
pub fn l_ws_max(fused: &Image, ir: &Image, vis: &Image) -> Result<LossValue> {
    Ok(l_ws_with_grad(WarmStartRule::Max, fused, ir, vis)?.0)
}

/// Pearson correlation of `a` and `f` and its gradient w.r.t. `f`.
fn corr_slices(a: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mf = f.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vf) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(f) {
        let (dx, dy) = (x - ma, y - mf);
        cov += dx * dy;
        va += dx * dx;
        vf += dy * dy;
    }
    cov /= n;
    va /= n;
    vf /= n;
    let sa = (va + CORR_EPS).sqrt();
    let sf = (vf + CORR_EPS).sqrt();
    let r = cov / (sa * sf);
    let grad = a
        .iter()
        .zip(f)
        .map(|(&x, &y)| (x - ma) / (n * sa * sf) - cov * (y - mf) / (n * sa * sf * sf * sf))
        .collect();
    (r, grad)
}

/// Pearson correlation over all pixels, with [`CORR_EPS`] added to each
/// variance; constant images correlate at (about) zero.
pub fn corr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b, "corr")?;
    Ok(corr_slices(a.pixels(), b.pixels()).0)
}

fn reg_slices(fused: &[f64], ir: &[f64], vis: &[f64]) -> (LossValue, Vec<f64>) {
    let (ci, gi) = corr_slices(ir, fused);
    let (cv, gv) = corr_slices(vis, fused);
    let denom = ci + cv;
    let (value, grad) = if denom > REG_DENOM_FLOOR {
        let s = -1.0 / (denom * denom);
        (
            1.0 / denom,
            gi.iter().zip(&gv).map(|(a, b)| s * (a + b)).collect(),
        )
    } else {
        (1.0 / REG_DENOM_FLOOR, vec![0.0; fused.len()])
    };
    let lv = LossValue {
        value,
        components: vec![
            ("reg".into(), value),
            ("corr_ir".into(), ci),
            ("corr_vis".into(), cv),
            ("corr_sum".into(), denom),
        ],
    };
    (lv, grad)
}

pub fn l_reg_with_grad(fused: &Image, ir: &Image, vis: &Image) -> Result<(LossValue, Tensor)> {
    same_dims(fused, ir, "regularizer")?;
    same_dims(fused, vis, "regularizer")?;
    check_finite(fused.pixels(), "fused image")?;
    check_finite(ir.pixels(), "infrared image")?;
    check_finite(vis.pixels(), "visible image")?;
    let (lv, g) = reg_slices(fused.pixels(), ir.pixels(), vis.pixels());
    let (h, w) = fused.dims();
    Ok((lv, Tensor::new(vec![1, 1, h, w], g)?))
}

/// `1 / max(Corr(ir, f) + Corr(vis, f), δ)`.
pub fn l_reg(fused: &Image, ir: &Image, vis: &Image) -> Result<LossValue> {
    Ok(l_reg_with_grad(fused, ir, vis)?.0)
}

fn logit_dims(logits: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match logits.shape() {
        [k, h, w] => Ok((1, *k, *h, *w)),
        [b, k, h, w] => Ok((*b, *k, *h, *w)),
        s => Err(Error::Shape(format!(
            "logits must be (K, H, W) or (B, K, H, W), got {s:?}"
        ))),
    }
}

/// Cross-entropy over a batch of logits; pixels labelled with a masked
/// class leave both the sum and the pixel count.
pub fn l_sem_with_grad(
    logits: &Tensor,
    labels: &[&LabelMap],
    mask: &BTreeSet<u32>,
) -> Result<(LossValue, Tensor)> {
    let (b, k, h, w) = logit_dims(logits)?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{b} logit maps vs {} label maps",
            labels.len()
        )));
    }
    check_finite(logits.data(), "logits")?;
    let n = h * w;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    let d = logits.data();
    let mut probs = vec![0.0; k];
    for (bi, lab) in labels.iter().enumerate() {
        if lab.dims() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs logits {h}x{w}",
                lab.dims()
            )));
        }
        let base = bi * k * n;
        for (p, &y) in lab.labels().iter().enumerate() {
            if y as usize >= k {
                return Err(Error::Label {
                    row: p / w,
                    col: p % w,
                    label: y,
                    class_count: k,
                    file: None,
                });
            }
            if mask.contains(&y) {
                continue;
            }
            let m = (0..k)
                .map(|c| d[base + c * n + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (d[base + c * n + p] - m).exp();
                z += *pr;
            }
            total += z.ln() + m - d[base + y as usize * n + p];
            for (c, pr) in probs.iter().enumerate() {
                grad[base + c * n + p] = pr / z;
            }
            grad[base + y as usize * n + p] -= 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Mask);
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((
        LossValue::single("sem", total * inv),
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

/// Mean per-pixel cross-entropy of `(K, H, W)` logits against `labels`.
pub fn l_sem(logits: &Tensor, labels: &LabelMap, mask: &BTreeSet<u32>) -> Result<LossValue> {
    Ok(l_sem_with_grad(logits, &[labels], mask)?.0)
}

/// `l_sem + λ·l_reg`; components carry `sem`, `reg` and the correlations.
pub fn l_st(
    logits: &Tensor,
    labels: &LabelMap,
    fused: &Image,
    ir: &Image,
    vis: &Image,
    lambda: f64,
    mask: &BTreeSet<u32>,
) -> Result<LossValue> {
    let sem = l_sem(logits, labels, mask)?;
    let reg = l_reg(fused, ir, vis)?;
    Ok(combine_st(&sem, &reg, lambda))
}

pub(crate) fn combine_st(sem: &LossValue, reg: &LossValue, lambda: f64) -> LossValue {
    let mut components = vec![("sem".to_string(), sem.value)];
    components.extend(reg.components.iter().cloned());
    LossValue {
        value: sem.value + lambda * reg.value,
        components,
    }
}

fn images_of(t: &Tensor) -> Result<Vec<Image>> {
    let (b, _, _, _) = t.dims4();
    (0..b).map(|i| Image::from_tensor(t, i)).collect()
}

/// Warm-start loss over a `(B, 1, H, W)` batch (mean over all pixels).
pub fn ws_batch(
    rule: WarmStartRule,
    fused: &Tensor,
    ir: &Tensor,
    vis: &Tensor,
) -> Result<(LossValue, Tensor)> {
    if fused.shape() != ir.shape() || fused.shape() != vis.shape() {
        return Err(Error::ShapeMismatch(
            "warm-start batch shapes differ".into(),
        ));
    }
    let target = ir
        .data()
        .iter()
        .zip(vis.data())
        .map(|(&a, &b)| ws_target(rule, a, b));
    let (v, g) = l1_to_target(fused.data(), target);
    Ok((
        LossValue::single("ws", v),
        Tensor::new(fused.shape().to_vec(), g)?,
    ))
}

/// Regularizer over a batch: computed per image and averaged; the
/// correlation components are batch means too.
pub fn reg_batch(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<(LossValue, Tensor)> {
    if fused.shape() != ir.shape() || fused.shape() != vis.shape() {
        return Err(Error::ShapeMismatch(
            "regularizer batch shapes differ".into(),
        ));
    }
    check_finite(fused.data(), "fused image")?;
    let (b, _, h, w) = fused.dims4();
    let n = h * w;
    let inv = 1.0 / b as f64;
    let mut grad = Vec::with_capacity(fused.len());
    let mut sums = [0.0; 4];
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let (lv, g) = reg_slices(
            &fused.data()[r.clone()],
            &ir.data()[r.clone()],
            &vis.data()[r],
        );
        for (s, (_, v)) in sums.iter_mut().zip(&lv.components) {
            *s += v * inv;
        }
        grad.extend(g.into_iter().map(|x| x * inv));
    }
    let lv = LossValue {
        value: sums[0],
        components: vec![
            ("reg".into(), sums[0]),
            ("corr_ir".into(), sums[1]),
            ("corr_vis".into(), sums[2]),
            ("corr_sum".into(), sums[3]),
        ],
    };
    Ok((lv, Tensor::new(fused.shape().to_vec(), grad)?))
}

/// Per-image correlation sums `Corr(ir, f) + Corr(vis, f)` of a batch.
pub fn corr_sums(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Vec<f64>> {
    let f = images_of(fused)?;
    let a = images_of(ir)?;
    let b = images_of(vis)?;
    f.iter()
        .zip(a.iter().zip(&b))
        .map(|(f, (a, b))| Ok(corr(a, f)? + corr(b, f)?))
        .collect()
}
