//! Independent scalar-loop references and the checks shared by the oracle
//! tests and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfuse::losses::{self, CORR_EPS, REG_DENOM_FLOOR};
use semfuse::metrics::{average_gradient, class_scores, spatial_frequency, ConfusionMatrix};
use semfuse::train::{semantic_gradients, warm_gradients, Batch};
use semfuse::{
    efficient_attention, AttentionProjection, AttentionVariant, FusionModel, Image, ImagePair,
    LabelMap, SegModel, Tensor, TrainConfig, WarmStartRule,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- attention

/// Explicit path: build Q, K, V token by token, normalize every column of K
/// over the tokens, form `K_normᵀ V`, then multiply by Q.
pub fn attention_reference(f: &Tensor, p: &AttentionProjection) -> Vec<f64> {
    let (b, c, h, w) = f.dims4();
    let n = h * w;
    let x = f.data();
    let bias = |t: &Option<Tensor>, j: usize| t.as_ref().map_or(0.0, |t| t.data()[j]);
    let mut out = vec![0.0; f.len()];
    for bi in 0..b {
        let tok = |t: usize, i: usize| x[bi * c * n + i * n + t];
        let project = |wm: &Tensor, bm: &Option<Tensor>| {
            let mut m = vec![vec![0.0; c]; n];
            for (t, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = bias(bm, j)
                        + (0..c)
                            .map(|i| tok(t, i) * wm.data()[i * c + j])
                            .sum::<f64>();
                }
            }
            m
        };
        let q = project(&p.wq, &p.bq);
        let mut k = project(&p.wk, &p.bk);
        let v = project(&p.wv, &p.bv);
        for j in 0..c {
            let m = (0..n).map(|t| k[t][j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|t| (k[t][j] - m).exp()).sum();
            for row in k.iter_mut() {
                row[j] = (row[j] - m).exp() / z;
            }
        }
        let mut g = vec![vec![0.0; c]; c];
        for (i, gi) in g.iter_mut().enumerate() {
            for (j, gij) in gi.iter_mut().enumerate() {
                *gij = (0..n).map(|t| k[t][i] * v[t][j]).sum();
            }
        }
        for t in 0..n {
            for j in 0..c {
                out[bi * c * n + j * n + t] = (0..c).map(|i| q[t][i] * g[i][j]).sum();
            }
        }
    }
    out
}

pub fn rand_projection(rng: &mut impl Rng, c: usize, with_bias: bool) -> AttentionProjection {
    let wq = rand_tensor(rng, &[c, c], 1.0);
    let wk = rand_tensor(rng, &[c, c], 1.0);
    let wv = rand_tensor(rng, &[c, c], 1.0);
    let mut bias = || with_bias.then(|| rand_tensor(rng, &[c], 0.5));
    AttentionProjection {
        wq,
        wk,
        wv,
        bq: bias(),
        bk: bias(),
        bv: bias(),
    }
}

/// Largest absolute gap between the library and the explicit reference
/// over `instances` random draws with `N ≤ 64`, `C ≤ 16`.
pub fn attention_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let c = rng.gen_range(1..=16);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=64 / h);
        let f = rand_tensor(&mut rng, &[1, c, h, w], 2.0);
        let p = rand_projection(&mut rng, c, i % 2 == 0);
        let got = efficient_attention(&f, &p).unwrap();
        let want = attention_reference(&f, &p);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

// -------------------------------------------------------------------- losses

pub fn ws_reference(rule: WarmStartRule, f: &Image, a: &Image, b: &Image) -> f64 {
    let (h, w) = f.dims();
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let t = match rule {
                WarmStartRule::Average => 0.5 * (a.get(r, c) + b.get(r, c)),
                WarmStartRule::Max => a.get(r, c).max(b.get(r, c)),
            };
            s += (f.get(r, c) - t).abs();
        }
    }
    s / (h * w) as f64
}

pub fn corr_reference(a: &Image, b: &Image) -> f64 {
    let n = a.pixels().len() as f64;
    let ma = a.pixels().iter().sum::<f64>() / n;
    let mb = b.pixels().iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.pixels().len() {
        let (x, y) = (a.pixels()[i] - ma, b.pixels()[i] - mb);
        cov += x * y;
        va += x * x;
        vb += y * y;
    }
    (cov / n) / (((va / n) + CORR_EPS).sqrt() * ((vb / n) + CORR_EPS).sqrt())
}

pub fn reg_reference(f: &Image, ir: &Image, vis: &Image) -> f64 {
    1.0 / (corr_reference(ir, f) + corr_reference(vis, f)).max(REG_DENOM_FLOOR)
}

/// Mean of `-log softmax(z)_y` over unmasked pixels, via log-sum-exp.
pub fn sem_reference(logits: &Tensor, labels: &LabelMap, mask: &BTreeSet<u32>) -> f64 {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let at = |c: usize, r: usize, col: usize| logits.data()[(c * h + r) * w + col];
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..h {
        for col in 0..w {
            let y = labels.get(r, col);
            if mask.contains(&y) {
                continue;
            }
            let m = (0..k)
                .map(|c| at(c, r, col))
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (at(c, r, col) - m).exp()).sum::<f64>().ln();
            total += lse - at(y as usize, r, col);
            count += 1;
        }
    }
    total / count as f64
}

/// Largest gap between each library loss and its reference over
/// `instances` random 8×8 draws, by loss name.
pub fn loss_max_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let f = rand_image(&mut rng, 8, 8);
        let ir = rand_image(&mut rng, 8, 8);
        let vis = rand_image(&mut rng, 8, 8);
        let k = rng.gen_range(2..=6);
        let logits = rand_tensor(&mut rng, &[k, 8, 8], 4.0);
        let labels =
            LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..k as u32)).collect()).unwrap();
        let mut mask = BTreeSet::new();
        if rng.gen_bool(0.5) {
            mask.insert(rng.gen_range(0..k as u32));
        }
        if labels.labels().iter().all(|l| mask.contains(l)) {
            mask.clear();
        }
        let gaps = [
            losses::l_ws_average(&f, &ir, &vis).unwrap().value
                - ws_reference(WarmStartRule::Average, &f, &ir, &vis),
            losses::l_ws_max(&f, &ir, &vis).unwrap().value
                - ws_reference(WarmStartRule::Max, &f, &ir, &vis),
            losses::corr(&ir, &f).unwrap() - corr_reference(&ir, &f),
            losses::l_reg(&f, &ir, &vis).unwrap().value - reg_reference(&f, &ir, &vis),
            losses::l_sem(&logits, &labels, &mask).unwrap().value
                - sem_reference(&logits, &labels, &mask),
        ];
        for (w, g) in worst.iter_mut().zip(gaps) {
            *w = w.max(g.abs());
        }
    }
    ["l_ws_average", "l_ws_max", "corr", "l_reg", "l_sem"]
        .into_iter()
        .zip(worst)
        .collect()
}

/// The closed-form loss fixtures; returns the failures.
pub fn loss_fixture_failures() -> Vec<String> {
    let mut rng = rng(5);
    let mut bad = Vec::new();
    let ir = rand_image(&mut rng, 8, 8);
    let vis = rand_image(&mut rng, 8, 8);
    let avg = Image::from_fn(8, 8, |r, c| 0.5 * (ir.get(r, c) + vis.get(r, c)));
    let ws = losses::l_ws_average(&avg, &ir, &vis).unwrap().value;
    if ws != 0.0 {
        bad.push(format!("L_WS at the average image = {ws}"));
    }
    let x = rand_image(&mut rng, 8, 8);
    let r = losses::corr(&x, &x).unwrap();
    // The variance offset keeps corr(X, X) a hair under one.
    if (r - 1.0).abs() > 1e-6 {
        bad.push(format!("corr(X, X) = {r}"));
    }
    for k in [2usize, 4, 9] {
        let labels = LabelMap::new(8, 8, (0..64).map(|i| (i % k) as u32).collect()).unwrap();
        let ce = losses::l_sem(&Tensor::full(&[k, 8, 8], 0.3), &labels, &BTreeSet::new())
            .unwrap()
            .value;
        if (ce - (k as f64).ln()).abs() > 1e-12 {
            bad.push(format!("uniform-logit cross-entropy for K={k} = {ce}"));
        }
    }
    bad
}

// ----------------------------------------------------------------- gradients

pub fn small_config() -> TrainConfig {
    TrainConfig {
        scales: 2,
        base_channels: 4,
        seg_width: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

pub fn small_batch(seed: u64, class_count: u32) -> Batch {
    let mut rng = rng(seed);
    let ir = rand_image(&mut rng, 8, 8);
    let vis = rand_image(&mut rng, 8, 8);
    let labels = LabelMap::new(
        8,
        8,
        (0..64).map(|_| rng.gen_range(0..class_count)).collect(),
    )
    .unwrap();
    let pair = ImagePair::from_gray("g", ir, vis, Some(labels));
    Batch::from_pairs(&[&pair]).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedLoss {
    WsAverage,
    WsMax,
    Sem,
    Reg,
    St,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] =
        [Self::WsAverage, Self::WsMax, Self::Sem, Self::Reg, Self::St];

    fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Sem => c.lambda = 0.0,
            Self::Reg => c.sem_loss = false,
            _ => {}
        }
        c
    }
}

/// One finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs())
    }
}

/// Outcome of a gradient check: the compared samples and how many drawn
/// parameters were passed over because the loss bends sharply (a ReLU,
/// max-pool or L1 switch) inside the difference stencil.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
    pub kinked: usize,
}

impl GradCheck {
    /// Samples whose analytic gradient exceeds `floor` and whose relative
    /// error is at least `tol`.
    pub fn failures(&self, floor: f64, tol: f64) -> Vec<&GradSample> {
        self.samples
            .iter()
            .filter(|s| s.analytic.abs() > floor && s.rel_error() >= tol)
            .collect()
    }

    pub fn checked(&self, floor: f64) -> usize {
        self.samples
            .iter()
            .filter(|s| s.analytic.abs() > floor)
            .count()
    }
}

/// Central differences at `h` and `h/2` agree to this relative level on a
/// smooth stretch; a kink inside the stencil pulls them apart.
const SMOOTHNESS_TOL: f64 = 1e-5;

fn loss_value(
    loss: CheckedLoss,
    cfg: &TrainConfig,
    fusion: &FusionModel,
    seg: &SegModel,
    batch: &Batch,
) -> f64 {
    match loss {
        CheckedLoss::WsAverage => {
            warm_gradients(fusion, batch, WarmStartRule::Average)
                .unwrap()
                .0
                .value
        }
        CheckedLoss::WsMax => {
            warm_gradients(fusion, batch, WarmStartRule::Max)
                .unwrap()
                .0
                .value
        }
        _ => {
            semantic_gradients(fusion, seg, batch, cfg)
                .unwrap()
                .loss
                .value
        }
    }
}

/// Compares analytic gradients of `samples` random parameters (fusion, plus
/// segmentation for the semantic losses) with central differences of the
/// given `step`.
pub fn gradient_check(
    loss: CheckedLoss,
    attention: AttentionVariant,
    samples: usize,
    step: f64,
    seed: u64,
) -> GradCheck {
    let base = TrainConfig {
        attention,
        ..small_config()
    };
    let cfg = loss.config(&base);
    let mut fusion = FusionModel::new(&cfg).unwrap();
    let mut seg = SegModel::new(cfg.class_count, cfg.seg_width, cfg.seed).unwrap();
    let batch = small_batch(seed, cfg.class_count as u32);

    let (fusion_grads, seg_grads) = match loss {
        CheckedLoss::WsAverage => (
            warm_gradients(&fusion, &batch, WarmStartRule::Average)
                .unwrap()
                .1,
            Vec::new(),
        ),
        CheckedLoss::WsMax => (
            warm_gradients(&fusion, &batch, WarmStartRule::Max)
                .unwrap()
                .1,
            Vec::new(),
        ),
        _ => {
            let sg = semantic_gradients(&fusion, &seg, &batch, &cfg).unwrap();
            (sg.fusion, sg.seg)
        }
    };

    let fusion_names: Vec<String> = fusion.params().names().to_vec();
    let seg_names: Vec<String> = seg.params().names().to_vec();
    let mut candidates: Vec<(bool, usize, usize)> = Vec::new();
    for (t, g) in fusion_grads.iter().enumerate() {
        candidates.extend((0..g.len()).map(|i| (false, t, i)));
    }
    for (t, g) in seg_grads.iter().enumerate() {
        candidates.extend((0..g.len()).map(|i| (true, t, i)));
    }

    let mut rng = rng(seed ^ 0xF00D);
    let mut out = GradCheck {
        samples: Vec::with_capacity(samples),
        kinked: 0,
    };
    while out.samples.len() < samples && out.kinked < 20 * samples {
        let (is_seg, t, i) = candidates[rng.gen_range(0..candidates.len())];
        let analytic = if is_seg {
            seg_grads[t].data()[i]
        } else {
            fusion_grads[t].data()[i]
        };
        let eval_at = |delta: f64, fusion: &mut FusionModel, seg: &mut SegModel| {
            let slot = if is_seg {
                &mut seg.params_mut().tensors_mut()[t].data_mut()[i]
            } else {
                &mut fusion.params_mut().tensors_mut()[t].data_mut()[i]
            };
            let orig = *slot;
            *slot = orig + delta;
            let v = loss_value(loss, &cfg, fusion, seg, &batch);
            let slot = if is_seg {
                &mut seg.params_mut().tensors_mut()[t].data_mut()[i]
            } else {
                &mut fusion.params_mut().tensors_mut()[t].data_mut()[i]
            };
            *slot = orig;
            v
        };
        let mut central = |h: f64| {
            (eval_at(h, &mut fusion, &mut seg) - eval_at(-h, &mut fusion, &mut seg)) / (2.0 * h)
        };
        let numeric = central(step);
        let half = central(step / 2.0);
        let scale = numeric.abs().max(half.abs());
        if scale > 0.0 && (numeric - half).abs() > SMOOTHNESS_TOL * scale {
            out.kinked += 1;
            continue;
        }
        out.samples.push(GradSample {
            param: if is_seg {
                seg_names[t].clone()
            } else {
                fusion_names[t].clone()
            },
            index: i,
            analytic,
            numeric,
        });
    }
    out
}

// ------------------------------------------------------------------- metrics

/// `(what, got, want)` for SF and AG on constant, ramp and checkerboard
/// images, with the expected values worked out by hand.
pub fn metric_fixtures() -> Vec<(String, f64, f64)> {
    let mut rows = Vec::new();
    let constant = Image::filled(8, 8, 0.37);
    rows.push(("SF constant".into(), spatial_frequency(&constant), 0.0));
    rows.push(("AG constant".into(), average_gradient(&constant), 0.0));

    // Horizontal ramp of slope 0.1: every horizontal step is 0.1, every
    // vertical step is 0, so RF = 0.1, CF = 0, and each AG term is
    // √(0.01/2).
    let ramp = Image::from_fn(6, 8, |_, c| 0.1 * c as f64);
    rows.push(("SF ramp".into(), spatial_frequency(&ramp), 0.1));
    rows.push((
        "AG ramp".into(),
        average_gradient(&ramp),
        (0.01f64 / 2.0).sqrt(),
    ));

    // Unit checkerboard: every neighbour differs by 1, so RF² = CF² = 1 and
    // each AG term is √((1+1)/2) = 1.
    let checker = Image::from_fn(8, 8, |r, c| ((r + c) % 2) as f64);
    rows.push((
        "SF checkerboard".into(),
        spatial_frequency(&checker),
        2f64.sqrt(),
    ));
    rows.push(("AG checkerboard".into(), average_gradient(&checker), 1.0));
    rows
}

/// The 2×2 fixture: truth `[0, 0, 1, 1]`, prediction `[0, 1, 1, 1]`.
/// Class 0: TP 1, FN 1, FP 0. Class 1: TP 2, FN 0, FP 1.
pub fn confusion_fixture() -> Vec<(String, f64, f64)> {
    let truth = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &truth, None).unwrap();
    let s = class_scores(&cm, &[0, 1]).unwrap();
    vec![
        ("Acc0".into(), s.per_class[0].acc.unwrap(), 0.5),
        ("IoU0".into(), s.per_class[0].iou.unwrap(), 0.5),
        ("Acc1".into(), s.per_class[1].acc.unwrap(), 1.0),
        ("IoU1".into(), s.per_class[1].iou.unwrap(), 2.0 / 3.0),
    ]
}
