//! Two-phase training: warm-start towards a fixed fusion target, then joint
//! fine-tuning of the fusion and segmentation networks under cross-entropy
//! plus the correlation regularizer. Also the ablation runner and the
//! evaluation driver.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::checkpoint::Checkpoint;
use crate::data::{epoch_batches, tile_pairs};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::graph::Graph;
use crate::losses::{combine_st, corr_sums, l_sem_with_grad, reg_batch, ws_batch, LossValue};
use crate::metrics::{class_scores, image_metrics, ConfusionMatrix, EvalReport};
use crate::params::ParamStore;
use crate::seg::{predict_batch, SegModel};
use crate::tensor::Tensor;
use crate::types::{
    validate_pair, AttentionVariant, Image, ImagePair, LabelMap, LabelPalette, TrainConfig,
    WarmStartRule,
};

/// Shuffle-seed offset of the semantic phase.
const SEMANTIC_SHUFFLE_SALT: u64 = 0x5E_3A17;
/// Images per forward pass when evaluating.
const EVAL_CHUNK: usize = 8;

/// Adam with bias-corrected moments. Parameters are rounded to `f32` after
/// every step so checkpoints reproduce them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gv;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
                *pv = (*pv - update) as f32 as f64;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    WarmStart,
    Semantic,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WarmStart => "warm",
            Self::Semantic => "semantic",
        })
    }
}

/// One optimizer step of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub ids: Vec<String>,
    pub loss: f64,
    pub components: Vec<(String, f64)>,
    /// Batch mean of `Corr(ir, f) + Corr(vis, f)`.
    pub corr_sum: f64,
}

impl StepRecord {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} phase={} epoch={} loss={:.8}",
            self.step, self.phase, self.epoch, self.loss
        );
        for (k, v) in &self.components {
            if k != "corr_sum" {
                write!(s, " {k}={v:.8}").unwrap();
            }
        }
        write!(s, " corr_sum={:.8}", self.corr_sum).unwrap();
        s
    }
}

/// Validation statistics after an epoch; epoch 0 is the starting point.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub sem: f64,
    pub miou: f64,
    pub corr_sum: f64,
    /// Mean `|I_f − (I_ir + I_vis)/2|`.
    pub avg_deviation: f64,
}

impl ValidationRecord {
    pub fn to_line(&self) -> String {
        format!(
            "validation epoch={} sem={:.8} miou={:.6} corr_sum={:.8} avg_deviation={:.8}",
            self.epoch, self.sem, self.miou, self.corr_sum, self.avg_deviation
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogEvent<'a> {
    Step(&'a StepRecord),
    EpochEnd {
        phase: Phase,
        epoch: usize,
        mean_loss: f64,
    },
    Validation(&'a ValidationRecord),
}

impl LogEvent<'_> {
    pub fn to_line(&self) -> String {
        match self {
            Self::Step(r) => r.to_line(),
            Self::EpochEnd {
                phase,
                epoch,
                mean_loss,
            } => format!("epoch phase={phase} epoch={epoch} mean_loss={mean_loss:.8}"),
            Self::Validation(v) => v.to_line(),
        }
    }
}

/// Sink for training progress; `|_| {}` discards it.
pub type Logger<'a> = dyn FnMut(&LogEvent) + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub fusion_opt: Adam,
    pub seg_opt: Option<Adam>,
    pub history: Vec<StepRecord>,
    pub epoch_means: Vec<f64>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainState {
    /// The last epoch's mean loss is below the first one's.
    pub fn trend_ok(&self) -> bool {
        match (self.epoch_means.first(), self.epoch_means.last()) {
            (Some(first), Some(last)) if self.epoch_means.len() >= 2 => last < first,
            _ => true,
        }
    }

    /// Loss values of every step, in order.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Stacked tensors of a batch of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub ir: Tensor,
    pub vis: Tensor,
    pub labels: Option<Vec<LabelMap>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&ImagePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let ir: Vec<Tensor> = pairs.iter().map(|p| p.ir.to_tensor()).collect();
        let vis: Vec<Tensor> = pairs.iter().map(|p| p.vis_luma.to_tensor()).collect();
        let labels = pairs
            .iter()
            .map(|p| p.label.clone())
            .collect::<Option<Vec<_>>>();
        Ok(Self {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            ir: Tensor::stack(&ir)?,
            vis: Tensor::stack(&vis)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn label_refs(&self) -> Result<Vec<&LabelMap>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().collect())
            .ok_or_else(|| Error::Config(format!("batch {:?} has no labels", self.ids)))
    }
}

fn collect_grads(
    grads: &mut crate::graph::Gradients,
    vars: &[crate::graph::Var],
    params: &ParamStore,
) -> Vec<Tensor> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Warm-start loss of a batch and its gradient w.r.t. every fusion
/// parameter.
pub fn warm_gradients(
    model: &FusionModel,
    batch: &Batch,
    rule: WarmStartRule,
) -> Result<(LossValue, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let ir = g.constant(batch.ir.clone());
    let vis = g.constant(batch.vis.clone());
    let f = model.forward_on_tape(&mut g, &p, ir, vis);
    let (lv, df) = ws_batch(rule, g.value(f), &batch.ir, &batch.vis)?;
    let root = g.external(f, lv.value, df);
    let mut grads = g.backward(root);
    Ok((lv, collect_grads(&mut grads, p.vars(), model.params())))
}

/// Semantic-phase loss of a batch with gradients for both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGradients {
    /// `sem·[sem_loss] + λ·reg`, with `sem`, `reg` and correlation
    /// components.
    pub loss: LossValue,
    pub fusion: Vec<Tensor>,
    pub seg: Vec<Tensor>,
    pub fused: Tensor,
    /// False when every pixel of the batch is masked; `sem` is then 0.
    pub sem_active: bool,
}

pub fn semantic_gradients(
    fusion: &FusionModel,
    seg: &SegModel,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<SemanticGradients> {
    let labels = batch.label_refs()?;
    let mut g = Graph::new();
    let pf = fusion.params().bind(&mut g, true);
    let ps = seg.params().bind(&mut g, true);
    let ir = g.constant(batch.ir.clone());
    let vis = g.constant(batch.vis.clone());
    let f = fusion.forward_on_tape(&mut g, &pf, ir, vis);
    let logits = seg.forward_on_tape(&mut g, &ps, f);

    let (sem, dlogits, sem_active) =
        match l_sem_with_grad(g.value(logits), &labels, &config.class_mask) {
            Ok((lv, d)) => (lv, d, true),
            Err(Error::Mask) => (
                LossValue::single("sem", 0.0),
                Tensor::zeros(g.value(logits).shape()),
                false,
            ),
            Err(e) => return Err(e),
        };
    let (reg, dfused) = reg_batch(g.value(f), &batch.ir, &batch.vis)?;
    let sem_weight = if config.sem_loss { 1.0 } else { 0.0 };

    let mut loss = combine_st(&sem, &reg, config.lambda);
    loss.value = sem_weight * sem.value + config.lambda * reg.value;
    let root_sem = g.external(
        logits,
        sem_weight * sem.value,
        dlogits.map(|x| x * sem_weight),
    );
    let root_reg = g.external(
        f,
        config.lambda * reg.value,
        dfused.map(|x| x * config.lambda),
    );
    let root = g.add(root_sem, root_reg);
    let fused = g.value(f).clone();
    let mut grads = g.backward(root);
    Ok(SemanticGradients {
        loss,
        fusion: collect_grads(&mut grads, pf.vars(), fusion.params()),
        seg: collect_grads(&mut grads, ps.vars(), seg.params()),
        fused,
        sem_active,
    })
}

fn global_norm(groups: &[&[Tensor]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt()
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

fn prepare(pairs: &[ImagePair], config: &TrainConfig, what: &str, need_labels: bool) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("{what} set has no pairs")));
    }
    for p in pairs {
        if need_labels && p.label.is_none() {
            return Err(Error::Config(format!("{what} pair {} has no labels", p.id)));
        }
        validate_pair(p.clone(), config)?;
    }
    Ok(())
}

fn check_architecture(model: &TrainConfig, config: &TrainConfig) -> Result<()> {
    if (model.scales, model.base_channels, model.attention)
        != (config.scales, config.base_channels, config.attention)
    {
        return Err(Error::Config(format!(
            "model built for scales={} base={} attention={}, configuration asks for scales={} base={} attention={}",
            model.scales, model.base_channels, model.attention, config.scales, config.base_channels, config.attention
        )));
    }
    Ok(())
}

fn corr_mean(fused: &Tensor, batch: &Batch) -> Result<f64> {
    let sums = corr_sums(fused, &batch.ir, &batch.vis)?;
    Ok(sums.iter().sum::<f64>() / sums.len() as f64)
}

fn with_config(model: FusionModel, config: &TrainConfig) -> Result<FusionModel> {
    FusionModel::from_parts(config.clone(), model.into_params())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmStartOutcome {
    /// `θ′`, tagged `phase = warm`.
    pub checkpoint: Checkpoint,
    pub state: TrainState,
}

/// Trains `model` towards the configured warm-start target for
/// `warm_start_epochs` epochs.
pub fn warm_start(
    model: FusionModel,
    train: &[ImagePair],
    config: &TrainConfig,
    log: &mut Logger,
) -> Result<WarmStartOutcome> {
    config.validate()?;
    check_architecture(model.config(), config)?;
    prepare(train, config, "training", false)?;
    let mut model = with_config(model, config)?;
    let train = &tile_pairs(train, config.crop)?;
    let mut state = TrainState {
        phase: Phase::WarmStart,
        epoch: 0,
        step: 0,
        seed: config.seed,
        fusion_opt: Adam::new(model.params(), config.lr_warm),
        seg_opt: None,
        history: Vec::new(),
        epoch_means: Vec::new(),
        validation: Vec::new(),
    };
    for epoch in 1..=config.warm_start_epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), config.batch_size, config.seed, epoch, true);
        for (bi, idx) in batches.iter().enumerate() {
            let refs: Vec<&ImagePair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_pairs(&refs)?;
            let non_finite = || Error::NonFiniteLoss {
                phase: Phase::WarmStart.to_string(),
                epoch,
                batch: bi,
                ids: batch.ids.join(","),
            };
            let (lv, grads) = match warm_gradients(&model, &batch, config.warm_start_rule) {
                Err(Error::NonFinite(_)) => return Err(non_finite()),
                r => r?,
            };
            if !lv.value.is_finite() || !all_finite(&grads) {
                return Err(non_finite());
            }
            let fused = model
                .forward_batch(&batch.ir, &batch.vis)
                .map_err(|_| non_finite())?;
            let corr_sum = corr_mean(&fused, &batch)?;
            state.fusion_opt.step(model.params_mut(), &grads)?;
            state.step += 1;
            total += lv.value * batch.len() as f64;
            let record = StepRecord {
                phase: Phase::WarmStart,
                epoch,
                step: state.step,
                ids: batch.ids.clone(),
                loss: lv.value,
                components: lv.components,
                corr_sum,
            };
            log(&LogEvent::Step(&record));
            state.history.push(record);
        }
        let mean_loss = total / train.len() as f64;
        state.epoch = epoch;
        state.epoch_means.push(mean_loss);
        log(&LogEvent::EpochEnd {
            phase: Phase::WarmStart,
            epoch,
            mean_loss,
        });
    }
    let mut checkpoint = Checkpoint::new(model, None);
    checkpoint
        .info
        .insert("phase".into(), Phase::WarmStart.to_string());
    checkpoint
        .info
        .insert("epoch".into(), state.epoch.to_string());
    Ok(WarmStartOutcome { checkpoint, state })
}

/// Validation statistics of a fusion/segmentation pair on labelled pairs.
pub fn validate_models(
    fusion: &FusionModel,
    seg: &SegModel,
    pairs: &[ImagePair],
    config: &TrainConfig,
    epoch: usize,
) -> Result<ValidationRecord> {
    let k = seg.class_count();
    let mut cm = ConfusionMatrix::new(k);
    let (mut sem, mut sem_images) = (0.0, 0usize);
    let (mut corr, mut dev) = (0.0, 0.0);
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let refs: Vec<&ImagePair> = chunk.iter().collect();
        let batch = Batch::from_pairs(&refs)?;
        let labels = batch.label_refs()?;
        let fused = fusion.forward_batch(&batch.ir, &batch.vis)?;
        let logits = seg.forward_batch(&fused)?;
        let (_, _, h, w) = logits.dims4();
        let per = k * h * w;
        for (i, lab) in labels.iter().enumerate() {
            let item = Tensor::new(
                vec![1, k, h, w],
                logits.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            match l_sem_with_grad(&item, &[lab], &config.class_mask) {
                Ok((lv, _)) => {
                    sem += lv.value;
                    sem_images += 1;
                }
                Err(Error::Mask) => {}
                Err(e) => return Err(e),
            }
        }
        for (pred, lab) in predict_batch(&logits)?.iter().zip(&labels) {
            cm.accumulate(pred, lab, None)?;
        }
        corr += corr_sums(&fused, &batch.ir, &batch.vis)?
            .iter()
            .sum::<f64>();
        for ((f, a), b) in fused
            .data()
            .iter()
            .zip(batch.ir.data())
            .zip(batch.vis.data())
        {
            dev += (f - 0.5 * (a + b)).abs() / (fused.len() / batch.len()) as f64;
        }
    }
    let scored: Vec<u32> = (1..k as u32).collect();
    let n = pairs.len() as f64;
    Ok(ValidationRecord {
        epoch,
        sem: if sem_images > 0 {
            sem / sem_images as f64
        } else {
            0.0
        },
        miou: class_scores(&cm, &scored)?.miou,
        corr_sum: corr / n,
        avg_deviation: dev / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOutcome {
    pub last: Checkpoint,
    /// Highest validation mIoU (earliest on ties); equals `last` without a
    /// validation set.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub state: TrainState,
}

/// Joint fine-tuning of both networks. `init` must be the warm-start
/// snapshot unless `config.skip_warm_start` is set; a joint checkpoint
/// resumes both networks.
pub fn semantic_train(
    init: Option<&Checkpoint>,
    train: &[ImagePair],
    val: &[ImagePair],
    config: &TrainConfig,
    log: &mut Logger,
) -> Result<SemanticOutcome> {
    config.validate()?;
    let (fusion, seg) = match (init, config.skip_warm_start) {
        (None, false) => {
            return Err(Error::PhaseOrder(
                "semantic training needs the warm-start snapshot; set train.skip_warm_start = true to train from scratch"
                    .into(),
            ))
        }
        (Some(_), true) => {
            return Err(Error::Config(
                "skip_warm_start is set but an initial checkpoint was given".into(),
            ))
        }
        (None, true) => (FusionModel::new(config)?, None),
        (Some(ck), false) => {
            check_architecture(ck.config(), config)?;
            (ck.fusion.clone(), ck.seg.clone())
        }
    };
    let mut fusion = with_config(fusion, config)?;
    let mut seg = match seg {
        Some(s) if (s.class_count(), s.width()) == (config.class_count, config.seg_width) => s,
        Some(s) => {
            return Err(Error::Config(format!(
                "checkpoint segmentation net has {} classes and width {}, configuration asks for {} and {}",
                s.class_count(),
                s.width(),
                config.class_count,
                config.seg_width
            )))
        }
        None => SegModel::new(config.class_count, config.seg_width, config.seed)?,
    };
    prepare(train, config, "training", true)?;
    if !val.is_empty() {
        prepare(val, config, "validation", true)?;
    }
    let train = &tile_pairs(train, config.semantic_crop)?;
    let any_unmasked = train
        .iter()
        .filter_map(|p| p.label.as_ref())
        .any(|l| l.labels().iter().any(|c| !config.class_mask.contains(c)));
    if !any_unmasked {
        return Err(Error::Mask);
    }

    let mut fusion_opt = Adam::new(fusion.params(), config.lr_semantic);
    let mut seg_opt = Adam::new(seg.params(), config.lr_seg);
    let mut history = Vec::new();
    let mut epoch_means = Vec::new();
    let mut validation = Vec::new();
    let mut step = 0;
    let snapshot = |fusion: &FusionModel, seg: &SegModel, epoch: usize| {
        let mut ck = Checkpoint::new(fusion.clone(), Some(seg.clone()));
        ck.info.insert("phase".into(), Phase::Semantic.to_string());
        ck.info.insert("epoch".into(), epoch.to_string());
        ck
    };
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    if !val.is_empty() {
        let v = validate_models(&fusion, &seg, val, config, 0)?;
        log(&LogEvent::Validation(&v));
        validation.push(v);
    }

    let shuffle_seed = config.seed ^ SEMANTIC_SHUFFLE_SALT;
    for epoch in 1..=config.semantic_epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), config.batch_size, shuffle_seed, epoch, true);
        for (bi, idx) in batches.iter().enumerate() {
            let refs: Vec<&ImagePair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_pairs(&refs)?;
            let non_finite = || Error::NonFiniteLoss {
                phase: Phase::Semantic.to_string(),
                epoch,
                batch: bi,
                ids: batch.ids.join(","),
            };
            let mut sg = match semantic_gradients(&fusion, &seg, &batch, config) {
                Err(Error::NonFinite(_)) => return Err(non_finite()),
                r => r?,
            };
            if !sg.loss.value.is_finite() || !all_finite(&sg.fusion) || !all_finite(&sg.seg) {
                return Err(non_finite());
            }
            let norm = global_norm(&[&sg.fusion, &sg.seg]);
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                for t in sg.fusion.iter_mut().chain(sg.seg.iter_mut()) {
                    *t = t.map(|x| x * s);
                }
            }
            fusion_opt.step(fusion.params_mut(), &sg.fusion)?;
            seg_opt.step(seg.params_mut(), &sg.seg)?;
            step += 1;
            total += sg.loss.value * batch.len() as f64;
            let corr_sum = sg.loss.component("corr_sum").unwrap_or(f64::NAN);
            let record = StepRecord {
                phase: Phase::Semantic,
                epoch,
                step,
                ids: batch.ids.clone(),
                loss: sg.loss.value,
                components: sg.loss.components,
                corr_sum,
            };
            log(&LogEvent::Step(&record));
            history.push(record);
        }
        let mean_loss = total / train.len() as f64;
        epoch_means.push(mean_loss);
        log(&LogEvent::EpochEnd {
            phase: Phase::Semantic,
            epoch,
            mean_loss,
        });
        if !val.is_empty() {
            let v = validate_models(&fusion, &seg, val, config, epoch)?;
            log(&LogEvent::Validation(&v));
            if best.as_ref().map_or(true, |(m, _, _)| v.miou > *m) {
                best = Some((v.miou, epoch, snapshot(&fusion, &seg, epoch)));
            }
            validation.push(v);
        }
    }

    let last = snapshot(&fusion, &seg, config.semantic_epochs);
    let (best_epoch, best) = match best {
        Some((_, e, ck)) => (e, ck),
        None => (config.semantic_epochs, last.clone()),
    };
    let state = TrainState {
        phase: Phase::Semantic,
        epoch: config.semantic_epochs,
        step,
        seed: config.seed,
        fusion_opt,
        seg_opt: Some(seg_opt),
        history,
        epoch_means,
        validation,
    };
    Ok(SemanticOutcome {
        last,
        best,
        best_epoch,
        state,
    })
}

/// Fusion metrics for every pair and, given a segmentation net and labels,
/// per-class scores over the palette's scored classes.
pub fn evaluate(
    fusion: &FusionModel,
    seg: Option<&SegModel>,
    pairs: &[ImagePair],
    palette: &LabelPalette,
) -> Result<EvalReport> {
    let mut fused = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let refs: Vec<&ImagePair> = chunk.iter().collect();
        let batch = Batch::from_pairs(&refs)?;
        let out = fusion.forward_batch(&batch.ir, &batch.vis)?;
        for i in 0..chunk.len() {
            fused.push(Image::from_tensor(&out, i)?);
        }
    }
    evaluate_fused(&fused, seg, pairs, palette)
}

/// Like [`evaluate`] for already fused images, paired by position.
pub fn evaluate_fused(
    fused: &[Image],
    seg: Option<&SegModel>,
    pairs: &[ImagePair],
    palette: &LabelPalette,
) -> Result<EvalReport> {
    if fused.len() != pairs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fused images for {} pairs",
            fused.len(),
            pairs.len()
        )));
    }
    let images = fused
        .iter()
        .zip(pairs)
        .map(|(f, p)| image_metrics(&p.id, f, &p.ir, &p.vis_luma))
        .collect::<Result<Vec<_>>>()?;
    let segmentation = match seg {
        Some(seg) if pairs.iter().all(|p| p.label.is_some()) => {
            if seg.class_count() != palette.class_count() {
                return Err(Error::Config(format!(
                    "segmentation net has {} classes, palette {}",
                    seg.class_count(),
                    palette.class_count()
                )));
            }
            let mut cm = ConfusionMatrix::new(seg.class_count());
            for (f, p) in fused.iter().zip(pairs) {
                let logits = seg.seg_forward(f)?;
                let pred = crate::seg::predict(&logits)?;
                cm.accumulate(
                    &pred,
                    p.label.as_ref().expect("checked above"),
                    palette.ignore_index(),
                )?;
            }
            Some(class_scores(&cm, &palette.scored_classes())?)
        }
        _ => None,
    };
    EvalReport::new(images, palette.class_names().to_vec(), segmentation)
}

/// A named configuration of the ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub rows: Vec<AblationRow>,
}

pub const ROW_OURS: &str = "Ours (Ave-ST)";

impl AblationPlan {
    /// Structure and strategy rows, then the class-removal rows the palette
    /// supports, then the zeroed semantic loss row.
    pub fn default_plan(base: &TrainConfig, palette: &LabelPalette) -> Self {
        let ours = TrainConfig {
            attention: AttentionVariant::Sla,
            warm_start_rule: WarmStartRule::Average,
            skip_warm_start: false,
            sem_loss: true,
            lambda: if base.lambda == 0.0 { 1.0 } else { base.lambda },
            class_mask: Default::default(),
            ..base.clone()
        };
        let row = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
            let mut config = ours.clone();
            f(&mut config);
            AblationRow {
                name: name.into(),
                config,
            }
        };
        let mut rows = vec![
            row("w/o SLA", &|c| c.attention = AttentionVariant::None),
            row("CHA", &|c| c.attention = AttentionVariant::Cha),
            row("SPA", &|c| c.attention = AttentionVariant::Spa),
            row("Max-ST", &|c| c.warm_start_rule = WarmStartRule::Max),
            row("w/o WS", &|c| c.skip_warm_start = true),
            row("w/o L_reg", &|c| c.lambda = 0.0),
            row(ROW_OURS, &|_| {}),
        ];
        let car = palette.index_of("car");
        let person = palette.index_of("person");
        for (name, classes) in [
            ("w/o Car", vec![car]),
            ("w/o Person", vec![person]),
            ("w/o Car&Person", vec![car, person]),
        ] {
            if let Some(classes) = classes.into_iter().collect::<Option<Vec<u32>>>() {
                rows.push(row(name, &|c| {
                    c.class_mask = classes.iter().copied().collect()
                }));
            }
        }
        rows.push(row("w/o L_sem", &|c| c.sem_loss = false));
        Self { rows }
    }

    /// One row per line, `name | key=value key=value ...`, applied on top
    /// of `base`; `#` starts a comment.
    pub fn parse(text: &str, base: &TrainConfig) -> Result<Self> {
        let mut rows = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, overrides) = line.split_once('|').unwrap_or((line, ""));
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Config(format!(
                    "plan line {}: empty row name",
                    no + 1
                )));
            }
            let mut config = base.clone();
            for kv in overrides.split_whitespace() {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "plan line {}: expected key=value, got {kv:?}",
                        no + 1
                    ))
                })?;
                config
                    .set(k, v)
                    .map_err(|e| Error::Config(format!("plan line {}: {e}", no + 1)))?;
            }
            config
                .validate()
                .map_err(|e| Error::Config(format!("plan line {}: {e}", no + 1)))?;
            rows.push(AblationRow {
                name: name.into(),
                config,
            });
        }
        if rows.is_empty() {
            return Err(Error::Config("ablation plan has no rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn names(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.name.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub name: String,
    pub outcome: std::result::Result<EvalReport, String>,
    /// Semantic-phase loss trace, empty on failure.
    pub loss_trace: Vec<f64>,
}

fn warm_key(c: &TrainConfig) -> String {
    format!(
        "{} {} {} {} {} {} {} {} {}",
        c.scales,
        c.base_channels,
        c.attention,
        c.warm_start_rule,
        c.warm_start_epochs,
        c.lr_warm,
        c.batch_size,
        c.seed,
        c.skip_warm_start
    )
}

/// Runs both phases for every row from the shared seed and evaluates the
/// best checkpoint on `val`. Rows sharing a warm-start configuration reuse
/// one `θ′`; the segmentation net is freshly initialized per row.
pub fn run_ablation(
    plan: &AblationPlan,
    train: &[ImagePair],
    val: &[ImagePair],
    palette: &LabelPalette,
    log: &mut Logger,
) -> Vec<AblationResult> {
    let mut warm_cache: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let mut results = Vec::with_capacity(plan.rows.len());
    for row in &plan.rows {
        let mut run = || -> Result<(EvalReport, Vec<f64>)> {
            let cfg = &row.config;
            let init = if cfg.skip_warm_start {
                None
            } else {
                let key = warm_key(cfg);
                if !warm_cache.contains_key(&key) {
                    let out = warm_start(FusionModel::new(cfg)?, train, cfg, log)?;
                    warm_cache.insert(key.clone(), out.checkpoint);
                }
                Some(warm_cache[&key].clone())
            };
            let out = semantic_train(init.as_ref(), train, val, cfg, log)?;
            let eval_set = if val.is_empty() { train } else { val };
            let report = evaluate(&out.best.fusion, out.best.seg.as_ref(), eval_set, palette)?;
            Ok((report, out.state.loss_trace()))
        };
        let (outcome, loss_trace) = match run() {
            Ok((r, t)) => (Ok(r), t),
            Err(e) => (Err(e.to_string()), Vec::new()),
        };
        results.push(AblationResult {
            name: row.name.clone(),
            outcome,
            loss_trace,
        });
    }
    results
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `row,<scored class IoUs>,mIoU,mAcc` in percent with two decimals; a
/// failed row carries its error in the `error` column.
pub fn ablation_table_csv(results: &[AblationResult], palette: &LabelPalette) -> String {
    let scored = palette.scored_classes();
    let mut s = String::from("row");
    for &c in &scored {
        write!(s, ",{}", csv_field(&palette.class_names()[c as usize])).unwrap();
    }
    s.push_str(",mIoU,mAcc,error\n");
    for r in results {
        s.push_str(&csv_field(&r.name));
        match &r.outcome {
            Ok(report) => {
                let seg = report.segmentation.as_ref();
                for &c in &scored {
                    let iou = seg
                        .and_then(|sg| sg.per_class.iter().find(|cs| cs.class == c))
                        .and_then(|cs| cs.iou);
                    match iou {
                        Some(v) => write!(s, ",{:.2}", 100.0 * v).unwrap(),
                        None => s.push_str(",-"),
                    }
                }
                match seg {
                    Some(sg) => {
                        write!(s, ",{:.2},{:.2},", 100.0 * sg.miou, 100.0 * sg.macc).unwrap()
                    }
                    None => s.push_str(",-,-,"),
                }
            }
            Err(e) => {
                s.push_str(&",-".repeat(scored.len() + 2));
                write!(s, ",{}", csv_field(e)).unwrap();
            }
        }
        s.push('\n');
    }
    s
}
