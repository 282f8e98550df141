//! The fusion network: per-modality multi-scale encoders, attention-based
//! fusion blocks at every scale, and a coarse-to-fine decoder.
//!
//! Scale `s` runs at `H/2^s × W/2^s` with `base_channels·2^s` channels.
//! Each encoder scale is a conv block (two 3×3 convolutions, each followed by
//! a leaky rectifier with slope 0.2); the next scale starts from a 2×2
//! max-pool of the previous block's output.
//!
//! A fusion block strengthens each modality's features independently,
//! `F + F ⊙ A(F)`, then averages the two modalities. `A` is chosen by
//! [`AttentionVariant`]:
//!
//! * `Sla`: efficient self-attention, `A = Q · (softmax_N(K)ᵀ V)` with the
//!   softmax over tokens of each key channel. Costs `O(N·C²)`; no `N × N`
//!   affinity is ever formed.
//! * `Cha`: squeeze-and-excitation channel gate broadcast over the plane.
//! * `Spa`: 7×7 convolution over channel mean/max, sigmoid, broadcast over
//!   channels.
//! * `None`: no strengthening, the block is a plain average.
//!
//! The decoder upsamples the deepest fused map bilinearly, concatenates the
//! next finer fused map, applies a conv block, and repeats to full
//! resolution; a 1×1 convolution and a sigmoid give the fused image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_bound, lecun_bound, Bound, ParamStore};
use crate::tensor::{FeatureMap, Tensor};
use crate::types::{check_spatial, AttentionVariant, Image, ImagePair, TrainConfig};

pub const LEAKY_SLOPE: f64 = 0.2;
const SE_REDUCTION: usize = 4;
const SPA_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ir,
    Vis,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Ir => "ir",
            Self::Vis => "vis",
        }
    }
}

/// Query/key/value projections of one attention module. Tokens are row
/// vectors, so `Q = X · wq` for the `N × C` token matrix `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjection {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bq: Option<Tensor>,
    pub bk: Option<Tensor>,
    pub bv: Option<Tensor>,
}

impl AttentionProjection {
    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let c = self.channels();
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.shape() != [c, c] {
                return Err(Error::ShapeMismatch(format!(
                    "attention projections must be {c}x{c}, got {:?}",
                    w.shape()
                )));
            }
        }
        for b in [&self.bq, &self.bk, &self.bv].into_iter().flatten() {
            if b.shape() != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "attention bias must be [{c}]"
                )));
            }
        }
        Ok(())
    }
}

/// Efficient attention on tape handles.
pub fn attention_on_tape(
    g: &mut Graph,
    x: Var,
    (wq, wk, wv): (Var, Var, Var),
    (bq, bk, bv): (Option<Var>, Option<Var>, Option<Var>),
) -> Var {
    let q = g.linear_tokens(x, wq, bq);
    let k = g.linear_tokens(x, wk, bk);
    let v = g.linear_tokens(x, wv, bv);
    let k = g.softmax_spatial(k);
    let ctx = g.attn_context(k, v);
    g.attn_apply(ctx, q)
}

/// `F + F ⊙ A` on tape handles.
pub fn strengthen_on_tape(g: &mut Graph, f: Var, a: Var) -> Var {
    let fa = g.mul(f, a);
    g.add(f, fa)
}

/// Flattens `f (B, C, h, w)` into `N = h·w` tokens, applies the projections
/// and returns `Q · softmax_N(K)ᵀ V` reshaped back to `(B, C, h, w)`.
pub fn efficient_attention(f: &FeatureMap, proj: &AttentionProjection) -> Result<FeatureMap> {
    proj.check()?;
    if f.shape().len() != 4 || f.shape()[1] != proj.channels() {
        return Err(Error::ShapeMismatch(format!(
            "feature map {:?} vs {}-channel projection",
            f.shape(),
            proj.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let ws = (
        g.constant(proj.wq.clone()),
        g.constant(proj.wk.clone()),
        g.constant(proj.wv.clone()),
    );
    let bs = (
        proj.bq.clone().map(|b| g.constant(b)),
        proj.bk.clone().map(|b| g.constant(b)),
        proj.bv.clone().map(|b| g.constant(b)),
    );
    let a = attention_on_tape(&mut g, x, ws, bs);
    Ok(g.value(a).clone())
}

/// `F + F ⊙ A` element-wise.
pub fn strengthen(f: &FeatureMap, a: &FeatureMap) -> Result<FeatureMap> {
    if f.shape() != a.shape() {
        return Err(Error::ShapeMismatch(format!(
            "strengthen: {:?} vs {:?}",
            f.shape(),
            a.shape()
        )));
    }
    let data = f
        .data()
        .iter()
        .zip(a.data())
        .map(|(x, y)| x + x * y)
        .collect();
    Tensor::new(f.shape().to_vec(), data)
}

/// Strengthening rule of a fusion block, selected by attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    variant: AttentionVariant,
}

pub fn make_variant(variant: AttentionVariant) -> AttentionBlock {
    AttentionBlock { variant }
}

impl AttentionBlock {
    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }

    /// Declares this block's parameters under `prefix` for `c` channels.
    pub(crate) fn declare(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
    ) {
        match self.variant {
            AttentionVariant::Sla => {
                for w in ["wq", "wk", "wv"] {
                    store.init_uniform(rng, format!("{prefix}.{w}"), &[c, c], lecun_bound(c));
                }
                for b in ["bq", "bk", "bv"] {
                    store.init_zeros(format!("{prefix}.{b}"), &[c]);
                }
            }
            AttentionVariant::Cha => {
                let r = (c / SE_REDUCTION).max(1);
                store.init_uniform(rng, format!("{prefix}.se.w1"), &[c, r], lecun_bound(c));
                store.init_zeros(format!("{prefix}.se.b1"), &[r]);
                store.init_uniform(rng, format!("{prefix}.se.w2"), &[r, c], lecun_bound(r));
                store.init_zeros(format!("{prefix}.se.b2"), &[c]);
            }
            AttentionVariant::Spa => {
                let fan = 2 * SPA_KERNEL * SPA_KERNEL;
                store.init_uniform(
                    rng,
                    format!("{prefix}.spa.w"),
                    &[1, 2, SPA_KERNEL, SPA_KERNEL],
                    lecun_bound(fan),
                );
                store.init_zeros(format!("{prefix}.spa.b"), &[1]);
            }
            AttentionVariant::None => {}
        }
    }

    /// Attention map `A` for `f`, shaped like `f`; `None` for the identity
    /// variant.
    pub fn attention(&self, g: &mut Graph, p: &Bound, prefix: &str, f: Var) -> Option<Var> {
        let (_, c, h, w) = g.value(f).dims4();
        match self.variant {
            AttentionVariant::Sla => {
                let ws = (
                    p.var(&format!("{prefix}.wq")),
                    p.var(&format!("{prefix}.wk")),
                    p.var(&format!("{prefix}.wv")),
                );
                let bs = (
                    p.try_var(&format!("{prefix}.bq")),
                    p.try_var(&format!("{prefix}.bk")),
                    p.try_var(&format!("{prefix}.bv")),
                );
                Some(attention_on_tape(g, f, ws, bs))
            }
            AttentionVariant::Cha => {
                let s = g.global_avg_pool(f);
                let z = g.dense(
                    s,
                    p.var(&format!("{prefix}.se.w1")),
                    Some(p.var(&format!("{prefix}.se.b1"))),
                );
                let z = g.relu(z);
                let z = g.dense(
                    z,
                    p.var(&format!("{prefix}.se.w2")),
                    Some(p.var(&format!("{prefix}.se.b2"))),
                );
                let gate = g.sigmoid(z);
                Some(g.broadcast_channels(gate, h, w))
            }
            AttentionVariant::Spa => {
                let pooled = g.channel_mean_max(f);
                let logits = g.conv2d(
                    pooled,
                    p.var(&format!("{prefix}.spa.w")),
                    Some(p.var(&format!("{prefix}.spa.b"))),
                    SPA_KERNEL / 2,
                );
                let gate = g.sigmoid(logits);
                Some(g.broadcast_spatial(gate, c))
            }
            AttentionVariant::None => None,
        }
    }

    /// `F + F ⊙ A(F)`, or `F` itself for the identity variant.
    pub fn strengthen(&self, g: &mut Graph, p: &Bound, prefix: &str, f: Var) -> Var {
        match self.attention(g, p, prefix, f) {
            Some(a) => strengthen_on_tape(g, f, a),
            None => f,
        }
    }
}

/// Parameters θ of the fusion network together with the configuration that
/// fixes its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    config: TrainConfig,
    params: ParamStore,
}

fn declare_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.init_uniform(
        rng,
        format!("{prefix}.w"),
        &[cout, cin, k, k],
        he_bound(cin * k * k, LEAKY_SLOPE),
    );
    store.init_zeros(format!("{prefix}.b"), &[cout]);
}

pub(crate) fn declare_conv_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
) {
    declare_conv(store, rng, &format!("{prefix}.conv1"), cin, cout, 3);
    declare_conv(store, rng, &format!("{prefix}.conv2"), cout, cout, 3);
}

/// Two 3×3 convolutions, each followed by a leaky rectifier.
pub(crate) fn conv_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let mut y = x;
    for conv in ["conv1", "conv2"] {
        y = g.conv2d(
            y,
            p.var(&format!("{prefix}.{conv}.w")),
            Some(p.var(&format!("{prefix}.{conv}.b"))),
            1,
        );
        y = g.leaky_relu(y, LEAKY_SLOPE);
    }
    y
}

impl FusionModel {
    /// Freshly initialized model; the layout depends only on
    /// `(scales, base_channels, attention)` and values only on `seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let block = make_variant(config.attention);
        for m in [Modality::Ir, Modality::Vis] {
            let mut cin = 1;
            for s in 0..config.scales {
                let c = config.base_channels << s;
                declare_conv_block(
                    &mut store,
                    &mut rng,
                    &format!("enc.{}.s{s}", m.tag()),
                    cin,
                    c,
                );
                cin = c;
            }
        }
        for s in 0..config.scales {
            let c = config.base_channels << s;
            for m in [Modality::Ir, Modality::Vis] {
                block.declare(&mut store, &mut rng, &format!("fuse.s{s}.{}", m.tag()), c);
            }
        }
        for s in (0..config.scales - 1).rev() {
            let cin = (config.base_channels << (s + 1)) + (config.base_channels << s);
            declare_conv_block(
                &mut store,
                &mut rng,
                &format!("dec.s{s}"),
                cin,
                config.base_channels << s,
            );
        }
        store.init_uniform(
            &mut rng,
            "head.w".into(),
            &[1, config.base_channels, 1, 1],
            lecun_bound(config.base_channels),
        );
        store.init_zeros("head.b".into(), &[1]);
        Ok(Self {
            config: config.clone(),
            params: store,
        })
    }

    /// Rebuilds a model from stored parameters, checking them against the
    /// layout `config` implies.
    pub fn from_parts(config: TrainConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(&config)?;
        check_layout(&reference.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.config.base_channels << scale
    }

    /// The SLA projections of one fusion-block branch, when the model uses
    /// self-attention.
    pub fn projection(&self, scale: usize, modality: Modality) -> Option<AttentionProjection> {
        let prefix = format!("fuse.s{scale}.{}", modality.tag());
        let get = |n: &str| self.params.get(&format!("{prefix}.{n}")).cloned();
        Some(AttentionProjection {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            bq: get("bq"),
            bk: get("bk"),
            bv: get("bv"),
        })
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        if t.shape().len() != 4 || t.shape()[1] != 1 {
            return Err(Error::Shape(format!(
                "fusion input must be (B, 1, H, W), got {:?}",
                t.shape()
            )));
        }
        let (_, _, h, w) = t.dims4();
        check_spatial(h, w, self.config.scales)
    }

    /// Encoder features of one modality on the tape, finest first.
    pub fn encode_on_tape(&self, g: &mut Graph, p: &Bound, x: Var, modality: Modality) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.config.scales);
        let mut cur = x;
        for s in 0..self.config.scales {
            if s > 0 {
                cur = g.max_pool2(cur);
            }
            cur = conv_block(g, p, &format!("enc.{}.s{s}", modality.tag()), cur);
            feats.push(cur);
        }
        feats
    }

    pub fn fuse_on_tape(
        &self,
        g: &mut Graph,
        p: &Bound,
        scale: usize,
        f_ir: Var,
        f_vis: Var,
    ) -> Var {
        let block = make_variant(self.config.attention);
        let a = block.strengthen(g, p, &format!("fuse.s{scale}.ir"), f_ir);
        let b = block.strengthen(g, p, &format!("fuse.s{scale}.vis"), f_vis);
        let sum = g.add(a, b);
        g.scale(sum, 0.5)
    }

    pub fn decode_on_tape(&self, g: &mut Graph, p: &Bound, fused: &[Var]) -> Var {
        let mut d = *fused.last().expect("at least one scale");
        for s in (0..fused.len() - 1).rev() {
            let up = g.upsample2(d);
            let cat = g.concat(up, fused[s]);
            d = conv_block(g, p, &format!("dec.s{s}"), cat);
        }
        let logits = g.conv2d(d, p.var("head.w"), Some(p.var("head.b")), 0);
        g.sigmoid(logits)
    }

    /// Full network on the tape: `(B, 1, H, W)` sources to the fused image.
    pub fn forward_on_tape(&self, g: &mut Graph, p: &Bound, ir: Var, vis: Var) -> Var {
        let fi = self.encode_on_tape(g, p, ir, Modality::Ir);
        let fv = self.encode_on_tape(g, p, vis, Modality::Vis);
        let fused: Vec<Var> = fi
            .iter()
            .zip(&fv)
            .enumerate()
            .map(|(s, (&a, &b))| self.fuse_on_tape(g, p, s, a, b))
            .collect();
        self.decode_on_tape(g, p, &fused)
    }

    /// Encoder pyramid of a `(B, 1, H, W)` image, finest first.
    pub fn encode(&self, image: &FeatureMap, modality: Modality) -> Result<Vec<FeatureMap>> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let feats = self.encode_on_tape(&mut g, &p, x, modality);
        Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Fusion block at `scale`.
    pub fn fuse_block(
        &self,
        f_ir: &FeatureMap,
        f_vis: &FeatureMap,
        scale: usize,
    ) -> Result<FeatureMap> {
        if f_ir.shape() != f_vis.shape() {
            return Err(Error::ShapeMismatch(format!(
                "fuse_block: {:?} vs {:?}",
                f_ir.shape(),
                f_vis.shape()
            )));
        }
        if scale >= self.config.scales
            || f_ir.shape().len() != 4
            || f_ir.shape()[1] != self.channels(scale)
        {
            return Err(Error::Shape(format!(
                "fuse_block at scale {scale} expects {} channels, got {:?}",
                self.channels(scale),
                f_ir.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(f_ir.clone());
        let b = g.constant(f_vis.clone());
        let out = self.fuse_on_tape(&mut g, &p, scale, a, b);
        Ok(g.value(out).clone())
    }

    /// Decodes per-scale fused maps into a `(B, 1, H, W)` image.
    pub fn decode(&self, fused: &[FeatureMap]) -> Result<FeatureMap> {
        if fused.len() != self.config.scales {
            return Err(Error::Shape(format!(
                "decode needs {} scales, got {}",
                self.config.scales,
                fused.len()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars: Vec<Var> = fused.iter().map(|f| g.constant(f.clone())).collect();
        let out = self.decode_on_tape(&mut g, &p, &vars);
        Ok(g.value(out).clone())
    }

    /// Fuses `(B, 1, H, W)` infrared and visible-luminance batches.
    pub fn forward_batch(&self, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
        self.check_input(ir)?;
        if ir.shape() != vis.shape() {
            return Err(Error::ShapeMismatch(format!(
                "infrared {:?} vs visible {:?}",
                ir.shape(),
                vis.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(ir.clone());
        let b = g.constant(vis.clone());
        let out = self.forward_on_tape(&mut g, &p, a, b);
        let t = g.value(out).clone();
        if !t.all_finite() {
            return Err(Error::NonFinite("fused image".into()));
        }
        Ok(t)
    }

    /// Fused image `I_f` of a pair (infrared with visible luminance).
    pub fn forward(&self, pair: &ImagePair) -> Result<Image> {
        if pair.ir.dims() != pair.vis_luma.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}: source sizes differ",
                pair.id
            )));
        }
        let out = self.forward_batch(&pair.ir.to_tensor(), &pair.vis_luma.to_tensor())?;
        Image::from_tensor(&out, 0)
    }
}

pub(crate) fn check_layout(reference: &ParamStore, params: &ParamStore) -> Result<()> {
    if reference.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            reference.len(),
            params.len()
        )));
    }
    for ((rn, rt), (n, t)) in reference.iter().zip(params.iter()) {
        if rn != n || rt.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{n}` {:?} does not match expected `{rn}` {:?}",
                t.shape(),
                rt.shape()
            )));
        }
    }
    Ok(())
}
