//! Segmentation network consuming fused images.
//!
//! A three-level encoder-decoder (stride 8): the single-channel input is
//! replicated to three channels, encoded at widths `w, 2w, 4w` with a `8w`
//! bottleneck, and decoded with bilinear upsampling and skip concatenation
//! to per-pixel class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{check_layout, conv_block, declare_conv_block};
use crate::graph::{Graph, Var};
use crate::params::{lecun_bound, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::types::{Image, LabelMap};

pub const SEG_STRIDE: usize = crate::types::LABELLED_STRIDE;
const LEVELS: usize = 3;

/// Seed offset so the segmentation weights never share a stream with the
/// fusion network built from the same seed.
const SEED_SALT: u64 = 0x5E6_0000_0000;

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    class_count: usize,
    width: usize,
    seed: u64,
    params: ParamStore,
}

impl SegModel {
    pub fn new(class_count: usize, width: usize, seed: u64) -> Result<Self> {
        if class_count < 2 || width == 0 {
            return Err(Error::Config(format!(
                "segmentation net needs >= 2 classes and positive width (got {class_count}, {width})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for l in 0..=LEVELS {
            let c = width << l;
            declare_conv_block(&mut store, &mut rng, &format!("seg.enc{l}"), cin, c);
            cin = c;
        }
        for l in (0..LEVELS).rev() {
            let c = width << l;
            declare_conv_block(
                &mut store,
                &mut rng,
                &format!("seg.dec{l}"),
                (width << (l + 1)) + c,
                c,
            );
        }
        store.init_uniform(
            &mut rng,
            "seg.head.w".into(),
            &[class_count, width, 1, 1],
            lecun_bound(width),
        );
        store.init_zeros("seg.head.b".into(), &[class_count]);
        Ok(Self {
            class_count,
            width,
            seed,
            params: store,
        })
    }

    pub fn from_parts(
        class_count: usize,
        width: usize,
        seed: u64,
        params: ParamStore,
    ) -> Result<Self> {
        let reference = Self::new(class_count, width, seed)?;
        check_layout(&reference.params, &params)?;
        Ok(Self {
            class_count,
            width,
            seed,
            params,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Logits `(B, K, H, W)` for a `(B, 1, H, W)` fused batch on the tape.
    pub fn forward_on_tape(&self, g: &mut Graph, p: &Bound, fused: Var) -> Var {
        let x = g.broadcast_spatial(fused, 3);
        let mut skips = Vec::with_capacity(LEVELS);
        let mut cur = x;
        for l in 0..=LEVELS {
            if l > 0 {
                cur = g.max_pool2(cur);
            }
            cur = conv_block(g, p, &format!("seg.enc{l}"), cur);
            if l < LEVELS {
                skips.push(cur);
            }
        }
        for l in (0..LEVELS).rev() {
            let up = g.upsample2(cur);
            let cat = g.concat(up, skips[l]);
            cur = conv_block(g, p, &format!("seg.dec{l}"), cat);
        }
        g.conv2d(cur, p.var("seg.head.w"), Some(p.var("seg.head.b")), 0)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "segmentation input must be (B, 1, H, W), got {shape:?}"
            )));
        }
        if shape[2] % SEG_STRIDE != 0
            || shape[3] % SEG_STRIDE != 0
            || shape[2] == 0
            || shape[3] == 0
        {
            return Err(Error::Shape(format!(
                "segmentation input {}x{} must be divisible by {SEG_STRIDE}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn forward_batch(&self, fused: &Tensor) -> Result<Tensor> {
        self.check_input(fused.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(fused.clone());
        let out = self.forward_on_tape(&mut g, &p, x);
        Ok(g.value(out).clone())
    }

    /// Per-pixel class logits `(K, H, W)` of one fused image.
    pub fn seg_forward(&self, fused: &Image) -> Result<Tensor> {
        let out = self.forward_batch(&fused.to_tensor())?;
        let (_, k, h, w) = out.dims4();
        out.reshape(vec![k, h, w])
    }
}

/// Per-pixel arg-max of `(K, H, W)` logits; ties go to the lower class.
pub fn predict(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    let (k, h, w) = match s {
        [k, h, w] => (*k, *h, *w),
        [1, k, h, w] => (*k, *h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "predict expects (K, H, W) logits, got {s:?}"
            )))
        }
    };
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let n = h * w;
    let d = logits.data();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Predictions for every item of a `(B, K, H, W)` batch.
pub fn predict_batch(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (b, k, h, w) = logits.dims4();
    (0..b)
        .map(|i| {
            let item = Tensor::new(
                vec![k, h, w],
                logits.data()[i * k * h * w..(i + 1) * k * h * w].to_vec(),
            )?;
            predict(&item)
        })
        .collect()
}
