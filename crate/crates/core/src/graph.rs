//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Every op records its inputs and whatever it needs to run backwards;
//! [`Graph::backward`] walks the tape once in reverse. Ops are the minimal
//! set the fusion and segmentation networks need.

use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    LinearTokens {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    SoftmaxSpatial {
        x: Var,
    },
    AttnContext {
        k: Var,
        v: Var,
    },
    AttnApply {
        g: Var,
        q: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    BroadcastChannels {
        g: Var,
    },
    ChannelMeanMax {
        x: Var,
        argmax: Vec<u32>,
    },
    BroadcastSpatial {
        s: Var,
    },
    Mean {
        x: Var,
    },
    External {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Stride-1 convolution of `x (B, Ci, H, W)` with `w (Co, Ci, k, k)`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (bsz, ci, h, wd) = self.value(x).dims4();
        let (co, wci, k, k2) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let mut out = vec![0.0; bsz * co * oh * ow];
        let wdata = self.value(w).data();
        let rows = ci * k * k;
        let mut cols = vec![0.0; rows * oh * ow];
        let xd = self.value(x).data();
        for bi in 0..bsz {
            let xb = &xd[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let ob = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
            if k == 1 && pad == 0 {
                gemm(co, rows, oh * ow, 1.0, wdata, false, xb, false, 0.0, ob);
            } else {
                im2col(xb, ci, h, wd, k, pad, oh, ow, &mut cols);
                gemm(co, rows, oh * ow, 1.0, wdata, false, &cols, false, 0.0, ob);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (c, chunk) in ob.chunks_exact_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[c]);
                }
            }
        }
        let t = Tensor::new(vec![bsz, co, oh, ow], out).unwrap();
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::Conv2d { x, w, b, pad }, ng)
    }

    /// Per-token linear map: `out[b, :, n] = W^T x[b, :, n] + bias` with
    /// `W (C_in, C_out)`.
    pub fn linear_tokens(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bsz, ci, n) = dims3(self.value(x));
        let wshape = self.value(w).shape().to_vec();
        assert_eq!(wshape[0], ci, "linear_tokens input channels");
        let co = wshape[1];
        let mut out = vec![0.0; bsz * co * n];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for bi in 0..bsz {
            let ob = &mut out[bi * co * n..(bi + 1) * co * n];
            gemm(
                co,
                ci,
                n,
                1.0,
                wd,
                true,
                &xd[bi * ci * n..(bi + 1) * ci * n],
                false,
                0.0,
                ob,
            );
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (c, chunk) in ob.chunks_exact_mut(n).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[c]);
                }
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        shape[1] = co;
        let t = Tensor::new(shape, out).unwrap();
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::LinearTokens { x, w, b }, ng)
    }

    /// `x (B, C_in) · W (C_in, C_out) + bias`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bsz, ci, co) = (xs[0], xs[1], ws[1]);
        assert_eq!(ws[0], ci, "dense input width");
        let mut out = vec![0.0; bsz * co];
        gemm(
            bsz,
            ci,
            co,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(co) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += bb);
            }
        }
        let t = Tensor::new(vec![bsz, co], out).unwrap();
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::Dense { x, w, b }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(&[x]);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(t, Op::Sigmoid { x }, ng)
    }

    /// 2×2 max-pool with stride 2. Ties resolve to the first window element
    /// in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * c * oh * ow);
        let mut argmax = Vec::with_capacity(bsz * c * oh * ow);
        for plane in 0..bsz * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let t = Tensor::new(vec![bsz, c, oh, ow], out).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::MaxPool2 { x, argmax }, ng)
    }

    /// 2× bilinear upsampling with half-pixel centres and edge clamping.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let ty = bilinear_taps(h);
        let tx = bilinear_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = vec![0.0; bsz * c * oh * ow];
        for plane in 0..bsz * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let t = Tensor::new(vec![bsz, c, oh, ow], out).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::Upsample2 { x }, ng)
    }

    /// Concatenates two `(B, ·, h, w)` maps along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (bsz, ca, h, w) = self.value(a).dims4();
        let (bb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((bsz, h, w), (bb, hb, wb), "concat shapes");
        let n = h * w;
        let mut out = Vec::with_capacity(bsz * (ca + cb) * n);
        for bi in 0..bsz {
            out.extend_from_slice(&self.value(a).data()[bi * ca * n..(bi + 1) * ca * n]);
            out.extend_from_slice(&self.value(b).data()[bi * cb * n..(bi + 1) * cb * n]);
        }
        let t = Tensor::new(vec![bsz, ca + cb, h, w], out).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Concat { a, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale { x, s }, ng)
    }

    /// Softmax over the flattened spatial (token) axis of each `(b, c)` row.
    pub fn softmax_spatial(&mut self, x: Var) -> Var {
        let (_, _, n) = dims3(self.value(x));
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(t, Op::SoftmaxSpatial { x }, ng)
    }

    /// Global context `G[b] = K_b · V_bᵀ` (`C_k × C_v`) where `K_b`, `V_b`
    /// are the channel-by-token matrices of batch item `b`.
    pub fn attn_context(&mut self, k: Var, v: Var) -> Var {
        let (bsz, ck, n) = dims3(self.value(k));
        let (bv, cv, nv) = dims3(self.value(v));
        assert_eq!((bsz, n), (bv, nv), "attn_context shapes");
        let mut out = vec![0.0; bsz * ck * cv];
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        for bi in 0..bsz {
            gemm(
                ck,
                n,
                cv,
                1.0,
                &kd[bi * ck * n..(bi + 1) * ck * n],
                false,
                &vd[bi * cv * n..(bi + 1) * cv * n],
                true,
                0.0,
                &mut out[bi * ck * cv..(bi + 1) * ck * cv],
            );
        }
        let t = Tensor::new(vec![bsz, ck, cv], out).unwrap();
        let ng = self.ng(&[k, v]);
        self.push(t, Op::AttnContext { k, v }, ng)
    }

    /// Applies a context `G (B, C_q, C_v)` to queries: token `n` of the
    /// output is `Q[n, :] · G`, laid out as `(B, C_v, h, w)`.
    pub fn attn_apply(&mut self, g: Var, q: Var) -> Var {
        let gs = self.value(g).shape().to_vec();
        let (bsz, cq, n) = dims3(self.value(q));
        assert_eq!((gs[0], gs[1]), (bsz, cq), "attn_apply shapes");
        let cv = gs[2];
        let mut out = vec![0.0; bsz * cv * n];
        let gd = self.value(g).data();
        let qd = self.value(q).data();
        for bi in 0..bsz {
            gemm(
                cv,
                cq,
                n,
                1.0,
                &gd[bi * cq * cv..(bi + 1) * cq * cv],
                true,
                &qd[bi * cq * n..(bi + 1) * cq * n],
                false,
                0.0,
                &mut out[bi * cv * n..(bi + 1) * cv * n],
            );
        }
        let mut shape = self.value(q).shape().to_vec();
        shape[1] = cv;
        let t = Tensor::new(shape, out).unwrap();
        let ng = self.ng(&[g, q]);
        self.push(t, Op::AttnApply { g, q }, ng)
    }

    /// `(B, C, h, w)` → `(B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (bsz, c, n) = dims3(self.value(x));
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let t = Tensor::new(vec![bsz, c], data).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::GlobalAvgPool { x }, ng)
    }

    /// `(B, C)` → `(B, C, h, w)` by repeating each entry over the plane.
    pub fn broadcast_channels(&mut self, g: Var, h: usize, w: usize) -> Var {
        let gs = self.value(g).shape().to_vec();
        let data = self
            .value(g)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(h * w))
            .collect();
        let t = Tensor::new(vec![gs[0], gs[1], h, w], data).unwrap();
        let ng = self.ng(&[g]);
        self.push(t, Op::BroadcastChannels { g }, ng)
    }

    /// `(B, C, h, w)` → `(B, 2, h, w)`: channel mean, then channel max.
    pub fn channel_mean_max(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let n = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; bsz * 2 * n];
        let mut argmax = vec![0u32; bsz * n];
        for bi in 0..bsz {
            let xb = &xd[bi * c * n..(bi + 1) * c * n];
            for p in 0..n {
                let mut sum = 0.0;
                let mut best = 0;
                for ch in 0..c {
                    let v = xb[ch * n + p];
                    sum += v;
                    if v > xb[best * n + p] {
                        best = ch;
                    }
                }
                out[bi * 2 * n + p] = sum / c as f64;
                out[bi * 2 * n + n + p] = xb[best * n + p];
                argmax[bi * n + p] = best as u32;
            }
        }
        let t = Tensor::new(vec![bsz, 2, h, w], out).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::ChannelMeanMax { x, argmax }, ng)
    }

    /// `(B, 1, h, w)` → `(B, C, h, w)` by repeating the plane.
    pub fn broadcast_spatial(&mut self, s: Var, c: usize) -> Var {
        let (bsz, one, h, w) = self.value(s).dims4();
        assert_eq!(one, 1, "broadcast_spatial expects one channel");
        let n = h * w;
        let mut data = Vec::with_capacity(bsz * c * n);
        for plane in self.value(s).data().chunks_exact(n) {
            for _ in 0..c {
                data.extend_from_slice(plane);
            }
        }
        let t = Tensor::new(vec![bsz, c, h, w], data).unwrap();
        let ng = self.ng(&[s]);
        self.push(t, Op::BroadcastSpatial { s }, ng)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(t, Op::Mean { x }, ng)
    }

    /// Scalar computed outside the tape whose gradient w.r.t. `x` is known.
    pub fn external(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "external gradient shape");
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(value), Op::External { x, grad }, ng)
    }

    /// Gradients of the one-element node `root` w.r.t. every node that
    /// needs them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, ci, h, wd) = xv.dims4();
                let (co, _, k, _) = wv.dims4();
                let (_, _, oh, ow) = node.value.dims4();
                let rows = ci * k * k;
                let direct = k == 1 && *pad == 0;
                let mut cols = vec![0.0; if direct { 0 } else { rows * oh * ow }];
                let mut dcols = vec![0.0; rows * oh * ow];
                let mut dw = self.wants(*w).then(|| vec![0.0; co * rows]);
                let mut dx = self.wants(*x).then(|| vec![0.0; bsz * ci * h * wd]);
                for bi in 0..bsz {
                    let go = &gd[bi * co * oh * ow..(bi + 1) * co * oh * ow];
                    let xb = &xv.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                    if let Some(dw) = dw.as_mut() {
                        let colsref: &[f64] = if direct {
                            xb
                        } else {
                            im2col(xb, ci, h, wd, k, *pad, oh, ow, &mut cols);
                            &cols
                        };
                        gemm(co, oh * ow, rows, 1.0, go, false, colsref, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                        if direct {
                            gemm(rows, co, oh * ow, 1.0, wv.data(), true, go, false, 0.0, dxb);
                        } else {
                            gemm(
                                rows,
                                co,
                                oh * ow,
                                1.0,
                                wv.data(),
                                true,
                                go,
                                false,
                                0.0,
                                &mut dcols,
                            );
                            col2im(&dcols, ci, h, wd, k, *pad, oh, ow, dxb);
                        }
                    }
                }
                if let Some(dw) = dw {
                    acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if let Some(dx) = dx {
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(grads, *b, channel_sums(gd, bsz, co, oh * ow));
                    }
                }
            }
            Op::LinearTokens { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, ci, n) = dims3(xv);
                let co = wv.shape()[1];
                if self.wants(*w) {
                    let mut dw = vec![0.0; ci * co];
                    for bi in 0..bsz {
                        gemm(
                            ci,
                            n,
                            co,
                            1.0,
                            &xv.data()[bi * ci * n..(bi + 1) * ci * n],
                            false,
                            &gd[bi * co * n..(bi + 1) * co * n],
                            true,
                            1.0,
                            &mut dw,
                        );
                    }
                    acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; bsz * ci * n];
                    for bi in 0..bsz {
                        gemm(
                            ci,
                            co,
                            n,
                            1.0,
                            wv.data(),
                            false,
                            &gd[bi * co * n..(bi + 1) * co * n],
                            false,
                            0.0,
                            &mut dx[bi * ci * n..(bi + 1) * ci * n],
                        );
                    }
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(grads, *b, channel_sums(gd, bsz, co, n));
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, ci) = (xv.shape()[0], xv.shape()[1]);
                let co = wv.shape()[1];
                if self.wants(*w) {
                    let mut dw = vec![0.0; ci * co];
                    gemm(ci, bsz, co, 1.0, xv.data(), true, gd, false, 0.0, &mut dw);
                    acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; bsz * ci];
                    gemm(bsz, co, ci, 1.0, gd, false, wv.data(), true, 0.0, &mut dx);
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; co];
                        for row in gd.chunks_exact(co) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        acc(grads, *b, Tensor::new(vec![co], db).unwrap());
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                acc(
                    grads,
                    *x,
                    Tensor::new(node.value.shape().to_vec(), data).unwrap(),
                );
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &g) in argmax.iter().zip(gd) {
                    d[i as usize] += g;
                }
                acc(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let (bsz, c, h, w) = self.value(*x).dims4();
                let ty = bilinear_taps(h);
                let tx = bilinear_taps(w);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for plane in 0..bsz * c {
                    let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let g = src[oy * ow + ox];
                            dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += g * ly * (1.0 - lx);
                            dst[y1 * w + x1] += g * ly * lx;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (bsz, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let n = h * w;
                let c = ca + cb;
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(bsz * ca * n);
                    for bi in 0..bsz {
                        da.extend_from_slice(&gd[bi * c * n..bi * c * n + ca * n]);
                    }
                    acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(bsz * cb * n);
                    for bi in 0..bsz {
                        db.extend_from_slice(&gd[bi * c * n + ca * n..(bi + 1) * c * n]);
                    }
                    acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db).unwrap());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(grads, *a, gout.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, gout.clone());
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.wants(*a) {
                    let d = bv.data().iter().zip(gd).map(|(y, g)| y * g).collect();
                    acc(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = av.data().iter().zip(gd).map(|(y, g)| y * g).collect();
                    acc(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale { x, s } => acc(grads, *x, gout.map(|g| g * s)),
            Op::SoftmaxSpatial { x } => {
                let (_, _, n) = dims3(&node.value);
                let mut dx = Vec::with_capacity(gd.len());
                for (y, g) in node.value.data().chunks_exact(n).zip(gd.chunks_exact(n)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)));
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(node.value.shape().to_vec(), dx).unwrap(),
                );
            }
            Op::AttnContext { k, v } => {
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (bsz, ck, n) = dims3(kv);
                let cv = dims3(vv).1;
                if self.wants(*k) {
                    let mut dk = vec![0.0; bsz * ck * n];
                    for bi in 0..bsz {
                        gemm(
                            ck,
                            cv,
                            n,
                            1.0,
                            &gd[bi * ck * cv..(bi + 1) * ck * cv],
                            false,
                            &vv.data()[bi * cv * n..(bi + 1) * cv * n],
                            false,
                            0.0,
                            &mut dk[bi * ck * n..(bi + 1) * ck * n],
                        );
                    }
                    acc(grads, *k, Tensor::new(kv.shape().to_vec(), dk).unwrap());
                }
                if self.wants(*v) {
                    let mut dv = vec![0.0; bsz * cv * n];
                    for bi in 0..bsz {
                        gemm(
                            cv,
                            ck,
                            n,
                            1.0,
                            &gd[bi * ck * cv..(bi + 1) * ck * cv],
                            true,
                            &kv.data()[bi * ck * n..(bi + 1) * ck * n],
                            false,
                            0.0,
                            &mut dv[bi * cv * n..(bi + 1) * cv * n],
                        );
                    }
                    acc(grads, *v, Tensor::new(vv.shape().to_vec(), dv).unwrap());
                }
            }
            Op::AttnApply { g, q } => {
                let gv = self.value(*g);
                let qv = self.value(*q);
                let (bsz, cq, n) = dims3(qv);
                let cv = gv.shape()[2];
                if self.wants(*q) {
                    let mut dq = vec![0.0; bsz * cq * n];
                    for bi in 0..bsz {
                        gemm(
                            cq,
                            cv,
                            n,
                            1.0,
                            &gv.data()[bi * cq * cv..(bi + 1) * cq * cv],
                            false,
                            &gd[bi * cv * n..(bi + 1) * cv * n],
                            false,
                            0.0,
                            &mut dq[bi * cq * n..(bi + 1) * cq * n],
                        );
                    }
                    acc(grads, *q, Tensor::new(qv.shape().to_vec(), dq).unwrap());
                }
                if self.wants(*g) {
                    let mut dg = vec![0.0; bsz * cq * cv];
                    for bi in 0..bsz {
                        gemm(
                            cq,
                            n,
                            cv,
                            1.0,
                            &qv.data()[bi * cq * n..(bi + 1) * cq * n],
                            false,
                            &gd[bi * cv * n..(bi + 1) * cv * n],
                            true,
                            0.0,
                            &mut dg[bi * cq * cv..(bi + 1) * cq * cv],
                        );
                    }
                    acc(grads, *g, Tensor::new(gv.shape().to_vec(), dg).unwrap());
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, n) = dims3(self.value(*x));
                let inv = 1.0 / n as f64;
                let d = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat(g * inv).take(n))
                    .collect();
                acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), d).unwrap());
            }
            Op::BroadcastChannels { g } => {
                let (_, _, n) = dims3(&node.value);
                let d = gd.chunks_exact(n).map(|r| r.iter().sum()).collect();
                acc(grads, *g, Tensor::new(self.shape(*g).to_vec(), d).unwrap());
            }
            Op::ChannelMeanMax { x, argmax } => {
                let (bsz, c, h, w) = self.value(*x).dims4();
                let n = h * w;
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for bi in 0..bsz {
                    for p in 0..n {
                        let gm = gd[bi * 2 * n + p] / c as f64;
                        for ch in 0..c {
                            d[bi * c * n + ch * n + p] += gm;
                        }
                        let best = argmax[bi * n + p] as usize;
                        d[bi * c * n + best * n + p] += gd[bi * 2 * n + n + p];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::BroadcastSpatial { s } => {
                let (bsz, c, h, w) = node.value.dims4();
                let n = h * w;
                let mut ds = vec![0.0; bsz * n];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let src = &gd[(bi * c + ch) * n..(bi * c + ch + 1) * n];
                        ds[bi * n..(bi + 1) * n]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                acc(grads, *s, Tensor::new(self.shape(*s).to_vec(), ds).unwrap());
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                acc(grads, *x, Tensor::full(self.shape(*x), gd[0] / n));
            }
            Op::External { x, grad } => acc(grads, *x, grad.map(|g| g * gd[0])),
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn channel_sums(gd: &[f64], bsz: usize, c: usize, n: usize) -> Tensor {
    let mut db = vec![0.0; c];
    for bi in 0..bsz {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += gd[(bi * c + ch) * n..(bi * c + ch + 1) * n]
                .iter()
                .sum::<f64>();
        }
    }
    Tensor::new(vec![c], db).unwrap()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Source taps `(i0, i1, weight_of_i1)` for each output index of a 2×
/// half-pixel bilinear upsample along one axis of length `n`.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                // output column range whose source column is inside the image
                let x_lo = pad.saturating_sub(kx).min(ow);
                let x_hi = (w + pad).saturating_sub(kx).min(ow).max(x_lo);
                for oy in 0..oh {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    d[..x_lo].fill(0.0);
                    d[x_hi..].fill(0.0);
                    let s0 = x_lo + kx - pad;
                    d[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    x.fill(0.0);
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let x_lo = pad.saturating_sub(kx).min(ow);
                let x_hi = (w + pad).saturating_sub(kx).min(ow).max(x_lo);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let s0 = x_lo + kx - pad;
                    for (d, s) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[oy * ow + x_lo..oy * ow + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Checks d(sum(out ⊙ probe))/d(input) against central differences for
    /// every input element.
    fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ins: &[Tensor],
                    probe: Option<&Tensor>|
         -> (f64, Option<Tensor>, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let shape = g.shape(out).to_vec();
            let probe_t = probe.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            let p = g.constant(probe_t.clone());
            let prod = g.mul(out, p);
            let loss = g.mean(prod);
            let val = g.value(loss).data()[0];
            let grads = g.backward(loss);
            (
                val,
                Some(probe_t),
                vars.iter().map(|v| grads.get(*v).cloned()).collect(),
            )
        };
        let (_, probe_shape_holder, _) = eval(&inputs, None);
        let probe = rand_tensor(&mut rng, probe_shape_holder.unwrap().shape());
        let (_, _, analytic) = eval(&inputs, Some(&probe));
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            let ga = analytic[ti]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[i] -= h;
                let fd = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
                let a = ga.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {ti} elem {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let out = g.conv2d(xv, wv, Some(bv), 1);
        let o = g.value(out);
        assert_eq!(o.shape(), &[2, 2, 5, 4]);
        for bi in 0..2 {
            for co in 0..2 {
                for y in 0..5i64 {
                    for xx in 0..4i64 {
                        let mut s = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        s += x.data()
                                            [((bi * 3 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                            * w.data()[((co * 3 + ci) * 3 + ky as usize) * 3
                                                + kx as usize];
                                    }
                                }
                            }
                        }
                        let got = o.data()[((bi * 2 + co) * 5 + y as usize) * 4 + xx as usize];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            rand_tensor(&mut rng, &[2, 2, 4, 5]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_op(ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1));
        let ins = vec![
            rand_tensor(&mut rng, &[1, 2, 8, 8]),
            rand_tensor(&mut rng, &[1, 2, 7, 7]),
        ];
        check_op(ins, |g, v| g.conv2d(v[0], v[1], None, 3));
        let ins = vec![
            rand_tensor(&mut rng, &[2, 3, 2, 2]),
            rand_tensor(&mut rng, &[2, 3, 1, 1]),
        ];
        check_op(ins, |g, v| g.conv2d(v[0], v[1], None, 0));
    }

    #[test]
    fn pooling_upsampling_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_op(vec![rand_tensor(&mut rng, &[2, 2, 4, 6])], |g, v| {
            g.max_pool2(v[0])
        });
        check_op(vec![rand_tensor(&mut rng, &[1, 2, 3, 4])], |g, v| {
            g.upsample2(v[0])
        });
        check_op(
            vec![
                rand_tensor(&mut rng, &[2, 1, 2, 2]),
                rand_tensor(&mut rng, &[2, 3, 2, 2]),
            ],
            |g, v| g.concat(v[0], v[1]),
        );
        check_op(vec![rand_tensor(&mut rng, &[2, 3, 2, 3])], |g, v| {
            g.channel_mean_max(v[0])
        });
        check_op(vec![rand_tensor(&mut rng, &[2, 1, 2, 3])], |g, v| {
            g.broadcast_spatial(v[0], 3)
        });
        check_op(vec![rand_tensor(&mut rng, &[2, 3, 2, 2])], |g, v| {
            g.global_avg_pool(v[0])
        });
        check_op(vec![rand_tensor(&mut rng, &[2, 3])], |g, v| {
            g.broadcast_channels(v[0], 2, 2)
        });
    }

    #[test]
    fn attention_primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_op(vec![rand_tensor(&mut rng, &[2, 3, 2, 3])], |g, v| {
            g.softmax_spatial(v[0])
        });
        check_op(
            vec![
                rand_tensor(&mut rng, &[2, 3, 2, 2]),
                rand_tensor(&mut rng, &[2, 4, 2, 2]),
            ],
            |g, v| g.attn_context(v[0], v[1]),
        );
        check_op(
            vec![
                rand_tensor(&mut rng, &[2, 3, 4]),
                rand_tensor(&mut rng, &[2, 3, 2, 2]),
            ],
            |g, v| g.attn_apply(v[0], v[1]),
        );
        check_op(
            vec![
                rand_tensor(&mut rng, &[2, 3, 2, 2]),
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4]),
            ],
            |g, v| g.linear_tokens(v[0], v[1], Some(v[2])),
        );
        check_op(
            vec![
                rand_tensor(&mut rng, &[2, 3]),
                rand_tensor(&mut rng, &[3, 2]),
                rand_tensor(&mut rng, &[2]),
            ],
            |g, v| g.dense(v[0], v[1], Some(v[2])),
        );
    }

    #[test]
    fn pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_op(vec![rand_tensor(&mut rng, &[1, 2, 3, 3])], |g, v| {
            g.leaky_relu(v[0], 0.2)
        });
        check_op(vec![rand_tensor(&mut rng, &[1, 2, 3, 3])], |g, v| {
            g.relu(v[0])
        });
        check_op(vec![rand_tensor(&mut rng, &[1, 2, 3, 3])], |g, v| {
            g.sigmoid(v[0])
        });
        check_op(
            vec![
                rand_tensor(&mut rng, &[1, 2, 2, 2]),
                rand_tensor(&mut rng, &[1, 2, 2, 2]),
            ],
            |g, v| {
                let m = g.mul(v[0], v[1]);
                let s = g.scale(m, 0.5);
                g.add(s, v[0])
            },
        );
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 0.7));
        let y = g.upsample2(x);
        assert_eq!(g.shape(y), &[1, 2, 6, 10]);
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn max_pool_matches_window_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[1, 1, 16, 16]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = g.max_pool2(xv);
        for oy in 0..8 {
            for ox in 0..8 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * oy + dy) * 16 + 2 * ox + dx]);
                    }
                }
                assert_eq!(g.value(p).data()[oy * 8 + ox], m);
            }
        }
    }
}
