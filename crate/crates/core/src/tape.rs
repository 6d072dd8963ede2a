//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] replays the records once in reverse,
//! accumulating gradients into the `requires_grad` leaves. Interior
//! gradients are dropped as soon as they have been consumed. No
//! higher-order gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Static sampling geometry for a grid-sample node: base LR coordinates per
/// output column/row, in source-pixel units.
#[derive(Clone, Debug)]
pub struct SampleCoords {
    pub xs: Arc<Vec<f64>>,
    pub ys: Arc<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId, c: f64 },
    /// `b`'s shape is a suffix of `a`'s shape; `b` is broadcast over the
    /// leading dimensions.
    AddBcast { a: TensorId, b: TensorId },
    MulBcast { a: TensorId, b: TensorId },
    /// Per-channel bias over NCHW.
    AddBiasNchw { a: TensorId, b: TensorId },
    /// Per-(batch, channel) affine over NCHW; `b` has shape [N, C].
    MulBiasNc { a: TensorId, b: TensorId },
    AddBiasNc { a: TensorId, b: TensorId },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Bmm { a: TensorId, b: TensorId, bt: usize, m: usize, k: usize, n: usize },
    /// Batched a·bᵀ with b stored row-major [B, n, k].
    BmmNt { a: TensorId, b: TensorId, bt: usize, m: usize, k: usize, n: usize },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Tanh { a: TensorId },
    Abs { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, axis: usize, eps: f64 },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Reshape { a: TensorId },
    Gather { a: TensorId, idx: Arc<Vec<u32>> },
    GatherRows { a: TensorId, idx: Arc<Vec<u32>>, cols: usize },
    GridSample { f: TensorId, offsets: Option<TensorId>, coords: SampleCoords },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    /// Scan every op output for NaN/Inf. On by default; the trainer keeps
    /// it on so a diverging run aborts at the op that produced the value.
    pub check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Persistent leaf gradient, populated by `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.nodes[id.0].value.grad = None;
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> TensorId {
        t.requires_grad = requires_grad;
        self.push_node(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op, requires });
        id
    }

    fn push_checked(&mut self, value: Tensor, op: Op, requires: bool, name: &'static str) -> Result<TensorId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_node(value, op, requires))
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    // ── Elementwise and broadcast ────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Add { a, b }, self.req(a) || self.req(b), "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Sub { a, b }, self.req(a) || self.req(b), "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Mul { a, b }, self.req(a) || self.req(b), "mul")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Scale { a, c }, self.req(a), "scale")
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::AddScalar { a, c }, self.req(a), "add_scalar")
    }

    fn bcast_check(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::shape(op, format!("{:?} does not end with {:?}", sa, sb)));
        }
        Ok(self.value(b).numel())
    }

    /// a + broadcast(b) where b's shape is a suffix of a's.
    pub fn add_bcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.bcast_check("add_bcast", a, b)?;
        let bd = self.data(b);
        let data: Vec<f64> =
            self.data(a).iter().enumerate().map(|(i, x)| x + bd[i % nb]).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::AddBcast { a, b }, self.req(a) || self.req(b), "add_bcast")
    }

    pub fn mul_bcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.bcast_check("mul_bcast", a, b)?;
        let bd = self.data(b);
        let data: Vec<f64> =
            self.data(a).iter().enumerate().map(|(i, x)| x * bd[i % nb]).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::MulBcast { a, b }, self.req(a) || self.req(b), "mul_bcast")
    }

    fn nchw_bias_check(&self, op: &'static str, a: TensorId, b: TensorId, per_batch: bool) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sa.len() == 4
            && if per_batch { sb == [sa[0], sa[1]] } else { sb == [sa[1]] };
        if !ok {
            return Err(Error::shape(op, format!("{:?} with bias {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add_bias_nchw(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.nchw_bias_check("add_bias_nchw", a, b, false)?;
        let sa = self.shape(a).to_vec();
        let hw = sa[2] * sa[3];
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for (chunk, nc) in data.chunks_exact_mut(hw).zip(0..) {
            let bias = bd[nc % sa[1]];
            for v in chunk {
                *v += bias;
            }
        }
        let t = Tensor::from_vec(sa, data)?;
        self.push_checked(t, Op::AddBiasNchw { a, b }, self.req(a) || self.req(b), "add_bias_nchw")
    }

    pub fn mul_bias_nc(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.nchw_bias_check("mul_bias_nc", a, b, true)?;
        let sa = self.shape(a).to_vec();
        let hw = sa[2] * sa[3];
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for (chunk, nc) in data.chunks_exact_mut(hw).zip(0..) {
            let s = bd[nc];
            for v in chunk {
                *v *= s;
            }
        }
        let t = Tensor::from_vec(sa, data)?;
        self.push_checked(t, Op::MulBiasNc { a, b }, self.req(a) || self.req(b), "mul_bias_nc")
    }

    pub fn add_bias_nc(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.nchw_bias_check("add_bias_nc", a, b, true)?;
        let sa = self.shape(a).to_vec();
        let hw = sa[2] * sa[3];
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for (chunk, nc) in data.chunks_exact_mut(hw).zip(0..) {
            let s = bd[nc];
            for v in chunk {
                *v += s;
            }
        }
        let t = Tensor::from_vec(sa, data)?;
        self.push_checked(t, Op::AddBiasNc { a, b }, self.req(a) || self.req(b), "add_bias_nc")
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{:?} · {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::from_vec(vec![m, n], data)?;
        self.push_checked(t, Op::Matmul { a, b, m, k, n }, self.req(a) || self.req(b), "matmul")
    }

    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", format!("{:?} · {:?}", sa, sb)));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bt * m * n];
        for i in 0..bt {
            kernels::matmul_acc(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::from_vec(vec![bt, m, n], data)?;
        self.push_checked(t, Op::Bmm { a, b, bt, m, k, n }, self.req(a) || self.req(b), "bmm")
    }

    /// Batched a·bᵀ: a is [B, m, k], b is [B, n, k], result [B, m, n].
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::dim("bmm_nt", format!("{:?} · {:?}ᵀ", sa, sb)));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![0.0; bt * m * n];
        for i in 0..bt {
            kernels::matmul_nt_acc(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * n * k..(i + 1) * n * k],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::from_vec(vec![bt, m, n], data)?;
        self.push_checked(t, Op::BmmNt { a, b, bt, m, k, n }, self.req(a) || self.req(b), "bmm_nt")
    }

    /// Cross-correlation with zero padding. x [N,C,H,W], w [O,C,kh,kw],
    /// b [O]. The output extent must divide exactly.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim("conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::dim("conv2d", format!("bias {:?} for {} filters", self.shape(b), sw[0])));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = kernels::conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", format!("H={h} k={kh} stride={stride} pad={pad}")))?;
        let wo = kernels::conv_out_extent(wd, kw, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", format!("W={wd} k={kw} stride={stride} pad={pad}")))?;
        let ckk = c * kh * kw;
        let px = ho * wo;
        let mut out = vec![0.0; n * o * px];
        let mut col = vec![0.0; ckk * px];
        let bd = self.data(b).to_vec();
        for img in 0..n {
            kernels::im2col(
                &self.data(x)[img * c * h * wd..(img + 1) * c * h * wd],
                c, h, wd, kh, kw, stride, pad, ho, wo, &mut col,
            );
            let dst = &mut out[img * o * px..(img + 1) * o * px];
            kernels::matmul_acc(self.data(w), &col, dst, o, ckk, px);
            for (row, bias) in dst.chunks_exact_mut(px).zip(&bd) {
                for v in row {
                    *v += bias;
                }
            }
        }
        let t = Tensor::from_vec(vec![n, o, ho, wo], out)?;
        let requires = self.req(x) || self.req(w) || self.req(b);
        self.push_checked(t, Op::Conv2d { x, w, b, stride, pad }, requires, "conv2d")
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Relu { a }, self.req(a), "relu")
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Gelu { a }, self.req(a), "gelu")
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Tanh { a }, self.req(a), "tanh")
    }

    /// |x| with the subgradient at 0 defined as 0.
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.abs()).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push_checked(t, Op::Abs { a }, self.req(a), "abs")
    }

    // ── Normalization and reductions ─────────────────────────────────

    fn axis_split(&self, op: &'static str, a: TensorId, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::dim(op, format!("axis {axis} of {:?}", s)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, m, inner) = self.axis_split("softmax", a, axis)?;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        if inner == 1 {
            kernels::softmax_rows(src, &mut out, m);
        } else {
            for oi in 0..outer {
                for ii in 0..inner {
                    let base = oi * m * inner + ii;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..m {
                        mx = mx.max(src[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..m {
                        let e = (src[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..m {
                        out[base + j * inner] /= sum;
                    }
                }
            }
        }
        let t = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_checked(t, Op::Softmax { a, axis }, self.req(a), "softmax")
    }

    /// Mean-0 variance-1 normalization over one axis (no affine).
    pub fn layernorm(&mut self, a: TensorId, axis: usize, eps: f64) -> Result<TensorId> {
        let (outer, m, inner) = self.axis_split("layernorm", a, axis)?;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for oi in 0..outer {
            for ii in 0..inner {
                let base = oi * m * inner + ii;
                let mut mean = 0.0;
                for j in 0..m {
                    mean += src[base + j * inner];
                }
                mean /= m as f64;
                let mut var = 0.0;
                for j in 0..m {
                    let d = src[base + j * inner] - mean;
                    var += d * d;
                }
                var /= m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..m {
                    out[base + j * inner] = (src[base + j * inner] - mean) * inv;
                }
            }
        }
        let t = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_checked(t, Op::LayerNorm { a, axis, eps }, self.req(a), "layernorm")
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().sum();
        let t = Tensor::from_vec(vec![1], vec![s])?;
        self.push_checked(t, Op::SumAll { a }, self.req(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().sum();
        let t = Tensor::from_vec(vec![1], vec![s / self.value(a).numel() as f64])?;
        self.push_checked(t, Op::MeanAll { a }, self.req(a), "mean_all")
    }

    // ── Data movement ────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let t = Tensor::from_vec(shape, self.data(a).to_vec())?;
        self.push_checked(t, Op::Reshape { a }, self.req(a), "reshape")
    }

    /// out[i] = a.flat[idx[i]]. Backward scatter-adds, so indices may
    /// repeat (padding, nearest-neighbor upsampling).
    pub fn gather(&mut self, a: TensorId, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::shape("gather", format!("{} indices for shape {:?}", idx.len(), out_shape)));
        }
        let src = self.data(a);
        let n = src.len() as u32;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("index {bad} out of {n}")));
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i as usize]).collect();
        let t = Tensor::from_vec(out_shape, data)?;
        self.push_checked(t, Op::Gather { a, idx }, self.req(a), "gather")
    }

    /// Row gather from a 2-d tensor: a[U,D], idx[P] -> [P,D].
    pub fn gather_rows(&mut self, a: TensorId, idx: Arc<Vec<u32>>) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("{:?}", s)));
        }
        let (u, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= u) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {u}")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx.iter() {
            data.extend_from_slice(&src[r as usize * d..(r as usize + 1) * d]);
        }
        let t = Tensor::from_vec(vec![idx.len(), d], data)?;
        self.push_checked(t, Op::GatherRows { a, idx, cols: d }, self.req(a), "gather_rows")
    }

    /// Bilinear sampling of f [N,C,H,W] at (coords.xs[x]+δx, coords.ys[y]+δy)
    /// with clamp-to-edge handling; differentiable in both the features and
    /// the offsets. `offsets`, when present, has shape [2, h_out, w_out]
    /// (plane 0 = δx, plane 1 = δy) shared across batch and channels.
    pub fn grid_sample(
        &mut self,
        f: TensorId,
        coords: SampleCoords,
        offsets: Option<TensorId>,
    ) -> Result<TensorId> {
        let sf = self.shape(f).to_vec();
        if sf.len() != 4 {
            return Err(Error::dim("grid_sample", format!("features {:?}", sf)));
        }
        let (ho, wo) = (coords.ys.len(), coords.xs.len());
        if let Some(off) = offsets {
            if self.shape(off) != [2, ho, wo] {
                return Err(Error::shape(
                    "grid_sample",
                    format!("offsets {:?}, expected [2, {ho}, {wo}]", self.shape(off)),
                ));
            }
        }
        let (n, c, h, w) = (sf[0], sf[1], sf[2], sf[3]);
        let src = self.data(f);
        let off = offsets.map(|o| self.data(o).to_vec());
        let mut out = vec![0.0; n * c * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut sx, mut sy) = (coords.xs[ox], coords.ys[oy]);
                if let Some(o) = &off {
                    sx += o[oy * wo + ox];
                    sy += o[ho * wo + oy * wo + ox];
                }
                for img in 0..n {
                    for ch in 0..c {
                        let plane = &src[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                        out[((img * c + ch) * ho + oy) * wo + ox] =
                            kernels::bilinear_at(plane, h, w, sx, sy);
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![n, c, ho, wo], out)?;
        let requires = self.req(f) || offsets.map(|o| self.req(o)).unwrap_or(false);
        self.push_checked(t, Op::GridSample { f, offsets, coords }, requires, "grid_sample")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until `zero_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.value.grad {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => node.value.grad = Some(g),
                    }
                    continue;
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                    self.accumulate(&mut grads, b, |dst| add_into(dst, &g));
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                    self.accumulate(&mut grads, b, |dst| {
                        for (d, gv) in dst.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                    self.accumulate(&mut grads, a, |dst| {
                        for ((d, gv), bv) in dst.iter_mut().zip(&g).zip(&bd) {
                            *d += gv * bv;
                        }
                    });
                    self.accumulate(&mut grads, b, |dst| {
                        for ((d, gv), av) in dst.iter_mut().zip(&g).zip(&ad) {
                            *d += gv * av;
                        }
                    });
                }
                Op::Scale { a, c } => {
                    self.accumulate(&mut grads, a, |dst| {
                        for (d, gv) in dst.iter_mut().zip(&g) {
                            *d += gv * c;
                        }
                    });
                }
                Op::AddScalar { a, .. } => {
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                }
                Op::AddBcast { a, b } => {
                    let nb = self.value(b).numel();
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                    self.accumulate(&mut grads, b, |dst| {
                        for (i, gv) in g.iter().enumerate() {
                            dst[i % nb] += gv;
                        }
                    });
                }
                Op::MulBcast { a, b } => {
                    let nb = self.value(b).numel();
                    let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                    self.accumulate(&mut grads, a, |dst| {
                        for (i, (d, gv)) in dst.iter_mut().zip(&g).enumerate() {
                            *d += gv * bd[i % nb];
                        }
                    });
                    self.accumulate(&mut grads, b, |dst| {
                        for (i, gv) in g.iter().enumerate() {
                            dst[i % nb] += gv * ad[i];
                        }
                    });
                }
                Op::AddBiasNchw { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let hw = sa[2] * sa[3];
                    let ch = sa[1];
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                    self.accumulate(&mut grads, b, |dst| {
                        for (nc, chunk) in g.chunks_exact(hw).enumerate() {
                            dst[nc % ch] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::MulBiasNc { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let hw = sa[2] * sa[3];
                    let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                    self.accumulate(&mut grads, a, |dst| {
                        for (nc, (dchunk, gchunk)) in
                            dst.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).enumerate()
                        {
                            let s = bd[nc];
                            for (d, gv) in dchunk.iter_mut().zip(gchunk) {
                                *d += gv * s;
                            }
                        }
                    });
                    self.accumulate(&mut grads, b, |dst| {
                        for (nc, gchunk) in g.chunks_exact(hw).enumerate() {
                            let abase = nc * hw;
                            let mut s = 0.0;
                            for (j, gv) in gchunk.iter().enumerate() {
                                s += gv * ad[abase + j];
                            }
                            dst[nc] += s;
                        }
                    });
                }
                Op::AddBiasNc { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let hw = sa[2] * sa[3];
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                    self.accumulate(&mut grads, b, |dst| {
                        for (nc, gchunk) in g.chunks_exact(hw).enumerate() {
                            dst[nc] += gchunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::Matmul { a, b, m, k, n: nn } => {
                    let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                    self.accumulate(&mut grads, a, |dst| {
                        kernels::matmul_nt_acc(&g, &bd, dst, m, nn, k);
                    });
                    self.accumulate(&mut grads, b, |dst| {
                        kernels::matmul_tn_acc(&ad, &g, dst, m, k, nn);
                    });
                }
                Op::Bmm { a, b, bt, m, k, n: nn } => {
                    let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                    self.accumulate(&mut grads, a, |dst| {
                        for i in 0..bt {
                            kernels::matmul_nt_acc(
                                &g[i * m * nn..(i + 1) * m * nn],
                                &bd[i * k * nn..(i + 1) * k * nn],
                                &mut dst[i * m * k..(i + 1) * m * k],
                                m, nn, k,
                            );
                        }
                    });
                    self.accumulate(&mut grads, b, |dst| {
                        for i in 0..bt {
                            kernels::matmul_tn_acc(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * nn..(i + 1) * m * nn],
                                &mut dst[i * k * nn..(i + 1) * k * nn],
                                m, k, nn,
                            );
                        }
                    });
                }
                Op::BmmNt { a, b, bt, m, k, n: nn } => {
                    let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                    self.accumulate(&mut grads, a, |dst| {
                        for i in 0..bt {
                            kernels::matmul_acc(
                                &g[i * m * nn..(i + 1) * m * nn],
                                &bd[i * nn * k..(i + 1) * nn * k],
                                &mut dst[i * m * k..(i + 1) * m * k],
                                m, nn, k,
                            );
                        }
                    });
                    self.accumulate(&mut grads, b, |dst| {
                        for i in 0..bt {
                            kernels::matmul_tn_acc(
                                &g[i * m * nn..(i + 1) * m * nn],
                                &ad[i * m * k..(i + 1) * m * k],
                                &mut dst[i * nn * k..(i + 1) * nn * k],
                                m, nn, k,
                            );
                        }
                    });
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&mut grads, &g, x, w, b, stride, pad);
                }
                Op::Relu { a } => {
                    let ad = self.data(a).to_vec();
                    self.accumulate(&mut grads, a, |dst| {
                        for ((d, gv), &x) in dst.iter_mut().zip(&g).zip(&ad) {
                            if x > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Gelu { a } => {
                    let ad = self.data(a).to_vec();
                    self.accumulate(&mut grads, a, |dst| {
                        for ((d, gv), &x) in dst.iter_mut().zip(&g).zip(&ad) {
                            *d += gv * gelu_bwd(x);
                        }
                    });
                }
                Op::Tanh { a } => {
                    let out = self.data(i_id(i)).to_vec();
                    self.accumulate(&mut grads, a, |dst| {
                        for ((d, gv), &t) in dst.iter_mut().zip(&g).zip(&out) {
                            *d += gv * (1.0 - t * t);
                        }
                    });
                }
                Op::Abs { a } => {
                    let ad = self.data(a).to_vec();
                    self.accumulate(&mut grads, a, |dst| {
                        for ((d, gv), &x) in dst.iter_mut().zip(&g).zip(&ad) {
                            *d += gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
                Op::Softmax { a, axis } => {
                    let out = self.data(i_id(i)).to_vec();
                    let (outer, m, inner) = self.axis_split("softmax", a, axis)?;
                    self.accumulate(&mut grads, a, |dst| {
                        for oi in 0..outer {
                            for ii in 0..inner {
                                let base = oi * m * inner + ii;
                                let mut dot = 0.0;
                                for j in 0..m {
                                    let f = base + j * inner;
                                    dot += g[f] * out[f];
                                }
                                for j in 0..m {
                                    let f = base + j * inner;
                                    dst[f] += out[f] * (g[f] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { a, axis, eps } => {
                    let ad = self.data(a).to_vec();
                    let (outer, m, inner) = self.axis_split("layernorm", a, axis)?;
                    self.accumulate(&mut grads, a, |dst| {
                        let mf = m as f64;
                        for oi in 0..outer {
                            for ii in 0..inner {
                                let base = oi * m * inner + ii;
                                let mut mean = 0.0;
                                for j in 0..m {
                                    mean += ad[base + j * inner];
                                }
                                mean /= mf;
                                let mut var = 0.0;
                                for j in 0..m {
                                    let d = ad[base + j * inner] - mean;
                                    var += d * d;
                                }
                                var /= mf;
                                let inv = 1.0 / (var + eps).sqrt();
                                let mut gsum = 0.0;
                                let mut gx = 0.0;
                                for j in 0..m {
                                    let f = base + j * inner;
                                    let xh = (ad[f] - mean) * inv;
                                    gsum += g[f];
                                    gx += g[f] * xh;
                                }
                                for j in 0..m {
                                    let f = base + j * inner;
                                    let xh = (ad[f] - mean) * inv;
                                    dst[f] += inv / mf * (mf * g[f] - gsum - xh * gx);
                                }
                            }
                        }
                    });
                }
                Op::SumAll { a } => {
                    let gv = g[0];
                    self.accumulate(&mut grads, a, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::MeanAll { a } => {
                    let gv = g[0] / self.value(a).numel() as f64;
                    self.accumulate(&mut grads, a, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Reshape { a } => {
                    self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                }
                Op::Gather { a, idx } => {
                    self.accumulate(&mut grads, a, |dst| {
                        for (gv, &src_i) in g.iter().zip(idx.iter()) {
                            dst[src_i as usize] += gv;
                        }
                    });
                }
                Op::GatherRows { a, idx, cols } => {
                    self.accumulate(&mut grads, a, |dst| {
                        for (row, &src_r) in idx.iter().enumerate() {
                            let d = &mut dst[src_r as usize * cols..(src_r as usize + 1) * cols];
                            let s = &g[row * cols..(row + 1) * cols];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += sv;
                            }
                        }
                    });
                }
                Op::GridSample { f, offsets, coords } => {
                    self.grid_sample_backward(&mut grads, &g, f, offsets, &coords);
                }
            }
        }
        Ok(())
    }

    fn accumulate<F: FnOnce(&mut Vec<f64>)>(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: TensorId,
        write: F,
    ) {
        if !self.nodes[id.0].requires {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        write(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = kernels::conv_out_extent(h, kh, stride, pad).unwrap();
        let wo = kernels::conv_out_extent(wd, kw, stride, pad).unwrap();
        let ckk = c * kh * kw;
        let px = ho * wo;
        let xd = self.data(x);
        let wdta = self.data(w);
        let mut col = vec![0.0; ckk * px];

        if self.nodes[b.0].requires {
            self.accumulate(grads, b, |dst| {
                for img in 0..n {
                    for oc in 0..o {
                        dst[oc] += g[(img * o + oc) * px..(img * o + oc + 1) * px].iter().sum::<f64>();
                    }
                }
            });
        }
        if self.nodes[w.0].requires {
            self.accumulate(grads, w, |dst| {
                for img in 0..n {
                    kernels::im2col(
                        &xd[img * c * h * wd..(img + 1) * c * h * wd],
                        c, h, wd, kh, kw, stride, pad, ho, wo, &mut col,
                    );
                    kernels::matmul_nt_acc(&g[img * o * px..(img + 1) * o * px], &col, dst, o, px, ckk);
                }
            });
        }
        if self.nodes[x.0].requires {
            let mut dcol = vec![0.0; ckk * px];
            self.accumulate(grads, x, |dst| {
                for img in 0..n {
                    dcol.fill(0.0);
                    kernels::matmul_tn_acc(
                        wdta,
                        &g[img * o * px..(img + 1) * o * px],
                        &mut dcol,
                        o, ckk, px,
                    );
                    kernels::col2im_acc(
                        &dcol,
                        c, h, wd, kh, kw, stride, pad, ho, wo,
                        &mut dst[img * c * h * wd..(img + 1) * c * h * wd],
                    );
                }
            });
        }
    }

    fn grid_sample_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        f: TensorId,
        offsets: Option<TensorId>,
        coords: &SampleCoords,
    ) {
        let sf = self.shape(f).to_vec();
        let (n, c, h, w) = (sf[0], sf[1], sf[2], sf[3]);
        let (ho, wo) = (coords.ys.len(), coords.xs.len());
        let src = self.data(f);
        let off = offsets.map(|o| self.data(o).to_vec());
        let want_f = self.nodes[f.0].requires;
        let want_off = offsets.map(|o| self.nodes[o.0].requires).unwrap_or(false);

        let mut df = if want_f { Some(vec![0.0; src.len()]) } else { None };
        let mut doff = if want_off { Some(vec![0.0; 2 * ho * wo]) } else { None };

        for oy in 0..ho {
            for ox in 0..wo {
                let (mut sx, mut sy) = (coords.xs[ox], coords.ys[oy]);
                if let Some(o) = &off {
                    sx += o[oy * wo + ox];
                    sy += o[ho * wo + oy * wo + ox];
                }
                let inside_x = sx > 0.0 && sx < (w - 1) as f64;
                let inside_y = sy > 0.0 && sy < (h - 1) as f64;
                let cx = sx.clamp(0.0, (w - 1) as f64);
                let cy = sy.clamp(0.0, (h - 1) as f64);
                let x0 = cx.floor() as usize;
                let y0 = cy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = cx - x0 as f64;
                let fy = cy - y0 as f64;
                let (mut gdx, mut gdy) = (0.0, 0.0);
                for img in 0..n {
                    for ch in 0..c {
                        let gv = g[((img * c + ch) * ho + oy) * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = (img * c + ch) * h * w;
                        if let Some(df) = df.as_mut() {
                            df[base + y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                            df[base + y0 * w + x1] += gv * fx * (1.0 - fy);
                            df[base + y1 * w + x0] += gv * (1.0 - fx) * fy;
                            df[base + y1 * w + x1] += gv * fx * fy;
                        }
                        if want_off {
                            let a = src[base + y0 * w + x0];
                            let b = src[base + y0 * w + x1];
                            let cc = src[base + y1 * w + x0];
                            let d = src[base + y1 * w + x1];
                            if inside_x {
                                gdx += gv * ((b - a) * (1.0 - fy) + (d - cc) * fy);
                            }
                            if inside_y {
                                gdy += gv * ((cc - a) * (1.0 - fx) + (d - b) * fx);
                            }
                        }
                    }
                }
                if let Some(doff) = doff.as_mut() {
                    doff[oy * wo + ox] = gdx;
                    doff[ho * wo + oy * wo + ox] = gdy;
                }
            }
        }
        if let Some(df) = df {
            self.accumulate(grads, f, |dst| add_into(dst, &df));
        }
        if let (Some(doff), Some(o)) = (doff, offsets) {
            self.accumulate(grads, o, |dst| add_into(dst, &doff));
        }
    }
}

#[inline]
fn i_id(i: usize) -> TensorId {
    TensorId(i)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}
