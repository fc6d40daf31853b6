use super::kernels::{self, ConvDims};
use super::params::{ParamId, ParamSet};
use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::sync::Arc;

/// One recorded operation together with everything its adjoint needs.
enum Op {
    Leaf(ParamId),
    Matmul { a: Tensor, b: Tensor },
    /// C = A · Bᵀ with B stored row-major as [n, k].
    MatmulNt { a: Tensor, b: Tensor },
    Conv2d { x: Tensor, w: Tensor, b: Tensor, dims: ConvDims },
    BilinearUp { x: Tensor, factor: usize },
    Softmax { x: Tensor, y: Arc<Vec<f64>>, row: usize },
    /// Per spatial location over channels: y = scale · x / (‖x‖₂ + eps).
    NormChannels { x: Tensor, norms: Vec<f64>, scale: f64 },
    /// Per channel over space: y = x − mean(x over h·w).
    CenterChannels { x: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, mean: Vec<f64>, inv_std: Vec<f64> },
    Sigmoid { x: Tensor, y: Arc<Vec<f64>> },
    Relu { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    MulChannels { x: Tensor, m: Tensor },
    MulRows { x: Tensor, v: Tensor },
    AddRowVec { x: Tensor, v: Tensor },
    Scale { x: Tensor, c: f64 },
    ConcatChannels { a: Tensor, b: Tensor },
    ConcatRows { a: Tensor, b: Tensor },
    ToRows { x: Tensor },
    Reshape { x: Tensor },
    SumAll { x: Tensor },
    MeanAll { x: Tensor },
    Bce { logits: Tensor, target: Tensor, p_fg: Vec<f64> },
}

/// Define-by-run tape. Ops are appended in execution order, which is a
/// topological order of the data-flow DAG, so the backward sweep visits each
/// node exactly once in reverse. A graph serves a single forward/backward
/// cycle; build a fresh one per pass.
pub struct Graph {
    nodes: RefCell<Vec<Op>>,
    spent: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), spent: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drop the recorded tape so the graph can record a new pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.spent.set(false);
    }

    /// Enter a parameter into the graph as a differentiable leaf.
    pub fn leaf(&self, params: &ParamSet, id: ParamId) -> Tensor {
        let shape = params.shape(id).to_vec();
        let data = Arc::clone(params.value_arc(id));
        let node = self.push_node(Op::Leaf(id));
        Tensor::from_parts(shape, data, Some(node))
    }

    fn push_node(&self, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        nodes.len() - 1
    }

    fn emit(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, ctx: &str, tracked: bool) -> Result<Tensor> {
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite(ctx.to_string()));
        }
        let node = if tracked { Some(self.push_node(op)) } else { None };
        Ok(Tensor::from_parts(shape, Arc::new(data), node))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// C[i,j] = Σ_p A[i,p]·B[p,j].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(a, "matmul lhs")?;
        let (k2, n) = as_matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(a.data(), b.data(), m, k, n, &mut out);
        let tracked = a.requires_grad() || b.requires_grad();
        self.emit(Op::Matmul { a: a.clone(), b: b.clone() }, vec![m, n], out, "matmul", tracked)
    }

    /// C = A · Bᵀ where B is given row-major as [n, k].
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(a, "matmul_nt lhs")?;
        let (n, k2) = as_matrix(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt widths disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(a.data(), b.data(), m, k, n, &mut out);
        let tracked = a.requires_grad() || b.requires_grad();
        self.emit(Op::MatmulNt { a: a.clone(), b: b.clone() }, vec![m, n], out, "matmul_nt", tracked)
    }

    /// Direct 2d cross-correlation of x (c_in×H×W) with w (c_out×c_in×k×k)
    /// plus per-channel bias.
    pub fn conv2d(&self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects x rank 3 and w rank 4, got {xs:?} / {ws:?}"
            )));
        }
        if ws[1] != xs[0] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                xs[0], ws[1]
            )));
        }
        if b.shape() != [ws[0]] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?}, expected [{}]",
                b.shape(),
                ws[0]
            )));
        }
        let dims = ConvDims::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride, pad)
            .ok_or_else(|| {
                Error::Dimension(format!(
                    "conv2d output size not integral for input {}x{}, kernel {}x{}, stride {stride}, pad {pad}",
                    xs[1], xs[2], ws[2], ws[3]
                ))
            })?;
        let mut out = vec![0.0; dims.c_out * dims.out_spatial()];
        kernels::conv2d_forward(x.data(), w.data(), b.data(), &dims, &mut out);
        let tracked = x.requires_grad() || w.requires_grad() || b.requires_grad();
        self.emit(
            Op::Conv2d { x: x.clone(), w: w.clone(), b: b.clone(), dims },
            vec![dims.c_out, dims.oh, dims.ow],
            out,
            "conv2d",
            tracked,
        )
    }

    /// Bilinear interpolation with half-pixel centers, integer factor ≥ 2.
    pub fn upsample_bilinear(&self, x: &Tensor, factor: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("upsample expects rank 3, got {xs:?}")));
        }
        if factor < 2 {
            return Err(Error::Dimension(format!("upsample factor must be ≥ 2, got {factor}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * h * factor * w * factor];
        kernels::bilinear_up_forward(x.data(), c, h, w, factor, &mut out);
        self.emit(
            Op::BilinearUp { x: x.clone(), factor },
            vec![c, h * factor, w * factor],
            out,
            "upsample_bilinear",
            x.requires_grad(),
        )
    }

    // ── nonlinearities and normalization ───────────────────────────────

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        let row = last_dim(x, "softmax_lastdim")?;
        let mut y = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks_exact(row).zip(y.chunks_exact_mut(row)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *d = e;
                sum += e;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let y = Arc::new(y);
        let out = y.as_ref().clone();
        self.emit(
            Op::Softmax { x: x.clone(), y, row },
            x.shape().to_vec(),
            out,
            "softmax_lastdim",
            x.requires_grad(),
        )
    }

    /// Per-slice normalization over the last dimension with fixed eps 1e-5,
    /// then the gamma/beta affine map.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let l = last_dim(x, "layer_norm")?;
        if gamma.shape() != [l] || beta.shape() != [l] {
            return Err(Error::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?}, expected [{l}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.numel() / l;
        let mut out = vec![0.0; x.numel()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        let g = gamma.data();
        let bt = beta.data();
        for (r, (src, dst)) in x.data().chunks_exact(l).zip(out.chunks_exact_mut(l)).enumerate() {
            let mean = src.iter().sum::<f64>() / l as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            for j in 0..l {
                dst[j] = (src[j] - mean) * inv * g[j] + bt[j];
            }
        }
        let tracked = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.emit(
            Op::LayerNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: means,
                inv_std: inv_stds,
            },
            x.shape().to_vec(),
            out,
            "layer_norm",
            tracked,
        )
    }

    /// L2-normalize each spatial location's channel vector of a c×H×W map
    /// to length `scale` (plus a small epsilon for stability). Turns the
    /// dot products downstream attention computes into scaled cosines, so
    /// no location can dominate by feature magnitude alone.
    pub fn l2_normalize_channels(&self, x: &Tensor, scale: f64) -> Result<Tensor> {
        const EPS: f64 = 1e-6;
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!(
                "l2_normalize_channels expects rank 3, got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut norms = vec![0.0; hw];
        for p in 0..hw {
            let mut s = 0.0;
            for ch in 0..c {
                let v = x.data()[ch * hw + p];
                s += v * v;
            }
            norms[p] = s.sqrt() + EPS;
        }
        let mut y = vec![0.0; x.numel()];
        for ch in 0..c {
            for p in 0..hw {
                y[ch * hw + p] = scale * x.data()[ch * hw + p] / norms[p];
            }
        }
        self.emit(
            Op::NormChannels { x: x.clone(), norms, scale },
            xs.to_vec(),
            y,
            "l2_normalize_channels",
            x.requires_grad(),
        )
    }

    /// Subtract each channel's spatial mean of a c×H×W map, giving signed,
    /// zero-mean planes. Feature dot products then contrast deviations
    /// from the scene average instead of compressing into the positive
    /// orthant a relu stack produces.
    pub fn center_channels(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("center_channels expects rank 3, got {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut y = vec![0.0; x.numel()];
        for ch in 0..c {
            let plane = &x.data()[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            for p in 0..hw {
                y[ch * hw + p] = plane[p] - mean;
            }
        }
        self.emit(Op::CenterChannels { x: x.clone() }, xs.to_vec(), y, "center_channels", x.requires_grad())
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = vec![0.0; x.numel()];
        for (d, &v) in y.iter_mut().zip(x.data()) {
            *d = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
        }
        let y = Arc::new(y);
        let out = y.as_ref().clone();
        self.emit(Op::Sigmoid { x: x.clone(), y }, x.shape().to_vec(), out, "sigmoid", x.requires_grad())
    }

    /// max(x, 0) with subgradient 0 at the origin.
    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let y: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.emit(Op::Relu { x: x.clone() }, x.shape().to_vec(), y, "relu", x.requires_grad())
    }

    // ── elementwise and shape plumbing ─────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "add")?;
        let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let tracked = a.requires_grad() || b.requires_grad();
        self.emit(Op::Add { a: a.clone(), b: b.clone() }, a.shape().to_vec(), y, "add", tracked)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "mul")?;
        let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let tracked = a.requires_grad() || b.requires_grad();
        self.emit(Op::Mul { a: a.clone(), b: b.clone() }, a.shape().to_vec(), y, "mul", tracked)
    }

    /// Broadcast-multiply a c×H×W map by an H×W mask.
    pub fn mul_channels(&self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let ms = m.shape();
        if xs.len() != 3 || ms.len() != 2 || xs[1] != ms[0] || xs[2] != ms[1] {
            return Err(Error::Dimension(format!(
                "mul_channels expects [c,h,w] ⊗ [h,w], got {xs:?} ⊗ {ms:?}"
            )));
        }
        let hw = ms[0] * ms[1];
        let mut y = vec![0.0; x.numel()];
        for c in 0..xs[0] {
            let src = &x.data()[c * hw..(c + 1) * hw];
            let dst = &mut y[c * hw..(c + 1) * hw];
            for (d, (&v, &mv)) in dst.iter_mut().zip(src.iter().zip(m.data())) {
                *d = v * mv;
            }
        }
        let tracked = x.requires_grad() || m.requires_grad();
        self.emit(Op::MulChannels { x: x.clone(), m: m.clone() }, xs.to_vec(), y, "mul_channels", tracked)
    }

    /// Scale each row of an m×n matrix by the matching entry of v (length m).
    pub fn mul_rows(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "mul_rows lhs")?;
        if v.shape() != [m] {
            return Err(Error::Dimension(format!(
                "mul_rows vector shape {:?}, expected [{m}]",
                v.shape()
            )));
        }
        let mut y = vec![0.0; x.numel()];
        for i in 0..m {
            let s = v.data()[i];
            for j in 0..n {
                y[i * n + j] = x.data()[i * n + j] * s;
            }
        }
        let tracked = x.requires_grad() || v.requires_grad();
        self.emit(Op::MulRows { x: x.clone(), v: v.clone() }, vec![m, n], y, "mul_rows", tracked)
    }

    /// Add a length-n vector to every row of an m×n matrix.
    pub fn add_row_vec(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "add_row_vec lhs")?;
        if v.shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_row_vec vector shape {:?}, expected [{n}]",
                v.shape()
            )));
        }
        let mut y = vec![0.0; x.numel()];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x.data()[i * n + j] + v.data()[j];
            }
        }
        let tracked = x.requires_grad() || v.requires_grad();
        self.emit(Op::AddRowVec { x: x.clone(), v: v.clone() }, vec![m, n], y, "add_row_vec", tracked)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let y: Vec<f64> = x.data().iter().map(|&v| v * c).collect();
        self.emit(Op::Scale { x: x.clone(), c }, x.shape().to_vec(), y, "scale", x.requires_grad())
    }

    /// Stack two c×H×W maps along the channel axis.
    pub fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::Dimension(format!(
                "concat_channels spatial dims disagree: {sa:?} vs {sb:?}"
            )));
        }
        let mut y = Vec::with_capacity(a.numel() + b.numel());
        y.extend_from_slice(a.data());
        y.extend_from_slice(b.data());
        let tracked = a.requires_grad() || b.requires_grad();
        self.emit(
            Op::ConcatChannels { a: a.clone(), b: b.clone() },
            vec![sa[0] + sb[0], sa[1], sa[2]],
            y,
            "concat_channels",
            tracked,
        )
    }

    /// Stack two matrices with equal width along the row axis.
    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, d) = as_matrix(a, "concat_rows lhs")?;
        let (n, d2) = as_matrix(b, "concat_rows rhs")?;
        if d != d2 {
            return Err(Error::Dimension(format!(
                "concat_rows widths disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut y = Vec::with_capacity(a.numel() + b.numel());
        y.extend_from_slice(a.data());
        y.extend_from_slice(b.data());
        let tracked = a.requires_grad() || b.requires_grad();
        self.emit(Op::ConcatRows { a: a.clone(), b: b.clone() }, vec![m + n, d], y, "concat_rows", tracked)
    }

    /// Reorder a c×H×W map into an (H·W)×c matrix: one row per spatial
    /// location, channels along the width.
    pub fn to_rows(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("to_rows expects rank 3, got {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut y = vec![0.0; x.numel()];
        for ch in 0..c {
            for p in 0..hw {
                y[p * c + ch] = x.data()[ch * hw + p];
            }
        }
        self.emit(Op::ToRows { x: x.clone() }, vec![hw, c], y, "to_rows", x.requires_grad())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                x.shape()
            )));
        }
        self.emit(Op::Reshape { x: x.clone() }, shape, x.data().to_vec(), "reshape", x.requires_grad())
    }

    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum::<f64>();
        self.emit(Op::SumAll { x: x.clone() }, vec![1], vec![s], "sum_all", x.requires_grad())
    }

    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.emit(Op::MeanAll { x: x.clone() }, vec![1], vec![s], "mean_all", x.requires_grad())
    }

    /// Binary cross-entropy over two-channel logits (channel 0 background,
    /// channel 1 foreground), averaged over pixels, computed in log space.
    /// The target must be an H×W mask of exact zeros and ones.
    pub fn bce_with_logits(&self, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
        let ls = logits.shape();
        let ts = target.shape();
        if ls.len() != 3 || ls[0] != 2 || ts.len() != 2 || ls[1] != ts[0] || ls[2] != ts[1] {
            return Err(Error::Dimension(format!(
                "bce expects logits [2,h,w] and target [h,w], got {ls:?} / {ts:?}"
            )));
        }
        if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("bce target values must be exactly 0 or 1".into()));
        }
        let pixels = ls[1] * ls[2];
        let (bg, fg) = logits.data().split_at(pixels);
        let mut p_fg = vec![0.0; pixels];
        let mut acc = 0.0;
        for p in 0..pixels {
            let (z0, z1) = (bg[p], fg[p]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let y = target.data()[p];
            acc -= y * (z1 - lse) + (1.0 - y) * (z0 - lse);
            p_fg[p] = (z1 - lse).exp();
        }
        let loss = acc / pixels as f64;
        self.emit(
            Op::Bce { logits: logits.clone(), target: target.clone(), p_fg },
            vec![1],
            vec![loss],
            "bce_with_logits",
            logits.requires_grad(),
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates parameter gradients in
    /// `params` (summing over all paths and over repeated leaf usage).
    /// Consumes the recorded tape: a second call without a fresh forward
    /// pass is an error.
    pub fn backward(&self, loss: &Tensor, params: &mut ParamSet) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        if self.spent.get() {
            return Err(Error::StaleGraph);
        }
        let root = loss.node().ok_or(Error::DetachedLoss)?;
        self.spent.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(gy) = grads[id].take() else { continue };
            match &nodes[id] {
                Op::Leaf(pid) => params.accumulate_grad(*pid, &gy),
                Op::Matmul { a, b } => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    if let Some(ai) = a.node() {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt(&gy, b.data(), m, n, k, &mut da);
                        add_grad(&mut grads[ai], &da);
                    }
                    if let Some(bi) = b.node() {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn(a.data(), &gy, m, k, n, &mut db);
                        add_grad(&mut grads[bi], &db);
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[0];
                    if let Some(ai) = a.node() {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nn(&gy, b.data(), m, n, k, &mut da);
                        add_grad(&mut grads[ai], &da);
                    }
                    if let Some(bi) = b.node() {
                        let mut db = vec![0.0; n * k];
                        kernels::matmul_tn(&gy, a.data(), m, n, k, &mut db);
                        add_grad(&mut grads[bi], &db);
                    }
                }
                Op::Conv2d { x, w, b, dims } => {
                    let mut dx = vec![0.0; x.numel()];
                    let mut dw = vec![0.0; w.numel()];
                    let mut db = vec![0.0; b.numel()];
                    kernels::conv2d_backward(x.data(), w.data(), &gy, dims, &mut dx, &mut dw, &mut db);
                    if let Some(xi) = x.node() {
                        add_grad(&mut grads[xi], &dx);
                    }
                    if let Some(wi) = w.node() {
                        add_grad(&mut grads[wi], &dw);
                    }
                    if let Some(bi) = b.node() {
                        add_grad(&mut grads[bi], &db);
                    }
                }
                Op::BilinearUp { x, factor } => {
                    if let Some(xi) = x.node() {
                        let xs = x.shape();
                        let mut dx = vec![0.0; x.numel()];
                        kernels::bilinear_up_backward(&gy, xs[0], xs[1], xs[2], *factor, &mut dx);
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::Softmax { x, y, row } => {
                    if let Some(xi) = x.node() {
                        let mut dx = vec![0.0; x.numel()];
                        for ((gyr, yr), dxr) in gy
                            .chunks_exact(*row)
                            .zip(y.chunks_exact(*row))
                            .zip(dx.chunks_exact_mut(*row))
                        {
                            let s: f64 = gyr.iter().zip(yr).map(|(g, v)| g * v).sum();
                            for j in 0..*row {
                                dxr[j] = yr[j] * (gyr[j] - s);
                            }
                        }
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                    let l = gamma.numel();
                    let g = gamma.data();
                    let mut dx = vec![0.0; x.numel()];
                    let mut dgamma = vec![0.0; l];
                    let mut dbeta = vec![0.0; l];
                    for (r, (gyr, xr)) in gy.chunks_exact(l).zip(x.data().chunks_exact(l)).enumerate() {
                        let inv = inv_std[r];
                        let mu = mean[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..l {
                            let xhat = (xr[j] - mu) * inv;
                            let dxhat = gyr[j] * g[j];
                            dgamma[j] += gyr[j] * xhat;
                            dbeta[j] += gyr[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= l as f64;
                        mean_dxhat_xhat /= l as f64;
                        for j in 0..l {
                            let xhat = (xr[j] - mu) * inv;
                            let dxhat = gyr[j] * g[j];
                            dx[r * l + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    if let Some(xi) = x.node() {
                        add_grad(&mut grads[xi], &dx);
                    }
                    if let Some(gi) = gamma.node() {
                        add_grad(&mut grads[gi], &dgamma);
                    }
                    if let Some(bi) = beta.node() {
                        add_grad(&mut grads[bi], &dbeta);
                    }
                }
                Op::NormChannels { x, norms, scale } => {
                    if let Some(xi) = x.node() {
                        let xs = x.shape();
                        let (c, hw) = (xs[0], xs[1] * xs[2]);
                        let mut dx = vec![0.0; x.numel()];
                        for p in 0..hw {
                            let n = norms[p];
                            let mut g_dot_x = 0.0;
                            for ch in 0..c {
                                g_dot_x += gy[ch * hw + p] * x.data()[ch * hw + p];
                            }
                            for ch in 0..c {
                                let xv = x.data()[ch * hw + p];
                                dx[ch * hw + p] =
                                    scale * (gy[ch * hw + p] / n - xv * g_dot_x / (n * n * n));
                            }
                        }
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::CenterChannels { x } => {
                    if let Some(xi) = x.node() {
                        let xs = x.shape();
                        let (c, hw) = (xs[0], xs[1] * xs[2]);
                        let mut dx = vec![0.0; x.numel()];
                        for ch in 0..c {
                            let gplane = &gy[ch * hw..(ch + 1) * hw];
                            let gmean = gplane.iter().sum::<f64>() / hw as f64;
                            for p in 0..hw {
                                dx[ch * hw + p] = gplane[p] - gmean;
                            }
                        }
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::Sigmoid { x, y } => {
                    if let Some(xi) = x.node() {
                        let dx: Vec<f64> =
                            gy.iter().zip(y.iter()).map(|(g, &v)| g * v * (1.0 - v)).collect();
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::Relu { x } => {
                    if let Some(xi) = x.node() {
                        let dx: Vec<f64> = gy
                            .iter()
                            .zip(x.data())
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::Add { a, b } => {
                    if let Some(ai) = a.node() {
                        add_grad(&mut grads[ai], &gy);
                    }
                    if let Some(bi) = b.node() {
                        add_grad(&mut grads[bi], &gy);
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(ai) = a.node() {
                        let da: Vec<f64> = gy.iter().zip(b.data()).map(|(g, &v)| g * v).collect();
                        add_grad(&mut grads[ai], &da);
                    }
                    if let Some(bi) = b.node() {
                        let db: Vec<f64> = gy.iter().zip(a.data()).map(|(g, &v)| g * v).collect();
                        add_grad(&mut grads[bi], &db);
                    }
                }
                Op::MulChannels { x, m } => {
                    let hw = m.numel();
                    let c = x.shape()[0];
                    if let Some(xi) = x.node() {
                        let mut dx = vec![0.0; x.numel()];
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[ch * hw + p] = gy[ch * hw + p] * m.data()[p];
                            }
                        }
                        add_grad(&mut grads[xi], &dx);
                    }
                    if let Some(mi) = m.node() {
                        let mut dm = vec![0.0; hw];
                        for ch in 0..c {
                            for p in 0..hw {
                                dm[p] += gy[ch * hw + p] * x.data()[ch * hw + p];
                            }
                        }
                        add_grad(&mut grads[mi], &dm);
                    }
                }
                Op::MulRows { x, v } => {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    if let Some(xi) = x.node() {
                        let mut dx = vec![0.0; x.numel()];
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = gy[i * n + j] * v.data()[i];
                            }
                        }
                        add_grad(&mut grads[xi], &dx);
                    }
                    if let Some(vi) = v.node() {
                        let mut dv = vec![0.0; m];
                        for i in 0..m {
                            for j in 0..n {
                                dv[i] += gy[i * n + j] * x.data()[i * n + j];
                            }
                        }
                        add_grad(&mut grads[vi], &dv);
                    }
                }
                Op::AddRowVec { x, v } => {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    if let Some(xi) = x.node() {
                        add_grad(&mut grads[xi], &gy);
                    }
                    if let Some(vi) = v.node() {
                        let mut dv = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                dv[j] += gy[i * n + j];
                            }
                        }
                        add_grad(&mut grads[vi], &dv);
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(xi) = x.node() {
                        let dx: Vec<f64> = gy.iter().map(|g| g * c).collect();
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::ConcatChannels { a, b } | Op::ConcatRows { a, b } => {
                    let na = a.numel();
                    if let Some(ai) = a.node() {
                        add_grad(&mut grads[ai], &gy[..na]);
                    }
                    if let Some(bi) = b.node() {
                        add_grad(&mut grads[bi], &gy[na..]);
                    }
                }
                Op::ToRows { x } => {
                    if let Some(xi) = x.node() {
                        let xs = x.shape();
                        let (c, hw) = (xs[0], xs[1] * xs[2]);
                        let mut dx = vec![0.0; x.numel()];
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[ch * hw + p] = gy[p * c + ch];
                            }
                        }
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::Reshape { x } => {
                    if let Some(xi) = x.node() {
                        add_grad(&mut grads[xi], &gy);
                    }
                }
                Op::SumAll { x } => {
                    if let Some(xi) = x.node() {
                        let dx = vec![gy[0]; x.numel()];
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::MeanAll { x } => {
                    if let Some(xi) = x.node() {
                        let dx = vec![gy[0] / x.numel() as f64; x.numel()];
                        add_grad(&mut grads[xi], &dx);
                    }
                }
                Op::Bce { logits, target, p_fg } => {
                    if let Some(li) = logits.node() {
                        let pixels = p_fg.len();
                        let scale = gy[0] / pixels as f64;
                        let mut dl = vec![0.0; logits.numel()];
                        for p in 0..pixels {
                            let y = target.data()[p];
                            let g = scale * (p_fg[p] - y);
                            dl[pixels + p] = g; // foreground channel
                            dl[p] = -g; // background channel
                        }
                        add_grad(&mut grads[li], &dl);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_grad(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn as_matrix(t: &Tensor, ctx: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("{ctx}: expected rank 2, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn last_dim(t: &Tensor, ctx: &str) -> Result<usize> {
    match t.shape().last() {
        Some(&n) if n >= 1 => Ok(n),
        _ => Err(Error::Dimension(format!("{ctx}: empty shape"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, ctx: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{ctx}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(ps: &mut ParamSet, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        ps.add(name, shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let g = Graph::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.matmul(&eye, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let g = Graph::new();
        let a = Tensor::ones(vec![2, 3]);
        let b = Tensor::ones(vec![2, 2]);
        assert!(matches!(g.matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_single_and_shifted() {
        let g = Graph::new();
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax_lastdim(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = Tensor::new(vec![1], vec![-7.3]).unwrap();
        assert_eq!(g.softmax_lastdim(&x).unwrap().data(), &[1.0]);
        // large shifted inputs stay finite and normalized
        let x = Tensor::new(vec![3], vec![1000.0, 1000.5, 999.0]).unwrap();
        let y = g.softmax_lastdim(&x).unwrap();
        let s: f64 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        let xs = Tensor::new(vec![3], vec![0.0, 0.5, -1.0]).unwrap();
        let ys = g.softmax_lastdim(&xs).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-9, "shift invariance violated");
        }
    }

    #[test]
    fn layer_norm_constant_slice_and_two_point() {
        let g = Graph::new();
        let gamma = Tensor::ones(vec![4]);
        let beta = Tensor::zeros(vec![4]);
        let x = Tensor::new(vec![4], vec![5.0; 4]).unwrap();
        let y = g.layer_norm(&x, &gamma, &beta).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9, "constant slice should normalize to zero");
        }
        let gamma = Tensor::ones(vec![2]);
        let beta = Tensor::zeros(vec![2]);
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let y = g.layer_norm(&x, &gamma, &beta).unwrap();
        let a = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - a).abs() < 1e-12);
        assert!((y.data()[1] + a).abs() < 1e-12);
    }

    #[test]
    fn relu_and_mul_and_concat_definitions() {
        let g = Graph::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(g.relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);

        let a = Tensor::new(vec![2], vec![3.0, -4.0]).unwrap();
        let z = Tensor::zeros(vec![2]);
        assert_eq!(g.mul(&a, &z).unwrap().data(), &[0.0, 0.0]);

        let m1 = Tensor::ones(vec![3, 2, 2]);
        let m2 = Tensor::new(vec![5, 2, 2], vec![2.0; 20]).unwrap();
        let c = g.concat_channels(&m1, &m2).unwrap();
        assert_eq!(c.shape(), &[8, 2, 2]);
        assert_eq!(&c.data()[..12], &[1.0; 12]);
        assert_eq!(&c.data()[12..], &[2.0; 20]);
    }

    #[test]
    fn conv2d_pointwise_scale_and_hand_sum() {
        let g = Graph::new();
        let x = Tensor::ones(vec![1, 3, 3]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = g.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        for v in y.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }

        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones(vec![1, 1, 2, 2]);
        let y = g.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.data()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_rejects_undersized_input() {
        let g = Graph::new();
        let x = Tensor::ones(vec![1, 2, 2]);
        let w = Tensor::ones(vec![1, 1, 5, 5]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(g.conv2d(&x, &w, &b, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn upsample_constant_and_degenerate_grid() {
        let g = Graph::new();
        let x = Tensor::new(vec![1, 2, 2], vec![7.0; 4]).unwrap();
        let y = g.upsample_bilinear(&x, 2).unwrap();
        for v in y.data() {
            assert!((v - 7.0).abs() < 1e-12);
        }
        let x = Tensor::new(vec![1, 1, 1], vec![3.25]).unwrap();
        let y = g.upsample_bilinear(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        for v in y.data() {
            assert_eq!(*v, 3.25);
        }
    }

    #[test]
    fn upsample_columns_monotone_for_ramp() {
        let g = Graph::new();
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = g.upsample_bilinear(&x, 2).unwrap();
        for r in 0..4 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            for j in 1..4 {
                assert!(row[j] >= row[j - 1] - 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_x() {
        let mut ps = ParamSet::new();
        let id = param(&mut ps, "x", vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let g = Graph::new();
        let x = g.leaf(&ps, id);
        let loss = g.sum_all(&x).unwrap();
        g.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        ps.clear_grads();
        let g = Graph::new();
        let x = g.leaf(&ps, id);
        let sq = g.mul(&x, &x).unwrap();
        let half = g.scale(&sq, 0.5).unwrap();
        let loss = g.sum_all(&half).unwrap();
        g.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).unwrap(), ps.value(id));
    }

    #[test]
    fn backward_twice_is_stale_graph_error() {
        let mut ps = ParamSet::new();
        let id = param(&mut ps, "x", vec![2], vec![1.0, 2.0]);
        let g = Graph::new();
        let x = g.leaf(&ps, id);
        let loss = g.sum_all(&x).unwrap();
        g.backward(&loss, &mut ps).unwrap();
        assert!(matches!(g.backward(&loss, &mut ps), Err(Error::StaleGraph)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_loss() {
        let mut ps = ParamSet::new();
        let id = param(&mut ps, "x", vec![2], vec![1.0, 2.0]);
        let g = Graph::new();
        let x = g.leaf(&ps, id);
        assert!(matches!(g.backward(&x, &mut ps), Err(Error::NonScalarLoss(_))));
        let c = Tensor::scalar(1.0).unwrap();
        assert!(matches!(g.backward(&c, &mut ps), Err(Error::DetachedLoss)));
    }

    #[test]
    fn shared_subexpression_grads_sum() {
        // loss = sum(y + y) with y = 2x  =>  dloss/dx = 4 per element.
        let mut ps = ParamSet::new();
        let id = param(&mut ps, "x", vec![3], vec![0.3, -1.0, 2.0]);
        let g = Graph::new();
        let x = g.leaf(&ps, id);
        let y = g.scale(&x, 2.0).unwrap();
        let z = g.add(&y, &y).unwrap();
        let loss = g.sum_all(&z).unwrap();
        g.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn param_used_twice_accumulates() {
        let mut ps = ParamSet::new();
        let id = param(&mut ps, "x", vec![2], vec![1.5, -0.5]);
        let g = Graph::new();
        let x1 = g.leaf(&ps, id);
        let x2 = g.leaf(&ps, id);
        let s = g.add(&x1, &x2).unwrap();
        let loss = g.sum_all(&s).unwrap();
        g.backward(&loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn bce_equal_logits_is_ln2_and_confident_is_tiny() {
        let g = Graph::new();
        let logits = Tensor::zeros(vec![2, 2, 2]);
        let target = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = g.bce_with_logits(&logits, &target).unwrap();
        assert!((loss.item().unwrap() - (2.0f64).ln()).abs() < 1e-12);

        let mut data = vec![0.0; 8];
        for p in 0..4 {
            let y = target.data()[p];
            data[4 + p] = if y == 1.0 { 20.0 } else { -20.0 };
            data[p] = if y == 1.0 { -20.0 } else { 20.0 };
        }
        let logits = Tensor::new(vec![2, 2, 2], data).unwrap();
        let loss = g.bce_with_logits(&logits, &target).unwrap();
        assert!(loss.item().unwrap() < 1e-6);
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let g = Graph::new();
        let logits = Tensor::zeros(vec![2, 1, 2]);
        let target = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(g.bce_with_logits(&logits, &target), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_only_ops_are_not_recorded() {
        let g = Graph::new();
        let a = Tensor::ones(vec![2, 2]);
        let b = Tensor::ones(vec![2, 2]);
        let c = g.matmul(&a, &b).unwrap();
        assert!(!c.requires_grad());
        assert!(g.is_empty());
    }
}
