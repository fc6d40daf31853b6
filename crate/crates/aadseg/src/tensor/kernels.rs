//! Raw f64 compute kernels shared by the forward ops and their adjoints.
//!
//! Every kernel uses a fixed, documented summation order so that repeated
//! runs are bitwise identical. `matmul_nn` accumulates over the inner index
//! in ascending order per output element, which matches the naive
//! triple-loop definition exactly.

use std::cell::Cell;

thread_local! {
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Add `n` multiply-accumulates to the thread-local cost counter.
#[inline]
pub fn count_macs(n: u64) {
    MAC_COUNT.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Reset the thread-local cost counter to zero.
pub fn reset_macs() {
    MAC_COUNT.with(|c| c.set(0));
}

/// Read the thread-local cost counter.
///
/// The counter is a FLOP proxy: it tracks multiply-accumulates performed by
/// the matmul, convolution and interpolation kernels, which dominate the
/// arithmetic of a forward pass. Cheap elementwise ops are not counted.
pub fn read_macs() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

/// C[m,n] = A[m,k] · B[k,n]. Per output element the inner index ascends,
/// matching the naive triple loop bit for bit.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    count_macs((m * k * n) as u64);
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ, i.e. rows of A dotted with rows of B.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    count_macs((m * k * n) as u64);
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (r, &av) in arow.iter().enumerate() {
            let crow = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    count_macs((m * k * n) as u64);
}

/// Four-lane dot product. Deterministic: the lane split depends only on the
/// slice length.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for t in 0..chunks {
        let i = 4 * t;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 2d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// Output size follows the floor rule `(H + 2·pad − k) / stride + 1`
    /// (integer division). A kernel wider than the padded input has no
    /// valid placement and is rejected.
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let eh = h + 2 * pad;
        let ew = w + 2 * pad;
        if eh < kh || ew < kw {
            return None;
        }
        Some(ConvDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (eh - kh) / stride + 1,
            ow: (ew - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold `x` (c_in×h×w) into a (c_in·kh·kw) × (oh·ow) patch matrix.
/// Out-of-bounds taps read as zero.
pub fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), d.patch_len() * d.out_spatial());
    let spatial = d.out_spatial();
    cols.fill(0.0);
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.oh {
                    let sy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * d.w..(sy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let sx = (ox * d.stride + kx) as isize - d.pad as isize;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        dst[oy * d.ow + ox] = src_row[sx as usize];
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input layout (adjoint of
/// `im2col`). Accumulates into `dx`.
pub fn col2im(dcols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), d.c_in * d.h * d.w);
    let spatial = d.out_spatial();
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &dcols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.oh {
                    let sy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let sx = (ox * d.stride + kx) as isize - d.pad as isize;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        dx[(c * d.h + sy as usize) * d.w + sx as usize] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: weight (c_out×c_in×kh×kw), bias (c_out).
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, out: &mut [f64]) {
    let spatial = d.out_spatial();
    let mut cols = vec![0.0; d.patch_len() * spatial];
    im2col(x, d, &mut cols);
    matmul_nn(w, &cols, d.c_out, d.patch_len(), spatial, out);
    for c in 0..d.c_out {
        let bias = b[c];
        for v in &mut out[c * spatial..(c + 1) * spatial] {
            *v += bias;
        }
    }
    count_macs((d.c_out * spatial) as u64);
}

/// Backward pass of `conv2d_forward`: accumulates into dx, dw, db.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: &ConvDims,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let spatial = d.out_spatial();
    let patch = d.patch_len();
    let mut cols = vec![0.0; patch * spatial];
    im2col(x, d, &mut cols);

    // dW = dY · colsᵀ
    let mut dw_local = vec![0.0; d.c_out * patch];
    matmul_nt(dy, &cols, d.c_out, spatial, patch, &mut dw_local);
    for (acc, g) in dw.iter_mut().zip(dw_local.iter()) {
        *acc += g;
    }

    // dX = fold(Wᵀ · dY)
    let mut dcols = vec![0.0; patch * spatial];
    matmul_tn(w, dy, d.c_out, patch, spatial, &mut dcols);
    col2im(&dcols, d, dx);

    for c in 0..d.c_out {
        let mut s = 0.0;
        for v in &dy[c * spatial..(c + 1) * spatial] {
            s += v;
        }
        db[c] += s;
    }
}

/// One bilinear tap: output pixel, source corners and interpolation weights.
#[inline]
fn bilinear_taps(o: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    // Half-pixel-center sampling: src = (o + 0.5)/f − 0.5, clamped to the
    // grid. Past the last center the two taps coincide, so no right clamp
    // of the fraction is needed.
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let lo = src.floor();
    let frac = src - lo;
    let i0 = (lo as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, frac)
}

/// Bilinear upsample of a c×h×w map by an integer factor.
pub fn bilinear_up_forward(x: &[f64], c: usize, h: usize, w: usize, factor: usize, out: &mut [f64]) {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(out.len(), c * oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oy, factor, h);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ox, factor, w);
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(ch * oh + oy) * ow + ox] = top + fy * (bot - top);
            }
        }
    }
    count_macs((c * oh * ow * 4) as u64);
}

/// Adjoint of `bilinear_up_forward`; accumulates into dx.
pub fn bilinear_up_backward(dy: &[f64], c: usize, h: usize, w: usize, factor: usize, dx: &mut [f64]) {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(dy.len(), c * oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oy, factor, h);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ox, factor, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let g = dy[(ch * oh + oy) * ow + ox];
                let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                plane[y0 * w + x0] += w00 * g;
                plane[y0 * w + x1] += w01 * g;
                plane[y1 * w + x0] += w10 * g;
                plane[y1 * w + x1] += w11 * g;
            }
        }
    }
}

/// Returns true when every value is finite. `v * 0.0` is NaN for NaN and
/// ±Inf inputs, so a zero sum certifies the whole slice.
pub fn all_finite(data: &[f64]) -> bool {
    let mut acc = 0.0f64;
    for v in data {
        acc += v * 0.0;
    }
    acc == 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_matches_naive_order_exactly() {
        let m = 3;
        let k = 5;
        let n = 4;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.11 + 0.5).collect();
        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert_eq!(s, c[i * n + j], "order-exact mismatch at ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let bt = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3 interpreted as Bᵀ
        let mut c_nt = vec![0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut c_nt);
        // B is 3x2 (transpose of bt)
        let b = [1.0, 2.0, 0.5, 0.0, -1.0, 3.0];
        let mut c_nn = vec![0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut c_nn);
        for (x, y) in c_nt.iter().zip(c_nn.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut c_tn = vec![0.0; 9];
        matmul_tn(&a, &a, 2, 3, 3, &mut c_tn); // AᵀA, symmetric
        for i in 0..3 {
            for j in 0..3 {
                assert!((c_tn[i * 3 + j] - c_tn[j * 3 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_dims_floor_rule_and_undersized_input() {
        // floor semantics: the last partial window is dropped
        let d = ConvDims::new(1, 5, 5, 1, 2, 2, 2, 0).unwrap();
        assert_eq!((d.oh, d.ow), (2, 2));
        // the canonical stride-2 3×3 pad-1 halving
        let d = ConvDims::new(1, 64, 64, 1, 3, 3, 2, 1).unwrap();
        assert_eq!((d.oh, d.ow), (32, 32));
        // kernel larger than the padded input has no placement
        assert!(ConvDims::new(1, 2, 2, 1, 5, 5, 1, 1).is_none());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let d = ConvDims::new(2, 5, 5, 3, 3, 3, 2, 1).unwrap();
        let xn = d.c_in * d.h * d.w;
        let cn = d.patch_len() * d.out_spatial();
        let x: Vec<f64> = (0..xn).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..cn).map(|i| ((i * 53 % 7) as f64) - 3.0).collect();
        let mut cols = vec![0.0; cn];
        im2col(&x, &d, &mut cols);
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut xadj = vec![0.0; xn];
        col2im(&y, &d, &mut xadj);
        let rhs: f64 = x.iter().zip(xadj.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = vec![7.0; 6];
        let mut out = vec![0.0; 24];
        bilinear_up_forward(&x, 1, 2, 3, 2, &mut out);
        for v in out {
            assert!((v - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finiteness_probe() {
        assert!(all_finite(&[0.0, -1.5, 3e300]));
        assert!(!all_finite(&[0.0, f64::NAN]));
        assert!(!all_finite(&[f64::INFINITY]));
        assert!(!all_finite(&[f64::NEG_INFINITY, 1.0]));
    }

    #[test]
    fn mac_counter_tracks_matmul() {
        reset_macs();
        let a = vec![1.0; 6];
        let b = vec![1.0; 6];
        let mut c = vec![0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut c);
        assert_eq!(read_macs(), 12);
    }
}
