//! Batched NCHW kernels with hand-written backward passes.
//!
//! Every kernel parallelizes over batch items and reduces per-item partial
//! gradients in item order, so results do not depend on thread scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }
}

/// `c = a · b + beta · c` on (possibly strided) views.
fn gemm(a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayViewMut2<f64>, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // The packed kernels only fill well when the row count is large.
    if a.nrows() < b.ncols() {
        general_mat_mul(1.0, &b.t(), &a.t(), beta, &mut c.reversed_axes());
    } else {
        let mut c = c;
        general_mat_mul(1.0, &a, &b, beta, &mut c);
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix shape")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix shape")
}

/// Columns `[lo, hi)` of a row-major `rows × cols` matrix.
fn col_block(data: &[f64], rows: usize, cols: usize, lo: usize, hi: usize) -> ArrayView2<'_, f64> {
    view(data, rows, cols).slice_move(ndarray::s![.., lo..hi])
}

/// Output rows processed per im2col tile; keeps the unfolded patch block cache-resident.
fn tile_rows(patch: usize, w: usize) -> usize {
    (32_768 / (patch * w).max(1)).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    /// 1 or 3.
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// Unfolds one `[c, h, w]` item into `[c*9, h*w]` columns for a 3×3 kernel
/// with the given dilation and size-preserving zero padding.
fn im2col3(x: &[f64], c: usize, h: usize, w: usize, d: usize, rows: (usize, usize), cols: &mut [f64]) {
    let hw = h * w;
    let (r0, r1) = rows;
    let tw = (r1 - r0) * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            let dy = (ky as isize - 1) * d as isize;
            for kx in 0..3 {
                let dx = (kx as isize - 1) * d as isize;
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * tw..][..tw];
                let (x_lo, x_hi) = valid_range(w, dx);
                for y in r0..r1 {
                    let dst = &mut row[(y - r0) * w..(y - r0 + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let sy = sy as usize;
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[sy * w + s0..sy * w + s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Inverse of [`im2col3`]: scatter-adds columns back into an item gradient.
fn col2im3(cols: &[f64], c: usize, h: usize, w: usize, d: usize, rows: (usize, usize), dx_out: &mut [f64]) {
    let hw = h * w;
    let (r0, r1) = rows;
    let tw = (r1 - r0) * w;
    for ci in 0..c {
        let dst = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            let dy = (ky as isize - 1) * d as isize;
            for kx in 0..3 {
                let dxo = (kx as isize - 1) * d as isize;
                let row = &cols[((ci * 9) + ky * 3 + kx) * tw..][..tw];
                let (x_lo, x_hi) = valid_range(w, dxo);
                if x_lo >= x_hi {
                    continue;
                }
                for y in r0..r1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let s0 = (x_lo as isize + dxo) as usize;
                    let d_row = &mut dst[sy * w + s0..sy * w + s0 + (x_hi - x_lo)];
                    let yy = y - r0;
                    for (o, v) in d_row.iter_mut().zip(&row[yy * w + x_lo..yy * w + x_hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Output columns `x` for which `x + offset` lies inside `[0, w)`.
fn valid_range(w: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (w as isize - offset).clamp(0, w as isize) as usize;
    (lo.min(w), hi)
}

/// Direct 3×3 kernels for convolutions with few channels, where packing
/// overhead dominates a general matrix product. Inputs are copied into a
/// zero-bordered plane so every tap is in range, and each output block of
/// `BLOCK` channels × `LANES` columns is accumulated in registers.
mod direct {
    use super::ConvGeom;

    const LANES: usize = 8;
    const BLOCK: usize = 4;

    /// Zero-bordered copy of `[c, h, w]` with `d` rows/columns of padding and
    /// rows widened to a multiple of `LANES`.
    pub(super) struct Padded {
        pub data: Vec<f64>,
        pub row: usize,
        pub rows: usize,
    }

    /// Channels beyond `c` (up to `c_alloc`) stay zero.
    #[inline(always)]
    pub(super) fn pad(x: &[f64], c: usize, c_alloc: usize, h: usize, w: usize, d: usize) -> Padded {
        let row = w.div_ceil(LANES) * LANES + 2 * d;
        let rows = h + 2 * d;
        let mut data = vec![0.0; c_alloc * rows * row];
        for ci in 0..c {
            for y in 0..h {
                let dst = (ci * rows + y + d) * row + d;
                data[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
            }
        }
        Padded { data, row, rows }
    }

    /// `out[co] = Σ_ci Σ_tap wt[co][ci][tap] · shift(x[ci])`; `weight` is `[cout, cin, 9]`.
    #[inline(always)]
    pub(super) fn forward_impl(x: &[f64], weight: &[f64], g: ConvGeom, h: usize, w: usize, out: &mut [f64]) {
        let d = g.dilation;
        let p = pad(x, g.cin, g.cin, h, w, d);
        let hw = h * w;
        for co0 in (0..g.cout).step_by(BLOCK) {
            let nb = BLOCK.min(g.cout - co0);
            // Weights regrouped as [ci][tap][block].
            let mut wb = vec![0.0; g.cin * 9 * BLOCK];
            for b in 0..nb {
                for ci in 0..g.cin {
                    for t in 0..9 {
                        wb[(ci * 9 + t) * BLOCK + b] = weight[((co0 + b) * g.cin + ci) * 9 + t];
                    }
                }
            }
            for y in 0..h {
                for xc in (0..w).step_by(LANES) {
                    let mut acc = [[0.0f64; LANES]; BLOCK];
                    for ci in 0..g.cin {
                        for ky in 0..3 {
                            let base = (ci * p.rows + y + ky * d) * p.row + xc;
                            for kx in 0..3 {
                                let s = &p.data[base + kx * d..base + kx * d + LANES];
                                let t = (ci * 9 + ky * 3 + kx) * BLOCK;
                                let wv = &wb[t..t + BLOCK];
                                for b in 0..BLOCK {
                                    for l in 0..LANES {
                                        acc[b][l] += wv[b] * s[l];
                                    }
                                }
                            }
                        }
                    }
                    let n = LANES.min(w - xc);
                    for b in 0..nb {
                        let o = (co0 + b) * hw + y * w + xc;
                        out[o..o + n].copy_from_slice(&acc[b][..n]);
                    }
                }
            }
        }
    }

    /// `dw[co][ci][tap] += Σ dout[co] · shift(x[ci])`.
    #[inline(always)]
    pub(super) fn backward_weight_impl(x: &[f64], dout: &[f64], g: ConvGeom, h: usize, w: usize, dw: &mut [f64]) {
        let d = g.dilation;
        let p = pad(x, g.cin, g.cin, h, w, d);
        // dout rows widened with zeros to whole lanes.
        let dp = pad(dout, g.cout, g.cout.div_ceil(BLOCK) * BLOCK, h, w, 0);
        for co0 in (0..g.cout).step_by(BLOCK) {
            let nb = BLOCK.min(g.cout - co0);
            for ci in 0..g.cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = [[0.0f64; LANES]; BLOCK];
                        for y in 0..h {
                            let base = (ci * p.rows + y + ky * d) * p.row + kx * d;
                            for xc in (0..dp.row).step_by(LANES) {
                                let s = &p.data[base + xc..base + xc + LANES];
                                for b in 0..BLOCK {
                                    let o = ((co0 + b) * dp.rows + y) * dp.row + xc;
                                    let dv = &dp.data[o..o + LANES];
                                    for l in 0..LANES {
                                        acc[b][l] += dv[l] * s[l];
                                    }
                                }
                            }
                        }
                        for b in 0..nb {
                            dw[((co0 + b) * g.cin + ci) * 9 + ky * 3 + kx] += acc[b].iter().sum::<f64>();
                        }
                    }
                }
            }
        }
    }

    /// Input gradient as a forward pass over `dout` with the kernel flipped
    /// and the channel roles swapped.
    #[inline(always)]
    pub(super) fn backward_input_impl(dout: &[f64], weight: &[f64], g: ConvGeom, h: usize, w: usize, dx_out: &mut [f64]) {
        let mut flipped = vec![0.0; weight.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for t in 0..9 {
                    flipped[(ci * g.cout + co) * 9 + (8 - t)] = weight[(co * g.cin + ci) * 9 + t];
                }
            }
        }
        let gt = ConvGeom { cin: g.cout, cout: g.cin, kernel: 3, dilation: g.dilation };
        forward_impl(dout, &flipped, gt, h, w, dx_out);
    }
}

/// Dispatches to an AVX2/FMA build of the same code when the CPU supports it.
macro_rules! dispatch {
    ($name:ident, $imp:ident, $avx:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx($($arg: $ty),*) {
            direct::$imp($($arg),*)
        }

        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { $avx($($arg),*) };
            }
            direct::$imp($($arg),*)
        }
    };
}

dispatch!(direct_forward, forward_impl, forward_avx2,
    (x: &[f64], weight: &[f64], g: ConvGeom, h: usize, w: usize, out: &mut [f64]));
dispatch!(direct_backward_weight, backward_weight_impl, backward_weight_avx2,
    (x: &[f64], dout: &[f64], g: ConvGeom, h: usize, w: usize, dw: &mut [f64]));
dispatch!(direct_backward_input, backward_input_impl, backward_input_avx2,
    (dout: &[f64], weight: &[f64], g: ConvGeom, h: usize, w: usize, dx_out: &mut [f64]));

/// Small 3×3 convolutions go through the direct kernels.
fn use_direct(g: ConvGeom) -> bool {
    g.kernel == 3 && g.cin * g.cout <= DIRECT_MAX_PAIRS
}

const DIRECT_MAX_PAIRS: usize = 64;

pub fn conv_forward(x: &Tensor, weight: &[f64], g: ConvGeom) -> Tensor {
    let [b, c, h, w] = x.shape;
    debug_assert_eq!(c, g.cin);
    let hw = h * w;
    let k = g.patch();
    let mut out = Tensor::zeros([b, g.cout, h, w]);
    let wm = view(weight, g.cout, k);
    out.data
        .par_chunks_mut(g.cout * hw)
        .zip(x.data.par_chunks(c * hw))
        .for_each(|(o, xi)| {
            if g.kernel == 1 {
                gemm(wm, view(xi, c, hw), view_mut(o, g.cout, hw), false);
                return;
            }
            if use_direct(g) {
                direct_forward(xi, weight, g, h, w, o);
                return;
            }
            let step = tile_rows(k, w);
            let mut cols = vec![0.0; k * step * w];
            let mut om = view_mut(o, g.cout, hw);
            for r0 in (0..h).step_by(step) {
                let r1 = (r0 + step).min(h);
                let tw = (r1 - r0) * w;
                im2col3(xi, c, h, w, g.dilation, (r0, r1), &mut cols[..k * tw]);
                let dst = om.slice_mut(ndarray::s![.., r0 * w..r1 * w]);
                gemm(wm, view(&cols[..k * tw], k, tw), dst, false);
            }
        });
    out
}

/// Returns the weight gradient and, when requested, the input gradient.
pub fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    g: ConvGeom,
    dout: &Tensor,
    need_dx: bool,
) -> (Vec<f64>, Option<Tensor>) {
    let [b, c, h, w] = x.shape;
    let hw = h * w;
    let k = g.patch();
    let wm = view(weight, g.cout, k);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
    let mut partials: Vec<Vec<f64>> = vec![Vec::new(); b];
    let per_item = |xi: &[f64], di: &[f64], mut dxi: Option<&mut [f64]>| -> Vec<f64> {
        let mut dw = vec![0.0; g.weight_len()];
        if g.kernel == 1 {
            gemm(view(di, g.cout, hw), view(xi, c, hw).t(), view_mut(&mut dw, g.cout, c), false);
            if let Some(dxi) = dxi {
                gemm(wm.t(), view(di, g.cout, hw), view_mut(dxi, c, hw), false);
            }
            return dw;
        }
        if use_direct(g) {
            direct_backward_weight(xi, di, g, h, w, &mut dw);
            if let Some(dxi) = dxi {
                direct_backward_input(di, weight, g, h, w, dxi);
            }
            return dw;
        }
        let step = tile_rows(k, w);
        let mut cols = vec![0.0; k * step * w];
        for r0 in (0..h).step_by(step) {
            let r1 = (r0 + step).min(h);
            let tw = (r1 - r0) * w;
            let d_tile = col_block(di, g.cout, hw, r0 * w, r1 * w);
            im2col3(xi, c, h, w, g.dilation, (r0, r1), &mut cols[..k * tw]);
            gemm(d_tile, view(&cols[..k * tw], k, tw).t(), view_mut(&mut dw, g.cout, k), r0 > 0);
            if let Some(dxi) = dxi.as_deref_mut() {
                gemm(wm.t(), d_tile, view_mut(&mut cols[..k * tw], k, tw), false);
                col2im3(&cols[..k * tw], c, h, w, g.dilation, (r0, r1), dxi);
            }
        }
        dw
    };
    let xs = x.data.par_chunks(c * hw);
    let ds = dout.data.par_chunks(g.cout * hw);
    match dx.as_mut() {
        Some(dx) => partials
            .par_iter_mut()
            .zip(xs.zip(ds).zip(dx.data.par_chunks_mut(c * hw)))
            .for_each(|(p, ((xi, di), dxi))| *p = per_item(xi, di, Some(dxi))),
        None => partials
            .par_iter_mut()
            .zip(xs.zip(ds))
            .for_each(|(p, (xi, di))| *p = per_item(xi, di, None)),
    }
    let mut dw = vec![0.0; g.weight_len()];
    for p in &partials {
        for (a, v) in dw.iter_mut().zip(p) {
            *a += v;
        }
    }
    (dw, dx)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

/// Batch statistics observed in training mode: per-channel mean and unbiased variance.
#[derive(Clone, Debug, Default)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn bn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    training: bool,
) -> (Tensor, BnCache, Option<BnStats>) {
    let c = x.shape[1];
    let hw = x.plane();
    let (mean, inv_std, stats) = if training {
        let m = (x.batch() * hw) as f64;
        let mut sum = vec![0.0; c];
        for (i, plane) in x.data.chunks_exact(hw).enumerate() {
            sum[i % c] += plane.iter().sum::<f64>();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
        let mut ss = vec![0.0; c];
        for (i, plane) in x.data.chunks_exact(hw).enumerate() {
            let mu = mean[i % c];
            ss[i % c] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        let var: Vec<f64> = ss.iter().map(|s| s / m).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let stats = BnStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * unbiased).collect(),
        };
        (mean, inv_std, Some(stats))
    } else {
        let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        (running_mean.to_vec(), inv_std, None)
    };
    let mut xhat = Tensor::zeros(x.shape);
    let mut y = Tensor::zeros(x.shape);
    for (i, ((src, xh), dst)) in x
        .data
        .chunks_exact(hw)
        .zip(xhat.data.chunks_exact_mut(hw))
        .zip(y.data.chunks_exact_mut(hw))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for ((v, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
            *h = (v - mu) * is;
            *o = ga * *h + be;
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            training,
        },
        stats,
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(dy: &Tensor, cache: &BnCache, gamma: &[f64]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = dy.shape[1];
    let hw = dy.plane();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (d, xh)) in dy
        .data
        .chunks_exact(hw)
        .zip(cache.xhat.data.chunks_exact(hw))
        .enumerate()
    {
        dbeta[i % c] += d.iter().sum::<f64>();
        dgamma[i % c] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut dx = Tensor::zeros(dy.shape);
    let m = (dy.batch() * hw) as f64;
    for (i, ((d, xh), out)) in dy
        .data
        .chunks_exact(hw)
        .zip(cache.xhat.data.chunks_exact(hw))
        .zip(dx.data.chunks_exact_mut(hw))
        .enumerate()
    {
        let ch = i % c;
        let scale = gamma[ch] * cache.inv_std[ch];
        if cache.training {
            let (db, dg) = (dbeta[ch] / m, dgamma[ch] / m);
            for ((o, g), h) in out.iter_mut().zip(d).zip(xh) {
                *o = scale * (g - db - h * dg);
            }
        } else {
            for (o, g) in out.iter_mut().zip(d) {
                *o = scale * g;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `d` by the positive entries of a ReLU output.
pub fn relu_backward_inplace(d: &mut Tensor, relu_out: &Tensor) {
    for (g, o) in d.data.iter_mut().zip(&relu_out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2, odd trailing rows/columns dropped.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [b, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut arg = vec![0u32; out.data.len()];
    for ((src, dst), am) in x
        .data
        .chunks_exact(h * w)
        .zip(out.data.chunks_exact_mut(oh * ow))
        .zip(arg.chunks_exact_mut(oh * ow))
    {
        for oy in 0..oh {
            let top = &src[2 * oy * w..(2 * oy + 1) * w];
            let bot = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            let arow = &mut am[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                let x0 = 2 * ox;
                let mut best = top[x0];
                let mut at = 2 * oy * w + x0;
                if top[x0 + 1] > best {
                    best = top[x0 + 1];
                    at += 1;
                }
                if bot[x0] > best {
                    best = bot[x0];
                    at = (2 * oy + 1) * w + x0;
                }
                if bot[x0 + 1] > best {
                    best = bot[x0 + 1];
                    at = (2 * oy + 1) * w + x0 + 1;
                }
                drow[ox] = best;
                arow[ox] = at as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dout: &Tensor, arg: &[u32], in_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let in_plane = in_shape[2] * in_shape[3];
    let out_plane = dout.plane();
    for (o, (&d, &a)) in dout.data.iter().zip(arg).enumerate() {
        let plane = o / out_plane;
        dx.data[plane * in_plane + a as usize] += d;
    }
    dx
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &[f64], g: ConvGeom) -> Tensor {
        let [b, c, h, w] = x.shape;
        let mut out = Tensor::zeros([b, g.cout, h, w]);
        let k = g.kernel as isize;
        let r = k / 2;
        for bi in 0..b {
            for co in 0..g.cout {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + (ky - r) * g.dilation as isize;
                                    let sx = xx + (kx - r) * g.dilation as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((co * c + ci) as isize * k + ky) * k + kx;
                                    let xi = ((bi * c + ci) * h + sy as usize) * w + sx as usize;
                                    s += wt[wi as usize] * x.data[xi];
                                }
                            }
                        }
                        out.data[((bi * g.cout + co) * h + y as usize) * w + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * a).sin() * 1.7).fract()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let cases = [(3, 4, 3, 1), (3, 4, 3, 2), (3, 4, 3, 4), (3, 4, 1, 1), (2, 6, 3, 1), (9, 10, 3, 2), (9, 10, 1, 1)];
        for (cin, cout, kernel, dilation) in cases {
            let g = ConvGeom { cin, cout, kernel, dilation };
            let (h, w) = (11, 19);
            let x = Tensor::from_vec([2, cin, h, w], ramp(2 * cin * h * w, 0.37));
            let wt = ramp(g.weight_len(), 0.91);
            let fast = conv_forward(&x, &wt, g);
            let slow = naive_conv(&x, &wt, g);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), d> must equal <x, conv^T(d)> and <w, dW>.
        let g = ConvGeom { cin: 2, cout: 3, kernel: 3, dilation: 2 };
        let x = Tensor::from_vec([2, 2, 5, 6], ramp(120, 0.53));
        let wt = ramp(g.weight_len(), 0.29);
        let d = Tensor::from_vec([2, 3, 5, 6], ramp(180, 0.71));
        let y = conv_forward(&x, &wt, g);
        let (dw, dx) = conv_backward(&x, &wt, g, &d, true);
        let lhs: f64 = y.data.iter().zip(&d.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data.iter().zip(&dx.unwrap().data).map(|(a, b)| a * b).sum();
        let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9);
        assert!((lhs - via_w).abs() < 1e-9);
    }

    #[test]
    fn maxpool_floors_odd_sizes() {
        let x = Tensor::from_vec([1, 1, 5, 3], (0..15).map(f64::from).collect());
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.shape, [1, 1, 2, 1]);
        assert_eq!(y.data, vec![4.0, 10.0]);
        assert_eq!(arg, vec![4, 10]);
    }
}
