//! Raw numeric kernels behind the tape ops. The same code paths serve
//! recorded (training) and tapeless (inference) execution, so forward
//! passes are bit-identical in both modes.
//!
//! Layout everywhere: [B, C, H, W] row-major, W contiguous. The stride-1
//! convolution paths reduce to row AXPY / dot loops over contiguous
//! slices, which the autovectorizer handles well; that is what makes the
//! desk-scale experiment fit a single-core budget.

use crate::{Error, Result, Scalar};

/// Resolved convolution geometry. `infer` is the single place the output
/// size formula lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub b: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn infer(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<ConvGeom> {
        let (b, c_in, h, w) = match input_shape {
            &[c, h, w] => (1, c, h, w),
            &[b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d input must be [C,H,W] or [B,C,H,W], got {input_shape:?}"
                )))
            }
        };
        let &[c_out, wc_in, kh, kw] = weight_shape else {
            return Err(Error::Shape(format!(
                "conv2d weight must be [C_out,C_in,kh,kw], got {weight_shape:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {input_shape:?} vs weight {weight_shape:?}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Shape(format!(
                "conv2d stride {stride} / dilation {dilation} must be >= 1"
            )));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if kh == 0 || kw == 0 || h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(Error::Shape(format!(
                "conv2d kernel {weight_shape:?} (dilation {dilation}) does not fit padded input {input_shape:?} (padding {padding})"
            )));
        }
        let h_out = (h + 2 * padding - span_h) / stride + 1;
        let w_out = (w + 2 * padding - span_w) / stride + 1;
        Ok(ConvGeom {
            b,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            dilation,
            padding,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 3 {
            vec![self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.b, self.c_out, self.h_out, self.w_out]
        }
    }
}

/// out[b,co,:,:] = bias[co] + sum_ci cross_correlate(input[b,ci], weight[co,ci])
pub fn conv2d_fwd<S: Scalar>(g: &ConvGeom, input: &[S], weight: &[S], bias: &[S], out: &mut [S]) {
    let plane = g.h_out * g.w_out;
    for b in 0..g.b {
        for co in 0..g.c_out {
            out[(b * g.c_out + co) * plane..][..plane].fill(bias[co]);
        }
    }
    conv2d_accumulate(g, input, weight, out);
}

/// out += sum_ci cross_correlate(input[b,ci], weight[co,ci]). Serves both
/// the biased forward pass and the flipped-weight input gradient.
///
/// Each output row is accumulated in a local buffer so the kh*kw*c_in
/// partial updates stay in registers / L1 instead of bouncing through the
/// destination slice.
fn conv2d_accumulate<S: Scalar>(g: &ConvGeom, input: &[S], weight: &[S], out: &mut [S]) {
    let (h, w, ho, wo) = (g.h, g.w, g.h_out, g.w_out);
    let mut row = vec![S::zero(); wo];
    for b in 0..g.b {
        for co in 0..g.c_out {
            let out_plane = &mut out[(b * g.c_out + co) * ho * wo..][..ho * wo];
            let in_base = b * g.c_in * h * w;
            for oy in 0..ho {
                row.copy_from_slice(&out_plane[oy * wo..][..wo]);
                for ci in 0..g.c_in {
                    let in_plane = &input[in_base + ci * h * w..][..h * w];
                    let wbase = (co * g.c_in + ci) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..][..w];
                        let wrow = &weight[wbase + ky * g.kw..][..g.kw];
                        if g.stride == 1 && g.kw == 3 {
                            row_axpy3(&mut row, in_row, wrow, g.dilation, g.padding);
                        } else {
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let off = (kx * g.dilation) as isize - g.padding as isize;
                                if g.stride == 1 {
                                    row_axpy(&mut row, in_row, wv, off);
                                } else {
                                    for (ox, dst) in row.iter_mut().enumerate() {
                                        let ix = (ox * g.stride) as isize + off;
                                        if ix >= 0 && ix < w as isize {
                                            *dst += wv * in_row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out_plane[oy * wo..][..wo].copy_from_slice(&row);
            }
        }
    }
}

/// row[ox] += wv * in_row[ox + off] over the valid overlap.
#[inline]
fn row_axpy<S: Scalar>(row: &mut [S], in_row: &[S], wv: S, off: isize) {
    let w = in_row.len() as isize;
    let ox0 = (-off).max(0) as usize;
    let ox1 = row.len().min((w - off).max(0) as usize);
    if ox1 > ox0 {
        let dst = &mut row[ox0..ox1];
        let src = &in_row[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
        for i in 0..dst.len() {
            dst[i] += wv * src[i];
        }
    }
}

/// Fused 3-tap variant: one pass over the interior where all taps are in
/// bounds (3 FMAs per store instead of three separate passes), scalar
/// tails at the borders. Every conv in the model is 3 wide, so this is
/// the path the training budget lives on.
#[inline]
fn row_axpy3<S: Scalar>(row: &mut [S], in_row: &[S], wrow: &[S], dilation: usize, padding: usize) {
    let w = in_row.len();
    let wo = row.len();
    let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
    // Tap kx reads in_row[ox + kx*dilation - padding]; interior = all three valid.
    let lo = padding.min(wo);
    let hi = wo.min((w + padding).saturating_sub(2 * dilation)).max(lo);
    for kx in 0..3usize {
        let off = (kx * dilation) as isize - padding as isize;
        for ox in (0..lo).chain(hi..wo) {
            let ix = ox as isize + off;
            if ix >= 0 && (ix as usize) < w {
                row[ox] += wrow[kx] * in_row[ix as usize];
            }
        }
    }
    if hi > lo {
        let base = lo - padding;
        let n = hi - lo;
        let dst = &mut row[lo..hi];
        let s0 = &in_row[base..base + n];
        let s1 = &in_row[base + dilation..base + dilation + n];
        let s2 = &in_row[base + 2 * dilation..base + 2 * dilation + n];
        for i in 0..n {
            dst[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
        }
    }
}

/// dinput += conv-transpose of dout with weight.
///
/// For the stride-1 square-kernel case (every conv in the model) the
/// transpose is itself a stride-1 convolution of dout with the weight
/// flipped 180 degrees and in/out channels swapped, at padding
/// d*(k-1) - p, so it reuses the fast forward path. Other geometries fall
/// back to a direct scatter.
pub fn conv2d_bwd_input<S: Scalar>(g: &ConvGeom, weight: &[S], dout: &[S], dinput: &mut [S]) {
    if g.stride == 1 && g.kh == g.kw && g.dilation * (g.kh - 1) >= g.padding {
        let k = g.kh;
        let mut flipped = vec![S::zero(); g.c_in * g.c_out * k * k];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped[((ci * g.c_out + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            weight[((co * g.c_in + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        let gt = ConvGeom {
            b: g.b,
            c_in: g.c_out,
            h: g.h_out,
            w: g.w_out,
            c_out: g.c_in,
            kh: k,
            kw: k,
            stride: 1,
            dilation: g.dilation,
            padding: g.dilation * (k - 1) - g.padding,
            h_out: g.h,
            w_out: g.w,
        };
        conv2d_accumulate(&gt, dout, &flipped, dinput);
        return;
    }
    conv2d_bwd_input_scatter(g, weight, dout, dinput);
}

fn conv2d_bwd_input_scatter<S: Scalar>(g: &ConvGeom, weight: &[S], dout: &[S], dinput: &mut [S]) {
    let (h, w, ho, wo) = (g.h, g.w, g.h_out, g.w_out);
    for b in 0..g.b {
        for co in 0..g.c_out {
            let dout_plane = &dout[(b * g.c_out + co) * ho * wo..][..ho * wo];
            for ci in 0..g.c_in {
                let din_plane = &mut dinput[(b * g.c_in + ci) * h * w..][..h * w];
                let wbase = (co * g.c_in + ci) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let din_row = &mut din_plane[iy as usize * w..][..w];
                        let dout_row = &dout_plane[oy * wo..][..wo];
                        for kx in 0..g.kw {
                            let wv = weight[wbase + ky * g.kw + kx];
                            let off = (kx * g.dilation) as isize - g.padding as isize;
                            for ox in 0..wo {
                                let ix = (ox * g.stride) as isize + off;
                                if ix >= 0 && ix < w as isize {
                                    din_row[ix as usize] += wv * dout_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product split over 8 accumulator lanes. Float addition is not
/// associative, so the autovectorizer refuses to vectorize a plain
/// reduction; splitting the accumulation by hand recovers SIMD throughput
/// at the cost of a fixed summation order (still deterministic).
#[inline]
fn dot_lanes<S: Scalar>(a: &[S], x: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cx = x.chunks_exact(8);
    let (ra, rx) = (ca.remainder(), cx.remainder());
    for (pa, px) in ca.zip(cx) {
        for j in 0..8 {
            lanes[j] += pa[j] * px[j];
        }
    }
    let mut acc = S::zero();
    for j in 0..ra.len() {
        acc += ra[j] * rx[j];
    }
    for l in lanes {
        acc += l;
    }
    acc
}

/// dweight += input ⋆ dout.
pub fn conv2d_bwd_weight<S: Scalar>(g: &ConvGeom, input: &[S], dout: &[S], dweight: &mut [S]) {
    let (h, w, ho, wo) = (g.h, g.w, g.h_out, g.w_out);
    for b in 0..g.b {
        for co in 0..g.c_out {
            let dout_plane = &dout[(b * g.c_out + co) * ho * wo..][..ho * wo];
            for ci in 0..g.c_in {
                let in_plane = &input[(b * g.c_in + ci) * h * w..][..h * w];
                let wbase = (co * g.c_in + ci) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..][..w];
                        let dout_row = &dout_plane[oy * wo..][..wo];
                        for kx in 0..g.kw {
                            let off = (kx * g.dilation) as isize - g.padding as isize;
                            let mut acc = S::zero();
                            if g.stride == 1 {
                                let ox0 = (-off).max(0) as usize;
                                let ox1 = wo.min((w as isize - off).max(0) as usize);
                                if ox1 > ox0 {
                                    acc = dot_lanes(
                                        &dout_row[ox0..ox1],
                                        &in_row[(ox0 as isize + off) as usize
                                            ..(ox1 as isize + off) as usize],
                                    );
                                }
                            } else {
                                for ox in 0..wo {
                                    let ix = (ox * g.stride) as isize + off;
                                    if ix >= 0 && ix < w as isize {
                                        acc += dout_row[ox] * in_row[ix as usize];
                                    }
                                }
                            }
                            dweight[wbase + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// dbias += per-output-channel sums of dout.
pub fn conv2d_bwd_bias<S: Scalar>(g: &ConvGeom, dout: &[S], dbias: &mut [S]) {
    let plane = g.h_out * g.w_out;
    for b in 0..g.b {
        for co in 0..g.c_out {
            let src = &dout[(b * g.c_out + co) * plane..][..plane];
            let mut acc = S::zero();
            for v in src {
                acc += *v;
            }
            dbias[co] += acc;
        }
    }
}

/// Strided mean pooling over factor×factor cells.
pub fn downsample_fwd<S: Scalar>(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    input: &[S],
    out: &mut [S],
) {
    let (ho, wo) = (h / factor, w / factor);
    let inv = S::one() / S::from_count(factor * factor);
    for p in 0..b * c {
        let in_plane = &input[p * h * w..][..h * w];
        let out_plane = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = S::zero();
                for dy in 0..factor {
                    let row = &in_plane[(oy * factor + dy) * w..];
                    for dx in 0..factor {
                        acc += row[ox * factor + dx];
                    }
                }
                out_plane[oy * wo + ox] = acc * inv;
            }
        }
    }
}

pub fn downsample_bwd<S: Scalar>(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dout: &[S],
    dinput: &mut [S],
) {
    let (ho, wo) = (h / factor, w / factor);
    let inv = S::one() / S::from_count(factor * factor);
    for p in 0..b * c {
        let dout_plane = &dout[p * ho * wo..][..ho * wo];
        let din_plane = &mut dinput[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dout_plane[oy * wo + ox] * inv;
                for dy in 0..factor {
                    let row = &mut din_plane[(oy * factor + dy) * w..];
                    for dx in 0..factor {
                        row[ox * factor + dx] += g;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor repetition by `factor` in both spatial dims.
pub fn upsample_fwd<S: Scalar>(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    input: &[S],
    out: &mut [S],
) {
    let (ho, wo) = (h * factor, w * factor);
    for p in 0..b * c {
        let in_plane = &input[p * h * w..][..h * w];
        let out_plane = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let in_row = &in_plane[(oy / factor) * w..][..w];
            let out_row = &mut out_plane[oy * wo..][..wo];
            for ox in 0..wo {
                out_row[ox] = in_row[ox / factor];
            }
        }
    }
}

pub fn upsample_bwd<S: Scalar>(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dout: &[S],
    dinput: &mut [S],
) {
    let (ho, wo) = (h * factor, w * factor);
    for p in 0..b * c {
        let dout_plane = &dout[p * ho * wo..][..ho * wo];
        let din_plane = &mut dinput[p * h * w..][..h * w];
        for oy in 0..ho {
            let dout_row = &dout_plane[oy * wo..][..wo];
            let din_row = &mut din_plane[(oy / factor) * w..][..w];
            for ox in 0..wo {
                din_row[ox / factor] += dout_row[ox];
            }
        }
    }
}

/// Numerically stable sigmoid.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softplus ln(1 + e^x) = max(x,0) + ln(1 + e^-|x|).
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// sigmoid(l) and sigmoid(-l) from a single exp. Matches `sigmoid`
/// bit-for-bit: both branches produce the same quotients it would.
#[inline]
fn sigmoid_pair<S: Scalar>(l: S, e: S) -> (S, S) {
    if l >= S::zero() {
        (S::one() / (S::one() + e), e / (S::one() + e))
    } else {
        (e / (S::one() + e), S::one() / (S::one() + e))
    }
}

/// Stable logit-space BCE max(l,0) - l*t + ln(1 + e^-|l|).
#[inline]
pub(super) fn bce_logit<S: Scalar>(l: S, t: S) -> S {
    l.max(S::zero()) - l * t + (-l.abs()).exp().ln_1p()
}

/// Focal loss on a logit against a soft target,
/// t*(1-p)^g*softplus(-l) + (1-t)*p^g*softplus(l), sharing one exp
/// across p, 1-p and both softplus terms.
#[inline]
pub(super) fn focal_logit<S: Scalar>(l: S, t: S, gamma: S) -> S {
    let e = (-l.abs()).exp();
    let (p, not_p) = sigmoid_pair(l, e);
    let lnp = e.ln_1p();
    let spn = (-l).max(S::zero()) + lnp;
    let spp = l.max(S::zero()) + lnp;
    t * not_p.powf(gamma) * spn + (S::one() - t) * p.powf(gamma) * spp
}

/// (d/dl, d/dt) of `focal_logit`. Derivatives are grouped so that only
/// p^g and (1-p)^g appear, never the g-1 powers: those would blow up
/// when p saturates to 0 or 1.
#[inline]
pub(super) fn focal_logit_bwd<S: Scalar>(l: S, t: S, gamma: S) -> (S, S) {
    let e = (-l.abs()).exp();
    let (p, not_p) = sigmoid_pair(l, e);
    let lnp = e.ln_1p();
    let spn = (-l).max(S::zero()) + lnp;
    let spp = l.max(S::zero()) + lnp;
    let ug = not_p.powf(gamma);
    let pg = p.powf(gamma);
    let dl = t * ug * (-(gamma * p * spn) - not_p)
        + (S::one() - t) * pg * (gamma * not_p * spp + p);
    let dt = ug * spn - pg * spp;
    (dl, dt)
}

/// Base loss of the flip probability q = 0.5*sigmoid(raw) against the
/// 0/1 indicator z: -ln q composed as softplus(-raw) + ln 2 (never
/// saturates), -ln(1-q) as -ln_1p(-q) (q < 0.5). `gamma` of None is BCE,
/// Some(g) multiplies in the focal modulation (1-q)^g resp. q^g.
#[inline]
pub(super) fn flip_nll<S: Scalar>(raw: S, z: S, gamma: Option<S>) -> S {
    let e = (-raw.abs()).exp();
    let (sig, _) = sigmoid_pair(raw, e);
    let q = S::fp(0.5) * sig;
    let pos = z == S::one();
    let nll = if pos {
        (-raw).max(S::zero()) + e.ln_1p() + S::fp(core::f64::consts::LN_2)
    } else {
        -(-q).ln_1p()
    };
    match gamma {
        None => nll,
        Some(g) if pos => (S::one() - q).powf(g) * nll,
        Some(g) => q.powf(g) * nll,
    }
}

/// d/draw of `flip_nll`. Uses dq/draw = q*(1-sigmoid) and keeps q^g /
/// (1-q)^g whole for the same saturation-safety reason as
/// `focal_logit_bwd`.
#[inline]
pub(super) fn flip_nll_bwd<S: Scalar>(raw: S, z: S, gamma: Option<S>) -> S {
    let e = (-raw.abs()).exp();
    let (sig, _) = sigmoid_pair(raw, e);
    let q = S::fp(0.5) * sig;
    let qdot = q * (S::one() - sig);
    let pos = z == S::one();
    match gamma {
        None if pos => -(S::one() - sig),
        None => qdot / (S::one() - q),
        Some(g) if pos => {
            let nll = (-raw).max(S::zero()) + e.ln_1p() + S::fp(core::f64::consts::LN_2);
            let omq = S::one() - q;
            omq.powf(g) * (-(g * qdot / omq) * nll - (S::one() - sig))
        }
        Some(g) => {
            let nll = -(-q).ln_1p();
            q.powf(g) * (g * (S::one() - sig) * nll + qdot / (S::one() - q))
        }
    }
}
