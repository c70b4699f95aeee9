//! 2-D convolution and its adjoint (transposed convolution) over
//! `[batch, channel, time, freq]` tensors.

use super::macs;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of a forward convolution `x: [b, cin, h, w] -> y: [b, cout, ho, wo]`
/// with weight `[cout, cin, kh, kw]`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

/// Output indices `o` in `0..out_len` for which `o*stride + k - pad` lands
/// inside `0..in_len`.
fn valid(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        (in_len + pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward_raw(g: &Geom, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; g.b * g.cout * g.ho * g.wo];
    for b in 0..g.b {
        for co in 0..g.cout {
            let yo = (b * g.cout + co) * g.ho * g.wo;
            for ci in 0..g.cin {
                let xo = (b * g.cin + ci) * g.h * g.w;
                for ki in 0..g.kh {
                    let (oi_lo, oi_hi) = valid(ki, g.ph, g.sh, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                        let (oj_lo, oj_hi) = valid(kj, g.pw, g.sw, g.w, g.wo);
                        for oi in oi_lo..oi_hi {
                            let ii = oi * g.sh + ki - g.ph;
                            let xrow = xo + ii * g.w;
                            let yrow = yo + oi * g.wo;
                            for oj in oj_lo..oj_hi {
                                let jj = oj * g.sw + kj - g.pw;
                                y[yrow + oj] += wv * x[xrow + jj];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward_input_raw(g: &Geom, gy: &[f64], wt: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.b * g.cin * g.h * g.w];
    for b in 0..g.b {
        for co in 0..g.cout {
            let yo = (b * g.cout + co) * g.ho * g.wo;
            for ci in 0..g.cin {
                let xo = (b * g.cin + ci) * g.h * g.w;
                for ki in 0..g.kh {
                    let (oi_lo, oi_hi) = valid(ki, g.ph, g.sh, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                        let (oj_lo, oj_hi) = valid(kj, g.pw, g.sw, g.w, g.wo);
                        for oi in oi_lo..oi_hi {
                            let ii = oi * g.sh + ki - g.ph;
                            let xrow = xo + ii * g.w;
                            let yrow = yo + oi * g.wo;
                            for oj in oj_lo..oj_hi {
                                let jj = oj * g.sw + kj - g.pw;
                                gx[xrow + jj] += wv * gy[yrow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_backward_weight_raw(g: &Geom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for b in 0..g.b {
        for co in 0..g.cout {
            let yo = (b * g.cout + co) * g.ho * g.wo;
            for ci in 0..g.cin {
                let xo = (b * g.cin + ci) * g.h * g.w;
                for ki in 0..g.kh {
                    let (oi_lo, oi_hi) = valid(ki, g.ph, g.sh, g.h, g.ho);
                    for kj in 0..g.kw {
                        let (oj_lo, oj_hi) = valid(kj, g.pw, g.sw, g.w, g.wo);
                        let mut acc = 0.0;
                        for oi in oi_lo..oi_hi {
                            let ii = oi * g.sh + ki - g.ph;
                            let xrow = xo + ii * g.w;
                            let yrow = yo + oi * g.wo;
                            for oj in oj_lo..oj_hi {
                                let jj = oj * g.sw + kj - g.pw;
                                acc += gy[yrow + oj] * x[xrow + jj];
                            }
                        }
                        gw[((co * g.cin + ci) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], c: usize, plane: usize) {
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let bv = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn bias_grad(gy: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; c];
    for (i, chunk) in gy.chunks(plane).enumerate() {
        gb[i % c] += chunk.iter().sum::<f64>();
    }
    gb
}

const AXIS_NAMES: [&str; 4] = ["batch axis", "channel axis", "time axis", "frequency axis"];

fn rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t.shape()).map_err(|_| {
        Error::shape(what, format!("expected rank-4 tensor, got shape {:?}", t.shape()))
    })
}

fn check_bias(bias: Option<&Tensor>, c: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c] => Err(Error::shape(
            AXIS_NAMES[1],
            format!("bias shape {:?} does not match {c} output channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

/// Cross-correlation of `x: [B, Cin, H, W]` with `weight: [Cout, Cin, Kh, Kw]`.
///
/// Output dims are `floor((in + 2*pad - kernel) / stride) + 1` per spatial axis.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let [b, cin, h, w] = rank4(x, "conv2d input")?;
    let [cout, wcin, kh, kw] = rank4(weight, "conv2d weight")?;
    if cin != wcin {
        return Err(Error::shape(
            AXIS_NAMES[1],
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 || kh == 0 || kw == 0 {
        return Err(Error::InvalidLayer("stride and kernel sizes must be >= 1".into()));
    }
    for (axis, (len, pad, k)) in [(2, (h, padding.0, kh)), (3, (w, padding.1, kw))] {
        if len + 2 * pad < k {
            return Err(Error::shape(
                AXIS_NAMES[axis],
                format!("padded length {} is smaller than kernel {k}", len + 2 * pad),
            ));
        }
    }
    check_bias(bias, cout)?;
    let g = Geom {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        ho: (h + 2 * padding.0 - kh) / stride.0 + 1,
        wo: (w + 2 * padding.1 - kw) / stride.1 + 1,
    };
    macs::record((b * cin * cout * kh * kw * g.ho * g.wo) as u64);
    let mut y = conv_forward_raw(&g, x.data(), weight.data());
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias.data(), cout, g.ho * g.wo);
    }
    let mut parents = vec![x.clone(), weight.clone()];
    parents.extend(bias.cloned());
    let (xc, wc) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![b, cout, g.ho, g.wo], y, parents, move |gy| {
        let gx = xc
            .requires_grad()
            .then(|| conv_backward_input_raw(&g, gy, wc.data()));
        let gw = wc
            .requires_grad()
            .then(|| conv_backward_weight_raw(&g, xc.data(), gy));
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(Some(bias_grad(gy, g.cout, g.ho * g.wo)));
        }
        out
    }))
}

/// Transposed convolution of `x: [B, Cin, H, W]` with `weight: [Cin, Cout, Kh, Kw]`,
/// the adjoint of [`conv2d`] with the same weight.
///
/// Output dims are `(in - 1) * stride - 2 * pad + kernel + output_padding`,
/// with `output_padding < stride` on each axis.
pub fn deconv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
    output_padding: (usize, usize),
) -> Result<Tensor> {
    let [b, cin, h, w] = rank4(x, "deconv2d input")?;
    let [wcin, cout, kh, kw] = rank4(weight, "deconv2d weight")?;
    if cin != wcin {
        return Err(Error::shape(
            AXIS_NAMES[1],
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 || kh == 0 || kw == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidLayer("stride, kernel, and input sizes must be >= 1".into()));
    }
    if output_padding.0 >= stride.0 || output_padding.1 >= stride.1 {
        return Err(Error::InvalidLayer(format!(
            "output padding {output_padding:?} must be smaller than stride {stride:?}"
        )));
    }
    let out_len = |len: usize, s: usize, p: usize, k: usize, op: usize, axis: usize| {
        ((len - 1) * s + k + op).checked_sub(2 * p).filter(|&v| v > 0).ok_or_else(|| {
            Error::shape(AXIS_NAMES[axis], format!("padding {p} consumes the whole output"))
        })
    };
    let ho = out_len(h, stride.0, padding.0, kh, output_padding.0, 2)?;
    let wo = out_len(w, stride.1, padding.1, kw, output_padding.1, 3)?;
    check_bias(bias, cout)?;
    // The adjoint conv maps [b, cout, ho, wo] -> [b, cin, h, w].
    let g = Geom {
        b,
        cin: cout,
        h: ho,
        w: wo,
        cout: cin,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        ho: h,
        wo: w,
    };
    macs::record((b * cin * cout * kh * kw * h * w) as u64);
    let mut y = conv_backward_input_raw(&g, x.data(), weight.data());
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias.data(), cout, ho * wo);
    }
    let mut parents = vec![x.clone(), weight.clone()];
    parents.extend(bias.cloned());
    let (xc, wc) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![b, cout, ho, wo], y, parents, move |gy| {
        let gx = xc.requires_grad().then(|| conv_forward_raw(&g, gy, wc.data()));
        let gw = wc
            .requires_grad()
            .then(|| conv_backward_weight_raw(&g, gy, xc.data()));
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(Some(bias_grad(gy, cout, ho * wo)));
        }
        out
    }))
}

/// Drops trailing frames along the time axis (causal "chomp").
pub fn chomp_time(x: &Tensor, frames: usize) -> Result<Tensor> {
    let t = x.shape().get(2).copied().unwrap_or(0);
    if frames > t {
        return Err(Error::shape(AXIS_NAMES[2], format!("cannot drop {frames} of {t} frames")));
    }
    super::tensor::slice(x, 2, 0, t - frames)
}
