//! Forward and adjoint kernels for the tape's heavier ops.

/// Strides of `shape` aligned to `out_shape`, with 0 on broadcast axes.
pub(super) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for axis in (0..shape.len()).rev() {
        strides[axis] = if shape[axis] == 1 && out_shape[axis] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[axis];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in row-major order.
pub(super) fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            ia += a_strides[axis];
            ib += b_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            ia -= a_strides[axis] * out_shape[axis];
            ib -= b_strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub(super) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Accumulates `g · bᵀ` into `ga` and `aᵀ · g` into `gb`.
#[allow(clippy::too_many_arguments)]
pub(super) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(ga) = ga {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                ga[i * k + p] += dot;
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let dst = &mut gb[p * n..(p + 1) * n];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(super) fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, geo: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (h, wd) = (geo.height, geo.width);
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    let mut out = vec![0.0; geo.batch * geo.out_channels * oh * ow];
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let base = (n * geo.out_channels + co) * oh * ow;
            let b = bias.map_or(0.0, |b| b[co]);
            out[base..base + oh * ow].iter_mut().for_each(|v| *v = b);
            for ci in 0..geo.in_channels {
                let xin = &x[(n * geo.in_channels + ci) * h * wd..][..h * wd];
                let wk = &w[(co * geo.in_channels + ci) * kh * kw..][..kh * kw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let Some(iy) = geo.source(oy, ky, h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                if let Some(ix) = geo.source(ox, kx, wd) {
                                    acc += xin[iy * wd + ix] * wk[ky * kw + kx];
                                }
                            }
                        }
                        out[base + oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    geo: &ConvGeometry,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (h, wd) = (geo.height, geo.width);
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    if let Some(gb) = gb {
        for n in 0..geo.batch {
            for (co, gbv) in gb.iter_mut().enumerate() {
                let base = (n * geo.out_channels + co) * oh * ow;
                *gbv += g[base..base + oh * ow].iter().sum::<f64>();
            }
        }
    }
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let gout = &g[(n * geo.out_channels + co) * oh * ow..][..oh * ow];
            for ci in 0..geo.in_channels {
                let xoff = (n * geo.in_channels + ci) * h * wd;
                let woff = (co * geo.in_channels + ci) * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gout[oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let Some(iy) = geo.source(oy, ky, h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = geo.source(ox, kx, wd) else {
                                    continue;
                                };
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw[woff + ky * kw + kx] += gv * x[xoff + iy * wd + ix];
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xoff + iy * wd + ix] += gv * w[woff + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise `x − max − ln Σ exp(x − max)` over `[rows × cols]`.
pub(super) fn log_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - max - lse));
    }
    out
}

/// Channel layout of a `[N×C]` or `[N×C×…]` tensor.
#[derive(Debug, Clone, Copy)]
pub(super) struct ChannelLayout {
    pub channels: usize,
    /// Elements per (row, channel) pair.
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> Self {
        ChannelLayout {
            channels: shape[1],
            spatial: shape[2..].iter().product(),
        }
    }

    #[inline]
    pub fn row_len(&self) -> usize {
        self.channels * self.spatial
    }
}

/// Per-group, per-channel standardization with biased variance.
/// Returns `(xhat, mean, var, inv_std)`; statistics are laid out `[group][channel]`.
pub(super) fn standardize(
    x: &[f64],
    layout: ChannelLayout,
    groups: &[(usize, usize)],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = layout.channels;
    let s = layout.spatial;
    let rl = layout.row_len();
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; groups.len() * c];
    let mut vars = vec![0.0; groups.len() * c];
    let mut inv = vec![0.0; groups.len() * c];
    for (gi, &(start, count)) in groups.iter().enumerate() {
        let m = (count * s) as f64;
        for ch in 0..c {
            let mut sum = 0.0;
            for r in start..start + count {
                sum += x[r * rl + ch * s..][..s].iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for r in start..start + count {
                sq += x[r * rl + ch * s..][..s]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv_std = 1.0 / (var + eps).sqrt();
            for r in start..start + count {
                let off = r * rl + ch * s;
                for i in off..off + s {
                    out[i] = (x[i] - mean) * inv_std;
                }
            }
            means[gi * c + ch] = mean;
            vars[gi * c + ch] = var;
            inv[gi * c + ch] = inv_std;
        }
    }
    (out, means, vars, inv)
}

/// Adjoint of [`standardize`] through the batch statistics:
/// `dx = inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))` within each group-channel block.
pub(super) fn standardize_backward(
    xhat: &[f64],
    g: &[f64],
    layout: ChannelLayout,
    groups: &[(usize, usize)],
    inv_std: &[f64],
    gx: &mut [f64],
) {
    let c = layout.channels;
    let s = layout.spatial;
    let rl = layout.row_len();
    for (gi, &(start, count)) in groups.iter().enumerate() {
        let m = (count * s) as f64;
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for r in start..start + count {
                let off = r * rl + ch * s;
                for i in off..off + s {
                    sum_g += g[i];
                    sum_gx += g[i] * xhat[i];
                }
            }
            let k = inv_std[gi * c + ch] / m;
            for r in start..start + count {
                let off = r * rl + ch * s;
                for i in off..off + s {
                    gx[i] += k * (m * g[i] - sum_g - xhat[i] * sum_gx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_walk_covers_bias_pattern() {
        let out = [2, 3];
        let a = broadcast_strides(&[2, 3], &out);
        let b = broadcast_strides(&[1, 3], &out);
        let mut seen = Vec::new();
        for_each_broadcast(&out, &a, &b, |o, ia, ib| seen.push((o, ia, ib)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 0), (4, 4, 1), (5, 5, 2)]
        );
    }

    #[test]
    fn conv_output_extent() {
        let geo = ConvGeometry {
            batch: 1,
            in_channels: 3,
            height: 32,
            width: 32,
            out_channels: 64,
            kernel_h: 5,
            kernel_w: 5,
            stride: 2,
            padding: 2,
        };
        assert_eq!((geo.out_h(), geo.out_w()), (16, 16));
    }
}
