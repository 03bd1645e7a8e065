//! Forward and backward kernels for the network layers.
//!
//! All tensors are (batch, channel, x, y, z) unless noted. Loops run in a
//! fixed order so results are bit-reproducible.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub s: [usize; 3],
}

impl Dims5 {
    pub fn of(t: &Tensor) -> Dims5 {
        let s = t.shape();
        assert_eq!(s.len(), 5, "expected a (B, C, X, Y, Z) tensor, got {s:?}");
        Dims5 {
            b: s[0],
            c: s[1],
            s: [s[2], s[3], s[4]],
        }
    }

    pub fn vol(&self) -> usize {
        self.s[0] * self.s[1] * self.s[2]
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.b, self.c, self.s[0], self.s[1], self.s[2]]
    }
}

/// Output extent of a padded, strided convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output indices `o` in `[lo, hi)` for which `o * s + k - p` lies inside `[0, n_in)`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let top = n_in + p;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - k - 1) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn out_dims(&self, s: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| conv_out_len(s[a], self.kernel[a], self.stride[a], self.pad[a]))
    }
}

/// Calls `f(in_row_offset, out_row_offset, z_lo, z_hi, w_index)` for every
/// (input-row, output-row, kernel-tap) triple of one channel pair.
#[inline]
fn for_each_tap(
    g: &ConvGeometry,
    in_s: [usize; 3],
    out_s: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let [kx, ky, kz] = g.kernel;
    for ix in 0..kx {
        let (x0, x1) = valid_range(in_s[0], out_s[0], ix, g.stride[0], g.pad[0]);
        for iy in 0..ky {
            let (y0, y1) = valid_range(in_s[1], out_s[1], iy, g.stride[1], g.pad[1]);
            for iz in 0..kz {
                let (z0, z1) = valid_range(in_s[2], out_s[2], iz, g.stride[2], g.pad[2]);
                if z0 >= z1 {
                    continue;
                }
                let tap = (ix * ky + iy) * kz + iz;
                let zin0 = z0 * g.stride[2] + iz - g.pad[2];
                for ox in x0..x1 {
                    let sx = ox * g.stride[0] + ix - g.pad[0];
                    for oy in y0..y1 {
                        let sy = oy * g.stride[1] + iy - g.pad[1];
                        let in_row = (sx * in_s[1] + sy) * in_s[2];
                        let out_row = (ox * out_s[1] + oy) * out_s[2];
                        f(in_row + zin0, out_row, z0, z1, tap, 0);
                    }
                }
            }
        }
    }
}

/// `w` is (O, I, kx, ky, kz); `bias` is (O).
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Tensor {
    let d = Dims5::of(x);
    let ws = w.shape();
    let (oc, ic) = (ws[0], ws[1]);
    assert_eq!(ic, d.c, "conv input channels");
    let taps: usize = g.kernel.iter().product();
    let os = g.out_dims(d.s);
    let ovol = os.iter().product::<usize>();
    let ivol = d.vol();
    let sz = g.stride[2];
    let mut out = vec![0.0; d.b * oc * ovol];
    for b in 0..d.b {
        for o in 0..oc {
            let plane = &mut out[(b * oc + o) * ovol..(b * oc + o + 1) * ovol];
            if let Some(bias) = bias {
                plane.fill(bias.data()[o]);
            }
            for i in 0..ic {
                let inp = &x.data()[(b * ic + i) * ivol..(b * ic + i + 1) * ivol];
                let wk = &w.data()[(o * ic + i) * taps..(o * ic + i + 1) * taps];
                for_each_tap(g, d.s, os, |in0, out_row, z0, z1, tap, _| {
                    let wv = wk[tap];
                    if wv == 0.0 {
                        return;
                    }
                    let dst = &mut plane[out_row + z0..out_row + z1];
                    if sz == 1 {
                        let src = &inp[in0..in0 + (z1 - z0)];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    } else {
                        for (j, o) in dst.iter_mut().enumerate() {
                            *o += wv * inp[in0 + j * sz];
                        }
                    }
                });
            }
        }
    }
    Tensor::from_vec(&[d.b, oc, os[0], os[1], os[2]], out).expect("conv output shape")
}

/// Gradients of a convolution: (d input, d weight, d bias).
/// `need_input` skips the input gradient when nothing upstream needs it.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    g: &ConvGeometry,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let d = Dims5::of(x);
    let ws = w.shape();
    let (oc, ic) = (ws[0], ws[1]);
    let taps: usize = g.kernel.iter().product();
    let od = Dims5::of(gy);
    let os = od.s;
    let ovol = od.vol();
    let ivol = d.vol();
    let sz = g.stride[2];

    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; oc];
    for b in 0..d.b {
        for o in 0..oc {
            let gplane = &gy.data()[(b * oc + o) * ovol..(b * oc + o + 1) * ovol];
            gb[o] += gplane.iter().sum::<f64>();
            for i in 0..ic {
                let inp = &x.data()[(b * ic + i) * ivol..(b * ic + i + 1) * ivol];
                let gwk = &mut gw[(o * ic + i) * taps..(o * ic + i + 1) * taps];
                for_each_tap(g, d.s, os, |in0, out_row, z0, z1, tap, _| {
                    let go = &gplane[out_row + z0..out_row + z1];
                    let acc: f64 = if sz == 1 {
                        go.iter().zip(&inp[in0..in0 + (z1 - z0)]).map(|(a, b)| a * b).sum()
                    } else {
                        go.iter().enumerate().map(|(j, a)| a * inp[in0 + j * sz]).sum()
                    };
                    gwk[tap] += acc;
                });
            }
        }
    }

    let gx = need_input.then(|| {
        let mut gx = vec![0.0; x.numel()];
        for b in 0..d.b {
            for i in 0..ic {
                let gplane_in = (b * ic + i) * ivol;
                for o in 0..oc {
                    let gplane = &gy.data()[(b * oc + o) * ovol..(b * oc + o + 1) * ovol];
                    let wk = &w.data()[(o * ic + i) * taps..(o * ic + i + 1) * taps];
                    let gin = &mut gx[gplane_in..gplane_in + ivol];
                    for_each_tap(g, d.s, os, |in0, out_row, z0, z1, tap, _| {
                        let wv = wk[tap];
                        if wv == 0.0 {
                            return;
                        }
                        let go = &gplane[out_row + z0..out_row + z1];
                        if sz == 1 {
                            for (t, s) in gin[in0..in0 + (z1 - z0)].iter_mut().zip(go) {
                                *t += wv * s;
                            }
                        } else {
                            for (j, s) in go.iter().enumerate() {
                                gin[in0 + j * sz] += wv * s;
                            }
                        }
                    });
                }
            }
        }
        Tensor::from_vec(x.shape(), gx).expect("shape")
    });
    (
        gx,
        Tensor::from_vec(w.shape(), gw).expect("shape"),
        Tensor::from_vec(&[oc], gb).expect("shape"),
    )
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// taps). `w` is (I, O, sx, sy, sz).
pub fn conv_transpose3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: [usize; 3]) -> Tensor {
    let d = Dims5::of(x);
    let ws = w.shape();
    let (ic, oc) = (ws[0], ws[1]);
    assert_eq!(ic, d.c, "transposed conv input channels");
    let os: [usize; 3] = std::array::from_fn(|a| d.s[a] * stride[a]);
    let ovol = os.iter().product::<usize>();
    let ivol = d.vol();
    let taps: usize = stride.iter().product();
    let mut out = vec![0.0; d.b * oc * ovol];
    for b in 0..d.b {
        for o in 0..oc {
            let plane = &mut out[(b * oc + o) * ovol..(b * oc + o + 1) * ovol];
            if let Some(bias) = bias {
                plane.fill(bias.data()[o]);
            }
            for i in 0..ic {
                let inp = &x.data()[(b * ic + i) * ivol..(b * ic + i + 1) * ivol];
                let wk = &w.data()[(i * oc + o) * taps..(i * oc + o + 1) * taps];
                for px in 0..d.s[0] {
                    for py in 0..d.s[1] {
                        for pz in 0..d.s[2] {
                            let v = inp[(px * d.s[1] + py) * d.s[2] + pz];
                            for kx in 0..stride[0] {
                                for ky in 0..stride[1] {
                                    let row = ((px * stride[0] + kx) * os[1] + py * stride[1] + ky) * os[2]
                                        + pz * stride[2];
                                    let wrow = &wk[(kx * stride[1] + ky) * stride[2]..][..stride[2]];
                                    for (t, wv) in plane[row..row + stride[2]].iter_mut().zip(wrow) {
                                        *t += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[d.b, oc, os[0], os[1], os[2]], out).expect("shape")
}

pub fn conv_transpose3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: [usize; 3],
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let d = Dims5::of(x);
    let ws = w.shape();
    let (ic, oc) = (ws[0], ws[1]);
    let od = Dims5::of(gy);
    let os = od.s;
    let ovol = od.vol();
    let ivol = d.vol();
    let taps: usize = stride.iter().product();
    let mut gx = vec![0.0; if need_input { x.numel() } else { 0 }];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; oc];
    for b in 0..d.b {
        for o in 0..oc {
            let gplane = &gy.data()[(b * oc + o) * ovol..(b * oc + o + 1) * ovol];
            gb[o] += gplane.iter().sum::<f64>();
            for i in 0..ic {
                let inp = &x.data()[(b * ic + i) * ivol..(b * ic + i + 1) * ivol];
                let wbase = (i * oc + o) * taps;
                for px in 0..d.s[0] {
                    for py in 0..d.s[1] {
                        for pz in 0..d.s[2] {
                            let vi = (px * d.s[1] + py) * d.s[2] + pz;
                            let v = inp[vi];
                            let mut acc_x = 0.0;
                            for kx in 0..stride[0] {
                                for ky in 0..stride[1] {
                                    let row = ((px * stride[0] + kx) * os[1] + py * stride[1] + ky) * os[2]
                                        + pz * stride[2];
                                    let woff = wbase + (kx * stride[1] + ky) * stride[2];
                                    for kz in 0..stride[2] {
                                        let go = gplane[row + kz];
                                        gw[woff + kz] += v * go;
                                        acc_x += w.data()[woff + kz] * go;
                                    }
                                }
                            }
                            if need_input {
                                gx[(b * ic + i) * ivol + vi] += acc_x;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_input.then(|| Tensor::from_vec(x.shape(), gx).expect("shape")),
        Tensor::from_vec(w.shape(), gw).expect("shape"),
        Tensor::from_vec(&[oc], gb).expect("shape"),
    )
}

/// Per-sample, per-channel normalization. Returns (output, x_hat, 1/std).
pub fn instance_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Tensor, Vec<f64>) {
    let d = Dims5::of(x);
    let vol = d.vol();
    let mut y = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv = Vec::with_capacity(d.b * d.c);
    for b in 0..d.b {
        for c in 0..d.c {
            let off = (b * d.c + c) * vol;
            let src = &x.data()[off..off + vol];
            let mean = src.iter().sum::<f64>() / vol as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv.push(is);
            let (gm, bt) = (gamma.data()[c], beta.data()[c]);
            for j in 0..vol {
                let h = (src[j] - mean) * is;
                xhat[off + j] = h;
                y[off + j] = gm * h + bt;
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), y).expect("shape"),
        Tensor::from_vec(x.shape(), xhat).expect("shape"),
        inv,
    )
}

/// Returns (d input, d gamma, d beta).
pub fn instance_norm_backward(
    gy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = Dims5::of(gy);
    let vol = d.vol();
    let n = vol as f64;
    let mut gx = vec![0.0; gy.numel()];
    let mut gg = vec![0.0; d.c];
    let mut gbeta = vec![0.0; d.c];
    for b in 0..d.b {
        for c in 0..d.c {
            let off = (b * d.c + c) * vol;
            let go = &gy.data()[off..off + vol];
            let h = &xhat.data()[off..off + vol];
            let sum_g: f64 = go.iter().sum();
            let sum_gh: f64 = go.iter().zip(h).map(|(a, b)| a * b).sum();
            gg[c] += sum_gh;
            gbeta[c] += sum_g;
            let gm = gamma.data()[c];
            let k = gm * inv_std[b * d.c + c] / n;
            for j in 0..vol {
                gx[off + j] = k * (n * go[j] - sum_g - h[j] * sum_gh);
            }
        }
    }
    (
        Tensor::from_vec(gy.shape(), gx).expect("shape"),
        Tensor::from_vec(&[d.c], gg).expect("shape"),
        Tensor::from_vec(&[d.c], gbeta).expect("shape"),
    )
}

/// Softmax over axis 1 of a (B, C, ...) tensor with max subtraction.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for bi in 0..b {
        let base = bi * c * inner;
        for j in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(xd[base + k * inner + j]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (xd[base + k * inner + j] - m).exp();
                out[base + k * inner + j] = e;
                sum += e;
            }
            for k in 0..c {
                out[base + k * inner + j] /= sum;
            }
        }
    }
    Tensor::from_vec(s, out).expect("shape")
}

pub fn softmax_backward(p: &Tensor, gp: &Tensor) -> Tensor {
    let s = p.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let (pd, gd) = (p.data(), gp.data());
    let mut out = vec![0.0; p.numel()];
    for bi in 0..b {
        let base = bi * c * inner;
        for j in 0..inner {
            let dot: f64 = (0..c).map(|k| pd[base + k * inner + j] * gd[base + k * inner + j]).sum();
            for k in 0..c {
                let i = base + k * inner + j;
                out[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::from_vec(s, out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a padded strided convolution, no range tricks.
    fn conv_naive(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
        let d = Dims5::of(x);
        let oc = w.shape()[0];
        let os = g.out_dims(d.s);
        let k = g.kernel;
        let mut out = Tensor::zeros(&[d.b, oc, os[0], os[1], os[2]]);
        let idx5 = |s: &[usize], i: [usize; 5]| (((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4];
        for b in 0..d.b {
            for o in 0..oc {
                for p in 0..os[0] {
                    for q in 0..os[1] {
                        for r in 0..os[2] {
                            let mut acc = 0.0;
                            for i in 0..d.c {
                                for a in 0..k[0] {
                                    for bb in 0..k[1] {
                                        for c in 0..k[2] {
                                            let sx = (p * g.stride[0] + a) as i64 - g.pad[0] as i64;
                                            let sy = (q * g.stride[1] + bb) as i64 - g.pad[1] as i64;
                                            let sz = (r * g.stride[2] + c) as i64 - g.pad[2] as i64;
                                            if sx < 0 || sy < 0 || sz < 0 || sx >= d.s[0] as i64 || sy >= d.s[1] as i64 || sz >= d.s[2] as i64 {
                                                continue;
                                            }
                                            let xv = x.data()[idx5(x.shape(), [b, i, sx as usize, sy as usize, sz as usize])];
                                            let wv = w.data()[idx5(w.shape(), [o, i, a, bb, c])];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            let oi = idx5(out.shape(), [b, o, p, q, r]);
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        let x = pseudo_random(&[2, 3, 7, 6, 5], 1);
        let w = pseudo_random(&[4, 3, 3, 3, 3], 2);
        for stride in [[1, 1, 1], [2, 2, 2], [2, 2, 1], [1, 2, 2]] {
            for pad in [[1, 1, 1], [0, 0, 0]] {
                let g = ConvGeometry { kernel: [3, 3, 3], stride, pad };
                let fast = conv3d_forward(&x, &w, None, &g);
                let slow = conv_naive(&x, &w, &g);
                assert_eq!(fast.shape(), slow.shape());
                assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride:?} pad {pad:?}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), gy> == <x, conv^T(gy)> and == <w, dW>
        let x = pseudo_random(&[1, 2, 6, 5, 4], 3);
        let w = pseudo_random(&[3, 2, 3, 3, 3], 4);
        for stride in [[1, 1, 1], [2, 2, 2], [2, 1, 2]] {
            let g = ConvGeometry { kernel: [3, 3, 3], stride, pad: [1, 1, 1] };
            let y = conv3d_forward(&x, &w, None, &g);
            let gy = pseudo_random(y.shape(), 5);
            let (gx, gw, _) = conv3d_backward(&x, &w, &gy, &g, true);
            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let rx: f64 = x.data().iter().zip(gx.unwrap().data()).map(|(a, b)| a * b).sum();
            let rw: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rx).abs() < 1e-10, "{lhs} vs {rx}");
            assert!((lhs - rw).abs() < 1e-10, "{lhs} vs {rw}");
        }
    }

    #[test]
    fn transpose_conv_is_adjoint_of_strided_patch_conv() {
        let x = pseudo_random(&[2, 3, 2, 3, 2], 6);
        let w = pseudo_random(&[3, 2, 2, 2, 1], 7);
        let stride = [2, 2, 1];
        let y = conv_transpose3d_forward(&x, &w, None, stride);
        assert_eq!(y.shape(), &[2, 2, 4, 6, 2]);
        let gy = pseudo_random(y.shape(), 8);
        let (gx, gw, _) = conv_transpose3d_backward(&x, &w, &gy, stride, true);
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(gx.unwrap().data()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = pseudo_random(&[2, 4, 3, 2, 2], 9);
        let p = softmax_channels(&x);
        for b in 0..2 {
            for j in 0..12 {
                let s: f64 = (0..4).map(|k| p.data()[b * 48 + k * 12 + j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn valid_range_edges() {
        // n_in = 4, pad 1, kernel tap 0, stride 1: outputs 1..4 read inputs 0..3
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3));
        assert_eq!(valid_range(4, 2, 0, 2, 1), (1, 2));
    }
}
