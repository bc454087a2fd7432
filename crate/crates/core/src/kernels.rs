//! Dense kernels for 3D convolution, pooling, interpolation and the
//! coordinate-attention gating used by the backbone.
//!
//! Activations are laid out as `(N, C, D, H, W)`; convolution weights as
//! `(O, C, KD, KH, KW)`.

use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded 3D window operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window3 {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Window3 {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Same-padded, unit-stride window of odd size.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self::new(kernel, [1, 1, 1], [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2])
    }

    /// Output extent for input extent `dims`, or `None` when the window does not fit.
    pub fn output_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Unfolds one sample `(C, D, H, W)` into a `(C·KD·KH·KW, OD·OH·OW)` column matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, dims: [usize; 3], win: &Window3, out: [usize; 3], col: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = win.kernel;
    let [sd, sh, sw] = win.stride;
    let [pd, ph, pw] = win.pad;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            let valid_zy = zi >= 0 && (zi as usize) < d && yi >= 0 && (yi as usize) < h;
                            if !valid_zy {
                                dst[idx..idx + ow].fill(T::zero());
                                idx += ow;
                                continue;
                            }
                            let base = (zi as usize * h + yi as usize) * w;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[idx] = if xi >= 0 && (xi as usize) < w {
                                    plane[base + xi as usize]
                                } else {
                                    T::zero()
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `(C, D, H, W)`.
fn col2im<T: Scalar>(col: &[T], c: usize, dims: [usize; 3], win: &Window3, out: [usize; 3], x: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = win.kernel;
    let [sd, sh, sw] = win.stride;
    let [pd, ph, pw] = win.pad;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if !(zi >= 0 && (zi as usize) < d && yi >= 0 && (yi as usize) < h) {
                                idx += ow;
                                continue;
                            }
                            let base = (zi as usize * h + yi as usize) * w;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && (xi as usize) < w {
                                    plane[base + xi as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward 3D convolution. Returns the output buffer and its `(OD, OH, OW)`.
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    x_shape: [usize; 5],
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    win: &Window3,
) -> (Vec<T>, [usize; 3]) {
    let [n, c, d, h, w] = x_shape;
    let out = win
        .output_dims([d, h, w])
        .expect("conv3d window larger than padded input");
    let p: usize = out.iter().product();
    let ck = c * win.volume();
    let in_len = c * d * h * w;
    let mut y = vec![T::zero(); n * out_channels * p];
    let mut col = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cols: &[T] = if win.is_pointwise() {
            xs
        } else {
            im2col(xs, c, [d, h, w], win, out, &mut col);
            &col
        };
        let ys = &mut y[s * out_channels * p..(s + 1) * out_channels * p];
        T::gemm(
            out_channels,
            ck,
            p,
            T::one(),
            weight,
            (ck as isize, 1),
            cols,
            (p as isize, 1),
            T::zero(),
            ys,
            (p as isize, 1),
        );
        if let Some(b) = bias {
            for (o, row) in ys.chunks_mut(p).enumerate() {
                let bo = b[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    (y, out)
}

/// Gradients of a 3D convolution: `(d_input, d_weight, d_bias)`.
/// `need_input` skips the input gradient when the input is a constant.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    x_shape: [usize; 5],
    weight: &[T],
    out_channels: usize,
    win: &Window3,
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [n, c, d, h, w] = x_shape;
    let out = win.output_dims([d, h, w]).expect("conv3d geometry");
    let p: usize = out.iter().product();
    let ck = c * win.volume();
    let in_len = c * d * h * w;
    let mut gw = vec![T::zero(); out_channels * ck];
    let mut gb = vec![T::zero(); out_channels];
    let mut gx = if need_input { Some(vec![T::zero(); n * in_len]) } else { None };
    let pointwise = win.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ck * p] };
    let mut gcol = if pointwise || !need_input { Vec::new() } else { vec![T::zero(); ck * p] };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let gys = &grad_out[s * out_channels * p..(s + 1) * out_channels * p];
        for (o, row) in gys.chunks(p).enumerate() {
            gb[o] += row.iter().copied().sum::<T>();
        }
        let cols: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, [d, h, w], win, out, &mut col);
            &col
        };
        // dW += dY · colsᵀ
        T::gemm(
            out_channels,
            p,
            ck,
            T::one(),
            gys,
            (p as isize, 1),
            cols,
            (1, p as isize),
            T::one(),
            &mut gw,
            (ck as isize, 1),
        );
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx[s * in_len..(s + 1) * in_len];
            // dcols = Wᵀ · dY
            if pointwise {
                T::gemm(
                    ck,
                    out_channels,
                    p,
                    T::one(),
                    weight,
                    (1, ck as isize),
                    gys,
                    (p as isize, 1),
                    T::zero(),
                    gxs,
                    (p as isize, 1),
                );
            } else {
                T::gemm(
                    ck,
                    out_channels,
                    p,
                    T::one(),
                    weight,
                    (1, ck as isize),
                    gys,
                    (p as isize, 1),
                    T::zero(),
                    &mut gcol,
                    (p as isize, 1),
                );
                col2im(&gcol, c, [d, h, w], win, out, gxs);
            }
        }
    }
    (gx, gw, gb)
}

/// Max pooling with implicit `-inf` padding. Returns values, output dims and
/// the flat input index of each selected maximum.
pub fn maxpool3d_forward<T: Scalar>(
    x: &[T],
    x_shape: [usize; 5],
    win: &Window3,
) -> (Vec<T>, [usize; 3], Vec<usize>) {
    let [n, c, d, h, w] = x_shape;
    let out = win.output_dims([d, h, w]).expect("pool geometry");
    let [od, oh, ow] = out;
    let plane = d * h * w;
    let mut y = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(y.capacity());
    for nc in 0..n * c {
        let base = nc * plane;
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for a in 0..win.kernel[0] {
                        let zi = (zo * win.stride[0] + a) as isize - win.pad[0] as isize;
                        if zi < 0 || zi as usize >= d {
                            continue;
                        }
                        for b in 0..win.kernel[1] {
                            let yi = (yo * win.stride[1] + b) as isize - win.pad[1] as isize;
                            if yi < 0 || yi as usize >= h {
                                continue;
                            }
                            for e in 0..win.kernel[2] {
                                let xi = (xo * win.stride[2] + e) as isize - win.pad[2] as isize;
                                if xi < 0 || xi as usize >= w {
                                    continue;
                                }
                                let i = base + (zi as usize * h + yi as usize) * w + xi as usize;
                                if x[i] > best || best_i == usize::MAX {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (y, out, arg)
}

/// Separable bilinear resampling weights (half-pixel centres, edge clamped).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every `(H, W)` slice in a `(..., H, W)` buffer.
pub fn resize_bilinear<T: Scalar>(x: &[T], slices: usize, src: [usize; 2], dst: [usize; 2]) -> Vec<T> {
    let ty = bilinear_taps(src[0], dst[0]);
    let tx = bilinear_taps(src[1], dst[1]);
    let mut y = Vec::with_capacity(slices * dst[0] * dst[1]);
    for s in 0..slices {
        let plane = &x[s * src[0] * src[1]..(s + 1) * src[0] * src[1]];
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = plane[y0 * src[1] + x0] * (T::one() - fx) + plane[y0 * src[1] + x1] * fx;
                let bot = plane[y1 * src[1] + x0] * (T::one() - fx) + plane[y1 * src[1] + x1] * fx;
                y.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(g: &[T], slices: usize, src: [usize; 2], dst: [usize; 2]) -> Vec<T> {
    let ty = bilinear_taps(src[0], dst[0]);
    let tx = bilinear_taps(src[1], dst[1]);
    let mut gx = vec![T::zero(); slices * src[0] * src[1]];
    for s in 0..slices {
        let plane = &mut gx[s * src[0] * src[1]..(s + 1) * src[0] * src[1]];
        let gs = &g[s * dst[0] * dst[1]..(s + 1) * dst[0] * dst[1]];
        let mut k = 0;
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let v = gs[k];
                k += 1;
                plane[y0 * src[1] + x0] += v * (T::one() - fy) * (T::one() - fx);
                plane[y0 * src[1] + x1] += v * (T::one() - fy) * fx;
                plane[y1 * src[1] + x0] += v * fy * (T::one() - fx);
                plane[y1 * src[1] + x1] += v * fy * fx;
            }
        }
    }
    gx
}

/// Averages `(N, C, D, H, W)` over every spatial axis except `keep`
/// (2 = D, 3 = H, 4 = W), giving `(N, C, len(keep))`.
pub fn axis_mean<T: Scalar>(x: &[T], shape: [usize; 5], keep: usize) -> Vec<T> {
    let [n, c, d, h, w] = shape;
    let len = shape[keep];
    let norm = T::one() / T::from_usize_lossy(d * h * w / len);
    let mut y = vec![T::zero(); n * c * len];
    for nc in 0..n * c {
        let src = &x[nc * d * h * w..(nc + 1) * d * h * w];
        let dst = &mut y[nc * len..(nc + 1) * len];
        for z in 0..d {
            for r in 0..h {
                let row = &src[(z * h + r) * w..(z * h + r + 1) * w];
                match keep {
                    2 => dst[z] += row.iter().copied().sum::<T>(),
                    3 => dst[r] += row.iter().copied().sum::<T>(),
                    _ => dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b),
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= norm);
    }
    y
}

/// Adjoint of [`axis_mean`].
pub fn axis_mean_backward<T: Scalar>(g: &[T], shape: [usize; 5], keep: usize) -> Vec<T> {
    let [n, c, d, h, w] = shape;
    let len = shape[keep];
    let norm = T::one() / T::from_usize_lossy(d * h * w / len);
    let mut gx = vec![T::zero(); n * c * d * h * w];
    for nc in 0..n * c {
        let gs = &g[nc * len..(nc + 1) * len];
        let dst = &mut gx[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..d {
            for r in 0..h {
                let row = &mut dst[(z * h + r) * w..(z * h + r + 1) * w];
                match keep {
                    2 => row.iter_mut().for_each(|v| *v = gs[z] * norm),
                    3 => row.iter_mut().for_each(|v| *v = gs[r] * norm),
                    _ => row.iter_mut().zip(gs).for_each(|(v, &gv)| *v = gv * norm),
                }
            }
        }
    }
    gx
}

/// `y[n,c,z,r,q] = x[n,c,z,r,q] · gd[n,c,z] · gh[n,c,r] · gw[n,c,q]`.
pub fn coord_gate<T: Scalar>(x: &[T], shape: [usize; 5], gd: &[T], gh: &[T], gw: &[T]) -> Vec<T> {
    let [n, c, d, h, w] = shape;
    let mut y = Vec::with_capacity(x.len());
    for nc in 0..n * c {
        for z in 0..d {
            let a = gd[nc * d + z];
            for r in 0..h {
                let ab = a * gh[nc * h + r];
                let base = ((nc * d + z) * h + r) * w;
                for q in 0..w {
                    y.push(x[base + q] * ab * gw[nc * w + q]);
                }
            }
        }
    }
    y
}

/// Gradients of [`coord_gate`] with respect to `(x, gd, gh, gw)`.
pub fn coord_gate_backward<T: Scalar>(
    x: &[T],
    shape: [usize; 5],
    gd: &[T],
    gh: &[T],
    gw: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, d, h, w] = shape;
    let mut gx = vec![T::zero(); x.len()];
    let mut ggd = vec![T::zero(); gd.len()];
    let mut ggh = vec![T::zero(); gh.len()];
    let mut ggw = vec![T::zero(); gw.len()];
    for nc in 0..n * c {
        for z in 0..d {
            let a = gd[nc * d + z];
            for r in 0..h {
                let b = gh[nc * h + r];
                let base = ((nc * d + z) * h + r) * w;
                for q in 0..w {
                    let i = base + q;
                    let cw = gw[nc * w + q];
                    let gi = g[i];
                    let xi = x[i];
                    gx[i] = gi * a * b * cw;
                    let t = gi * xi;
                    ggd[nc * d + z] += t * b * cw;
                    ggh[nc * h + r] += t * a * cw;
                    ggw[nc * w + q] += t * a * b;
                }
            }
        }
    }
    (gx, ggd, ggh, ggw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an independent reference.
    fn conv_direct(x: &[f64], xs: [usize; 5], wt: &[f64], o: usize, win: &Window3) -> Vec<f64> {
        let [n, c, d, h, w] = xs;
        let [od, oh, ow] = win.output_dims([d, h, w]).unwrap();
        let [kd, kh, kw] = win.kernel;
        let mut y = vec![0.0; n * o * od * oh * ow];
        for s in 0..n {
            for oc in 0..o {
                for zo in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for e in 0..kw {
                                            let zi = (zo * win.stride[0] + a) as isize - win.pad[0] as isize;
                                            let yi = (yo * win.stride[1] + b) as isize - win.pad[1] as isize;
                                            let xi = (xo * win.stride[2] + e) as isize - win.pad[2] as isize;
                                            if zi < 0 || yi < 0 || xi < 0 {
                                                continue;
                                            }
                                            let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                            if zi >= d || yi >= h || xi >= w {
                                                continue;
                                            }
                                            acc += x[(((s * c + ci) * d + zi) * h + yi) * w + xi]
                                                * wt[(((oc * c + ci) * kd + a) * kh + b) * kw + e];
                                        }
                                    }
                                }
                            }
                            y[(((s * o + oc) * od + zo) * oh + yo) * ow + xo] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_reference() {
        let xs = [2, 3, 4, 7, 6];
        let win = Window3::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let x = pseudo(xs.iter().product(), 1);
        let w = pseudo(4 * 3 * 27, 2);
        let (y, _) = conv3d_forward(&x, xs, &w, 4, None, &win);
        let r = conv_direct(&x, xs, &w, 4, &win);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and = <w, dW>
        let xs = [2, 2, 3, 5, 5];
        let win = Window3::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let x = pseudo(xs.iter().product(), 3);
        let w = pseudo(3 * 2 * 27, 4);
        let (y, _) = conv3d_forward(&x, xs, &w, 3, None, &win);
        let g = pseudo(y.len(), 5);
        let (gx, gw, _) = conv3d_backward(&x, xs, &w, 3, &win, &g, true);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rx: f64 = x.iter().zip(gx.unwrap().iter()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
    }

    #[test]
    fn pointwise_conv_matches_direct() {
        let xs = [1, 4, 2, 3, 3];
        let win = Window3::same([1, 1, 1]);
        let x = pseudo(xs.iter().product(), 7);
        let w = pseudo(2 * 4, 8);
        let (y, _) = conv3d_forward(&x, xs, &w, 2, None, &win);
        let r = conv_direct(&x, xs, &w, 2, &win);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = pseudo(2 * 3 * 4, 9);
        let y = resize_bilinear(&x, 2, [3, 4], [7, 5]);
        let g = pseudo(y.len(), 10);
        let gx = resize_bilinear_backward(&g, 2, [3, 4], [7, 5]);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x = pseudo(12, 11);
        assert_eq!(resize_bilinear(&x, 1, [3, 4], [3, 4]), x);
    }

    #[test]
    fn pool_halves_spatial_dims() {
        let win = Window3::new([1, 3, 3], [1, 2, 2], [0, 1, 1]);
        assert_eq!(win.output_dims([10, 16, 16]), Some([10, 8, 8]));
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (y, _, arg) = maxpool3d_forward(&x, [1, 1, 1, 4, 4], &win);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }
}
