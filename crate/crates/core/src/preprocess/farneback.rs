//! Two-frame dense optical flow by polynomial expansion (Farnebäck).
//!
//! Each frame is locally approximated by `f(x) ≈ xᵀAx + bᵀx + c` through a
//! Gaussian-weighted least-squares fit. A displacement `d` between two frames
//! satisfies `b₂ = b₁ − 2Ad`; the per-pixel constraint is averaged over a
//! Gaussian window and solved coarse to fine over an image pyramid.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

/// Single-channel image in row-major order.
#[derive(Clone, Debug)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    fn zeros(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![0.0; h * w])
    }

    #[inline]
    fn at(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = c.clamp(0, self.w as isize - 1) as usize;
        self.data[r * self.w + c]
    }

    /// Bilinear sample with edge replication.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let (r, c) = (y0 as isize, x0 as isize);
        let top = self.at(r, c) * (1.0 - fx) + self.at(r, c + 1) * fx;
        let bot = self.at(r + 1, c) * (1.0 - fx) + self.at(r + 1, c + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge replication.
fn blur(p: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut s = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                s += k * p.at(y as isize, x as isize + i as isize - r);
            }
            tmp.data[y * p.w + x] = s;
        }
    }
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut s = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                s += k * tmp.at(y as isize + i as isize - r, x as isize);
            }
            out.data[y * p.w + x] = s;
        }
    }
    out
}

fn downsample(p: &Plane) -> Plane {
    let b = blur(p, &gaussian_kernel(1.0, 2));
    let (h, w) = (p.h / 2, p.w / 2);
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            // average of the 2x2 block centred between source pixels
            out.data[y * w + x] = 0.25
                * (b.at(2 * y as isize, 2 * x as isize)
                    + b.at(2 * y as isize + 1, 2 * x as isize)
                    + b.at(2 * y as isize, 2 * x as isize + 1)
                    + b.at(2 * y as isize + 1, 2 * x as isize + 1));
        }
    }
    out
}

/// Bilinear resize of a flow component to `(h, w)`, scaling values by `gain`.
fn upsample(p: &Plane, h: usize, w: usize, gain: f64) -> Plane {
    let sy = p.h as f64 / h as f64;
    let sx = p.w as f64 / w as f64;
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = p.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
            out.data[y * w + x] = gain * v;
        }
    }
    out
}

/// Polynomial coefficients per pixel: `[c, bx, by, axx, ayy, axy]`.
struct Expansion {
    coeff: [Plane; 6],
}

fn expansion_filters(radius: usize, sigma: f64) -> Vec<[f64; 6]> {
    let r = radius as isize;
    let mut g = Matrix6::<f64>::zeros();
    let mut basis = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (dx as f64, dy as f64);
            let wgt = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            let phi = Vector6::new(1.0, x, y, x * x, y * y, x * y);
            g += wgt * phi * phi.transpose();
            basis.push((wgt, phi));
        }
    }
    let gi = g.try_inverse().expect("expansion Gram matrix is positive definite");
    basis
        .into_iter()
        .map(|(wgt, phi)| {
            let f = gi * phi * wgt;
            [f[0], f[1], f[2], f[3], f[4], f[5]]
        })
        .collect()
}

fn expand(p: &Plane, filters: &[[f64; 6]], radius: usize) -> Expansion {
    let r = radius as isize;
    let mut coeff: [Plane; 6] = std::array::from_fn(|_| Plane::zeros(p.h, p.w));
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = [0.0; 6];
            let mut i = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = p.at(y as isize + dy, x as isize + dx);
                    for k in 0..6 {
                        acc[k] += filters[i][k] * v;
                    }
                    i += 1;
                }
            }
            for k in 0..6 {
                coeff[k].data[y * p.w + x] = acc[k];
            }
        }
    }
    Expansion { coeff }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarnebackParams {
    pub levels: usize,
    /// Half-width of the polynomial fit neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
    /// Standard deviation of the constraint averaging window.
    pub window_sigma: f64,
    pub iterations: usize,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            levels: 3,
            poly_n: 5,
            poly_sigma: 1.1,
            window_sigma: 2.0,
            iterations: 6,
        }
    }
}

/// Dense flow `(u, v)` from `a` to `b`: content at `x` in `a` is at `x + d(x)` in `b`.
pub fn farneback(a: &Plane, b: &Plane, params: &FarnebackParams) -> (Plane, Plane) {
    let filters = expansion_filters(params.poly_n, params.poly_sigma);
    let window = gaussian_kernel(params.window_sigma, (3.0 * params.window_sigma).ceil() as usize);

    let mut pyr_a = vec![a.clone()];
    let mut pyr_b = vec![b.clone()];
    for _ in 1..params.levels.max(1) {
        let last = pyr_a.last().unwrap();
        if last.h / 2 < 8 || last.w / 2 < 8 {
            break;
        }
        pyr_a.push(downsample(last));
        pyr_b.push(downsample(pyr_b.last().unwrap()));
    }

    let top = pyr_a.last().unwrap();
    let mut u = Plane::zeros(top.h, top.w);
    let mut v = Plane::zeros(top.h, top.w);
    for level in (0..pyr_a.len()).rev() {
        let (pa, pb) = (&pyr_a[level], &pyr_b[level]);
        if u.h != pa.h || u.w != pa.w {
            u = upsample(&u, pa.h, pa.w, 2.0);
            v = upsample(&v, pa.h, pa.w, 2.0);
        }
        let e1 = expand(pa, &filters, params.poly_n);
        let e2 = expand(pb, &filters, params.poly_n);
        for _ in 0..params.iterations {
            let (nu, nv) = refine(&e1, &e2, &u, &v, &window);
            u = nu;
            v = nv;
        }
    }
    (u, v)
}

fn refine(e1: &Expansion, e2: &Expansion, u: &Plane, v: &Plane, window: &[f64]) -> (Plane, Plane) {
    let (h, w) = (u.h, u.w);
    // G = AᵀA (symmetric: g11, g12, g22), h = AᵀΔb
    let mut terms: [Plane; 5] = std::array::from_fn(|_| Plane::zeros(h, w));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (u.data[i], v.data[i]);
            let (sy, sx) = (y as f64 + dy, x as f64 + dx);
            let c1 = |k: usize| e1.coeff[k].data[i];
            let c2 = |k: usize| e2.coeff[k].sample(sy, sx);
            let a11 = 0.5 * (c1(3) + c2(3));
            let a22 = 0.5 * (c1(4) + c2(4));
            let a12 = 0.25 * (c1(5) + c2(5));
            let db1 = -0.5 * (c2(1) - c1(1)) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (c2(2) - c1(2)) + a12 * dx + a22 * dy;
            terms[0].data[i] = a11 * a11 + a12 * a12;
            terms[1].data[i] = a12 * (a11 + a22);
            terms[2].data[i] = a12 * a12 + a22 * a22;
            terms[3].data[i] = a11 * db1 + a12 * db2;
            terms[4].data[i] = a12 * db1 + a22 * db2;
        }
    }
    let t: Vec<Plane> = terms.iter().map(|p| blur(p, window)).collect();
    let mut nu = Plane::zeros(h, w);
    let mut nv = Plane::zeros(h, w);
    for i in 0..h * w {
        let (g11, g12, g22, h1, h2) = (t[0].data[i], t[1].data[i], t[2].data[i], t[3].data[i], t[4].data[i]);
        let eps = 1e-3 * (g11 + g22) + 1e-12;
        let (g11, g22) = (g11 + eps, g22 + eps);
        let det = g11 * g22 - g12 * g12;
        nu.data[i] = (g22 * h1 - g12 * h2) / det;
        nv.data[i] = (g11 * h2 - g12 * h1) / det;
    }
    (nu, nv)
}
