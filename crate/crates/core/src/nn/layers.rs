//! Layers with explicit forward/backward passes.
//!
//! Layers own only [`ParamId`] handles; weights live in a [`ParamSet`] so the
//! optimiser, checkpoint writer, and finite-difference checks can treat the
//! whole model as one flat vector. Backward passes accumulate into an
//! optional gradient set (frozen networks pass `None`) and return the input
//! gradient only when asked for.

use super::params::{ParamId, ParamSet};
use super::tensor::{gemm, Real, Tensor};
use crate::par;
use crate::rng::SeededRng;

/// Square `k × k` convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize, col: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            F::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], c: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.iter_mut().for_each(|v| *v = F::zero());
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let crow = &src[y * w..(y + 1) * w];
                    for (xx, &g) in crow.iter().enumerate() {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            prow[sx as usize] = prow[sx as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (cin * k * k) as f64;
        let weight = ps.add_normal(format!("{name}.weight"), vec![cout, cin, k, k], (2.0 / fan_in).sqrt(), rng);
        let bias = ps.add_zeros(format!("{name}.bias"), vec![cout]);
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
        }
    }

    /// Same as [`Conv2d::new`] but with all-zero weights.
    pub fn new_zeroed<F: Real>(ps: &mut ParamSet<F>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = ps.add_zeros(format!("{name}.weight"), vec![cout, cin, k, k]);
        let bias = ps.add_zeros(format!("{name}.bias"), vec![cout]);
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
        }
    }

    pub fn forward<F: Real>(&self, ps: &ParamSet<F>, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w, k) = (x.h, x.w, self.k);
        let hw = h * w;
        let kk = self.cin * k * k;
        let wt = ps.get(self.weight);
        let b = ps.get(self.bias);
        let items = par::map_range(x.n, |i| {
            let mut col = vec![F::zero(); kk * hw];
            im2col(x.item(i), self.cin, h, w, k, &mut col);
            let mut out = vec![F::zero(); self.cout * hw];
            for (co, row) in out.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
            gemm(false, false, self.cout, kk, hw, wt, &col, F::one(), &mut out);
            out
        });
        Tensor::from_vec(x.n, self.cout, h, w, items.concat())
    }

    pub fn backward<F: Real>(
        &self,
        ps: &ParamSet<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: Option<&mut ParamSet<F>>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let (h, w, k) = (x.h, x.w, self.k);
        let hw = h * w;
        let kk = self.cin * k * k;
        let wt = ps.get(self.weight);
        let want_params = grads.is_some();
        let per_item = par::map_range(x.n, |i| {
            let mut col = vec![F::zero(); kk * hw];
            im2col(x.item(i), self.cin, h, w, k, &mut col);
            let g = dy.item(i);
            let pgrad = want_params.then(|| {
                let mut dw = vec![F::zero(); self.cout * kk];
                gemm(false, true, self.cout, hw, kk, g, &col, F::zero(), &mut dw);
                let db: Vec<F> = g.chunks(hw).map(|r| r.iter().copied().sum()).collect();
                (dw, db)
            });
            let dx = need_dx.then(|| {
                gemm(true, false, kk, self.cout, hw, wt, g, F::zero(), &mut col);
                let mut dx = vec![F::zero(); self.cin * hw];
                col2im(&col, self.cin, h, w, k, &mut dx);
                dx
            });
            (pgrad, dx)
        });
        let mut dxs = Vec::new();
        let mut grads = grads;
        for (pgrad, dx) in per_item {
            if let (Some(gs), Some((dw, db))) = (grads.as_deref_mut(), pgrad) {
                accumulate(gs.get_mut(self.weight), &dw);
                accumulate(gs.get_mut(self.bias), &db);
            }
            if let Some(dx) = dx {
                dxs.push(dx);
            }
        }
        need_dx.then(|| Tensor::from_vec(x.n, self.cin, h, w, dxs.concat()))
    }
}

fn accumulate<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Fully connected layer on `n × in` rows (tensor shape `n × in × 1 × 1`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = ps.add_normal(
            format!("{name}.weight"),
            vec![fan_out, fan_in],
            gain * (1.0 / fan_in as f64).sqrt(),
            rng,
        );
        let bias = ps.add_zeros(format!("{name}.bias"), vec![fan_out]);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn new_zeroed<F: Real>(ps: &mut ParamSet<F>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = ps.add_zeros(format!("{name}.weight"), vec![fan_out, fan_in]);
        let bias = ps.add_zeros(format!("{name}.bias"), vec![fan_out]);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Real>(&self, ps: &ParamSet<F>, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.item_len(), self.fan_in, "linear input width");
        let n = x.n;
        let b = ps.get(self.bias);
        let mut out = Vec::with_capacity(n * self.fan_out);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(false, true, n, self.fan_in, self.fan_out, &x.data, ps.get(self.weight), F::one(), &mut out);
        Tensor::matrix(n, self.fan_out, out)
    }

    pub fn backward<F: Real>(
        &self,
        ps: &ParamSet<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: Option<&mut ParamSet<F>>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let n = x.n;
        if let Some(gs) = grads {
            gemm(true, false, self.fan_out, n, self.fan_in, &dy.data, &x.data, F::one(), gs.get_mut(self.weight));
            let db = gs.get_mut(self.bias);
            for row in dy.data.chunks(self.fan_out) {
                accumulate(db, row);
            }
        }
        need_dx.then(|| {
            let mut dx = vec![F::zero(); n * self.fan_in];
            gemm(false, false, n, self.fan_out, self.fan_in, &dy.data, ps.get(self.weight), F::zero(), &mut dx);
            Tensor::from_vec(x.n, x.c, x.h, x.w, dx)
        })
    }
}

pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn silu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of SiLU given the pre-activation input.
pub fn silu_backward<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (F::one() - s))
        })
        .collect();
    Tensor::from_vec(x.n, x.c, x.h, x.w, data)
}

/// 2×2 average pooling (spatial dims must be even).
pub fn avgpool2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2));
    let (oh, ow) = (x.h / 2, x.w / 2);
    let quarter = F::lit(0.25);
    let mut out = Vec::with_capacity(x.n * x.c * oh * ow);
    for plane in x.data.chunks(x.h * x.w) {
        for y in 0..oh {
            for xx in 0..ow {
                let a = plane[2 * y * x.w + 2 * xx];
                let b = plane[2 * y * x.w + 2 * xx + 1];
                let c = plane[(2 * y + 1) * x.w + 2 * xx];
                let d = plane[(2 * y + 1) * x.w + 2 * xx + 1];
                out.push((a + b + c + d) * quarter);
            }
        }
    }
    Tensor::from_vec(x.n, x.c, oh, ow, out)
}

pub fn avgpool2_backward<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let quarter = F::lit(0.25);
    let mut out = vec![F::zero(); dy.n * dy.c * h * w];
    for (plane, g) in out.chunks_mut(h * w).zip(dy.data.chunks(dy.h * dy.w)) {
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = g[(y / 2) * dy.w + xx / 2] * quarter;
            }
        }
    }
    Tensor::from_vec(dy.n, dy.c, h, w, out)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = vec![F::zero(); x.n * x.c * h * w];
    for (plane, src) in out.chunks_mut(h * w).zip(x.data.chunks(x.h * x.w)) {
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    Tensor::from_vec(x.n, x.c, h, w, out)
}

pub fn upsample2_backward<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let (oh, ow) = (dy.h / 2, dy.w / 2);
    let mut out = vec![F::zero(); dy.n * dy.c * oh * ow];
    for (plane, g) in out.chunks_mut(oh * ow).zip(dy.data.chunks(dy.h * dy.w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let d = &mut plane[(y / 2) * ow + xx / 2];
                *d = *d + g[y * dy.w + xx];
            }
        }
    }
    Tensor::from_vec(dy.n, dy.c, oh, ow, out)
}

/// Adds a per-(item, channel) bias given as an `n × c` matrix.
pub fn add_channel_bias<F: Real>(x: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    assert_eq!((bias.n, bias.item_len()), (x.n, x.c));
    let hw = x.h * x.w;
    let mut out = x.clone();
    for (idx, plane) in out.data.chunks_mut(hw).enumerate() {
        let b = bias.data[idx];
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
    out
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let hw = dy.h * dy.w;
    Tensor::matrix(dy.n, dy.c, dy.data.chunks(hw).map(|p| p.iter().copied().sum()).collect())
}

/// Row-wise L2 normalisation of an `n × d` matrix.
pub fn l2_normalize<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let d = x.item_len();
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::lit(1e-12));
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
    out
}

pub fn l2_normalize_backward<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let d = x.item_len();
    let mut out = Vec::with_capacity(x.data.len());
    for (row, g) in x.data.chunks(d).zip(dy.data.chunks(d)) {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::lit(1e-12));
        let dot: F = row.iter().zip(g).map(|(&a, &b)| a * b).sum();
        let n3 = norm * norm * norm;
        out.extend(row.iter().zip(g).map(|(&v, &gv)| gv / norm - v * dot / n3));
    }
    Tensor::from_vec(x.n, x.c, x.h, x.w, out)
}
