//! Deformable 2-D convolution.
//!
//! Every kernel tap of every output location samples the input at its regular
//! grid position displaced by a learned `(dy, dx)`. Samples are bilinear and
//! the input is treated as zero outside its support, so a tap landing at
//! `py <= -1` reads exactly zero and a tap between the last row and the border
//! blends the edge value with zero.
//!
//! Offsets use a single group shared across input channels and are laid out
//! tap-major with `dy` before `dx`: channel `2t` holds `dy` of tap
//! `t = a * kw + b`, channel `2t + 1` its `dx`.

use crate::error::{Error, Result};
use crate::numerics::ConvSpec;
use crate::tensor::{Real, Tensor};

/// Number of offset channels for a `kh x kw` kernel.
pub fn offset_channels(kernel: (usize, usize)) -> usize {
    2 * kernel.0 * kernel.1
}

/// Bilinear value of channel `c` of sample `n` at real coordinates `(py, px)`.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, py: T, px: T, n: usize, c: usize) -> T {
    let plane = x.plane();
    let xc = &x.sample(n)[c * plane..(c + 1) * plane];
    Corners::new(py, px, x.height(), x.width()).value(xc)
}

/// Partial derivatives `(d/dpy, d/dpx)` of [`bilinear_sample`].
pub fn bilinear_sample_coord_grad<T: Real>(x: &Tensor<T>, py: T, px: T, n: usize, c: usize) -> (T, T) {
    let plane = x.plane();
    let xc = &x.sample(n)[c * plane..(c + 1) * plane];
    Corners::new(py, px, x.height(), x.width()).coord_grad(xc)
}

/// The four neighbours of a sampling point; out-of-support corners carry
/// weight zero.
#[derive(Clone, Copy)]
struct Corners<T> {
    idx: [usize; 4],
    valid: [bool; 4],
    ly: T,
    lx: T,
}

impl<T: Real> Corners<T> {
    fn new(py: T, px: T, h: usize, w: usize) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        let ly = py - fy;
        let lx = px - fx;
        let y0 = fy.to_isize().unwrap_or(isize::MIN / 2);
        let x0 = fx.to_isize().unwrap_or(isize::MIN / 2);
        let mut idx = [0; 4];
        let mut valid = [false; 4];
        for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let yy = y0.saturating_add(dy);
            let xx = x0.saturating_add(dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                valid[k] = true;
                idx[k] = yy as usize * w + xx as usize;
            }
        }
        Self { idx, valid, ly, lx }
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let (ly, lx) = (self.ly, self.lx);
        let one = T::one();
        [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx]
    }

    #[inline]
    fn corner_values(&self, xc: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for k in 0..4 {
            if self.valid[k] {
                v[k] = xc[self.idx[k]];
            }
        }
        v
    }

    #[inline]
    fn value(&self, xc: &[T]) -> T {
        let v = self.corner_values(xc);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    #[inline]
    fn coord_grad(&self, xc: &[T]) -> (T, T) {
        let [v00, v01, v10, v11] = self.corner_values(xc);
        let one = T::one();
        let (ly, lx) = (self.ly, self.lx);
        let dy = (one - lx) * (v10 - v00) + lx * (v11 - v01);
        let dx = (one - ly) * (v01 - v00) + ly * (v11 - v10);
        (dy, dx)
    }
}

struct Plan<T> {
    taps: usize,
    plane: usize,
    /// `corners[t * plane + p]` for sample-local position `p`.
    corners: Vec<Corners<T>>,
}

impl<T: Real> Plan<T> {
    fn new(offsets: &Tensor<T>, n: usize, spec: &ConvSpec, h: usize, w: usize) -> Self {
        let (kh, kw) = spec.kernel;
        let (ph, pw) = spec.padding;
        let taps = kh * kw;
        let plane = h * w;
        let off = offsets.sample(n);
        let mut corners = Vec::with_capacity(taps * plane);
        for a in 0..kh {
            for b in 0..kw {
                let t = a * kw + b;
                let dys = &off[2 * t * plane..(2 * t + 1) * plane];
                let dxs = &off[(2 * t + 1) * plane..(2 * t + 2) * plane];
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        let py = T::lit(i as f64 + a as f64 - ph as f64) + dys[p];
                        let px = T::lit(j as f64 + b as f64 - pw as f64) + dxs[p];
                        corners.push(Corners::new(py, px, h, w));
                    }
                }
            }
        }
        Self {
            taps,
            plane,
            corners,
        }
    }

    /// Deformable column matrix `(c * taps) x plane` for one sample.
    fn columns(&self, xs: &[T], channels: usize, cols: &mut [T]) {
        for c in 0..channels {
            let xc = &xs[c * self.plane..(c + 1) * self.plane];
            for t in 0..self.taps {
                let row = &mut cols[(c * self.taps + t) * self.plane..][..self.plane];
                let cs = &self.corners[t * self.plane..(t + 1) * self.plane];
                for (d, k) in row.iter_mut().zip(cs) {
                    *d = k.value(xc);
                }
            }
        }
    }
}

fn check<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    let (kh, kw) = spec.kernel;
    if spec.is_depthwise() || spec.stride != (1, 1) || spec.padding != ((kh - 1) / 2, (kw - 1) / 2) || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!(
            "deformable conv requires an odd kernel, stride 1 and same padding, got {spec:?}"
        )));
    }
    if x.channels() != spec.in_channels {
        return Err(Error::Shape(format!(
            "deformable conv input has {} channels, spec expects in_channels={}",
            x.channels(),
            spec.in_channels
        )));
    }
    let [n, c, h, w] = x.shape();
    let want = [n, offset_channels(spec.kernel), h, w];
    if offsets.shape() != want {
        return Err(Error::Shape(format!(
            "offset field shape {:?}, expected {:?} (2*kh*kw = {} channels)",
            offsets.shape(),
            want,
            want[1]
        )));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "deformable weight shape {:?}, expected {:?} for {c} input channels",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == spec.bias_shape() => Ok(()),
        (None, false) => Ok(()),
        _ => Err(Error::Shape("deformable conv bias does not match spec".into())),
    }
}

/// `out(n,o,i,j) = sum_c sum_t w(o,c,t) * sample(x, i + a_t - pad + dy, j + b_t - pad + dx) + bias(o)`.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check(x, offsets, weight, bias, spec)?;
    let [n, c, h, w] = x.shape();
    let oc = spec.out_channels;
    let plane = h * w;
    let k = c * spec.kernel.0 * spec.kernel.1;
    let mut cols = vec![T::zero(); k * plane];
    let mut y = Tensor::zeros([n, oc, h, w]);
    for ni in 0..n {
        let plan = Plan::new(offsets, ni, spec, h, w);
        plan.columns(x.sample(ni), c, &mut cols);
        let ys = y.sample_mut(ni);
        T::gemm(oc, k, plane, weight.data(), false, &cols, false, ys, false);
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut ys[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Ok(y)
}

pub struct DeformGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub doffsets: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Option<Tensor<T>>,
}

pub fn deform_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
    need_doffsets: bool,
) -> DeformGrads<T> {
    let [n, c, h, w] = x.shape();
    let oc = spec.out_channels;
    let plane = h * w;
    let taps = spec.kernel.0 * spec.kernel.1;
    let k = c * taps;
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut doffsets = need_doffsets.then(|| Tensor::zeros(offsets.shape()));
    let dbias = spec.has_bias.then(|| {
        let mut db = Tensor::zeros(spec.bias_shape());
        for ni in 0..n {
            let ds = dy.sample(ni);
            for (o, v) in db.data_mut().iter_mut().enumerate() {
                *v += ds[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    for ni in 0..n {
        let plan = Plan::new(offsets, ni, spec, h, w);
        let xs = x.sample(ni);
        let ds = dy.sample(ni);
        plan.columns(xs, c, &mut cols);
        T::gemm(oc, plane, k, ds, false, &cols, true, dweight.data_mut(), true);
        if !need_dx && !need_doffsets {
            continue;
        }
        T::gemm(k, oc, plane, weight.data(), true, ds, false, &mut dcols, false);
        for ci in 0..c {
            let xc = &xs[ci * plane..(ci + 1) * plane];
            for t in 0..taps {
                let g_row = &dcols[(ci * taps + t) * plane..][..plane];
                let cs = &plan.corners[t * plane..(t + 1) * plane];
                if let Some(dx) = dx.as_mut() {
                    let dxc = &mut dx.sample_mut(ni)[ci * plane..(ci + 1) * plane];
                    for (&g, corner) in g_row.iter().zip(cs) {
                        let wts = corner.weights();
                        for q in 0..4 {
                            if corner.valid[q] {
                                dxc[corner.idx[q]] += g * wts[q];
                            }
                        }
                    }
                }
                if let Some(doff) = doffsets.as_mut() {
                    let ds_off = doff.sample_mut(ni);
                    for (p, (&g, corner)) in g_row.iter().zip(cs).enumerate() {
                        let (gy, gx) = corner.coord_grad(xc);
                        ds_off[2 * t * plane + p] += g * gy;
                        ds_off[(2 * t + 1) * plane + p] += g * gx;
                    }
                }
            }
        }
    }
    DeformGrads {
        dx,
        doffsets,
        dweight,
        dbias,
    }
}
