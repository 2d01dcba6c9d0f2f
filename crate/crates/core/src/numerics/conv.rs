//! Convolution kernels: dense (im2col + GEMM), depthwise, and the 2x2 stride-2
//! transposed convolution used for decoder upsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a 2-D convolution. `groups` is either 1 (dense) or equal to
/// both channel counts (depthwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" zero padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
            groups: 1,
            has_bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = (stride, stride);
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = (padding, padding);
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn bias_shape(&self) -> [usize; 4] {
        [self.out_channels, 1, 1, 1]
    }

    /// Receptive field size of one output unit (`fan_in` for initialization).
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!("degenerate conv spec {self:?}")));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if self.groups != 1
            && !(self.groups == self.in_channels && self.groups == self.out_channels)
        {
            return Err(Error::Shape(format!(
                "groups={} unsupported (only dense or depthwise)",
                self.groups
            )));
        }
        Ok(())
    }

    /// `floor((h + 2p - k) / s) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize, name: &str| {
            let padded = len + 2 * p;
            if k > padded {
                return Err(Error::Shape(format!(
                    "kernel {k} exceeds padded {name} {padded}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<()> {
        self.validate()?;
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv input has {} channels, spec expects in_channels={}",
                x.channels(),
                self.in_channels
            )));
        }
        if w.shape() != self.weight_shape() {
            return Err(Error::Shape(format!(
                "conv weight shape {:?}, expected {:?}",
                w.shape(),
                self.weight_shape()
            )));
        }
        match (b, self.has_bias) {
            (Some(b), true) if b.shape() != self.bias_shape() => Err(Error::Shape(format!(
                "conv bias shape {:?}, expected {:?}",
                b.shape(),
                self.bias_shape()
            ))),
            (None, true) => Err(Error::Shape("conv spec has bias but none given".into())),
            (Some(_), false) => Err(Error::Shape("conv spec has no bias but one given".into())),
            _ => Ok(()),
        }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, h: usize, w: usize) -> Result<Self> {
        let (oh, ow) = spec.output_size(h, w)?;
        Ok(Self {
            c: spec.in_channels,
            h,
            w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Source coordinate for output index `o` and tap `k`, if inside the input.
    #[inline]
    fn src(o: usize, k: usize, s: usize, p: usize, len: usize) -> Option<usize> {
        let v = (o * s + k) as isize - p as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.oh * self.ow;
        for c in 0..self.c {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((c * self.kh + a) * self.kw + b) * plane;
                    for oy in 0..self.oh {
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        match Self::src(oy, a, self.sh, self.ph, self.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &xc[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match Self::src(ox, b, self.sw, self.pw, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for c in 0..self.c {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((c * self.kh + a) * self.kw + b) * plane;
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, a, self.sh, self.ph, self.h) else {
                            continue;
                        };
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        for (ox, &g) in src.iter().enumerate() {
                            if let Some(ix) = Self::src(ox, b, self.sw, self.pw, self.w) {
                                dxc[iy * self.w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.check_input(x, weight, bias)?;
    let g = Geometry::new(spec, x.height(), x.width())?;
    let n = x.batch();
    let oc = spec.out_channels;
    let plane = g.oh * g.ow;
    let mut y = Tensor::zeros([n, oc, g.oh, g.ow]);
    if spec.is_depthwise() {
        depthwise_forward(x, weight, &g, &mut y);
    } else {
        let k = g.c * g.kh * g.kw;
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
        for ni in 0..n {
            let xs = x.sample(ni);
            let rhs: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            T::gemm(oc, k, plane, weight.data(), false, rhs, false, y.sample_mut(ni), false);
        }
    }
    if let Some(b) = bias {
        for ni in 0..n {
            let ys = y.sample_mut(ni);
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut ys[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`. `dx` is computed only when
/// requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let g = Geometry::new(spec, x.height(), x.width()).expect("validated in forward");
    let n = x.batch();
    let oc = spec.out_channels;
    let plane = g.oh * g.ow;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let db = spec.has_bias.then(|| {
        let mut db = Tensor::zeros(spec.bias_shape());
        for ni in 0..n {
            let ds = dy.sample(ni);
            for (o, v) in db.data_mut().iter_mut().enumerate() {
                *v += ds[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    if spec.is_depthwise() {
        depthwise_backward(x, weight, &g, dy, &mut dw, dx.as_mut());
        return (dx, dw, db);
    }
    let k = g.c * g.kh * g.kw;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcols = if need_dx && !pointwise { vec![T::zero(); k * plane] } else { Vec::new() };
    for ni in 0..n {
        let xs = x.sample(ni);
        let ds = dy.sample(ni);
        let rhs: &[T] = if pointwise {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        // dW += dY (oc x P) * cols^T (P x k)
        T::gemm(oc, plane, k, ds, false, rhs, true, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            if pointwise {
                T::gemm(k, oc, plane, weight.data(), true, ds, false, dx.sample_mut(ni), false);
            } else {
                T::gemm(k, oc, plane, weight.data(), true, ds, false, &mut dcols, false);
                g.col2im(&dcols, dx.sample_mut(ni));
            }
        }
    }
    (dx, dw, db)
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &Geometry, y: &mut Tensor<T>) {
    let taps = g.kh * g.kw;
    for ni in 0..x.batch() {
        for c in 0..g.c {
            let xc = &x.sample(ni)[c * g.h * g.w..(c + 1) * g.h * g.w];
            let wc = &w.data()[c * taps..(c + 1) * taps];
            let base = y.offset([ni, c, 0, 0]);
            let yc = &mut y.data_mut()[base..base + g.oh * g.ow];
            for a in 0..g.kh {
                for b in 0..g.kw {
                    let wv = wc[a * g.kw + b];
                    for oy in 0..g.oh {
                        let Some(iy) = Geometry::src(oy, a, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        let row = &xc[iy * g.w..(iy + 1) * g.w];
                        let out = &mut yc[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            if let Some(ix) = Geometry::src(ox, b, g.sw, g.pw, g.w) {
                                *o += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Geometry,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
) {
    let taps = g.kh * g.kw;
    for ni in 0..x.batch() {
        for c in 0..g.c {
            let xc = &x.sample(ni)[c * g.h * g.w..(c + 1) * g.h * g.w];
            let dyc = &dy.sample(ni)[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
            for a in 0..g.kh {
                for b in 0..g.kw {
                    let t = a * g.kw + b;
                    let wv = w.data()[c * taps + t];
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let Some(iy) = Geometry::src(oy, a, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            if let Some(ix) = Geometry::src(ox, b, g.sw, g.pw, g.w) {
                                let gv = dyc[oy * g.ow + ox];
                                acc += gv * xc[iy * g.w + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    let o = dx.offset([ni, c, iy, ix]);
                                    dx.data_mut()[o] += gv * wv;
                                }
                            }
                        }
                    }
                    dw.data_mut()[c * taps + t] += acc;
                }
            }
        }
    }
}

/// Kernel-2 stride-2 transposed convolution. `weight` is `(in, out, 2, 2)`;
/// the output is exactly twice the input size.
pub fn conv_transpose2x2<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, ci, h, w] = x.shape();
    let [wi, co, kh, kw] = weight.shape();
    if wi != ci || kh != 2 || kw != 2 {
        return Err(Error::Shape(format!(
            "transposed conv weight {:?} incompatible with input channels {ci}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [co, 1, 1, 1] {
            return Err(Error::Shape(format!("transposed conv bias shape {:?}", b.shape())));
        }
    }
    let plane = h * w;
    let mut z = vec![T::zero(); co * 4 * plane];
    let mut y = Tensor::zeros([n, co, 2 * h, 2 * w]);
    for ni in 0..n {
        // z[(o, a, b), p] = sum_c weight[c, (o, a, b)] * x[c, p]
        T::gemm(co * 4, ci, plane, weight.data(), true, x.sample(ni), false, &mut z, false);
        let ys = y.sample_mut(ni);
        for o in 0..co {
            let bv = bias.map_or(T::zero(), |b| b.data()[o]);
            for a in 0..2 {
                for b in 0..2 {
                    let zr = &z[((o * 2 + a) * 2 + b) * plane..][..plane];
                    for i in 0..h {
                        let row = (o * 2 * h + 2 * i + a) * 2 * w;
                        for j in 0..w {
                            ys[row + 2 * j + b] = zr[i * w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv_transpose2x2`]: `(dx, dweight, dbias)`.
pub fn conv_transpose2x2_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    has_bias: bool,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let [n, ci, h, w] = x.shape();
    let co = weight.shape()[1];
    let plane = h * w;
    let mut gz = vec![T::zero(); co * 4 * plane];
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut db = has_bias.then(|| Tensor::zeros([co, 1, 1, 1]));
    for ni in 0..n {
        let ds = dy.sample(ni);
        for o in 0..co {
            for a in 0..2 {
                for b in 0..2 {
                    let zr = &mut gz[((o * 2 + a) * 2 + b) * plane..][..plane];
                    for i in 0..h {
                        let row = (o * 2 * h + 2 * i + a) * 2 * w;
                        for j in 0..w {
                            zr[i * w + j] = ds[row + 2 * j + b];
                        }
                    }
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for o in 0..co {
                db.data_mut()[o] += gz[o * 4 * plane..(o + 1) * 4 * plane].iter().copied().sum::<T>();
            }
        }
        // dW (ci x co4) += X (ci x P) * Gz^T (P x co4)
        T::gemm(ci, plane, co * 4, x.sample(ni), false, &gz, true, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            T::gemm(ci, co * 4, plane, weight.data(), false, &gz, false, dx.sample_mut(ni), false);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward six-loop reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
        let (oh, ow) = spec.output_size(x.height(), x.width()).unwrap();
        let per_group_in = spec.in_channels / spec.groups;
        let per_group_out = spec.out_channels / spec.groups;
        Tensor::from_fn([x.batch(), spec.out_channels, oh, ow], |[n, o, oy, ox]| {
            let grp = o / per_group_out;
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for ci in 0..per_group_in {
                let c = grp * per_group_in + ci;
                for a in 0..spec.kernel.0 {
                    for bb in 0..spec.kernel.1 {
                        let iy = (oy * spec.stride.0 + a) as isize - spec.padding.0 as isize;
                        let ix = (ox * spec.stride.1 + bb) as isize - spec.padding.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                            acc += w.at([o, ci, a, bb]) * x.at([n, c, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn pointwise_identity_weight_is_identity() {
        let x = pseudo([2, 1, 5, 7], 1);
        let spec = ConvSpec::new(1, 1, 1).without_bias();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn all_ones_3x3_sums_the_padded_window() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let spec = ConvSpec::new(1, 1, 3).without_bias();
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.at([0, 0, 1, 1]), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at([0, 0, yy, xx]), 4.0);
        }
    }

    #[test]
    fn stride_two_halves_256() {
        let spec = ConvSpec::new(3, 8, 3).with_stride(2);
        assert_eq!(spec.output_size(256, 256).unwrap(), (128, 128));
    }

    #[test]
    fn matches_naive_for_dense_strided_and_depthwise() {
        let specs = [
            ConvSpec::new(3, 4, 3),
            ConvSpec::new(3, 4, 3).with_stride(2),
            ConvSpec::new(3, 5, 1),
            ConvSpec::new(2, 3, 3).with_padding(0).without_bias(),
            ConvSpec::depthwise(4, 3),
            ConvSpec::depthwise(4, 3).with_stride(2),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let x = pseudo([2, spec.in_channels, 7, 6], 10 + i as u64);
            let w = pseudo(spec.weight_shape(), 20 + i as u64);
            let b = spec.has_bias.then(|| pseudo(spec.bias_shape(), 30 + i as u64));
            let got = conv2d(&x, &w, b.as_ref(), spec).unwrap();
            let want = naive_conv(&x, &w, b.as_ref(), spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "spec {spec:?}");
        }
    }

    #[test]
    fn channel_mismatch_names_the_dimension() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let spec = ConvSpec::new(3, 1, 3);
        let err = conv2d(&x, &Tensor::zeros(spec.weight_shape()), Some(&Tensor::zeros(spec.bias_shape())), &spec)
            .unwrap_err()
            .to_string();
        assert!(err.contains("in_channels=3"), "{err}");
    }

    #[test]
    fn transposed_single_pixel_expands_to_block() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 2.5);
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv_transpose2x2(&x, &w, None).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn transposed_doubles_spatial_size_and_is_linear() {
        let x = pseudo([1, 3, 8, 8], 3);
        let w = pseudo([3, 2, 2, 2], 4);
        let y = conv_transpose2x2(&x, &w, None).unwrap();
        assert_eq!(y.shape(), [1, 2, 16, 16]);
        let zero = conv_transpose2x2(&Tensor::zeros([1, 3, 8, 8]), &w, None).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }
}
