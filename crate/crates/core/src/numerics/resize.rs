use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-output-index interpolation taps along one axis (half-pixel centers).
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize with align-corners disabled. Same-size resizes return an
/// exact copy.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be at least 1x1".into()));
    }
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut y = Tensor::zeros([n, c, out_h, out_w]);
    let (ip, op) = (h * w, out_h * out_w);
    for nc in 0..n * c {
        let xs = &x.data()[nc * ip..(nc + 1) * ip];
        let ys = &mut y.data_mut()[nc * op..(nc + 1) * op];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::lit(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::lit(b.frac);
                let top = xs[a.lo * w + b.lo] * (T::one() - fx) + xs[a.lo * w + b.hi] * fx;
                let bot = xs[a.hi * w + b.lo] * (T::one() - fx) + xs[a.hi * w + b.hi] * fx;
                ys[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(y)
}

pub fn resize_bilinear_backward<T: Real>(x_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let [_, _, out_h, out_w] = dy.shape();
    if (h, w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = Tensor::zeros(x_shape);
    let (ip, op) = (h * w, out_h * out_w);
    for nc in 0..n * c {
        let gs = &dy.data()[nc * op..(nc + 1) * op];
        let dxs = &mut dx.data_mut()[nc * ip..(nc + 1) * ip];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::lit(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::lit(b.frac);
                let g = gs[oy * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dxs[a.lo * w + b.lo] += gt * (T::one() - fx);
                dxs[a.lo * w + b.hi] += gt * fx;
                dxs[a.hi * w + b.lo] += gb * (T::one() - fx);
                dxs[a.hi * w + b.hi] += gb * fx;
            }
        }
    }
    dx
}
