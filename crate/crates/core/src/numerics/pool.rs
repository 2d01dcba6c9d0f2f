use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Shape("pool kernel and stride must be positive".into()));
        }
        if self.kernel > padded {
            return Err(Error::Shape(format!(
                "pool kernel {} larger than padded input {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// In-bounds index range covered by window `o` along an axis of length `len`.
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let end = start + self.kernel as isize;
        (start.max(0) as usize, (end.min(len as isize)).max(0) as usize)
    }
}

/// Windowed max or mean. Max ignores padding; mean divides by the number of
/// in-bounds elements. For max pooling the flat argmax index of every output
/// is returned for the backward pass.
pub fn pool2d<T: Real>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    let oh = spec.output_len(h)?;
    let ow = spec.output_len(w)?;
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = if spec.kind == PoolKind::Max {
        vec![0u32; n * c * oh * ow]
    } else {
        Vec::new()
    };
    let plane = h * w;
    for nc in 0..n * c {
        let xs = &x.data()[nc * plane..(nc + 1) * plane];
        for oy in 0..oh {
            let (y0, y1) = spec.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = spec.window(ox, w);
                let out = (nc * oh + oy) * ow + ox;
                match spec.kind {
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let v = xs[iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_i = iy * w + ix;
                                }
                            }
                        }
                        y.data_mut()[out] = best;
                        argmax[out] = (nc * plane + best_i) as u32;
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += xs[iy * w + ix];
                            }
                        }
                        let count = ((y1 - y0) * (x1 - x0)) as f64;
                        y.data_mut()[out] = acc / T::lit(count);
                    }
                }
            }
        }
    }
    Ok((y, argmax))
}

pub fn pool2d_backward<T: Real>(
    x_shape: [usize; 4],
    spec: &PoolSpec,
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    match spec.kind {
        PoolKind::Max => {
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[i as usize] += g;
            }
        }
        PoolKind::Avg => {
            let [n, c, h, w] = x_shape;
            let [_, _, oh, ow] = dy.shape();
            let plane = h * w;
            for nc in 0..n * c {
                for oy in 0..oh {
                    let (y0, y1) = spec.window(oy, h);
                    for ox in 0..ow {
                        let (x0, x1) = spec.window(ox, w);
                        let count = ((y1 - y0) * (x1 - x0)) as f64;
                        let g = dy.data()[(nc * oh + oy) * ow + ox] / T::lit(count);
                        let dxs = &mut dx.data_mut()[nc * plane..(nc + 1) * plane];
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                dxs[iy * w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
