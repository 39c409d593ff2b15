//! Direct NCHW kernels shared by f32 inference and the f64 gradient tape.

use num_traits::Float;

/// Geometry of a (grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_c * self.out_h() * self.out_w()
    }
}

/// Maps output row `oh` and kernel row `k` to an input row, if inside the image.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let p = (o * stride + k) as isize - pad as isize;
    (p >= 0 && (p as usize) < limit).then_some(p as usize)
}

pub fn conv2d<T: Float>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let ipg = g.in_per_group();
    let opg = g.out_per_group();
    let mut y = vec![T::zero(); g.out_len()];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let group = o / opg;
            let out = &mut y[(n * g.out_c + o) * oh_n * ow_n..][..oh_n * ow_n];
            if let Some(b) = bias {
                out.iter_mut().for_each(|v| *v = b[o]);
            }
            for ci in 0..ipg {
                let c = group * ipg + ci;
                let plane = &x[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((o * ipg + ci) * g.kh + ky) * g.kw + kx];
                        for oy in 0..oh_n {
                            let Some(iy) = src(oy, ky, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            let row = &plane[iy * g.in_w..][..g.in_w];
                            let orow = &mut out[oy * ow_n..][..ow_n];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                if let Some(ix) = src(ox, kx, g.stride, g.pad, g.in_w) {
                                    *ov = *ov + wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Float>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let ipg = g.in_per_group();
    let opg = g.out_per_group();
    let mut dx = vec![T::zero(); g.batch * g.in_c * g.in_h * g.in_w];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let group = o / opg;
            let dout = &dy[(n * g.out_c + o) * oh_n * ow_n..][..oh_n * ow_n];
            for ci in 0..ipg {
                let c = group * ipg + ci;
                let plane = &mut dx[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((o * ipg + ci) * g.kh + ky) * g.kw + kx];
                        for oy in 0..oh_n {
                            let Some(iy) = src(oy, ky, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            for ox in 0..ow_n {
                                if let Some(ix) = src(ox, kx, g.stride, g.pad, g.in_w) {
                                    let d = &mut plane[iy * g.in_w + ix];
                                    *d = *d + wv * dout[oy * ow_n + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of `conv2d` with respect to weights and bias.
pub fn conv2d_backward_params<T: Float>(g: &ConvGeom, dy: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let ipg = g.in_per_group();
    let opg = g.out_per_group();
    let mut dw = vec![T::zero(); g.out_c * ipg * g.kh * g.kw];
    let mut db = vec![T::zero(); g.out_c];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let group = o / opg;
            let dout = &dy[(n * g.out_c + o) * oh_n * ow_n..][..oh_n * ow_n];
            db[o] = dout.iter().fold(db[o], |a, &v| a + v);
            for ci in 0..ipg {
                let c = group * ipg + ci;
                let plane = &x[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = T::zero();
                        for oy in 0..oh_n {
                            let Some(iy) = src(oy, ky, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            for ox in 0..ow_n {
                                if let Some(ix) = src(ox, kx, g.stride, g.pad, g.in_w) {
                                    acc = acc + dout[oy * ow_n + ox] * plane[iy * g.in_w + ix];
                                }
                            }
                        }
                        let idx = ((o * ipg + ci) * g.kh + ky) * g.kw + kx;
                        dw[idx] = dw[idx] + acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

/// `y = γ·(x − μ)/sqrt(σ² + ε) + β` per channel, returned as per-channel `(scale, shift)`.
pub fn bn_affine<T: Float>(
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    std: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut scale = Vec::with_capacity(gamma.len());
    let mut shift = Vec::with_capacity(gamma.len());
    for k in 0..gamma.len() {
        let s = gamma[k] / (std[k] * std[k] + eps).sqrt();
        scale.push(s);
        shift.push(beta[k] - s * mean[k]);
    }
    (scale, shift)
}

/// Applies a per-channel affine map in place.
pub fn channel_affine<T: Float>(
    x: &mut [T],
    channels: usize,
    plane: usize,
    scale: &[T],
    shift: &[T],
) {
    for (i, chunk) in x.chunks_mut(plane).enumerate() {
        let k = i % channels;
        for v in chunk {
            *v = *v * scale[k] + shift[k];
        }
    }
}

pub fn global_avg_pool<T: Float>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let inv = T::one() / T::from(plane).unwrap();
    (0..batch * channels)
        .map(|i| {
            x[i * plane..(i + 1) * plane]
                .iter()
                .fold(T::zero(), |a, &v| a + v)
                * inv
        })
        .collect()
}

pub fn global_avg_pool_backward<T: Float>(dy: &[T], plane: usize) -> Vec<T> {
    let inv = T::one() / T::from(plane).unwrap();
    dy.iter()
        .flat_map(|&d| std::iter::repeat_n(d * inv, plane))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let g = ConvGeom {
            batch: 1,
            in_c: 1,
            in_h: 3,
            in_w: 3,
            out_c: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            groups: 1,
        };
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        assert_eq!(conv2d(&g, &x, &w, None), x);
    }

    #[test]
    fn strided_shapes() {
        let g = ConvGeom {
            batch: 2,
            in_c: 3,
            in_h: 8,
            in_w: 7,
            out_c: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            groups: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (4, 4));
    }
}
