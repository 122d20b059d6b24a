//! 2-D cross-correlation (im2col + GEMM), parallel over the batch with a
//! fixed-order reduction of weight gradients.

use rayon::prelude::*;

use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
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

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w) = (self.height as isize, self.width as isize);
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * ow + ox] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w) = (self.height as isize, self.width as isize);
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

struct Conv2dOp {
    geo: Conv2dGeometry,
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let geo = self.geo;
        let (x, weight) = (inputs[0], inputs[1]);
        let (k, p, cout) = (geo.patch(), geo.positions(), geo.out_channels);
        let in_size = geo.in_channels * geo.height * geo.width;
        let w = weight.data();
        let g = grad.data();
        let need_x = needs[0];
        let need_w = needs[1];
        let mut gx = vec![T::zero(); if need_x { x.len() } else { 0 }];
        let per_sample = |b: usize, gx_b: Option<&mut [T]>| -> Option<Vec<T>> {
            let g_b = &g[b * cout * p..(b + 1) * cout * p];
            let x_b = &x.data()[b * in_size..(b + 1) * in_size];
            let owned;
            let cols: &[T] = if geo.is_pointwise() {
                x_b
            } else {
                let mut c = vec![T::zero(); k * p];
                geo.im2col(x_b, &mut c);
                owned = c;
                &owned
            };
            if let Some(gx_b) = gx_b {
                if geo.is_pointwise() {
                    T::gemm(k, cout, p, T::one(), w, 1, k as isize, g_b, p as isize, 1, T::zero(), gx_b, p as isize, 1);
                } else {
                    let mut gcols = vec![T::zero(); k * p];
                    T::gemm(k, cout, p, T::one(), w, 1, k as isize, g_b, p as isize, 1, T::zero(), &mut gcols, p as isize, 1);
                    geo.col2im(&gcols, gx_b);
                }
            }
            need_w.then(|| {
                let mut gw = vec![T::zero(); cout * k];
                T::gemm(cout, p, k, T::one(), g_b, p as isize, 1, cols, 1, p as isize, T::zero(), &mut gw, k as isize, 1);
                gw
            })
        };
        let partials: Vec<Option<Vec<T>>> = if need_x {
            gx.par_chunks_mut(in_size)
                .enumerate()
                .map(|(b, gx_b)| per_sample(b, Some(gx_b)))
                .collect()
        } else {
            (0..geo.batch).into_par_iter().map(|b| per_sample(b, None)).collect()
        };
        let gw = need_w.then(|| {
            let mut acc = vec![T::zero(); cout * k];
            for part in partials.into_iter().flatten() {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a += v;
                }
            }
            Tensor::new(weight.shape(), acc)
        });
        let gx = need_x.then(|| Tensor::new(x.shape(), gx));
        Ok(vec![gx.transpose()?, gw.transpose()?])
    }
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<(Tensor<T>, Conv2dGeometry)> {
    let (sx, sw) = (x.shape(), weight.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
        return Err(Error::shape("conv2d", &[sx, sw]));
    }
    let geo = Conv2dGeometry {
        batch: sx[0],
        in_channels: sx[1],
        height: sx[2],
        width: sx[3],
        out_channels: sw[0],
        kernel_h: sw[2],
        kernel_w: sw[3],
        stride,
        padding,
    };
    if geo.height + 2 * padding < geo.kernel_h || geo.width + 2 * padding < geo.kernel_w {
        return Err(Error::shape("conv2d", &[sx, sw]));
    }
    let (k, p, cout) = (geo.patch(), geo.positions(), geo.out_channels);
    let in_size = geo.in_channels * geo.height * geo.width;
    let w = weight.data();
    let mut out = vec![T::zero(); geo.batch * cout * p];
    out.par_chunks_mut(cout * p).enumerate().for_each(|(b, o)| {
        let x_b = &x.data()[b * in_size..(b + 1) * in_size];
        if geo.is_pointwise() {
            T::gemm(cout, k, p, T::one(), w, k as isize, 1, x_b, p as isize, 1, T::zero(), o, p as isize, 1);
        } else {
            let mut cols = vec![T::zero(); k * p];
            geo.im2col(x_b, &mut cols);
            T::gemm(cout, k, p, T::one(), w, k as isize, 1, &cols, p as isize, 1, T::zero(), o, p as isize, 1);
        }
    });
    let value = Tensor::new(&[geo.batch, cout, geo.out_height(), geo.out_width()], out)?;
    Ok((value, geo))
}

impl<'t, T: Real> Var<'t, T> {
    /// Cross-correlation of `[b, cin, h, w]` with `[cout, cin, kh, kw]`;
    /// output extent `(h + 2·padding − kh) / stride + 1`.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let (value, geo) = conv2d_forward(&self.value(), &weight.value(), stride, padding)?;
        Ok(self.tape().push(value, &[self, weight], Conv2dOp { geo }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;

    #[test]
    fn strided_same_padding_shape() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        // Corner sees a 2x2 patch of ones, centre a full 3x3 patch.
        let v = y.value();
        assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
    }

    #[test]
    fn matches_direct_loop() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..2 * 3 * 3 * 3).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let xt = Tensor::new(&[2, 3, 4, 4], x).unwrap();
        let wt = Tensor::new(&[2, 3, 3, 3], w).unwrap();
        let (y, _) = conv2d_forward(&xt, &wt, 1, 1).unwrap();
        for b in 0..2 {
            for o in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                    if (0..4).contains(&yy) && (0..4).contains(&xx) {
                                        acc += xt.at(&[b, c, yy as usize, xx as usize]) * wt.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        assert_eq!(y.at(&[b, o, i, j]), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(x.conv2d(w, 1, 1).is_err());
    }
}
