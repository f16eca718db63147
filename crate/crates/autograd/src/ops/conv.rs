//! Image ops in channel-major `[C, B, H, W]` layout: the im2col product
//! `W[O, C*k*k] @ cols[C*k*k, B*Ho*Wo]` lands directly in `[O, B, Ho, Wo]`.

use crate::scalar::{gemm, MatRef};
use crate::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_width(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx - 1) / self.stride + 1 } else { 0 };
        lo..hi.min(self.wo).max(lo)
    }

    /// Calls `f(col_offset, src_offset, len)` for every contiguous run of
    /// in-bounds samples; padding positions are never visited.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.h * self.w;
        let width = self.cols_width();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let cols = self.valid_cols(kx);
                    if cols.is_empty() {
                        continue;
                    }
                    for b in 0..self.b {
                        let base = (c * self.b + b) * plane;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy as usize >= self.h {
                                continue;
                            }
                            let dst = row * width + (b * self.ho + oy) * self.wo + cols.start;
                            let ix = cols.start * self.stride + kx - self.pad;
                            f(dst, base + iy as usize * self.w + ix, cols.len());
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.cols_rows() * self.cols_width()];
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            let out = &mut cols[dst..dst + len];
            if s == 1 {
                out.copy_from_slice(&x[src..src + len]);
            } else {
                out.iter_mut().zip(x[src..].iter().step_by(s)).for_each(|(o, v)| *o = *v);
            }
        });
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.c * self.b * self.h * self.w];
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            let g = &cols[dst..dst + len];
            if s == 1 {
                x[src..src + len].iter_mut().zip(g).for_each(|(o, v)| *o = *o + *v);
            } else {
                x[src..].iter_mut().step_by(s).zip(g).for_each(|(o, v)| *o = *o + *v);
            }
        });
        x
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution. `x`: `[C, B, H, W]`, `weight`: `[O, C, k, k]`,
    /// `bias`: `[O]`. Output `[O, B, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(weight);
        assert_eq!(vx.shape.len(), 4, "conv2d: input must be [C, B, H, W]");
        assert_eq!(vw.shape.len(), 4, "conv2d: weight must be [O, C, k, k]");
        let (c, b, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (o, k) = (vw.shape[0], vw.shape[2]);
        assert_eq!(vw.shape[1], c, "conv2d: channel mismatch");
        assert_eq!(vw.shape[3], k);
        assert_eq!(self.value(bias).numel(), o);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k);
        let geom = ConvGeom {
            c,
            b,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let (ckk, n) = (geom.cols_rows(), geom.cols_width());
        let cols = geom.im2col(&vx.data);
        let mut out = vec![T::zero(); o * n];
        gemm(&vw.data, MatRef::new(o, ckk), &cols, MatRef::new(ckk, n), &mut out, T::zero());
        let bv = &self.value(bias).data;
        for (row, bb) in out.chunks_mut(n).zip(bv) {
            row.iter_mut().for_each(|v| *v = *v + *bb);
        }
        let out = Tensor::new([o, b, geom.ho, geom.wo], out);
        self.push_op(
            out,
            &[x, weight, bias],
            Box::new(move |args| {
                let wv = &args.inputs[1].data;
                let g = args.grad;
                let gx = args.needs[0].then(|| {
                    let mut gcols = vec![T::zero(); ckk * n];
                    gemm(wv, MatRef::t(o, ckk), g, MatRef::new(o, n), &mut gcols, T::zero());
                    geom.col2im(&gcols)
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![T::zero(); o * ckk];
                    gemm(g, MatRef::new(o, n), &cols, MatRef::t(ckk, n), &mut gw, T::zero());
                    gw
                });
                let gb = args.needs[2].then(|| g.chunks(n).map(|r| r.iter().copied().sum()).collect());
                vec![gx, gw, gb]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[C, B, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape.len(), 4);
        let (cb, h, w) = (vx.shape[0] * vx.shape[1], vx.shape[2], vx.shape[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); cb * h2 * w2];
        for p in 0..cb {
            for y in 0..h2 {
                for xx in 0..w2 {
                    data[(p * h2 + y) * w2 + xx] = vx.data[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new([vx.shape[0], vx.shape[1], h2, w2], data);
        self.push_op(
            out,
            &[x],
            Box::new(move |args| {
                let mut g = vec![T::zero(); cb * h * w];
                for p in 0..cb {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let d = &mut g[(p * h + y / 2) * w + xx / 2];
                            *d = *d + args.grad[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}
