use std::rc::Rc;

use crate::{gemm, Array, Float, Var};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Var<T> {
    /// 2-D convolution over `[N, C, H, W]` with a square `[O, C, k, k]` kernel
    /// and zero padding, lowered to im2col + GEMM.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let (nb, c, h, w) = self.value().dims4();
        let (o, ci, kh, kw) = weight.value().dims4();
        assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
        assert_eq!(kh, kw, "conv2d: only square kernels are supported");
        assert!(stride >= 1, "conv2d: stride must be positive");
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
        };
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kh, "conv2d: kernel larger than padded input");
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let (kr, n) = (geo.col_rows(), geo.col_cols());
        let x = self.value_rc();
        let wt = weight.value_rc();
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * n] };
        let mut out = vec![T::zero(); nb * o * n];
        for b in 0..nb {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let src: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut cols);
                &cols
            };
            gemm(o, kr, n, wt.data(), false, src, false, &mut out[b * o * n..(b + 1) * o * n], T::zero());
            if let Some(bias) = bias {
                for (oc, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut out[(b * o + oc) * n..(b * o + oc + 1) * n] {
                        *v += bv;
                    }
                }
            }
        }
        let value = Array::new(vec![nb, o, ho, wo], out);
        let mut parents: Vec<&Var<T>> = vec![self, weight];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[o], "conv2d: bias must have one entry per output channel");
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let xr = Rc::clone(&x);
        self.tape().op(value, &parents, move |g, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![T::zero(); nb * c * h * w]);
            let mut dw = need[1].then(|| vec![T::zero(); o * kr]);
            let mut cols = vec![T::zero(); kr * n];
            for b in 0..nb {
                let gb = &gd[b * o * n..(b + 1) * o * n];
                if let Some(dw) = dw.as_mut() {
                    let xb = &xr.data()[b * c * h * w..(b + 1) * c * h * w];
                    let src: &[T] = if geo.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &geo, &mut cols);
                        &cols
                    };
                    // dW += g_b · colsᵀ
                    gemm(o, n, kr, gb, false, src, true, dw, T::one());
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                    if geo.is_pointwise() {
                        gemm(kr, o, n, wt.data(), true, gb, false, dxb, T::zero());
                    } else {
                        gemm(kr, o, n, wt.data(), true, gb, false, &mut cols, T::zero());
                        col2im(&cols, &geo, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Array::new(vec![nb, c, h, w], d)),
                dw.map(|d| Array::new(vec![o, c, kh, kw], d)),
            ];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for b in 0..nb {
                        for (oc, acc) in db.iter_mut().enumerate() {
                            *acc += gd[(b * o + oc) * n..(b * o + oc + 1) * n].iter().copied().sum::<T>();
                        }
                    }
                    Array::new(vec![o], db)
                }));
            }
            grads
        })
    }
}
