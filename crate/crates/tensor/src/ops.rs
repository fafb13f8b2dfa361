use std::rc::Rc;

use crate::array::{broadcast_binary, expand_to, numel, reduce_to_shape, strides};
use crate::{gemm, Array, Float, Var};

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Var<T> {
    /// Elementwise op with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let out = self.value().map(f);
        let x = self.value_rc();
        let y = Rc::new(out.clone());
        self.tape().op(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Array::new(g.shape().to_vec(), data))]
        })
    }

    pub fn add(&self, o: &Var<T>) -> Var<T> {
        let out = broadcast_binary(self.value(), o.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        self.tape().op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(g, &sa)),
                need[1].then(|| reduce_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, o: &Var<T>) -> Var<T> {
        let out = broadcast_binary(self.value(), o.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        self.tape().op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(g, &sa)),
                need[1].then(|| reduce_to_shape(g, &sb).map(|x| -x)),
            ]
        })
    }

    pub fn mul(&self, o: &Var<T>) -> Var<T> {
        let out = broadcast_binary(self.value(), o.value(), |a, b| a * b);
        let (a, b) = (self.value_rc(), o.value_rc());
        self.tape().op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(&broadcast_binary(g, &b, |g, b| g * b), a.shape())),
                need[1].then(|| reduce_to_shape(&broadcast_binary(g, &a, |g, a| g * a), b.shape())),
            ]
        })
    }

    pub fn div(&self, o: &Var<T>) -> Var<T> {
        let out = broadcast_binary(self.value(), o.value(), |a, b| a / b);
        let (a, b) = (self.value_rc(), o.value_rc());
        self.tape().op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(&broadcast_binary(g, &b, |g, b| g / b), a.shape())),
                need[1].then(|| {
                    let ga = broadcast_binary(g, &a, |g, a| g * a);
                    reduce_to_shape(&broadcast_binary(&ga, &b, |x, b| -x / (b * b)), b.shape())
                }),
            ]
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn sqr(&self) -> Var<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`; smooth everywhere, which keeps finite-difference checks clean.
    pub fn silu(&self) -> Var<T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum_all(&self) -> Var<T> {
        let out = Array::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        self.tape().op(out, &[self], move |g, _| {
            vec![Some(Array::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sums over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value().data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        self.tape()
            .op(Array::new(out_shape, out), &[self], move |g, _| {
                vec![Some(expand_to(g, &shape))]
            })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<T> {
        let len = self.shape()[axis].max(1);
        self.sum_axis(axis).scale(1.0 / len as f64)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let shape = shape.into();
        let old = self.shape().to_vec();
        let out = self.value().clone().reshape(shape);
        self.tape().op(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let out = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape().op(out, &[self], move |g, _| vec![Some(g.permute(&inverse))])
    }

    pub fn transpose(&self, a: usize, b: usize) -> Var<T> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`. The right operand may
    /// also be a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, o: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dimensions differ: {sa:?} × {sb:?}");
        let batch = numel(&sa[..sa.len() - 2]);
        let shared = sb.len() == 2;
        if !shared {
            assert_eq!(
                &sa[..sa.len() - 2],
                &sb[..sb.len() - 2],
                "matmul batch dimensions differ"
            );
        }
        let (a, b) = (self.value_rc(), o.value_rc());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bo = if shared { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[bo..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        self.tape()
            .op(Array::new(out_shape, out), &[self, o], move |g, need| {
                let mut ga = None;
                let mut gb = None;
                if need[0] {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * k * n };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..],
                            false,
                            &b.data()[bo..],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            T::zero(),
                        );
                    }
                    ga = Some(Array::new(a.shape().to_vec(), d));
                }
                if need[1] {
                    let mut d = vec![T::zero(); if shared { k * n } else { batch * k * n }];
                    for i in 0..batch {
                        let (bo, beta) = if shared {
                            (0, if i == 0 { T::zero() } else { T::one() })
                        } else {
                            (i * k * n, T::zero())
                        };
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..],
                            true,
                            &g.data()[i * m * n..],
                            false,
                            &mut d[bo..bo + k * n],
                            beta,
                        );
                    }
                    gb = Some(Array::new(b.shape().to_vec(), d));
                }
                vec![ga, gb]
            })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn cat(parts: &[&Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape().to_vec();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), first.len(), "cat rank mismatch");
                for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || x == y, "cat shape mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        parts[0]
            .tape()
            .op(Array::new(out_shape, out), parts, move |g, need| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for ((&len, shape), &needed) in lens.iter().zip(&shapes).zip(need) {
                    if needed {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        grads.push(Some(Array::new(shape.clone(), d)));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            })
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&self.value().data()[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape()
            .op(Array::new(out_shape, out), &[self], move |g, _| {
                let mut d = Array::zeros(shape.clone());
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    d.data_mut()[s..s + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(d)]
            })
    }

    /// Gathers entries `indices` of `axis`, in order.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Var<T> {
        let shape = self.shape().to_vec();
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let idx = indices.to_vec();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in &idx {
                assert!(i < full, "index {i} out of range for axis of length {full}");
                let s = (o * full + i) * inner;
                out.extend_from_slice(&self.value().data()[s..s + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = idx.len();
        self.tape()
            .op(Array::new(out_shape, out), &[self], move |g, _| {
                let mut d = Array::zeros(shape.clone());
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let s = (o * full + i) * inner;
                        let src = &g.data()[(o * idx.len() + j) * inner..][..inner];
                        for (a, &b) in d.data_mut()[s..s + inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![Some(d)]
            })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("softmax of a scalar");
        let x = self.value().data();
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let y = Rc::new(Array::new(shape.clone(), out));
        let yv = (*y).clone();
        self.tape().op(yv, &[self], move |g, _| {
            let mut d = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.data().chunks(n).zip(y.data().chunks(n)).zip(d.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(Array::new(shape.clone(), d))]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm_last(&self, eps: f64) -> Var<T> {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("layer norm of a scalar");
        let nf = T::of(n as f64);
        let eps = T::of(eps);
        let x = self.value().data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / n.max(1));
        for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * r;
            }
        }
        let y = Rc::new(Array::new(shape.clone(), out));
        let yv = (*y).clone();
        self.tape().op(yv, &[self], move |g, _| {
            let mut d = vec![T::zero(); g.len()];
            for (((gr, yr), dr), &r) in g
                .data()
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(d.chunks_mut(n))
                .zip(&inv_std)
            {
                let mg = gr.iter().copied().sum::<T>() / nf;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = r * (gi - mg - yi * mgy);
                }
            }
            vec![Some(Array::new(shape.clone(), d))]
        })
    }

    /// Separable linear resampling of the two trailing axes:
    /// `out = rows · x · colsᵀ` with `rows: [Ho, H]`, `cols: [Wo, W]`.
    pub fn resample2d(&self, rows: &Array<T>, cols: &Array<T>) -> Var<T> {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 2, "resample2d needs rank >= 2");
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let (ho, h2) = (rows.shape()[0], rows.shape()[1]);
        let (wo, w2) = (cols.shape()[0], cols.shape()[1]);
        assert_eq!((h, w), (h2, w2), "resample2d matrix shapes do not match input");
        let planes = numel(&shape[..nd - 2]);
        let rows = Rc::new(rows.clone());
        let cols = Rc::new(cols.clone());
        let x = self.value().data();
        let mut tmp = vec![T::zero(); ho * w];
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            gemm(ho, h, w, rows.data(), false, &x[p * h * w..], false, &mut tmp, T::zero());
            gemm(ho, w, wo, &tmp, false, cols.data(), true, &mut out[p * ho * wo..(p + 1) * ho * wo], T::zero());
        }
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        self.tape()
            .op(Array::new(out_shape, out), &[self], move |g, _| {
                let mut tmp = vec![T::zero(); h * wo];
                let mut d = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    // rowsᵀ · g · cols
                    gemm(h, ho, wo, rows.data(), true, &g.data()[p * ho * wo..], false, &mut tmp, T::zero());
                    gemm(h, wo, w, &tmp, false, cols.data(), false, &mut d[p * h * w..(p + 1) * h * w], T::zero());
                }
                vec![Some(Array::new(shape.clone(), d))]
            })
    }
}

/// Strides of a shape, exposed for kernels written outside this crate.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
}
