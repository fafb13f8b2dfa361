//! One-dimensional resampling matrices, applied separably with
//! [`Var::resample2d`](kineflow_tensor::Var::resample2d).

use kineflow_tensor::{Array, Float};

/// `[out, in]` bilinear weights with half-pixel centres:
/// source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the edges.
pub fn bilinear_matrix<T: Float>(out: usize, inp: usize) -> Array<T> {
    let mut m = vec![T::zero(); out * inp];
    let ratio = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let a = src - i0 as f64;
        m[i * inp + i0] += T::of(1.0 - a);
        m[i * inp + i1] += T::of(a);
    }
    Array::new(vec![out, inp], m)
}

/// `[out, in]` area-averaging weights: output cell `i` averages the input
/// interval `[i * in / out, (i + 1) * in / out)` with fractional overlap.
pub fn area_matrix<T: Float>(out: usize, inp: usize) -> Array<T> {
    let mut m = vec![T::zero(); out * inp];
    let ratio = inp as f64 / out as f64;
    for i in 0..out {
        let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
        let mut j = lo.floor() as usize;
        while (j as f64) < hi && j < inp {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            m[i * inp + j] = T::of(overlap / ratio);
            j += 1;
        }
    }
    Array::new(vec![out, inp], m)
}

/// Area weights for shrinking, bilinear for growing, identity when equal.
pub fn resize_matrix<T: Float>(out: usize, inp: usize) -> Array<T> {
    if out < inp {
        area_matrix(out, inp)
    } else {
        bilinear_matrix(out, inp)
    }
}
