use crate::Float;

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Float> Array<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "array of shape {shape:?} needs {} elements, got {}",
            numel(&shape),
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 array, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two arrays of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Float>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Self {
        let nd = self.shape.len();
        assert_eq!(axes.len(), nd, "permute needs one entry per axis");
        let mut seen = vec![false; nd];
        for &a in axes {
            assert!(a < nd && !seen[a], "invalid permutation {axes:?}");
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return self.clone();
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        if self.data.is_empty() {
            return Self::new(out_shape, out);
        }
        let last = nd - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let mut idx = vec![0usize; nd];
        let mut base = 0usize;
        loop {
            for i in 0..inner {
                out.push(self.data[base + i * inner_stride]);
            }
            // advance the outer counter
            let mut d = last;
            loop {
                if d == 0 {
                    return Self::new(out_shape, out);
                }
                d -= 1;
                idx[d] += 1;
                base += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                base -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = strides(shape);
    let off = nd - shape.len();
    (0..nd)
        .map(|i| {
            if i < off || shape[i - off] == 1 && out[i] != 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visits every element of the broadcast shape with the matching offsets of two operands.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let nd = out_shape.len();
    if numel(out_shape) == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0);
        return;
    }
    let last = nd - 1;
    let inner = out_shape[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for i in 0..inner {
            f(oa + i * ia, ob + i * ib);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise `f(a, b)` under broadcasting.
pub fn broadcast_binary<T: Float>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    if b.len() == 1 && b.ndim() <= a.ndim() {
        let s = b.data[0];
        return a.map(|x| f(x, s));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let sa = aligned_strides(&a.shape, &out_shape);
    let sb = aligned_strides(&b.shape, &out_shape);
    let mut out = Vec::with_capacity(numel(&out_shape));
    for_each_broadcast(&out_shape, &sa, &sb, |i, j| out.push(f(a.data[i], b.data[j])));
    Array::new(out_shape, out)
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn reduce_to_shape<T: Float>(g: &Array<T>, shape: &[usize]) -> Array<T> {
    if g.shape == shape {
        return g.clone();
    }
    let mut out = Array::zeros(shape.to_vec());
    if out.len() == 1 {
        out.data[0] = g.sum();
        return out;
    }
    let st = aligned_strides(shape, &g.shape);
    let sg = strides(&g.shape);
    for_each_broadcast(&g.shape, &sg, &st, |i, j| out.data[j] += g.data[i]);
    out
}

/// Broadcasts `a` up to `shape` by copying.
pub fn expand_to<T: Float>(a: &Array<T>, shape: &[usize]) -> Array<T> {
    if a.shape == shape {
        return a.clone();
    }
    let sa = aligned_strides(&a.shape, shape);
    let zero = vec![0; shape.len()];
    let mut out = Vec::with_capacity(numel(shape));
    for_each_broadcast(shape, &sa, &zero, |i, _| out.push(a.data[i]));
    Array::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let a = Array::<f64>::new(vec![2, 3, 4], (0..24).map(f64::from).collect());
        let p = a.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(p.data()[(i * 2 + j) * 3 + k], a.data()[(j * 3 + k) * 4 + i]);
                }
            }
        }
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_in_shape() {
        let a = Array::<f64>::new(vec![2, 1, 3], (0..6).map(f64::from).collect());
        let b = Array::<f64>::new(vec![4, 1], (0..4).map(f64::from).collect());
        let c = broadcast_binary(&a, &b, |x, y| x + 10.0 * y);
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.data()[(4 + 2) * 3 + 1], 4.0 + 20.0);
        let r = reduce_to_shape(&Array::<f64>::ones(vec![2, 4, 3]), &[4, 1]);
        assert_eq!(r.data(), &[6.0; 4]);
        let e = expand_to(&b, &[2, 4, 3]);
        assert_eq!(e.data()[3 * 3 + 2], 3.0);
    }

    #[test]
    fn incompatible_shapes_do_not_broadcast() {
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_none());
        assert_eq!(broadcast_shape(&[3], &[5, 1]), Some(vec![5, 3]));
    }
}
