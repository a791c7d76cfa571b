use super::{broadcast_strides, for_each_offset, Real};

/// Row-major matrix view used by [`gemm`]; `transposed` reads the stored
/// `rows×cols` buffer as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m×n, row-major) = a · b`, or `out += a · b` when `accumulate`.
pub(crate) fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: bounds asserted above; `out` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_TANH_COEF: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_exact<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

/// d/dx [x Φ(x)] = Φ(x) + x φ(x)
#[inline]
pub(crate) fn gelu_exact_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

#[inline]
pub(crate) fn gelu_tanh<T: Real>(x: T) -> T {
    let inner = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_TANH_COEF) * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + inner.tanh())
}

#[inline]
pub(crate) fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_TANH_COEF);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let half = T::from_f64(0.5);
    half * (T::ONE + th)
        + half * x * (T::ONE - th * th) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

/// Split a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = x[base];
            for j in 1..n {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::ZERO;
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] = out[base + j * inner] / total;
            }
        }
    }
    out
}

/// dx = y ⊙ (dy − Σ dy⊙y) along `axis`.
pub(crate) fn softmax_axis_backward<T: Real>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![T::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: T = (0..n)
                .map(|j| dy[base + j * inner] * y[base + j * inner])
                .sum();
            for j in 0..n {
                let p = base + j * inner;
                dx[p] = y[p] * (dy[p] - dot);
            }
        }
    }
    dx
}

/// Elementwise binary op with trailing-dimension broadcasting into `out_shape`.
pub(crate) fn broadcast_binary<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out_shape && out_shape.ends_with(b_shape) {
        let period = b.len();
        return a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % period]))
            .collect();
    }
    if b_shape == out_shape && out_shape.ends_with(a_shape) {
        let period = a.len();
        return b
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a[i % period], y))
            .collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut a_offs = Vec::with_capacity(numel);
    for_each_offset(out_shape, &sa, |o| a_offs.push(o));
    let mut out = Vec::with_capacity(numel);
    let mut idx = 0;
    for_each_offset(out_shape, &sb, |o| {
        out.push(f(a[a_offs[idx]], b[o]));
        idx += 1;
    });
    out
}

/// Sum a gradient of `from_shape` down to a broadcast source `to_shape`.
pub(crate) fn reduce_to_shape<T: Real>(grad: &[T], from_shape: &[usize], to_shape: &[usize]) -> Vec<T> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let to_len: usize = to_shape.iter().product();
    let mut out = vec![T::ZERO; to_len];
    if from_shape.ends_with(to_shape) {
        for (i, &g) in grad.iter().enumerate() {
            out[i % to_len] += g;
        }
        return out;
    }
    let st = broadcast_strides(to_shape, from_shape);
    let mut idx = 0;
    for_each_offset(from_shape, &st, |o| {
        out[o] += grad[idx];
        idx += 1;
    });
    out
}
