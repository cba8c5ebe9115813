//! Dense row-major float64 arrays and the raw compute kernels the tape
//! primitives are built on.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array: a shape plus row-major f64 storage.
///
/// Storage is shared (`Arc`) so constants such as DFT bases and cached
/// spectrograms can be reused across tapes without copying. Values are
/// immutable after construction.
#[derive(Debug, Clone)]
pub struct NDArray {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl NDArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        NDArray { shape, data: data.into() }
    }

    pub fn scalar(v: f64) -> Self {
        NDArray::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NDArray::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        NDArray::new(shape, vec![v; n])
    }

    pub fn from_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        NDArray::new(shape, data.to_vec())
    }

    /// Standard-normal entries scaled by `std`, deterministic per `rng` state.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(std * gauss(rng));
        }
        NDArray::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<NDArray> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(NDArray { shape, data: Arc::clone(&self.data) })
    }

    pub fn bit_eq(&self, other: &NDArray) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Box-Muller standard normal draw.
pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

// ── GEMM wrappers ────────────────────────────────────────────────────

/// c = a[m,k] · b[k,n]
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = a[m,k] · b[n,k]ᵀ
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = a[k,m]ᵀ · b[k,n]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ── Convolution kernels (channels-first: [C, L]) ─────────────────────

pub fn conv1d_out_len(l: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if l + 2 * pad < k {
        return Err(Error::contract(format!(
            "conv1d input length {l} (+2*{pad} pad) shorter than kernel {k}"
        )));
    }
    Ok((l + 2 * pad - k) / stride + 1)
}

pub fn conv_transpose1d_out_len(l: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let raw = (l - 1) * stride + k;
    if raw <= 2 * pad {
        return Err(Error::contract(format!(
            "conv_transpose1d output length would be non-positive (l={l}, k={k}, stride={stride}, pad={pad})"
        )));
    }
    Ok(raw - 2 * pad)
}

/// Unfold x[cin, l] into cols[cin*k, l_out] with zero padding.
pub fn im2col(x: &[f64], cin: usize, l: usize, k: usize, stride: usize, pad: usize, l_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * l_out];
    for c in 0..cin {
        let xrow = &x[c * l..(c + 1) * l];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (j, slot) in row.iter_mut().enumerate() {
                let src = j * stride + kk;
                if src >= pad && src - pad < l {
                    *slot = xrow[src - pad];
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter cols[cin*k, l_out] back into dx[cin, l].
pub fn col2im(cols: &[f64], cin: usize, l: usize, k: usize, stride: usize, pad: usize, l_out: usize, dx: &mut [f64]) {
    for c in 0..cin {
        let dxrow = &mut dx[c * l..(c + 1) * l];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (j, v) in row.iter().enumerate() {
                let src = j * stride + kk;
                if src >= pad && src - pad < l {
                    dxrow[src - pad] += *v;
                }
            }
        }
    }
}

/// y[cout, l_out] = w[cout, cin, k] * x[cin, l] + bias, stride/pad as given.
pub fn conv1d_forward(
    x: &[f64], cin: usize, l: usize, w: &[f64], cout: usize, k: usize, bias: &[f64],
    stride: usize, pad: usize,
) -> Result<Vec<f64>> {
    let l_out = conv1d_out_len(l, k, stride, pad)?;
    let cols = im2col(x, cin, l, k, stride, pad, l_out);
    let mut y = vec![0.0; cout * l_out];
    gemm_nn(cout, cin * k, l_out, w, &cols, &mut y);
    for c in 0..cout {
        let b = bias[c];
        for v in &mut y[c * l_out..(c + 1) * l_out] {
            *v += b;
        }
    }
    Ok(y)
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv1d_backward(
    x: &[f64], cin: usize, l: usize, w: &[f64], cout: usize, k: usize,
    stride: usize, pad: usize, dy: &[f64],
    need_dx: bool, need_dw: bool,
) -> ConvGrads {
    let l_out = (l + 2 * pad - k) / stride + 1;
    let dw = if need_dw {
        let cols = im2col(x, cin, l, k, stride, pad, l_out);
        let mut dw = vec![0.0; cout * cin * k];
        gemm_nt(cout, l_out, cin * k, dy, &cols, &mut dw);
        Some(dw)
    } else {
        None
    };
    let db = if need_dw {
        let mut db = vec![0.0; cout];
        for c in 0..cout {
            db[c] = dy[c * l_out..(c + 1) * l_out].iter().sum();
        }
        Some(db)
    } else {
        None
    };
    let dx = if need_dx {
        let mut dcols = vec![0.0; cin * k * l_out];
        gemm_tn(cin * k, cout, l_out, w, dy, &mut dcols);
        let mut dx = vec![0.0; cin * l];
        col2im(&dcols, cin, l, k, stride, pad, l_out, &mut dx);
        Some(dx)
    } else {
        None
    };
    ConvGrads { dx, dw, db }
}

/// y[cout, l_out] = transposed conv of x[cin, l] with w[cin, cout, k].
pub fn conv_transpose1d_forward(
    x: &[f64], cin: usize, l: usize, w: &[f64], cout: usize, k: usize, bias: &[f64],
    stride: usize, pad: usize,
) -> Result<Vec<f64>> {
    let l_out = conv_transpose1d_out_len(l, k, stride, pad)?;
    // m[cout*k, l] = w[cin, cout*k]ᵀ · x[cin, l]
    let mut m = vec![0.0; cout * k * l];
    gemm_tn(cout * k, cin, l, w, x, &mut m);
    let mut y = vec![0.0; cout * l_out];
    for co in 0..cout {
        let yrow = &mut y[co * l_out..(co + 1) * l_out];
        let b = bias[co];
        for v in yrow.iter_mut() {
            *v = b;
        }
        for kk in 0..k {
            let mrow = &m[(co * k + kk) * l..(co * k + kk + 1) * l];
            for (t, v) in mrow.iter().enumerate() {
                let o = t * stride + kk;
                if o >= pad && o - pad < l_out {
                    yrow[o - pad] += *v;
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose1d_backward(
    x: &[f64], cin: usize, l: usize, w: &[f64], cout: usize, k: usize,
    stride: usize, pad: usize, dy: &[f64], l_out: usize,
    need_dx: bool, need_dw: bool,
) -> ConvGrads {
    // dm[cout*k, l]: gather of dy at the scatter targets
    let mut dm = vec![0.0; cout * k * l];
    for co in 0..cout {
        let dyrow = &dy[co * l_out..(co + 1) * l_out];
        for kk in 0..k {
            let dmrow = &mut dm[(co * k + kk) * l..(co * k + kk + 1) * l];
            for (t, v) in dmrow.iter_mut().enumerate() {
                let o = t * stride + kk;
                if o >= pad && o - pad < l_out {
                    *v = dyrow[o - pad];
                }
            }
        }
    }
    let dx = if need_dx {
        let mut dx = vec![0.0; cin * l];
        gemm_nn(cin, cout * k, l, w, &dm, &mut dx);
        Some(dx)
    } else {
        None
    };
    let dw = if need_dw {
        let mut dw = vec![0.0; cin * cout * k];
        gemm_nt(cin, l, cout * k, x, &dm, &mut dw);
        Some(dw)
    } else {
        None
    };
    let db = if need_dw {
        let mut db = vec![0.0; cout];
        for c in 0..cout {
            db[c] = dy[c * l_out..(c + 1) * l_out].iter().sum();
        }
        Some(db)
    } else {
        None
    };
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a = NDArray::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = NDArray::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let mut c = vec![0.0; 4];
        gemm_nn(2, 3, 2, a.data(), b.data(), &mut c);
        assert_eq!(c, vec![58., 64., 139., 154.]);

        // a · bᵀ with b stored as [2,3]
        let bt = NDArray::new(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]);
        let mut c2 = vec![0.0; 4];
        gemm_nt(2, 3, 2, a.data(), bt.data(), &mut c2);
        assert_eq!(c2, c);

        // aᵀ · b with a stored as [3,2]
        let at = NDArray::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]);
        let mut c3 = vec![0.0; 4];
        gemm_tn(2, 3, 2, at.data(), b.data(), &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn conv1d_matches_hand_computation() {
        // single channel, kernel [1, 2, 3], stride 1, no pad
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 2.0, 3.0];
        let y = conv1d_forward(&x, 1, 4, &w, 1, 3, &[0.0], 1, 0).unwrap();
        assert_eq!(y, vec![1. + 4. + 9., 2. + 6. + 12.]);
    }

    #[test]
    fn conv_transpose_inverts_shape() {
        let l = 10;
        let x = vec![1.0; 2 * l];
        let w = vec![0.5; 2 * 3 * 8];
        let y = conv_transpose1d_forward(&x, 2, l, &w, 3, 8, &[0.0; 3], 2, 3).unwrap();
        assert_eq!(y.len(), 3 * (2 * l));
    }
}
