//! Dense row-major `f64` tensors with the handful of kernels the networks
//! here need.
//!
//! Matrix products route through `ndarray`'s GEMM. Large products are split
//! into fixed-size row chunks evaluated in parallel; the chunking is a
//! constant of the build, never the thread count, so results are bitwise
//! reproducible regardless of parallelism.

use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row chunk size for parallel GEMM and elementwise kernels.
const ROW_CHUNK: usize = 2048;
const ELEM_CHUNK: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_slice_2d(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(vec![rows, cols], data.to_vec())
    }

    /// Row vector `[1, n]`.
    pub fn row(data: &[f64]) -> Self {
        Self {
            shape: vec![1, data.len()],
            data: data.to_vec(),
        }
    }

    /// `[rows, n]` tensor with every row equal to `data`.
    pub fn tile_rows(rows: usize, data: &[f64]) -> Self {
        let n = data.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(data);
        }
        Self {
            shape: vec![rows, n],
            data: out,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn rows2(&self) -> usize {
        self.shape[0]
    }

    pub fn cols2(&self) -> usize {
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        let mut out = self.clone();
        apply_elementwise(&mut out.data, &f);
        out
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = self.clone();
        zip_elementwise(&mut out.data, &other.data, &f);
        Ok(out)
    }

    /// 2-D transpose (materialized).
    pub fn transposed2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose wants a 2-d tensor, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

/// Apply `f` in place over fixed-size element chunks (parallel, order-free).
fn apply_elementwise(data: &mut [f64], f: &(impl Fn(f64) -> f64 + Sync)) {
    if data.len() >= 2 * ELEM_CHUNK {
        data.par_chunks_mut(ELEM_CHUNK).for_each(|chunk| {
            for v in chunk {
                *v = f(*v);
            }
        });
    } else {
        for v in data {
            *v = f(*v);
        }
    }
}

fn zip_elementwise(a: &mut [f64], b: &[f64], f: &(impl Fn(f64, f64) -> f64 + Sync)) {
    if a.len() >= 2 * ELEM_CHUNK {
        a.par_chunks_mut(ELEM_CHUNK)
            .zip(b.par_chunks(ELEM_CHUNK))
            .for_each(|(ca, cb)| {
                for (va, vb) in ca.iter_mut().zip(cb.iter()) {
                    *va = f(*va, *vb);
                }
            });
    } else {
        for (va, vb) in a.iter_mut().zip(b.iter()) {
            *va = f(*va, *vb);
        }
    }
}

fn view2(data: &[f64], m: usize, n: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((m, n), data).expect("checked shape")
}

/// Below this operation count a plain loop beats the GEMM dispatch.
const SMALL_MATMUL_OPS: usize = 4096;

fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `C = A·B` for `[m,k]·[k,n]`, row-chunked over `m`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols2() != b.rows2() {
        return Err(Error::ShapeMismatch(format!(
            "matmul on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows2(), a.cols2(), b.cols2());
    if m * k * n <= SMALL_MATMUL_OPS {
        return Tensor::new(vec![m, n], matmul_naive(&a.data, &b.data, m, k, n));
    }
    let mut out = vec![0.0; m * n];
    let bv = view2(&b.data, k, n);
    if m >= 2 * ROW_CHUNK {
        out.par_chunks_mut(ROW_CHUNK * n)
            .zip(a.data.par_chunks(ROW_CHUNK * k))
            .for_each(|(oc, ac)| {
                let rows = ac.len() / k;
                let av = view2(ac, rows, k);
                let mut ov = ArrayViewMut2::from_shape((rows, n), oc).expect("chunk shape");
                ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
            });
    } else {
        let av = view2(&a.data, m, k);
        let mut ov = ArrayViewMut2::from_shape((m, n), &mut out[..]).expect("shape");
        ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    }
    Tensor::new(vec![m, n], out)
}

/// `C = A·Bᵀ` for `[m,k]·[n,k]ᵀ`, row-chunked over `m`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols2() != b.cols2() {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows2(), a.cols2(), b.rows2());
    if m * k * n <= SMALL_MATMUL_OPS {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        return Tensor::new(vec![m, n], out);
    }
    let mut out = vec![0.0; m * n];
    let bv = view2(&b.data, n, k);
    let bt = bv.t();
    if m >= 2 * ROW_CHUNK {
        out.par_chunks_mut(ROW_CHUNK * n)
            .zip(a.data.par_chunks(ROW_CHUNK * k))
            .for_each(|(oc, ac)| {
                let rows = ac.len() / k;
                let av = view2(ac, rows, k);
                let mut ov = ArrayViewMut2::from_shape((rows, n), oc).expect("chunk shape");
                ndarray::linalg::general_mat_mul(1.0, &av, &bt, 0.0, &mut ov);
            });
    } else {
        let av = view2(&a.data, m, k);
        let mut ov = ArrayViewMut2::from_shape((m, n), &mut out[..]).expect("shape");
        ndarray::linalg::general_mat_mul(1.0, &av, &bt, 0.0, &mut ov);
    }
    Tensor::new(vec![m, n], out)
}

/// `C = Aᵀ·B` for `[m,k]ᵀ·[m,n]`. The contraction runs over `m`, so the
/// product is accumulated from fixed row chunks summed in order.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.rows2() != b.rows2() {
        return Err(Error::ShapeMismatch(format!(
            "matmul_tn on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows2(), a.cols2(), b.cols2());
    if m * k * n <= SMALL_MATMUL_OPS {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let brow = &b.data[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                let orow = &mut out[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        return Tensor::new(vec![k, n], out);
    }
    if m >= 2 * ROW_CHUNK {
        let partials: Vec<Vec<f64>> = a
            .data
            .par_chunks(ROW_CHUNK * k)
            .zip(b.data.par_chunks(ROW_CHUNK * n))
            .map(|(ac, bc)| {
                let rows = ac.len() / k;
                let av = view2(ac, rows, k);
                let bv = view2(bc, rows, n);
                let mut part = vec![0.0; k * n];
                let mut pv = ArrayViewMut2::from_shape((k, n), &mut part[..]).expect("shape");
                ndarray::linalg::general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut pv);
                part
            })
            .collect();
        let mut out = vec![0.0; k * n];
        for part in partials {
            for (o, p) in out.iter_mut().zip(part.iter()) {
                *o += p;
            }
        }
        Tensor::new(vec![k, n], out)
    } else {
        let av = view2(&a.data, m, k);
        let bv = view2(&b.data, m, n);
        let mut out = vec![0.0; k * n];
        let mut ov = ArrayViewMut2::from_shape((k, n), &mut out[..]).expect("shape");
        ndarray::linalg::general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut ov);
        Tensor::new(vec![k, n], out)
    }
}

/// Batched matmul `[B,m,k]·[B,k,n] → [B,m,n]`, parallel over the batch.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "bmm on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = b.shape[2];
    let mut out = vec![0.0; bs * m * n];
    out.par_chunks_mut(m * n)
        .zip(a.data.par_chunks(m * k).zip(b.data.par_chunks(k * n)))
        .for_each(|(oc, (ac, bc))| {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += ac[i * k + l] * bc[l * n + j];
                    }
                    oc[i * n + j] = acc;
                }
            }
        });
    Tensor::new(vec![bs, m, n], out)
}

/// Swap the last two axes of a 3-D tensor.
pub fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "transpose_last2 wants 3-d, got {:?}",
            a.shape
        )));
    }
    let (bs, m, n) = (a.shape[0], a.shape[1], a.shape[2]);
    let mut out = vec![0.0; bs * m * n];
    for b in 0..bs {
        let src = &a.data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Tensor::new(vec![bs, n, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let c = matmul_nn(&eye, &a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.7 - 2.0).collect()).unwrap();
        let b = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let c = matmul_nn(&a, &b).unwrap();
        let c_nt = matmul_nt(&a, &b.transposed2().unwrap()).unwrap();
        let c_tn = matmul_tn(&a.transposed2().unwrap(), &b).unwrap();
        for (x, y) in c.data().iter().zip(c_nt.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in c.data().iter().zip(c_tn.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn chunked_matmul_matches_small_path() {
        // m large enough to trigger the parallel row-chunked path
        let m = 2 * ROW_CHUNK + 37;
        let k = 8;
        let n = 6;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 40503) % 997) as f64 / 498.5 - 1.0).collect();
        let ta = Tensor::new(vec![m, k], a.clone()).unwrap();
        let tb = Tensor::new(vec![k, n], b.clone()).unwrap();
        let fast = matmul_nn(&ta, &tb).unwrap();
        // naive reference
        for i in (0..m).step_by(979) {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((fast.data()[i * n + j] - acc).abs() < 1e-10);
            }
        }
        // rerun is bitwise identical
        let again = matmul_nn(&ta, &tb).unwrap();
        assert_eq!(fast, again);

        let tn = matmul_tn(&ta, &ta).unwrap();
        let tn2 = matmul_tn(&ta, &ta).unwrap();
        assert_eq!(tn, tn2);
    }

    #[test]
    fn bmm_small() {
        let a = Tensor::new(vec![2, 2, 2], vec![1., 0., 0., 1., 2., 0., 0., 2.]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![3., 4., 5., 6.]).unwrap();
        let c = bmm(&a, &b).unwrap();
        assert_eq!(c.data(), &[3., 4., 10., 12.]);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul_nn(&a, &b).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
