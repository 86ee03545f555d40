//! Dense row-major `f64` tensors and the raw numeric kernels shared by the
//! autodiff graph and the evaluation-only inference paths.
//!
//! Every reduction in this file runs in one fixed order, so results are
//! bitwise reproducible across runs regardless of build or thread count
//! (nothing here spawns threads).

use crate::error::{Error, Result};

/// Dense tensor: a shape vector plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// 1-element tensor holding a scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Row-major matrix from a list of rows (rows must have equal length).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "Tensor::from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows when viewed as a matrix (a vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 0,
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.is_matrix());
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Reinterprets the data under a new shape of identical volume.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn transpose(&self) -> Tensor {
        assert!(self.is_matrix(), "transpose needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

fn mat_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(Error::Shape {
            op,
            detail: format!("expected a matrix, got shape {:?}", t.shape),
        })
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize; the lane-combination order is fixed, keeping results
/// reproducible run-to-run.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

/// `op(a) @ op(b)` where `ta`/`tb` transpose their argument. Row-sparse
/// left operands are common here (zero-imputed rating vectors), so the
/// inner kernels skip zero multipliers; with finite inputs that never
/// changes the result bitwise, it only saves work.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = mat_dims(a, "matmul")?;
    let (br, bc) = mat_dims(b, "matmul")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!(
                "inner dims differ: {:?}{} x {:?}{}",
                a.shape,
                if ta { "ᵀ" } else { "" },
                b.shape,
                if tb { "ᵀ" } else { "" }
            ),
        });
    }
    let mut out = vec![0.0; m * n];
    // Transposition is a stride swap: a row-major (r, c) matrix read as its
    // transpose has row stride 1 and column stride c.
    let (rsa, csa) = if ta { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
    let (rsb, csb) = if tb { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
    // Sound: the dims were validated against both buffers above, and with
    // beta = 0 the kernel treats `out` as write-only.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = mat_dims(x, "softmax_rows")?;
    if c == 0 {
        return Err(Error::Shape {
            op: "softmax_rows",
            detail: "zero-width rows".into(),
        });
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// uᵀ B v for plain vectors; the building block of the bilinear decoder.
pub fn bilinear_form(u: &[f64], b: &Tensor, v: &[f64]) -> Result<f64> {
    let (br, bc) = mat_dims(b, "bilinear_form")?;
    if u.len() != br || v.len() != bc {
        return Err(Error::Shape {
            op: "bilinear_form",
            detail: format!("u:{} B:{:?} v:{}", u.len(), b.shape(), v.len()),
        });
    }
    let mut acc = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        acc += ui * dot(b.row(i), v);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_all_transpose_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]).unwrap();
        let nn = matmul(&a, &b, false, false).unwrap();
        assert_eq!(nn.data(), &[58.0, 64.0, 139.0, 154.0]);
        // (AᵀB with A pre-transposed) == nn
        let nt = matmul(&a, &b.transpose(), false, true).unwrap();
        assert_eq!(nt.data(), nn.data());
        let tn = matmul(&a.transpose(), &b, true, false).unwrap();
        assert_eq!(tn.data(), nn.data());
        let tt = matmul(&a.transpose(), &b.transpose(), true, true).unwrap();
        assert_eq!(tt.data(), nn.data());
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&a, &b, false, false).is_err());
        assert!(matmul(&a, &b, false, true).is_ok());
    }

    #[test]
    fn softmax_rows_is_stochastic_and_symmetric_on_equal_scores() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let q = softmax_rows(&x).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5]);
        let x = Tensor::from_rows(&[vec![2.0_f64.ln(), 0.0]]).unwrap();
        let q = softmax_rows(&x).unwrap();
        assert!((q.at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.at(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_shift_invariant() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let y = x.map(|v| v + 123.0);
        let qx = softmax_rows(&x).unwrap();
        let qy = softmax_rows(&y).unwrap();
        for (a, b) in qx.data().iter().zip(qy.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_form_hand_value() {
        // u=[1,0], B=[[0,2],[0,0]], v=[0,1] → uᵀBv = 2
        let b = Tensor::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let g = bilinear_form(&[1.0, 0.0], &b, &[0.0, 1.0]).unwrap();
        assert_eq!(g, 2.0);
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn check_finite_trips_on_nan() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
        assert!(Tensor::scalar(1.0).check_finite("test").is_ok());
    }
}
