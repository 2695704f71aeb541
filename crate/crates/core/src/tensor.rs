//! Dense row-major tensors and the handful of kernels the model needs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor; `data.len() == shape.iter().product()`, row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Builds a tensor and enforces the size and finiteness invariants.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::from_vec(&[r, c], data)
    }

    /// Uniform values in `[lo, hi)` from the caller's RNG.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of_f64(rng.gen_range(lo..hi))).collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("expected 2-D tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {ctx}")))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn scale_inplace(&mut self, c: S) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// `self += other`, shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Tensor<S>, c: S) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * *b;
        }
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    /// Matrix product `self (m,k) x other (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&mut out, &self.data, &other.data, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self (m,k) x other^T (n,k) -> (m,n)`; `other` stays row-major.
    pub fn matmul_bt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt: inner dims {k} vs {k2} (shapes {:?} x {:?}^T)",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_bt_into(&mut out, &self.data, &other.data, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self^T (k,m) x other (k,n) -> (m,n)`.
    pub fn matmul_tn(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_tn: inner dims {k} vs {k2} (shapes {:?}^T x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_tn_into(&mut out, &self.data, &other.data, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Row-wise softmax of a 2-D tensor, max-subtracted for stability.
    pub fn softmax_rows(&self) -> Result<Tensor<S>> {
        let (r, c) = self.dims2()?;
        if c == 0 {
            return Err(Error::Dimension("softmax_rows: empty row".into()));
        }
        let mut out = self.clone();
        for i in 0..r {
            softmax_row(out.row_mut(i));
        }
        out.check_finite("softmax_rows")?;
        Ok(out)
    }

    /// Per-row argmax of a 2-D tensor; ties break to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (r, c) = self.dims2().expect("argmax_rows wants 2-D");
        (0..r)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `out (m,n) += a (m,k) x b (k,n)`; ikj order so the inner loop streams rows.
pub fn matmul_into<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (out_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out (m,n) += a (m,k) x b^T (n,k)`; inner loop is a dot of contiguous
/// rows, accumulated in 8 independent lanes so the FMA chain pipelines.
pub fn matmul_bt_into<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for (out_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(a_row, b_row);
        }
    }
}

/// Lane-parallel dot product.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 8;
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for (ca, cb) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)).take(chunks) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = S::zero();
    for (&av, &bv) in a[chunks * LANES..].iter().zip(&b[chunks * LANES..]) {
        tail += av * bv;
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

/// `out (m,n) += a^T (k,m) x b (k,n)`.
pub fn matmul_tn_into<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)).take(k) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![3.25, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        // independent triple-loop reference multiply
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for k in 0..4 {
                    want += a.data()[i * 4 + k] * b.data()[k * 5 + j];
                }
                assert!((c.data()[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_bt_and_tn_agree_with_matmul() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[6, 5], -1.0, 1.0, &mut rng);
        // b_t holds b^T explicitly
        let mut bt = Tensor::<f64>::zeros(&[5, 6]);
        for i in 0..6 {
            for j in 0..5 {
                bt.data_mut()[j * 6 + i] = b.data()[i * 5 + j];
            }
        }
        let via_bt = a.matmul_bt(&bt).unwrap();
        let direct = a.matmul(&b).unwrap();
        for (x, y) in via_bt.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T (6,4), check a^T x b2 (6,5)
        let b2 = Tensor::<f64>::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let mut at = Tensor::<f64>::zeros(&[6, 4]);
        for i in 0..4 {
            for j in 0..6 {
                at.data_mut()[j * 4 + i] = a.data()[i * 6 + j];
            }
        }
        let via_tn = a.matmul_tn(&b2).unwrap();
        let direct2 = at.matmul(&b2).unwrap();
        for (x, y) in via_tn.data().iter().zip(direct2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let p = x.softmax_rows().unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let x = Tensor::<f64>::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let p = x.softmax_rows().unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let p = x.softmax_rows().unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (j, &v) in p.data().iter().enumerate() {
            let want = ((j as f64) + 1.0).exp() / z;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_row_errors() {
        let x = Tensor::<f64>::zeros(&[2, 0]);
        assert!(x.softmax_rows().is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(&[2], vec![1.0f64, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0f64, f64::INFINITY]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        let x = Tensor::<f64>::from_rows(&[vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        assert_eq!(x.argmax_rows(), vec![0, 1]);
    }
}
