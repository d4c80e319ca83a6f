//! Dense row-major tensors over `f32`/`f64` plus the three matrix kernels
//! the layers are built on.
//!
//! Training runs in 32-bit; gradient checking re-evaluates the same code in
//! 64-bit, so everything numeric is generic over [`Scalar`]. The matmul
//! kernels use fixed summation orders, which keeps results bit-deterministic
//! for a given element type.

use num_traits::Float;

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Default + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    /// Named to avoid clashing with `ToPrimitive::to_f64` from the `Float`
    /// supertraits.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: T) -> Tensor<T> {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must match shape {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Same data viewed under a new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    /// Elementwise cast between scalar types (f32 ↔ f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `out = a · b` for row-major `a: m×k`, `b: k×n`.
///
/// i-k-j loop order: the inner loop walks contiguous rows of `b` and `out`
/// with no cross-element reduction, so it vectorizes without reassociation.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// `out = a · bᵀ` for row-major `a: m×k`, `b: n×k`.
///
/// Each output element is a dot product of two contiguous rows, accumulated
/// in four independent lanes (fixed order, hence deterministic).
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = [T::zero(); 4];
            let chunks = k / 4;
            for c in 0..chunks {
                let base = c * 4;
                acc[0] += arow[base] * brow[base];
                acc[1] += arow[base + 1] * brow[base + 1];
                acc[2] += arow[base + 2] * brow[base + 2];
                acc[3] += arow[base + 3] * brow[base + 3];
            }
            let mut tail = T::zero();
            for t in chunks * 4..k {
                tail += arow[t] * brow[t];
            }
            out[i * n + j] = (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail;
        }
    }
}

/// `out = aᵀ · b` for row-major `a: k×m`, `b: k×n`.
///
/// Outer loop over the shared k dimension; the inner loop is the same
/// contiguous saxpy pattern as [`matmul`].
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aki * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    fn pseudo_random(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::CounterRng::new(seed);
        (0..len).map(|_| rng.range(-1.0, 1.0)).collect()
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let (m, k, n) = (7, 13, 9);
        let a = pseudo_random(m * k, 1);
        let b = pseudo_random(k * n, 2);
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut got);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }

        // a·bᵀ with b stored transposed: b_t[j][kk] = b[kk][j]
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut got_nt = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut got_nt);
        for (g, w) in got_nt.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }

        // aᵀ·b with a stored transposed: a_t[kk][i] = a[i][kk]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut got_tn = vec![0.0; m * n];
        matmul_tn(&at, &b, m, k, n, &mut got_tn);
        for (g, w) in got_tn.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_matmul_is_identity() {
        let n = 5;
        let mut eye = vec![0.0f32; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let x: Vec<f32> = (0..n * n).map(|i| i as f32).collect();
        let mut out = vec![0.0f32; n * n];
        matmul(&eye, &x, n, n, n, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn tensor_shape_bookkeeping() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.numel(), 24);
        let r = t.reshaped(&[6, 4]);
        assert_eq!(r.shape, vec![6, 4]);
        let d = r.cast::<f64>();
        assert_eq!(d.numel(), 24);
        assert!(d.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    #[should_panic(expected = "data length")]
    fn from_vec_rejects_mismatched_length() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]);
    }
}
