//! Stateless kernels shared by the autodiff graph and by callers that only
//! need forward values.

use super::{NnError, Scalar, Tensor};

/// Numerically stable softmax of one row, in `f64`.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; row.len()];
    }
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row: Vec<f64> = x.row(r).iter().map(|v| v.as_f64()).collect();
        for (o, p) in out.row_mut(r).iter_mut().zip(softmax_row(&row)) {
            *o = T::from_f64(p);
        }
    }
    out
}

/// `ln Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `batch·q_len` rows of width `width`, keys/values
/// `batch·kv_len` rows; the key mask has one flag per key row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub width: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub(crate) fn validate(&self, q: usize, k: usize, v: usize, mask: usize) -> Result<(), NnError> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(NnError::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        let kv = self.batch * self.kv_len * self.width;
        if q != self.batch * self.q_len * self.width || k != kv || v != kv {
            return Err(NnError::Shape(format!("attention inputs do not match {self:?}")));
        }
        if mask != self.batch * self.kv_len {
            return Err(NnError::Shape(format!(
                "key mask has {mask} entries, expected {}",
                self.batch * self.kv_len
            )));
        }
        Ok(())
    }
}

/// Result of [`scaled_dot_attention`].
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    /// `batch·q_len × width`, heads concatenated.
    pub values: Vec<T>,
    /// Attention weights laid out `[batch][head][query][key]`.
    pub weights: Vec<f64>,
    /// Query rows (counted per head) whose keys were all masked.
    pub degenerate_rows: usize,
}

/// Multi-head scaled dot-product attention on already projected inputs.
///
/// Masked keys get `-inf` logits. A query row with no valid key yields zero
/// weights and a zero output row.
pub fn scaled_dot_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    key_valid: &[bool],
    shape: AttentionShape,
) -> Result<AttentionOutput<T>, NnError> {
    shape.validate(q.len(), k.len(), v.len(), key_valid.len())?;
    let AttentionShape { batch, q_len, kv_len, heads, width } = shape;
    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut values = vec![T::zero(); batch * q_len * width];
    let mut weights = vec![0.0; batch * heads * q_len * kv_len];
    let mut degenerate_rows = 0;
    let mut scores = vec![0.0; kv_len];
    let mut acc = vec![0.0; hd];
    for b in 0..batch {
        let mask = &key_valid[b * kv_len..(b + 1) * kv_len];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * width + off..][..hd];
                for j in 0..kv_len {
                    scores[j] = if mask[j] {
                        let krow = &k[(b * kv_len + j) * width + off..][..hd];
                        qrow.iter().zip(krow).map(|(a, c)| a.as_f64() * c.as_f64()).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                let probs = softmax_row(&scores);
                if !mask.iter().any(|&m| m) {
                    degenerate_rows += 1;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (j, &p) in probs.iter().enumerate() {
                    if p != 0.0 {
                        let vrow = &v[(b * kv_len + j) * width + off..][..hd];
                        for (a, x) in acc.iter_mut().zip(vrow) {
                            *a += p * x.as_f64();
                        }
                    }
                }
                let out = &mut values[(b * q_len + i) * width + off..][..hd];
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o = T::from_f64(*a);
                }
                let w0 = ((b * heads + h) * q_len + i) * kv_len;
                weights[w0..w0 + kv_len].copy_from_slice(&probs);
            }
        }
    }
    Ok(AttentionOutput { values, weights, degenerate_rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax_row(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let row: Vec<f64> = (0..7).map(|_| rng.random_range(-20.0..20.0)).collect();
            let c = rng.random_range(-100.0..100.0);
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let (a, b) = (softmax_row(&row), softmax_row(&shifted));
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let s = softmax(&x);
        for r in 0..2 {
            assert!((s.row(r).iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn all_masked_row_is_zero() {
        let shape = AttentionShape { batch: 1, q_len: 2, kv_len: 3, heads: 1, width: 2 };
        let q = vec![1.0f64; 4];
        let kv = vec![0.5f64; 6];
        let out = scaled_dot_attention(&q, &kv, &kv, &[false; 3], shape).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
        assert_eq!(out.degenerate_rows, 2);
    }

    #[test]
    fn rejects_indivisible_width() {
        let shape = AttentionShape { batch: 1, q_len: 1, kv_len: 1, heads: 3, width: 4 };
        let x = vec![0.0f64; 4];
        assert!(matches!(
            scaled_dot_attention(&x, &x, &x, &[true], shape),
            Err(NnError::Config(_))
        ));
    }
}
