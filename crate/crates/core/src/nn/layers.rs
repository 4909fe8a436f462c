//! Parameterized building blocks on top of [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::functional::AttentionShape;
use super::{Graph, NnError, ParamId, ParamStore, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) resampled until it falls within two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::from_f64(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Seeded initializer. Each parameter draws from its own stream keyed by
/// `(seed, name)`, so values do not depend on registration order.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        let digest: [u8; 32] =
            Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update(name.as_bytes()).finalize().into();
        ChaCha8Rng::from_seed(digest)
    }

    pub fn weights<T: Scalar>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        truncated_normal(shape, &mut self.rng(name))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: &Init,
    ) -> Result<Self, NnError> {
        let wname = format!("{name}.weight");
        let weight = store.insert(wname.clone(), init.weights(&wname, &[inputs, outputs]))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self, NnError> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[width], T::one()))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[width]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Query/key/value/output projections around [`Graph::attention`].
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        init: &Init,
    ) -> Result<Self, NnError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NnError::Config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, init)?,
            key: Linear::new(store, &format!("{name}.key"), width, width, init)?,
            value: Linear::new(store, &format!("{name}.value"), width, width, init)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, init)?,
            heads,
            width,
        })
    }

    /// `queries`: `batch·q_len` rows; `keys_values`: `batch·kv_len` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys_values: Var,
        key_valid: &[bool],
        batch: usize,
        q_len: usize,
        kv_len: usize,
    ) -> Result<Var, NnError> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys_values)?;
        let v = self.value.forward(g, store, keys_values)?;
        let shape = AttentionShape { batch, q_len, kv_len, heads: self.heads, width: self.width };
        let attended = g.attention(q, k, v, key_valid, shape)?;
        self.output.forward(g, store, attended)
    }
}

/// Two-layer GELU feed-forward with a 4× inner width.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        init: &Init,
    ) -> Result<Self, NnError> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), width, 4 * width, init)?,
            outer: Linear::new(store, &format!("{name}.outer"), 4 * width, width, init)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, store, h)
    }
}

/// Keep mask for inverted dropout: each entry is `0` with probability `p`,
/// otherwise `1/(1-p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>, NnError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    Ok((0..len).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect())
}

/// Applies dropout when `rng` is given (training); identity otherwise.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    p: f64,
    rng: Option<&mut R>,
) -> Result<Var, NnError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    match rng {
        Some(rng) if p > 0.0 => {
            let mask = dropout_mask(g.value(x).len(), p, rng)?;
            g.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_zero_and_eval_are_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = dropout(&mut g, x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y = dropout::<f64, ChaCha8Rng>(&mut g, x, 0.9, None).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout_mask::<f32, _>(4, 1.0, &mut rng).is_err());
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert!(dropout::<f64, ChaCha8Rng>(&mut g, x, 1.5, None).is_err());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask: Vec<f64> = dropout_mask(10_000, 0.25, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.75).abs() < 1e-12));
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Tensor<f32> = truncated_normal(&[100, 100], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
