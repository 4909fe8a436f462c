//! Per-op gradient checks against central finite differences in f64.

use pmuse_core::nn::{AttentionShape, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output entry gets a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let cols = g.value(out).cols();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &[cols, 1]);
    let w = g.input(w);
    let p = g.linear(out, w, None).unwrap();
    g.sum(p)
}

fn check<F>(store: ParamStore<f64>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let grads = g.param_grads(&store).unwrap();

    let mut s = store.clone();
    for &id in &ids {
        let analytic = grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let h = 1e-5;
            let orig = s.get(id).data()[i];
            s.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&s);
            s.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&s);
            s.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{}[{i}]: analytic {a} numeric {numeric}", store.name(id));
        }
    }
}

fn store(seed: u64, tensors: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in tensors {
        s.insert(*name, random(&mut rng, shape)).unwrap();
    }
    s
}

#[test]
fn linear() {
    let s = store(1, &[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[5])]);
    check(s, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        project(g, y, 7)
    });
}

#[test]
fn add_and_gelu() {
    let s = store(2, &[("a", &[3, 4]), ("b", &[3, 4])]);
    check(s, |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        let y = g.gelu(y);
        project(g, y, 8)
    });
}

#[test]
fn layer_norm() {
    let s = store(3, &[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])]);
    check(s, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        project(g, y, 9)
    });
}

#[test]
fn embedding_lookup_with_repeats() {
    let s = store(4, &[("table", &[7, 4])]);
    check(s, |g, v| {
        let y = g.embedding(v[0], &[3, 0, 3, 6]).unwrap();
        project(g, y, 10)
    });
}

#[test]
fn cross_entropy_with_ignored_rows() {
    let s = store(5, &[("logits", &[4, 6])]);
    check(s, |g, v| g.cross_entropy(v[0], &[Some(2), None, Some(5), Some(0)]).unwrap());
}

#[test]
fn attention_through_key_mask() {
    let shape = AttentionShape { batch: 2, q_len: 3, kv_len: 4, heads: 2, width: 4 };
    let s = store(6, &[("q", &[6, 4]), ("k", &[8, 4]), ("v", &[8, 4])]);
    let valid = [true, false, true, true, true, true, false, false];
    check(s, |g, v| {
        let y = g.attention(v[0], v[1], v[2], &valid, shape).unwrap();
        project(g, y, 11)
    });
}

#[test]
fn row_plumbing() {
    let s = store(7, &[("a", &[4, 3]), ("b", &[2, 3])]);
    check(s, |g, v| {
        let c = g.concat_seq(v[0], v[1], 2, 2, 1).unwrap();
        let r = g.gather_rows(c, &[5, 0, 0, 2]).unwrap();
        let other = g.gather_rows(v[0], &[1, 2, 3, 0]).unwrap();
        let y = g.select_rows(r, other, &[true, false, true, false]).unwrap();
        project(g, y, 12)
    });
}

#[test]
fn masked_keys_get_no_gradient() {
    let shape = AttentionShape { batch: 1, q_len: 2, kv_len: 3, heads: 1, width: 2 };
    let s = store(8, &[("q", &[2, 2]), ("k", &[3, 2]), ("v", &[3, 2])]);
    let ids: Vec<_> = s.iter().map(|(id, _, _)| id).collect();
    let mut g = Graph::new();
    let vars: Vec<_> = ids.iter().map(|&id| g.param(&s, id)).collect();
    let y = g.attention(vars[0], vars[1], vars[2], &[true, false, true], shape).unwrap();
    let l = project(&mut g, y, 13);
    g.backward(l).unwrap();
    let grads = g.param_grads(&s).unwrap();
    for name in ["k", "v"] {
        let id = s.id(name).unwrap();
        let grad = grads[id.index()].as_ref().unwrap();
        assert_eq!(grad.row(1), &[0.0, 0.0], "{name}");
    }
}
