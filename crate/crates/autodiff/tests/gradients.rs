use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacflow_autodiff::{finite_diff_check, BoundParams, Graph, ParamStore, ProbeOptions, Result, Tensor, Var};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check(builder: impl Fn(&mut Graph, &BoundParams) -> Result<Var>, params: &ParamStore) -> f64 {
    finite_diff_check(&builder, params, 1e-5, ProbeOptions::default()).unwrap()
}

#[test]
fn two_layer_mlp_matches_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w1 = p.add("w1", random_tensor(&mut rng, &[3, 5], 0.8));
        let b1 = p.add("b1", random_tensor(&mut rng, &[5], 0.3));
        let w2 = p.add("w2", random_tensor(&mut rng, &[5, 2], 0.8));
        let b2 = p.add("b2", random_tensor(&mut rng, &[2], 0.3));
        let x = random_tensor(&mut rng, &[4, 3], 1.0);
        let f = |g: &mut Graph, b: &BoundParams| {
            let x = g.constant(x.clone());
            let h = g.linear(x, b.get(w1), b.get(b1))?;
            let h = g.tanh(h);
            let y = g.linear(h, b.get(w2), b.get(b2))?;
            let y = g.square(y);
            Ok(g.mean(y))
        };
        let err = check(f, &p);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ParamStore::new();
    let a = p.add("a", random_tensor(&mut rng, &[3, 4], 1.0));
    let b = p.add("b", random_tensor(&mut rng, &[3, 4], 1.0));
    let row = p.add("row", random_tensor(&mut rng, &[4], 1.0));
    let col = p.add("col", random_tensor(&mut rng, &[3, 1], 1.0));
    let f = |g: &mut Graph, bp: &BoundParams| {
        let (a, b) = (bp.get(a), bp.get(b));
        let mut terms = Vec::new();
        let s = g.sigmoid(a);
        terms.push(g.log(s));
        terms.push(g.silu(b));
        terms.push(g.relu(a));
        let e = g.scale(b, 0.3);
        terms.push(g.exp(e));
        terms.push(g.softplus(a));
        terms.push(g.clamp(b, -0.5, 0.5));
        terms.push(g.minimum(a, b)?);
        terms.push(g.mul_row(a, bp.get(row))?);
        terms.push(g.add_row(b, bp.get(row))?);
        terms.push(g.mul_col(a, bp.get(col))?);
        terms.push(g.layer_norm(b, 1e-5));
        terms.push(g.softmax(a));
        let cat = g.concat_cols(&[a, b])?;
        let sl = g.slice_cols(cat, 2, 4)?;
        terms.push(sl);
        let std = g.exp(b);
        terms.push(g.gaussian_log_density(a, b, std)?);
        let mut acc = g.mul(a, b)?;
        for t in terms {
            let w = g.mul(t, a)?;
            acc = g.add(acc, w)?;
        }
        let rs = g.sum_cols(acc);
        let rs = g.square(rs);
        Ok(g.sum(rs))
    };
    let err = check(f, &p);
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn layer_norm_gradients(seed in 0u64..10_000, cols in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let x = p.add("x", random_tensor(&mut rng, &[2, cols], 2.0));
        let w = random_tensor(&mut rng, &[2, cols], 1.0);
        let f = |g: &mut Graph, bp: &BoundParams| {
            let y = g.layer_norm(bp.get(x), 1e-5);
            let w = g.constant(w.clone());
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        };
        prop_assert!(check(f, &p) < 1e-4);
    }

    #[test]
    fn layer_norm_output_is_standardized(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 8], 5.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.layer_norm(v, 1e-5);
        for r in 0..3 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn layer_norm_of_already_normalized_pair() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![1.0, -1.0]));
    let y = g.layer_norm(v, 1e-5);
    let out = g.value(y).data();
    // var = 1, so the output is [1, -1] / sqrt(1 + 1e-5).
    assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] + 1.0).abs() < 1e-5);
}
