//! Property tests for the invariants of the sampling chain, the replay
//! memory, the environments and the metric format.

use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use sacflow::diagnostics::format_f64;
use sacflow::envs::{Env, EnvKind, EnvSpec, GaussianOracle, Transition};
use sacflow::rollout::{
    deterministic_rollout, log_path_density, noisy_rollout_values, sample_action, squash_with_logdet, NoiseDraw,
    TimeGrid,
};
use sacflow::sac::ReplayBuffer;
use sacflow::velocity::{FixedSigma, FlowActor, StepNoise, VelocityKind, VelocitySpec};
use sacflow::SacRng;
use sacflow_autodiff::{Graph, ParamStore, Tensor};

fn small_spec(kind: VelocityKind, sd: usize, da: usize, learned: bool) -> VelocitySpec {
    let mut spec = VelocitySpec::scratch(kind, sd, da);
    spec.classic_hidden = vec![8, 8];
    spec.gate_hidden = vec![8];
    spec.candidate_hidden = vec![8];
    spec.logstd_hidden = 6;
    spec.attention.model_dim = 8;
    spec.obs_hidden = 4;
    spec.noise = if learned {
        StepNoise::learned()
    } else {
        StepNoise::fixed(0.1)
    };
    spec
}

fn perturbed_actor(spec: VelocitySpec, scale: f64, rng: &mut SacRng) -> FlowActor {
    let mut actor = FlowActor::new(spec, rng).unwrap();
    for t in actor.params.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-scale..scale));
    }
    actor
}

fn uniform(rng: &mut SacRng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

fn kind() -> impl Strategy<Value = VelocityKind> {
    prop::sample::select(VelocityKind::ALL.to_vec())
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampled_paths_satisfy_their_identities(
        kind in kind(),
        sd in 1usize..=3,
        da in 1usize..=4,
        k in 1usize..=8,
        learned in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = SacRng::seed_from_u64(seed);
        let actor = perturbed_actor(small_spec(kind, sd, da, learned), 0.3, &mut rng);
        let s = uniform(&mut rng, 4, sd, 1.0);
        let grid = TimeGrid::new(k).unwrap();
        let path = sample_action(&actor.model, &actor.model, &actor.params, &s, &grid, &mut rng).unwrap();
        prop_assert_eq!(path.pre_actions.len(), k + 1);
        prop_assert_eq!(path.steps(), k);
        for row in 0..path.batch() {
            let (squashed, _) = squash_with_logdet(path.pre_actions[k].row(row));
            prop_assert_eq!(&squashed[..], path.action.row(row));
            // tanh rounds to exactly ±1 past |A| ≈ 19.1, inside the pre-action clamp.
            prop_assert!(path.action.row(row).iter().all(|a| a.abs() <= 1.0));
            prop_assert!(path.log_pc[row].is_finite());
            prop_assert!((path.log_pc[row] - path.recombined_log_pc(row)).abs() <= 1e-9 * path.log_pc[row].abs().max(1.0));
        }
        prop_assert!(path.pre_actions.iter().all(|a| a.data().iter().all(|x| x.is_finite())));

        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let sv = g.constant(s);
        let log_pc = log_path_density(&mut g, &p, &actor.model, &actor.model, &path, sv, &grid).unwrap();
        for (a, b) in g.value(log_pc).data().iter().zip(&path.log_pc) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn gate_candidate_and_log_std_stay_in_range(
        kind in kind(),
        da in 1usize..=3,
        seed in any::<u64>(),
        scale in 0.1f64..3.0,
    ) {
        let mut rng = SacRng::seed_from_u64(seed);
        let actor = perturbed_actor(small_spec(kind, 2, da, true), scale, &mut rng);
        let t = [0.0, 0.3, 0.6, 0.9, 0.99];
        let (a, s) = (uniform(&mut rng, 5, da, 10.0), uniform(&mut rng, 5, 2, 10.0));
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let (av, sv) = (g.constant(a), g.constant(s));
        let log_std = actor.model.log_std(&mut g, &p, &t, av, sv).unwrap();
        prop_assert!(g.value(log_std).data().iter().all(|x| (-5.0..=2.0).contains(x)));
        if kind == VelocityKind::FlowG {
            let gate = actor.model.gate(&mut g, &p, &t, av, sv).unwrap();
            let cand = actor.model.candidate(&mut g, &p, &t, av, sv).unwrap();
            // The sigmoid rounds to exactly 0 or 1 for logits past about ±37.
            prop_assert!(g.value(gate).data().iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(g.value(cand).data().iter().all(|x| x.abs() <= 50.0));
        }
    }

    #[test]
    fn replay_snapshot_round_trips_every_bit(
        values in prop::collection::vec(finite(), 5 * 40),
        dones in prop::collection::vec(any::<bool>(), 40),
        capacity in 1usize..=64,
    ) {
        let mut buffer = ReplayBuffer::new(2, 1, capacity).unwrap();
        for (chunk, &done) in values.chunks(5).zip(&dones) {
            buffer.push(&Transition {
                s: chunk[..2].to_vec(),
                a: vec![chunk[2]],
                r: chunk[3],
                s_next: vec![chunk[4], -chunk[4]],
                done,
            }).unwrap();
        }
        let bytes = buffer.snapshot();
        let back = ReplayBuffer::restore(&bytes, capacity).unwrap();
        prop_assert_eq!(back.len(), buffer.len());
        prop_assert_eq!(back.snapshot(), bytes);
        let bits = |t: Transition| {
            let mut v: Vec<u64> = t.s.iter().chain(&t.a).chain(&t.s_next).map(|x| x.to_bits()).collect();
            v.extend([t.r.to_bits(), u64::from(t.done)]);
            v
        };
        for i in 0..buffer.len() {
            prop_assert_eq!(back.get(i).map(bits), buffer.get(i).map(bits));
        }
    }

    #[test]
    fn metric_floats_parse_back_to_the_same_bits(x in finite()) {
        let text = format_f64(x);
        prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn dynamics_are_deterministic_and_rewards_bounded(
        env_index in 0usize..3,
        x in prop::collection::vec(-1.0f64..=1.0, 2),
        actions in prop::collection::vec(-1.0f64..=1.0, 2 * 100),
    ) {
        let kind = [EnvKind::Bandit, EnvKind::PointMass, EnvKind::SparseReach][env_index];
        let spec = EnvSpec::of(kind);
        let start = &x[..spec.state_dim];
        let (mut a, mut b) = (Env::new(kind), Env::new(kind));
        a.reset_to(start).unwrap();
        b.reset_to(start).unwrap();
        for act in actions.chunks(2).take(spec.horizon) {
            let act = &act[..spec.action_dim];
            let (oa, ob) = (a.step(act).unwrap(), b.step(act).unwrap());
            prop_assert_eq!(&oa, &ob);
            let r = oa.transition.r;
            prop_assert!(r >= spec.reward_range.0 && r <= spec.reward_range.1, "reward {} outside {:?}", r, spec.reward_range);
            if oa.episode_over {
                break;
            }
        }
    }
}

fn mean_sq_gap(path: &[f64], det: &[f64]) -> f64 {
    path.iter().zip(det).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / det.len() as f64
}

#[test]
fn noisy_terminal_converges_to_deterministic_as_sigma_shrinks() {
    let mut rng = SacRng::seed_from_u64(3);
    let grid = TimeGrid::new(8).unwrap();
    for kind in VelocityKind::ALL {
        let actor = perturbed_actor(small_spec(kind, 2, 2, false), 0.3, &mut rng);
        let s = uniform(&mut rng, 256, 2, 1.0);
        let draw = NoiseDraw::sample(&mut rng, 256, 2, grid.steps());
        let det = deterministic_rollout(&actor.model, &actor.params, &s, &draw.base, &grid).unwrap();
        let gaps: Vec<f64> = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
            .iter()
            .map(|&sigma| {
                let path =
                    noisy_rollout_values(&actor.model, &FixedSigma(sigma), &actor.params, &s, &grid, &draw).unwrap();
                mean_sq_gap(path.pre_actions[grid.steps()].data(), det.data())
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{kind:?}: {gaps:?}");
        assert!(gaps[4] < 1e-4, "{kind:?}: {gaps:?}");
    }
}

#[test]
fn oracle_field_transports_standard_normal_to_target() {
    let oracle = GaussianOracle {
        mean: 1.0,
        std: 0.5,
        action_dim: 1,
    };
    let grid = TimeGrid::new(1024).unwrap();
    let mut rng = SacRng::seed_from_u64(8);
    let (chunk, chunks) = (10_000, 10);
    let s = Tensor::zeros(&[chunk, 1]);
    let mut out = Vec::with_capacity(chunk * chunks);
    for _ in 0..chunks {
        let base = NoiseDraw::sample(&mut rng, chunk, 1, 0).base;
        out.extend_from_slice(
            deterministic_rollout(&oracle, &ParamStore::new(), &s, &base, &grid)
                .unwrap()
                .data(),
        );
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 1.0).abs() < 0.005, "mean {mean}");
    assert!((std - 0.5).abs() < 0.005, "std {std}");
}

/// Fastest of several timed evaluations of `log_path_density`.
fn density_seconds(k: usize, da: usize) -> f64 {
    let mut rng = SacRng::seed_from_u64(k as u64 * 31 + da as u64);
    let actor = perturbed_actor(small_spec(VelocityKind::FlowG, 2, da, true), 0.1, &mut rng);
    let grid = TimeGrid::new(k).unwrap();
    let s = uniform(&mut rng, 64, 2, 1.0);
    let path = sample_action(&actor.model, &actor.model, &actor.params, &s, &grid, &mut rng).unwrap();
    (0..7)
        .map(|_| {
            let start = Instant::now();
            let mut g = Graph::new();
            let p = g.bind(&actor.params, true);
            let sv = g.constant(s.clone());
            let lp = log_path_density(&mut g, &p, &actor.model, &actor.model, &path, sv, &grid).unwrap();
            std::hint::black_box(g.value(lp));
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn density_cost_grows_linearly_in_steps_and_action_dim() {
    let by_k = density_seconds(32, 2) / density_seconds(8, 2);
    assert!((2.0..=8.0).contains(&by_k), "4x steps cost {by_k:.2}x");
    let by_da = density_seconds(8, 16) / density_seconds(8, 4);
    assert!(by_da <= 8.0, "4x action dim cost {by_da:.2}x");
}
