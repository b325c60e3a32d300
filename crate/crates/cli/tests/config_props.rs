use proptest::prelude::*;
use sacflow::envs::EnvKind;
use sacflow::sac::Preset;
use sacflow::velocity::VelocityKind;
use sacflow_cli::config::{Defaults, Overrides, RunConfig};

fn defaults() -> Defaults {
    Defaults {
        preset: Preset::Scratch,
        env: EnvKind::PointMass,
        kind: VelocityKind::FlowG,
    }
}

fn kind() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("classic"), Just("flow_g"), Just("flow_t")]
}

fn env() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("bandit"), Just("point_mass"), Just("sparse_reach")]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Feeding every key of a resolved config back as overrides reproduces
    // it, so a restarted run reads exactly the configuration written.
    #[test]
    fn resolved_config_is_a_fixed_point(
        kind in kind(),
        env in env(),
        steps in 1u64..1_000_000,
        seed in any::<u64>(),
        tau in 1e-4f64..1.0,
        widths in prop::collection::vec(1usize..64, 1..4),
    ) {
        let mut o = Overrides::new();
        o.push_assignment(&format!("velocity.kind={kind}")).unwrap();
        o.push_assignment(&format!("env={env}")).unwrap();
        o.push_assignment(&format!("steps={steps}")).unwrap();
        o.push_assignment(&format!("tau={tau:?}")).unwrap();
        o.push_assignment(&format!("critic_hidden={widths:?}")).unwrap();
        o.push("seed", seed.into());
        let first = RunConfig::resolve(defaults(), &o).unwrap();
        prop_assert_eq!(first.train.seed, seed);
        prop_assert_eq!(first.train.tau, tau);
        prop_assert_eq!(&first.train.critic_hidden, &widths);

        let mut again = Overrides::new();
        for (k, v) in first.to_flat() {
            again.push(&k, v);
        }
        let second = RunConfig::resolve(defaults(), &again).unwrap();
        prop_assert_eq!(&second, &first);

        let json = serde_json::to_string(&first).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, first);
    }

    // Any key outside the configuration is rejected under its own name.
    #[test]
    fn unknown_keys_are_named(key in "[a-z]{3,10}(\\.[a-z]{2,6})?") {
        let known = RunConfig::defaults(Preset::Scratch, EnvKind::PointMass, VelocityKind::FlowG).to_flat();
        prop_assume!(!known.contains_key(&key));
        let mut o = Overrides::new();
        o.push_assignment(&format!("{key}=1")).unwrap();
        match RunConfig::resolve(defaults(), &o) {
            Err(sacflow::Error::Config { key: named, .. }) => prop_assert_eq!(named, key),
            other => prop_assert!(false, "expected a config error, got {:?}", other),
        }
    }
}
