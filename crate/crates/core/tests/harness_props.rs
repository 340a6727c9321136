use corner_scatter::assembly::assemble_h;
use corner_scatter::geometry::{layered_config, CornerModel, LayeredSpec};
use corner_scatter::harness::{
    exit_code, generate_packets, Experiment, ExperimentConfig, ExperimentReport, PacketRecipe, Profile, RecipeVariant, Status, TimeGrid,
};
use corner_scatter::propagation::PropagatorSpec;
use corner_scatter::scattering::{dst_momentum, dst_weights, Scatterer};
use proptest::prelude::*;

fn ac_recipe(k_lo: f64, k_hi: f64, center: f64) -> PacketRecipe {
    PacketRecipe {
        label: None,
        channel: 1,
        variant: RecipeVariant::Ac { cross: None },
        profile: Profile::Band { k_lo, k_hi, center },
        profile2: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn band_profiles_have_no_mass_outside_the_window(
        k_lo in 0.2f64..1.2,
        width in 0.3f64..1.0,
        center in 4.0f64..20.0,
        len in 24usize..80,
    ) {
        let k_hi = k_lo + width;
        let a = Profile::Band { k_lo, k_hi, center }.build(len, 1.0).unwrap();
        let w = dst_weights(&a);
        let total: f64 = w.iter().sum();
        let outside: f64 = w
            .iter()
            .enumerate()
            .filter(|(m, _)| {
                let k = dst_momentum(m + 1, len, 1.0);
                !(k_lo < k && k < k_hi)
            })
            .map(|(_, x)| x)
            .sum();
        prop_assert!(outside <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn doubling_grid_halves_and_ends_at_t_max(fraction in 0.1f64..1.0, levels in 1usize..10, refl in 1.0f64..500.0) {
        let g = TimeGrid { t_max_fraction: fraction, levels }.times(refl);
        prop_assert_eq!(g.len(), levels);
        prop_assert!((g[levels - 1] - fraction * refl).abs() <= 1e-12 * refl);
        for w in g.windows(2) {
            prop_assert!((w[1] - 2.0 * w[0]).abs() <= 1e-12 * w[1]);
        }
    }

    #[test]
    fn config_hash_survives_a_json_round_trip(seed in any::<u64>(), l1 in 4usize..40, l2 in 4usize..40) {
        let text = format!(
            r#"{{"geometry": {{"kind": "minimal", "l1": {l1}, "l2": {l2}, "h": 1.0}}, "experiments": ["assemble-audit"], "seed": {seed}}}"#
        );
        let a = ExperimentConfig::from_json(&text).unwrap();
        let b = ExperimentConfig::from_json(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }
}

#[test]
fn packet_generation_is_a_function_of_the_seed() {
    let m = CornerModel::build(&layered_config(&LayeredSpec {
        box_len: 20,
        well1: 2.4,
        ..Default::default()
    }))
    .unwrap();
    let h = assemble_h(&m);
    let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
    let recipes = vec![ac_recipe(0.4, 0.9, 8.0), ac_recipe(0.5, 1.2, 10.0)];
    for seed in 0..5 {
        let a = generate_packets(&recipes, seed, &sc).unwrap();
        let b = generate_packets(&recipes, seed, &sc).unwrap();
        assert_eq!(a, b);
        let c = generate_packets(&recipes, seed + 100, &sc).unwrap();
        assert_ne!(a, c);
    }
}

fn report(status: Status) -> ExperimentReport {
    ExperimentReport {
        experiment: Experiment::Gram,
        status,
        checks: vec![],
        metrics: Default::default(),
        files: vec![],
        error: None,
    }
}

#[test]
fn exit_code_prefers_config_then_numerical_then_threshold() {
    use Status::*;
    assert_eq!(exit_code(&[]), 0);
    assert_eq!(exit_code(&[report(Pass)]), 0);
    assert_eq!(exit_code(&[report(Pass), report(Fail)]), 1);
    assert_eq!(exit_code(&[report(Fail), report(NumericalError)]), 3);
    assert_eq!(exit_code(&[report(NumericalError), report(ConfigError), report(Fail)]), 2);
}
