use delayctl_core::scenario::{bundled, ScenarioConfig, ScenarioError, BUNDLED};
use proptest::prelude::*;

#[test]
fn every_bundled_scenario_builds() {
    for (name, _) in BUNDLED {
        let cfg = bundled(name).unwrap();
        let s = cfg.build().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(s.grid.horizon(), cfg.grid.horizon, "{name}");
        assert_eq!(s.x0.view().current(), &[cfg.x0][..], "{name}");
        assert!(s.mc.n_paths > 0);
    }
}

#[test]
fn hash_is_stable_across_reparse() {
    for (name, text) in BUNDLED {
        let a = ScenarioConfig::from_json(text).unwrap();
        let b = bundled(name).unwrap();
        assert_eq!(a.hash(), b.hash(), "{name}");
        assert_eq!(a.hash().len(), 64);
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(BUNDLED[0].1).unwrap();
    v["coefficients"]["bogus"] = serde_json::json!(1.0);
    let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err();
    assert!(matches!(err, ScenarioError::Parse(_)), "{err}");
}

#[test]
fn unknown_bundled_name() {
    assert!(matches!(bundled("no_such_model"), Err(ScenarioError::Unknown(_))));
}

#[test]
fn step_must_divide_horizon() {
    let mut cfg = bundled("gbm_linear").unwrap();
    cfg.grid.step = 0.3;
    assert!(cfg.build().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hash_separates_seeds(a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        let mut x = bundled("delayed_linear").unwrap();
        let mut y = x.clone();
        x.seed = a;
        y.seed = b;
        prop_assert_ne!(x.hash(), y.hash());
    }

    #[test]
    fn hash_tracks_parameters(x0 in -5.0f64..5.0) {
        let base = bundled("gbm_linear").unwrap();
        let mut moved = base.clone();
        moved.x0 = x0;
        prop_assert_eq!(base.hash() == moved.hash(), x0 == base.x0);
    }
}
