use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use dartspike_core::backtest::{run_strategy, BucketKey, Mode, StrategyOptions};
use dartspike_core::bidstack::{buy_impact, sell_impact};
use dartspike_core::config::{Grid, ImpactSettings};
use dartspike_core::pipeline::{self, FittedModels, Inputs, Splits};
use dartspike_core::sizing::{estimate_payoffs, objective_raw, optimize, PayoffTable};
use dartspike_core::synth::{fixture_config, generate, write_fixture, SynthSpec};
use dartspike_core::{Bucket, ExpectedPayoffs, ImpactParams, RunConfig};

struct Fitted {
    inputs: Inputs,
    splits: Splits,
    fitted: FittedModels,
    payoffs: PayoffTable,
    params: ImpactParams,
    _dir: tempfile::TempDir,
}

fn fitted() -> &'static Fitted {
    static CELL: OnceLock<Fitted> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        write_fixture(&generate(&spec).unwrap(), dir.path()).unwrap();
        let mut cfg = fixture_config(&spec);
        cfg.resolve_paths(dir.path());
        let inputs = pipeline::load_inputs(&cfg).unwrap();
        let (splits, _) = pipeline::prepare(&inputs).unwrap();
        let fitted = pipeline::fit_models(&cfg, &splits).unwrap();
        let payoffs =
            estimate_payoffs(&fitted.models, &splits.validation, &inputs.calendar).unwrap();
        let params = pipeline::calibrate(&inputs).unwrap();
        Fitted {
            inputs,
            splits,
            fitted,
            payoffs,
            params,
            _dir: dir,
        }
    })
}

fn sizing_problem() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
    (1usize..=6).prop_flat_map(|z| {
        (
            prop::collection::vec(-50.0f64..50.0, z),
            prop::collection::vec(0.01f64..0.5, z),
            0.0f64..0.1,
            0.0f64..0.1,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimize_dominates_every_allocation(
        (x, k, kp, km) in sizing_problem(),
        probe in prop::collection::vec(-500.0f64..500.0, 6),
    ) {
        let b = Bucket::ALL[0];
        let mut p = ExpectedPayoffs::default();
        for (i, v) in x.iter().enumerate() {
            p.x.insert(format!("Z{i}"), *v);
        }
        let params = ImpactParams {
            k_e_plus: [(b, kp)].into(),
            k_e_minus: [(b, km)].into(),
            k_z: k.iter().enumerate().map(|(i, v)| (format!("Z{i}"), *v)).collect(),
            reference: None,
        };
        let plan = optimize(&p, &params, b).unwrap();
        let q = &probe[..x.len()];
        let other = objective_raw(q, &x, &k, kp, km);
        prop_assert!(plan.objective >= other - 1e-9 * other.abs().max(1.0));
        prop_assert!(plan.objective >= -1e-12);
    }

    #[test]
    fn planted_stacks_have_exact_slopes(
        seed in 0u64..1000,
        supply_slope in 0.001f64..0.1,
        demand_slope in 0.001f64..0.1,
        steps in 20usize..200,
        k in 1usize..20,
    ) {
        let spec = SynthSpec {
            seed,
            hours: 3,
            supply_slope,
            demand_slope,
            stack_steps: steps,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let dq = k as f64 * spec.step_mw;
        for s in data.stacks.values() {
            let (_, up) = buy_impact(s, dq).unwrap();
            let (_, down) = sell_impact(s, dq).unwrap();
            prop_assert!((up / dq - supply_slope).abs() < 1e-9);
            prop_assert!((-down / dq - demand_slope).abs() < 1e-9);
        }
    }

    #[test]
    fn config_round_trips(
        gamma in prop::collection::vec(0.5f64..50.0, 1..6),
        tau in prop::collection::vec(0.01f64..0.99, 1..8),
        delta_q in 1.0f64..5000.0,
        top_n in 1usize..50,
        mode in prop::sample::select(vec![Mode::Unconstrained, Mode::Clipped, Mode::Restricted]),
    ) {
        let mut cfg: RunConfig = fixture_config(&SynthSpec::default());
        cfg.mode = mode;
        cfg.grid = Grid { gamma_pos: gamma.clone(), gamma_neg: gamma, tau };
        cfg.impact = ImpactSettings { delta_q, top_n, ..Default::default() };
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn restriction_only_removes_trades(mask in prop::collection::vec(any::<bool>(), 64)) {
        let f = fitted();
        let mut keys = BTreeSet::new();
        for m in &f.fitted.models {
            for b in Bucket::ALL {
                keys.insert(BucketKey { zone: m.zone.clone(), side: m.side, bucket: b });
            }
        }
        let admissible: BTreeSet<BucketKey> = keys
            .into_iter()
            .zip(mask.iter().cycle())
            .filter(|(_, keep)| **keep)
            .map(|(k, _)| k)
            .collect();
        let run = |mode: Mode, admissible: BTreeSet<BucketKey>| {
            let opts = StrategyOptions { mode, admissible, ..Default::default() };
            run_strategy(&f.fitted.models, &f.payoffs, &f.params, &f.splits.test, &f.inputs.calendar, &opts).unwrap()
        };
        let free = run(Mode::Unconstrained, BTreeSet::new());
        let restricted = run(Mode::Restricted, admissible.clone());
        let fired: BTreeSet<(i64, &str)> =
            free.prediction.iter().map(|t| (t.timestamp.timestamp(), t.zone.as_str())).collect();
        for t in &restricted.prediction {
            prop_assert!(fired.contains(&(t.timestamp.timestamp(), t.zone.as_str())));
            let key = BucketKey {
                zone: t.zone.clone(),
                side: t.side,
                bucket: f.inputs.calendar.bucket_of(&t.timestamp),
            };
            prop_assert!(admissible.contains(&key));
        }
    }
}
