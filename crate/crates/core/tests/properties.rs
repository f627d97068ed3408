mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use suffice::data::{self, Dataset, SplitSpec, SyntheticConfig};
use suffice::harness::{run_experiment, ExperimentConfig};
use suffice::inner_trainer::{train_weighted_erm, InnerConfig};
use suffice::irm_risk::{compute_risk, env_losses, irmv1_penalty, risk_gradient, RiskConfig, RiskVariant};
use suffice::mask_opt::{
    cell_fractions, log_prob_grad, outer_step, project_capped_box, run_selection, Mask, OuterConfig,
    OuterOptimizer, OuterState, ProbabilityVector,
};
use suffice::metrics::{dp_gap, eo_gap, evaluate, sufficiency_gap, confusion_by_group};
use suffice::model::{cross_entropy, init_mlp, weighted_ce_loss, Activation, ModelParams};
use suffice::Result;

fn small_synthetic(n: usize, seed: u64) -> Dataset {
    data::gen_synthetic(&SyntheticConfig {
        n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_reassembles_to_permutation(
        n in 80usize..300,
        seed in any::<u64>(),
        train in 0.3f64..0.8,
        stratified in any::<bool>(),
    ) {
        let ds = small_synthetic(n, 7);
        let val = (1.0 - train) / 3.0;
        let spec = SplitSpec { train_frac: train, val_frac: val, test_frac: 1.0 - train - val, stratified, seed };
        match data::split_indices(&ds, &spec) {
            Ok(parts) => {
                let mut all: Vec<usize> = parts.concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            // a tiny (group, label) cell may be missing from the sample
            Err(e) => prop_assert!(stratified && e.to_string().contains("empty"), "{}", e),
        }
    }

    #[test]
    fn full_noise_twice_is_identity(seed in any::<u64>(), other in any::<u64>()) {
        let ds = small_synthetic(120, seed);
        let flipped = data::inject_label_noise(&ds, 1.0, other).unwrap();
        let back = data::inject_label_noise(&flipped, 1.0, other.wrapping_add(1)).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        flipped.validate().unwrap();
    }

    #[test]
    fn noisy_and_selected_datasets_stay_valid(seed in any::<u64>(), rho in 0.0f64..=1.0) {
        let ds = small_synthetic(100, seed);
        data::inject_label_noise(&ds, rho, seed).unwrap().validate().unwrap();
        let (train, val, test) = data::split(&ds, &SplitSpec { stratified: false, seed, ..Default::default() }).unwrap();
        for part in [train, val, test] {
            part.validate().unwrap();
        }
    }

    #[test]
    fn synthetic_is_pure(seed in any::<u64>(), pi in 0.1f64..0.9) {
        let cfg = SyntheticConfig { n: 50, pi, seed, ..Default::default() };
        let a = data::gen_synthetic(&cfg).unwrap();
        let b = data::gen_synthetic(&cfg.clone()).unwrap();
        prop_assert_eq!(a.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.labels(), b.labels());
        prop_assert_eq!(a.groups(), b.groups());
    }

    #[test]
    fn loss_is_linear_in_weights(
        logits in prop::collection::vec(-8.0f64..8.0, 1..20),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let n = logits.len();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let w1: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let w2: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = weighted_ce_loss(&logits, &labels, &mix).unwrap();
        let rhs = a * weighted_ce_loss(&logits, &labels, &w1).unwrap() + b * weighted_ce_loss(&logits, &labels, &w2).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 5, 6);
        let d = model.n_inputs();
        let ds = random_dataset(&mut r, 10, d, 2);
        let w = vec![1.0; 10];
        prop_assert_eq!(model.forward(ds.features(), d).unwrap(), model.forward(ds.features(), d).unwrap());
        let (l1, g1) = model.backward(ds.features(), d, ds.labels(), &w).unwrap();
        let (l2, g2) = model.backward(ds.features(), d, ds.labels(), &w).unwrap();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn binary_weights_match_filtered_training(seed in any::<u64>(), batch in 1usize..20) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 40, 3, 2);
        let bits: Vec<bool> = (0..40).map(|i| i == 0 || r.random_bool(0.5)).collect();
        let kept: Vec<usize> = (0..40).filter(|&i| bits[i]).collect();
        let cfg = InnerConfig { epochs: 5, batch_size: batch, seed, ..Default::default() };
        let init = init_mlp(&[3, 4, 1], seed).unwrap();
        let weights: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let masked = train_weighted_erm(init.clone(), &ds, &weights, &cfg).unwrap();
        let filtered = train_weighted_erm(init, &ds.select(&kept).unwrap(), &vec![1.0; kept.len()], &cfg).unwrap();
        prop_assert_eq!(masked, filtered);
    }

    #[test]
    fn training_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 30, 2, 2);
        let w: Vec<f64> = (0..30).map(|_| r.random_range(0.0..2.0)).collect();
        let cfg = InnerConfig { epochs: 4, batch_size: 7, seed, ..Default::default() };
        let init = init_mlp(&[2, 3, 1], seed).unwrap();
        prop_assert_eq!(
            train_weighted_erm(init.clone(), &ds, &w, &cfg).unwrap(),
            train_weighted_erm(init, &ds, &w, &cfg).unwrap()
        );
    }

    #[test]
    fn zero_lambda_risk_is_sum_of_env_losses(seed in any::<u64>(), rex in any::<bool>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 4, 5);
        let ds = random_dataset(&mut r, 20, model.n_inputs(), 3);
        let idx: Vec<usize> = (0..20).collect();
        let variant = if rex { RiskVariant::Rex } else { RiskVariant::Irmv1 };
        let cfg = RiskConfig { variant, lambda: 0.0, ..Default::default() };
        let value = compute_risk(&model, &ds, &idx, &cfg).unwrap();
        let sum: f64 = env_losses(&model, &ds, &idx).unwrap().iter().sum();
        prop_assert_eq!(value.total, sum);
    }

    #[test]
    fn rex_penalty_ignores_common_loss_shift(
        logits in prop::collection::vec(-4.0f64..4.0, 3),
        shift in 0.01f64..2.0,
    ) {
        // one negative sample per group, so each group loss is softplus(z)
        let shifted: Vec<f64> = logits
            .iter()
            .map(|&z| (cross_entropy(z, 0) + shift).exp_m1().ln())
            .collect();
        let identity = ModelParams::from_layers(1, vec![(vec![1.0], vec![0.0], Activation::Identity)]).unwrap();
        let cfg = RiskConfig { variant: RiskVariant::Rex, ..Default::default() };
        let make = |zs: &[f64]| {
            Dataset::new(zs.to_vec(), 1, vec![0; 3], vec![0, 1, 2], vec!["z".into()],
                         vec!["a".into(), "b".into(), "c".into()]).unwrap()
        };
        let a = compute_risk(&identity, &make(&logits), &[0, 1, 2], &cfg).unwrap();
        let b = compute_risk(&identity, &make(&shifted), &[0, 1, 2], &cfg).unwrap();
        for (la, lb) in a.env_losses.iter().zip(&b.env_losses) {
            prop_assert!((lb - la - shift).abs() < 1e-9);
        }
        prop_assert!((a.penalty - b.penalty).abs() < 1e-9, "{} vs {}", a.penalty, b.penalty);
    }

    #[test]
    fn irmv1_penalty_matches_dummy_scalar_difference(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 4, 6);
        let ds = random_dataset(&mut r, 16, model.n_inputs(), 2);
        let idx: Vec<usize> = (0..16).collect();
        let z = model.forward(ds.features(), ds.n_features()).unwrap();
        let env_loss = |e: usize, t: f64| {
            let members: Vec<usize> = idx.iter().copied().filter(|&i| ds.groups()[i] == e).collect();
            members.iter().map(|&i| cross_entropy(t * z[i], ds.labels()[i])).sum::<f64>() / members.len() as f64
        };
        let h = 1e-5;
        let fd: f64 = (0..2)
            .map(|e| ((env_loss(e, 1.0 + h) - env_loss(e, 1.0 - h)) / (2.0 * h)).powi(2))
            .sum();
        let exact = irmv1_penalty(&model, &ds, &idx).unwrap();
        let rel = (exact - fd).abs() / exact.abs().max(1e-12);
        prop_assert!(rel < 1e-4 || (exact - fd).abs() < 1e-10, "{} vs {}", exact, fd);
    }

    #[test]
    fn outer_step_stays_feasible(
        seed in any::<u64>(),
        n in 1usize..12,
        risk in -3.0f64..3.0,
        lr in 0.0f64..3.0,
        adam in any::<bool>(),
        baseline in any::<bool>(),
        steps in 1usize..6,
    ) {
        let mut r = rng(seed);
        let k = r.random_range(1..=n);
        let cfg = OuterConfig {
            k,
            iters: steps,
            lr,
            baseline,
            optimizer: if adam { OuterOptimizer::ProjectedAdam } else { OuterOptimizer::ProjectedSgd },
            ..Default::default()
        };
        let mut s = ProbabilityVector::uniform(n, k as f64 / n as f64);
        let mut state = OuterState::default();
        for _ in 0..steps {
            let m = Mask::new((0..n).map(|_| r.random_bool(0.5)).collect());
            s = outer_step(&s, &m, risk * r.random_range(0.5..1.5), &cfg, &mut state);
            prop_assert!(s.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.sum() <= k as f64 + 1e-6, "sum {} > {}", s.sum(), k);
        }
    }

    #[test]
    fn projection_matches_dykstra(
        v in prop::collection::vec(-1.5f64..2.5, 1..7),
        k_frac in 0.0f64..1.0,
    ) {
        let k = 1 + (k_frac * (v.len() - 1) as f64) as usize;
        let p = project_capped_box(&v, k);
        let oracle = dykstra_projection(&v, k as f64, 20_000);
        for (a, b) in p.as_slice().iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-7, "{:?} vs {:?}", p, oracle);
        }
    }

    #[test]
    fn gaps_match_raw_probability_definitions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 20;
        let preds: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let groups: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { r.random_range(0..2) }).collect();
        let conf = confusion_by_group(&preds, &labels, &groups).unwrap();

        // P(label = y | pred = p, group = g) straight from the triples
        let cond = |g: usize, field: &dyn Fn(usize) -> bool, given: &dyn Fn(usize) -> bool| -> Option<f64> {
            let den = (0..n).filter(|&i| groups[i] == g && given(i)).count();
            let num = (0..n).filter(|&i| groups[i] == g && given(i) && field(i)).count();
            (den > 0).then(|| num as f64 / den as f64)
        };
        let ppv = |g| cond(g, &|i| labels[i] == 1, &|i| preds[i] == 1);
        let npv = |g| cond(g, &|i| labels[i] == 0, &|i| preds[i] == 0);
        let tpr = |g| cond(g, &|i| preds[i] == 1, &|i| labels[i] == 1);
        let fpr = |g| cond(g, &|i| preds[i] == 1, &|i| labels[i] == 0);
        let pos = |g| cond(g, &|i| preds[i] == 1, &|_| true);

        let terms: Vec<f64> = [(ppv(0), ppv(1)), (npv(0), npv(1))]
            .into_iter()
            .filter_map(|(a, b)| Some(0.5 * (a? - b?).abs()))
            .collect();
        match sufficiency_gap(&conf, 0, 1) {
            Ok(gap) => prop_assert_eq!(gap.value, terms.iter().sum::<f64>()),
            Err(_) => prop_assert!(terms.is_empty()),
        }
        prop_assert_eq!(dp_gap(&conf, 0, 1).unwrap(), (pos(0).unwrap() - pos(1).unwrap()).abs());
        match (tpr(0), tpr(1), fpr(0), fpr(1)) {
            (Some(a), Some(b), Some(c), Some(d)) => {
                prop_assert_eq!(eo_gap(&conf, 0, 1).unwrap(), 0.5 * ((a - b).abs() + (c - d).abs()));
            }
            _ => prop_assert!(eo_gap(&conf, 0, 1).is_err()),
        }
    }

    #[test]
    fn gaps_are_symmetric_bounded_and_order_free(seed in any::<u64>(), n in 6usize..60) {
        let mut r = rng(seed);
        let preds: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let groups: Vec<usize> = (0..n).map(|i| if i < 3 { i } else { r.random_range(0..3) }).collect();
        let conf = confusion_by_group(&preds, &labels, &groups).unwrap();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let ab = sufficiency_gap(&conf, a, b).map(|g| g.value).ok();
            prop_assert_eq!(ab, sufficiency_gap(&conf, b, a).map(|g| g.value).ok());
            prop_assert_eq!(dp_gap(&conf, a, b).ok(), dp_gap(&conf, b, a).ok());
            prop_assert_eq!(eo_gap(&conf, a, b).ok(), eo_gap(&conf, b, a).ok());
            for v in [ab, dp_gap(&conf, a, b).ok(), eo_gap(&conf, a, b).ok()].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        // shuffle the samples: group membership travels with each sample
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let pick = |v: &[u8]| order.iter().map(|&i| v[i]).collect::<Vec<u8>>();
        let shuffled_groups: Vec<usize> = order.iter().map(|&i| groups[i]).collect();
        let before = evaluate(&preds, &labels, &groups, None).unwrap();
        let after = evaluate(&pick(&preds), &pick(&labels), &shuffled_groups, None).unwrap();
        prop_assert_eq!(format!("{before:?}"), format!("{after:?}"));
    }
}

#[test]
fn risk_gradient_matches_finite_differences() {
    let mut r = rng(11);
    for case in 0..20 {
        let model = random_model(&mut r, 4, 6);
        let ds = random_dataset(&mut r, 16, model.n_inputs(), 2 + case % 2);
        let idx: Vec<usize> = (0..16).collect();
        for variant in [RiskVariant::Irmv1, RiskVariant::Rex] {
            let cfg = RiskConfig {
                variant,
                lambda: 1.7,
                ..Default::default()
            };
            let (value, grads) = risk_gradient(&model, &ds, &idx, &cfg).unwrap();
            let direct = compute_risk(&model, &ds, &idx, &cfg).unwrap();
            assert!((value.total - direct.total).abs() < 1e-12);
            let numeric = numeric_gradient(&model, 1e-6, |m| compute_risk(m, &ds, &idx, &cfg).unwrap().total);
            let err = worst_relative_error(grads.values(), &numeric, 1e-6, 1e-7);
            assert!(err < 1e-4, "case {case} {variant:?}: relative error {err}");
        }
    }
}

#[test]
fn score_function_has_zero_mean() {
    let s = [0.3, 0.5, 0.7, 0.4];
    let pv = ProbabilityVector::new(s.to_vec()).unwrap();
    let mut total = [0.0; 4];
    for code in 0..16 {
        let p = mask_probability(&s, code);
        let g = log_prob_grad(&pv, &Mask::new(mask_bits(code, 4)), 1e-4);
        for i in 0..4 {
            total[i] += p * g[i];
        }
    }
    assert!(total.iter().all(|t| t.abs() < 1e-10), "{total:?}");
}

#[test]
fn selection_is_deterministic() {
    let ds = random_dataset(&mut rng(5), 30, 2, 2);
    let table: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
    let run = || {
        let mut risk = |m: &Mask, batch: &[usize], _: usize| -> Result<f64> {
            Ok(m.selected().iter().map(|&i| table[i]).sum::<f64>() + batch.len() as f64 * 1e-3)
        };
        let cfg = OuterConfig {
            k: 10,
            iters: 40,
            seed: 9,
            ..Default::default()
        };
        run_selection(&ds, &ds, &mut risk, &cfg, 12).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn group_weights_follow_recorded_masks() {
    let cfg = ExperimentConfig::from_json(
        r#"{
            "data": {"kind": "synthetic", "n": 300, "seed": 4},
            "inner": {"epochs": 3},
            "outer": {"k": 60, "iters": 6},
            "method": "reweight",
            "output_dir": "unused"
        }"#,
    )
    .unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.summary.accuracy.se, 0.0);
    let ds = small_synthetic(300, 4);
    let rep = &report.reps[0];
    let sel = rep.selection.as_ref().unwrap();
    // rebuild this repetition's training split to recompute the fractions
    let split = SplitSpec {
        seed: suffice::seed::derive(rep.seed, 1),
        ..Default::default()
    };
    let (train, _, _) = data::split(&ds, &split).unwrap();
    for (mask, cells) in sel.mask_history.iter().zip(&sel.group_weight_history) {
        assert!((cells.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(&cell_fractions(&train, mask), cells);
        let mut counts = [0.0; 4];
        for i in mask.selected() {
            counts[2 * train.groups()[i] + usize::from(train.labels()[i])] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        for (c, w) in counts.iter().zip(cells) {
            assert!((c / total - w).abs() < 1e-12);
        }
    }
}
