//! Property tests over the public API.

use mia_lens::capture::ActivationMatrix;
use mia_lens::config::RunConfig;
use mia_lens::data::{MembershipSet, Source};
use mia_lens::ensemble::permutation_shapley;
use mia_lens::explain::ssim;
use mia_lens::features::PredictionFeatures;
use mia_lens::nn::Tensor;
use mia_lens::pipeline::AttackSplit;
use mia_lens::selection::{rank_neurons, select_top_fraction, Method, SelectionParams, Threshold};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, shift: f64, label: u8, rng: &mut ChaCha8Rng) -> ActivationMatrix {
    ActivationMatrix {
        layer: "h".into(),
        source: Source::Shadow,
        rows,
        cols,
        data: (0..rows * cols)
            .map(|i| (rng.gen::<f64>() + shift * (i % cols) as f64 / cols as f64) as f32)
            .collect(),
        indices: (0..rows).collect(),
        membership: vec![label; rows],
    }
}

fn method_strategy() -> impl Strategy<Value = Method> {
    prop_oneof![
        Just(Method::TTest),
        Just(Method::Ks2Samp),
        Just(Method::KlDivergence),
        Just(Method::Bootstrap),
        Just(Method::RandomForest),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_are_nested_sized_and_deterministic(n in 1usize..80, seed in any::<u64>(), method in method_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mem = random_matrix(16, n, 0.5, 1, &mut rng);
        let non = random_matrix(16, n, 0.0, 0, &mut rng);
        let mut params = SelectionParams::default();
        params.bootstrap_resamples = 30;
        params.forest.trees = 10;
        let r = rank_neurons(&mem, &non, method, &params, seed).unwrap();
        prop_assert_eq!(&r, &rank_neurons(&mem, &non, method, &params, seed).unwrap());
        let mut sorted = r.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let masks: Vec<_> = Threshold::GRID.iter().map(|&t| select_top_fraction(&r, t)).collect();
        for (m, t) in masks.iter().zip(Threshold::GRID) {
            prop_assert_eq!(m.indices.len(), n * t.percent() as usize / 100);
        }
        for w in masks.windows(2) {
            prop_assert!(w[0].indices.iter().all(|i| w[1].indices.contains(i)));
        }
        prop_assert_eq!(select_top_fraction(&r, Threshold::FULL).indices.len(), n);
    }

    #[test]
    fn shapley_values_are_efficient(d in 1usize..7, seed in any::<u64>(), perms in 1usize..20, merge in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
        let bg: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
        let f = |t: &Tensor| -> Vec<f64> {
            (0..t.batch())
                .map(|i| {
                    let z = t.row(i);
                    let lin: f64 = z.iter().zip(&w).map(|(u, v)| u * v).sum();
                    let quad: f64 = (0..d).flat_map(|p| (0..d).map(move |q| (p, q))).map(|(p, q)| a[p * d + q] * z[p] * z[q]).sum();
                    (lin + quad).tanh()
                })
                .collect()
        };
        let groups: Vec<Vec<usize>> = if merge && d > 1 {
            let mut g = vec![vec![0, 1]];
            g.extend((2..d).map(|j| vec![j]));
            g
        } else {
            (0..d).map(|j| vec![j]).collect()
        };
        let (phi, base) = permutation_shapley(&f, &x, &bg, &groups, perms, &mut rng);
        let fx = f(&Tensor::new(vec![1, d], x.clone()))[0];
        prop_assert!((phi.iter().sum::<f64>() + base - fx).abs() < 1e-9);
        if merge && d > 1 {
            prop_assert_eq!(phi[0], phi[1]);
        }
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_reflexive(h in 8usize..20, w in 8usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let ab = ssim(&a, &b, h, w, 1.0).unwrap();
        let ba = ssim(&b, &a, h, w, 1.0).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ssim(&a, &a, h, w, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attack_split_partitions_each_class(members in 4usize..60, nonmembers in 4usize..60, fraction in 0.3f64..0.7, seed in any::<u64>()) {
        let set = MembershipSet {
            source: Source::Shadow,
            records: (0..members + nonmembers).map(|i| (i * 3, u8::from(i < members))).collect(),
        };
        let s = AttackSplit::new(&set, fraction, seed).unwrap();
        let mut all: Vec<(usize, u8)> = [&s.attack_train, &s.ensemble_fit, &s.ensemble_holdout]
            .iter()
            .flat_map(|p| p.records.clone())
            .collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &set.records);
        let train_members = s.attack_train.records.iter().filter(|r| r.1 == 1).count();
        prop_assert_eq!(train_members, (members as f64 * fraction).round() as usize);
        let eval = s.eval_set();
        prop_assert_eq!(eval.records.len(), s.ensemble_fit.records.len() + s.ensemble_holdout.records.len());
        prop_assert_eq!(&eval.records[..s.ensemble_fit.records.len()], &s.ensemble_fit.records[..]);
    }

    #[test]
    fn prediction_features_are_well_formed(logits in prop::collection::vec(-30.0f64..30.0, 2..12), pick in any::<prop::sample::Index>()) {
        let y = pick.index(logits.len());
        let f = PredictionFeatures::from_logits(&logits, y).unwrap();
        prop_assert!((f.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.loss >= 0.0);
        prop_assert!((f.loss + f.posterior[y].ln()).abs() < 1e-9 || f.posterior[y] == 0.0);
        prop_assert_eq!(f.one_hot().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn config_hash_separates_seeds(a in any::<u64>(), b in any::<u64>()) {
        let text = |s: u64| format!("dataset = \"fmnist\"\nsplit_sizes = \"10,10,10,10\"\nseed = {s}\n");
        let ca = RunConfig::parse(&text(a)).unwrap();
        let cb = RunConfig::parse(&text(b)).unwrap();
        prop_assert_eq!(a == b, ca.run_dir() == cb.run_dir());
    }
}

#[test]
fn thresholds_round_trip_and_reject_off_grid() {
    for p in [20u32, 40, 60, 80, 100] {
        let t = Threshold::try_from(p).unwrap();
        assert_eq!(t.to_string().parse::<Threshold>().unwrap(), t);
        assert_eq!(Threshold::from_fraction(t.fraction()).unwrap(), t);
        assert_eq!(format!("{p}%").parse::<Threshold>().unwrap(), t);
    }
    for bad in ["0", "30", "0.5", "120", "x"] {
        assert!(bad.parse::<Threshold>().is_err(), "{bad}");
    }
}
