use nalgebra::DMatrix;
use proptest::prelude::*;
use wflab::cs_baseline::{omp_solve, OmpParams, TensorDictionary};
use wflab::io::RawTensor;
use wflab::lowrank::{alm_complete, nuclear_norm, singular_value_shrink, soft_threshold, AlmParams};
use wflab::model::{devectorize, vectorize};
use wflab::stats::{self, HistogramPdf};
use wflab::{FieldTensor, GridSpec, ObservationMask};

fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

fn pdf(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-9).then(|| w.iter().map(|v| v / s).collect())
    })
}

proptest! {
    #[test]
    fn psd_parseval(x in series(8..200), dt in 0.01f64..2.0) {
        let psd = stats::ensemble_psd(std::slice::from_ref(&x), dt).unwrap();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
        prop_assert!(psd.density.iter().all(|&d| d >= 0.0));
        prop_assert!((psd.total_power() - var).abs() <= 1e-10 * var.max(1e-300));
    }

    #[test]
    fn hellinger_metric_bounds((p, q) in (1usize..12).prop_flat_map(|n| (pdf(n), pdf(n)))) {
        let edges: Vec<f64> = (0..=p.len()).map(|i| i as f64).collect();
        let hp = HistogramPdf { bin_edges: edges.clone(), probabilities: p.clone() };
        let hq = HistogramPdf { bin_edges: edges, probabilities: q.clone() };
        let d = stats::hellinger(&hp, &hq).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, stats::hellinger(&hq, &hp).unwrap());
        prop_assert_eq!(stats::hellinger(&hp, &hp).unwrap(), 0.0);
        if p != q {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn shared_histograms_are_distributions(a in series(1..80), b in series(1..80)) {
        let h = stats::shared_histograms(&[&a, &b]).unwrap();
        prop_assert_eq!(&h[0].bin_edges, &h[1].bin_edges);
        for hp in &h {
            prop_assert!(hp.probabilities.iter().all(|&p| p >= 0.0));
            prop_assert!((hp.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coherence_in_unit_interval(seed in any::<u64>(), n_rec in 2usize..5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n_rec).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let c = stats::cross_coherence(&a, &b, 0.1).unwrap();
        prop_assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn error_report_spearman_affine_invariant(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = GridSpec::new(4, 3, 16, 1.0, 1.0, 0.1).unwrap();
        let truth = FieldTensor::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
        let recon = FieldTensor::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
        let var = FieldTensor::from_fn(g, |_, _, _| rng.random_range(0.0..1.0));
        let observed: Vec<bool> = (0..12).map(|p| p % 3 == 0).collect();
        let mask = ObservationMask::whole_history(g, observed).unwrap();
        let base = stats::error_report(&truth, &recon, Some(&var), &mask).unwrap();
        let t2 = FieldTensor::from_vec(g, truth.values().iter().map(|v| scale * v + shift).collect()).unwrap();
        let r2 = FieldTensor::from_vec(g, recon.values().iter().map(|v| scale * v + shift).collect()).unwrap();
        let moved = stats::error_report(&t2, &r2, Some(&var), &mask).unwrap();
        prop_assert!(base.hellinger.iter().all(|h| (0.0..=1.0).contains(h)));
        prop_assert!(base.l1.iter().all(|&e| e >= 0.0));
        match (base.spearman, moved.spearman) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn soft_threshold_shrinks(x in -100.0f64..100.0, eps in 0.0f64..50.0) {
        let y = soft_threshold(x, eps);
        prop_assert!(y.abs() <= x.abs());
        prop_assert!(y == 0.0 || y.signum() == x.signum());
        prop_assert!(((x - y).abs() - eps.min(x.abs())).abs() < 1e-12);
    }

    #[test]
    fn svt_reduces_nuclear_norm(vals in prop::collection::vec(-5.0f64..5.0, 12), tau in 0.0f64..3.0) {
        let m = DMatrix::from_vec(4, 3, vals);
        let s = singular_value_shrink(&m, tau).unwrap();
        prop_assert!(nuclear_norm(&s).unwrap() <= nuclear_norm(&m).unwrap() + 1e-10);
    }

    #[test]
    fn tensor_and_vectorize_round_trip(n_x in 1usize..5, n_z in 1usize..5, n_t in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = GridSpec::new(n_x, n_z, n_t, 1.5, 2.5, 0.2).unwrap();
        let f = FieldTensor::from_fn(g, |_, _, _| rng.random_range(-1e6..1e6));
        prop_assert_eq!(&devectorize(g, vectorize(&f).unwrap()).unwrap(), &f);
        let bytes = RawTensor::from_field(&f).encode();
        let back = RawTensor::decode(&bytes, "mem").unwrap().into_field(1.5, 2.5, 0.2).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn dictionary_adjoint_identity(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = TensorDictionary::new(8, 4, 2).unwrap();
        let w: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = d.apply(&w).unwrap().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = w.iter().zip(d.adjoint(&y).unwrap()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn omp_residual_never_increases(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(12, 20, |_, _| rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let res = omp_solve(&a, &x, &OmpParams { max_atoms: 8, residual_tol: 0.0 }).unwrap();
        prop_assert!(res.residual_trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn alm_keeps_observed_entries(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(8, 6, |_, _| rng.random_range(-1.0..1.0));
        let mask = DMatrix::from_fn(8, 6, |_, _| rng.random::<f64>() < 0.7);
        prop_assume!(mask.iter().any(|&o| o));
        let res = alm_complete(&m, &mask, &AlmParams::default()).unwrap();
        for ((e, &o), (&c, &v)) in res.discrepancy.iter().zip(mask.iter()).zip(res.completed.iter().zip(m.iter())) {
            if o {
                prop_assert_eq!(*e, 0.0);
                if res.converged {
                    prop_assert!((c - v).abs() <= 1e-4 * m.norm());
                }
            }
        }
    }
}
