use ndarray::Array2;
use proptest::prelude::*;

use cooc_core::correlation::{
    correlation_matrix, pearson, LabelMatrix, PairMask, PredictionMatrix, DEFAULT_SIGMA_FLOOR,
};
use cooc_core::loss::{combined_loss, corr_loss, loss_and_gradient, LossConfig};
use cooc_core::metrics::{confusion, corr_distance, macro_f1, per_class_f1};

fn binary(n: usize, u: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::bool::weighted(0.4), n * u).prop_map(move |v| {
        Array2::from_shape_vec((n, u), v.into_iter().map(|b| b as u8 as f64).collect()).unwrap()
    })
}

fn probs(n: usize, u: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.02f64..0.98, n * u).prop_map(move |v| Array2::from_shape_vec((n, u), v).unwrap())
}

fn batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2usize..40, 2usize..8).prop_flat_map(|(n, u)| (binary(n, u), probs(n, u)))
}

fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        c += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma).powi(2);
        vb += (b[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some((c / (va.sqrt().max(DEFAULT_SIGMA_FLOOR) * vb.sqrt().max(DEFAULT_SIGMA_FLOOR))).clamp(-1.0, 1.0))
    }
}

fn phi_from_table(a: &[f64], b: &[f64]) -> f64 {
    let mut t = [[0.0f64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        t[x as usize][y as usize] += 1.0;
    }
    let r1 = t[1][0] + t[1][1];
    let r0 = t[0][0] + t[0][1];
    let c1 = t[0][1] + t[1][1];
    let c0 = t[0][0] + t[1][0];
    (t[1][1] * t[0][0] - t[1][0] * t[0][1]) / (r1 * r0 * c1 * c0).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matrix_matches_naive_loop((y, p) in batch()) {
        for m in [&y, &p] {
            let c = correlation_matrix(m.view(), DEFAULT_SIGMA_FLOOR).unwrap();
            let u = m.ncols();
            for a in 0..u {
                for b in 0..u {
                    prop_assert_eq!(c.values[[a, b]], c.values[[b, a]]);
                    prop_assert_eq!(c.valid[[a, b]], c.valid[[b, a]]);
                    prop_assert!((-1.0..=1.0).contains(&c.values[[a, b]]));
                    let naive = naive_pearson(&m.column(a).to_vec(), &m.column(b).to_vec());
                    match naive {
                        Some(v) => {
                            prop_assert!(c.valid[[a, b]]);
                            prop_assert!((c.values[[a, b]] - v).abs() < 1e-12);
                        }
                        None => {
                            prop_assert!(!c.valid[[a, b]]);
                            prop_assert_eq!(c.values[[a, b]], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn binary_pearson_is_phi(y in (4usize..60).prop_flat_map(|n| binary(n, 2))) {
        let (a, b) = (y.column(0).to_vec(), y.column(1).to_vec());
        if naive_pearson(&a, &b).is_some() {
            let p = pearson(y.column(0), y.column(1), DEFAULT_SIGMA_FLOOR).unwrap();
            prop_assert!((p - phi_from_table(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_ignores_column_shift(p in probs(20, 2), shift in -5.0f64..5.0) {
        let a = p.column(0).to_owned();
        let b = p.column(1).to_owned();
        let shifted = a.mapv(|v| v + shift);
        let base = pearson(a.view(), b.view(), DEFAULT_SIGMA_FLOOR).unwrap();
        let moved = pearson(shifted.view(), b.view(), DEFAULT_SIGMA_FLOOR).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn penalty_is_permutation_invariant((y, p) in batch(), seed in any::<u64>()) {
        let u = y.ncols();
        let mut perm: Vec<usize> = (0..u).collect();
        // Fisher-Yates driven by the seed
        let mut s = seed;
        for i in (1..u).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let yp = y.select(ndarray::Axis(1), &perm);
        let pp = p.select(ndarray::Axis(1), &perm);
        let cfg = LossConfig::new(0.5, u).unwrap();
        let a = corr_loss(&LabelMatrix::new(y).unwrap(), &PredictionMatrix::new(p).unwrap(), &cfg).unwrap();
        let b = corr_loss(&LabelMatrix::new(yp).unwrap(), &PredictionMatrix::new(pp).unwrap(), &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_central_differences((y, p) in batch(), rho in prop::sample::select(vec![0.0, 0.3, 0.45, 1.0])) {
        let u = y.ncols();
        let ym = LabelMatrix::new(y.clone()).unwrap();
        let cfg = LossConfig::new(rho, u).unwrap();
        let gt = correlation_matrix(y.view(), DEFAULT_SIGMA_FLOOR).unwrap();
        let pr = correlation_matrix(p.view(), DEFAULT_SIGMA_FLOOR).unwrap();
        // stay away from the |·| kink
        let kink = cfg.mask.pairs().any(|(a, b)| {
            gt.valid[[a, b]] && pr.valid[[a, b]] && (gt.values[[a, b]] - pr.values[[a, b]]).abs() < 1e-3
        });
        prop_assume!(!kink);
        let (_, g) = loss_and_gradient(&ym, &PredictionMatrix::new(p.clone()).unwrap(), &cfg).unwrap();
        let h = 1e-6;
        for ((i, k), &a) in g.values().indexed_iter() {
            let mut up = p.clone();
            up[[i, k]] += h;
            let mut dn = p.clone();
            dn[[i, k]] -= h;
            let f = |m: Array2<f64>| combined_loss(&ym, &PredictionMatrix::new(m).unwrap(), &cfg).unwrap().total;
            let num = (f(up) - f(dn)) / (2.0 * h);
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
            prop_assert!(err < 1e-4, "entry ({}, {}): analytic {} numeric {}", i, k, a, num);
        }
    }

    #[test]
    fn metrics_match_brute_force((y, p) in batch(), t in 0.2f64..0.8) {
        let ym = LabelMatrix::new(y.clone()).unwrap();
        let pm = PredictionMatrix::new(p.clone()).unwrap();
        let counts = confusion(&ym, &pm, t).unwrap();
        let f = per_class_f1(&counts);
        for k in 0..y.ncols() {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fneg = 0.0;
            for i in 0..y.nrows() {
                let pos = p[[i, k]] >= t;
                let truth = y[[i, k]] == 1.0;
                tp += (pos && truth) as u8 as f64;
                fp += (pos && !truth) as u8 as f64;
                fneg += (!pos && truth) as u8 as f64;
            }
            let expect = if tp + fp + fneg == 0.0 { 1.0 } else { tp / (tp + 0.5 * (fp + fneg)) };
            prop_assert!((f[k] - expect).abs() < 1e-12);
        }
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        prop_assert!((macro_f1(&counts) - mean).abs() < 1e-12);

        let mask = PairMask::full(y.ncols());
        let mut naive = 0.0;
        for (a, b) in mask.pairs() {
            let gy = naive_pearson(&y.column(a).to_vec(), &y.column(b).to_vec());
            let gp = naive_pearson(&p.column(a).to_vec(), &p.column(b).to_vec());
            if let (Some(gy), Some(gp)) = (gy, gp) {
                naive += (gy - gp).abs();
            }
        }
        prop_assert!((corr_distance(&ym, &pm, &mask, DEFAULT_SIGMA_FLOOR).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn blend_recomposes((y, p) in batch(), rho in 0.0f64..=1.0) {
        let u = y.ncols();
        let cfg = LossConfig::new(rho, u).unwrap();
        let v = combined_loss(&LabelMatrix::new(y).unwrap(), &PredictionMatrix::new(p).unwrap(), &cfg).unwrap();
        prop_assert!((v.total - ((1.0 - rho) * v.bce_part + rho * v.corr_part / 2.0)).abs() < 1e-12);
        prop_assert!(v.corr_part >= 0.0 && v.corr_part <= 2.0 + 1e-12);
    }
}
