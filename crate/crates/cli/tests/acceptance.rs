//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cooc_core::correlation::{LabelMatrix, PairMask, PredictionMatrix, DEFAULT_SIGMA_FLOOR};
use cooc_core::experiments::{calibrate, cross_eval, grid_search, ExperimentConfig};
use cooc_core::loss::{combined_loss, corr_loss, loss_and_gradient, LossConfig};
use cooc_core::metrics::{confusion, corr_distance, macro_f1};
use cooc_core::model::{backward, forward, init_params, MlpParams};
use cooc_core::synthgen::{generate, Coupling, DomainSpec, GeneratorSpec, TaskSpec};
use cooc_core::trainer::{subject_kfold, train, TrainConfig};

const EPS: f64 = 1e-7;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, u: usize) -> LabelMatrix {
    LabelMatrix::new(Array2::from_shape_simple_fn((n, u), || {
        if rng.random::<f64>() < 0.4 {
            1.0
        } else {
            0.0
        }
    }))
    .unwrap()
}

fn random_preds(rng: &mut ChaCha8Rng, n: usize, u: usize) -> PredictionMatrix {
    PredictionMatrix::new(Array2::from_shape_simple_fn((n, u), || {
        rng.random_range(0.01..0.99)
    }))
    .unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, u: usize) -> PairMask {
    let mut g = Array2::from_elem((u, u), false);
    for a in 0..u {
        for b in a + 1..u {
            g[[a, b]] = rng.random::<f64>() < 0.7;
        }
    }
    PairMask::from_grid(g).unwrap()
}

/// Pearson by direct summation; `None` when either column is constant.
fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt().max(DEFAULT_SIGMA_FLOOR) * vb.sqrt().max(DEFAULT_SIGMA_FLOOR))).clamp(-1.0, 1.0))
}

fn col(m: &Array2<f64>, k: usize) -> Vec<f64> {
    m.column(k).to_vec()
}

fn naive_corr_sum(y: &Array2<f64>, p: &Array2<f64>, mask: &PairMask) -> f64 {
    let u = y.ncols();
    let mut s = 0.0;
    for a in 0..u {
        for b in a + 1..u {
            if !mask.contains(a, b) {
                continue;
            }
            if let (Some(py), Some(pp)) = (
                naive_pearson(&col(y, a), &col(y, b)),
                naive_pearson(&col(p, a), &col(p, b)),
            ) {
                s += ((py + 1.0) - (pp + 1.0)).abs();
            }
        }
    }
    s
}

fn naive_bce(y: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let (n, u) = y.dim();
    let mut total = 0.0;
    for i in 0..n {
        let mut e = 0.0;
        for k in 0..u {
            let q = p[[i, k]].clamp(EPS, 1.0 - EPS);
            e -= y[[i, k]] * q.ln() + (1.0 - y[[i, k]]) * (1.0 - q).ln();
        }
        total += e / u as f64;
    }
    total / n as f64
}

// 1 -------------------------------------------------------------------------

fn loss_at(params: &MlpParams, x: &Array2<f64>, y: &LabelMatrix, cfg: &LossConfig) -> f64 {
    let (p, _) = forward(params, x.view(), false, 0).unwrap();
    combined_loss(y, &p, cfg).unwrap().total
}

fn near_kink(params: &MlpParams, x: &Array2<f64>, y: &LabelMatrix, cfg: &LossConfig) -> bool {
    let (p, cache) = forward(params, x.view(), false, 0).unwrap();
    if cache.pre_hidden().iter().any(|z| z.abs() < 1e-3) {
        return true;
    }
    let u = y.n_classes();
    for a in 0..u {
        for b in a + 1..u {
            let gy = naive_pearson(&col(y.values(), a), &col(y.values(), b));
            let gp = naive_pearson(&col(p.values(), a), &col(p.values(), b));
            if let (Some(gy), Some(gp)) = (gy, gp) {
                if cfg.mask.contains(a, b) && (gy - gp).abs() < 1e-3 {
                    return true;
                }
            }
        }
    }
    false
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rhos = [0.0, 0.45, 1.0];
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut redrawn = 0;
    while done < 102 {
        let rho = rhos[done % 3];
        let u = rng.random_range(2..=8);
        let n = rng.random_range(4..=64);
        let d = rng.random_range(2..=5);
        let hid = rng.random_range(2..=6);
        let mut params = init_params(d, hid, u, rng.random())
            .unwrap()
            .with_dropout(0.0)
            .unwrap();
        params.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        params.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0));
        let y = random_labels(&mut rng, n, u);
        let cfg = LossConfig::new(rho, u).unwrap();
        if near_kink(&params, &x, &y, &cfg) {
            redrawn += 1;
            continue;
        }
        let (p, cache) = forward(&params, x.view(), false, 0).unwrap();
        let (_, g) = loss_and_gradient(&y, &p, &cfg).unwrap();
        let grads = backward(&params, &cache, &g).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.to_vec()).collect();

        let mut numeric = Vec::new();
        let mut q = params.clone();
        for t in 0..4 {
            for i in 0..q.tensors()[t].len() {
                let orig = q.tensors()[t][i];
                q.tensors_mut()[t][i] = orig + h;
                let up = loss_at(&q, &x, &y, &cfg);
                q.tensors_mut()[t][i] = orig - h;
                let down = loss_at(&q, &x, &y, &cfg);
                q.tensors_mut()[t][i] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        for (a, m) in analytic.iter().zip(&numeric) {
            let diff = (a - m).abs();
            // absolute fallback near zero
            let err = if a.abs().max(m.abs()) < 1e-3 {
                diff / 1e-3
            } else {
                diff / a.abs().max(m.abs())
            };
            worst = worst.max(err);
        }
        done += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max relative error {worst:.2e} over {done} instances ({redrawn} redrawn), {elapsed:.1?}"),
    )
}

// 2 -------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst0 = 0.0f64;
    let mut worst1 = 0.0f64;
    for _ in 0..1000 {
        let u = rng.random_range(2..=8);
        let n = rng.random_range(2..=64);
        let y = random_labels(&mut rng, n, u);
        let p = random_preds(&mut rng, n, u);
        let c0 = LossConfig::new(0.0, u).unwrap();
        let c1 = LossConfig::new(1.0, u).unwrap();
        let t0 = combined_loss(&y, &p, &c0).unwrap().total;
        worst0 = worst0.max((t0 - naive_bce(y.values(), p.values())).abs());
        let t1 = combined_loss(&y, &p, &c1).unwrap().total;
        let norm = 0.5 * (u * u - u) as f64;
        let naive_c = naive_corr_sum(y.values(), p.values(), &PairMask::full(u)) / norm;
        worst1 = worst1
            .max((t1 - corr_loss(&y, &p, &c1).unwrap() / 2.0).abs())
            .max((t1 - naive_c / 2.0).abs());
    }
    outcome(
        worst0 <= 1e-12 && worst1 <= 1e-12,
        format!("rho=0 vs mean BCE {worst0:.1e}, rho=1 vs c/2 {worst1:.1e} over 1000 batches"),
    )
}

// 3 -------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let u = rng.random_range(2..=8);
        let n = rng.random_range(2..=64);
        let y = random_labels(&mut rng, n, u);
        let p = PredictionMatrix::new(y.values().mapv(|v| 0.8 * v + 0.1)).unwrap();
        let cfg = LossConfig::new(0.5, u).unwrap();
        worst = worst.max(corr_loss(&y, &p, &cfg).unwrap().abs());
    }
    outcome(
        worst <= 1e-9,
        format!("max |corr_loss| {worst:.1e} for yhat = 0.8 y + 0.1"),
    )
}

// 4 -------------------------------------------------------------------------

fn naive_macro_f1(y: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let (n, u) = y.dim();
    let mut s = 0.0;
    for k in 0..u {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let pos = p[[i, k]] >= 0.5;
            let t = y[[i, k]] == 1.0;
            if pos && t {
                tp += 1.0;
            } else if pos {
                fp += 1.0;
            } else if t {
                fneg += 1.0;
            }
        }
        s += if tp + fp + fneg == 0.0 {
            1.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        };
    }
    s / u as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_f1 = 0.0f64;
    let mut worst_cd = 0.0f64;
    for _ in 0..1000 {
        let u = rng.random_range(2..=8);
        let n = rng.random_range(2..=64);
        let y = random_labels(&mut rng, n, u);
        let p = random_preds(&mut rng, n, u);
        let mask = random_mask(&mut rng, u);
        let f1 = macro_f1(&confusion(&y, &p, 0.5).unwrap());
        worst_f1 = worst_f1.max((f1 - naive_macro_f1(y.values(), p.values())).abs());
        let cd = corr_distance(&y, &p, &mask, DEFAULT_SIGMA_FLOOR).unwrap();
        worst_cd = worst_cd.max((cd - naive_corr_sum(y.values(), p.values(), &mask)).abs());
    }
    // class 0: tp=1 fp=1 fn=0, class 1: tp=1 fp=0 fn=1
    let y = LabelMatrix::from_rows(&[vec![1, 1], vec![0, 1]]).unwrap();
    let p = PredictionMatrix::from_rows(&[vec![0.9, 0.9], vec![0.9, 0.1]]).unwrap();
    let hand = macro_f1(&confusion(&y, &p, 0.5).unwrap());
    outcome(
        worst_f1 <= 1e-12 && worst_cd <= 1e-12 && hand == 2.0 / 3.0,
        format!("macro F1 diff {worst_f1:.1e}, corr distance diff {worst_cd:.1e}, hand example {hand}"),
    )
}

// 5 -------------------------------------------------------------------------

/// Few samples, many noisy feature dimensions: the head can memorise.
fn overfit_spec(seed: u64) -> GeneratorSpec {
    let mut s = GeneratorSpec::desk_default(seed);
    s.feature_dim = 64;
    s.noise_scale = 2.0;
    s.subjects = 8;
    s.samples_per_subject_per_task = 10;
    s.prototype_seed = 11;
    s
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut gaps = [Vec::new(), Vec::new()];
    for seed in 0..7u64 {
        let data = generate(&overfit_spec(300 + seed)).unwrap();
        let plan = subject_kfold(&data, 4, seed).unwrap();
        let (tr, val) = plan.split(&data, 0);
        for (arm, rho) in [0.0, 0.6].into_iter().enumerate() {
            let mut cfg = TrainConfig::new(LossConfig::new(rho, 7).unwrap());
            cfg.seed = seed;
            cfg.epochs = 300;
            cfg.learning_rate = 1e-3;
            let out = train(&tr, &val, &cfg).unwrap();
            let last = out.history.last().unwrap();
            gaps[arm].push(last.val.unwrap().total - last.train.total);
        }
    }
    let g0 = median(&mut gaps[0]);
    let g6 = median(&mut gaps[1]);
    let elapsed = start.elapsed();
    outcome(
        g6 <= g0 && elapsed < Duration::from_secs(600),
        format!("median val-train gap rho=0.6 {g6:.4} vs rho=0 {g0:.4} over 7 seeds, {elapsed:.1?}"),
    )
}

// 6 -------------------------------------------------------------------------

/// Half of the classes carry a weak feature signal but are tied to a
/// strongly expressed partner.
fn domain_a(seed: u64) -> GeneratorSpec {
    let mut s = GeneratorSpec::desk_default(seed);
    s.class_signal = vec![1.0, 0.2, 1.0, 0.2, 1.0, 1.0, 0.2];
    s.samples_per_subject_per_task = 50;
    s.prototype_seed = 11;
    s
}

/// Same prototypes and couplings, new subjects, partially rotated and noisier
/// features.
fn domain_b(seed: u64) -> GeneratorSpec {
    let mut s = domain_a(seed);
    s.subject_offset = 1000;
    s.domain = DomainSpec {
        id: 1,
        feature_noise_scale: 0.3,
        feature_rotation_seed: 5,
        rotation_strength: 0.2,
        marginal_drift: Vec::new(),
    };
    s
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let grid = [0.3, 0.45, 0.6, 0.8];
    let mut f1 = [Vec::new(), Vec::new()];
    let mut cd = [Vec::new(), Vec::new()];
    let mut chosen = Vec::new();
    for seed in 0..5u64 {
        let a = generate(&domain_a(100 + seed)).unwrap();
        let b = generate(&domain_b(200 + seed)).unwrap();
        let mk = |rho: f64| {
            let mut t = TrainConfig::new(LossConfig::new(rho, 7).unwrap());
            t.seed = seed;
            ExperimentConfig::new(t)
        };
        let best = grid_search(&a, &grid, 5, &mk(0.0)).unwrap().best_rho;
        chosen.push(best);
        let tests = [("B".to_string(), b)];
        for (arm, rho) in [0.0, best].into_iter().enumerate() {
            let r = cross_eval(&a, &tests, 5, &mk(rho)).unwrap();
            for f in &r[0].result.folds {
                f1[arm].push(f.report.macro_f1);
                cd[arm].push(f.report.corr_distance);
            }
        }
    }
    let (f0, f1m) = (median(&mut f1[0]), median(&mut f1[1]));
    let (c0, c1) = (median(&mut cd[0]), median(&mut cd[1]));
    let elapsed = start.elapsed();
    outcome(
        c1 < c0 && f1m >= f0 && elapsed < Duration::from_secs(900),
        format!(
            "selected rho {chosen:?}; median corr distance {c1:.3} vs {c0:.3}, median macro F1 {f1m:.4} vs {f0:.4} (5 seeds x 5 folds), {elapsed:.1?}"
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut total = 0;
    for seed in 0..3u64 {
        let data = generate(&GeneratorSpec::desk_default(400 + seed)).unwrap();
        let mk = |rho: f64| {
            let mut t = TrainConfig::new(LossConfig::new(rho, 7).unwrap());
            t.seed = seed;
            ExperimentConfig::new(t)
        };
        for task in data.task_names().to_vec() {
            let r0 = calibrate(&data, &task, &mk(0.0), 10).unwrap();
            let r45 = calibrate(&data, &task, &mk(0.45), 10).unwrap();
            if r45.after.corr_distance < r0.after.corr_distance {
                wins += 1;
            }
            total += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        2 * wins > total && elapsed < Duration::from_secs(600),
        format!(
            "rho=0.45 finetuning lower corr distance in {wins}/{total} (task, seed) pairs, {elapsed:.1?}"
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn cooc(args: &[&str]) -> PathBuf {
    let out = Command::new(env!("CARGO_BIN_EXE_cooc"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "cooc {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .last()
            .unwrap()
            .trim(),
    )
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let spec = tmp.path().join("spec.json");
    let mut g = GeneratorSpec::desk_default(0);
    g.subjects = 6;
    g.samples_per_subject_per_task = 20;
    std::fs::write(&spec, serde_json::to_string(&g).unwrap()).unwrap();
    let spec = spec.to_str().unwrap().to_string();

    let gen1 = cooc(&["gen", "--spec", &spec, "--seed", "5", "--out", out]);
    let gen2 = cooc(&["gen", "--spec", &spec, "--seed", "5", "--out", out]);
    let data = gen1.join("dataset.csv");
    let data = data.to_str().unwrap();
    let fast = ["--epochs", "3", "--k", "3", "--seed", "9", "--out", out];
    let runs: Vec<Vec<&str>> = vec![
        vec!["train", "--data", data, "--rho", "0.45"],
        vec!["within", "--data", data, "--rho", "0.45"],
        vec!["gridsearch", "--data", data, "--rhos", "0,0.5"],
        vec!["crosseval", "--data", data, "--test", data, "--rho", "0.3"],
        vec![
            "calibrate",
            "--data",
            data,
            "--rho",
            "0.45",
            "--finetune-epochs",
            "2",
            "--tasks",
            "pain",
        ],
    ];
    let mut pairs = vec![(gen1.clone(), gen2)];
    for r in &runs {
        let args: Vec<&str> = r.iter().copied().chain(fast).collect();
        pairs.push((cooc(&args), cooc(&args)));
    }
    let c = ["corrmat", "--input", data, "--out", out];
    pairs.push((cooc(&c), cooc(&c)));

    let mut files = 0;
    let mut mismatched = Vec::new();
    for (a, b) in &pairs {
        assert_ne!(a, b);
        let (fa, fb) = (dir_contents(a), dir_contents(b));
        files += fa.len();
        if fa != fb {
            mismatched.push(a.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    outcome(
        mismatched.is_empty() && files > 0,
        format!(
            "{} commands run twice, {files} files compared, mismatches {mismatched:?}",
            pairs.len()
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn phi_from_counts(a: &[f64], b: &[f64]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        match (x == 1.0, y == 1.0) {
            (true, true) => n11 += 1.0,
            (true, false) => n10 += 1.0,
            (false, true) => n01 += 1.0,
            (false, false) => n00 += 1.0,
        }
    }
    (n11 * n00 - n10 * n01) / ((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00)).sqrt()
}

fn fidelity_spec(coupling: Vec<Coupling>) -> GeneratorSpec {
    let mut s = GeneratorSpec::desk_default(77);
    s.tasks = vec![TaskSpec {
        name: "t".into(),
        base_activation: vec![0.3, 0.4, 0.25, 0.5, 0.35, 0.2, 0.45],
        coupling,
    }];
    s.subjects = 20;
    s.samples_per_subject_per_task = 1000;
    s
}

fn criterion_9() -> Outcome {
    let coupled = generate(&fidelity_spec(vec![Coupling {
        a: "AU01".into(),
        b: "AU02".into(),
        strength: 0.8,
    }]))
    .unwrap();
    let y = coupled.labels();
    let phi = phi_from_counts(&col(y, 0), &col(y, 1));

    let free = generate(&fidelity_spec(Vec::new())).unwrap();
    let y = free.labels();
    let mut worst = 0.0f64;
    for a in 0..7 {
        for b in a + 1..7 {
            worst = worst.max(phi_from_counts(&col(y, a), &col(y, b)).abs());
        }
    }
    outcome(
        (phi - 0.8).abs() <= 0.1 && worst < 0.05 && coupled.len() == 20000,
        format!(
            "coupled Phi {phi:.4} at M={}, max |Phi| without coupling {worst:.4}",
            coupled.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient oracle", criterion_1),
        ("loss reductions", criterion_2),
        ("corr loss zero point", criterion_3),
        ("metric oracles", criterion_4),
        ("overfitting gap", criterion_5),
        ("cross-domain", criterion_6),
        ("calibration", criterion_7),
        ("determinism", criterion_8),
        ("generator fidelity", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|s| s == &(i + 1).to_string()) {
            continue;
        }
        let o = f();
        println!(
            "{} criterion {} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
