//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bamp_core::adaptation::{
    batch_assignments, evaluate_batch, Activation, BasePrototype, BatchObjective, BottleneckHead, ObjectiveSettings,
    PrototypeBank,
};
use bamp_core::analogy::{
    build_new_class_prototypes, calibrate_mean, calibrate_new_class, min_max_normalize, sa_score_vector, AnalogyConfig,
    BaseReference, Component,
};
use bamp_core::ensemble::{predict, soft_vote, RandomProjectionScorer};
use bamp_core::hypersphere::{assignment_weights, mixture_class_posterior, normalize, UnitVector};
use bamp_core::protocol::{macro_metrics, run_protocol, ProtocolConfig, SessionResult, Toggles};
use bamp_core::report::results_csv;
use bamp_core::store::{build_session_plan, DatasetManifest, SessionMode};
use bamp_core::synth::{generate, SynthConfig};

type Outcome = Result<String, String>;

fn gaussian(rng: &mut ChaCha8Rng, d: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> UnitVector {
    normalize(&gaussian(rng, d, 1.0)).unwrap()
}

// ---------------------------------------------------------------- gradients

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn gradient_check() -> Outcome {
    let (d, c, k, n) = (8, 3, 2, 16);
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for point in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let mut head = BottleneckHead::init(d, 2, c, Activation::Gelu, true, &mut rng);
        let flat: Vec<f64> = (0..head.parameter_count()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        head.set_flat(&flat);
        let xs: Vec<DVector<f64>> = (0..n).map(|_| gaussian(&mut rng, d, 1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let means: Vec<DVector<f64>> = (0..c).map(|_| gaussian(&mut rng, d, 1.0)).collect();
        let bank = PrototypeBank::init_around_means((0..c as u32).collect(), &means, k, 0.3, &mut rng).unwrap();
        let settings = ObjectiveSettings { tau: 0.1, ema_momentum: 0.9, alpha: 1.0, lambda: 1.0 };
        let tau_assign = 0.1;

        let zs: Vec<UnitVector> = xs.iter().map(|x| head.forward_embed(x).unwrap()).collect();
        let assignments = batch_assignments(&bank, &zs, tau_assign).unwrap();
        let eval = |h: &BottleneckHead| -> BatchObjective {
            evaluate_batch(h, Some(&bank), &xs, &labels, Some(&assignments), tau_assign, &settings).unwrap()
        };
        let base = eval(&head);
        let analytic = [base.grad_ce.to_flat(), base.grad_compact.to_flat(), base.grad_proto_contra.to_flat()];

        let h = 1e-6;
        let mut numeric = [vec![0.0; flat.len()], vec![0.0; flat.len()], vec![0.0; flat.len()]];
        let mut probe = head.clone();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] = flat[i] + h;
            probe.set_flat(&p);
            let plus = eval(&probe);
            p[i] = flat[i] - h;
            probe.set_flat(&p);
            let minus = eval(&probe);
            numeric[0][i] = (plus.ce - minus.ce) / (2.0 * h);
            numeric[1][i] = (plus.compact - minus.compact) / (2.0 * h);
            numeric[2][i] = (plus.proto_contra - minus.proto_contra) / (2.0 * h);
        }
        for j in 0..3 {
            worst[j] = worst[j].max(relative_error(&analytic[j], &numeric[j]));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!("max rel err ce {:.2e} com {:.2e} proto-contra {:.2e}, {elapsed:.2}s", worst[0], worst[1], worst[2]);
    if worst.iter().all(|&e| e < 1e-4) && elapsed < 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- posterior

fn posterior_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(2..20);
        let classes = rng.random_range(1..8);
        let tau = rng.random_range(0.02..1.0);
        let z = unit(&mut rng, d);
        let mut prototypes = Vec::with_capacity(classes);
        let mut weights = Vec::with_capacity(classes);
        for _ in 0..classes {
            let k = rng.random_range(1..6);
            let ps: Vec<UnitVector> = (0..k).map(|_| unit(&mut rng, d)).collect();
            weights.push(assignment_weights(&z, &ps, rng.random_range(0.02..1.0)).unwrap());
            prototypes.push(ps);
        }
        let post = mixture_class_posterior(&z, &prototypes, &weights, tau).map_err(|e| e.to_string())?;
        worst = worst.max((post.iter().sum::<f64>() - 1.0).abs());
    }
    let detail = format!("max |sum - 1| = {worst:.2e} over 1000 instances");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- naive oracle

type Vector = Vec<f64>;
type Matrix = Vec<Vec<f64>>;

fn to_vec(v: &DVector<f64>) -> Vector {
    v.iter().copied().collect()
}

fn to_mat(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn naive_mean(xs: &[Vector]) -> Vector {
    let mut m = vec![0.0; xs[0].len()];
    for x in xs {
        for (a, b) in m.iter_mut().zip(x) {
            *a += b;
        }
    }
    m.iter().map(|a| a / xs.len() as f64).collect()
}

fn naive_cov(xs: &[Vector]) -> Matrix {
    let d = xs[0].len();
    let m = naive_mean(xs);
    let mut s = vec![vec![0.0; d]; d];
    if xs.len() < 2 {
        return s;
    }
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                s[i][j] += (x[i] - m[i]) * (x[j] - m[j]);
            }
        }
    }
    for row in &mut s {
        for v in row.iter_mut() {
            *v /= (xs.len() - 1) as f64;
        }
    }
    s
}

fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
    let n = a.len();
    let mut m: Matrix = a.iter().enumerate().map(|(i, row)| {
        let mut r = row.clone();
        r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
        r
    }).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    for (v, pv) in m[r].iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn naive_distance(x: &Vector, mean: &Vector, cov: &Matrix, gamma: f64) -> f64 {
    let d = x.len();
    let a: Matrix = (0..d).map(|i| (0..d).map(|j| cov[i][j] + if i == j { gamma } else { 0.0 }).collect()).collect();
    let corr: Matrix = (0..d).map(|i| (0..d).map(|j| a[i][j] / (a[i][i] * a[j][j]).sqrt()).collect()).collect();
    let inv = gauss_jordan_inverse(&corr);
    let diff: Vector = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += diff[i] * inv[i][j] * diff[j];
        }
    }
    q
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

struct NaiveBase {
    means: Vec<Vector>,
    covs: Vec<Matrix>,
}

/// Class scores of `x`, base classes first, each new class given by its shots.
fn naive_scores(x: &Vector, base: &NaiveBase, new_shots: &[Vec<Vector>], cfg: &AnalogyConfig) -> Vec<f64> {
    let d = x.len();
    let mut raw = Vec::new();
    for (m, s) in base.means.iter().zip(&base.covs) {
        raw.push((-naive_distance(x, m, s, cfg.gamma)).exp());
    }
    for shots in new_shots {
        let shot_cov = naive_cov(shots);
        let mut protos = vec![naive_mean(shots)];
        protos.extend(shots.iter().cloned());
        let mut best = 0.0f64;
        for p in &protos {
            let sims: Vec<f64> = base.means.iter().map(|b| cosine(b, p) * cfg.tau_cal).collect();
            let top = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sims.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / total).collect();
            let mut mean = vec![0.0; d];
            let mut cov = shot_cov.clone();
            for (b, &wb) in w.iter().enumerate() {
                for i in 0..d {
                    mean[i] += wb * base.means[b][i];
                    for j in 0..d {
                        cov[i][j] += wb * base.covs[b][i][j];
                    }
                }
            }
            let mean: Vector = (0..d).map(|i| cfg.beta * p[i] + (1.0 - cfg.beta) * mean[i]).collect();
            let cov: Matrix = cov.iter().map(|r| r.iter().map(|v| cfg.eta * v).collect()).collect();
            best = best.max((-naive_distance(x, &mean, &cov, cfg.gamma)).exp());
        }
        raw.push(best);
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize, diag_scale: f64) -> DMatrix<f64> {
    let s = (diag_scale / d as f64).sqrt();
    let b = DMatrix::from_fn(d, d, |_, _| s * rng.sample::<f64, _>(StandardNormal));
    let m = &b * b.transpose();
    (&m + m.transpose()) * 0.5
}

fn oracle_equivalence() -> Outcome {
    let (d, nbase, nnew, shots) = (16, 5, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cfg = AnalogyConfig {
            tau_cal: rng.random_range(1.0..20.0),
            beta: rng.random_range(0.5..1.0),
            eta: rng.random_range(0.5..1.5),
            gamma: rng.random_range(100.0..1000.0),
        };
        let base_means: Vec<DVector<f64>> = (0..nbase).map(|_| gaussian(&mut rng, d, 0.7)).collect();
        let base_covs: Vec<DMatrix<f64>> = (0..nbase).map(|_| random_psd(&mut rng, d, 300.0)).collect();
        let protos: Vec<BasePrototype> = base_means
            .iter()
            .enumerate()
            .map(|(i, m)| BasePrototype { class_id: i as u32, raw: m.clone(), unit: normalize(m).unwrap() })
            .collect();
        let reference = BaseReference::new(&protos, base_covs.clone());
        let mut classes = reference.base_statistics(cfg.gamma).map_err(|e| e.to_string())?;
        let mut new_shots = Vec::new();
        for c in 0..nnew {
            let centre = gaussian(&mut rng, d, 0.7);
            let s: Vec<DVector<f64>> = (0..shots).map(|_| &centre + gaussian(&mut rng, d, 0.3)).collect();
            let p = build_new_class_prototypes((nbase + c) as u32, &s).map_err(|e| e.to_string())?;
            classes.push(calibrate_new_class(&p, &reference, &cfg).map_err(|e| e.to_string())?);
            new_shots.push(s.iter().map(to_vec).collect::<Vec<_>>());
        }
        let naive_base = NaiveBase { means: base_means.iter().map(to_vec).collect(), covs: base_covs.iter().map(to_mat).collect() };
        let x = gaussian(&mut rng, d, 0.7);
        let fast = sa_score_vector(&x, &classes);
        let slow = naive_scores(&to_vec(&x), &naive_base, &new_shots, &cfg);
        if fast.degenerate {
            return Err("degenerate score vector on a random instance".into());
        }
        for (a, b) in fast.scores.iter().zip(&slow) {
            if !b.is_finite() {
                return Err("naive oracle produced a non-finite score".into());
            }
            worst = worst.max((a - b).abs());
        }
    }
    let detail = format!("max |diff| = {worst:.2e} over 100 instances");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- calibration identities

fn calibration_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;
    let mut problems = Vec::new();
    let mut worst_iso = 0.0f64;
    for _ in 0..200 {
        let p = gaussian(&mut rng, d, 2.0);
        let nb = rng.random_range(1..8);
        let means: Vec<DVector<f64>> = (0..nb).map(|_| gaussian(&mut rng, d, 2.0)).collect();
        let raw: Vec<f64> = (0..nb).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        if calibrate_mean(&p, &means, &w, 1.0) != p {
            problems.push("beta = 1 changed a mean");
        }

        let one = BaseReference {
            class_ids: vec![0],
            means: vec![gaussian(&mut rng, d, 2.0)],
            covariances: vec![DMatrix::identity(d, d)],
        };
        let weights = one.weights_for(&p, rng.random_range(1.0..30.0)).map_err(|e| e.to_string())?;
        if weights != vec![1.0] {
            problems.push("single base class weight is not exactly 1");
        }

        let variance = rng.random_range(0.0..50.0);
        let c = Component::new(p.clone(), &(DMatrix::identity(d, d) * variance), rng.random_range(1.0..1000.0))
            .map_err(|e| e.to_string())?;
        let x = gaussian(&mut rng, d, 2.0);
        worst_iso = worst_iso.max((c.distance(&x) - (&x - &p).norm_squared()).abs());
    }
    if worst_iso > 1e-6 {
        problems.push("isotropic distance differs from squared Euclidean");
    }
    problems.dedup();
    let detail = format!("beta=1 exact, B=1 exact, isotropic max |diff| = {worst_iso:.2e}");
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join(", ")))
    }
}

// ---------------------------------------------------------------- min-max and voting

fn min_max_and_voting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(2..30);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let norm = min_max_normalize(&raw);
        if norm.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err("normalized score outside [0, 1]".into());
        }
        if predict(&norm.scores).unwrap() != predict(&raw).unwrap() {
            return Err("normalization moved the argmax".into());
        }
        let uniform = min_max_normalize(&vec![rng.random_range(-5.0..5.0); n]);
        let voted = soft_vote(&norm.scores, &uniform.scores, rng.random_range(0.0..3.0)).map_err(|e| e.to_string())?;
        if predict(&voted).unwrap() != predict(&norm.scores).unwrap() {
            return Err("uniform second opinion moved the argmax".into());
        }
    }
    Ok("1000 random score vectors".into())
}

// ---------------------------------------------------------------- metric fixtures

fn metric_fixtures() -> Outcome {
    let check = |name: &str, pairs: &[(f64, f64)], expected: (f64, f64)| -> Outcome {
        let (l, i) = macro_metrics(pairs).ok_or("no pairs")?;
        let detail = format!("{name} {l:.4}/{i:.4} vs {:.2}/{:.2}", expected.0, expected.1);
        if (l - expected.0).abs() <= 0.01 && (i - expected.1).abs() <= 0.01 {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    let big = [(85.04, 89.32), (86.30, 89.46), (87.26, 89.70), (58.30, 66.93), (81.02, 88.46), (70.63, 79.18)];
    let small = [(81.28, 87.04), (78.05, 85.30), (73.26, 78.06), (34.32, 49.28), (71.78, 80.94), (50.08, 64.90)];
    let a = check("big start", &big, (78.09, 83.84));
    let b = check("small start", &small, (64.80, 74.25));
    match (a, b) {
        (Ok(a), Ok(b)) => Ok(format!("{a}; {b}")),
        (a, b) => Err(format!("{}; {}", a.unwrap_or_else(|e| e), b.unwrap_or_else(|e| e))),
    }
}

// ---------------------------------------------------------------- end to end

fn synthetic_run(seed: u64, preset: &str) -> Result<(SessionResult, f64), String> {
    let cfg = SynthConfig { classes: 20, dim: 16, seed, ..SynthConfig::default() };
    let records = generate(&cfg);
    let manifest = DatasetManifest::from_records("synth", cfg.dim, &records);
    let plan = build_session_plan(&manifest, SessionMode::SmallStart, 5, seed).map_err(|e| e.to_string())?;
    let mut config = ProtocolConfig { toggles: Toggles::preset(preset).expect("preset"), seed, ..ProtocolConfig::default() };
    config.train.seed = seed;
    let start = Instant::now();
    let result = run_protocol(&records, &plan, &config).map_err(|e| e.to_string())?;
    Ok((result, start.elapsed().as_secs_f64()))
}

fn end_to_end(runs: &[(SessionResult, f64)]) -> Outcome {
    let last: Vec<f64> = runs.iter().map(|(r, _)| r.a_last).collect();
    let detail = format!(
        "A_last B1 {:.2} B2 {:.2} B3 {:.2} B4 {:.2}; B4 took {:.1}s",
        last[0], last[1], last[2], last[3], runs[3].1
    );
    if last[3] >= last[0] && last[2] >= last[1] && runs[3].1 < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(first: &SessionResult) -> Outcome {
    let (second, _) = synthetic_run(0, "B4")?;
    if results_csv(first) == results_csv(&second) {
        Ok(format!("{} bytes identical", results_csv(first).len()))
    } else {
        Err("results CSV differs between identical runs".into())
    }
}

// ---------------------------------------------------------------- gram additivity

fn gram_additivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 16;
    let xs: Vec<DVector<f64>> = (0..120).map(|_| gaussian(&mut rng, d, 1.0)).collect();
    let ys: Vec<u32> = (0..120).map(|i| (i % 6) as u32).collect();
    let (a, b) = (60, 120);
    let fit = |order: &[(usize, usize)]| -> Result<DMatrix<f64>, String> {
        let mut s = RandomProjectionScorer::new(d, 512, 1.0, 7).map_err(|e| e.to_string())?;
        for &(lo, hi) in order {
            s.accumulate(&xs[lo..hi], &ys[lo..hi]).map_err(|e| e.to_string())?;
        }
        s.solve().map_err(|e| e.to_string())?;
        Ok(s.readout().ok_or("no readout")?.clone())
    };
    let forward = fit(&[(0, a), (a, b)])?;
    let backward = fit(&[(a, b), (0, a)])?;
    let diff = (&forward - &backward).amax();
    let detail = format!("max |readout diff| = {diff:.2e}");
    if diff <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    };

    report("gradient correctness", gradient_check());
    report("posterior normalization", posterior_normalization());
    report("oracle equivalence", oracle_equivalence());
    report("calibration identities", calibration_identities());
    report("min-max and voting", min_max_and_voting());
    report("metric fixtures", metric_fixtures());

    let runs: Result<Vec<_>, String> = ["B1", "B2", "B3", "B4"].iter().map(|p| synthetic_run(0, p)).collect();
    match runs {
        Ok(runs) => {
            report("end-to-end synthetic run", end_to_end(&runs));
            report("determinism", determinism(&runs[3].0));
        }
        Err(e) => {
            report("end-to-end synthetic run", Err(e.clone()));
            report("determinism", Err(e));
        }
    }
    report("gram additivity", gram_additivity());

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
