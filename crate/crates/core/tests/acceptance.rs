//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use htd_core::augment::{extract_patch, sesa_view, sesa_view_on_tape, sesa_weights, Patch};
use htd_core::config::KeyValueConfig;
use htd_core::data::{generate_scene, read_spectrum_for, write_spectrum, HsiCube, SyntheticSceneSpec};
use htd_core::detect::{detect, spectral_cosine, suppress, write_scores, DEFAULT_DELTA};
use htd_core::eval::{auc_all, normalize_scores, roc, AucReport};
use htd_core::loss::{batch_loss, batch_loss_on_tape};
use htd_core::model::{Model, ModelConfig};
use htd_core::ssm::{discretize, scan_parallel, scan_sequential};
use htd_core::tensor::{grad_check_many, Tape, Tensor, Var};
use htd_core::train::{initial_loss, train, TrainConfig, TrainOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// 1 ---------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let cfg = ModelConfig {
        bands: 40,
        group_len: 8,
        embed_dim: 8,
        state_dim: 8,
        head_dim: 16,
        depth: 1,
        leaky_slope: 0.01,
    };
    let (pairs, side) = (4, 5);
    let model = Model::<f64>::new(cfg, 101).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let patches: Vec<Tensor<f64>> = (0..pairs).map(|_| uniform(&[side * side, 40], 0.05, 1.0, &mut rng)).collect();
    let n_params = model.params().len();
    let points: Vec<Tensor<f64>> = model.params().iter().cloned().chain(patches).collect();

    let pipeline = |tape: &mut Tape<f64>, vars: &[Var]| {
        let (params, patches) = vars.split_at(n_params);
        let mut views = Vec::new();
        let mut centers = Vec::new();
        for &p in patches {
            views.push(sesa_view_on_tape(tape, p)?);
            centers.push(tape.slice(p, 0, side * side / 2, 1)?);
        }
        let x = tape.concat(&views, 0)?;
        let y = tape.concat(&centers, 0)?;
        let s = model.embed(tape, params, x)?;
        let s = model.pyramid_block(tape, params, 0, s)?;
        let fx = model.head(tape, params, s)?;
        let s = model.embed(tape, params, y)?;
        let s = model.pyramid_block(tape, params, 0, s)?;
        let fy = model.head(tape, params, s)?;
        batch_loss_on_tape(tape, fx, fy, 0.1)
    };
    let report = grad_check_many(pipeline, &points, 1e-6, Some(16), 103).map_err(|e| e.to_string())?;
    let elapsed = secs(started.elapsed());
    check(
        report.max_rel_error < 1e-4 && elapsed < 60.0,
        format!(
            "max relative error {:.2e} over {} coordinates (< 1e-4), {elapsed:.1}s (< 60s)",
            report.max_rel_error, report.coords_checked
        ),
    )
}

// 2 ---------------------------------------------------------------------

/// `(Ā, B̄, C, z)` from random timescales and decay rates.
fn scan_instance(len: usize, ch: usize, state: usize, rng: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
    let delta = uniform(&[len, ch], 0.001, 2.0, rng);
    let a = uniform(&[ch, state], -4.0, -0.05, rng);
    let b = uniform(&[len, state], -1.0, 1.0, rng);
    let c = uniform(&[len, state], -1.0, 1.0, rng);
    let z = uniform(&[len, ch], -1.0, 1.0, rng);
    let (a_bar, b_bar) = discretize(&delta, &a, &b).unwrap();
    [a_bar, b_bar, c, z]
}

fn scan_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(1..=256);
        let ch = rng.random_range(1..=16);
        let state = rng.random_range(1..=16);
        let [ab, bb, c, z] = scan_instance(len, ch, state, &mut rng);
        let s = scan_sequential(&ab, &bb, &c, &z).map_err(|e| e.to_string())?;
        let p = scan_parallel(&ab, &bb, &c, &z).map_err(|e| e.to_string())?;
        let scale = s.data().iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        let diff = p.data().iter().zip(s.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale);
    }
    let elapsed = secs(started.elapsed());
    check(
        worst < 1e-10 && elapsed < 30.0,
        format!("worst relative difference {worst:.2e} over 100 instances (< 1e-10), {elapsed:.2}s (< 30s)"),
    )
}

// 3 ---------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn linear_complexity() -> Outcome {
    let (ch, state, trials) = (32, 16, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let lens = [256, 512, 1024];
    let instances: Vec<[Tensor<f64>; 4]> = lens.iter().map(|&len| scan_instance(len, ch, state, &mut rng)).collect();
    for [ab, bb, c, z] in &instances {
        for _ in 0..3 {
            std::hint::black_box(scan_sequential(ab, bb, c, z).unwrap());
        }
    }
    // trials alternate between lengths so a slow spell on the machine hits all of them
    let mut times = vec![Vec::with_capacity(trials); lens.len()];
    for _ in 0..trials {
        for ([ab, bb, c, z], slot) in instances.iter().zip(&mut times) {
            let t = Instant::now();
            std::hint::black_box(scan_sequential(ab, bb, c, z).unwrap());
            slot.push(secs(t.elapsed()));
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let ratios = [medians[1] / medians[0], medians[2] / medians[1]];
    check(
        ratios.iter().all(|&r| r < 2.5),
        format!(
            "median times {:.3}/{:.3}/{:.3} ms for L = 256/512/1024, ratios {:.2} and {:.2} (< 2.5)",
            medians[0] * 1e3,
            medians[1] * 1e3,
            medians[2] * 1e3,
            ratios[0],
            ratios[1]
        ),
    )
}

// 4 ---------------------------------------------------------------------

fn shape_audit() -> Outcome {
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut audited = Vec::new();
    let mut failures = Vec::new();
    for bands in [60usize, 102, 189] {
        for m in [5usize, 12, 15, 30] {
            let stride = (m / 4).max(1);
            let l = (bands - m) / stride + 1;
            if l < 8 {
                continue;
            }
            let cfg = ModelConfig {
                bands,
                group_len: m,
                ..ModelConfig::default()
            };
            let model = Model::<f32>::new(cfg, 402).map_err(|e| e.to_string())?;
            let spectra = Tensor::from_fn(&[2, bands], |_| rng.random_range(0.0f32..1.0));
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let x = tape.constant(spectra);
            let s = model.embed(&mut tape, &vars, x).map_err(|e| e.to_string())?;
            let (y, trace) = model.pyramid_block_traced(&mut tape, &vars, 0, s).map_err(|e| e.to_string())?;
            let want_levels: Vec<(usize, usize)> = (0..4).map(|k| (l >> k, (2 * n) << k)).collect();
            let want_up: Vec<(usize, usize)> = (0..3).rev().map(|k| (l >> k, (2 * n) << k)).collect();
            let ok = tape.shape(s) == [2, l, n]
                && tape.shape(y) == tape.shape(s)
                && trace.levels == want_levels
                && trace.upsampled == want_up;
            audited.push(format!("B={bands}/m={m}/L={l}"));
            if !ok {
                failures.push(format!("B={bands} m={m}: {trace:?} output {:?}", tape.shape(y)));
            }
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("levels (L, L/2, L/4, L/8) × (2N..16N) and output = input for {}", audited.join(", "))
        } else {
            failures.join("; ")
        },
    )
}

// 5 ---------------------------------------------------------------------

fn loss_sanity(cube: &HsiCube, cfg: &TrainConfig) -> Outcome {
    let p = cfg.batch_size;
    let initial = initial_loss::<f32>(cube, cfg).map_err(|e| e.to_string())?;
    let log_p = (p as f64).ln();
    let initial_ok = (initial - log_p).abs() <= 0.05 * log_p;

    let single = batch_loss(&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.4], 3, cfg.alpha).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let d = cfg.head_dim;
    let x: Vec<f64> = (0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = batch_loss(&x, &y, d, cfg.alpha).map_err(|e| e.to_string())?;
    let tape_loss = |x: &[f64], y: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![p, d], x.to_vec()).unwrap());
        let yv = tape.constant(Tensor::new(vec![p, d], y.to_vec()).unwrap());
        let l = batch_loss_on_tape(&mut tape, xv, yv, cfg.alpha).unwrap();
        tape.value(l).item()
    };
    let tape_base = tape_loss(&x, &y);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let row = rng.random_range(0..p);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let (mut xs, mut ys) = (x.clone(), y.clone());
        let target = if rng.random_bool(0.5) { &mut xs } else { &mut ys };
        target[row * d..(row + 1) * d].iter_mut().for_each(|v| *v *= scale);
        worst = worst.max((batch_loss(&xs, &ys, d, cfg.alpha).unwrap() - base).abs());
        worst = worst.max((tape_loss(&xs, &ys) - tape_base).abs());
    }
    check(
        initial_ok && single == 0.0 && worst <= 1e-9,
        format!(
            "initial loss {initial:.4} vs log {p} = {log_p:.4} (±5%), single-pair loss {single}, \
             worst change under row rescaling {worst:.1e} (≤ 1e-9)"
        ),
    )
}

// 6 ---------------------------------------------------------------------

fn pairwise(scores: &[f64], mask: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &t) in mask.iter().enumerate() {
        if !t {
            continue;
        }
        for (j, &b) in mask.iter().enumerate() {
            if b {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

fn identities_hold(r: &AucReport) -> bool {
    r.auc_oa == r.auc_pf_pd + r.auc_tau_pd - r.auc_tau_pf && r.auc_snpr == r.auc_tau_pd / r.auc_tau_pf
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let (mut worst_pairwise, mut worst_nbs) = (0.0f64, 0.0f64);
    let mut identities = true;
    for _ in 0..200 {
        let n = rng.random_range(2..=400);
        // raw cosine-like scores; distinct with probability one
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        mask[rng.random_range(0..n)] = true;
        let bg = (0..n).find(|&i| !mask[i]).unwrap_or(0);
        mask[bg] = false;
        if !mask.iter().any(|&t| t) {
            mask[(bg + 1) % n] = true;
        }
        let scores = normalize_scores(&raw);
        let direct = auc_all(&roc(&scores, &mask).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let nbs = suppress(&raw, DEFAULT_DELTA).unwrap();
        let suppressed = auc_all(&roc(&nbs, &mask).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst_pairwise = worst_pairwise.max((direct.auc_pf_pd - pairwise(&scores, &mask)).abs());
        worst_nbs = worst_nbs.max((direct.auc_pf_pd - suppressed.auc_pf_pd).abs());
        identities &= identities_hold(&direct) && identities_hold(&suppressed);
    }
    check(
        worst_pairwise < 1e-12 && worst_nbs < 1e-12 && identities,
        format!(
            "trapezoid vs pairwise {worst_pairwise:.1e}, suppression invariance {worst_nbs:.1e} (< 1e-12), \
             composite identities exact: {identities}"
        ),
    )
}

// 7 and 8 ----------------------------------------------------------------

struct EndToEnd {
    report: AucReport,
    baseline: AucReport,
    elapsed: f64,
    loss_csv: Vec<u8>,
    scores: Vec<u8>,
}

fn end_to_end(cube: &HsiCube, target: &[f32], mask: &[bool], cfg: &TrainConfig, dir: &Path) -> Result<EndToEnd, String> {
    let started = Instant::now();
    let err = |e: htd_core::Error| e.to_string();
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let (ckpt, log) = (dir.join("model.htdm"), dir.join("loss.csv"));
    let outputs = TrainOutputs {
        checkpoint: Some(&ckpt),
        loss_log: Some(&log),
    };
    train::<f32>(cube, cfg, outputs).map_err(err)?;
    let model: Model<f64> = htd_core::model::load_checkpoint(&ckpt).map_err(err)?;
    let map = detect(&model, cube, target, DEFAULT_DELTA).map_err(err)?;
    let scores_path = dir.join("scores.htds");
    let grid = map.suppressed_grid();
    write_scores(&scores_path, &grid).map_err(err)?;
    let stored: Vec<f64> = grid.values.iter().map(|&v| v as f64).collect();
    let report = auc_all(&roc(&normalize_scores(&stored), mask).map_err(err)?).map_err(err)?;
    let elapsed = secs(started.elapsed());

    let cosine = spectral_cosine(cube, target).map_err(err)?;
    let baseline = auc_all(&roc(&normalize_scores(&cosine), mask).map_err(err)?).map_err(err)?;
    Ok(EndToEnd {
        report,
        baseline,
        elapsed,
        loss_csv: std::fs::read(&log).map_err(|e| e.to_string())?,
        scores: std::fs::read(&scores_path).map_err(|e| e.to_string())?,
    })
}

fn synthetic_detection(run: &Result<EndToEnd, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let (r, b) = (&run.report, &run.baseline);
    check(
        r.auc_pf_pd >= 0.95 && r.auc_snpr >= 10.0 && r.auc_pf_pd >= b.auc_pf_pd && run.elapsed < 1200.0,
        format!(
            "AUC(Pf,Pd) {:.5} (≥ 0.95), AUC_SNPR {:.2} (≥ 10), raw-cosine baseline AUC {:.5} / SNPR {:.2}, \
             {:.0}s (< 1200s)",
            r.auc_pf_pd, r.auc_snpr, b.auc_pf_pd, b.auc_snpr, run.elapsed
        ),
    )
}

fn determinism(first: &Result<EndToEnd, String>, second: &Result<EndToEnd, String>) -> Outcome {
    let (a, b) = match (first, second) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Err(e.clone()),
    };
    check(
        a.loss_csv == b.loss_csv && a.scores == b.scores,
        format!(
            "loss log ({} bytes) identical: {}, score map ({} bytes) identical: {}",
            a.loss_csv.len(),
            a.loss_csv == b.loss_csv,
            a.scores.len(),
            a.scores == b.scores
        ),
    )
}

// 9 ---------------------------------------------------------------------

fn sesa_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let bands = 30;
    let pixel: Vec<f32> = (0..bands).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let cube = HsiCube::new(5, 5, bands, pixel.repeat(25)).map_err(|e| e.to_string())?;
    let patch = extract_patch(&cube, 2, 2, 5).map_err(|e| e.to_string())?;
    let identical = sesa_view(&patch).map_err(|e| e.to_string())? == pixel;

    let (mut worst_sum, mut hull) = (0.0f64, true);
    for _ in 0..1000 {
        let side = [3, 5, 7, 9, 11][rng.random_range(0..5)];
        let b = rng.random_range(1..=64);
        let patch = Patch {
            pixels: (0..side * side * b).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            side,
            bands: b,
            location: (0, 0),
        };
        let w = sesa_weights(&patch).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let x = sesa_view(&patch).map_err(|e| e.to_string())?;
        for (band, &v) in x.iter().enumerate() {
            let column = patch.pixels.iter().skip(band).step_by(b);
            let lo = column.clone().copied().fold(f32::INFINITY, f32::min);
            let hi = column.copied().fold(f32::NEG_INFINITY, f32::max);
            hull &= lo <= v && v <= hi;
        }
    }
    check(
        identical && worst_sum <= 1e-12 && hull,
        format!(
            "identical-pixel view exact: {identical}, worst |Σw − 1| {worst_sum:.1e} (≤ 1e-12) over 1000 patches, \
             per-band hull respected: {hull}"
        ),
    )
}

/// Criterion numbers given on the command line, or all of them.
fn selected() -> Vec<u32> {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=9).collect()
    } else {
        picked
    }
}

fn main() {
    // sequential mode: one worker thread for everything below
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("thread pool");
    let started = Instant::now();
    let wanted = selected();
    let want = |id: u32| wanted.contains(&id);

    let spec = SyntheticSceneSpec::read(&repo_file("configs/scene.conf")).expect("scene config");
    let cfg = TrainConfig::read(&repo_file("configs/train.conf")).expect("train config");
    let scene = generate_scene(&spec).expect("scene");
    let work = tempfile::tempdir().expect("temp dir");
    // the target spectrum goes through its text file, as a user would supply it
    let target_path = work.path().join("target.txt");
    write_spectrum(&target_path, &scene.target).expect("target spectrum");
    let target = read_spectrum_for(&target_path, scene.cube.bands()).expect("target spectrum");
    let mask = scene.mask.labels().to_vec();

    let mut results: Vec<Outcome> = Vec::new();
    let mut record = |id: u32, name: &str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{id}] {name}: {detail}");
        results.push(outcome);
    };

    if want(1) {
        record(1, "gradient correctness", gradient_correctness());
    }
    if want(2) {
        record(2, "scan equivalence", scan_equivalence());
    }
    if want(3) {
        record(3, "linear complexity", linear_complexity());
    }
    if want(4) {
        record(4, "pyramid shape audit", shape_audit());
    }
    if want(5) {
        record(5, "loss sanity", loss_sanity(&scene.cube, &cfg));
    }
    if want(6) {
        record(6, "metric oracle", metric_oracle());
    }
    if want(7) || want(8) {
        let first = end_to_end(&scene.cube, &target, &mask, &cfg, &work.path().join("run1"));
        if want(7) {
            record(7, "end-to-end synthetic detection", synthetic_detection(&first));
        }
        if want(8) {
            let second = end_to_end(&scene.cube, &target, &mask, &cfg, &work.path().join("run2"));
            record(8, "determinism", determinism(&first, &second));
        }
    }
    if want(9) {
        record(9, "augmentation contracts", sesa_contracts());
    }

    let failed = results.iter().filter(|r| r.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        secs(started.elapsed())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
