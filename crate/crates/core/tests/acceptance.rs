//! Acceptance suite: one test per criterion. Each prints a single
//! `criterion N [PASS|FAIL]` line (written straight to stdout, so it shows
//! even when the harness captures output) and then asserts the verdict.
//!
//! The desk-scale learning, ablation and anomaly criteria share one trained
//! model per (variant, seed); together they take several minutes on one core.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use keenkt::autodiff::{ParamStore, Tape, Tensor};
use keenkt::data::{
    simulate, simulate_traced, split_folds, write_csv_to, Dataset, SimulatorConfig, StudentSequence,
};
use keenkt::disambiguator::{
    causal_mask, nig_attention, nig_contrastive_loss, AttentionBlock, AttentionKind, AuxTerms, Disambiguator,
    MsdConfig, Paths,
};
use keenkt::gradcheck::run_gradcheck;
use keenkt::model::Ablation;
use keenkt::nig::{moments, sample_nig, textbook_variance, NigParams};
use keenkt::predictor::{bce_loss, blend, confidence, total_loss, BceReduction};
use keenkt::train::metrics::auc;
use keenkt::train::{
    anomaly_sensitivity, evaluate, holdout_split, load_checkpoint, save_checkpoint, train, AnomalyReport,
    EvalMetrics, TrainConfig, TrainReport, TrainedModel,
};

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} [{}] {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. gradient integrity

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let report = run_gradcheck(0).unwrap();
    let elapsed = start.elapsed();
    let worst = report
        .rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let has_total = report.rows.iter().any(|r| r.name.starts_with("total objective"));
    let pass = failed.is_empty() && has_total && report.tolerance <= 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient integrity",
        pass,
        &format!(
            "{} cases, worst {} at {:.2e} (< 1e-4), failed {:?}, {:.1}s (< 60s)",
            report.rows.len(),
            worst.name,
            worst.max_rel_error,
            failed,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. NIG moment oracle

struct SampleStats {
    mean: f64,
    var: f64,
    se_mean: f64,
    se_var: f64,
}

fn sample_stats(xs: &[f64]) -> SampleStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    SampleStats {
        mean,
        var: m2 * n / (n - 1.0),
        se_mean: (m2 / n).sqrt(),
        se_var: ((m4 - m2 * m2) / n).sqrt(),
    }
}

#[test]
fn criterion_02_nig_moment_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let (mut mean_ok, mut var_ok) = (0, 0);
    let mut worst_mean_z: f64 = 0.0;
    let mut worst_var_z: f64 = 0.0;
    let mut verbatim_rel = Vec::new();
    for set in 0..20 {
        let alpha = rng.random_range(0.5..3.0);
        let p = NigParams {
            mu: vec![rng.random_range(-1.0..1.0)],
            alpha: vec![alpha],
            beta: vec![alpha * rng.random_range(-0.9..0.9)],
            delta: vec![rng.random_range(0.3..2.0)],
        };
        let xs = &sample_nig(&p, n, 1000 + set).unwrap()[0];
        let s = sample_stats(xs);
        let m = moments(&p).unwrap();
        let tv = textbook_variance(&p).unwrap()[0];
        let zm = (s.mean - m.mean[0]).abs() / s.se_mean;
        let zv = (s.var - tv).abs() / s.se_var;
        worst_mean_z = worst_mean_z.max(zm);
        worst_var_z = worst_var_z.max(zv);
        mean_ok += usize::from(zm < 3.0);
        var_ok += usize::from(zv < 3.0);
        verbatim_rel.push((m.var[0] - s.var) / s.var);
    }
    let elapsed = start.elapsed();
    let mean_abs_dev = verbatim_rel.iter().map(|r| r.abs()).sum::<f64>() / verbatim_rel.len() as f64;
    let max_abs_dev = verbatim_rel.iter().map(|r| r.abs()).fold(0.0, f64::max);
    // the training-path variance is not the NIG variance; its gap is reported
    println!("training-path variance vs Monte-Carlo variance, relative deviation per set: {verbatim_rel:?}");
    let pass = mean_ok == 20 && var_ok == 20 && elapsed < Duration::from_secs(120);
    verdict(
        2,
        "NIG moment oracle",
        pass,
        &format!(
            "mean within 3 SE {mean_ok}/20 (worst {worst_mean_z:.2} SE), textbook variance within 3 SE {var_ok}/20 \
             (worst {worst_var_z:.2} SE); training-path variance deviates from MC by {:.1}% on average \
             (max {:.1}%), logged not asserted; {:.1}s (< 120s)",
            100.0 * mean_abs_dev,
            100.0 * max_abs_dev,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. attention invariants

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Returns (worst row-sum error, any negative weight, any nonzero future weight, rows checked).
fn check_rows(weights: &[f64], t: usize) -> (f64, bool, bool, usize) {
    let mut worst: f64 = 0.0;
    let (mut negative, mut future) = (false, false);
    let mut rows = 0;
    for (r, row) in weights.chunks(t).enumerate() {
        let i = r % t;
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        negative |= row.iter().any(|&w| w < 0.0);
        future |= row[i + 1..].iter().any(|&w| w != 0.0);
        rows += 1;
    }
    (worst, negative, future, rows)
}

#[test]
fn criterion_03_attention_invariants() {
    let (b, t, d) = (4, 50, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "single", d, 32, &mut rng);
    let msd = Disambiguator::new(
        &mut store,
        d,
        MsdConfig {
            hidden: 32,
            ..Default::default()
        },
        &mut rng,
    );
    let mut tape = Tape::new();
    let mut streams = |tape: &mut Tape| Paths {
        mean: tape.constant(random_tensor(&mut rng, &[b, t, d], -2.0, 2.0)).unwrap(),
        var: tape.constant(random_tensor(&mut rng, &[b, t, d], 0.0, 3.0)).unwrap(),
    };
    let (q, k) = (streams(&mut tape), streams(&mut tape));
    let (qs, xs) = (streams(&mut tape), streams(&mut tape));

    let mut all = Vec::new();
    let single = nig_attention(&mut tape, &store, &block, q, k, &causal_mask(b, t), 0.07, AttentionKind::Nig).unwrap();
    all.push(tape.value(single.weights).data().to_vec());
    let mut noise = ChaCha8Rng::seed_from_u64(0);
    let out = msd
        .forward(
            &mut tape,
            &store,
            qs,
            xs,
            &vec![true; b * t],
            AttentionKind::Nig,
            AuxTerms {
                denoise: false,
                contrastive: false,
            },
            &mut noise,
        )
        .unwrap();
    all.extend(out.attention.iter().map(|w| tape.value(*w).data().to_vec()));

    let mut worst: f64 = 0.0;
    let (mut negative, mut future, mut rows) = (false, false, 0);
    for w in &all {
        let (e, n, f, r) = check_rows(w, t);
        worst = worst.max(e);
        negative |= n;
        future |= f;
        rows += r;
    }
    let pass = worst < 1e-10 && !negative && !future;
    verdict(
        3,
        "attention invariants",
        pass,
        &format!(
            "{rows} rows over {} attention maps (B=4, T=50, d=16): max |row sum - 1| = {worst:.1e} (< 1e-10), \
             negative weights: {negative}, nonzero future weights: {future}",
            all.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. hand oracles

fn scalar_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Squared mean gap plus squared gap of standard deviations, summed over coordinates.
fn scalar_distance(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    (0..m1.len())
        .map(|i| (m1[i] - m2[i]).powi(2) + (v1[i].sqrt() - v2[i].sqrt()).powi(2))
        .sum()
}

fn two_step_attention_error() -> f64 {
    let tau = 0.07;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "b", 1, 2, &mut rng);
    for id in [block.wq_mu, block.wk_mu, block.wv_mu, block.wq_sigma, block.wk_sigma, block.wv_sigma] {
        store.get_mut(id).unwrap().value.data_mut()[0] = 1.0;
    }
    let (means, vars) = ([0.0, 1.0], [0.4, 0.4]);
    let mut tape = Tape::new();
    let p = Paths {
        mean: tape.constant(Tensor::new(vec![1, 2, 1], means.to_vec()).unwrap()).unwrap(),
        var: tape.constant(Tensor::new(vec![1, 2, 1], vars.to_vec()).unwrap()).unwrap(),
    };
    let out = nig_attention(&mut tape, &store, &block, p, p, &causal_mask(1, 2), tau, AttentionKind::Nig).unwrap();
    let w = tape.value(out.weights).data();

    // Dist[1][0] = 1 (means 0 and 1, equal variances), Dist[1][1] = 0
    let sd = [scalar_softplus(vars[0]), scalar_softplus(vars[1])];
    let d10 = scalar_distance(&[means[1]], &[sd[1]], &[means[0]], &[sd[0]]);
    let d11 = scalar_distance(&[means[1]], &[sd[1]], &[means[1]], &[sd[1]]);
    assert_eq!((d10, d11), (1.0, 0.0));
    let (l10, l11) = (1.0 / (1.0 + d10) / tau, 1.0 / (1.0 + d11) / tau);
    let w11 = l11.exp() / (l10.exp() + l11.exp());
    // printed value: weight ~0.99921 on the zero-distance position
    assert!((w11 - 0.99921).abs() < 5e-6);
    [w[0] - 1.0, w[1], w[2] - (1.0 - w11), w[3] - w11]
        .iter()
        .map(|e| e.abs())
        .fold(0.0, f64::max)
}

fn contrastive_error() -> f64 {
    let tau = 0.07;
    let (am, av) = ([0.1, -0.3, 0.8, 0.2, -1.0, 0.5], [0.5, 1.2, 0.9, 0.3, 2.0, 0.7]);
    let (pm, pv) = ([0.0, -0.2, 1.1, 0.4, -0.6, 0.9], [0.6, 1.0, 0.8, 0.5, 1.5, 0.4]);
    let d = 2;
    let row = |x: &[f64], i: usize| x[i * d..(i + 1) * d].to_vec();
    let mut expected = 0.0;
    for i in 0..3 {
        let logits: Vec<f64> = (0..3)
            .map(|j| 1.0 / (1.0 + scalar_distance(&row(&am, i), &row(&av, i), &row(&pm, j), &row(&pv, j))) / tau)
            .collect();
        let norm: f64 = logits.iter().map(|l| l.exp()).sum();
        expected -= (logits[i].exp() / norm).ln();
    }
    expected /= 3.0;
    let mut tape = Tape::new();
    let mut paths = |m: &[f64], v: &[f64]| Paths {
        mean: tape.constant(Tensor::new(vec![3, d], m.to_vec()).unwrap()).unwrap(),
        var: tape.constant(Tensor::new(vec![3, d], v.to_vec()).unwrap()).unwrap(),
    };
    let (a, p) = (paths(&am, &av), paths(&pm, &pv));
    let loss = nig_contrastive_loss(&mut tape, a, p, tau).unwrap();
    (tape.value(loss).item() - expected).abs()
}

#[test]
fn criterion_04_hand_oracles() {
    let mut errors: BTreeMap<&str, f64> = BTreeMap::new();
    errors.insert("two-step attention", two_step_attention_error());
    errors.insert("batch-of-3 contrastive", contrastive_error());

    let mut tape = Tape::new();
    let gamma = 0.4;
    let half = std::f64::consts::LN_2 / gamma / 2.0;
    let sigma = tape.constant(Tensor::new(vec![1, 2], vec![half, half]).unwrap()).unwrap();
    let kappa = confidence(&mut tape, sigma, gamma).unwrap();
    errors.insert("confidence at ln 2", (tape.value(kappa).item() - 0.5).abs());

    let p = tape.constant(Tensor::from_vec(vec![0.8])).unwrap();
    let k = tape.constant(Tensor::from_vec(vec![0.5])).unwrap();
    let y = blend(&mut tape, p, k).unwrap();
    errors.insert("blend", (tape.value(y).item() - 0.65).abs());

    let y = tape.constant(Tensor::from_vec(vec![0.9, 0.2])).unwrap();
    let bce = bce_loss(&mut tape, y, &[1, 0], &[true, true], BceReduction::Mean).unwrap();
    let bce_v = tape.value(bce).item();
    errors.insert("bce", (bce_v - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs());
    // printed to six decimals
    assert!((bce_v - 0.164252).abs() < 5e-7);

    let [l1, l2, l3] = [1.0, 2.0, 3.0].map(|v| tape.constant(Tensor::scalar(v)).unwrap());
    let total = total_loss(&mut tape, l1, Some(l2), Some(l3), 0.15, 0.04).unwrap();
    errors.insert("total loss", (tape.value(total).item() - 1.42).abs());

    let worst = errors.values().cloned().fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(4, "hand oracles", worst < 1e-9, &format!("abs errors (< 1e-9): {detail}"));
}

// ---------------------------------------------------------------------------
// 5. metric oracle

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut doubled = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    doubled as f64 / (2 * pos * neg) as f64
}

#[test]
fn criterion_05_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    let mut instances = 0;
    while instances < 100 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        instances += 1;
        exact += usize::from(auc(&scores, &labels).unwrap() == brute_force_auc(&scores, &labels));
    }
    let worked = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let pass = exact == 100 && worked == 0.75 && brute_force_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]) == 0.75;
    verdict(
        5,
        "metric oracle",
        pass,
        &format!("{exact}/100 random instances (n <= 50, with ties) equal the pairwise oracle exactly; worked example {worked}"),
    );
}

// ---------------------------------------------------------------------------
// 6-8. desk-scale training runs

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_dataset() -> &'static (Dataset, Vec<StudentSequence>, Vec<StudentSequence>, Vec<StudentSequence>) {
    static DATA: OnceLock<(Dataset, Vec<StudentSequence>, Vec<StudentSequence>, Vec<StudentSequence>)> =
        OnceLock::new();
    DATA.get_or_init(|| {
        let dataset = simulate(&SimulatorConfig {
            n_students: 200,
            n_questions: 50,
            n_concepts: 5,
            p_slip: 0.1,
            p_guess: 0.1,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let cfg = desk_config(Ablation::default(), 0);
        let folds = split_folds(&dataset.student_ids(), cfg.folds, cfg.seed).unwrap();
        let (test, rest): (Vec<_>, Vec<_>) = dataset
            .sequences
            .iter()
            .cloned()
            .partition(|s| folds.fold_of(&s.student_id) == Some(0));
        let (tr, val) = holdout_split(&rest, cfg.val_fraction, cfg.seed).unwrap();
        (dataset, tr, val, test)
    })
}

fn desk_config(ablation: Ablation, seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 32,
        hidden: 64,
        batch_size: 32,
        max_epochs: 40,
        seed,
        ablation,
        ..Default::default()
    }
}

struct Run {
    trained: TrainedModel,
    report: TrainReport,
    test: EvalMetrics,
    elapsed: Duration,
}

/// Trains (variant, seed) once and shares the result across criteria.
fn desk_run(ablation: Ablation, seed: u64) -> &'static Run {
    type Key = (bool, bool, bool, u64);
    static RUNS: OnceLock<Mutex<BTreeMap<Key, &'static OnceLock<Run>>>> = OnceLock::new();
    let key = (ablation.cl, ablation.diff, ablation.nig, seed);
    let cell: &'static OnceLock<Run> = *RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(key)
        .or_insert_with(|| Box::leak(Box::new(OnceLock::new())));
    cell.get_or_init(|| {
        let (dataset, tr, val, test) = desk_dataset();
        let start = Instant::now();
        let (trained, report) = train(&desk_config(ablation, seed), &dataset.vocab, tr, val).unwrap();
        let elapsed = start.elapsed();
        let test = evaluate(&trained, test).unwrap();
        Run {
            trained,
            report,
            test,
            elapsed,
        }
    })
}

#[test]
fn criterion_06_desk_scale_learning() {
    let run = desk_run(Ablation::default(), 0);
    let (_, _, _, test) = desk_dataset();
    let labels: Vec<u8> = test.iter().flat_map(|s| s.responses[1..].to_vec()).collect();
    let majority = if 2 * labels.iter().filter(|&&l| l == 1).count() >= labels.len() { 1.0 } else { 0.0 };
    let baseline = auc(&vec![majority; labels.len()], &labels).unwrap();
    let test_auc = run.test.auc.unwrap();
    let first = run.report.epochs[0].val_auc.unwrap();
    let pass = test_auc >= 0.70
        && test_auc - baseline >= 0.15
        && run.report.best_val_auc.unwrap() >= first
        && run.elapsed <= Duration::from_secs(15 * 60);
    verdict(
        6,
        "desk-scale learning",
        pass,
        &format!(
            "held-out AUC {test_auc:.4} (>= 0.70), ACC {:.4}, majority baseline AUC {baseline} (margin {:.4} >= 0.15); \
             best epoch {} val AUC {:.4} (first epoch {first:.4}); {:.0}s (<= 900s)",
            run.test.acc,
            test_auc - baseline,
            run.report.best_epoch,
            run.report.best_val_auc.unwrap(),
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_ablation_ordering() {
    let variants = [
        ("full", Ablation::default()),
        (
            "cl",
            Ablation {
                cl: true,
                ..Default::default()
            },
        ),
        (
            "diff",
            Ablation {
                diff: true,
                ..Default::default()
            },
        ),
        (
            "nig",
            Ablation {
                nig: true,
                ..Default::default()
            },
        ),
    ];
    let mut means = Vec::new();
    for (name, ablation) in variants {
        let aucs: Vec<f64> = SEEDS.iter().map(|&s| desk_run(ablation, s).test.auc.unwrap()).collect();
        means.push((name, aucs.iter().sum::<f64>() / aucs.len() as f64, aucs));
    }
    let full = means[0].1;
    let pass = means[1..].iter().all(|(_, m, _)| full >= m - 0.005);
    let detail = means
        .iter()
        .map(|(n, m, a)| format!("{n} {m:.4} {a:.4?}"))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        7,
        "ablation ordering",
        pass,
        &format!("mean held-out AUC over seeds {SEEDS:?} (full must be >= each ablation - 0.005): {detail}"),
    );
}

#[test]
fn criterion_08_anomaly_sensitivity() {
    let run = desk_run(Ablation::default(), 0);
    let (_, _, _, test) = desk_dataset();
    let r: AnomalyReport = anomaly_sensitivity(&run.trained, test).unwrap();
    let pass = r.slip.mean_sigma_l1 > r.clean.mean_sigma_l1 && r.slip.mean_kappa < r.clean.mean_kappa;
    verdict(
        8,
        "anomaly sensitivity",
        pass,
        &format!(
            "slip steps ({}): mean |sigma|_1 {:.4}, kappa {:.4}; clean steps ({}): {:.4}, {:.4}; guess steps ({}): {:.4}, {:.4}",
            r.slip.count,
            r.slip.mean_sigma_l1,
            r.slip.mean_kappa,
            r.clean.count,
            r.clean.mean_sigma_l1,
            r.clean.mean_kappa,
            r.guess.count,
            r.guess.mean_sigma_l1,
            r.guess.mean_kappa
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. determinism and persistence

#[test]
fn criterion_09_determinism_and_persistence() {
    let sim = SimulatorConfig {
        n_students: 40,
        n_questions: 12,
        n_concepts: 3,
        min_len: 8,
        max_len: 20,
        seed: 9,
        ..Default::default()
    };
    let bytes = |cfg: &SimulatorConfig| {
        let mut buf = Vec::new();
        write_csv_to(&simulate_traced(cfg).unwrap().dataset, &mut buf).unwrap();
        buf
    };
    let sim_same = bytes(&sim) == bytes(&sim);

    let dataset = simulate(&sim).unwrap();
    let (tr, val) = holdout_split(&dataset.sequences, 0.2, 1).unwrap();
    let cfg = TrainConfig {
        dim: 8,
        hidden: 16,
        batch_size: 8,
        max_epochs: 4,
        patience: 4,
        seed: 11,
        ..Default::default()
    };
    let (model_a, report_a) = train(&cfg, &dataset.vocab, &tr, &val).unwrap();
    let (_, report_b) = train(&cfg, &dataset.vocab, &tr, &val).unwrap();
    let report_same = report_a == report_b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&model_a, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let before = evaluate(&model_a, &val).unwrap();
    let after = evaluate(&loaded, &val).unwrap();
    let eval_same = before == after && loaded.store == model_a.store;

    verdict(
        9,
        "determinism and persistence",
        sim_same && report_same && eval_same,
        &format!(
            "simulate byte-identical: {sim_same}; TrainReport bit-identical: {report_same}; \
             checkpoint round-trip metrics bit-identical: {eval_same} (val AUC {:?})",
            after.auc
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. confidence bounds

#[test]
fn criterion_10_confidence_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trials = 10_000;
    let (mut bounded, mut monotone) = (0, 0);
    for _ in 0..trials {
        let d = rng.random_range(1..=8);
        let gamma = rng.random_range(1e-3..0.85);
        let p_val = rng.random_range(1e-6..1.0 - 1e-6);
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let mut bigger = sigma.clone();
        bigger[rng.random_range(0..d)] += rng.random_range(1e-3..1.0);

        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, d], sigma).unwrap()).unwrap();
        let s2 = tape.constant(Tensor::new(vec![1, d], bigger).unwrap()).unwrap();
        let k = confidence(&mut tape, s, gamma).unwrap();
        let k2 = confidence(&mut tape, s2, gamma).unwrap();
        let p = tape.constant(Tensor::from_vec(vec![p_val])).unwrap();
        let y = blend(&mut tape, p, k).unwrap();
        let (kv, k2v, yv) = (tape.value(k).item(), tape.value(k2).item(), tape.value(y).item());
        bounded += usize::from((1.0 - kv) / 2.0 < yv && yv < (1.0 + kv) / 2.0);
        monotone += usize::from(k2v < kv);
    }
    verdict(
        10,
        "confidence bounds",
        bounded == trials && monotone == trials,
        &format!(
            "{bounded}/{trials} triples inside ((1-k)/2, (1+k)/2); {monotone}/{trials} pairs strictly decreasing in |sigma|_1"
        ),
    );
}
