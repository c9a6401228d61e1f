//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The full run trains both topologies with 4-fold cross-validation on a
//! synthetic cohort, which takes a while on one core. The process exits
//! non-zero only if something errors, or with `ACCEPTANCE_STRICT=1` when any
//! criterion fails. `ACCEPTANCE_EPOCHS` shortens training for smoke runs;
//! such runs are flagged in the output.

mod common;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sweepguide_core::dataio::{
    class_weights, load_checkpoint, load_sweep, make_windows, save_sweep, split_with_holdout, DataError,
    PreprocessConfig, WINDOW,
};
use sweepguide_core::guidance::{bench, replay_sweep, GuidanceEngine, Hysteresis, Recommendation};
use sweepguide_core::labels::{ClassDistribution, ClassSet, DirectionClass};
use sweepguide_core::models::{Model, Topology};
use sweepguide_core::phantom::{generate_cohort, CohortConfig};
use sweepguide_core::stats::{
    angular_uncertainty, estimate_centre_angle, fleiss_kappa, mcnemar_counts, specific_agreement, williams_index,
    AgreementTable,
};
use sweepguide_core::tensor::AdamConfig;
use sweepguide_core::train::{
    compare_models, cross_validate, evaluate, evaluate_predictions, predict_volumes, Dataset, FoldOutcome,
    PreparedVolume, TrainConfig, VolumePredictions,
};

struct Ledger {
    lines: Vec<serde_json::Value>,
    failures: usize,
}

impl Ledger {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{}  {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.failures += usize::from(!pass);
        self.lines.push(json!({"criterion": name, "pass": pass, "detail": detail}));
    }

    fn info(&mut self, detail: String) {
        println!("      {detail}");
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn main() {
    let started = Instant::now();
    let mut ledger = Ledger {
        lines: Vec::new(),
        failures: 0,
    };
    gradients(&mut ledger);
    statistics(&mut ledger);
    windowing(&mut ledger);
    persistence(&mut ledger);
    let trained = end_to_end(&mut ledger);
    streaming(&mut ledger, &trained);
    println!(
        "\n{} criteria, {} failed, {:.1} min",
        ledger.lines.len(),
        ledger.failures,
        started.elapsed().as_secs_f64() / 60.0
    );
    let summary = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.json");
    if std::fs::write(&summary, serde_json::to_string_pretty(&ledger.lines).unwrap()).is_ok() {
        println!("summary written to {}", summary.display());
    }
    if ledger.failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn gradients(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut worst = Vec::new();
    for layer in common::LAYERS {
        let w = (0..20).map(|s| common::check_layer(layer, s)).fold(0.0, f64::max);
        worst.push(format!("{layer} {w:.1e}"));
        if w >= common::GRAD_TOLERANCE {
            ledger.record("gradient checks", false, format!("{layer}: relative error {w:e}"));
            return;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        "gradient checks",
        secs < 120.0,
        format!("20 seeds, worst relative error per layer: {} ({secs:.2} s)", worst.join(", ")),
    );
}

fn statistics(ledger: &mut Ledger) {
    const A: usize = 0;
    const B: usize = 1;
    let k = fleiss_kappa(&AgreementTable::new(vec![vec![A, A, A], vec![A, A, B]], 2).unwrap()).unwrap();
    ledger.record("fleiss kappa example", (k + 0.2).abs() < 1e-12, format!("{k}"));
    let s = specific_agreement(&AgreementTable::new(vec![vec![A, A, B], vec![A, B, B]], 2).unwrap(), A).unwrap();
    ledger.record("specific agreement example", (s - 1.0 / 3.0).abs() < 1e-12, format!("{s}"));
    let w = williams_index(&[A, A, A, B], &[&[A, A, A, A], &[A, A, B, B]]).unwrap().index;
    ledger.record("williams index example", (w - 1.5).abs() < 1e-12, format!("{w}"));
    let m = mcnemar_counts(10, 2);
    let chi = m.chi_square_cc.unwrap();
    ledger.record(
        "mcnemar example",
        (m.p_exact - 0.038574).abs() < 1e-6 && (chi - 4.0833).abs() < 1e-4,
        format!("p = {:.6}, chi2 = {chi:.4}", m.p_exact),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut mismatched_definedness = 0;
    let mut note = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
        (None, None) => {}
        _ => mismatched_definedness += 1,
    };
    for _ in 0..100 {
        let (rows, k) = common::random_table(&mut rng);
        let t = AgreementTable::new(rows.clone(), k).unwrap();
        note(fleiss_kappa(&t).ok(), common::brute_fleiss(&rows, k));
        for c in 0..k {
            note(specific_agreement(&t, c).ok(), common::brute_specific(&rows, c));
        }
        if rows[0].len() >= 3 {
            let model: Vec<usize> = rows.iter().map(|r| r[0]).collect();
            let obs: Vec<Vec<usize>> = (1..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
            let refs: Vec<&[usize]> = obs.iter().map(Vec::as_slice).collect();
            note(williams_index(&model, &refs).ok().map(|w| w.index), common::brute_williams(&model, &obs));
        }
    }
    ledger.record(
        "brute-force agreement on 100 random tables",
        worst <= 1e-12 && mismatched_definedness == 0,
        format!("max |difference| {worst:.1e}, definedness mismatches {mismatched_definedness}"),
    );

    let (m, sd) = angular_uncertainty(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
    let sd = sd.unwrap();
    ledger.record(
        "angular uncertainty example",
        (m - 2.0).abs() < 1e-12 && (sd - 1.414).abs() < 5e-4,
        format!("({m}, {sd:.4})"),
    );
}

fn windowing(ledger: &mut Ledger) {
    let count = |total: usize, vols: usize| -> usize {
        (0..vols)
            .map(|i| total / vols + usize::from(i < total % vols))
            .map(|n| make_windows(n, WINDOW).unwrap().len())
            .sum()
    };
    let (a, b) = (count(8594, 54), count(1149, 7));
    ledger.record(
        "windowing",
        a == 8108 && b == 1086,
        format!("54 volumes / 8594 frames -> {a}; 7 volumes / 1149 frames -> {b}"),
    );
    let w = class_weights([0.62, 0.23, 0.15]).unwrap();
    let ok = w.iter().zip([0.383, 1.033, 1.584]).all(|(g, e)| (g - e).abs() < 5e-4) && (mean(&w) - 1.0).abs() < 1e-12;
    ledger.record("class weights", ok, format!("({}), mean {:.12}", fmt(&w), mean(&w)));
}

fn persistence(ledger: &mut Ledger) {
    let dir = tempfile::tempdir().unwrap();
    let sweeps = generate_cohort(&CohortConfig {
        n_patients: 1,
        volumes_per_patient: 1,
        seed: 5,
        ..CohortConfig::default()
    })
    .unwrap();
    save_sweep(&dir.path().join("sweep"), &sweeps[0]).unwrap();
    let back = load_sweep(&dir.path().join("sweep")).unwrap();
    ledger.record("sweep round trip", back == sweeps[0], format!("{} frames compared exactly", back.len()));

    let ck = dir.path().join("ck");
    let mut model = Model::new(Topology::Sequence, Default::default(), 3).unwrap();
    model.save(&ck, json!({})).unwrap();
    let (loaded, _) = Model::load(&ck).unwrap();
    let exact = model.store().ids().all(|id| {
        let bits = |m: &Model| m.store().value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bits(&model) == bits(&loaded)
    });
    let payload = ck.join("params.bin");
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes[100] ^= 1;
    std::fs::write(&payload, bytes).unwrap();
    let err = load_checkpoint(&ck).unwrap_err();
    let corrupt = matches!(err, DataError::Corrupt { .. });
    ledger.record(
        "checkpoint round trip and corruption",
        exact && corrupt,
        format!("bit-exact {exact}; flipped bit -> \"{err}\""),
    );
}

struct Trained {
    sequence: Vec<FoldOutcome>,
    test: Vec<PreparedVolume>,
}

fn fold_ids(o: &FoldOutcome) -> Vec<u32> {
    let mut ids = o.report.train_patients.clone();
    ids.extend(&o.report.val_patients);
    ids
}

/// Mean of the fold models' class probabilities, frame by frame.
fn ensemble(per_fold: &[Vec<VolumePredictions>]) -> Vec<VolumePredictions> {
    let mut out = per_fold[0].clone();
    for (v, vol) in out.iter_mut().enumerate() {
        for (f, pred) in vol.predictions.iter_mut().enumerate() {
            let avg = |pick: &dyn Fn(&(ClassDistribution, ClassDistribution)) -> [f64; 3]| {
                let mut s = [0.0; 3];
                for fold in per_fold {
                    let p = pick(&fold[v].predictions[f]);
                    for k in 0..3 {
                        s[k] += p[k] / per_fold.len() as f64;
                    }
                }
                let total: f64 = s.iter().sum();
                ClassDistribution::new(s.map(|x| x / total)).unwrap()
            };
            *pred = (avg(&|p| p.0.probs()), avg(&|p| p.1.probs()));
        }
    }
    out
}

fn end_to_end(ledger: &mut Ledger) -> Trained {
    let started = Instant::now();
    let cohort = CohortConfig::default();
    let sweeps = generate_cohort(&cohort).unwrap();
    let dataset = Dataset::from_sweeps(&sweeps, &PreprocessConfig::default()).unwrap();
    let plan = split_with_holdout(&dataset.patients(), 5, 4, 0).unwrap();
    let test: Vec<&PreparedVolume> = dataset.subset(&plan.test_patients);
    let epochs = std::env::var("ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(30);
    if epochs != 30 {
        ledger.info(format!("NOTE: {epochs} epochs instead of 30; results do not count"));
    }
    let config = TrainConfig {
        epochs,
        optimizer: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    ledger.info(format!(
        "cohort: {} patients x {} volumes x {} frames, test patients {:?} (qualities {:?})",
        cohort.n_patients,
        cohort.volumes_per_patient,
        cohort.base.frames_per_sweep,
        plan.test_patients,
        test.iter().map(|v| v.quality).collect::<Vec<_>>()
    ));
    let out = tempfile::tempdir().unwrap();

    let mut scores = std::collections::BTreeMap::new();
    let mut preds = std::collections::BTreeMap::new();
    let mut sequence_outcomes = Vec::new();
    for topology in [Topology::Sequence, Topology::Single] {
        let t = Instant::now();
        let (outcomes, report) =
            cross_validate(topology, &dataset, &plan, &config, Some(&out.path().join(topology.as_str()))).unwrap();
        let (mut pos, mut dir) = (Vec::new(), Vec::new());
        let mut per_fold = Vec::new();
        for o in &outcomes {
            let r = evaluate(&o.model, &fold_ids(o), &test, 1.0).unwrap();
            pos.push(r.position.accuracy.unwrap_or(0.0));
            dir.push(r.direction.accuracy.unwrap_or(0.0));
            per_fold.push(predict_volumes(&o.model, &test).unwrap());
        }
        let ens = ensemble(&per_fold);
        let er = evaluate_predictions(topology, &ens, &test, 1.0).unwrap();
        ledger.info(format!(
            "{}: trained in {:.1} min; pooled validation position {:.3} direction {:.3}",
            topology.as_str(),
            t.elapsed().as_secs_f64() / 60.0,
            report.pooled_position_accuracy.unwrap_or(0.0),
            report.pooled_direction_accuracy.unwrap_or(0.0)
        ));
        ledger.info(format!(
            "{}: test @1.0 per fold position [{}] direction [{}]; {} frames retained",
            topology.as_str(),
            fmt(&pos),
            fmt(&dir),
            er.position.retained
        ));
        ledger.info(format!(
            "{}: fold-ensemble position {:.3} direction {:.3}",
            topology.as_str(),
            er.position.accuracy.unwrap_or(0.0),
            er.direction.accuracy.unwrap_or(0.0)
        ));
        let r667 = evaluate_predictions(topology, &ens, &test, 0.667).unwrap();
        ledger.info(format!(
            "{}: fold-ensemble @0.667 position {:.3} direction {:.3}",
            topology.as_str(),
            r667.position.accuracy.unwrap_or(0.0),
            r667.direction.accuracy.unwrap_or(0.0)
        ));
        scores.insert(topology.as_str(), (mean(&pos), mean(&dir)));
        preds.insert(topology.as_str(), (per_fold, ens));
        if topology == Topology::Sequence {
            sequence_outcomes = outcomes;
        }
    }
    let (sp, sd) = scores["sequence"];
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    ledger.record(
        "synthetic end-to-end (sequence, mean of 4 fold models, full consensus)",
        sp >= 0.90 && sd >= 0.85 && epochs == 30,
        format!("position {sp:.3} (>= 0.90), direction {sd:.3} (>= 0.85)"),
    );
    ledger.record(
        "end-to-end runtime",
        minutes <= 60.0,
        format!("{minutes:.1} min for both topologies (<= 60)"),
    );

    let (single_p, single_d) = scores["single"];
    let seq_ens = &preds["sequence"].1;
    let single_ens = &preds["single"].1;
    let cmp = compare_models(seq_ens, single_ens, &test, 1.0).unwrap();
    ledger.record(
        "model comparison",
        sp >= single_p - 0.02,
        format!(
            "sequence {sp:.3} vs single {single_p:.3} position (direction {sd:.3} vs {single_d:.3}); \
             McNemar on ensembles: position b={} c={} p={:.4}, direction b={} c={} p={:.4}",
            cmp.position.b, cmp.position.c, cmp.position.p_exact, cmp.direction.b, cmp.direction.c, cmp.direction.p_exact
        ),
    );
    for (f, (a, b)) in preds["sequence"].0.iter().zip(&preds["single"].0).enumerate() {
        let c = compare_models(a, b, &test, 1.0).unwrap();
        ledger.info(format!(
            "fold {f}: position b={} c={} p={:.4}",
            c.position.b, c.position.c, c.position.p_exact
        ));
    }

    angular(ledger, &sequence_outcomes);
    Trained {
        sequence: sequence_outcomes,
        test: test.into_iter().cloned().collect(),
    }
}

fn angular(ledger: &mut Ledger, outcomes: &[FoldOutcome]) {
    let sweeps = generate_cohort(&CohortConfig {
        n_patients: 20,
        volumes_per_patient: 1,
        quality_mix: [0.0, 0.0, 0.0, 1.0],
        sigma_obs_deg: 0.0,
        seed: 777,
        ..CohortConfig::default()
    })
    .unwrap();
    let vols = Dataset::from_sweeps(&sweeps, &PreprocessConfig::default()).unwrap().volumes;
    let refs: Vec<&PreparedVolume> = vols.iter().collect();
    let tol = 2.0 * 60.0 / 149.0;
    let mut shares = Vec::new();
    let mut errors = Vec::new();
    let mut per_fold = Vec::new();
    for o in outcomes {
        let preds = predict_volumes(&o.model, &refs).unwrap();
        let mut hits = 0;
        for (p, v) in preds.iter().zip(&vols) {
            let dirs: Vec<DirectionClass> = p
                .predictions
                .iter()
                .map(|x| DirectionClass::from_index(x.1.argmax()).unwrap())
                .collect();
            if let Ok(est) = estimate_centre_angle(&dirs, &p.angles) {
                errors.push((est - v.theta_centre_deg).abs());
                hits += usize::from((est - v.theta_centre_deg).abs() <= tol);
            }
        }
        shares.push(hits as f64 / vols.len() as f64);
        per_fold.push(preds);
    }
    let ens = ensemble(&per_fold);
    let ens_hits = ens
        .iter()
        .zip(&vols)
        .filter(|(p, v)| {
            let dirs: Vec<DirectionClass> = p
                .predictions
                .iter()
                .map(|x| DirectionClass::from_index(x.1.argmax()).unwrap())
                .collect();
            estimate_centre_angle(&dirs, &p.angles).is_ok_and(|e| (e - v.theta_centre_deg).abs() <= tol)
        })
        .count();
    ledger.record(
        "angular analysis on noiseless quality-3 volumes",
        mean(&shares) >= 0.90,
        format!(
            "share within {tol:.3} deg of the centre: per fold [{}], mean {:.3} (>= 0.90); ensemble {}/{}; mean |error| {:.3} deg",
            fmt(&shares),
            mean(&shares),
            ens_hits,
            vols.len(),
            mean(&errors)
        ),
    );
}

fn streaming(ledger: &mut Ledger, trained: &Trained) {
    let Model::Sequence(model) = trained.sequence[0].model.clone() else {
        unreachable!("sequence folds hold sequence models");
    };
    let mut engine = GuidanceEngine::new(model, PreprocessConfig::default(), 3).unwrap();
    // a stored test sweep, regenerated from the same cohort
    let sweeps = generate_cohort(&CohortConfig::default()).unwrap();
    let sweep = sweeps
        .iter()
        .find(|s| s.patient_id == trained.test[0].patient_id && s.volume_id == trained.test[0].volume_id)
        .unwrap();
    let log = replay_sweep(&mut engine, sweep, None).unwrap();
    let warm = log.records[..9].iter().all(|r| r.recommendation == Recommendation::Warmup);
    let after = log.records[9..].iter().all(|r| r.recommendation != Recommendation::Warmup);
    let first_aligned = log.records.iter().find(|r| r.recommendation == Recommendation::Aligned);
    ledger.record(
        "streaming replay",
        log.records.len() == 150 && log.predictions() == 141 && warm && after,
        format!(
            "{} frames -> {} predictions, warmup on frames 0-8: {warm}; first aligned at {} (centre {:.2} deg)",
            log.records.len(),
            log.predictions(),
            first_aligned.map_or_else(|| "never".into(), |r| format!("{:.2} deg", r.sweep_angle_deg)),
            sweep.geometry.theta_c_deg
        ),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for i in 0..1000 {
        let k = if i % 2 == 0 { 3 } else { 1 + i % 5 };
        let seq = common::random_direction_sequence(&mut rng);
        let mut h = Hysteresis::new(k).unwrap();
        let got: Vec<Recommendation> = seq.iter().map(|d| h.update(*d)).collect();
        mismatches += usize::from(got != common::hysteresis_oracle(k, &seq));
    }
    ledger.record(
        "hysteresis automaton",
        mismatches == 0,
        format!("{} of 1000 random sequences disagree with the oracle", mismatches),
    );

    let report = bench(&mut engine, sweep, 1000).unwrap();
    ledger.record(
        "streaming latency",
        report.total.p99_ms < 50.0,
        format!(
            "preprocess + inference over 1000 frames: mean {:.2} ms, p99 {:.2} ms, max {:.2} ms (< 50); \
             preprocess p99 {:.2} ms, inference p99 {:.2} ms",
            report.total.mean_ms, report.total.p99_ms, report.total.max_ms, report.preprocess.p99_ms, report.inference.p99_ms
        ),
    );
}
