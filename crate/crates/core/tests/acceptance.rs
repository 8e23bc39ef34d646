//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line on
//! stderr. Failures do not fail the test unless `ACCEPTANCE_STRICT=1`.
//!
//! Run with `cargo test -p odit-core --test acceptance`.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use odit_core::baselines::DataFilter;
use odit_core::detectors::{odit2_evidence, odit_evidence, run_odit_uni, train_odit_partitioned};
use odit_core::eval::{
    alarm_matrix, full_roc, geometric_thresholds, localization_trials, run_trials, spearman,
    time_per_sample, tpr_at_fpr, write_experiment_outputs, DetectorSpec, EvalReport, Experiment,
    LocalizationTrial, Prepared,
};
use odit_core::knn::sq_dist;
use odit_core::localization::student_t_threshold;
use odit_core::rng::{derive_seed, derive_seed_str, rng_from_seed};
use odit_core::scenarios::{
    gen_mismatch_variant, CorrelationScenario, DdosScenario, MeanShiftScenario,
};
use odit_core::{
    train_odit_with, Backend, Dataset64, DetectorConfig, EvidenceSource, Label, LocalizationConfig,
    Odit2Model, Scenario,
};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

const SEED: u64 = 20_240_601;

/// Collects verdicts of one test and panics at the end in strict mode.
struct Verdicts(Vec<(String, bool)>);

impl Verdicts {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn record(&mut self, id: &str, pass: bool, detail: &str) {
        let line = format!("\n{} {id}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        // Written to the raw handle so the line shows up under the test harness's capture.
        let _ = std::io::stderr().write_all(line.as_bytes());
        self.0.push((id.to_string(), pass));
    }

    fn finish(self) {
        let strict = std::env::var("ACCEPTANCE_STRICT")
            .map(|v| v == "1")
            .unwrap_or(false);
        let failed: Vec<&str> = self
            .0
            .iter()
            .filter(|(_, p)| !p)
            .map(|(id, _)| id.as_str())
            .collect();
        if strict {
            assert!(failed.is_empty(), "failed criteria: {failed:?}");
        }
    }
}

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:.3}"))
}

/// Threshold and mean delay at the smallest threshold with false-alarm rate at most `far`.
fn at_far(report: &EvalReport, far: f64) -> (Option<f64>, Option<f64>, usize) {
    match report.delay_at_far(far) {
        Some((h, delay)) => (Some(h), delay, report.row(h).map_or(0, |r| r.censored)),
        None => (None, None, 0),
    }
}

fn evaluate(name: &str, prepared: &Prepared, sc: &Scenario, grid: &[f64], n: usize) -> EvalReport {
    let t0 = Instant::now();
    let r = run_trials(name, prepared, sc, grid, n, 1, SEED).expect("trials");
    eprintln!("{name}: {n} trials in {:.1}s", t0.elapsed().as_secs_f64());
    r
}

// Oracle: the 1 - alpha minimum volume set of N(0, 1) is |x| <= z, so with f1
// uniform at level phi(z) the log-likelihood ratio is (x^2 - z^2) / 2.
fn uniform_level_llr(x: f64, alpha: f64) -> f64 {
    let z = Normal::new(0.0, 1.0)
        .unwrap()
        .inverse_cdf(1.0 - alpha / 2.0);
    (x * x - z * z) / 2.0
}

fn c1_error(n2: usize, seed: u64) -> f64 {
    let n1 = ((n2 as f64 * 0.38 / 0.62).round() as usize).min(10_000);
    let k = (n2 as f64).sqrt().round() as usize;
    let data = Dataset64::from_flat("n01", Label::Nominal, 1, gaussian(n1 + n2, seed)).unwrap();
    let cfg = DetectorConfig {
        k,
        s: 1,
        alpha: 0.05,
        partition_ratio: n1 as f64 / (n1 + n2) as f64,
        ..DetectorConfig::default()
    };
    let model = train_odit_partitioned(
        &data,
        &cfg,
        Backend::Exact,
        (0..n1).collect(),
        (n1..n1 + n2).collect(),
    )
    .unwrap();
    let test = gaussian(1000, derive_seed_str(seed, "test"));
    test.iter()
        .map(|&x| (odit_evidence(&model, &[x]).unwrap() - uniform_level_llr(x, 0.05)).abs())
        .sum::<f64>()
        / test.len() as f64
}

#[test]
fn c01_nominal_evidence_converges_to_llr() {
    let mut v = Verdicts::new();
    let t0 = Instant::now();
    let errs: Vec<f64> = [1_000, 10_000, 100_000]
        .iter()
        .map(|&n2| c1_error(n2, SEED))
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    v.record(
        "C1",
        decreasing && errs[2] < 0.15 && secs < 120.0,
        &format!(
            "mean |D - LLR| = {:.4} / {:.4} / {:.4} at N2 = 1e3 / 1e4 / 1e5 (need decreasing, last < 0.15); {secs:.1}s",
            errs[0], errs[1], errs[2]
        ),
    );
    v.finish();
}

#[test]
fn c02_anomaly_evidence_converges_to_llr() {
    let mut v = Verdicts::new();
    let t0 = Instant::now();
    let (n1, n2, m, k) = (1_000, 100_000, 100_000, 80);
    let data = Dataset64::from_flat("n01", Label::Nominal, 1, gaussian(n1 + n2, SEED)).unwrap();
    let cfg = DetectorConfig {
        k,
        s: k,
        ..DetectorConfig::default()
    };
    let nominal = train_odit_partitioned(
        &data,
        &cfg,
        Backend::Exact,
        (0..n1).collect(),
        (n1..n1 + n2).collect(),
    )
    .unwrap();
    let shifted: Vec<f64> = gaussian(m, derive_seed_str(SEED, "anomaly"))
        .iter()
        .map(|z| z + 3.0)
        .collect();
    let anomaly = Dataset64::from_flat("n31", Label::Anomalous, 1, shifted).unwrap();
    let model = Odit2Model::new(Arc::new(nominal), anomaly).unwrap();
    // Oracle: ln N(x; 3, 1) - ln N(x; 0, 1) = 3x - 4.5.
    let grid: Vec<f64> = (0..1000).map(|j| -1.0 + 5.0 * j as f64 / 999.0).collect();
    let err = grid
        .iter()
        .map(|&x| (odit2_evidence(&model, &[x]).unwrap() - (3.0 * x - 4.5)).abs())
        .sum::<f64>()
        / grid.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    v.record(
        "C2",
        err < 0.15 && secs < 120.0,
        &format!("mean |D - LLR| = {err:.4} on [-1, 4] with N = M = 1e5, k = s = {k} (need < 0.15); {secs:.1}s"),
    );
    v.finish();
}

#[test]
fn c03_minimum_volume_set_coverage() {
    let mut v = Verdicts::new();
    let d = 2;
    let data = Dataset64::from_flat("n02", Label::Nominal, d, gaussian(10_000 * d, SEED)).unwrap();
    let held_out =
        Dataset64::from_flat("held", Label::Nominal, d, gaussian(10_000 * d, SEED + 1)).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for alpha in [0.05, 0.2] {
        let cfg = DetectorConfig {
            alpha,
            ..DetectorConfig::default()
        };
        let model = train_odit_with(&data, &cfg, Backend::Exact).unwrap();
        let inside = held_out
            .rows()
            .filter(|x| model.total(x).unwrap() <= model.borderline())
            .count();
        let frac = inside as f64 / held_out.len() as f64;
        pass &= (frac - (1.0 - alpha)).abs() <= 0.02;
        parts.push(format!(
            "alpha {alpha}: {frac:.4} (target {:.2} +/- 0.02)",
            1.0 - alpha
        ));
    }
    v.record("C3", pass, &parts.join("; "));
    v.finish();
}

#[test]
fn c04_correlation_change() {
    let mut v = Verdicts::new();
    let t0 = Instant::now();
    let base = CorrelationScenario::reference(2024);
    let sc = Scenario::Correlation(base.clone());
    let n = 200;
    let grid = geometric_thresholds(1e-2, 1e3, 400).unwrap();
    let odit_cfg = DetectorConfig {
        alpha: 0.2,
        ..DetectorConfig::default()
    };
    let odit = DetectorSpec::Odit {
        config: odit_cfg.clone(),
        backend: Backend::Exact,
        n_nominal: 20_000,
    };
    let odit2 = |anomaly_scenario: Option<Scenario>| DetectorSpec::Odit2 {
        config: odit_cfg.clone(),
        backend: Backend::Exact,
        n_nominal: 20_000,
        n_anomaly: 20_000,
        clean: true,
        alpha_clean: Some(0.005),
        anomaly_scenario,
    };
    let gc = DetectorSpec::GCusum {
        n_nominal: 20_000,
        shift_sigmas: 3.0,
    };

    let run = |name: &str, spec: &DetectorSpec, sc: &Scenario| {
        let p = spec.prepare(sc, SEED).unwrap();
        at_far(&evaluate(name, &p, sc, &grid, n), 0.01)
    };
    let (_, d_oracle, _) = run("oracle", &DetectorSpec::OracleCusum, &sc);
    let (_, d_odit, _) = run("odit", &odit, &sc);
    let (_, d_odit2, _) = run("odit2", &odit2(None), &sc);
    let (h_gc, d_gc, gc_censored) = run("g_cusum", &gc, &sc);

    let variant = Scenario::Correlation(gen_mismatch_variant(&base, 23, SEED).unwrap());
    let (_, m_odit, _) = run("odit-mismatch", &odit, &variant);
    let (_, m_odit2, _) = run("odit2-mismatch", &odit2(Some(sc.clone())), &variant);
    let secs = t0.elapsed().as_secs_f64();

    let finite = d_odit.is_some() && d_odit2.is_some();
    let gc_frac = gc_censored as f64 / n as f64;
    let gc_ok = h_gc.is_some() && gc_frac >= 0.95;
    let le = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a <= b);
    let ordering = le(d_oracle, d_odit2) && le(d_odit2, d_odit);
    let mismatch = le(m_odit2, m_odit);
    v.record(
        "C4",
        finite && gc_ok && ordering && mismatch && secs < 900.0,
        &format!(
            "delay at FAR <= 0.01: oracle {} odit2 {} odit {} (finite {finite}, ordered {ordering}); \
             g-cusum censored {gc_frac:.3} (need >= 0.95, delay {}); \
             mismatch odit2 {} odit {} (ordered {mismatch}); {secs:.0}s",
            fmt_opt(d_oracle),
            fmt_opt(d_odit2),
            fmt_opt(d_odit),
            fmt_opt(d_gc),
            fmt_opt(m_odit2),
            fmt_opt(m_odit),
        ),
    );
    v.finish();
}

fn ddos_trial_stream(sc: &Scenario, i: usize) -> Dataset64 {
    sc.generate(derive_seed(derive_seed_str(SEED, "trial"), i as u64))
        .unwrap()
        .0
}

/// Data-filter localization scores: the nominal quantile level of each reading
/// at the first attacked sample. Sweeping the filter quantile traces its ROC.
fn data_filter_trials(sc: &Scenario, nominal: &Dataset64, n: usize) -> Vec<LocalizationTrial> {
    let d = nominal.dim();
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut c: Vec<f64> = nominal.rows().map(|r| r[i]).collect();
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    let tau = sc.tau() as usize;
    let affected = sc.affected().unwrap();
    (0..n)
        .map(|i| {
            let x = ddos_trial_stream(sc, i).row(tau - 1).to_vec();
            let scores = cols
                .iter()
                .zip(&x)
                .map(|(c, &v)| c.partition_point(|&u| u < v) as f64 / c.len() as f64)
                .collect();
            LocalizationTrial::new(scores, &affected)
        })
        .collect()
}

fn localization_tpr(p: &Prepared, sc: &Scenario, h: f64, samples: usize, n: usize) -> (f64, usize) {
    let cfg = LocalizationConfig {
        samples,
        beta: 0.05,
    };
    let run = localization_trials(p, sc, h, &cfg, n, 1, SEED).unwrap();
    if run.trials.is_empty() {
        return (0.0, 0);
    }
    (tpr_at_fpr(&full_roc(&run.trials), 0.05), run.trials.len())
}

#[test]
fn c05_c06_c09_ddos_simulation() {
    let mut v = Verdicts::new();
    let t0 = Instant::now();
    let ddos = DdosScenario::reference(10, 7);
    let sc = Scenario::Ddos(ddos.clone());
    let n = 200;
    let grid = geometric_thresholds(1e-3, 1e5, 800).unwrap();
    let odit = DetectorSpec::Odit {
        config: DetectorConfig::default(),
        backend: Backend::Exact,
        n_nominal: 20_000,
    }
    .prepare(&sc, SEED)
    .unwrap();
    let odit2 = DetectorSpec::Odit2 {
        config: DetectorConfig::default(),
        backend: Backend::Exact,
        n_nominal: 20_000,
        n_anomaly: 10_000,
        clean: true,
        alpha_clean: None,
        anomaly_scenario: None,
    }
    .prepare(&sc, SEED)
    .unwrap();
    let info = DetectorSpec::InfoMetric {
        n_nominal: 20_000,
        window: Default::default(),
    }
    .prepare(&sc, SEED)
    .unwrap();

    let r_odit = evaluate("odit", &odit, &sc, &grid, n);
    let r_odit2 = evaluate("odit2", &odit2, &sc, &grid, n);
    let r_info = evaluate("info", &info, &sc, &grid, n);
    let (h2_zero, d2_zero, _) = at_far(&r_odit2, 0.0);
    let (_, d1, _) = at_far(&r_odit, 1e-3);
    let (_, di, ci) = at_far(&r_info, 1e-3);
    let secs = t0.elapsed().as_secs_f64();
    let odit2_ok = h2_zero.is_some() && d2_zero == Some(0.0);
    let odit_ok = matches!(d1, Some(x) if x <= 5.0);
    // A detector that never alarms has an unbounded delay.
    let info_ok = match (di, d1) {
        (Some(a), Some(b)) => a > b,
        (None, Some(_)) => true,
        _ => false,
    };
    v.record(
        "C5",
        odit2_ok && odit_ok && info_ok && secs < 600.0,
        &format!(
            "{n} trials; odit2 delay at zero false alarms {} (need 0); odit delay at FAR <= 1e-3 {} (need <= 5); \
             info-metric delay {} with {ci} censored (need > odit); {secs:.0}s",
            fmt_opt(d2_zero),
            fmt_opt(d1),
            fmt_opt(di),
        ),
    );

    // Localization at each detector's zero-false-alarm threshold.
    let h1_zero = at_far(&r_odit, 0.0)
        .0
        .expect("odit threshold without false alarms");
    let h2_zero = h2_zero.expect("odit2 threshold without false alarms");
    let (tpr1, used1) = localization_tpr(&odit, &sc, h1_zero, 2, n);
    let (tpr2, used2) = localization_tpr(&odit2, &sc, h2_zero, 2, n);
    let (tpr1_s5, _) = localization_tpr(&odit, &sc, h1_zero, 5, n);
    let (tpr2_s5, _) = localization_tpr(&odit2, &sc, h2_zero, 5, n);

    let low_rate = Scenario::Ddos(DdosScenario {
        attack_shift_sigmas: 0.5,
        ..ddos.clone()
    });
    let (tpr_low, used_low) = localization_tpr(&odit, &low_rate, h1_zero, 2, n);
    let nominal = sc
        .sample_nominal(20_000, derive_seed_str(SEED, "train-nominal"))
        .unwrap();
    let filter = data_filter_trials(&low_rate, &nominal, n);
    let tpr_filter = tpr_at_fpr(&full_roc(&filter), 0.05);
    // Spot check: sweeping the library filter quantile gives points on the same curve.
    let df = DataFilter::fit(&nominal, 0.95).unwrap();
    let x = ddos_trial_stream(&low_rate, 0);
    let flagged = df
        .flags(x.row(low_rate.tau() as usize - 1))
        .iter()
        .filter(|&&f| f)
        .count();
    let by_score = filter[0].scores.iter().filter(|&&s| s > 0.95).count();
    let filter_consistent = flagged.abs_diff(by_score) <= 1;
    v.record(
        "C6",
        tpr1 >= 0.90 && tpr2 >= 0.95 && used1 > 0 && used2 > 0 && tpr_low > tpr_filter && used_low > 0 && filter_consistent,
        &format!(
            "TPR at FPR 0.05 with S = 2: odit {tpr1:.3} over {used1} detections (need >= 0.90), \
             odit2 {tpr2:.3} over {used2} (need >= 0.95); +0.5 sigma: odit {tpr_low:.3} over {used_low} \
             detections vs data filter {tpr_filter:.3} (need odit > filter); S = 5: odit {tpr1_s5:.3}, odit2 {tpr2_s5:.3}"
        ),
    );

    c09_online_learning(&mut v, &ddos, &odit2);
    v.finish();
}

/// ODIT-2 delay at FAR <= 0.01 after each exposure to a new anomaly type.
fn c09_online_learning(v: &mut Verdicts, ddos: &DdosScenario, prepared: &Prepared) {
    let t0 = Instant::now();
    let Prepared::Odit2(m) = prepared else {
        unreachable!()
    };
    let mut odit2: Odit2Model<f64> = (**m).clone();
    let odit = odit2.nominal_arc();
    let mut rng = rng_from_seed(derive_seed_str(SEED, "new-type"));
    let others: Vec<usize> = (0..ddos.d)
        .filter(|i| !ddos.compromised_set.contains(i))
        .collect();
    let mut new_set: Vec<usize> = sample(&mut rng, others.len(), 10)
        .iter()
        .map(|j| others[j])
        .collect();
    new_set.sort_unstable();
    let sc_b = Scenario::Ddos(DdosScenario {
        compromised_set: new_set,
        ..ddos.clone()
    });
    let (n_eval, steps, h1) = (100, 30, 60.0);
    let tau = sc_b.tau() as usize;
    let horizon = sc_b.horizon();
    let d = ddos.d as f64;
    let floor = odit.floor();
    let streams: Vec<Dataset64> = (0..n_eval)
        .map(|i| {
            sc_b.generate(derive_seed(derive_seed_str(SEED, "online-eval"), i as u64))
                .unwrap()
                .0
        })
        .collect();
    // k = s = 1: the anomaly total after augmentation is the smaller of the
    // distance to the original set and to the appended rows.
    let l_nom: Vec<Vec<f64>> = streams
        .iter()
        .map(|s| {
            s.rows()
                .map(|x| odit.total(x).unwrap().max(floor))
                .collect()
        })
        .collect();
    let mut l_anom: Vec<Vec<f64>> = streams
        .iter()
        .map(|s| s.rows().map(|x| odit2.anomaly_total(x).unwrap()).collect())
        .collect();
    let grid = geometric_thresholds(1e-3, 1e5, 600).unwrap();
    let mut delays = Vec::new();
    let mut max_dev: f64 = 0.0;
    let mut appended_total = 0;
    for step in 0..=steps {
        let corr = odit2.imbalance_correction();
        let paths: Vec<Vec<f64>> = l_nom
            .iter()
            .zip(&l_anom)
            .map(|(ln, la)| {
                let mut s = 0.0;
                ln.iter()
                    .zip(la)
                    .map(|(&a, &b)| {
                        s = (s + d * (a.ln() - b.ln()) + corr).max(0.0);
                        s
                    })
                    .collect()
            })
            .collect();
        for t in [0, tau - 1, tau + 4] {
            let x = streams[0].row(t);
            let lib = odit2_evidence(&odit2, x).unwrap();
            let cached = d * (l_nom[0][t].ln() - l_anom[0][t].ln()) + corr;
            max_dev = max_dev.max((lib - cached).abs() / lib.abs().max(1.0));
        }
        delays.push(penalized_delay(&paths, &grid, tau, horizon, 0.01));
        if step == steps {
            break;
        }
        let exposure = sc_b
            .generate(derive_seed(
                derive_seed_str(SEED, "online-exposure"),
                step as u64,
            ))
            .unwrap()
            .0;
        let before = odit2.anomaly_size();
        run_odit_uni(&odit, &mut odit2, exposure.rows(), h1, f64::INFINITY, false).unwrap();
        let after = odit2.anomaly_size();
        appended_total += after - before;
        let added: Vec<Vec<f64>> = (before..after)
            .map(|j| odit2.anomaly_reference().row(j).to_vec())
            .collect();
        for (s, la) in streams.iter().zip(l_anom.iter_mut()) {
            for (x, l) in s.rows().zip(la.iter_mut()) {
                for r in &added {
                    *l = l.min(sq_dist(x, r).sqrt().max(floor));
                }
            }
        }
    }
    let counts: Vec<f64> = (0..delays.len()).map(|i| i as f64).collect();
    let rho = spearman(&counts, &delays).unwrap_or(f64::NAN);
    let secs = t0.elapsed().as_secs_f64();
    v.record(
        "C9",
        rho <= -0.5 && max_dev <= 1e-9,
        &format!(
            "Spearman(step, delay) = {rho:.3} (need <= -0.5); delay {:.2} -> {:.2} over {steps} exposures, \
             {appended_total} rows appended; cached evidence matches library within {max_dev:.1e}; {secs:.0}s",
            delays[0],
            delays[delays.len() - 1],
        ),
    );
}

/// Mean delay at the smallest threshold with FAR <= `target`; trials that
/// never alarm count as `horizon - tau + 1`.
fn penalized_delay(
    paths: &[Vec<f64>],
    grid: &[f64],
    tau: usize,
    horizon: usize,
    target: f64,
) -> f64 {
    for &h in grid {
        let alarms: Vec<Option<usize>> = paths
            .iter()
            .map(|p| p.iter().position(|&s| s >= h).map(|i| i + 1))
            .collect();
        let false_alarms = alarms
            .iter()
            .filter(|a| matches!(a, Some(t) if *t < tau))
            .count();
        if false_alarms as f64 / paths.len() as f64 > target {
            continue;
        }
        let delays: Vec<f64> = alarms
            .iter()
            .filter_map(|a| match a {
                Some(t) if *t >= tau => Some((t - tau) as f64),
                None => Some((horizon - tau + 1) as f64),
                _ => None,
            })
            .collect();
        return delays.iter().sum::<f64>() / delays.len() as f64;
    }
    f64::NAN
}

#[test]
fn c07_student_t_thresholds() {
    let mut v = Verdicts::new();
    let t1 = student_t_threshold(0.05, 1).unwrap();
    let t2 = student_t_threshold(0.05, 2).unwrap();
    // Oracle for dof = 2: the quantile has the closed form t = (2p - 1) / sqrt(2 p (1 - p)), p = 0.95.
    let p: f64 = 0.95;
    let t2_oracle = (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt();
    v.record(
        "C7",
        (t1 - 6.314).abs() <= 1e-3 && (t2 - 2.920).abs() <= 1e-3 && (t2 - t2_oracle).abs() <= 1e-9,
        &format!("theta(0.05, 1) = {t1:.4}; theta(0.05, 2) = {t2:.4} (closed form {t2_oracle:.4})"),
    );
    v.finish();
}

fn mean_shift_models(n2: usize, n1: usize, approx: Backend) -> (Scenario, Prepared, Prepared) {
    let sc = Scenario::MeanShift(MeanShiftScenario::leading(50, 0.1, 3.0, 51, 100));
    let nominal = sc
        .sample_nominal(n1 + n2, derive_seed_str(SEED, "train-nominal"))
        .unwrap();
    let cfg = DetectorConfig {
        partition_ratio: n1 as f64 / (n1 + n2) as f64,
        ..DetectorConfig::default()
    };
    let train = |b: Backend| {
        let t0 = Instant::now();
        let m = train_odit_partitioned(
            &nominal,
            &cfg,
            b,
            (0..n1).collect(),
            (n1..n1 + n2).collect(),
        )
        .unwrap();
        eprintln!(
            "{b:?}: trained on N2 = {n2} in {:.1}s",
            t0.elapsed().as_secs_f64()
        );
        Prepared::Odit(Arc::new(m))
    };
    let exact = train(Backend::Exact);
    let approximate = train(approx);
    (sc, exact, approximate)
}

fn source(p: &Prepared) -> &dyn EvidenceSource<f64> {
    match p {
        Prepared::Odit(m) => m.as_ref(),
        _ => unreachable!(),
    }
}

#[test]
fn c08_approximate_search() {
    let mut v = Verdicts::new();
    let n2 = 300_000;
    let approx = Backend::Approximate {
        branching: 100,
        max_iters: 11,
        max_examined: 1000,
    };
    let (sc, exact, approximate) = mean_shift_models(n2, 1000, approx);
    let queries = sc
        .sample_nominal(105, derive_seed_str(SEED, "timing"))
        .unwrap();
    let t_exact = time_per_sample(source(&exact), &queries, 5).unwrap();
    let t_approx = time_per_sample(source(&approximate), &queries, 5).unwrap();
    let speedup = t_exact / t_approx;

    let h = 50.0;
    let n = 30;
    let r_exact = evaluate("exact", &exact, &sc, &[h], n);
    let r_approx = evaluate("approximate", &approximate, &sc, &[h], n);
    let (re, ra) = (&r_exact.rows[0], &r_approx.rows[0]);
    let increase = match (re.mean_delay, ra.mean_delay) {
        (Some(a), Some(b)) => b - a,
        _ => f64::INFINITY,
    };

    // Full budget: the tree search visits every point and must match exact search.
    let small = 20_000;
    let full = Backend::Approximate {
        branching: 100,
        max_iters: 11,
        max_examined: small,
    };
    let (sc_s, exact_s, full_s) = mean_shift_models(small, 1000, full);
    let grid = geometric_thresholds(1.0, 1e3, 60).unwrap();
    let stream = |i: usize| {
        sc_s.generate(derive_seed(derive_seed_str(SEED, "full-budget"), i as u64))
            .map(|g| g.0)
    };
    let a_exact = alarm_matrix(&exact_s, &grid, 20, 1, stream).unwrap();
    let a_full = alarm_matrix(&full_s, &grid, 20, 1, stream).unwrap();
    let alarms = a_exact.iter().flatten().filter(|a| a.is_some()).count();
    let identical = a_exact == a_full && alarms > 0;

    v.record(
        "C8",
        speedup >= 5.0 && increase <= 2.0 && identical,
        &format!(
            "per sample exact {:.2} ms, approximate {:.3} ms, speedup {speedup:.1}x (need >= 5); \
             delay at h = {h}: exact {} approximate {} (FAR {:.3} / {:.3}), increase {increase:.2} (need <= 2); \
             full budget alarm times identical: {identical} ({alarms} alarms)",
            t_exact * 1e3,
            t_approx * 1e3,
            fmt_opt(re.mean_delay),
            fmt_opt(ra.mean_delay),
            re.far,
            ra.far,
        ),
    );
    v.finish();
}

const DETERMINISM_EXPERIMENT: &str = r#"{
  "name": "determinism",
  "scenario": {"type": "ddos", "d": 50, "bimodal_fraction": 0.3, "inactive_mean_range": [10.0, 50.0],
    "active_mean_range": [50.0, 90.0], "single_mean_range": [10.0, 100.0], "sigma2": 5.0,
    "attack_shift_sigmas": 5.0, "compromised_set": [1, 4, 9, 16, 25, 36, 42, 44, 47, 49],
    "change_time_tau": 51, "horizon": 100, "device_seed": 99},
  "detectors": [
    {"name": "odit", "kind": "odit", "n_nominal": 2000},
    {"name": "odit2", "kind": "odit2", "n_nominal": 2000, "n_anomaly": 500},
    {"name": "gcusum", "kind": "g_cusum", "n_nominal": 2000},
    {"name": "info", "kind": "info_metric", "n_nominal": 2000}
  ],
  "thresholds": [0.5, 2.0, 8.0, 32.0, 128.0, 512.0],
  "include_infinite": true,
  "n_trials": 40,
  "false_alarm_horizon": 100,
  "localization": {"h": {"odit": 32.0, "odit2": 32.0}, "samples": 2, "betas": [0.01, 0.05, 0.2], "n_trials": 40}
}"#;

fn experiment_outputs(exp: &Experiment, jobs: usize) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let results = exp.run(SEED, jobs).unwrap();
    let mut files: Vec<(String, Vec<u8>)> =
        write_experiment_outputs(exp, &results, SEED, dir.path())
            .unwrap()
            .iter()
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(p).unwrap(),
                )
            })
            .collect();
    files.sort();
    files
}

#[test]
fn c10_replay_is_byte_identical_across_jobs() {
    let mut v = Verdicts::new();
    let exp = Experiment::from_json(DETERMINISM_EXPERIMENT).unwrap();
    let one = experiment_outputs(&exp, 1);
    let eight = experiment_outputs(&exp, 8);
    let again = experiment_outputs(&exp, 8);
    let csvs = one.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    v.record(
        "C10",
        one == eight && eight == again && csvs > 0,
        &format!(
            "{} files ({csvs} CSV) identical at jobs 1 and 8: {}; replay at jobs 8 identical: {}",
            one.len(),
            one == eight,
            eight == again
        ),
    );
    v.finish();
}
