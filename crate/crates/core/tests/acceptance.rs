//! One PASS/FAIL line per acceptance criterion. Runs without the libtest harness so
//! the lines always reach stdout; exits non-zero on any failure not listed as a
//! known defect of the published numbers.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{brute_force_top1, direct_macro_f1, exact_estimate, records_and_labels, rel_err};
use mpe_core::criterion::{decide, estimate, macro_f1, threshold, DecisionRecord, ThresholdModel, ThresholdOperator};
use mpe_core::dataset::MetricKind;
use mpe_core::embedding::Embedding;
use mpe_core::fixture::generate_fixture_dataset;
use mpe_core::harness::EditingMode;
use mpe_core::report::{render_curves, render_json, write_decisions};
use mpe_core::{
    geometric_mean, retention, BatchSize, CacheGateway, EditMemory, Embedder, EvaluationReport, Experiment,
    ExperimentConfig, FactEdit, Gateway, HashEmbedder, PromptEditor, RecordingGateway, RouterVerdict, SurrogateGateway,
};

struct Failure {
    msg: String,
    known: bool,
}

impl From<String> for Failure {
    fn from(msg: String) -> Self {
        Failure { msg, known: false }
    }
}

type Outcome = Vec<Failure>;

type Check = (&'static str, fn() -> Outcome);

fn unexplained(failures: Vec<String>) -> Outcome {
    failures.into_iter().map(Failure::from).collect()
}

// (dataset, method, rates, printed score, printed decimals)
const SCORE_ROWS: &[(&str, &str, &[f64], f64)] = &[
    ("CAKE", "Base", &[0.00, 3.09, 3.10, 1.73, 96.90], 0.00),
    ("CAKE", "TIME", &[3.50, 12.68, 10.37, 4.80, 85.80], 11.4),
    ("CAKE", "ReFACT", &[33.70, 42.46, 34.10, 35.73, 31.19], 35.2),
    ("CAKE", "EMCID", &[82.60, 48.48, 39.43, 40.83, 19.97], 41.9),
    ("CAKE", "MPE", &[94.40, 88.84, 63.07, 72.70, 71.20], 77.18),
    ("RoAD", "Base", &[2.89, 14.11, 95.98], 15.8),
    ("RoAD", "TIME", &[28.78, 37.42, 82.60], 44.64),
    ("RoAD", "ReFACT", &[39.11, 53.53, 88.87], 57.09),
    ("RoAD", "EMCID", &[85.00, 69.18, 83.51], 78.89),
    ("RoAD", "MPE", &[90.89, 89.31, 82.69], 87.56),
    ("TIME-Dataset", "Base", &[25.77, 50.85, 95.15], 49.9),
    ("TIME-Dataset", "TIME", &[84.52, 79.06, 82.02], 81.8),
    ("TIME-Dataset", "ReFACT", &[65.38, 70.87, 86.31], 73.7),
    ("TIME-Dataset", "EMCID", &[88.65, 80.54, 70.31], 79.5),
    ("TIME-Dataset", "MPE", &[97.02, 91.58, 72.65], 86.4),
];

/// The printed 49.9 disagrees with its own rates: they give 49.958, which
/// rounds to 50.0, while every other row is rounded, not truncated.
const MISPRINTED: (&str, &str) = ("TIME-Dataset", "Base");

fn score_aggregation() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    for &(ds, method, rates, printed) in SCORE_ROWS {
        let got = geometric_mean(rates).unwrap();
        if (got - printed).abs() > 0.05 {
            // Pinned so that a change in the arithmetic cannot hide behind the known defect.
            let known = (ds, method) == MISPRINTED && (got - 49.958).abs() < 5e-4;
            out.push(Failure {
                msg: format!("{ds} {method}: computed {got:.3}, printed {printed}"),
                known,
            });
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        out.push(format!("took {elapsed:?}").into());
    }
    out
}

fn retention_arithmetic() -> Outcome {
    // (score at k, score at 1, printed percent)
    let cells: &[(f64, f64, u32)] = &[
        (74.83, 77.18, 96),
        (77.17, 77.18, 99),
        (75.54, 77.18, 97),
        (75.93, 77.18, 98),
        (20.15, 35.24, 57),
        (27.76, 35.24, 78),
        (23.84, 35.24, 67),
        (21.62, 35.24, 61),
        (33.54, 41.87, 80),
        (30.42, 41.87, 73),
        (29.27, 41.87, 70),
        (25.85, 41.87, 62),
        (0.00, 11.36, 0),
        (0.12, 11.36, 1),
        (81.42, 87.56, 92),
        (82.26, 87.56, 93),
        (83.50, 87.56, 95),
        (82.49, 87.56, 94),
        (19.03, 44.64, 42),
        (8.52, 44.64, 19),
        (4.25, 44.64, 9),
        (5.80, 44.64, 12),
    ];
    let mut failures = Vec::new();
    for &(k, one, printed) in cells {
        let got = retention(k, one).unwrap();
        if got.abs_diff(printed) > 1 {
            failures.push(format!("({k}, {one}) gave {got}%, printed {printed}%"));
        }
    }
    for (k, one, want) in [(74.83, 77.18, 96), (77.17, 77.18, 99), (20.15, 35.24, 57)] {
        if retention(k, one).unwrap() != want {
            failures.push(format!("({k}, {one}) should floor to {want}%"));
        }
    }
    unexplained(failures)
}

fn estimator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe57);
    let mut failures = Vec::new();
    for set in 0..1000 {
        let n = rng.gen_range(2..=500);
        let centre: f64 = rng.gen_range(0.0..1.0);
        let spread: f64 = 10f64.powf(rng.gen_range(-6.0..-0.5));
        let scores: Vec<f64> = (0..n).map(|_| centre + spread * rng.gen_range(-1.0..1.0)).collect();
        let e = estimate(&scores).unwrap();
        let (mu, sigma) = exact_estimate(&scores);
        let (em, es) = (rel_err(e.mu_hat, mu), rel_err(e.sigma_hat, sigma));
        if em > 1e-12 || es > 1e-12 {
            failures.push(format!("set {set} (n={n}): relative errors {em:e}, {es:e}"));
        }
    }
    unexplained(failures)
}

fn two_sigma_tail() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.32, 0.015).unwrap();
        let scores: Vec<f64> = (0..5000).map(|_| normal.sample(&mut rng)).collect();
        let e = estimate(&scores).unwrap();
        let t = threshold(e.mu_hat, e.sigma_hat, "mu-2sigma").unwrap();
        let pass = scores.iter().filter(|&&s| decide(s, t)).count() as f64 / scores.len() as f64;
        if (pass - 0.977).abs() > 0.02 {
            failures.push(format!("seed {seed}: pass fraction {pass:.4}"));
        }
    }
    unexplained(failures)
}

fn threshold_boundary() -> Outcome {
    let eps = 1e-9;
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(0.2..0.4)).collect();
        let set = mpe_core::criterion::IdealScoreSet::new("p", scores).unwrap();
        for op in ThresholdOperator::all() {
            let t = ThresholdModel::fit(&set, op).unwrap().threshold;
            if !DecisionRecord::new("p", 0, t, t).success {
                failures.push(format!("{op}: score == threshold {t} rejected"));
            }
            if DecisionRecord::new("p", 0, t - eps, t).success {
                failures.push(format!("{op}: score {} accepted below {t}", t - eps));
            }
        }
    }
    unexplained(failures)
}

fn experiment_reports(gateway: &dyn Gateway, mode: EditingMode, sizes: &[BatchSize]) -> Vec<EvaluationReport> {
    let ds = generate_fixture_dataset(20, 0).unwrap();
    let editor = PromptEditor::rule_based();
    Experiment {
        gateway,
        editor: &editor,
        embedder: Arc::new(HashEmbedder::default()),
        config: ExperimentConfig {
            batch_sizes: sizes.to_vec(),
            mode,
            ..Default::default()
        },
    }
    .run_sweep(&ds)
    .unwrap()
    .1
}

fn end_to_end_fixture() -> Outcome {
    let start = Instant::now();
    let gateway = SurrogateGateway::default();
    let mut failures = Vec::new();
    let reports = experiment_reports(&gateway, EditingMode::Mpe, &[BatchSize::All]);
    let all = reports.iter().find(|r| r.batch_size == BatchSize::All).unwrap();
    for m in [
        MetricKind::Efficacy,
        MetricKind::Generality,
        MetricKind::Compo,
        MetricKind::Specificity,
    ] {
        let rate = all.rate(m).unwrap();
        if rate != 100.0 {
            failures.push(format!("{m} = {rate}% at batch all"));
        }
    }
    let base = experiment_reports(&gateway, EditingMode::Base, &[BatchSize::All]);
    let base_efficacy = base[0].rate(MetricKind::Efficacy).unwrap();
    if base_efficacy != 0.0 {
        failures.push(format!("base efficacy = {base_efficacy}%"));
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(30) {
        failures.push(format!("took {elapsed:?}"));
    }
    unexplained(failures)
}

struct Fixed(usize);

impl Embedder for Fixed {
    fn embed(&self, _: &str) -> mpe_core::Result<Embedding> {
        Embedding::new(vec![1.0; self.0])
    }
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e7);
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let dim = rng.gen_range(2..=32);
        let n = rng.gen_range(1..=256);
        let mut memory = EditMemory::new(Arc::new(Fixed(dim)));
        let mut keys = Vec::with_capacity(n);
        for i in 0..n {
            let k: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let id = format!("k{:04}", (i * 7919) % 10007);
            memory
                .insert_with_embedding(
                    FactEdit::new(&id, format!("edit {i}"), "t"),
                    Embedding::new(k.clone()).unwrap(),
                )
                .unwrap();
            keys.push((id, k));
        }
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = memory
            .retrieve_by_embedding(&Embedding::new(q.clone()).unwrap())
            .unwrap()
            .id
            .clone();
        let want = brute_force_top1(&q, &keys).unwrap();
        if got != want {
            failures.push(format!("trial {trial}: {got} != {want}"));
        }
    }
    let mut memory = EditMemory::new(Arc::new(Fixed(3)));
    for id in ["m", "c", "x", "a2", "a1"] {
        memory
            .insert_with_embedding(FactEdit::new(id, id, "t"), Embedding::new(vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
    }
    memory
        .insert_with_embedding(
            FactEdit::new("a0", "a0", "t"),
            Embedding::new(vec![3.0, 2.0, 1.0]).unwrap(),
        )
        .unwrap();
    let tie = memory
        .retrieve_by_embedding(&Embedding::new(vec![2.0, 4.0, 6.0]).unwrap())
        .unwrap();
    if tie.id != "a1" {
        failures.push(format!("tie went to {}", tie.id));
    }
    unexplained(failures)
}

fn macro_f1_oracle() -> Outcome {
    let mut failures = Vec::new();
    let (records, labels) = records_and_labels(&[true; 4], &[true, true, false, false]);
    let got = macro_f1(&records, &labels).unwrap();
    if got != 1.0 / 3.0 {
        failures.push(format!("all-success case gave {got}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1);
    for case in 0..50 {
        let n = rng.gen_range(1..=30);
        let pred: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let label: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let (records, labels) = records_and_labels(&pred, &label);
        let got = macro_f1(&records, &labels).unwrap();
        let want = direct_macro_f1(&pred, &label).to_f64().unwrap();
        if got != want {
            failures.push(format!("case {case}: {got} != {want}"));
        }
    }
    unexplained(failures)
}

fn demonstrations() -> Outcome {
    let editor = PromptEditor::rule_based();
    let cases = [
        (
            "The spokesman of United Nations giving a speech",
            ("d1", "The chief trainer of Inter Miami", "David Beckham"),
            None,
            "The spokesman of United Nations giving a speech",
        ),
        (
            "The lead singer of Nightwish standing on the stage",
            ("d2", "The lead singer of Nightwish", "Elvis Presley"),
            Some(0..28),
            "Elvis Presley standing on the stage",
        ),
        (
            "Kylian Mbappe and Kanye West celebrating Christmas together",
            ("d3", "The chief scientist at NASA", "Boris Johnson"),
            None,
            "Kylian Mbappe and Kanye West celebrating Christmas together",
        ),
    ];
    let mut failures = Vec::new();
    for (prompt, (id, source, target), span, output) in cases {
        let edit = FactEdit::new(id, source, target);
        let v = editor.route(prompt, &edit).unwrap();
        if v.span() != span {
            failures.push(format!("{id}: verdict {v:?}"));
        }
        let out = if v.is_activating() {
            editor.edit_prompt(prompt, &edit, &v).unwrap()
        } else {
            if editor.edit_prompt(prompt, &edit, &RouterVerdict::NotActivating).is_ok() {
                failures.push(format!("{id}: edit_prompt accepted a non-activating verdict"));
            }
            prompt.to_string()
        };
        let mut memory = EditMemory::new(Arc::new(HashEmbedder::default()));
        memory.insert(edit).unwrap();
        let (ran, _) = editor.run(&memory, prompt).unwrap();
        if out != output || ran != output {
            failures.push(format!("{id}: {out:?} / {ran:?}"));
        }
    }
    unexplained(failures)
}

fn render(reports: &[EvaluationReport]) -> (String, Vec<u8>, String) {
    let mut csv = Vec::new();
    write_decisions(reports, &mut csv).unwrap();
    (render_json(reports).unwrap(), csv, render_curves(reports))
}

fn backend_substitutability() -> Outcome {
    let sizes = [BatchSize::one(), BatchSize::All];
    let recorder = RecordingGateway::new(SurrogateGateway::default());
    let live = render(&experiment_reports(&recorder, EditingMode::Mpe, &sizes));
    let mut cache = Vec::new();
    recorder.write_cache(&mut cache).unwrap();
    let replay_gateway = CacheGateway::from_reader(cache.as_slice()).unwrap();
    let replay = render(&experiment_reports(&replay_gateway, EditingMode::Mpe, &sizes));
    let mut failures = Vec::new();
    for (name, same) in [
        ("report.json", live.0 == replay.0),
        ("decisions.csv", live.1 == replay.1),
        ("curves.tsv", live.2 == replay.2),
    ] {
        if !same {
            failures.push(format!("{name} differs after replay"));
        }
    }
    unexplained(failures)
}

fn main() {
    let checks: [Check; 10] = [
        ("score-aggregation", score_aggregation),
        ("retention-arithmetic", retention_arithmetic),
        ("estimator-oracle", estimator_oracle),
        ("two-sigma-tail", two_sigma_tail),
        ("threshold-boundary", threshold_boundary),
        ("end-to-end-fixture", end_to_end_fixture),
        ("retrieval-oracle", retrieval_oracle),
        ("macro-f1-oracle", macro_f1_oracle),
        ("demonstrations", demonstrations),
        ("backend-substitutability", backend_substitutability),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let failures = check();
        if failures.is_empty() {
            println!("PASS {name}");
            continue;
        }
        let msgs: Vec<String> = failures
            .iter()
            .map(|f| {
                if f.known {
                    format!("{} (known misprint)", f.msg)
                } else {
                    f.msg.clone()
                }
            })
            .collect();
        println!("FAIL {name}: {}", msgs.join("; "));
        unexpected += failures.iter().filter(|f| !f.known).count();
    }
    if unexpected > 0 {
        eprintln!("{unexpected} unexplained acceptance failure(s)");
        std::process::exit(1);
    }
}
