//! End-to-end acceptance checks. Each test prints one PASS/FAIL line; run
//! with `cargo test --test acceptance -- --nocapture` to see them all.

use std::collections::BTreeMap;
use std::time::Instant;

use daywatch::baselines::{
    expected_path_length, BaselineConfig, BaselineKind, BaselineStream, IsolationForest, PcaModel,
};
use daywatch::density::{anomaly, gaussian_nll, DistributionParams, ScoreLine, LN_2PI};
use daywatch::eval::{cr_k, rank_days, recall_at_budget, LabelSet, RankedEntry};
use daywatch::model::{
    gradcheck, Covariance, DayInput, Encoder, Model, ModelConfig, TargetMode,
};
use daywatch::synth::{generate, SynthConfig};
use daywatch::trainer::Trainer;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!("ACCEPTANCE {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn config(encoder: Encoder, covariance: Covariance, cats: bool) -> ModelConfig {
    ModelConfig {
        encoder,
        layers: 2,
        hidden_dim: 7,
        target_mode: TargetMode::SameTimeStep,
        covariance,
        include_categoricals: cats,
        embedding_ratio: 0.34,
        bptt_window: 3,
        batch_size: 8,
        learning_rate: 0.01,
        seed: 1,
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for encoder in [Encoder::Dnn, Encoder::Lstm] {
        for covariance in [Covariance::Identity, Covariance::Diagonal] {
            for cats in [false, true] {
                let cfg = config(encoder, covariance, cats);
                let cards: Vec<usize> = if cats { vec![3, 3] } else { vec![] };
                for seed in 0..20 {
                    let report = gradcheck(&cfg, 5, &cards, seed);
                    worst = worst.max(report.max_rel_err);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed.as_secs() < 60;
    verdict(
        1,
        pass,
        &format!(
            "8 variants x 20 seeds, max rel err {worst:.2e} (< 1e-4), {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_closed_form_nll() {
    // hand-derived single-dimension values
    let unit = DistributionParams { mu: vec![0.0], log_var: None, categorical_probs: None };
    let (a, _) = gaussian_nll(&[0.0], &unit).unwrap(); // 0.5 log 2pi
    let (b, _) = gaussian_nll(&[1.0], &unit).unwrap(); // 0.5 (1 + log 2pi)
    let wide = DistributionParams { mu: vec![0.0], log_var: Some(vec![4.0f64.ln()]), categorical_probs: None };
    let (c, _) = gaussian_nll(&[2.0], &wide).unwrap(); // 0.5 (1 + log 4 + log 2pi)
    let e1 = (a - 0.5 * LN_2PI).abs();
    let e2 = (b - 0.5 * (1.0 + LN_2PI)).abs();
    let e3 = (c - 0.5 * (1.0 + 4.0f64.ln() + LN_2PI)).abs();

    // identity covariance: NLL - 0.5||x - mu||^2 == (d/2) log 2pi
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(1..20);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dp = DistributionParams { mu: mu.clone(), log_var: None, categorical_probs: None };
        let (nll, _) = gaussian_nll(&x, &dp).unwrap();
        let sq: f64 = x.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
        worst = worst.max((nll - 0.5 * sq - 0.5 * d as f64 * LN_2PI).abs());
    }
    let pass = e1 < 1e-9 && e2 < 1e-9 && e3 < 1e-9 && worst < 1e-9;
    verdict(
        2,
        pass,
        &format!("examples {e1:.1e}/{e2:.1e}/{e3:.1e}, identity-covariance constancy {worst:.1e} (all < 1e-9)"),
    );
}

#[test]
fn criterion_3_factorization_and_attribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(1..10);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let log_var: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut probs = Vec::new();
        let mut ids = Vec::new();
        for _ in 0..rng.gen_range(0..4usize) {
            let card = rng.gen_range(2..6usize);
            let raw: Vec<f64> = (0..card).map(|_| rng.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            probs.push(raw.into_iter().map(|v| v / sum).collect::<Vec<f64>>());
            ids.push(rng.gen_range(0..card));
        }
        let dp = DistributionParams {
            mu,
            log_var: Some(log_var),
            categorical_probs: if probs.is_empty() { None } else { Some(probs) },
        };
        let r = anomaly("U", 0, &x, &ids, &dp, None, 5).unwrap();
        let recombined =
            r.components.count_nll + r.components.categorical_nlls.iter().sum::<f64>();
        worst = worst.max((r.raw_score - recombined).abs());
    }

    // single feature pushed to mu + 10 sigma must be the top contributor
    let mut hits = 0;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let d = 12;
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let log_var: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spiked = rng.gen_range(0..d);
        let mut x: Vec<f64> = (0..d)
            .map(|i| mu[i] + rng.gen_range(-0.5..0.5) * (log_var[i] / 2.0).exp())
            .collect();
        x[spiked] = mu[spiked] + 10.0 * (log_var[spiked] / 2.0).exp();
        let dp = DistributionParams { mu, log_var: Some(log_var), categorical_probs: None };
        let r = anomaly("U", 0, &x, &[], &dp, None, 3).unwrap();
        if r.top_contributors[0].index == spiked {
            hits += 1;
        }
    }
    let pass = worst < 1e-9 && hits == 100;
    verdict(3, pass, &format!("decomposition residual {worst:.1e} (< 1e-9), top-contributor {hits}/100"));
}

#[test]
fn criterion_4_lstm_algebra() {
    // zero parameters: advancing any input yields exactly zero states
    let cfg = ModelConfig { encoder: Encoder::Lstm, ..config(Encoder::Lstm, Covariance::Identity, false) };
    let mut model = Model::new(cfg.clone(), 4, vec![]);
    for v in &mut model.params.data {
        *v = 0.0;
    }
    let day = DayInput { counts: vec![1.5, -2.0, 0.3, 4.0], cat_ids: vec![] };
    let s = model.advance_state(&day, &model.zero_states()).unwrap();
    let zero_ok = s.h.iter().chain(&s.c).all(|layer| layer.iter().all(|&v| v == 0.0));

    // large forget bias, inhibited input gate: cell state carries 10 steps
    let mut carry = Model::new(cfg, 4, vec![]);
    for v in &mut carry.params.data {
        *v = 0.0;
    }
    for b in carry.params.blocks.clone() {
        let range = b.offset..b.offset + b.rows * b.cols;
        if b.name.ends_with(".bf") {
            carry.params.data[range].fill(10.0);
        } else if b.name.ends_with(".bi") {
            carry.params.data[range].fill(-10.0);
        }
    }
    let mut states = carry.zero_states();
    for layer in &mut states.c {
        for (i, v) in layer.iter_mut().enumerate() {
            *v = 0.5 + 0.1 * i as f64;
        }
    }
    let c0 = states.c.clone();
    for _ in 0..10 {
        states = carry.advance_state(&day, &states).unwrap();
    }
    let mut drift = 0.0f64;
    for (a, b) in states.c.iter().flatten().zip(c0.iter().flatten()) {
        drift = drift.max((a - b).abs());
    }
    let pass = zero_ok && drift < 1e-3;
    verdict(4, pass, &format!("zero-parameter states exact, 10-step carry drift {drift:.1e} (< 1e-3)"));
}

#[test]
fn criterion_5_eval_oracle_equivalence() {
    fn oracle(lines: &[ScoreLine], labels: &LabelSet, budget: usize) -> f64 {
        let mut days: BTreeMap<i64, Vec<(f64, f64, String)>> = BTreeMap::new();
        for l in lines {
            if let ScoreLine::Record(r) = l {
                days.entry(r.day_index).or_default().push((
                    r.standardized_score,
                    r.raw_score,
                    r.user_id.clone(),
                ));
            }
        }
        let mut hits = 0;
        for (day, mut v) in days {
            v.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(b.1.partial_cmp(&a.1).unwrap())
                    .then(a.2.cmp(&b.2))
            });
            for (_, _, user) in v.into_iter().take(budget) {
                if labels.contains(&user, day) {
                    hits += 1;
                }
            }
        }
        hits as f64 / labels.len() as f64
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let n_users = rng.gen_range(2..=20usize);
        let n_days = rng.gen_range(1..=30i64);
        let mut lines = Vec::new();
        for day in 0..n_days {
            for u in 0..n_users {
                if rng.gen_bool(0.8) {
                    lines.push(ScoreLine::Record(daywatch::density::AnomalyRecord {
                        user_id: format!("U{u:02}"),
                        day_index: day,
                        raw_score: rng.gen_range(-5.0..5.0),
                        standardized_score: rng.gen_range(-5.0..5.0),
                        components: daywatch::density::AnomalyComponents {
                            count_nll: 0.0,
                            categorical_nlls: vec![],
                        },
                        top_contributors: vec![],
                    }));
                }
            }
        }
        let mut labels = LabelSet::new();
        for _ in 0..rng.gen_range(1..=10usize) {
            labels.insert(&format!("U{:02}", rng.gen_range(0..n_users)), rng.gen_range(0..n_days));
        }
        let ranked = rank_days(&lines).unwrap();
        for budget in [1, 3, 7, 25] {
            let got = recall_at_budget(&ranked, &labels, budget).unwrap();
            max_diff = max_diff.max((got - oracle(&lines, &labels, budget)).abs());
        }
        let curve = cr_k(&ranked, &labels, 100).unwrap();
        let oracle_cr: f64 = (1..=4).map(|i| oracle(&lines, &labels, 25 * i)).sum();
        max_diff = max_diff.max((curve.cr - oracle_cr).abs());
    }

    // a perfect detector's cumulative recall at 1000 is exactly 40
    let mut lines = Vec::new();
    let mut labels = LabelSet::new();
    for day in 0..10 {
        lines.push(ScoreLine::Record(daywatch::density::AnomalyRecord {
            user_id: "bad".into(),
            day_index: day,
            raw_score: 9.0,
            standardized_score: 9.0,
            components: daywatch::density::AnomalyComponents { count_nll: 9.0, categorical_nlls: vec![] },
            top_contributors: vec![],
        }));
        lines.push(ScoreLine::Record(daywatch::density::AnomalyRecord {
            user_id: "ok".into(),
            day_index: day,
            raw_score: 0.0,
            standardized_score: 0.0,
            components: daywatch::density::AnomalyComponents { count_nll: 0.0, categorical_nlls: vec![] },
            top_contributors: vec![],
        }));
        labels.insert("bad", day);
    }
    let curve = cr_k(&rank_days(&lines).unwrap(), &labels, 1000).unwrap();
    let pass = max_diff == 0.0 && (curve.cr - 40.0).abs() < 1e-12;
    verdict(5, pass, &format!("oracle agreement exact on 100 instances, perfect-detector CR-1000 = {}", curve.cr));
}

fn percentile_of(entry: &RankedEntry, day: &[RankedEntry]) -> f64 {
    if day.len() <= 1 {
        return 100.0;
    }
    100.0 * (day.len() - entry.rank) as f64 / (day.len() - 1) as f64
}

struct SeedOutcome {
    mean_percentile: f64,
    recall_at_20: f64,
    model_cr500: f64,
    pca_cr500: f64,
}

fn run_synthetic_seed(seed: u64) -> SeedOutcome {
    let synth_cfg = SynthConfig { seed, ..SynthConfig::default() };
    let out = generate(&synth_cfg);

    let model_cfg = ModelConfig {
        encoder: Encoder::Dnn,
        layers: 2,
        hidden_dim: 64,
        target_mode: TargetMode::SameTimeStep,
        covariance: Covariance::Diagonal,
        include_categoricals: false,
        embedding_ratio: 0.25,
        bptt_window: 10,
        batch_size: 256,
        learning_rate: 0.01,
        seed,
    };
    let model = Model::new(model_cfg, out.schema.count_dim(), vec![]);
    let mut trainer = Trainer::new(model, Some(out.schema.clone()));
    let mut model_lines = Vec::new();
    for (day, vectors) in &out.days {
        model_lines.extend(trainer.process_day(*day, vectors).unwrap());
    }

    let mut pca = BaselineStream::new(BaselineConfig { kind: BaselineKind::Pca, seed, ..Default::default() });
    let mut pca_lines = Vec::new();
    for (day, vectors) in &out.days {
        pca_lines.extend(pca.process_day(*day, vectors).unwrap());
    }

    let ranked = rank_days(&model_lines).unwrap();
    let mut percentiles = Vec::new();
    for (user, day) in &out.labels.pairs {
        let entries = &ranked[day];
        let e = entries.iter().find(|e| &e.user_id == user).unwrap();
        percentiles.push(percentile_of(e, entries));
    }
    let mean_percentile = percentiles.iter().sum::<f64>() / percentiles.len() as f64;
    let recall_at_20 = recall_at_budget(&ranked, &out.labels, 20).unwrap();
    let model_cr500 = cr_k(&ranked, &out.labels, 500).unwrap().cr;
    let pca_ranked = rank_days(&pca_lines).unwrap();
    let pca_cr500 = cr_k(&pca_ranked, &out.labels, 500).unwrap().cr;

    SeedOutcome { mean_percentile, recall_at_20, model_cr500, pca_cr500 }
}

#[test]
fn criterion_6_synthetic_detection() {
    let start = Instant::now();
    let mut pct_ok = 0;
    let mut recall_ok = 0;
    let mut beat_pca = 0;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let o = run_synthetic_seed(seed);
        if o.mean_percentile >= 90.0 {
            pct_ok += 1;
        }
        if o.recall_at_20 == 1.0 {
            recall_ok += 1;
        }
        if o.model_cr500 > o.pca_cr500 {
            beat_pca += 1;
        }
        details.push(format!(
            "seed {seed}: pct {:.1}, recall@20 {:.2}, CR-500 {:.1} vs PCA {:.1}",
            o.mean_percentile, o.recall_at_20, o.model_cr500, o.pca_cr500
        ));
    }
    let elapsed = start.elapsed();
    for d in &details {
        println!("  {d}");
    }
    let pass = pct_ok >= 4 && recall_ok >= 4 && beat_pca >= 4 && elapsed.as_secs() < 600;
    verdict(
        6,
        pass,
        &format!(
            "percentile>=90 {pct_ok}/5, recall@20==1 {recall_ok}/5, CR-500 > PCA {beat_pca}/5 (need 4/5 each), {:.0}s (< 600s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_streaming_discipline() {
    let synth_cfg = SynthConfig { n_users: 30, n_days: 25, n_injections: 2, burn_in_days: 5, ..SynthConfig::default() };
    let out = generate(&synth_cfg);
    let model_cfg = ModelConfig {
        encoder: Encoder::Lstm,
        layers: 1,
        hidden_dim: 16,
        target_mode: TargetMode::SameTimeStep,
        covariance: Covariance::Diagonal,
        include_categoricals: false,
        embedding_ratio: 0.25,
        bptt_window: 5,
        batch_size: 8,
        learning_rate: 0.01,
        seed: 9,
    };
    let model = Model::new(model_cfg, out.schema.count_dim(), vec![]);
    let mut trainer = Trainer::new(model, Some(out.schema.clone()));
    trainer.trace = Some(Vec::new());
    let mut n_scored = 0u64;
    for (day, vectors) in &out.days {
        for line in trainer.process_day(*day, vectors).unwrap() {
            if matches!(line, ScoreLine::Record(_)) {
                n_scored += 1;
            }
        }
    }
    let single_pass = trainer.stats.forward_passes == trainer.stats.samples
        && trainer.stats.samples == (synth_cfg.n_users * synth_cfg.n_days) as u64;
    let bounded = trainer.stats.peak_store_size <= synth_cfg.n_users;

    // every emitted score must be reproducible from the exact weights it was
    // scored with (which had not yet trained on that sample)
    let trace = trainer.trace.take().unwrap();
    let mut frozen = trainer.model.clone();
    let mut prequential = trace.len() as u64 == n_scored && !trace.is_empty();
    for entry in &trace {
        frozen.params = entry.params.clone();
        let eval = frozen.evaluate(&entry.input.as_ref(), &entry.target).unwrap();
        if eval.loss.to_bits() != entry.record.raw_score.to_bits() {
            prequential = false;
            break;
        }
    }
    let pass = single_pass && bounded && prequential;
    verdict(
        7,
        pass,
        &format!(
            "forward passes == samples ({}), peak store {} <= {} users, {} scores frozen-weight exact",
            trainer.stats.samples, trainer.stats.peak_store_size, synth_cfg.n_users, trace.len()
        ),
    );
}

#[test]
fn criterion_8_baseline_sanity() {
    // PCA: points in a plane through the origin in 5 dims
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            vec![a, b, a + b, a - b, 2.0 * a]
        })
        .collect();
    let pca = PcaModel::fit(&rows, 2).unwrap();
    let (on, _) = pca.score(&{
        let (a, b) = (1.0, -0.5);
        vec![a, b, a + b, a - b, 2.0 * a]
    });
    let mut scored: Vec<(f64, usize)> = rows.iter().map(|r| pca.score(r).0).zip(0..).collect();
    let outlier = pca.score(&[0.0, 0.0, 5.0, -5.0, 0.0]).0;
    scored.push((outlier, rows.len()));
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let pca_ok = on < 1e-9 && scored[0].1 == rows.len();

    // isolation forest: a far outlier should get the top score
    let mut top_ranked = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let forest = IsolationForest::fit(&rows, 200, 256, &mut rng);
        let outlier_score = forest.score(&[9.0, -9.0, 9.0]);
        if rows.iter().all(|r| forest.score(r) < outlier_score) {
            top_ranked += 1;
        }
    }
    let c2 = expected_path_length(2);
    let pass = pca_ok && top_ranked >= 48 && c2 == 1.0;
    verdict(
        8,
        pass,
        &format!("PCA on-plane {on:.1e} (< 1e-9) and outlier top-ranked, forest outlier top {top_ranked}/50 (>= 48), c(2) = {c2}"),
    );
}

#[test]
fn criterion_9_real_dataset_gated() {
    // needs the full CERT r6.2 release on disk; point CERT_R62_DIR at it
    let dir = match std::env::var("CERT_R62_DIR") {
        Ok(d) if !d.is_empty() => std::path::PathBuf::from(d),
        _ => {
            println!("ACCEPTANCE 9: SKIPPED — CERT_R62_DIR not set; dataset-gated check not run");
            return;
        }
    };
    let mut total = 0u64;
    for name in ["logon.csv", "device.csv", "file.csv", "http.csv", "email.csv"] {
        let path = dir.join(name);
        let file = std::fs::File::open(&path).expect("dataset file");
        let reader = std::io::BufRead::lines(std::io::BufReader::new(file));
        total += reader.count() as u64 - 1; // header
    }
    println!("ACCEPTANCE 9: INFO — {total} raw events counted under {}", dir.display());
    // full-period event count for the release used in the reference results
    let pass = total == 135_117_169 || total == 111_457_667 || total == 23_659_502;
    verdict(9, pass, &format!("event count {total} matches a published split total"));
}

#[test]
fn acceptance_banner() {
    println!("acceptance suite: criteria 1-8 always run; criterion 9 needs CERT_R62_DIR");
}
