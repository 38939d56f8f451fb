//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use contrastive_embed::datasets::{
    build_rerank_task, build_retrieval_task, generate_synthetic_corpus, parse_rerank_task, read_nli_pairs,
    read_qa_pairs, rerank_task_to_string, retrieval_task_to_string, NliLabel, RerankBuildOptions, RerankBuildStats,
    RetrievalCorpus, SyntheticConfig, SyntheticCorpus,
};
use contrastive_embed::evaluator::{
    accuracy_at_k, average_precision, evaluate_rerank, rerank_trend_warnings, sweep_csv, sweep_temperature, top_k,
    AccuracyAtK, PooledEncoder, SweepData, SweepGrid, SweepSettings,
};
use contrastive_embed::objectives::{
    in_batch_loss, infonce_loss, loss, negative_probabilities, positive_probability, triplet_group_loss, weighted_loss,
};
use contrastive_embed::trainer::{prepare_from_triplets, train, MemberTexts, Regime, TrainConfig};
use contrastive_embed::{LossConfig, LossVariant, ModelParams, SimilarityScores, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
/// The default learning rate of 5e-5, scaled up 100x for a randomly
/// initialised lookup-table encoder.
const SCRATCH_LR: f64 = 5e-3;
const SCRATCH_NEGATIVES: usize = 3;

type Check = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "loss identity",
            limit: Some(Duration::from_secs(1)),
            run: loss_identity,
        },
        Criterion {
            id: 2,
            name: "gradient correctness",
            limit: Some(Duration::from_secs(10)),
            run: gradient_correctness,
        },
        Criterion {
            id: 3,
            name: "gradient damping crossover",
            limit: None,
            run: damping_crossover,
        },
        Criterion {
            id: 4,
            name: "metric oracles",
            limit: None,
            run: metric_oracles,
        },
        Criterion {
            id: 5,
            name: "softmax properties",
            limit: None,
            run: softmax_properties,
        },
        Criterion {
            id: 6,
            name: "end-to-end synthetic experiment",
            limit: Some(Duration::from_secs(300)),
            run: end_to_end,
        },
        Criterion {
            id: 7,
            name: "temperature sweep",
            limit: None,
            run: sweep_reproduction,
        },
        Criterion {
            id: 8,
            name: "benchmark builder conformance",
            limit: None,
            run: builder_conformance,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed >= limit => Err(format!("took {:.2?}, limit {:.0?}", elapsed, limit)),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            failed += 1;
        }
        println!("[{tag}] {}. {}: {detail} ({elapsed:.2?})", c.id, c.name);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

fn random_scores(rng: &mut ChaCha8Rng, bound: f64) -> SimilarityScores {
    let n = rng.gen_range(1..=64);
    let negs = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    SimilarityScores::new(rng.gen_range(-bound..=bound), negs).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random direction with norm drawn from [0.5, 2).
fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            let target = rng.gen_range(0.5..2.0);
            return v.into_iter().map(|x| x * target / n).collect();
        }
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn loss_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let cases = 1000;
    for _ in 0..cases {
        let scores = random_scores(&mut rng, 1.0);
        let tau = log_uniform(&mut rng, 0.01, 10.0);
        let base = infonce_loss(&scores, tau).map_err(|e| e.to_string())?;
        let weighted = weighted_loss(&scores, tau).map_err(|e| e.to_string())?;
        let gap = (weighted.loss - (1.0 - base.p_plus) * base.loss).abs();
        worst = worst.max(gap);
    }
    ensure(worst <= 1e-12, || format!("max gap {worst:e} > 1e-12"))?;
    Ok(format!("{cases} cases, max |Lw - (1-p)L| = {worst:.3e}"))
}

fn central_difference(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    const H: f64 = 1e-5;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + H;
            let up = f(&probe);
            probe[i] = orig - H;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn chunks(flat: &[f64], dim: usize) -> Vec<&[f64]> {
    flat.chunks(dim).collect()
}

fn gradient_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let per_kind = 200;
    let mut worst = [0.0f64; 2];
    for variant in LossVariant::ALL {
        for _ in 0..per_kind {
            let dim = rng.gen_range(2..=64);
            let cfg = LossConfig::new(log_uniform(&mut rng, 0.05, 10.0), variant).unwrap();

            let n = rng.gen_range(2..=5);
            let flat: Vec<f64> = (0..2 * n).flat_map(|_| random_vector(&mut rng, dim)).collect();
            let eval = |x: &[f64]| {
                let (q, d) = x.split_at(n * dim);
                in_batch_loss(&chunks(q, dim), &chunks(d, dim), &cfg).unwrap().loss
            };
            let (q, d) = flat.split_at(n * dim);
            let out = in_batch_loss(&chunks(q, dim), &chunks(d, dim), &cfg).map_err(|e| e.to_string())?;
            let analytic: Vec<f64> = out
                .query_grads
                .concat()
                .into_iter()
                .chain(out.doc_grads.concat())
                .collect();
            worst[0] = worst[0].max(relative_error(&analytic, &central_difference(&flat, eval)));

            let m = rng.gen_range(1..=5);
            let flat: Vec<f64> = (0..2 + m).flat_map(|_| random_vector(&mut rng, dim)).collect();
            let eval = |x: &[f64]| {
                let v = chunks(x, dim);
                triplet_group_loss(v[0], v[1], &v[2..], &cfg).unwrap().loss
            };
            let v = chunks(&flat, dim);
            let out = triplet_group_loss(v[0], v[1], &v[2..], &cfg).map_err(|e| e.to_string())?;
            let mut analytic = out.anchor_grad.clone();
            analytic.extend(&out.positive_grad);
            analytic.extend(out.negative_grads.concat());
            worst[1] = worst[1].max(relative_error(&analytic, &central_difference(&flat, eval)));
        }
    }
    let cases = per_kind * 2 * 2;
    ensure(worst.iter().all(|&w| w <= 1e-5), || {
        format!(
            "max relative error in-batch {:.3e}, triplet {:.3e} > 1e-5",
            worst[0], worst[1]
        )
    })?;
    Ok(format!(
        "{cases} cases, max relative error in-batch {:.3e}, triplet {:.3e}",
        worst[0], worst[1]
    ))
}

fn damping_crossover() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let threshold = (-1.0f64).exp();
    let (mut above, mut below) = (0, 0);
    for _ in 0..400 {
        let dim = rng.gen_range(4..=32);
        let anchor = random_vector(&mut rng, dim);
        let mix = rng.gen_range(-1.0..1.0);
        let noise = random_vector(&mut rng, dim);
        let positive: Vec<f64> = anchor.iter().zip(&noise).map(|(a, n)| mix * a + n).collect();
        let negatives: Vec<Vec<f64>> = (0..rng.gen_range(1..=8))
            .map(|_| random_vector(&mut rng, dim))
            .collect();
        let tau = log_uniform(&mut rng, 0.05, 2.0);

        let grad_norm = |variant| {
            let out =
                triplet_group_loss(&anchor, &positive, &negatives, &LossConfig::new(tau, variant).unwrap()).unwrap();
            let mut all = out.anchor_grad.clone();
            all.extend(&out.positive_grad);
            all.extend(out.negative_grads.concat());
            (norm(&all), out.p_plus)
        };
        let (base, p) = grad_norm(LossVariant::InfoNce);
        let (weighted, _) = grad_norm(LossVariant::Weighted);
        if base == 0.0 {
            continue;
        }
        let ratio = weighted / base;
        if p > threshold {
            above += 1;
            ensure(ratio < 1.0, || {
                format!("p+={p:.6} > 1/e but norm ratio {ratio:.6} >= 1")
            })?;
        } else if p < threshold {
            below += 1;
            ensure(ratio > 1.0, || {
                format!("p+={p:.6} < 1/e but norm ratio {ratio:.6} <= 1")
            })?;
        }
    }
    ensure(above + below >= 100 && above >= 20 && below >= 20, || {
        format!("poor coverage: {above} configurations above 1/e, {below} below")
    })?;
    Ok(format!(
        "{} configurations ({above} with p+ > 1/e, {below} below)",
        above + below
    ))
}

/// Mean of precision at each positive, counting hits over the prefix anew.
fn brute_force_ap(labels: &[bool]) -> Option<f64> {
    let positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if positions.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &i in &positions {
        let hits = labels[..=i].iter().filter(|&&b| b).count();
        sum += hits as f64 / (i + 1) as f64;
    }
    Some(sum / positions.len() as f64)
}

fn check_accuracy_monotone(accuracy: &[AccuracyAtK]) -> Result<(), String> {
    for w in accuracy.windows(2) {
        ensure(w[0].k < w[1].k && w[0].accuracy <= w[1].accuracy, || {
            format!(
                "accuracy@{} = {} > accuracy@{} = {}",
                w[0].k, w[0].accuracy, w[1].k, w[1].accuracy
            )
        })?;
    }
    Ok(())
}

fn metric_oracles() -> Check {
    let mut rankings = 0;
    for len in 1..=8usize {
        for mask in 0u32..(1 << len) {
            let labels: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
            match (average_precision(&labels), brute_force_ap(&labels)) {
                (Ok(got), Some(want)) => ensure(got == want, || format!("AP {labels:?}: {got} != {want}"))?,
                (Err(_), None) => {}
                (got, want) => return Err(format!("AP {labels:?}: {got:?} vs oracle {want:?}")),
            }
            rankings += 1;
        }
        for p in 1..=len {
            let nneg = len - p;
            let best: Vec<bool> = (0..len).map(|i| i < p).collect();
            ensure(average_precision(&best).ok() == Some(1.0), || {
                format!("AP of {best:?} is not 1")
            })?;
            let worst: Vec<bool> = (0..len).map(|i| i >= nneg).collect();
            let want = (1..=p).map(|j| j as f64 / (nneg + j) as f64).sum::<f64>() / p as f64;
            let got = average_precision(&worst).unwrap();
            ensure((got - want).abs() <= 1e-15, || {
                format!("AP of {worst:?}: {got} != {want}")
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    for _ in 0..100 {
        let n = rng.gen_range(1..=1000);
        let dim = rng.gen_range(2..=16);
        let mut corpus: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
        for id in 0..n {
            let v = if id > 0 && rng.gen_bool(0.1) {
                corpus[rng.gen_range(0..id)].1.clone()
            } else {
                random_vector(&mut rng, dim)
            };
            corpus.push((id, v));
        }
        let query = random_vector(&mut rng, dim);
        let k = rng.gen_range(1..=n + 5);
        let got = top_k(&query, &corpus, k).map_err(|e| e.to_string())?;
        let mut full: Vec<(usize, f64)> = corpus
            .iter()
            .map(|(id, v)| {
                (
                    *id,
                    contrastive_embed::objectives::cosine_similarity(&query, v).unwrap(),
                )
            })
            .collect();
        full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        full.truncate(k);
        let got_pairs: Vec<(usize, f64)> = got.entries.iter().map(|e| (e.id, e.score)).collect();
        ensure(got_pairs == full, || {
            format!("top_k mismatch on corpus of {n} with k={k}")
        })?;
        ensure(got.k_exceeds_corpus == (k > n), || {
            format!("k_exceeds_corpus wrong for k={k}, n={n}")
        })?;
    }

    let mut corpora = 0;
    for seed in 0..10 {
        let syn = generate_synthetic_corpus(&SyntheticConfig::new(4, 6, 3, seed)).map_err(|e| e.to_string())?;
        let corpus = build_retrieval_task(&syn.qa_pairs).map_err(|e| e.to_string())?;
        let texts: Vec<&str> = syn.triplets.iter().flat_map(|t| t.member_texts()).collect();
        let params = ModelParams::init(Vocabulary::build(&texts, 1).unwrap(), 16, seed).unwrap();
        let ks: Vec<usize> = (1..=corpus.documents.len()).collect();
        let report =
            accuracy_at_k(&PooledEncoder::new(&params, 224), &corpus, &ks, "init").map_err(|e| e.to_string())?;
        check_accuracy_monotone(&report.accuracy)?;
        corpora += 1;
    }
    Ok(format!(
        "AP on {rankings} rankings, top_k on 100 corpora, accuracy@k monotone on {corpora} corpora"
    ))
}

fn softmax_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let (mut worst_norm, mut worst_shift) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let bound = if rng.gen_bool(0.5) { 1.0 } else { 1e4 };
        let scores = random_scores(&mut rng, bound);
        let tau = log_uniform(&mut rng, 0.01, 100.0);
        let p = positive_probability(&scores, tau).map_err(|e| e.to_string())?;
        let total = p + negative_probabilities(&scores, tau).unwrap().iter().sum::<f64>();
        worst_norm = worst_norm.max((total - 1.0).abs());

        let scores = random_scores(&mut rng, 10.0);
        let tau = log_uniform(&mut rng, 0.01, 10.0);
        let c = rng.gen_range(-10.0..10.0);
        let shifted = SimilarityScores::new(
            scores.positive() + c,
            scores.negatives().iter().map(|s| s + c).collect(),
        )
        .unwrap();
        for variant in LossVariant::ALL {
            let cfg = LossConfig::new(tau, variant).unwrap();
            let a = loss(&scores, &cfg).unwrap().loss;
            let b = loss(&shifted, &cfg).unwrap().loss;
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    ensure(worst_norm <= 1e-9, || {
        format!("normalization error {worst_norm:e} > 1e-9")
    })?;
    ensure(worst_shift <= 1e-9, || format!("shift error {worst_shift:e} > 1e-9"))?;

    let mut extremes = vec![
        SimilarityScores::new(1e4, vec![1e4; 8]).unwrap(),
        SimilarityScores::new(-1e4, vec![1e4; 8]).unwrap(),
        SimilarityScores::new(1e4, vec![-1e4; 8]).unwrap(),
        SimilarityScores::new(-1e4, vec![-1e4, 1e4]).unwrap(),
    ];
    for _ in 0..1000 {
        extremes.push(random_scores(&mut rng, 1e4));
    }
    let mut checked = 0;
    for scores in &extremes {
        for tau in [0.01, 0.1, 1.0, log_uniform(&mut rng, 0.01, 100.0)] {
            for variant in LossVariant::ALL {
                let out = loss(scores, &LossConfig::new(tau, variant).unwrap()).map_err(|e| e.to_string())?;
                let finite = out.loss.is_finite()
                    && out.p_plus.is_finite()
                    && out.grad_positive.is_finite()
                    && out.grad_negatives.iter().all(|g| g.is_finite());
                ensure(finite, || {
                    format!("non-finite output for {scores:?} at tau {tau} ({variant})")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "normalization error {worst_norm:.1e}, shift error {worst_shift:.1e}, {checked} extreme evaluations finite"
    ))
}

struct Experiment {
    syn: SyntheticCorpus,
    retrieval: RetrievalCorpus,
    rerank: Vec<contrastive_embed::datasets::RerankInstance>,
}

fn experiment() -> Experiment {
    let syn = generate_synthetic_corpus(&SyntheticConfig::new(16, 8, 4, SEED)).unwrap();
    let retrieval = build_retrieval_task(&syn.qa_pairs).unwrap();
    let rerank = build_rerank_task(&syn.nli_pairs, RerankBuildOptions::default()).instances;
    Experiment { syn, retrieval, rerank }
}

fn scratch_config() -> TrainConfig {
    TrainConfig {
        learning_rate: SCRATCH_LR,
        negatives_per_group: SCRATCH_NEGATIVES,
        seed: SEED,
        temperature: 0.1,
        ..TrainConfig::default()
    }
}

fn end_to_end() -> Check {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let exp = experiment();
        let texts: Vec<&str> = exp.syn.triplets.iter().flat_map(|t| t.member_texts()).collect();
        let vocab = Vocabulary::build(&texts, 1).map_err(|e| e.to_string())?;
        let init = ModelParams::init(vocab, 64, SEED).map_err(|e| e.to_string())?;
        let untrained = accuracy_at_k(&PooledEncoder::new(&init, 224), &exp.retrieval, &[5], "init")
            .map_err(|e| e.to_string())?
            .accuracy[0]
            .accuracy;
        ensure(untrained <= 0.3, || {
            format!("untrained accuracy@5 {untrained:.3} > 0.3")
        })?;

        let mut summary = vec![format!("untrained acc@5 {untrained:.3}")];
        for regime in Regime::ALL {
            for variant in LossVariant::ALL {
                let cfg = TrainConfig {
                    regime,
                    variant,
                    ..scratch_config()
                };
                let label = format!("{}/{}", regime.short(), variant);
                let (data, _) = prepare_from_triplets(&exp.syn.triplets, &cfg).map_err(|e| e.to_string())?;
                let out = train(init.clone(), &data, &cfg).map_err(|e| e.to_string())?;
                let hist = &out.loss_history;
                ensure(hist.len() == 3 && hist.windows(2).all(|w| w[1] < w[0]), || {
                    format!("{label}: loss history {hist:?} not strictly decreasing")
                })?;
                let report = accuracy_at_k(
                    &PooledEncoder::new(&out.params, 224),
                    &exp.retrieval,
                    &[1, 5, 10],
                    &label,
                )
                .map_err(|e| e.to_string())?;
                check_accuracy_monotone(&report.accuracy)?;
                let acc = report.accuracy_at(5).unwrap();
                ensure(acc >= 0.8, || format!("{label}: accuracy@5 {acc:.3} < 0.8"))?;
                summary.push(format!(
                    "{label} acc@5 {acc:.3} loss {:.3}->{:.3}",
                    hist[0],
                    hist[hist.len() - 1]
                ));
            }
        }
        Ok(summary.join(", "))
    })
}

fn sweep_reproduction() -> Check {
    let exp = experiment();
    let settings = SweepSettings {
        base: scratch_config(),
        ..SweepSettings::default()
    };
    let grid = SweepGrid::default();
    let data = SweepData {
        triplets: &exp.syn.triplets,
        retrieval: &exp.retrieval,
        rerank: &exp.rerank,
    };
    let run = |threads: usize| -> Result<(String, String, contrastive_embed::evaluator::SweepReport), String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let report = pool
            .install(|| sweep_temperature(&settings, &grid, &data))
            .map_err(|e| e.to_string())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
        Ok((json, sweep_csv(&report), report))
    };
    let (json_a, csv_a, report) = run(1)?;
    let (json_b, csv_b, _) = run(3)?;
    ensure(report.entries.len() == 12, || {
        format!("{} entries, expected 12", report.entries.len())
    })?;
    ensure(json_a == json_b && csv_a == csv_b, || {
        "reports differ between runs".into()
    })?;
    for entry in &report.entries {
        check_accuracy_monotone(&entry.accuracy)?;
    }
    let warnings = rerank_trend_warnings(&report);
    for w in &warnings {
        println!("    warning: {w}");
    }
    let untrained = {
        let texts: Vec<&str> = exp.syn.triplets.iter().flat_map(|t| t.member_texts()).collect();
        let init = ModelParams::init(Vocabulary::build(&texts, 1).unwrap(), 64, SEED).unwrap();
        evaluate_rerank(&PooledEncoder::new(&init, 224), &exp.rerank, "init")
            .map_err(|e| e.to_string())?
            .mean_average_precision
    };
    Ok(format!(
        "12 entries, byte-identical across runs ({} bytes JSON), untrained mAP {untrained:.3}, \
         {} rerank-trend warning(s)",
        json_a.len(),
        warnings.len()
    ))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn builder_conformance() -> Check {
    let pairs = read_nli_pairs(fixture("nli_20.jsonl")).map_err(|e| e.to_string())?;
    ensure(pairs.len() == 20, || format!("fixture has {} pairs", pairs.len()))?;
    let task = build_rerank_task(&pairs, RerankBuildOptions::default());
    let expected_text = fs::read_to_string(fixture("nli_20.expected.jsonl")).map_err(|e| e.to_string())?;
    let expected = parse_rerank_task(&expected_text).map_err(|e| e.to_string())?;
    ensure(task.instances == expected, || {
        format!("rerank instances differ: {:?}", task.instances)
    })?;
    ensure(rerank_task_to_string(&task.instances).unwrap() == expected_text, || {
        "serialized rerank task differs from fixture".into()
    })?;
    let stats = RerankBuildStats {
        distinct_premises: 9,
        below_min_duplicates: 3,
        dropped_no_positive: 1,
        dropped_no_negative: 1,
        dropped_min_refs: 0,
        conflicting_references: 1,
    };
    ensure(task.stats == stats, || format!("stats {:?}", task.stats))?;
    for inst in &task.instances {
        let rows: Vec<_> = pairs.iter().filter(|p| p.premise == inst.query).collect();
        ensure(rows.len() >= 2, || format!("{:?} is not duplicated", inst.query))?;
        for pos in &inst.positives {
            ensure(
                rows.iter()
                    .filter(|p| &p.hypothesis == pos)
                    .all(|p| p.label == NliLabel::Entailment),
                || format!("{pos:?} is not entailment-only"),
            )?;
        }
        ensure(!inst.negatives.is_empty(), || {
            format!("{:?} has no negative", inst.query)
        })?;
    }

    let qa = read_qa_pairs(fixture("qa_8.jsonl")).map_err(|e| e.to_string())?;
    let corpus = build_retrieval_task(&qa).map_err(|e| e.to_string())?;
    let expected_text = fs::read_to_string(fixture("qa_8.expected.jsonl")).map_err(|e| e.to_string())?;
    ensure(retrieval_task_to_string(&corpus).unwrap() == expected_text, || {
        "serialized retrieval corpus differs from fixture".into()
    })?;
    ensure(corpus.queries.len() == qa.len(), || "query count changed".into())?;
    let distinct: std::collections::HashSet<&str> = qa.iter().map(|p| p.document.as_str()).collect();
    ensure(corpus.documents.len() == distinct.len(), || {
        "documents not deduplicated".into()
    })?;
    Ok(format!(
        "{} rerank instances from 20 pairs, {} queries over {} documents",
        task.instances.len(),
        corpus.queries.len(),
        corpus.documents.len()
    ))
}
