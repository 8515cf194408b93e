//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The planted cohort (20,000 patients, 3 binary concepts, 4 strata) is
//! trained once with each model kind under the same budget and shared by
//! criteria 4 to 7 and 9.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use common::composed::check_composed;
use common::ops::op_cases;
use common::oracles::{brute_auprc, brute_auroc};
use common::tiny::{tiny_cohort, tiny_model};
use pcb_cli::service::{router, ServiceState};
use pcb_core::autograd::{check_gradients, ParamStore, Tape, Tensor};
use pcb_core::bottleneck::{gumbel_softmax, Bottleneck, BottleneckConfig, QuantMode, QuantizerState};
use pcb_core::concept::{combination_count, combination_from_index, ConceptSpec, ConceptVector, Exposure};
use pcb_core::counterfactual::{
    analyze, estimate_risk, risk_ratio, upset, verdict_for, Analysis, AnalysisConfig, ClusterId, Member, Verdict,
};
use pcb_core::encoder::EncoderConfig;
use pcb_core::model::{Model, ModelConfig, ModelKind};
use pcb_core::rng::stream_rng;
use pcb_core::synth::{generate_cohort, split_dataset, Dataset, EncodeConfig, GeneratorConfig, Split, TaskTemplate};
use pcb_core::trainer::checkpoint::{decode_checkpoint, encode_checkpoint};
use pcb_core::trainer::{auprc, auroc, evaluate, examples, lr_at, predict_all, train, Metrics, Schedule, TrainConfig};
use rand::seq::index::sample;
use rand::Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, || format!("{what} took {t:.1?}, limit {limit:?}"))
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut ops = 0;
    for seed in 0..3 {
        for case in op_cases(seed) {
            let r = check_gradients(&case.params, H, &case.build).map_err(|e| e.to_string())?;
            ensure(r.max_rel_err < TOL, || format!("{} seed {seed}: rel err {:.3e}", case.name, r.max_rel_err))?;
            worst = worst.max(r.max_rel_err);
            ops += 1;
        }
    }
    let mut entries = 0;
    for seed in 0..2 {
        let r = check_composed(seed, H);
        ensure(r.max_rel_err < TOL, || format!("composed graph seed {seed}: rel err {:.3e}", r.max_rel_err))?;
        worst = worst.max(r.max_rel_err);
        entries += r.checked;
    }
    within(start, Duration::from_secs(60), "gradient checks")?;
    Ok(format!(
        "{ops} op cases and {entries} composed-graph entries, max rel err {worst:.2e}, {:.1?}",
        start.elapsed()
    ))
}

fn quantizer() -> Outcome {
    let start = Instant::now();
    let params = ParamStore::new();
    let mut rng = stream_rng(11, 0);
    for _ in 0..1000 {
        let rows = rng.random_range(1..8);
        let mut t = Tape::new(&params);
        let data = (0..2 * rows).map(|_| rng.random_range(-5.0..5.0)).collect();
        let logits = t.constant(Tensor::matrix(rows, 2, data).unwrap());
        let tau = rng.random_range(0.05..5.0);
        let y = gumbel_softmax(&mut t, logits, tau, true, &mut rng).map_err(|e| e.to_string())?;
        for r in 0..rows {
            let row = t.value(y).row(r);
            ensure(row == [1.0, 0.0] || row == [0.0, 1.0], || format!("hard sample {row:?} is not one-hot"))?;
        }
    }

    let specs = TaskTemplate::AfHf.concept_specs();
    let hidden = 8;
    for n in 1..=5 {
        let config = BottleneckConfig {
            latent_groups: n,
            ..BottleneckConfig::default()
        };
        let mut params = ParamStore::new();
        let b = Bottleneck::register(hidden, &specs, &config, &mut params, &mut stream_rng(12, n as u64))
            .map_err(|e| e.to_string())?;
        let state = QuantizerState::new(&config);
        let mut codes = std::collections::HashSet::new();
        for _ in 0..400 {
            let x = Tensor::row_vector((0..hidden).map(|_| rng.random_range(-3.0..3.0)).collect());
            let run = |noise: u64| {
                let mut t = Tape::new(&params);
                let r = t.constant(x.clone());
                let q = b.quantize_h(&mut t, r, &state, QuantMode::Eval, &mut stream_rng(noise, 0)).unwrap();
                (q.bits, t.value(q.one_hot).clone())
            };
            let first = run(1);
            ensure(run(2) == first, || format!("eval-mode code changed with the noise stream (n = {n})"))?;
            codes.insert(first.0);
        }
        ensure(codes.len() <= 1 << n, || format!("{} codes occupied with n = {n}", codes.len()))?;
    }

    let mut s = QuantizerState::new(&BottleneckConfig::default());
    let mut reference = 2.0f64;
    for k in 1..=6000 {
        s.step();
        reference = 0.5f64.max(reference * 0.999);
        ensure(s.tau == reference, || format!("step {k}: tau {} vs recurrence {reference}", s.tau))?;
        let power = 0.5f64.max(2.0 * 0.999f64.powi(k));
        ensure((s.tau - power).abs() <= 1e-12 * power, || format!("step {k}: tau {} vs power {power}", s.tau))?;
        if k == 693 {
            ensure((s.tau - 1.0).abs() < 1e-3, || format!("tau after 693 steps is {}", s.tau))?;
        }
    }
    ensure(s.tau == 0.5, || format!("floor not reached: {}", s.tau))?;
    within(start, Duration::from_secs(30), "quantizer properties")?;
    Ok(format!("one-hot, eval determinism, code bound for n = 1..5, tau schedule; {:.1?}", start.elapsed()))
}

fn metric_oracles() -> Outcome {
    let mut rng = stream_rng(13, 0);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=100);
        let grid = [4u32, 20, 1_000_000][rng.random_range(0..3)];
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..grid) as f64 / grid as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let (a, b) = (auroc(&scores, &labels).unwrap(), brute_auroc(&scores, &labels));
        ensure(a == b, || format!("instance {done}: auroc {a} vs oracle {b}"))?;
        let (a, b) = (auprc(&scores, &labels).unwrap(), brute_auprc(&scores, &labels));
        ensure(a == b, || format!("instance {done}: auprc {a} vs oracle {b}"))?;
        done += 1;
    }
    Ok("1000 instances with ties, both metrics bit-equal to the oracles".into())
}

struct Trained {
    model: Model,
    metrics: Metrics,
    best_epoch: usize,
    elapsed: Duration,
}

struct Planted {
    generator: GeneratorConfig,
    dataset: Dataset,
    pcb: Trained,
    black_box: Trained,
    analysis: Analysis,
    elapsed: Duration,
}

const PLANTED_PATIENTS: usize = 20_000;
const SEED: u64 = 1;

fn planted_model_config(dataset: &Dataset, kind: ModelKind) -> ModelConfig {
    let encoder = EncoderConfig {
        hidden: 16,
        heads: 2,
        intermediate: 32,
        max_len: 48,
        window: 16,
        stride: 8,
        ..EncoderConfig::desk(dataset.vocab.len())
    };
    ModelConfig {
        kind,
        encoder,
        bottleneck: BottleneckConfig {
            lambda_c: 0.1,
            ..BottleneckConfig::default()
        },
        concepts: dataset.concept_specs(),
    }
}

fn planted() -> &'static Planted {
    static P: OnceLock<Planted> = OnceLock::new();
    P.get_or_init(|| {
        let start = Instant::now();
        let generator = GeneratorConfig::af_hf(PLANTED_PATIENTS, SEED);
        let dataset = generate_cohort(&generator).unwrap();
        let split: Split = split_dataset(dataset.len(), [0.6, 0.1, 0.3], SEED).unwrap();
        let ec = EncodeConfig {
            max_len: 48,
            ..EncodeConfig::default()
        };
        let tr = examples(&dataset, Some(&split.train), &ec).unwrap();
        let tu = examples(&dataset, Some(&split.tune), &ec).unwrap();
        let va = examples(&dataset, Some(&split.valid), &ec).unwrap();
        let budget = TrainConfig {
            epochs: 30,
            batch_size: 32,
            schedule: Schedule {
                base_lr: 1e-3,
                ..Schedule::default()
            },
            patience: 10,
            seed: SEED,
        };
        let fit = |kind: ModelKind| {
            let t = Instant::now();
            let mut model = Model::new(planted_model_config(&dataset, kind), SEED).unwrap();
            let report = train(&mut model, &tr, &tu, &budget, |_| {}).unwrap();
            let metrics = evaluate(&model, &va).unwrap();
            eprintln!("  {kind}: best epoch {}, validation AUROC {:.4}, {:.0?}", report.best_epoch, metrics.auroc, t.elapsed());
            Trained {
                model,
                metrics,
                best_epoch: report.best_epoch,
                elapsed: t.elapsed(),
            }
        };
        let pcb = fit(ModelKind::Pcb);
        let black_box = fit(ModelKind::BlackBox);
        let everyone = examples(&dataset, None, &ec).unwrap();
        let ages: Vec<f64> = everyone
            .iter()
            .map(|e| dataset.patients[dataset.position_of(e.id).unwrap()].baseline_age)
            .collect();
        let analysis = analyze(&pcb.model, &everyone, Some(&ages), &AnalysisConfig::default()).unwrap();
        Planted {
            generator,
            dataset,
            pcb,
            black_box,
            analysis,
            elapsed: start.elapsed(),
        }
    })
}

fn accuracy_gap() -> Outcome {
    let p = planted();
    let (a, b) = (p.pcb.metrics.auroc, p.black_box.metrics.auroc);
    let detail = format!(
        "PCB AUROC {a:.4} (best epoch {}, {:.0?}), black box {b:.4} (best epoch {}, {:.0?}), total {:.0?}",
        p.pcb.best_epoch, p.pcb.elapsed, p.black_box.best_epoch, p.black_box.elapsed, p.elapsed
    );
    ensure(b >= 0.85, || format!("black box AUROC below 0.85: {detail}"))?;
    ensure(a >= b - 0.03, || format!("PCB trails by more than 0.03: {detail}"))?;
    ensure(p.elapsed <= Duration::from_secs(30 * 60), || format!("planted run too slow: {detail}"))?;
    Ok(detail)
}

fn concept_fidelity() -> Outcome {
    let scores = &planted().pcb.metrics.concept_f1;
    let detail: Vec<String> = scores.iter().map(|s| format!("{} {:.4}", s.concept, s.f1)).collect();
    ensure(!scores.is_empty(), || "no concept scores".into())?;
    ensure(scores.iter().all(|s| s.f1 >= 0.9), || format!("F1 below 0.9: {}", detail.join(", ")))?;
    Ok(format!("F1 {}", detail.join(", ")))
}

/// Latent stratum most common among each cluster's members.
fn dominant_strata(p: &Planted) -> BTreeMap<ClusterId, usize> {
    let strata = p.generator.strata.len();
    let mut counts: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
    for a in &p.analysis.patients {
        let s = p.dataset.patients[p.dataset.position_of(a.id).unwrap()].stratum;
        counts.entry(a.cluster).or_insert_with(|| vec![0; strata])[s] += 1;
    }
    counts
        .into_iter()
        .map(|(c, v)| (c, (0..strata).max_by_key(|&s| (v[s], std::cmp::Reverse(s))).unwrap()))
        .collect()
}

fn sampled_patients(n: usize) -> Vec<usize> {
    let mut v = sample(&mut stream_rng(SEED, 77), n, n.min(1000)).into_vec();
    v.sort_unstable();
    v
}

fn counterfactual_recovery() -> Outcome {
    let p = planted();
    let a = &p.analysis;
    let m = &p.pcb.model;
    let specs = m.concept_specs().to_vec();
    let exposure = Exposure::binary(0);
    let dominant = dominant_strata(p);
    let mut covered = 0;
    let mut lines = Vec::new();
    for c in &a.clusters {
        let table = a.upset(c.cluster).unwrap();
        let mut rows = 0;
        let mut worst = 0.0f64;
        for k in 0..combination_count(&specs) {
            let base = combination_from_index(&specs, k);
            if base.0[0] != 0 {
                continue;
            }
            let exposed = exposure.apply(&base, true);
            let plausible = |v: &ConceptVector| verdict_for(table.prevalence(v), &a.config.plausibility) == Verdict::Plausible;
            if !plausible(&base) || !plausible(&exposed) {
                continue;
            }
            let est = risk_ratio(m, c.cluster, &exposure, &base).map_err(|e| e.to_string())?.rr;
            let oracle = p.generator.oracle_risk_ratio(dominant[&c.cluster], &exposure, &base).map_err(|e| e.to_string())?;
            worst = worst.max((est / oracle - 1.0).abs());
            rows += 1;
        }
        let ok = rows > 0 && worst <= 0.2;
        if ok {
            covered += c.size;
        }
        lines.push(format!("{} n={} rows={rows} worst={:.0}%{}", c.cluster, c.size, 100.0 * worst, if ok { "" } else { " x" }));
    }
    let coverage = covered as f64 / a.patients.len() as f64;

    let mut identical = 0;
    let picks = sampled_patients(a.patients.len());
    for &i in &picks {
        let pa = &a.patients[i];
        if estimate_risk(m, pa.cluster, &pa.concepts).map_err(|e| e.to_string())?.to_bits() == pa.factual_risk.to_bits() {
            identical += 1;
        }
    }
    let detail = format!(
        "coverage {:.3} within 20% of the oracle; identity {identical}/{}; clusters: {}",
        coverage,
        picks.len(),
        lines.join("; ")
    );
    ensure(coverage >= 0.8, || detail.clone())?;
    ensure(identical == picks.len() && picks.len() == 1000, || detail.clone())?;
    Ok(detail)
}

fn sanity_check() -> Outcome {
    let s = &planted().analysis.sanity;
    let detail = format!("Spearman {:?} over {} comparable rows", s.spearman, s.comparable);
    match s.spearman {
        Some(r) if r >= 0.8 => Ok(detail),
        _ => Err(detail),
    }
}

fn structural() -> Outcome {
    let mut rng = stream_rng(14, 0);
    for i in 0..1000 {
        let arities: Vec<usize> = (0..rng.random_range(1..=4))
            .map(|_| if rng.random_bool(0.5) { 2 } else { rng.random_range(3..=5) })
            .collect();
        let specs: Vec<ConceptSpec> = arities
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                if k == 2 {
                    ConceptSpec::binary(format!("c{j}"))
                } else {
                    let labels: Vec<String> = (0..k).map(|l| l.to_string()).collect();
                    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                    ConceptSpec::categorical(format!("c{j}"), &refs, 2)
                }
            })
            .collect();
        let rows: Vec<ConceptVector> = (0..rng.random_range(0..300))
            .map(|_| ConceptVector(arities.iter().map(|&k| rng.random_range(0..k)).collect()))
            .collect();
        let members: Vec<Member> = rows
            .iter()
            .map(|c| Member {
                concepts: c,
                risk: 0.5,
                label: 0,
                baseline_age: None,
            })
            .collect();
        let t = upset(ClusterId::from_index(0, 1).unwrap(), &members, &specs).map_err(|e| e.to_string())?;
        let sum: usize = t.cells.iter().map(|c| c.count).sum();
        ensure(sum == rows.len() && t.size == rows.len(), || format!("cohort {i}: cells sum to {sum}, size {}", rows.len()))?;
    }

    for n in (0..2000).step_by(7).chain([10_000, 20_000]) {
        let s = split_dataset(n, [0.6, 0.1, 0.3], rng.random()).map_err(|e| e.to_string())?;
        let mut all: Vec<usize> = s.train.iter().chain(&s.tune).chain(&s.valid).copied().collect();
        all.sort_unstable();
        ensure(all == (0..n).collect::<Vec<_>>(), || format!("split of {n} is not a partition"))?;
        let off = |len: usize, share: f64| (len as f64 - n as f64 * share).abs();
        ensure(off(s.train.len(), 0.6) <= 1.0 && off(s.tune.len(), 0.1) <= 1.0 && off(s.valid.len(), 0.3) <= 1.0 + 1e-9, || {
            format!("split of {n}: {} / {} / {}", s.train.len(), s.tune.len(), s.valid.len())
        })?;
    }

    let (ds, ex) = tiny_cohort(120, 3);
    let mut model = tiny_model(&ds, ModelKind::Pcb, 5);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        schedule: Schedule {
            base_lr: 1e-3,
            ..Schedule::default()
        },
        patience: 5,
        seed: 1,
    };
    train(&mut model, &ex[..80], &ex[80..], &cfg, |_| {}).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&model, &ds.vocab).map_err(|e| e.to_string())?;
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let same_params = model
        .params
        .iter()
        .zip(back.model.params.iter())
        .all(|((_, na, a), (_, nb, b))| na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(same_params, || "checkpoint parameters differ after the round trip".into())?;
    ensure(back.model.quantizer == model.quantizer && back.vocab == ds.vocab, || "checkpoint state differs".into())?;
    ensure(predict_all(&model, &ex).unwrap() == predict_all(&back.model, &ex).unwrap(), || {
        "predictions differ after the round trip".into()
    })?;
    ensure(encode_checkpoint(&back.model, &back.vocab).unwrap() == bytes, || "re-encoded checkpoint differs".into())?;

    let s = Schedule::default();
    for total in [20, 40, 100, 1000, 4000, 123_460] {
        let at = |step| lr_at(step, total, &s).unwrap();
        ensure(
            at(total / 10) == s.base_lr && at(total / 2) == s.base_lr && at(3 * total / 4) == s.base_lr / 2.0 && at(total) == 0.0,
            || format!("lr boundaries wrong for {total} steps"),
        )?;
    }
    Ok("UpSet sums on 1000 cohorts, split partitions, checkpoint round trip, lr boundaries".into())
}

fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/schemas")
}

fn schema_errors(name: &str, value: &Value) -> Vec<String> {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    v.iter_errors(value).map(|e| format!("{name}: {e} at {}", e.instance_path)).collect()
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn service_contract() -> Outcome {
    let mut errors = Vec::new();
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/tests/fixtures");
    let mut fixture_count = 0;
    for entry in std::fs::read_dir(&fixtures).map_err(|e| format!("{}: {e}", fixtures.display()))? {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).map_err(|e| e.to_string())?;
        errors.extend(schema_errors(&name, &v));
        fixture_count += 1;
    }
    ensure(fixture_count == 8, || format!("expected 8 fixtures, found {fixture_count}"))?;

    let p = planted();
    let state = Arc::new(ServiceState::new(TaskTemplate::AfHf, p.pcb.model.clone(), p.analysis.clone()));
    let app = router(state);
    let rt = tokio::runtime::Builder::new_current_thread().build().map_err(|e| e.to_string())?;
    let (identical, checked, endpoints) = rt.block_on(async {
        let mut endpoints = 0;
        let mut check = |name: &str, status: StatusCode, expected: StatusCode, v: &Value| {
            if status != expected {
                errors.push(format!("{name}: status {status}, expected {expected}"));
            }
            errors.extend(schema_errors(name, v));
            endpoints += 1;
        };
        let (s, v) = call(&app, "GET", "/api/meta", None).await;
        check("meta", s, StatusCode::OK, &v);
        let (s, clusters) = call(&app, "GET", "/api/clusters", None).await;
        check("clusters", s, StatusCode::OK, &clusters);
        for c in clusters["clusters"].as_array().cloned().unwrap_or_default() {
            let (s, v) = call(&app, "GET", &format!("/api/clusters/{}/upset", c["id"]), None).await;
            check("upset", s, StatusCode::OK, &v);
            let req = json!({"cluster": c["id"], "assignment": [1, 0, 0]});
            check("counterfactual-request", StatusCode::OK, StatusCode::OK, &req);
            let (s, v) = call(&app, "POST", "/api/counterfactual", Some(req)).await;
            check("counterfactual", s, StatusCode::OK, &v);
        }
        let (s, v) = call(&app, "GET", "/api/sanity", None).await;
        check("sanity", s, StatusCode::OK, &v);
        let (s, v) = call(&app, "GET", "/api/clusters/4096/upset", None).await;
        check("error", s, StatusCode::NOT_FOUND, &v);
        let (s, v) = call(&app, "POST", "/api/counterfactual", Some(json!({"cluster": 0}))).await;
        check("error", s, StatusCode::BAD_REQUEST, &v);

        let picks = sampled_patients(p.analysis.patients.len());
        let mut identical = 0;
        for &i in &picks {
            let id = p.analysis.patients[i].id;
            let (s, pr) = call(&app, "GET", &format!("/api/patients/{id}/risk"), None).await;
            check("patient-risk", s, StatusCode::OK, &pr);
            let body = json!({"cluster": pr["cluster_id"], "assignment": pr["concepts"], "reference": pr["concepts"]});
            let (s, cf) = call(&app, "POST", "/api/counterfactual", Some(body)).await;
            check("counterfactual", s, StatusCode::OK, &cf);
            let wire = cf["estimated_risk"].as_f64();
            let factual = p.analysis.patients[i].factual_risk;
            if wire.map(f64::to_bits) == Some(factual.to_bits()) && pr["factual_risk"].as_f64() == Some(factual) {
                identical += 1;
            }
        }
        (identical, picks.len(), endpoints)
    });
    errors.dedup();
    ensure(errors.is_empty(), || format!("{} schema or status violations, first: {}", errors.len(), errors[0]))?;
    ensure(identical == checked && checked == 1000, || format!("identity over HTTP held for {identical}/{checked}"))?;
    Ok(format!(
        "{fixture_count} fixtures and {endpoints} live responses valid; identity over HTTP {identical}/{checked}"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("quantizer properties", quantizer),
        ("metric oracles", metric_oracles),
        ("accuracy gap", accuracy_gap),
        ("concept fidelity", concept_fidelity),
        ("counterfactual recovery", counterfactual_recovery),
        ("sanity check", sanity_check),
        ("structural invariants", structural),
        ("service contract", service_contract),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
