//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary (`harness = false`) so the criteria run
//! sequentially and the peak-memory reading belongs to the throughput run.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simcore::embedding::{find_duplicates, save_embeddings, Format};
use simcore::sampler::{random_select, StopReason};
use simcore::scoring::CandidateIndex;
use simcore::synth::{
    brute_force_round_oracle, generate_world, precision_recall, sweep, EvalMetrics, SweepParam,
    SyntheticWorld, WorldSpec,
};
use simcore::{
    facility_value, l2_normalize, load_embeddings, simcore_select, CentroidSet, EmbeddingMatrix,
    SamplerConfig, SelectionReport,
};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
    loop {
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if let Ok(m) = l2_normalize(&EmbeddingMatrix::new(n, d, data).unwrap()) {
            return m;
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// 1. nearest-per-centroid matches exhaustive enumeration on small instances.
fn round_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for case in 0..200 {
        let dim = rng.random_range(2..=4);
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=15);
        let cents = CentroidSet::from_matrix(random_unit(&mut rng, k, dim)).unwrap();
        let open = random_unit(&mut rng, n, dim);
        let oracle = brute_force_round_oracle(&cents, &open).map_err(|e| e.to_string())?;
        let pick = CandidateIndex::build(&cents, &open, rng.random_range(1..=4))
            .and_then(|i| i.nearest_per_centroid())
            .map_err(|e| e.to_string())?;
        ensure((oracle.value - pick.value).abs() <= 1e-9, || {
            format!("case {case}: value {} vs oracle {}", pick.value, oracle.value)
        })?;
        ensure(oracle.members.len() == pick.members.len(), || {
            format!(
                "case {case}: |S*| = {} vs oracle {}",
                pick.members.len(),
                oracle.members.len()
            )
        })?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s (limit 10s)"))?;
    Ok(format!("200/200 instances agree, {secs:.2}s"))
}

/// 2. monotonicity and diminishing returns of the objective.
fn submodularity_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst = 0f64;
    for case in 0..1000 {
        let dim = rng.random_range(2..=6);
        let k = rng.random_range(1..=6);
        let n = rng.random_range(3..=14);
        let cents = CentroidSet::from_matrix(random_unit(&mut rng, k, dim)).unwrap();
        let open = random_unit(&mut rng, n, dim);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        // S = order[..s], T = order[..t], u = order[t]
        let t = rng.random_range(1..n);
        let s = rng.random_range(1..=t);
        let u = order[t];
        let f = |set: &[usize]| facility_value(&cents, set, &open).unwrap();
        let with_u = |set: &[usize]| {
            let mut v = set.to_vec();
            v.push(u);
            v
        };
        let (fs, ft) = (f(&order[..s]), f(&order[..t]));
        let mono = fs - ft;
        let dr = (f(&with_u(&order[..t])) - ft) - (f(&with_u(&order[..s])) - fs);
        worst = worst.max(mono).max(dr);
        ensure(mono <= 1e-9, || format!("case {case}: f(S) exceeds f(T) by {mono:e}"))?;
        ensure(dr <= 1e-9, || format!("case {case}: diminishing returns violated by {dr:e}"))?;
    }
    Ok(format!("1000 triples, worst excess {worst:e}"))
}

fn fuzz_inputs(rng: &mut ChaCha8Rng) -> (EmbeddingMatrix, EmbeddingMatrix) {
    if rng.random_bool(0.5) {
        let dim = rng.random_range(2..=12);
        let (nt, nu) = (rng.random_range(2..=30), rng.random_range(5..=120));
        (random_unit(rng, nt, dim), random_unit(rng, nu, dim))
    } else {
        let spec = WorldSpec::balanced(
            rng.random_range(8..=16),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(3..=25),
            rng.random_range(0.0..10.0),
            25.0,
            rng.random(),
        );
        let w = generate_world(&spec).unwrap();
        (w.target, w.open)
    }
}

fn check_report(r: &SelectionReport, k: usize, tau: f64) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for round in r.rounds.iter().filter(|x| x.included) {
        for &u in &round.members {
            ensure(seen.insert(u), || format!("row {u} selected twice"))?;
        }
    }
    ensure(seen.len() == r.coreset.len(), || "coreset is not the union of rounds".into())?;
    ensure(r.rounds.first().is_none_or(|x| x.ratio == 1.0), || "first ratio is not 1".into())?;
    for w in r.rounds.windows(2) {
        ensure(w[1].value <= w[0].value, || {
            format!("round value rose from {} to {}", w[0].value, w[1].value)
        })?;
        ensure(w[1].ratio <= w[0].ratio, || "ratio rose".into())?;
    }
    if r.stop_reason == StopReason::Threshold {
        let (last, earlier) = r.rounds.split_last().unwrap();
        ensure(last.ratio < tau, || "threshold stop without a failing round".into())?;
        ensure(earlier.iter().all(|x| x.ratio >= tau), || "an earlier round already failed".into())?;
    }
    if r.config.strict_budget {
        ensure(r.coreset.len() <= r.budget, || "strict budget exceeded".into())?;
    } else {
        ensure(r.coreset.len() < r.budget + k, || {
            format!("|I| = {} not below B + k = {}", r.coreset.len(), r.budget + k)
        })?;
    }
    Ok(())
}

/// 3. whole-run invariants over fuzzed inputs.
fn fuzzed_run_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut stops = [0usize; 3];
    for run in 0..100 {
        let (target, open) = fuzz_inputs(&mut rng);
        let k = rng.random_range(1..=target.count().min(10));
        let base = SamplerConfig {
            k,
            seed: rng.random(),
            budget: Some(rng.random_range(1..=open.count())),
            strict_budget: rng.random_bool(0.3),
            top_m: rng.random_range(1..=8),
            ..Default::default()
        };
        let mut previous: Option<Vec<usize>> = None;
        for tau in [0.99, 0.95, 0.90] {
            let cfg = SamplerConfig { tau, ..base.clone() };
            let r = simcore_select(&target, &open, &cfg).map_err(|e| format!("run {run}: {e}"))?;
            check_report(&r, r.centroid_count, tau).map_err(|e| format!("run {run}, tau {tau}: {e}"))?;
            let again = simcore_select(&target, &open, &cfg).unwrap();
            ensure(again.without_timings() == r.without_timings(), || {
                format!("run {run}, tau {tau}: rerun differs")
            })?;
            if let Some(p) = &previous {
                ensure(r.coreset.starts_with(p), || {
                    format!("run {run}: tau {tau} coreset does not extend the larger-tau coreset")
                })?;
            }
            stops[r.stop_reason as usize] += 1;
            previous = Some(r.coreset);
        }
    }
    Ok(format!(
        "300 runs clean (threshold {}, budget {}, exhausted {})",
        stops[0], stops[1], stops[2]
    ))
}

/// The world behind criteria 4–6: five target clusters of 200 points, each
/// mirrored by a relevant open-set cluster, plus 20 distractor clusters.
fn recovery_world() -> SyntheticWorld {
    generate_world(&WorldSpec::balanced(32, 5, 20, 200, 5.0, 25.0, 0)).unwrap()
}

fn metrics(w: &SyntheticWorld, cfg: &SamplerConfig) -> (SelectionReport, EvalMetrics) {
    let r = simcore_select(&w.target, &w.open, cfg).unwrap();
    let m = precision_recall(&r.coreset, &w.relevance).unwrap();
    (r, m)
}

/// 4. precision and recall against ground truth on a separated world.
fn synthetic_recovery(w: &SyntheticWorld) -> Outcome {
    let cfg = SamplerConfig {
        k: 100,
        tau: 0.95,
        ..Default::default()
    };
    let (r, m) = metrics(w, &cfg);
    let precision = m.precision.unwrap_or(0.0);
    let random = random_select(w.open.count(), r.coreset_size, 1).unwrap();
    let rand_p = precision_recall(&random, &w.relevance).unwrap().precision.unwrap_or(0.0);
    ensure(m.relevant_pool_size == 1000 && m.baseline_precision == 0.2, || {
        format!("unexpected world: pool {}, base {}", m.relevant_pool_size, m.baseline_precision)
    })?;
    ensure(precision >= 0.95, || format!("precision {precision:.4} < 0.95"))?;
    ensure(m.recall >= 0.80, || format!("recall {:.4} < 0.80", m.recall))?;
    ensure(precision >= 4.0 * m.baseline_precision, || {
        format!("precision {precision:.4} below 4 x {}", m.baseline_precision)
    })?;
    Ok(format!(
        "precision {precision:.4}, recall {:.4}, {} rows in {} rounds; random at equal budget {rand_p:.4}",
        m.recall,
        r.coreset_size,
        r.rounds.len()
    ))
}

/// 5. sampled ratio shrinks as the threshold tightens.
///
/// Checked on the recovery world and on a diffuse one where rounds decay gradually.
fn tau_sweep_trend(w: &SyntheticWorld) -> Outcome {
    let diffuse = generate_world(&WorldSpec::balanced(32, 5, 20, 200, 30.0, 65.0, 0)).unwrap();
    let mut parts = Vec::new();
    for (name, w) in [("separated", w), ("diffuse", &diffuse)] {
        let table = sweep(
            &w.target,
            &w.open,
            Some(&w.relevance),
            &SamplerConfig::default(),
            SweepParam::Tau,
            &[0.99, 0.95, 0.90],
        )
        .map_err(|e| e.to_string())?;
        let ratios: Vec<f64> = table.rows.iter().map(|r| r.sampling_ratio).collect();
        ensure(ratios.windows(2).all(|p| p[0] <= p[1]), || {
            format!("{name}: ratios not non-increasing in tau: {ratios:?}")
        })?;
        parts.push(format!(
            "{name} tau 0.99/0.95/0.90 -> {:.2}%/{:.2}%/{:.2}%",
            ratios[0] * 100.0,
            ratios[1] * 100.0,
            ratios[2] * 100.0
        ));
    }
    Ok(parts.join("; "))
}

fn f1(m: &EvalMetrics) -> f64 {
    let p = m.precision.unwrap_or(0.0);
    if p + m.recall == 0.0 {
        0.0
    } else {
        2.0 * p * m.recall / (p + m.recall)
    }
}

/// 6. insensitivity to k beyond a single centroid.
fn k_sweep_robustness(w: &SyntheticWorld) -> Outcome {
    let mut rows = Vec::new();
    for k in [1usize, 10, 100, 1000] {
        let (_, m) = metrics(w, &SamplerConfig { k, ..Default::default() });
        rows.push((k, m));
    }
    let multi = &rows[1..];
    let ps: Vec<f64> = multi.iter().map(|(_, m)| m.precision.unwrap_or(0.0)).collect();
    let spread = ps.iter().cloned().fold(f64::MIN, f64::max) - ps.iter().cloned().fold(f64::MAX, f64::min);
    let worst_f1 = multi.iter().map(|(_, m)| f1(m)).fold(f64::MAX, f64::min);
    let single = &rows[0].1;
    let summary = rows
        .iter()
        .map(|(k, m)| format!("k={k}: p {:.3} r {:.3}", m.precision.unwrap_or(0.0), m.recall))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(spread < 0.05, || format!("precision spread {spread:.4} >= 0.05 ({summary})"))?;
    ensure(f1(single) <= worst_f1 - 0.05, || {
        format!("k=1 F1 {:.3} not measurably below {worst_f1:.3} ({summary})", f1(single))
    })?;
    Ok(format!(
        "precision spread {spread:.4}; F1 k=1 {:.3} vs worst multi-centroid {worst_f1:.3}; {summary}",
        f1(single)
    ))
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// 7. one-million-row open-set, 128 dimensions, k = 100, budget 10,000.
fn throughput() -> Outcome {
    let mut spec = WorldSpec::balanced(128, 5, 45, 20_000, 5.0, 25.0, 7);
    for c in &mut spec.target_clusters {
        c.points = 200;
    }
    let gen = Instant::now();
    let w = generate_world(&spec).map_err(|e| e.to_string())?;
    let gen_s = gen.elapsed().as_secs_f64();
    ensure(w.open.count() == 1_000_000 && w.open.dim() == 128, || "wrong world size".into())?;
    let cfg = SamplerConfig {
        k: 100,
        budget: Some(10_000),
        ..Default::default()
    };
    let started = Instant::now();
    let r = simcore_select(&w.target, &w.open, &cfg).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let peak_mb = peak_rss_kb().map(|kb| kb as f64 / 1024.0);
    ensure(secs < 60.0, || format!("select took {secs:.1}s (limit 60s)"))?;
    if let Some(mb) = peak_mb {
        ensure(mb < 2048.0, || format!("peak memory {mb:.0} MB (limit 2048 MB)"))?;
    }
    Ok(format!(
        "select {secs:.2}s on {} threads (world generation {gen_s:.2}s), {} rows, peak RSS {}",
        rayon::current_num_threads(),
        r.coreset_size,
        peak_mb.map_or("n/a".into(), |m| format!("{m:.0} MB"))
    ))
}

/// 8. EMB1 round trip and duplicate detection.
fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    for case in 0..50 {
        let n = rng.random_range(1..=200);
        let d = rng.random_range(1..=64);
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let m = EmbeddingMatrix::new(n, d, data).unwrap();
        let p = dir.path().join(format!("m{case}.emb"));
        save_embeddings(&m, &p).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&p).unwrap();
        let back = load_embeddings(&p, Format::Binary).map_err(|e| e.to_string())?;
        let same_bits = back.count() == n
            && back.dim() == d
            && back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits, || format!("case {case}: values differ after load"))?;
        save_embeddings(&back, &p).unwrap();
        ensure(std::fs::read(&p).unwrap() == bytes, || format!("case {case}: bytes differ"))?;
    }

    // plant cross-set and within-open duplicates
    let target = random_unit(&mut rng, 40, 16);
    let base = random_unit(&mut rng, 300, 16);
    let mut rows: Vec<Vec<f32>> = base.rows().map(|r| r.to_vec()).collect();
    let mut planted_cross = BTreeSet::new();
    for t in [0usize, 7, 19, 33] {
        let u = rng.random_range(0..rows.len());
        if planted_cross.iter().any(|&(_, pu)| pu == u) {
            continue;
        }
        rows[u] = target.row(t).to_vec();
        planted_cross.insert((t, u));
    }
    let (a, b) = (5usize, 250usize);
    rows[b] = rows[a].clone();
    let open = EmbeddingMatrix::from_rows(&rows).unwrap();
    let report = find_duplicates(&target, &open).map_err(|e| e.to_string())?;
    let found: BTreeSet<(usize, usize)> = report.cross.iter().copied().collect();
    ensure(planted_cross.is_subset(&found), || {
        format!("missed cross duplicates: planted {planted_cross:?}, found {found:?}")
    })?;
    ensure(report.within_open.iter().any(|g| g.contains(&a) && g.contains(&b)), || {
        "missed a within-open duplicate".into()
    })?;

    let (tp, up) = (dir.path().join("t.emb"), dir.path().join("u.emb"));
    save_embeddings(&target, &tp).unwrap();
    save_embeddings(&open, &up).unwrap();
    let out = dir.path().join("dups.json");
    let status = Command::new(env!("CARGO_BIN_EXE_simcore"))
        .args(["-q", "dedup-check", "--target"])
        .arg(&tp)
        .arg("--open-set")
        .arg(&up)
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || format!("dedup-check exited {:?}", status.status))?;
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let cli_cross = json["cross"].as_array().map_or(0, |a| a.len());
    ensure(cli_cross == found.len(), || format!("CLI reported {cli_cross} cross pairs"))?;
    Ok(format!(
        "50/50 matrices bit-identical; {} planted cross duplicates and 1 internal duplicate found",
        planted_cross.len()
    ))
}

fn main() {
    let world = recovery_world();
    let criteria: Vec<(&str, Check)> = vec![
        ("1 round-oracle equivalence", Box::new(round_oracle_equivalence)),
        ("2 submodularity/monotonicity", Box::new(submodularity_suite)),
        ("3 full-run invariants under fuzzing", Box::new(fuzzed_run_invariants)),
        ("4 synthetic recovery", Box::new(|| synthetic_recovery(&world))),
        ("5 tau-sweep trend", Box::new(|| tau_sweep_trend(&world))),
        ("6 k-sweep robustness", Box::new(|| k_sweep_robustness(&world))),
        ("7 throughput", Box::new(throughput)),
        ("8 format round-trip", Box::new(format_round_trip)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
