//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use calib_core::config::RunConfig;
use calib_core::judge::{judge, JudgeConfig};
use calib_core::metrics::{auroc, ece, Binning, ScoredSample};
use calib_core::response::{format_response, parse_multi, parse_single, score_single};
use calib_core::reward::{expected_reward, normalized_reward, ConfidenceLevel, RewardSpec};
use calib_core::train::train;
use calib_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn calib(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_calib"))
        .args(args)
        .env("CALIB_LOG", "warn")
        .output()
        .expect("spawn calib")
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Independent argmax: scan the grid directly, keeping the first maximum.
fn oracle_argmax(p_star: f64, grid: usize) -> f64 {
    let (eps, lo, hi) = (1e-3_f64, 1e-3_f64.ln(), (1.0 - 1e-3_f64).ln());
    let score = |q: f64| {
        let q = q.clamp(eps, 1.0 - eps);
        let r = |x: f64| 2.0 * (x - lo) / (hi - lo) - 1.0;
        p_star * r(q.ln()) + (1.0 - p_star) * r((1.0 - q).ln())
    };
    let mut best = (0.0, f64::NEG_INFINITY);
    for j in 0..grid {
        let q = j as f64 / (grid - 1) as f64;
        let s = score(q);
        if s > best.1 {
            best = (q, s);
        }
    }
    best.0
}

fn optimality_sweep() -> Outcome {
    let started = Instant::now();
    let out = calib(&["verify-optimality", "--p-star-grid", "101", "--conf-grid", "1001", "--quiet"]);
    let elapsed = started.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let reported: f64 = stdout
        .split_whitespace()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("unparseable output {stdout:?}"))?;
    let oracle = (0..101)
        .map(|i| {
            let p = i as f64 / 100.0;
            (oracle_argmax(p, 1001) - p.clamp(1e-3, 1.0 - 1e-3)).abs()
        })
        .fold(0.0, f64::max);
    check(
        out.status.success()
            && reported <= 0.001 + 1e-12
            && (reported - oracle).abs() < 1e-12
            && elapsed < Duration::from_secs(1),
        format!(
            "max deviation {reported:.6} (oracle {oracle:.6}), exit {:?}, {:.3}s",
            out.status.code(),
            elapsed.as_secs_f64()
        ),
    )
}

fn concavity_sweep() -> Outcome {
    let spec = RewardSpec::default();
    let started = Instant::now();
    let mut worst: f64 = f64::NEG_INFINITY;
    for i in 0..=100 {
        let p = i as f64 / 100.0;
        let values: Vec<f64> = (1..=999)
            .map(|j| expected_reward(p, j as f64 / 1000.0, &spec).unwrap())
            .collect();
        let diffs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
        for d in diffs.windows(2) {
            worst = worst.max(d[1] - d[0]);
        }
    }
    let elapsed = started.elapsed();
    check(
        worst <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("largest increase in first differences {worst:.3e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn normalization_endpoints() -> Outcome {
    let spec = RewardSpec::default();
    let level = |v| ConfidenceLevel::new(v).unwrap();
    let top = normalized_reward(true, level(10), &spec).normalized;
    let bottom = normalized_reward(true, level(0), &spec).normalized;
    let asym = (0..=10)
        .map(|l| {
            (normalized_reward(true, level(l), &spec).normalized
                - normalized_reward(false, level(10 - l), &spec).normalized)
                .abs()
        })
        .fold(0.0, f64::max);
    check(
        (top - 1.0).abs() <= 1e-9 && (bottom + 1.0).abs() <= 1e-9 && asym <= 1e-12,
        format!("R(correct,10)={top}, R(correct,0)={bottom}, max asymmetry {asym:.3e}"),
    )
}

fn synthetic_convergence() -> Outcome {
    let cfg = RunConfig::default();
    let started = Instant::now();
    let outcome = train(
        cfg.environment().unwrap(),
        cfg.train_config().unwrap(),
        Execution::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let h = &outcome.heldout;
    let (ece, auc, oracle) = (h.ece.unwrap_or(1.0), h.auroc.unwrap_or(0.0), h.oracle_auroc.unwrap_or(1.0));
    check(
        h.episodes == 10_000 && ece <= 0.05 && (auc - oracle).abs() <= 0.02 && elapsed < Duration::from_secs(300),
        format!(
            "held-out ECE {ece:.4}, AUROC {auc:.4} vs oracle {oracle:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn overconfidence_shift() -> Outcome {
    let cfg = RunConfig {
        init_bias_level: 10,
        init_bias_amount: 3.0,
        ..RunConfig::default()
    };
    let outcome = train(
        cfg.environment().unwrap(),
        cfg.train_config().unwrap(),
        Execution::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let (before, after) = (&outcome.initial, &outcome.heldout);
    let (hc0, hc1) = (before.high_confidence_fraction(), after.high_confidence_fraction());
    let (e0, e1) = (before.ece.unwrap_or(0.0), after.ece.unwrap_or(f64::INFINITY));
    check(
        hc1 <= 0.5 * hc0 && e1 * 5.0 <= e0,
        format!("levels >= 8: {hc0:.3} -> {hc1:.3}; ECE {e0:.4} -> {e1:.4}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut auroc_mismatch = 0;
    let mut ece_err: f64 = 0.0;
    for set in 0..100 {
        let n = rng.random_range(1..=200);
        let levels = set % 2 == 0;
        let s: Vec<ScoredSample> = (0..n)
            .map(|_| {
                let c = if levels {
                    rng.random_range(0..=10) as f64 / 10.0
                } else {
                    rng.random::<f64>()
                };
                ScoredSample::new(c, rng.random::<f64>() < c).unwrap()
            })
            .collect();
        if auroc(&s) != pairs_auroc(&s) {
            auroc_mismatch += 1;
        }
        let (binning, key): (Binning, fn(f64) -> i64) = if levels {
            (Binning::DiscreteLevels, |c| (c * 10.0).round() as i64)
        } else {
            (Binning::EqualWidth(10), |c| ((c * 10.0).ceil() as i64 - 1).max(0))
        };
        let got = ece(&s, binning).map_err(|e| e.to_string())?;
        ece_err = ece_err.max((got - definition_ece(&s, key)).abs());
    }
    check(
        auroc_mismatch == 0 && ece_err <= 1e-12,
        format!("AUROC mismatches {auroc_mismatch}/100, max ECE error {ece_err:.3e}"),
    )
}

fn pairs_auroc(s: &[ScoredSample]) -> Option<f64> {
    let pos: Vec<f64> = s.iter().filter(|x| x.correct).map(|x| x.confidence).collect();
    let neg: Vec<f64> = s.iter().filter(|x| !x.correct).map(|x| x.confidence).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let wins: f64 = pos
        .iter()
        .flat_map(|p| neg.iter().map(move |n| (p, n)))
        .map(|(p, n)| if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 })
        .sum();
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn definition_ece(s: &[ScoredSample], key: fn(f64) -> i64) -> f64 {
    let mut keys: Vec<i64> = s.iter().map(|x| key(x.confidence)).collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|&k| {
            let m: Vec<_> = s.iter().filter(|x| key(x.confidence) == k).collect();
            let acc = m.iter().filter(|x| x.correct).count() as f64 / m.len() as f64;
            let conf = m.iter().map(|x| x.confidence).sum::<f64>() / m.len() as f64;
            m.len() as f64 / s.len() as f64 * (acc - conf).abs()
        })
        .sum()
}

fn load(name: &str) -> Vec<Value> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_owned()).collect()
}

fn judge_fixtures() -> Outcome {
    let mut failures = Vec::new();
    let f1 = load("judge_f1.json");
    for case in &f1 {
        let pred = case["pred"].as_str().unwrap();
        let gold = strings(&case["gold"]);
        let overlap = case["overlap"].as_f64().unwrap();
        let (np, ng) = (case["pred_tokens"].as_f64().unwrap(), case["gold_tokens"].as_f64().unwrap());
        let expected = if overlap == 0.0 {
            0.0
        } else {
            let (p, r) = (overlap / np, overlap / ng);
            2.0 * p * r / (p + r)
        };
        let j = judge(pred, &gold, &JudgeConfig::default()).unwrap();
        let best = &gold[case["best"].as_u64().unwrap() as usize];
        if j.score.to_bits() != expected.to_bits()
            || j.correct != case["correct"].as_bool().unwrap()
            || j.matched_candidate.as_ref() != Some(best)
        {
            failures.push(format!("f1 {pred:?}: got {} want {expected}", j.score));
        }
    }
    let exact = load("judge_exact.json");
    for case in &exact {
        let pred = case["pred"].as_str().unwrap();
        let j = judge(pred, &strings(&case["gold"]), &JudgeConfig::exact()).unwrap();
        let want = case["matched"].as_str().map(str::to_owned);
        let score = if case["correct"].as_bool().unwrap() { 1.0 } else { 0.0 };
        if j.correct != case["correct"].as_bool().unwrap() || j.matched_candidate != want || j.score != score {
            failures.push(format!("exact {pred:?}"));
        }
    }
    let detail = format!("{} F1 and {} exact-match fixtures", f1.len(), exact.len());
    check(
        failures.is_empty() && f1.len() >= 20 && exact.len() >= 10,
        if failures.is_empty() { detail } else { format!("{detail}; failed: {}", failures.join(", ")) },
    )
}

fn fuzzed_answer(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &[
        'a', 'Z', 'q', '0', '7', ' ', ',', '.', '-', '\'', '(', ')', 'é', 'ß', '東', ':', '&',
    ];
    loop {
        let len = rng.random_range(1..=24);
        let s: String = (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
        let s = s.trim().to_owned();
        if !s.is_empty() {
            return s;
        }
    }
}

fn parser_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lost = 0;
    for level in ConfidenceLevel::all() {
        for _ in 0..50 {
            let answer = fuzzed_answer(&mut rng);
            match parse_single(&format_response(&answer, level)) {
                Ok(p) if p.answer == answer && p.confidence == level => {}
                _ => lost += 1,
            }
        }
    }
    let read = |name| std::fs::read_to_string(fixture(name)).unwrap();
    let lvl = |v| ConfidenceLevel::new(v).unwrap();
    let single = parse_single(&read("single.txt")).map(|p| (p.answer, p.confidence));
    let tolerant = parse_single(&read("single_tolerant.txt")).map(|p| (p.answer, p.confidence));
    let multi = parse_multi(&read("multi.txt"));
    let grammar_ok = single == Ok(("Paris".into(), lvl(8)))
        && tolerant == Ok(("Paris".into(), lvl(10)))
        && multi.errors.is_empty()
        && multi.answers.iter().map(|a| (a.answer.as_str(), a.confidence)).collect::<Vec<_>>()
            == [("Kyoto", lvl(7)), ("Osaka", lvl(3))];
    let bad = read("out_of_format.txt");
    let penalty = score_single(&bad, &["Paris".into()], &JudgeConfig::default(), &RewardSpec::default())
        .map(|s| s.reward)
        .unwrap_or(f64::NAN);
    check(
        lost == 0 && grammar_ok && parse_single(&bad).is_err() && penalty == -3.0,
        format!("{} of 550 round-trips lost, grammar fixtures ok: {grammar_ok}, out-of-format reward {penalty}", lost),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = fixture("small.toml");
    let mut csvs = Vec::new();
    for (name, extra) in [("a", None), ("b", None), ("c", Some("--sequential"))] {
        let dir = tmp.path().join(name);
        let mut args = vec![
            "train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            dir.to_str().unwrap(),
        ];
        args.extend(extra);
        let out = calib(&args);
        if !out.status.success() {
            return Err(format!("train exited {:?}", out.status.code()));
        }
        csvs.push(std::fs::read(dir.join("stats.csv")).map_err(|e| e.to_string())?);
    }
    check(
        !csvs[0].is_empty() && csvs[0] == csvs[1] && csvs[0] == csvs[2],
        format!("stats.csv {} bytes, identical across reruns and execution modes", csvs[0].len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("optimality sweep", optimality_sweep),
        ("concavity sweep", concavity_sweep),
        ("normalization endpoints", normalization_endpoints),
        ("synthetic convergence", synthetic_convergence),
        ("overconfidence shift", overconfidence_shift),
        ("metric oracles", metric_oracles),
        ("judge fixtures", judge_fixtures),
        ("parser round-trip", parser_round_trip),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
