//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skb_coop::channel::{dbm_to_watts, LinkParams, NoisePreset, UplinkStats};
use skb_coop::coordination::transport::SocketOptions;
use skb_coop::coordination::{
    aggregate_global, select_knowledge, GlobalSkb, KnowledgeUpload, Transport,
};
use skb_coop::harness::{run_once, sweep_gamma};
use skb_coop::metrics::{confusion_from_labels, ClassScore, ClassScores};
use skb_coop::scenario::{default_gamma_grid, ScenarioConfig};
use skb_coop::{AttributeVector, ClassId, PairId, Skb, SkbRole};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn latency_reproduction() -> Outcome {
    let link = LinkParams::with_preset(NoisePreset::PaperResults);
    let setup = [(1, 0, 50.0), (2, 14, 150.0), (3, 21, 300.0)];
    let t: Vec<f64> = setup
        .iter()
        .map(|&(p, m, d)| {
            UplinkStats::compute(PairId(p), m, 81, d, &link)
                .unwrap()
                .latency_s
        })
        .collect();
    let expected = [0.0, 2.69, 32.23];
    let total: f64 = t.iter().sum();
    let pass =
        t.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 0.01) && (total - 34.92).abs() <= 0.02;
    outcome(
        pass,
        format!(
            "T = ({:.4}, {:.4}, {:.4}) s, total {total:.4} s",
            t[0], t[1], t[2]
        ),
    )
}

// Solves T = Q·M·(d+1) / (B·log2(1 + P·g / (B·N0))) for N0 directly from
// the link-budget definitions.
fn back_solved_noise_dbm(latency: f64, m: f64, distance: f64) -> f64 {
    let from_db = |db: f64| 10f64.powf(db / 10.0);
    let (q, d, b) = (10.0, 81.0, 1.0e6);
    let p_watts = from_db(10.0) / 1000.0;
    let gain = from_db(-30.0) * (distance / 10.0f64).powf(-3.0);
    let rate = q * m * (d + 1.0) / latency;
    let snr = 2f64.powf(rate / b) - 1.0;
    let n0_watts_per_hz = p_watts * gain / (b * snr);
    10.0 * (n0_watts_per_hz * 1000.0).log10()
}

fn back_solve_oracle() -> Outcome {
    let n2 = back_solved_noise_dbm(2.69, 14.0, 150.0);
    let n3 = back_solved_noise_dbm(32.23, 21.0, 300.0);
    let preset = NoisePreset::PaperResults.noise_dbm();
    let text = NoisePreset::PaperText.noise_dbm();
    let configured = LinkParams::default().noise_power_w;
    let consistent = ((dbm_to_watts(preset) - configured) / configured).abs() <= 1e-12;
    let pass = consistent && (n2 - preset).abs() <= 0.5 && (n3 - preset).abs() <= 0.5;
    outcome(
        pass,
        format!(
            "effective N0 from T_2 = {n2:.3} dBm, from T_3 = {n3:.3} dBm (default preset {preset} dBm; the {text} dBm text value is {:.1} dB off)",
            n2 - text
        ),
    )
}

fn sweep_shape() -> Outcome {
    let cfg = ScenarioConfig::three_pair();
    let grid = default_gamma_grid();
    let res = sweep_gamma(&cfg, &grid, &Transport::Sim).unwrap();
    let mut problems = Vec::new();
    let mut totals = Vec::new();
    for &g in &grid {
        let m: Vec<usize> = (1..=3)
            .map(|p| res.row(g, PairId(p)).unwrap().uplink.uploaded_classes)
            .collect();
        totals.push(m.iter().sum::<usize>());
        if !(m[2] >= m[1] && m[1] >= m[0]) {
            problems.push(format!("order at {g}: {m:?}"));
        }
        if m[0] != 0 {
            problems.push(format!("M_1 = {} at {g}", m[0]));
        }
        if g > 0.85 && res.total_latency(g) >= 33.0 {
            problems.push(format!(
                "total latency {:.2} s at {g}",
                res.total_latency(g)
            ));
        }
    }
    if totals.windows(2).any(|w| w[1] > w[0]) {
        problems.push(format!("total M_l increases: {totals:?}"));
    }
    let lat: Vec<String> = grid
        .iter()
        .filter(|&&g| g > 0.85)
        .map(|&g| format!("{:.2}", res.total_latency(g)))
        .collect();
    outcome(
        problems.is_empty(),
        format!(
            "total M_l over 0.50..1.00 = {totals:?}, total T for gamma > 0.85 = [{}] s{}",
            lat.join(", "),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {}", problems.join("; "))
            }
        ),
    )
}

fn table2_directionality() -> Outcome {
    let seeds = 0..10u64;
    let mut passed = 0;
    let mut failures = Vec::new();
    for seed in seeds.clone() {
        let mut cfg = ScenarioConfig::three_pair();
        cfg.seed = seed;
        let res = run_once(&cfg, 0.85, &Transport::Sim).unwrap();
        let pre = |p| res.row(0.85, PairId(p)).unwrap().before.macro_f1;
        let post = |p| res.row(0.85, PairId(p)).unwrap().after.macro_f1;
        let ok = pre(1) < 0.1
            && post(1) > 0.8
            && post(2) >= pre(2)
            && post(3) >= pre(3)
            && pre(3) > pre(2)
            && pre(2) > pre(1);
        if ok {
            passed += 1;
        } else {
            failures.push(format!(
                "seed {seed}: pre ({:.3}, {:.3}, {:.3}) post ({:.3}, {:.3}, {:.3})",
                pre(1),
                pre(2),
                pre(3),
                post(1),
                post(2),
                post(3)
            ));
        }
    }
    let n = seeds.count();
    outcome(
        passed * 10 >= 9 * n,
        format!(
            "{passed}/{n} seeds directional{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; {}", failures.join("; "))
            }
        ),
    )
}

// Counts TP/FP/FN per class by walking the samples.
fn one_vs_rest(actual: &[ClassId], predicted: &[ClassId], num_classes: usize) -> Vec<ClassScore> {
    ClassId::all(num_classes)
        .map(|c| {
            let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
            for (a, p) in actual.iter().zip(predicted) {
                match (*a == c, *p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    (false, false) => {}
                }
            }
            let precision = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = if tp + fneg == 0 {
                0.0
            } else {
                tp as f64 / (tp + fneg) as f64
            };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScore {
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let m = rng.random_range(1..=10usize);
        let n = rng.random_range(1..=200usize);
        let draw = |rng: &mut ChaCha8Rng| ClassId(rng.random_range(1..=m as u16));
        let actual: Vec<ClassId> = (0..n).map(|_| draw(&mut rng)).collect();
        // Bias predictions toward the truth so every regime appears.
        let predicted: Vec<ClassId> = actual
            .iter()
            .map(|&a| {
                if rng.random_bool(0.5) {
                    a
                } else {
                    draw(&mut rng)
                }
            })
            .collect();
        let cm = confusion_from_labels(&actual, &predicted, m).unwrap();
        let got = ClassScores::from_confusion(&cm);
        let want = one_vs_rest(&actual, &predicted, m);
        let want_macro = want.iter().map(|s| s.f1).sum::<f64>() / m as f64;
        if got.per_class != want || got.macro_f1 != want_macro {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/100 random instances differ from the per-sample oracle"),
    )
}

fn random_uploads(rng: &mut ChaCha8Rng) -> Vec<KnowledgeUpload> {
    let pairs = rng.random_range(1..=5u16);
    let classes = rng.random_range(1..=8u16);
    let dim = rng.random_range(1..=4usize);
    let mut out = Vec::new();
    for p in 1..=pairs {
        for c in 1..=classes {
            if rng.random_bool(0.6) {
                // Coarse values so F1 and pair ties are common.
                let f1 = f64::from(rng.random_range(0..=4u8)) / 4.0;
                let vector = AttributeVector::new(
                    (0..dim)
                        .map(|_| f64::from(rng.random_range(0..=2u8)) / 2.0)
                        .collect(),
                )
                .unwrap();
                out.push(KnowledgeUpload {
                    pair: PairId(p),
                    class: ClassId(c),
                    f1,
                    vector,
                });
            }
        }
    }
    // Occasionally a duplicate (pair, class) with a different vector.
    if !out.is_empty() && rng.random_bool(0.3) {
        let mut dup = out[rng.random_range(0..out.len())].clone();
        dup.vector =
            AttributeVector::constant(dup.vector.dim(), f64::from(rng.random_range(0..=2u8)) / 2.0);
        out.push(dup);
    }
    out
}

// For every class, scans all uploads and keeps the best by (f1 desc, pair
// asc, vector asc).
fn max_scan(uploads: &[KnowledgeUpload]) -> BTreeMap<ClassId, (PairId, f64, Vec<f64>)> {
    let key = |u: &KnowledgeUpload| (u.f1, u.pair, u.vector.values().to_vec());
    let better = |a: &(f64, PairId, Vec<f64>), b: &(f64, PairId, Vec<f64>)| match a
        .0
        .partial_cmp(&b.0)
        .unwrap()
    {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.1, &a.2).partial_cmp(&(b.1, &b.2)).unwrap() == Ordering::Less,
    };
    let classes: Vec<ClassId> = uploads.iter().map(|u| u.class).collect();
    let mut out = BTreeMap::new();
    for c in classes {
        let mut best: Option<(f64, PairId, Vec<f64>)> = None;
        for u in uploads.iter().filter(|u| u.class == c) {
            let k = key(u);
            if best.as_ref().is_none_or(|b| better(&k, b)) {
                best = Some(k);
            }
        }
        let (f1, pair, v) = best.unwrap();
        out.insert(c, (pair, f1, v));
    }
    out
}

fn flatten(g: &GlobalSkb) -> BTreeMap<ClassId, (PairId, f64, Vec<f64>)> {
    g.iter()
        .map(|(c, e)| (c, (e.source, e.f1, e.vector.values().to_vec())))
        .collect()
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut wrong, mut order_dependent, mut not_idempotent) = (0, 0, 0);
    for _ in 0..1000 {
        let mut uploads = random_uploads(&mut rng);
        let global = aggregate_global(&uploads);
        if flatten(&global) != max_scan(&uploads) {
            wrong += 1;
        }
        uploads.shuffle(&mut rng);
        if aggregate_global(&uploads) != global {
            order_dependent += 1;
        }
        if aggregate_global(&global.to_uploads()) != global {
            not_idempotent += 1;
        }
    }
    outcome(
        wrong + order_dependent + not_idempotent == 0,
        format!("1000 upload sets: {wrong} differ from max-scan, {order_dependent} order-dependent, {not_idempotent} not idempotent"),
    )
}

fn selection_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    let gammas: Vec<f64> = (0..=20).rev().map(|i| f64::from(i) / 20.0).collect();
    for trial in 0..200 {
        let m = rng.random_range(1..=30usize);
        let local = Skb::uniform(SkbRole::Updated, m, 3, 0.5);
        let per_class: Vec<ClassScore> = (0..m)
            .map(|_| {
                let f1 = match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random::<f64>(),
                };
                ClassScore {
                    precision: f1,
                    recall: f1,
                    f1,
                }
            })
            .collect();
        let scores = ClassScores::from_per_class(per_class);
        let pick = |g| -> Vec<ClassId> {
            select_knowledge(PairId(1), &local, &scores, g)
                .unwrap()
                .into_iter()
                .map(|u| u.class)
                .collect()
        };
        let positive: Vec<ClassId> = ClassId::all(m)
            .filter(|c| scores.get(*c).unwrap().f1 > 0.0)
            .collect();
        if pick(0.0) != positive {
            problems.push(format!("trial {trial}: gamma 0 misses classes"));
        }
        if !pick(1.0).is_empty() {
            problems.push(format!("trial {trial}: gamma 1 selects"));
        }
        let mut previous: Vec<ClassId> = Vec::new();
        for &g in &gammas {
            let now = pick(g);
            if !previous.iter().all(|c| now.contains(c)) {
                problems.push(format!("trial {trial}: not nested at {g}"));
            }
            previous = now;
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "200 random score sets".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn run_cli_sweep(dir: &Path, transport: &str) -> Vec<(String, Vec<u8>)> {
    let status = Command::new(env!("CARGO_BIN_EXE_skb-coop"))
        .args(["sweep", "--seed", "11", "--transport", transport, "--out"])
        .arg(dir)
        .output()
        .expect("run skb-coop");
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    ["sweep.csv", "class_f1.csv", "summary.csv"]
        .iter()
        .map(|n| (n.to_string(), fs::read(dir.join(n)).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for transport in ["sim", "socket"] {
        let a = run_cli_sweep(&tmp.path().join(format!("{transport}-a")), transport);
        let b = run_cli_sweep(&tmp.path().join(format!("{transport}-b")), transport);
        let same = a == b;
        pass &= same;
        let bytes: usize = a.iter().map(|(_, d)| d.len()).sum();
        details.push(format!(
            "{transport}: {} ({bytes} bytes)",
            if same { "identical" } else { "DIFFERENT" }
        ));
    }
    outcome(pass, details.join(", "))
}

fn transport_equivalence() -> Outcome {
    let cfg = ScenarioConfig::three_pair();
    let sim = run_once(&cfg, 0.85, &Transport::Sim).unwrap();
    let socket = run_once(&cfg, 0.85, &Transport::Socket(SocketOptions::default())).unwrap();
    let differing = sim
        .rows
        .iter()
        .zip(&socket.rows)
        .filter(|(a, b)| a != b)
        .count()
        + sim.rows.len().abs_diff(socket.rows.len());
    outcome(
        differing == 0,
        format!(
            "{} rows compared at gamma 0.85, {differing} differ",
            sim.rows.len()
        ),
    )
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("latency reproduction", latency_reproduction),
        ("noise back-solve", back_solve_oracle),
        ("threshold sweep shape", sweep_shape),
        ("macro-F1 directionality", table2_directionality),
        ("per-class F1 oracle", metrics_oracle),
        ("max-F1 aggregation oracle", aggregation_oracle),
        ("threshold selection", selection_properties),
        ("sweep determinism", determinism),
        ("transport equivalence", transport_equivalence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
