use std::fs;

use skb_coop::coordination::Transport;
use skb_coop::harness::{sweep_gamma, write_report, SweepResult};
use skb_coop::scenario::{load_scenario, ScenarioConfig};

fn scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(
        r#"
classes = 10
attributes = 12
test_samples_per_class = 30
seed = 5
gamma_grid = [0.3, 0.6, 0.9]

[surrogate]
leakage = 0.85
noise_std = 0.35

[[pair]]
distance_m = 60.0
[[pair.init]]
classes = "1-10"
kind = "uninformative"

[[pair]]
distance_m = 120.0
[[pair.init]]
classes = "1-4"
kind = "uninformative"
[[pair.init]]
classes = "5-10"
kind = "noisy"
sigma = 0.5

[[pair]]
distance_m = 240.0
[[pair.init]]
classes = "1-10"
kind = "noisy"
"#,
    )
    .unwrap()
}

fn csv_bytes(res: &SweepResult) -> Vec<u8> {
    let mut out = Vec::new();
    res.write_sweep_csv(&mut out).unwrap();
    res.write_class_f1_csv(&mut out).unwrap();
    out
}

// T = Q·M·(d+1) / (B·log2(1 + P·β0·(D/D0)^-ζ / (B·N0))) with the default
// link: β0 = -30 dB, D0 = 10 m, ζ = 3, B = 1 MHz, P = 10 dBm, N0 = -90 dBm.
fn latency_oracle(m: f64, d: f64, distance: f64) -> f64 {
    let gain = 1e-3 * (distance / 10.0).powi(-3);
    let snr = 1e-2 * gain / (1e6 * 1e-12);
    10.0 * m * (d + 1.0) / (1e6 * (1.0 + snr).log2())
}

#[test]
fn reported_latency_matches_link_budget() {
    let cfg = scenario();
    let res = sweep_gamma(&cfg, &cfg.gamma_grid, &Transport::Sim).unwrap();
    assert_eq!(res.rows.len(), 9);
    for r in &res.rows {
        let want = latency_oracle(r.uplink.uploaded_classes as f64, 12.0, r.distance_m);
        assert!(
            (r.uplink.latency_s - want).abs() <= 1e-9 * want.max(1.0),
            "{r:?}"
        );
        assert_eq!(
            r.uplink.payload_bits,
            10 * r.uplink.uploaded_classes as u64 * 13
        );
    }
    // Uploads can only shrink as the threshold rises.
    for w in res.gammas().windows(2) {
        for p in &cfg.pairs {
            let lo = res.row(w[0], p.id).unwrap().uplink.uploaded_classes;
            let hi = res.row(w[1], p.id).unwrap().uplink.uploaded_classes;
            assert!(hi <= lo);
        }
    }
}

#[test]
fn grid_order_does_not_change_output() {
    let cfg = scenario();
    let a = sweep_gamma(&cfg, &[0.3, 0.6, 0.9], &Transport::Sim).unwrap();
    let b = sweep_gamma(&cfg, &[0.9, 0.3, 0.6], &Transport::Sim).unwrap();
    assert_eq!(csv_bytes(&a), csv_bytes(&b));
    // A branch computed alone equals the same branch inside a sweep.
    let alone = sweep_gamma(&cfg, &[0.6], &Transport::Sim).unwrap();
    assert_eq!(alone.rows, a.at(0.6).cloned().collect::<Vec<_>>());
}

#[test]
fn manifest_replays_the_run() {
    let mut cfg = scenario();
    cfg.seed = 77;
    let res = sweep_gamma(&cfg, &cfg.gamma_grid, &Transport::Sim).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &cfg, &res, "sweep", &Transport::Sim).unwrap();
    let replayed_cfg = load_scenario(dir.path().join("manifest.json")).unwrap();
    assert_eq!(replayed_cfg.seed, 77);
    let replayed = sweep_gamma(&replayed_cfg, &replayed_cfg.gamma_grid, &Transport::Sim).unwrap();
    let mut original = Vec::new();
    res.write_sweep_csv(&mut original).unwrap();
    assert_eq!(fs::read(dir.path().join("sweep.csv")).unwrap(), original);
    assert_eq!(csv_bytes(&replayed), csv_bytes(&res));
}

#[test]
fn multi_round_sums_uploads() {
    let mut cfg = scenario();
    cfg.rounds = 3;
    let res = sweep_gamma(&cfg, &[0.6], &Transport::Sim).unwrap();
    let mut one = scenario();
    one.rounds = 1;
    let first = sweep_gamma(&one, &[0.6], &Transport::Sim).unwrap();
    for (r3, r1) in res.rows.iter().zip(&first.rows) {
        assert_eq!(r3.before, r1.before);
        assert!(r3.uplink.uploaded_classes >= r1.uplink.uploaded_classes);
        let want = latency_oracle(r3.uplink.uploaded_classes as f64, 12.0, r3.distance_m);
        assert!((r3.uplink.latency_s - want).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn scenario_file_loads_relative_truth_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::new();
    for c in 0..4 {
        let row: Vec<String> = (0..3)
            .map(|a| format!("{}", (c * 3 + a) as f64 / 12.0))
            .collect();
        table.push_str(&row.join(","));
        table.push('\n');
    }
    fs::write(dir.path().join("truth.csv"), table).unwrap();
    let src = "classes = 4\nattributes = 3\n[truth]\npath = \"truth.csv\"\n[[pair]]\ndistance_m = 30.0\n[[pair.init]]\nclasses = \"1-4\"\nkind = \"noisy\"\nsigma = 0.0\n";
    fs::write(dir.path().join("s.toml"), src).unwrap();
    let cfg = load_scenario(dir.path().join("s.toml")).unwrap();
    let truth = cfg.truth_table().unwrap();
    assert_eq!(
        truth.get(skb_coop::ClassId(2)).values(),
        &[0.25, 4.0 / 12.0, 5.0 / 12.0]
    );
    let mut wrong = cfg.clone();
    wrong.dim = 4;
    assert!(wrong.truth_table().is_err());
}
