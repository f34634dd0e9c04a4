//! Experiment driver: pretraining, threshold sweeps and report files.
//!
//! Every γ branch starts from the same pretrained snapshot, so the branches
//! are independent and run in parallel under the in-process transport.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::agent::PairState;
use crate::channel::UplinkStats;
use crate::coordination::{run_cooperation_round, RoundContext, Transport};
use crate::error::{Error, Result};
use crate::metrics::ClassScores;
use crate::scenario::ScenarioConfig;
use crate::PairId;

/// Builds every pair, trains it on its own initial SKB and evaluates once.
pub fn pretrain(cfg: &ScenarioConfig) -> Result<Vec<PairState>> {
    let truth = Arc::new(cfg.truth_table()?);
    let mut pairs = cfg.build_pairs(&truth)?;
    pairs.par_iter_mut().try_for_each(|p| {
        let initial = p.local().clone();
        p.train_surrogate(initial)?;
        p.evaluate_and_update(cfg.samples_per_class).map(drop)
    })?;
    Ok(pairs)
}

/// Pretrains a single pair, as a standalone client does before joining.
pub fn pretrain_pair(cfg: &ScenarioConfig, pair: PairId) -> Result<PairState> {
    let pc = cfg.pairs.iter().find(|p| p.id == pair).ok_or_else(|| {
        Error::Config(format!(
            "scenario has no pair {pair} (pairs are 1..={})",
            cfg.num_pairs()
        ))
    })?;
    let truth = Arc::new(cfg.truth_table()?);
    let mut state = cfg.build_pair(pc, &truth)?;
    let initial = state.local().clone();
    state.train_surrogate(initial)?;
    state.evaluate_and_update(cfg.samples_per_class)?;
    Ok(state)
}

/// One pair at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub pair: PairId,
    pub distance_m: f64,
    /// Uplink totals over all rounds.
    pub uplink: UplinkStats,
    /// Scores after pretraining.
    pub before: ClassScores,
    /// Scores after the last round.
    pub after: ClassScores,
    /// Classes in the last round's global SKB.
    pub global_classes: usize,
    pub global_complete: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepResult {
    /// Ordered by γ, then pair.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn gammas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.rows.iter().map(|r| r.gamma).collect();
        out.dedup();
        out
    }

    pub fn at(&self, gamma: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.gamma == gamma)
    }

    pub fn row(&self, gamma: f64, pair: PairId) -> Option<&SweepRow> {
        self.at(gamma).find(|r| r.pair == pair)
    }

    /// Sum of per-pair uplink latencies at `gamma`.
    pub fn total_latency(&self, gamma: f64) -> f64 {
        self.at(gamma).map(|r| r.uplink.latency_s).sum()
    }

    pub fn total_uploaded(&self, gamma: f64) -> usize {
        self.at(gamma).map(|r| r.uplink.uploaded_classes).sum()
    }

    pub fn write_sweep_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record([
            "gamma",
            "pair",
            "distance_m",
            "M_l",
            "payload_bits",
            "path_loss",
            "R_l",
            "T_l",
            "macro_f1_pre",
            "macro_f1_post",
            "global_classes",
            "global_complete",
        ])?;
        for r in &self.rows {
            csv.write_record([
                r.gamma.to_string(),
                r.pair.to_string(),
                r.distance_m.to_string(),
                r.uplink.uploaded_classes.to_string(),
                r.uplink.payload_bits.to_string(),
                r.uplink.path_loss.to_string(),
                r.uplink.rate_bps.to_string(),
                r.uplink.latency_s.to_string(),
                r.before.macro_f1.to_string(),
                r.after.macro_f1.to_string(),
                r.global_classes.to_string(),
                r.global_complete.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_class_f1_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record([
            "gamma",
            "pair",
            "phase",
            "class",
            "precision",
            "recall",
            "f1",
        ])?;
        for r in &self.rows {
            for (phase, scores) in [("pre", &r.before), ("post", &r.after)] {
                for (i, s) in scores.per_class.iter().enumerate() {
                    csv.write_record([
                        r.gamma.to_string(),
                        r.pair.to_string(),
                        phase.to_string(),
                        (i + 1).to_string(),
                        s.precision.to_string(),
                        s.recall.to_string(),
                        s.f1.to_string(),
                    ])?;
                }
            }
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["gamma", "pair", "macro_f1_pre", "macro_f1_post"])?;
        for r in &self.rows {
            csv.write_record([
                r.gamma.to_string(),
                r.pair.to_string(),
                r.before.macro_f1.to_string(),
                r.after.macro_f1.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn run_branch(
    cfg: &ScenarioConfig,
    snapshot: &[PairState],
    gamma: f64,
    transport: &Transport,
) -> Result<Vec<SweepRow>> {
    let ctx = RoundContext {
        gamma,
        samples_per_class: cfg.samples_per_class,
        link: cfg.link_params()?,
        distances: cfg.distances(),
    };
    let mut pairs = snapshot.to_vec();
    let before: Vec<ClassScores> = pairs
        .iter()
        .map(|p| p.scores().cloned().ok_or(Error::UntrainedPair(p.id())))
        .collect::<Result<_>>()?;
    let mut uploaded = vec![0usize; pairs.len()];
    let mut last = None;
    for round in 1..=cfg.rounds {
        let outcome = run_cooperation_round(&mut pairs, round, &ctx, transport)?;
        for (total, report) in uploaded.iter_mut().zip(&outcome.pairs) {
            *total += report.uplink.uploaded_classes;
        }
        last = Some(outcome);
    }
    let last = last.ok_or_else(|| Error::Config("rounds must be at least 1".into()))?;
    let global_classes = last.global.len();
    let global_complete = last.global.is_complete(cfg.num_classes);
    pairs
        .iter()
        .zip(before)
        .zip(uploaded)
        .map(|((p, before), m)| {
            let distance_m = ctx.distances[&p.id()];
            Ok(SweepRow {
                gamma,
                pair: p.id(),
                distance_m,
                uplink: UplinkStats::compute(p.id(), m, cfg.dim, distance_m, &ctx.link)?,
                before,
                after: p.scores().cloned().ok_or(Error::UntrainedPair(p.id()))?,
                global_classes,
                global_complete,
            })
        })
        .collect()
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if let Some(&g) = grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::InvalidThreshold(g));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Runs every threshold in `grid` from one shared pretrained snapshot. Rows
/// come out in ascending γ whatever order the grid is given in.
pub fn sweep_gamma(
    cfg: &ScenarioConfig,
    grid: &[f64],
    transport: &Transport,
) -> Result<SweepResult> {
    let grid = sorted_grid(grid)?;
    let snapshot = pretrain(cfg)?;
    let branches: Vec<Vec<SweepRow>> = match transport {
        Transport::Sim => grid
            .par_iter()
            .map(|&g| run_branch(cfg, &snapshot, g, transport))
            .collect::<Result<_>>()?,
        // Each socket round binds its own listener; keep them sequential.
        Transport::Socket(_) => grid
            .iter()
            .map(|&g| run_branch(cfg, &snapshot, g, transport))
            .collect::<Result<_>>()?,
    };
    log::info!(
        "swept {} thresholds over {} pairs via {}",
        grid.len(),
        snapshot.len(),
        transport.name()
    );
    Ok(SweepResult {
        rows: branches.into_iter().flatten().collect(),
    })
}

/// A single threshold.
pub fn run_once(cfg: &ScenarioConfig, gamma: f64, transport: &Transport) -> Result<SweepResult> {
    sweep_gamma(cfg, &[gamma], transport)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    transport: &'static str,
    gammas: Vec<f64>,
    seed: u64,
    defaults_applied: &'a [String],
    scenario: &'a ScenarioConfig,
    /// Fully resolved scenario; `load_scenario` accepts this manifest to
    /// replay the run.
    scenario_toml: String,
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    let path = dir.join(name);
    fs::File::create(&path).map_err(|source| Error::File { path, source })
}

/// Writes `manifest.json`, `sweep.csv`, `class_f1.csv` and `summary.csv`
/// into `dir`, creating it if needed. Returns the files written.
pub fn write_report(
    dir: &Path,
    cfg: &ScenarioConfig,
    result: &SweepResult,
    command: &str,
    transport: &Transport,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let manifest = Manifest {
        tool: "skb-coop",
        version: env!("CARGO_PKG_VERSION"),
        command,
        transport: transport.name(),
        gammas: result.gammas(),
        seed: cfg.seed,
        defaults_applied: &cfg.defaults_applied,
        scenario: cfg,
        scenario_toml: cfg.to_toml()?,
    };
    let mut f = create(dir, "manifest.json")?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    result.write_sweep_csv(create(dir, "sweep.csv")?)?;
    result.write_class_f1_csv(create(dir, "class_f1.csv")?)?;
    result.write_summary_csv(create(dir, "summary.csv")?)?;
    Ok(
        ["manifest.json", "sweep.csv", "class_f1.csv", "summary.csv"]
            .iter()
            .map(|n| dir.join(n))
            .collect(),
    )
}
