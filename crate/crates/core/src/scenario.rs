//! Scenario files.
//!
//! A scenario is a TOML document. Top-level keys describe the experiment,
//! `[truth]`, `[link]` and `[surrogate]` tables tune the components, and each
//! `[[pair]]` table describes one pair with its `[[pair.init]]` class ranges:
//!
//! ```toml
//! classes = 33
//! attributes = 81
//!
//! [[pair]]
//! distance_m = 50.0
//! [[pair.init]]
//! classes = "1-33"
//! kind = "uninformative"
//! ```
//!
//! Only `classes`, `attributes` and at least one `[[pair]]` are required.
//! Every default that gets filled in is recorded in
//! [`ScenarioConfig::defaults_applied`] so the run manifest can report it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::agent::{
    build_initial_skb, ClassInit, GroundTruthTable, InitPattern, PairState, SurrogateParams,
};
use crate::channel::{LinkParams, LinkUnits, NoisePreset};
use crate::coordination::transport::SocketOptions;
use crate::coordination::{Transport, WireFormat};
use crate::error::{Error, Result};
use crate::PairId;

/// The bundled three-pair scenario: 33 classes, pairs at 50, 150 and 300 m.
pub const THREE_PAIR_SCENARIO: &str = include_str!("../scenarios/three_pair.toml");

pub const DEFAULT_SEED: u64 = 2024;
pub const DEFAULT_TRUTH_SEED: u64 = 81;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 80;
pub const DEFAULT_GAMMA: f64 = 0.85;
pub const DEFAULT_NOISY_SIGMA: f64 = 0.8;

/// 0.50, 0.55, ..., 1.00.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    #[default]
    Sim,
    Socket,
}

impl std::str::FromStr for TransportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(TransportMode::Sim),
            "socket" => Ok(TransportMode::Socket),
            other => Err(Error::Config(format!(
                "unknown transport {other:?} (expected sim or socket)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruth {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    classes: Spanned<String>,
    kind: Spanned<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    distance_m: Spanned<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    surrogate: Option<Spanned<SurrogateParams>>,
    #[serde(default)]
    init: Vec<RawInit>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<Spanned<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attributes: Option<Spanned<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_samples_per_class: Option<Spanned<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rounds: Option<Spanned<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    transport: Option<Spanned<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wire: Option<Spanned<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<Spanned<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma_grid: Option<Spanned<Vec<f64>>>,
    /// Recorded for reference only; the generation task is not simulated.
    #[serde(skip_serializing_if = "Option::is_none")]
    training_cr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    testing_cr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<RawTruth>,
    #[serde(skip_serializing_if = "Option::is_none")]
    link: Option<Spanned<LinkUnits>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    surrogate: Option<Spanned<SurrogateParams>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair: Option<Vec<RawPair>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum TruthSource {
    /// I.i.d. uniform table from a fixed seed.
    Synthetic { seed: u64 },
    /// `M` rows by `d` columns.
    Csv { path: PathBuf },
}

/// Inclusive 1-based class range with its initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRange {
    pub first: u16,
    pub last: u16,
    pub init: ClassInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub id: PairId,
    pub distance_m: f64,
    pub surrogate: SurrogateParams,
    pub init: Vec<InitRange>,
}

impl PairConfig {
    pub fn init_pattern(&self, num_classes: usize) -> Result<InitPattern> {
        let mut pattern = InitPattern::uniform(num_classes, ClassInit::Uninformative);
        for r in &self.init {
            pattern = pattern.with_range(r.first, r.last, r.init);
        }
        InitPattern::new(
            (1..=num_classes as u16)
                .map(|c| pattern.get(crate::ClassId(c)))
                .collect(),
        )
    }
}

/// A validated scenario with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub rounds: u32,
    pub transport: TransportMode,
    pub wire: WireFormat,
    pub gamma: f64,
    pub gamma_grid: Vec<f64>,
    pub training_cr: Option<f64>,
    pub testing_cr: Option<f64>,
    pub truth: TruthSource,
    pub link: LinkUnits,
    pub surrogate: SurrogateParams,
    pub pairs: Vec<PairConfig>,
    /// `key = value` for every field that was not given explicitly.
    pub defaults_applied: Vec<String>,
    /// Directory that relative truth-table paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

struct Validator<'a> {
    src: &'a str,
}

impl Validator<'_> {
    fn fail<T>(
        &self,
        span: std::ops::Range<usize>,
        field: &str,
        msg: impl std::fmt::Display,
    ) -> Result<T> {
        Err(Error::Config(format!(
            "line {}: {field}: {msg}",
            line_of(self.src, span.start)
        )))
    }
}

fn parse_class_ranges(
    spec: &str,
    num_classes: usize,
) -> std::result::Result<Vec<(u16, u16)>, String> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        if part == "all" {
            out.push((1, num_classes as u16));
            continue;
        }
        let (a, b) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let a: u16 = a
            .parse()
            .map_err(|_| format!("bad class {a:?} in {spec:?}"))?;
        let b: u16 = b
            .parse()
            .map_err(|_| format!("bad class {b:?} in {spec:?}"))?;
        if a == 0 || a > b || usize::from(b) > num_classes {
            return Err(format!("range {part:?} outside 1..={num_classes}"));
        }
        out.push((a, b));
    }
    Ok(out)
}

impl ScenarioConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let raw: RawScenario = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_raw(raw, src)
    }

    /// The bundled three-pair scenario.
    pub fn three_pair() -> Self {
        Self::from_toml_str(THREE_PAIR_SCENARIO).expect("bundled scenario is valid")
    }

    fn from_raw(raw: RawScenario, src: &str) -> Result<Self> {
        let v = Validator { src };
        let mut missing = Vec::new();
        if raw.classes.is_none() {
            missing.push("classes");
        }
        if raw.attributes.is_none() {
            missing.push("attributes");
        }
        if raw.pair.as_ref().is_none_or(Vec::is_empty) {
            missing.push("pair (at least one [[pair]] table)");
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing required fields: {}",
                missing.join(", ")
            )));
        }
        let mut defaults = Vec::new();
        let mut note = |key: &str, value: String| defaults.push(format!("{key} = {value}"));

        let classes = raw.classes.expect("checked");
        let num_classes = *classes.get_ref();
        if num_classes == 0 || num_classes > usize::from(u16::MAX) {
            return v.fail(
                classes.span(),
                "classes",
                format!("must lie in 1..={}, got {num_classes}", u16::MAX),
            );
        }
        let attributes = raw.attributes.expect("checked");
        let dim = *attributes.get_ref();
        if dim == 0 || dim > usize::from(u16::MAX) {
            return v.fail(
                attributes.span(),
                "attributes",
                format!("must lie in 1..={}, got {dim}", u16::MAX),
            );
        }

        let samples_per_class = match raw.test_samples_per_class {
            Some(s) if *s.get_ref() == 0 => {
                return v.fail(s.span(), "test_samples_per_class", "must be at least 1")
            }
            Some(s) => s.into_inner(),
            None => {
                note(
                    "test_samples_per_class",
                    DEFAULT_SAMPLES_PER_CLASS.to_string(),
                );
                DEFAULT_SAMPLES_PER_CLASS
            }
        };
        let seed = raw.seed.unwrap_or_else(|| {
            note("seed", DEFAULT_SEED.to_string());
            DEFAULT_SEED
        });
        let rounds = match raw.rounds {
            Some(r) if *r.get_ref() == 0 => {
                return v.fail(r.span(), "rounds", "must be at least 1")
            }
            Some(r) => r.into_inner(),
            None => {
                note("rounds", "1".into());
                1
            }
        };
        let transport = match raw.transport {
            Some(t) => match t.get_ref().parse() {
                Ok(mode) => mode,
                Err(e) => return v.fail(t.span(), "transport", e),
            },
            None => {
                note("transport", "\"sim\"".into());
                TransportMode::Sim
            }
        };
        let wire = match raw.wire {
            Some(w) => match w.get_ref().parse() {
                Ok(wire) => wire,
                Err(e) => return v.fail(w.span(), "wire", e),
            },
            None => {
                note("wire", "\"binary\"".into());
                WireFormat::Binary
            }
        };
        let gamma = match raw.gamma {
            Some(g) if !(0.0..=1.0).contains(g.get_ref()) => {
                return v.fail(g.span(), "gamma", format!("{} outside [0, 1]", g.get_ref()))
            }
            Some(g) => g.into_inner(),
            None => {
                note("gamma", DEFAULT_GAMMA.to_string());
                DEFAULT_GAMMA
            }
        };
        let gamma_grid = match raw.gamma_grid {
            Some(g) => {
                if g.get_ref().is_empty() {
                    return v.fail(g.span(), "gamma_grid", "must not be empty");
                }
                if let Some(bad) = g.get_ref().iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return v.fail(g.span(), "gamma_grid", format!("{bad} outside [0, 1]"));
                }
                g.into_inner()
            }
            None => {
                note("gamma_grid", "0.50..=1.00 step 0.05".into());
                default_gamma_grid()
            }
        };
        let truth = match raw.truth {
            Some(RawTruth {
                path: Some(path),
                seed: None,
            }) => TruthSource::Csv { path },
            Some(RawTruth {
                path: None,
                seed: Some(seed),
            }) => TruthSource::Synthetic { seed },
            Some(RawTruth {
                path: Some(_),
                seed: Some(_),
            }) => {
                return Err(Error::Config(
                    "truth: give either seed or path, not both".into(),
                ))
            }
            Some(RawTruth {
                path: None,
                seed: None,
            })
            | None => {
                note("truth.seed", DEFAULT_TRUTH_SEED.to_string());
                TruthSource::Synthetic {
                    seed: DEFAULT_TRUTH_SEED,
                }
            }
        };
        let link = match raw.link {
            Some(l) => {
                if let Err(e) = LinkParams::from_units(l.get_ref()) {
                    return v.fail(l.span(), "link", e);
                }
                l.into_inner()
            }
            None => {
                note("link", "reference_loss_db = -30, reference_distance_m = 10, path_loss_exponent = 3, bandwidth_hz = 1e6, tx_power_dbm = 10, noise_preset = \"paper-results\", quantization_bits = 10".into());
                LinkUnits::default()
            }
        };
        let surrogate = match raw.surrogate {
            Some(s) => {
                if let Err(e) = s.get_ref().validate() {
                    return v.fail(s.span(), "surrogate", e);
                }
                s.into_inner()
            }
            None => {
                let d = SurrogateParams::default();
                note(
                    "surrogate",
                    format!("leakage = {}, noise_std = {}", d.leakage, d.noise_std),
                );
                d
            }
        };

        let raw_pairs = raw.pair.expect("checked");
        if raw_pairs.len() > usize::from(u16::MAX) {
            return Err(Error::Config("too many pairs".into()));
        }
        let mut pairs = Vec::with_capacity(raw_pairs.len());
        for (i, rp) in raw_pairs.into_iter().enumerate() {
            let id = PairId(i as u16 + 1);
            let distance = *rp.distance_m.get_ref();
            if !(distance > 0.0 && distance.is_finite()) {
                return v.fail(
                    rp.distance_m.span(),
                    "distance_m",
                    format!("pair {id}: must be positive, got {distance}"),
                );
            }
            let pair_surrogate = match rp.surrogate {
                Some(s) => {
                    if let Err(e) = s.get_ref().validate() {
                        return v.fail(s.span(), "surrogate", format!("pair {id}: {e}"));
                    }
                    s.into_inner()
                }
                None => surrogate,
            };
            let mut owner: Vec<Option<usize>> = vec![None; num_classes];
            let mut init = Vec::new();
            for (k, ri) in rp.init.iter().enumerate() {
                let ranges = match parse_class_ranges(ri.classes.get_ref(), num_classes) {
                    Ok(r) => r,
                    Err(e) => {
                        return v.fail(ri.classes.span(), "classes", format!("pair {id}: {e}"))
                    }
                };
                let class_init = match ri.kind.get_ref().as_str() {
                    "uninformative" => {
                        if ri.sigma.is_some() {
                            return v.fail(
                                ri.kind.span(),
                                "sigma",
                                format!("pair {id}: only noisy classes take sigma"),
                            );
                        }
                        ClassInit::Uninformative
                    }
                    "noisy" => {
                        let sigma = ri.sigma.unwrap_or_else(|| {
                            note(
                                &format!("pair[{i}].init[{k}].sigma"),
                                DEFAULT_NOISY_SIGMA.to_string(),
                            );
                            DEFAULT_NOISY_SIGMA
                        });
                        if !(sigma >= 0.0 && sigma.is_finite()) {
                            return v.fail(
                                ri.kind.span(),
                                "sigma",
                                format!("pair {id}: must be non-negative, got {sigma}"),
                            );
                        }
                        ClassInit::Noisy { sigma }
                    }
                    other => return v.fail(
                        ri.kind.span(),
                        "kind",
                        format!(
                            "pair {id}: unknown kind {other:?} (expected uninformative or noisy)"
                        ),
                    ),
                };
                for (first, last) in ranges {
                    for c in first..=last {
                        let slot = &mut owner[usize::from(c) - 1];
                        if slot.is_some() {
                            return v.fail(
                                ri.classes.span(),
                                "classes",
                                format!("pair {id}: class {c} initialized twice"),
                            );
                        }
                        *slot = Some(k);
                    }
                    init.push(InitRange {
                        first,
                        last,
                        init: class_init,
                    });
                }
            }
            if let Some(c) = owner.iter().position(Option::is_none) {
                return v.fail(
                    rp.distance_m.span(),
                    "init",
                    format!("pair {id}: class {} has no initialization", c + 1),
                );
            }
            pairs.push(PairConfig {
                id,
                distance_m: distance,
                surrogate: pair_surrogate,
                init,
            });
        }

        Ok(ScenarioConfig {
            name: raw.name.unwrap_or_else(|| "scenario".into()),
            num_classes,
            dim,
            samples_per_class,
            seed,
            rounds,
            transport,
            wire,
            gamma,
            gamma_grid,
            training_cr: raw.training_cr,
            testing_cr: raw.testing_cr,
            truth,
            link,
            surrogate,
            pairs,
            defaults_applied: defaults,
            base_dir: None,
        })
    }

    /// The scenario in file form with every field explicit.
    pub fn to_toml(&self) -> Result<String> {
        let sp = |v| Spanned::new(0..0, v);
        let raw = RawScenario {
            name: Some(self.name.clone()),
            classes: Some(sp(self.num_classes)),
            attributes: Some(Spanned::new(0..0, self.dim)),
            test_samples_per_class: Some(Spanned::new(0..0, self.samples_per_class)),
            seed: Some(self.seed),
            rounds: Some(Spanned::new(0..0, self.rounds)),
            transport: Some(Spanned::new(
                0..0,
                match self.transport {
                    TransportMode::Sim => "sim".to_string(),
                    TransportMode::Socket => "socket".to_string(),
                },
            )),
            wire: Some(Spanned::new(
                0..0,
                match self.wire {
                    WireFormat::Binary => "binary".to_string(),
                    WireFormat::Json => "json".to_string(),
                },
            )),
            gamma: Some(Spanned::new(0..0, self.gamma)),
            gamma_grid: Some(Spanned::new(0..0, self.gamma_grid.clone())),
            training_cr: self.training_cr,
            testing_cr: self.testing_cr,
            truth: Some(match &self.truth {
                TruthSource::Synthetic { seed } => RawTruth {
                    seed: Some(*seed),
                    path: None,
                },
                TruthSource::Csv { path } => RawTruth {
                    seed: None,
                    path: Some(self.resolve(path)),
                },
            }),
            link: Some(Spanned::new(0..0, self.link.clone())),
            surrogate: Some(Spanned::new(0..0, self.surrogate)),
            pair: Some(
                self.pairs
                    .iter()
                    .map(|p| RawPair {
                        distance_m: Spanned::new(0..0, p.distance_m),
                        surrogate: Some(Spanned::new(0..0, p.surrogate)),
                        init: p
                            .init
                            .iter()
                            .map(|r| {
                                let (kind, sigma) = match r.init {
                                    ClassInit::Uninformative => ("uninformative", None),
                                    ClassInit::Noisy { sigma } => ("noisy", Some(sigma)),
                                };
                                RawInit {
                                    classes: Spanned::new(0..0, format!("{}-{}", r.first, r.last)),
                                    kind: Spanned::new(0..0, kind.to_string()),
                                    sigma,
                                }
                            })
                            .collect(),
                    })
                    .collect(),
            ),
        };
        toml::to_string(&raw).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn set_noise_preset(&mut self, preset: NoisePreset) {
        self.link.noise_preset = preset;
        self.link.noise_dbm = None;
    }

    pub fn link_params(&self) -> Result<LinkParams> {
        LinkParams::from_units(&self.link)
    }

    pub fn distances(&self) -> BTreeMap<PairId, f64> {
        self.pairs.iter().map(|p| (p.id, p.distance_m)).collect()
    }

    pub fn transport(&self) -> Transport {
        match self.transport {
            TransportMode::Sim => Transport::Sim,
            TransportMode::Socket => Transport::Socket(SocketOptions {
                wire: self.wire,
                ..SocketOptions::default()
            }),
        }
    }

    pub fn truth_table(&self) -> Result<GroundTruthTable> {
        let table = match &self.truth {
            TruthSource::Synthetic { seed } => {
                GroundTruthTable::synthetic(self.num_classes, self.dim, *seed)
            }
            TruthSource::Csv { path } => {
                let path = self.resolve(path);
                let file = fs::File::open(&path).map_err(|source| Error::File {
                    path: path.clone(),
                    source,
                })?;
                GroundTruthTable::from_csv(file)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
        };
        if table.num_classes() != self.num_classes || table.dim() != self.dim {
            return Err(Error::Config(format!(
                "truth table is {}x{}, scenario expects {}x{}",
                table.num_classes(),
                table.dim(),
                self.num_classes,
                self.dim
            )));
        }
        Ok(table)
    }

    /// Untrained pairs holding their initial SKBs.
    pub fn build_pairs(&self, truth: &Arc<GroundTruthTable>) -> Result<Vec<PairState>> {
        self.pairs
            .iter()
            .map(|p| self.build_pair(p, truth))
            .collect()
    }

    pub fn build_pair(
        &self,
        pair: &PairConfig,
        truth: &Arc<GroundTruthTable>,
    ) -> Result<PairState> {
        let pattern = pair.init_pattern(self.num_classes)?;
        let initial = build_initial_skb(&pattern, truth, self.seed, pair.id)?;
        PairState::new(
            pair.id,
            pair.surrogate,
            self.seed,
            Arc::clone(truth),
            initial,
        )
    }
}

/// Reads a scenario file, or the scenario recorded in a run manifest when
/// the path ends in `.json`.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let is_manifest = path.extension().is_some_and(|e| e == "json");
    let toml_text = if is_manifest {
        let manifest: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        manifest
            .get("scenario_toml")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| {
                Error::Config(format!("{}: manifest has no scenario_toml", path.display()))
            })?
            .to_string()
    } else {
        text
    };
    let mut cfg = ScenarioConfig::from_toml_str(&toml_text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    Ok(cfg)
}
