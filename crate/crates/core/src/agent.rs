//! A semantic communication pair driven by a surrogate encoder.
//!
//! The surrogate stands in for a trained semantic encoder. Its prediction for
//! an input of class `m` is
//!
//! ```text
//! clip[(1 − λ) · truth(m) + λ · reference(m) + ε],   ε ~ N(0, σ² I)
//! ```
//!
//! where `reference` is the SKB the pair was last trained with. `λ` measures
//! how strongly the encoder is anchored to its SKB: a pair trained against an
//! uninformative SKB cannot separate classes, one trained against accurate
//! knowledge can.
//!
//! All randomness comes from ChaCha streams keyed by
//! `(master seed, purpose, pair, class, epoch)`, so results do not depend on
//! evaluation order or threading.

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{confusion_from_labels, ClassScores, ConfusionMatrix};
use crate::skb::{nearest_match, update_skb, AttributeVector, ClassId, Skb, SkbRole};
use crate::PairId;

/// Value used for classes a pair knows nothing about.
pub const UNINFORMATIVE_VALUE: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
enum Purpose {
    InitialSkb = 1,
    Prediction = 2,
}

fn stream_rng(seed: u64, purpose: Purpose, pair: PairId, class: ClassId, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = (purpose as u64) << 56
        | u64::from(pair.0) << 40
        | u64::from(class.0) << 24
        | u64::from(epoch & 0x00FF_FFFF);
    rng.set_stream(stream);
    rng
}

/// The dataset's per-class attribute table.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTable {
    entries: Vec<AttributeVector>,
}

impl GroundTruthTable {
    pub fn new(entries: Vec<AttributeVector>) -> Result<Self> {
        let dim = entries.first().ok_or(Error::EmptyKnowledgeBase)?.dim();
        if let Some(bad) = entries.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(GroundTruthTable { entries })
    }

    /// I.i.d. uniform `[0, 1]` attributes.
    pub fn synthetic(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..num_classes)
            .map(|_| {
                AttributeVector::new((0..dim).map(|_| rng.random::<f64>()).collect())
                    .expect("uniform draws are finite")
            })
            .collect();
        GroundTruthTable { entries }
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let skb = Skb::read_csv(reader, SkbRole::Initial)?;
        Self::new(skb.iter().map(|(_, v)| v.clone()).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    pub fn get(&self, class: ClassId) -> &AttributeVector {
        &self.entries[class.index()]
    }

    pub fn to_skb(&self, role: SkbRole) -> Skb {
        Skb::from_vectors(role, self.entries.clone()).expect("table is non-empty and uniform")
    }
}

/// How one class of an initial SKB is filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassInit {
    /// Constant 0.5 vector.
    Uninformative,
    /// Ground truth plus i.i.d. `N(0, sigma²)` noise, clipped.
    Noisy { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPattern {
    classes: Vec<ClassInit>,
}

impl InitPattern {
    pub fn new(classes: Vec<ClassInit>) -> Result<Self> {
        for c in &classes {
            if let ClassInit::Noisy { sigma } = c {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::invalid(
                        "sigma",
                        format!("must be non-negative, got {sigma}"),
                    ));
                }
            }
        }
        Ok(InitPattern { classes })
    }

    pub fn uniform(num_classes: usize, init: ClassInit) -> Self {
        InitPattern {
            classes: vec![init; num_classes],
        }
    }

    /// Overrides classes `first..=last` (1-based).
    pub fn with_range(mut self, first: u16, last: u16, init: ClassInit) -> Self {
        for c in first..=last {
            self.classes[usize::from(c) - 1] = init;
        }
        self
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, class: ClassId) -> ClassInit {
        self.classes[class.index()]
    }
}

pub fn build_initial_skb(
    pattern: &InitPattern,
    truth: &GroundTruthTable,
    seed: u64,
    pair: PairId,
) -> Result<Skb> {
    if pattern.num_classes() != truth.num_classes() {
        return Err(Error::IncompleteSkb {
            role: SkbRole::Initial.as_str(),
            expected: truth.num_classes(),
            found: pattern.num_classes(),
        });
    }
    let dim = truth.dim();
    let vectors = ClassId::all(truth.num_classes())
        .map(|class| match pattern.get(class) {
            ClassInit::Uninformative => Ok(AttributeVector::constant(dim, UNINFORMATIVE_VALUE)),
            ClassInit::Noisy { sigma: 0.0 } => Ok(truth.get(class).clone()),
            ClassInit::Noisy { sigma } => {
                let mut rng = stream_rng(seed, Purpose::InitialSkb, pair, class, 0);
                let values = truth
                    .get(class)
                    .values()
                    .iter()
                    .map(|t| t + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                AttributeVector::new(values)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Skb::from_vectors(SkbRole::Initial, vectors)
}

/// Surrogate encoder parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateParams {
    /// λ: weight of the training reference in the prediction center.
    pub leakage: f64,
    /// σ_s: per-attribute prediction noise.
    pub noise_std: f64,
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.leakage) {
            return Err(Error::invalid(
                "leakage",
                format!("must lie in [0, 1], got {}", self.leakage),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(
                "noise_std",
                format!("must be non-negative, got {}", self.noise_std),
            ));
        }
        Ok(())
    }
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            leakage: 0.85,
            noise_std: 0.475,
        }
    }
}

/// Output of one local evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub updated: Skb,
    pub confusion: ConfusionMatrix,
    pub scores: ClassScores,
}

#[derive(Clone, Debug)]
pub struct PairState {
    id: PairId,
    params: SurrogateParams,
    seed: u64,
    truth: Arc<GroundTruthTable>,
    reference: Option<Skb>,
    local: Skb,
    epoch: u32,
    scores: Option<ClassScores>,
}

impl PairState {
    pub fn new(
        id: PairId,
        params: SurrogateParams,
        seed: u64,
        truth: Arc<GroundTruthTable>,
        initial: Skb,
    ) -> Result<Self> {
        params.validate()?;
        if id.0 == 0 {
            return Err(Error::invalid("pair", "pair ids start at 1"));
        }
        check_shape(&initial, &truth)?;
        Ok(PairState {
            id,
            params,
            seed,
            truth,
            reference: None,
            local: initial,
            epoch: 0,
            scores: None,
        })
    }

    pub fn id(&self) -> PairId {
        self.id
    }

    pub fn params(&self) -> SurrogateParams {
        self.params
    }

    pub fn truth(&self) -> &GroundTruthTable {
        &self.truth
    }

    /// The SKB the surrogate was last trained with.
    pub fn reference(&self) -> Option<&Skb> {
        self.reference.as_ref()
    }

    /// Current local SKB: the training reference right after training, the
    /// averaged predictions after evaluation.
    pub fn local(&self) -> &Skb {
        &self.local
    }

    /// Scores from the most recent evaluation.
    pub fn scores(&self) -> Option<&ClassScores> {
        self.scores.as_ref()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn num_classes(&self) -> usize {
        self.truth.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.truth.dim()
    }

    /// (Re)trains the surrogate against `reference`, which also becomes the
    /// local SKB used for matching. Every call starts a fresh noise epoch.
    pub fn train_surrogate(&mut self, reference: Skb) -> Result<()> {
        if !reference.is_complete() {
            return Err(Error::PartialReference {
                missing: reference.missing_classes(),
            });
        }
        check_shape(&reference, &self.truth)?;
        self.local = reference.clone();
        self.reference = Some(reference);
        self.epoch += 1;
        Ok(())
    }

    pub fn predict(&self, class: ClassId, n_samples: usize) -> Result<Vec<AttributeVector>> {
        let reference = self
            .reference
            .as_ref()
            .ok_or(Error::UntrainedPair(self.id))?;
        class.check(self.num_classes())?;
        let lambda = self.params.leakage;
        let center: Vec<f64> = self
            .truth
            .get(class)
            .values()
            .iter()
            .zip(
                reference
                    .get(class)
                    .expect("reference is complete")
                    .values(),
            )
            .map(|(t, r)| (1.0 - lambda) * t + lambda * r)
            .collect();
        let sigma = self.params.noise_std;
        if sigma == 0.0 {
            let v = AttributeVector::new(center)?;
            return Ok(vec![v; n_samples]);
        }
        let mut rng = stream_rng(self.seed, Purpose::Prediction, self.id, class, self.epoch);
        (0..n_samples)
            .map(|_| {
                AttributeVector::new(
                    center
                        .iter()
                        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect()
    }

    /// Classifies `samples_per_class` predictions per class against the local
    /// SKB, scores them, and replaces the local SKB with the per-class means.
    pub fn evaluate_and_update(&mut self, samples_per_class: usize) -> Result<Evaluation> {
        if self.reference.is_none() {
            return Err(Error::UntrainedPair(self.id));
        }
        if samples_per_class == 0 {
            return Err(Error::invalid(
                "test_samples_per_class",
                "must be at least 1",
            ));
        }
        let m = self.num_classes();
        let mut predictions = BTreeMap::new();
        let mut actual = Vec::with_capacity(m * samples_per_class);
        let mut predicted = Vec::with_capacity(m * samples_per_class);
        for class in ClassId::all(m) {
            let samples = self.predict(class, samples_per_class)?;
            for s in &samples {
                actual.push(class);
                predicted.push(nearest_match(s, &self.local)?.0);
            }
            predictions.insert(class, samples);
        }
        let confusion = confusion_from_labels(&actual, &predicted, m)?;
        let scores = ClassScores::from_confusion(&confusion);
        let updated = update_skb(&predictions, m)?;
        self.local = updated.clone();
        self.scores = Some(scores.clone());
        Ok(Evaluation {
            updated,
            confusion,
            scores,
        })
    }
}

fn check_shape(skb: &Skb, truth: &GroundTruthTable) -> Result<()> {
    if skb.num_classes() != truth.num_classes() {
        return Err(Error::IncompleteSkb {
            role: skb.role().as_str(),
            expected: truth.num_classes(),
            found: skb.num_classes(),
        });
    }
    if skb.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            found: skb.dim(),
        });
    }
    Ok(())
}
