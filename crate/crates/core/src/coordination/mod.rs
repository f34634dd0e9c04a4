//! Score-based knowledge selection, max-F1 aggregation and the cooperation
//! round protocol.

mod round;
pub mod transport;
pub mod wire;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ClassScores;
use crate::skb::{AttributeVector, ClassId, Skb, SkbRole};
use crate::PairId;

pub use round::{
    apply_broadcast, prepare_upload, run_cooperation_round, PairRoundReport, PairRoundResult,
    RoundContext, RoundOutcome, RoundServer, ServerRoundReport,
};
pub use transport::Transport;
pub use wire::{RoundMessage, WireFormat};

/// One class of knowledge sent by a pair: its F1 score and attribute vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeUpload {
    pub pair: PairId,
    pub class: ClassId,
    pub f1: f64,
    pub vector: AttributeVector,
}

/// Picks every class whose F1 strictly exceeds `gamma`.
pub fn select_knowledge(
    pair: PairId,
    local: &Skb,
    scores: &ClassScores,
    gamma: f64,
) -> Result<Vec<KnowledgeUpload>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidThreshold(gamma));
    }
    if scores.num_classes() != local.num_classes() {
        return Err(Error::IncompleteSkb {
            role: "scores",
            expected: local.num_classes(),
            found: scores.num_classes(),
        });
    }
    let mut selected = Vec::new();
    for (i, score) in scores.per_class.iter().enumerate() {
        if score.f1 > gamma {
            let class = ClassId::from_index(i);
            let vector = local.get(class).ok_or(Error::NoSamples(class))?.clone();
            selected.push(KnowledgeUpload {
                pair,
                class,
                f1: score.f1,
                vector,
            });
        }
    }
    Ok(selected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalEntry {
    pub vector: AttributeVector,
    pub f1: f64,
    pub source: PairId,
}

/// Server-side knowledge base: the best-scoring upload per class. Classes
/// nobody uploaded are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalSkb {
    entries: BTreeMap<ClassId, GlobalEntry>,
}

impl GlobalSkb {
    pub fn get(&self, class: ClassId) -> Option<&GlobalEntry> {
        self.entries.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &GlobalEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_complete(&self, num_classes: usize) -> bool {
        ClassId::all(num_classes).all(|c| self.entries.contains_key(&c))
    }

    /// Entries as uploads, with the source pair as uploader.
    pub fn to_uploads(&self) -> Vec<KnowledgeUpload> {
        self.iter()
            .map(|(class, e)| KnowledgeUpload {
                pair: e.source,
                class,
                f1: e.f1,
                vector: e.vector.clone(),
            })
            .collect()
    }

    pub fn to_skb(&self, num_classes: usize, dim: usize) -> Result<Skb> {
        let entries = self.iter().map(|(c, e)| (c, e.vector.clone())).collect();
        Skb::new(SkbRole::Global, num_classes, dim, entries)
    }

    /// Global entries where present, `local` entries elsewhere.
    pub fn merged_with(&self, local: &Skb) -> Result<Skb> {
        let mut entries = BTreeMap::new();
        for class in ClassId::all(local.num_classes()) {
            let vector = match self.entries.get(&class) {
                Some(e) => {
                    if e.vector.dim() != local.dim() {
                        return Err(Error::DimensionMismatch {
                            expected: local.dim(),
                            found: e.vector.dim(),
                        });
                    }
                    e.vector.clone()
                }
                None => local
                    .get(class)
                    .ok_or(Error::PartialReference {
                        missing: vec![class],
                    })?
                    .clone(),
            };
            entries.insert(class, vector);
        }
        if let Some(extra) = self
            .entries
            .keys()
            .find(|c| c.index() >= local.num_classes())
        {
            extra.check(local.num_classes())?;
        }
        Skb::new(SkbRole::Global, local.num_classes(), local.dim(), entries)
    }
}

// Higher F1 wins; ties go to the lower pair id, then to the lexicographically
// smaller vector so the result never depends on arrival order.
fn beats(candidate: &KnowledgeUpload, current: &GlobalEntry) -> bool {
    match candidate.f1.total_cmp(&current.f1) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match candidate.pair.cmp(&current.source) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => {
                let a = candidate.vector.values();
                let b = current.vector.values();
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(a.len().cmp(&b.len()))
                    == Ordering::Less
            }
        },
    }
}

pub fn aggregate_global(uploads: &[KnowledgeUpload]) -> GlobalSkb {
    let mut entries: BTreeMap<ClassId, GlobalEntry> = BTreeMap::new();
    for upload in uploads {
        let replace = entries
            .get(&upload.class)
            .is_none_or(|current| beats(upload, current));
        if replace {
            entries.insert(
                upload.class,
                GlobalEntry {
                    vector: upload.vector.clone(),
                    f1: upload.f1,
                    source: upload.pair,
                },
            );
        }
    }
    GlobalSkb { entries }
}
