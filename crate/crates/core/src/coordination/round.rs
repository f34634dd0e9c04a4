use std::collections::{BTreeMap, BTreeSet};

use super::transport::Transport;
use super::wire::RoundMessage;
use super::{aggregate_global, select_knowledge, GlobalSkb, KnowledgeUpload};
use crate::agent::PairState;
use crate::channel::{LinkParams, UplinkStats};
use crate::error::{Error, Result};
use crate::metrics::ClassScores;
use crate::skb::{Skb, SkbRole};
use crate::PairId;

/// Everything a round needs besides the pairs themselves.
#[derive(Clone, Debug)]
pub struct RoundContext {
    pub gamma: f64,
    pub samples_per_class: usize,
    pub link: LinkParams,
    /// Transmitter-to-server distance per pair, in meters.
    pub distances: BTreeMap<PairId, f64>,
}

/// Client side, first half: select knowledge from the last evaluation.
pub fn prepare_upload(state: &PairState, gamma: f64, round: u32) -> Result<RoundMessage> {
    let scores = state.scores().ok_or(Error::UntrainedPair(state.id()))?;
    let uploads = select_knowledge(state.id(), state.local(), scores, gamma)?;
    Ok(RoundMessage::UploadBatch {
        round,
        pair: state.id(),
        uploads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRoundResult {
    pub pair: PairId,
    pub before: ClassScores,
    pub after: ClassScores,
    pub enhanced: Skb,
}

/// Client side, second half: finetune on the global SKB (own entries fill
/// the gaps) and re-evaluate.
pub fn apply_broadcast(
    state: &mut PairState,
    global: &GlobalSkb,
    samples_per_class: usize,
) -> Result<PairRoundResult> {
    let before = state
        .scores()
        .cloned()
        .ok_or(Error::UntrainedPair(state.id()))?;
    let reference = global.merged_with(state.local())?;
    state.train_surrogate(reference)?;
    let eval = state.evaluate_and_update(samples_per_class)?;
    Ok(PairRoundResult {
        pair: state.id(),
        before,
        after: eval.scores,
        enhanced: eval.updated.with_role(SkbRole::Enhanced)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerRoundReport {
    pub round: u32,
    pub global: GlobalSkb,
    /// Number of classes each pair uploaded.
    pub uploaded: BTreeMap<PairId, usize>,
}

/// Server state for one round: gathers one upload batch per pair, then one
/// barrier per pair once the global SKB has gone out.
#[derive(Debug)]
pub struct RoundServer {
    round: u32,
    expected: BTreeSet<PairId>,
    num_classes: usize,
    dim: usize,
    batches: BTreeMap<PairId, Vec<KnowledgeUpload>>,
    barriers: BTreeSet<PairId>,
}

impl RoundServer {
    pub fn new(
        round: u32,
        expected: impl IntoIterator<Item = PairId>,
        num_classes: usize,
        dim: usize,
    ) -> Self {
        RoundServer {
            round,
            expected: expected.into_iter().collect(),
            num_classes,
            dim,
            batches: BTreeMap::new(),
            barriers: BTreeSet::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn accept(&mut self, msg: RoundMessage) -> Result<()> {
        if msg.round() != self.round {
            return Err(Error::StaleRound {
                round: self.round,
                got: msg.round(),
            });
        }
        match msg {
            RoundMessage::UploadBatch { pair, uploads, .. } => {
                self.check_pair(pair)?;
                if self.batches.contains_key(&pair) {
                    return Err(Error::Protocol(format!("pair {pair} uploaded twice")));
                }
                let mut seen = BTreeSet::new();
                for u in &uploads {
                    if u.pair != pair {
                        return Err(Error::Protocol(format!(
                            "batch from pair {pair} carries an upload from pair {}",
                            u.pair
                        )));
                    }
                    u.class.check(self.num_classes)?;
                    if !seen.insert(u.class) {
                        return Err(Error::Protocol(format!(
                            "pair {pair} uploaded class {} twice",
                            u.class
                        )));
                    }
                    if u.vector.dim() != self.dim {
                        return Err(Error::DimensionMismatch {
                            expected: self.dim,
                            found: u.vector.dim(),
                        });
                    }
                    if !(0.0..=1.0).contains(&u.f1) {
                        return Err(Error::Protocol(format!("f1 {} outside [0, 1]", u.f1)));
                    }
                }
                self.batches.insert(pair, uploads);
            }
            RoundMessage::RoundBarrier { pair, .. } => {
                self.check_pair(pair)?;
                if !self.uploads_complete() {
                    return Err(Error::Protocol(format!(
                        "barrier from pair {pair} before all uploads arrived"
                    )));
                }
                if !self.barriers.insert(pair) {
                    return Err(Error::Protocol(format!("pair {pair} sent two barriers")));
                }
            }
            RoundMessage::GlobalBroadcast { .. } => {
                return Err(Error::Protocol("server received a global broadcast".into()));
            }
        }
        Ok(())
    }

    fn check_pair(&self, pair: PairId) -> Result<()> {
        if !self.expected.contains(&pair) {
            return Err(Error::Protocol(format!("unexpected pair {pair}")));
        }
        Ok(())
    }

    pub fn uploads_complete(&self) -> bool {
        self.batches.len() == self.expected.len()
    }

    pub fn barrier_complete(&self) -> bool {
        self.barriers.len() == self.expected.len()
    }

    pub fn global(&self) -> GlobalSkb {
        let all: Vec<KnowledgeUpload> = self.batches.values().flatten().cloned().collect();
        aggregate_global(&all)
    }

    pub fn broadcast(&self) -> RoundMessage {
        RoundMessage::GlobalBroadcast {
            round: self.round,
            global: self.global(),
        }
    }

    pub fn report(&self) -> ServerRoundReport {
        ServerRoundReport {
            round: self.round,
            global: self.global(),
            uploaded: self.batches.iter().map(|(p, b)| (*p, b.len())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRoundReport {
    pub pair: PairId,
    pub before: ClassScores,
    pub after: ClassScores,
    pub uplink: UplinkStats,
    pub enhanced: Skb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    pub gamma: f64,
    pub global: GlobalSkb,
    pub pairs: Vec<PairRoundReport>,
}

/// One cooperation round: selection, upload, aggregation, broadcast,
/// finetuning and re-evaluation. Pairs must already be trained and evaluated.
pub fn run_cooperation_round(
    pairs: &mut [PairState],
    round: u32,
    ctx: &RoundContext,
    transport: &Transport,
) -> Result<RoundOutcome> {
    if !(0.0..=1.0).contains(&ctx.gamma) {
        return Err(Error::InvalidThreshold(ctx.gamma));
    }
    if let Some(p) = pairs.iter().find(|p| p.scores().is_none()) {
        return Err(Error::UntrainedPair(p.id()));
    }
    let (server, results) = transport.execute_round(pairs, round, ctx)?;
    let dim = pairs.first().map_or(0, PairState::dim);
    let mut reports = Vec::with_capacity(results.len());
    for result in results {
        let uploaded = server.uploaded.get(&result.pair).copied().unwrap_or(0);
        let distance = *ctx
            .distances
            .get(&result.pair)
            .ok_or_else(|| Error::Config(format!("no distance for pair {}", result.pair)))?;
        reports.push(PairRoundReport {
            pair: result.pair,
            uplink: UplinkStats::compute(result.pair, uploaded, dim, distance, &ctx.link)?,
            before: result.before,
            after: result.after,
            enhanced: result.enhanced,
        });
    }
    reports.sort_by_key(|r| r.pair);
    Ok(RoundOutcome {
        round,
        gamma: ctx.gamma,
        global: server.global,
        pairs: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skb::{AttributeVector, ClassId};

    fn batch(round: u32, pair: u16, classes: &[u16]) -> RoundMessage {
        RoundMessage::UploadBatch {
            round,
            pair: PairId(pair),
            uploads: classes
                .iter()
                .map(|&c| KnowledgeUpload {
                    pair: PairId(pair),
                    class: ClassId(c),
                    f1: 0.9,
                    vector: AttributeVector::constant(2, 0.3),
                })
                .collect(),
        }
    }

    #[test]
    fn server_barrier_sequence() {
        let mut s = RoundServer::new(1, [PairId(1), PairId(2)], 4, 2);
        s.accept(batch(1, 1, &[1, 2])).unwrap();
        assert!(!s.uploads_complete());
        assert!(s
            .accept(RoundMessage::RoundBarrier {
                round: 1,
                pair: PairId(1)
            })
            .is_err());
        s.accept(batch(1, 2, &[])).unwrap();
        assert!(s.uploads_complete());
        assert_eq!(s.global().len(), 2);
        s.accept(RoundMessage::RoundBarrier {
            round: 1,
            pair: PairId(2),
        })
        .unwrap();
        s.accept(RoundMessage::RoundBarrier {
            round: 1,
            pair: PairId(1),
        })
        .unwrap();
        assert!(s.barrier_complete());
        let report = s.report();
        assert_eq!(report.uploaded[&PairId(1)], 2);
        assert_eq!(report.uploaded[&PairId(2)], 0);
    }

    #[test]
    fn server_rejects_bad_messages() {
        let mut s = RoundServer::new(2, [PairId(1)], 4, 2);
        assert!(matches!(
            s.accept(batch(1, 1, &[1])),
            Err(Error::StaleRound { round: 2, got: 1 })
        ));
        assert!(s.accept(batch(2, 9, &[1])).is_err());
        assert!(s.accept(batch(2, 1, &[1, 1])).is_err());
        assert!(s.accept(batch(2, 1, &[5])).is_err());
        s.accept(batch(2, 1, &[1])).unwrap();
        assert!(s.accept(batch(2, 1, &[2])).is_err());
        assert!(s.accept(s.broadcast()).is_err());
    }
}
