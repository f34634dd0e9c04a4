//! Cooperative semantic knowledge base (SKB) updates for multiple semantic
//! communication pairs.
//!
//! Each pair keeps a local SKB of class-level attribute vectors. Pairs score
//! their own knowledge per class with F1, upload the classes they understand
//! well, and a server keeps the best-scoring vector per class as a global SKB
//! that every pair then uses to refine its own.
//!
//! The crate is split along those lines:
//!
//! * [`skb`]: attribute vectors, knowledge bases, nearest matching, and the
//!   mean-of-predictions local update.
//! * [`metrics`]: confusion matrices, per-class precision/recall/F1, macro F1.
//! * [`agent`]: a pair with a parametric surrogate encoder in place of a
//!   trained network.
//! * [`coordination`]: knowledge selection, max-F1 aggregation, the round
//!   protocol and its two transports.
//! * [`channel`]: uplink path loss, Shannon rate, payload size and latency.
//! * [`scenario`] and [`harness`]: configuration, γ sweeps and CSV reports.

pub mod agent;
pub mod channel;
pub mod coordination;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod scenario;
pub mod skb;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use skb::{AttributeVector, ClassId, Skb, SkbRole};

/// 1-based identifier of a semantic communication pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairId(pub u16);

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}
