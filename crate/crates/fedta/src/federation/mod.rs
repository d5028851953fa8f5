//! Clients, server, messages, and the round loop tying them together.

pub mod client;
pub mod messages;
pub mod round;
pub mod server;

use serde::{Deserialize, Serialize};

use crate::federation::client::InferenceRule;

/// Which training and aggregation pathway a run uses. The ablations differ
/// from the full method by exactly one switch; the two baselines train only
/// a linear head on raw frozen features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fedta,
    /// Features used as-is, anchors untrained.
    FedtaNoTa,
    /// Knowledge bases averaged instead of distilled.
    FedtaNoSikf,
    /// Global prototypes averaged per class instead of elected, never fixed.
    FedtaNoBgps,
    /// Linear head on raw features, heads averaged each round.
    FedavgHead,
    /// Linear head on raw features, nothing aggregated.
    FrozenHead,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fedta,
        Method::FedtaNoTa,
        Method::FedtaNoSikf,
        Method::FedtaNoBgps,
        Method::FedavgHead,
        Method::FrozenHead,
    ];

    /// The kebab-case name used in serialized form and directory paths.
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedta => "fedta",
            Method::FedtaNoTa => "fedta-no-ta",
            Method::FedtaNoSikf => "fedta-no-sikf",
            Method::FedtaNoBgps => "fedta-no-bgps",
            Method::FedavgHead => "fedavg-head",
            Method::FrozenHead => "frozen-head",
        }
    }

    pub fn uses_enhancement(self) -> bool {
        !matches!(self, Method::FedavgHead | Method::FrozenHead)
    }

    pub fn uses_anchor(self) -> bool {
        matches!(self, Method::Fedta | Method::FedtaNoSikf | Method::FedtaNoBgps)
    }

    pub fn is_fedta_variant(self) -> bool {
        !matches!(self, Method::FedavgHead | Method::FrozenHead)
    }

    /// Baselines have no prototypes to classify with.
    pub fn forced_rule(self) -> Option<InferenceRule> {
        match self {
            Method::FedavgHead | Method::FrozenHead => Some(InferenceRule::HeadLogits),
            _ => None,
        }
    }
}
