//! Comparison schemes. Each exposes its relay lists through [`RelayPolicy`]
//! so latency differences come from the list choice alone.

pub mod blockp2p;
pub mod mercury;
pub mod perigee;
pub mod random;
pub mod vivaldi;

use serde::{Deserialize, Serialize};

use crate::overlay::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "random8")]
    Random8,
    #[serde(rename = "blockp2p8")]
    BlockP2P8,
    #[serde(rename = "perigee8")]
    Perigee8,
    #[serde(rename = "mercury")]
    Mercury,
    #[serde(rename = "blocksdnvc_noburst")]
    BlockSdnNoBurst,
    #[serde(rename = "blocksdnvc_full")]
    BlockSdnFull,
    /// Every node relays to all peers on first receipt, without batching.
    #[serde(rename = "flood")]
    Flood,
}

impl SchemeId {
    pub const TABLE: [SchemeId; 6] = [
        SchemeId::BlockSdnFull,
        SchemeId::BlockSdnNoBurst,
        SchemeId::Mercury,
        SchemeId::Perigee8,
        SchemeId::BlockP2P8,
        SchemeId::Random8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::Random8 => "random8",
            SchemeId::BlockP2P8 => "blockp2p8",
            SchemeId::Perigee8 => "perigee8",
            SchemeId::Mercury => "mercury",
            SchemeId::BlockSdnNoBurst => "blocksdnvc_noburst",
            SchemeId::BlockSdnFull => "blocksdnvc_full",
            SchemeId::Flood => "flood",
        }
    }

    pub fn parse(s: &str) -> Option<SchemeId> {
        [SchemeId::Flood]
            .into_iter()
            .chain(Self::TABLE)
            .find(|id| id.name() == s)
    }

    pub fn uses_controller(self) -> bool {
        matches!(self, SchemeId::BlockSdnNoBurst | SchemeId::BlockSdnFull)
    }

    /// Peers report their own coordinates, so coordinate forgery applies.
    pub fn is_decentralized_vcs(self) -> bool {
        self == SchemeId::Mercury
    }
}

impl std::fmt::Display for SchemeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Source of per-node relay lists.
pub trait RelayPolicy {
    fn relay_list(&self, v: NodeId) -> &[NodeId];
}

/// Fixed per-node lists.
#[derive(Debug, Clone)]
pub struct StaticLists(pub Vec<Vec<NodeId>>);

impl RelayPolicy for StaticLists {
    fn relay_list(&self, v: NodeId) -> &[NodeId] {
        &self.0[v.idx()]
    }
}
