//! Round protocol messages. Everything a client sends or receives is a value
//! object serializable to a versioned JSON envelope; uploads carry knowledge
//! bases and class prototypes, never samples.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchor::PrototypeTable;
use crate::enhancement::KnowledgeBase;
use crate::error::{Error, Result};
use crate::numkit::Vector;

pub const PROTOCOL_VERSION: u32 = 1;

/// Wire wrapper carrying the protocol version and round counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub version: u32,
    pub round: usize,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Envelope<T> {
    pub fn new(round: usize, payload: T) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            round,
            payload,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let envelope: Envelope<T> = serde_json::from_str(s)?;
        if envelope.version != PROTOCOL_VERSION {
            return Err(Error::Config(format!(
                "unsupported protocol version {}, expected {PROTOCOL_VERSION}",
                envelope.version
            )));
        }
        Ok(envelope)
    }
}

/// What a client uploads after finishing a task: its trained knowledge base
/// and the per-class prototypes of the task it just saw.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub kb: KnowledgeBase,
    pub local_prototypes: PrototypeTable,
}

/// One elected prototype. Once `fixed` is set the vector never changes again.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalPrototype {
    pub vector: Vector,
    pub fixed: bool,
}

/// Server-held per-class prototypes with their fixed flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlobalPrototypeTable(BTreeMap<u32, GlobalPrototype>);

impl GlobalPrototypeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: u32, prototype: GlobalPrototype) -> Result<()> {
        prototype.vector.validate()?;
        if prototype.vector.norm() == 0.0 {
            return Err(Error::ZeroNorm {
                context: "global prototype",
            });
        }
        self.0.insert(class, prototype);
        Ok(())
    }

    pub fn get(&self, class: u32) -> Option<&GlobalPrototype> {
        self.0.get(&class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &GlobalPrototype)> {
        self.0.iter()
    }

    pub fn is_fixed(&self, class: u32) -> bool {
        self.0.get(&class).map_or(false, |p| p.fixed)
    }

    pub fn fixed_classes(&self) -> Vec<u32> {
        self.0
            .iter()
            .filter(|(_, p)| p.fixed)
            .map(|(c, _)| *c)
            .collect()
    }

    /// The vectors alone, for scoring and for the contrastive term.
    pub fn vectors(&self) -> Result<PrototypeTable> {
        let mut table = PrototypeTable::new();
        for (class, p) in &self.0 {
            table.insert(*class, p.vector.clone())?;
        }
        Ok(table)
    }
}

/// What the server distributes after aggregation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalState {
    pub round: usize,
    pub kb: KnowledgeBase,
    pub prototypes: GlobalPrototypeTable,
}
