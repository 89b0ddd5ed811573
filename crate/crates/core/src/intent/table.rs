use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Intent, IntentError, Label};
use crate::appliance::{is_slave_address, ApplianceKind, NodeAddress};

/// Action class a keyword maps to before levels and negation are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActionClass {
    On,
    Off,
    Set,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplianceSlot {
    pub id: u8,
    pub kind: ApplianceKind,
}

/// Keyword tables, room map, registered node appliances and scenes.
///
/// The JSON form keys `nodes` by decimal address:
/// `{"1": [{"id": 1, "kind": "LIGHT"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub devices: BTreeMap<String, ApplianceKind>,
    pub actions: BTreeMap<String, ActionClass>,
    pub locations: BTreeMap<String, NodeAddress>,
    pub fan_levels: BTreeMap<String, u8>,
    #[serde(default = "default_negations")]
    pub negations: Vec<String>,
    #[serde(default)]
    pub scenes: BTreeMap<Label, Vec<Intent>>,
    #[serde(default)]
    pub nodes: BTreeMap<NodeAddress, Vec<ApplianceSlot>>,
}

fn default_negations() -> Vec<String> {
    ["don't", "dont", "not", "never"].map(String::from).to_vec()
}

const BUNDLED_TABLE: &str = include_str!("../../data/table.json");

impl Default for LookupTable {
    fn default() -> Self {
        Self::from_json(BUNDLED_TABLE).expect("bundled lookup table is valid")
    }
}

impl LookupTable {
    pub fn from_json(text: &str) -> Result<Self, IntentError> {
        let table: LookupTable = serde_json::from_str(text).map_err(|e| IntentError::Table(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, IntentError> {
        let text = std::fs::read_to_string(path).map_err(|e| IntentError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), IntentError> {
        for (name, addr) in &self.locations {
            if !is_slave_address(*addr) {
                return Err(IntentError::Table(format!("location {name:?} maps to invalid node {addr}")));
            }
        }
        for (word, level) in &self.fan_levels {
            if !ApplianceKind::Fan.accepts(u32::from(*level)) {
                return Err(IntentError::Table(format!("fan level {word:?} = {level} outside 0..=3")));
            }
        }
        for (label, entries) in &self.scenes {
            for entry in entries {
                entry
                    .validate()
                    .map_err(|e| IntentError::Table(format!("scene {label:?}: {e}")))?;
            }
        }
        for (addr, slots) in &self.nodes {
            if !is_slave_address(*addr) {
                return Err(IntentError::Table(format!("node {addr} outside 1..=254")));
            }
            let mut ids: Vec<u8> = slots.iter().map(|s| s.id).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(IntentError::Table(format!("node {addr} repeats an appliance id")));
            }
        }
        Ok(())
    }

    pub fn appliance_kind(&self, node: NodeAddress, appliance: u8) -> Option<ApplianceKind> {
        self.nodes.get(&node)?.iter().find(|s| s.id == appliance).map(|s| s.kind)
    }

    /// Replaces the registered node appliances.
    pub fn with_nodes(mut self, nodes: BTreeMap<NodeAddress, Vec<ApplianceSlot>>) -> Self {
        self.nodes = nodes;
        self
    }
}
