use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Intent, IntentAction, LookupTable, SentimentScore};
use crate::appliance::{ControlWord, NodeAddress, Opcode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedIntent {
    pub intent: Intent,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Resolution {
    /// Ascending by (node, appliance); later intents overwrite earlier ones.
    pub words: Vec<ControlWord>,
    pub dropped: Vec<DroppedIntent>,
}

fn opcode_and_value(intent: &Intent) -> (Opcode, u8) {
    match intent.action {
        IntentAction::On => (Opcode::On, 0),
        IntentAction::Off => (Opcode::Off, 0),
        IntentAction::SetLevel => (Opcode::SetLevel, intent.level.unwrap_or(0)),
    }
}

/// Expands one intent into words keyed by (node, appliance).
fn expand(
    intent: &Intent,
    table: &LookupTable,
    out: &mut BTreeMap<(NodeAddress, u8), ControlWord>,
) -> Result<(), String> {
    let nodes: Vec<NodeAddress> = match &intent.location {
        Some(name) => match table.locations.get(name) {
            Some(addr) => vec![*addr],
            None => return Err(format!("unknown location {name:?}")),
        },
        None => table.nodes.keys().copied().collect(),
    };
    let (opcode, value) = opcode_and_value(intent);
    let mut matched = false;
    for node in nodes {
        let Some(slots) = table.nodes.get(&node) else { continue };
        for slot in slots.iter().filter(|s| s.kind == intent.device) {
            matched = true;
            out.insert((node, slot.id), ControlWord::new(node, slot.id, opcode, value));
        }
    }
    if matched {
        Ok(())
    } else {
        Err(match &intent.location {
            Some(name) => format!("no {} registered at {name:?}", intent.device),
            None => format!("no node has a {}", intent.device),
        })
    }
}

/// Maps intents (or, if there are none, the scene for the sentiment label)
/// onto registered appliances.
pub fn resolve(intents: &[Intent], sentiment: &SentimentScore, table: &LookupTable) -> Resolution {
    let mut words = BTreeMap::new();
    let mut dropped = Vec::new();
    if intents.is_empty() {
        for entry in table.scenes.get(&sentiment.label).into_iter().flatten() {
            // Scenes apply to whatever matches; a scene entry with no
            // matching appliance is not an error.
            let _ = expand(entry, table, &mut words);
        }
    } else {
        for intent in intents {
            if let Err(reason) = expand(intent, table, &mut words) {
                tracing::debug!(%reason, "intent dropped");
                dropped.push(DroppedIntent { intent: intent.clone(), reason });
            }
        }
    }
    Resolution { words: words.into_values().collect(), dropped }
}
