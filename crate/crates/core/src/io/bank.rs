//! Prototype bank files: JSON with the vectors inline, ordered background
//! first. The same format carries raw (extracted) and fused banks, since
//! fusion preserves the modality and slot labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prediction::{BankEntry, PrototypeBank};
use crate::prototype::{Modality, PrototypeEntry, PrototypeSet};
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankFile {
    /// Prototypes per modality the bank was built for (slot-weight layout).
    pub n: usize,
    pub classes: Vec<BankClass>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankClass {
    pub id: ClassId,
    pub entries: Vec<PrototypeEntry>,
}

impl BankFile {
    pub fn from_sets(n: usize, sets: &[PrototypeSet]) -> Self {
        BankFile {
            n,
            classes: sets
                .iter()
                .map(|s| BankClass {
                    id: s.class_id,
                    entries: s.entries.clone(),
                })
                .collect(),
        }
    }

    pub fn to_sets(&self) -> Vec<PrototypeSet> {
        self.classes
            .iter()
            .map(|c| PrototypeSet {
                class_id: c.id,
                entries: c.entries.clone(),
            })
            .collect()
    }

    /// Flattens into a prediction bank; visual slots shift by `n` into the
    /// upper half of the slot-weight vector.
    pub fn to_prototype_bank(&self) -> Result<PrototypeBank> {
        let mut entries = Vec::new();
        for (class_index, class) in self.classes.iter().enumerate() {
            for e in &class.entries {
                let slot = match e.modality {
                    Modality::Textual => e.slot,
                    Modality::Visual => self.n + e.slot,
                };
                if slot >= 2 * self.n {
                    return Err(Error::shape(format!(
                        "slot {} of class {} exceeds the 2n = {} layout",
                        e.slot,
                        class.id,
                        2 * self.n
                    )));
                }
                entries.push(BankEntry {
                    class_index,
                    slot,
                    vector: e.vector.clone(),
                });
            }
        }
        Ok(PrototypeBank {
            classes: self.classes.iter().map(|c| c.id).collect(),
            entries,
        })
    }
}

pub fn save_bank(path: impl AsRef<Path>, bank: &BankFile) -> Result<()> {
    let text = serde_json::to_string_pretty(bank).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<BankFile> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("bank file: {e}")))
}
