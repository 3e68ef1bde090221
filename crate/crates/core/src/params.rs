//! Named model parameters partitioned into the `att` (gate) and `main` groups.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Parameter partition used by gradient routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Hard-attention gate raw weights.
    Att,
    /// Everything else.
    Main,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Att => "att",
            Group::Main => "main",
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Array,
}

/// Ordered parameter collection. Every store (including each clone) has a
/// distinct instance id so graphs can tell stores apart.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
}

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(0);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: next_uid(),
            params: Vec::new(),
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            params: self.params.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Array) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_in(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites every parameter value from `other`, which must have the
    /// same names and shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::StateMismatch(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::StateMismatch(format!(
                    "parameter `{}` {:?} vs `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradient arrays keyed by parameter id. Each entry has its parameter's shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<ParamId, Array>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Array) {
        self.entries.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Array)> {
        self.entries.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only the listed parameters.
    pub fn restrict(&self, ids: &[ParamId]) -> GradientMap {
        GradientMap {
            entries: ids
                .iter()
                .filter_map(|id| self.entries.get(id).map(|g| (*id, g.clone())))
                .collect(),
        }
    }

    /// Global L2 norm over every entry.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|a| a.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// All entries concatenated in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|a| a.data().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_store() {
        let mut store = ParamStore::new();
        let a = store.add("gate", Group::Att, Array::zeros(vec![4]));
        let m = store.add("w", Group::Main, Array::zeros(vec![2, 3]));
        assert_eq!(store.ids_in(Group::Att), vec![a]);
        assert_eq!(store.ids_in(Group::Main), vec![m]);
        assert_eq!(store.numel(), 10);
        assert_eq!(store.numel_in(Group::Att), 4);
        assert_eq!(store.find("w"), Some(m));
    }

    #[test]
    fn gradient_norm_and_restrict() {
        let mut g = GradientMap::new();
        g.insert(ParamId(0), Array::vector(&[3.0]));
        g.insert(ParamId(1), Array::vector(&[4.0]));
        assert_eq!(g.l2_norm(), 5.0);
        assert_eq!(g.restrict(&[ParamId(1)]).flatten(), vec![4.0]);
    }
}
