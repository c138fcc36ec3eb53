//! Named parameter tensors partitioned into ownership groups.

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Shared,
    SegBranch,
    ContourBranch,
    Tcl,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Shared, Group::SegBranch, Group::ContourBranch, Group::Tcl];

    pub fn tag(self) -> &'static str {
        match self {
            Group::Shared => "shared",
            Group::SegBranch => "seg",
            Group::ContourBranch => "cont",
            Group::Tcl => "tcl",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor<f32>,
}

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a He-normal initialized weight (`fan_in` inputs per output) or,
    /// with `fan_in == 0`, a zero tensor. The draw depends only on `seed` and
    /// the parameter name.
    pub fn add(&mut self, name: String, group: Group, shape: &[usize], fan_in: usize, seed: u64) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let value = if fan_in == 0 {
            Tensor::zeros(shape)
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            let mut r = rng::stream(seed, &name);
            Tensor::from_fn(shape, |_| dist.sample(&mut r) as f32)
        };
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    pub fn push(&mut self, p: Param) -> ParamId {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names and value bits of one group, hex encoded.
    pub fn checksum(&self, group: Group) -> String {
        self.digest(|p| p.group == group)
    }

    pub fn checksum_all(&self) -> String {
        self.digest(|_| true)
    }

    fn digest(&self, keep: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_only() {
        let mut a = ParamStore::new();
        a.add("x.w".into(), Group::Shared, &[4, 3], 3, 9);
        a.add("y.w".into(), Group::Tcl, &[2], 0, 9);
        let mut b = ParamStore::new();
        b.add("y.w".into(), Group::Tcl, &[2], 0, 9);
        b.add("x.w".into(), Group::Shared, &[4, 3], 3, 9);
        assert_eq!(a.get(0).value, b.get(1).value);
        assert_eq!(a.count(Group::Shared), 12);
        assert_eq!(a.total(), 14);
        assert_ne!(a.checksum(Group::Shared), a.checksum(Group::Tcl));
    }
}
