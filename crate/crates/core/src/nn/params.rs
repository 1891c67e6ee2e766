use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named parameter groups. Every trainable parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Head,
    Hae,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Head, Group::Hae];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Head => "head",
            Group::Hae => "hae",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// A group's membership and whether it is frozen for the current phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub group: Group,
    pub members: Vec<ParamId>,
    pub frozen: bool,
}

/// Owns every parameter of a model, addressed by [`ParamId`] or unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group(&self, group: Group, frozen: bool) -> ParamGroup {
        ParamGroup { group, members: self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect(), frozen }
    }

    /// Scalar count per group.
    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape`; parameters whose group satisfies
    /// `trainable` become gradient-tracking leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable(p.group))).collect();
        Bound { vars }
    }

    /// Copies values by name from `other` for every name present in both.
    /// Returns how many parameters were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.id_of(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::shape("copy_matching", p.value.shape(), src.shape()));
                }
                p.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Tape variables for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
