use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Frozen,
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Mat<T>,
    pub role: Role,
}

/// Named parameters partitioned into frozen and trainable sets, plus
/// non-learned buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Mat<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat<T>, role: Role) {
        self.params.insert(name.into(), Param { value, role });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Mat<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Mat<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Mat<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Mat<T>> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Mat<T>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn names_with_role(&self, role: Role) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.role == role)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn buffer_names(&self) -> Vec<String> {
        self.buffers.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count in the given role.
    pub fn count(&self, role: Role) -> usize {
        self.params
            .values()
            .filter(|p| p.role == role)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sets the role of every parameter whose name starts with `prefix`.
    pub fn set_role_prefix(&mut self, prefix: &str, role: Role) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.role = role;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, b)| (n.clone(), b.cast())).collect(),
        }
    }

    /// Copies every parameter and buffer of `other` that exists here, keeping
    /// this store's roles.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other.get(name)?;
            if src.value.rows != p.value.rows || src.value.cols != p.value.cols {
                return Err(Error::Shape(format!("parameter `{name}` shape differs")));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
