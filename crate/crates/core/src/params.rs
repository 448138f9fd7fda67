//! Named parameter buffers shared by the graph, the tape, the optimizer and
//! the weight archive. Insertion order is the canonical order.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Kernel,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    /// Logical dimensions as stored in archives (vectors have rank 1).
    pub dims: Vec<usize>,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn len(&self) -> usize {
        self.value.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a 4D kernel.
    pub fn kernel(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let dims = value.shape().dims().to_vec();
        self.push(name.into(), dims, ParamRole::Kernel, value)
    }

    /// Registers a per-channel vector.
    pub fn vector(&mut self, name: impl Into<String>, role: ParamRole, value: Vec<T>) -> ParamId {
        let n = value.len();
        let t = Tensor::from_vec(Shape::new(n, 1, 1, 1), value).expect("vector shape");
        self.push(name.into(), vec![n], role, t)
    }

    fn push(&mut self, name: String, dims: Vec<usize>, role: ParamRole, value: Tensor<T>) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            dims,
            role,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        self.params[id.0].value.data()
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        self.params[id.0].value.data_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.role.trainable()).map(Param::len).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every buffer with `values` (same order, same lengths), or
    /// leaves the store untouched on the first mismatch.
    pub fn assign(&mut self, values: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatchOnLoad {
                name: "<archive>".into(),
                detail: format!(
                    "archive has {} entries, network has {}",
                    values.len(),
                    self.params.len()
                ),
            });
        }
        let mut seen = HashSet::new();
        for (p, (name, dims, data)) in self.params.iter().zip(&values) {
            if !seen.insert(name.as_str()) {
                return Err(Error::ShapeMismatchOnLoad {
                    name: name.clone(),
                    detail: "duplicate entry".into(),
                });
            }
            if &p.name != name {
                return Err(Error::ShapeMismatchOnLoad {
                    name: name.clone(),
                    detail: format!("expected entry `{}` at this position", p.name),
                });
            }
            if &p.dims != dims || data.len() != p.len() {
                return Err(Error::ShapeMismatchOnLoad {
                    name: name.clone(),
                    detail: format!("archive dims {dims:?}, network dims {:?}", p.dims),
                });
            }
        }
        for (p, (_, _, data)) in self.params.iter_mut().zip(values) {
            let shape = p.value.shape();
            p.value = Tensor::from_vec(shape, data)?;
        }
        Ok(())
    }
}
