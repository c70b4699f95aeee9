use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use super::norm::{BnMode, RunningStats};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// One named array: a trainable parameter or a non-trainable buffer such as
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Ordered, named parameter set of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) -> Result<()> {
        if numel(&param.shape) != param.data.len() {
            return Err(Error::shape(
                param.name.clone(),
                format!("shape {:?} vs {} values", param.shape, param.data.len()),
            ));
        }
        if self.index.contains_key(&param.name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {}", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub(crate) fn push_uniform(
        &mut self,
        name: String,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(Param {
            name,
            shape,
            data,
            trainable: true,
        })
    }

    pub(crate) fn push_const(
        &mut self,
        name: String,
        shape: Vec<usize>,
        value: f64,
        trainable: bool,
    ) -> Result<()> {
        let n = numel(&shape);
        self.insert(Param {
            name,
            shape,
            data: vec![value; n],
            trainable,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// Writes batch-norm running statistics produced by
    /// [`Binding::take_stats`] into the `{prefix}.running_*` buffers.
    pub fn apply_stats(&mut self, stats: &[(String, RunningStats)]) -> Result<()> {
        for (prefix, st) in stats {
            for (suffix, values) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let name = format!("{prefix}.{suffix}");
                let p = self
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))?;
                if p.data.len() != values.len() {
                    return Err(Error::shape(name, "running statistics length mismatch"));
                }
                p.data.clone_from(values);
            }
        }
        Ok(())
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::shape(
                    p.name.clone(),
                    format!("checkpoint has {:?}, model expects {:?}", src.shape, p.shape),
                ));
            }
            p.data.clone_from(&src.data);
        }
        Ok(())
    }
}

/// Parameters of a store bound as graph leaves for one forward pass.
///
/// With `trainable = true` every trainable parameter becomes a
/// gradient-accumulating leaf; otherwise all are constants and no gradient
/// is ever computed for them.
pub struct Binding<'a> {
    store: &'a ParamStore,
    leaves: Vec<Tensor>,
    bn_mode: BnMode,
    stats: RefCell<Vec<(String, RunningStats)>>,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool, bn_mode: BnMode) -> Self {
        let leaves = store
            .iter()
            .map(|p| {
                if trainable && p.trainable {
                    Tensor::param(p.shape.clone(), p.data.clone())
                } else {
                    Tensor::new(p.shape.clone(), p.data.clone())
                }
                .expect("store validates shapes")
            })
            .collect();
        Self {
            store,
            leaves,
            bn_mode,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.store
            .index
            .get(name)
            .map(|&i| self.leaves[i].clone())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&'a [f64]> {
        self.store
            .get(name)
            .map(|p| p.data.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub(crate) fn record_stats(&self, prefix: &str, stats: RunningStats) {
        self.stats.borrow_mut().push((prefix.to_string(), stats));
    }

    /// Running-statistics updates produced by this forward pass.
    pub fn take_stats(&self) -> Vec<(String, RunningStats)> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    /// Gradients of trainable parameters, in store order, after backward.
    /// Parameters the loss does not depend on get zeros.
    pub fn grads(&self) -> Vec<(String, Vec<f64>)> {
        self.store
            .iter()
            .zip(&self.leaves)
            .filter(|(p, _)| p.trainable)
            .map(|(p, t)| (p.name.clone(), t.grad().unwrap_or_else(|| vec![0.0; p.data.len()])))
            .collect()
    }

    /// True if any leaf of this binding received a gradient.
    pub fn any_grad(&self) -> bool {
        self.leaves.iter().any(|t| t.grad().is_some())
    }
}
