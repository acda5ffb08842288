//! Bridges a [`ParamStore`] onto a [`Tape`] for one forward pass.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SamError};
use crate::model::ParamStore;
use crate::tensor::Scalar;

/// Per-pass map from parameter name to tape leaf.
pub struct TapeParams {
    map: HashMap<String, Var>,
    order: Vec<String>,
}

impl TapeParams {
    /// Registers every parameter of `store` as a differentiable leaf.
    pub fn register<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<Self> {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for p in store.iter() {
            let var = tape.leaf(p.value.clone())?;
            map.insert(p.name.clone(), var);
            order.push(p.name.clone());
        }
        Ok(Self { map, order })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| SamError::InvalidArgument(format!("no tape leaf for {name}")))
    }

    /// Parameter names in store order.
    pub fn names(&self) -> &[String] {
        &self.order
    }
}
