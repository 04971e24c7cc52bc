//! Named trainable parameters and the visitor used to walk them.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter, used to bind it onto a tape once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Clone for Param {
    /// Clones get a fresh identity so they bind as separate leaves.
    fn clone(&self) -> Self {
        Param::new(self.name.clone(), self.value.clone())
    }
}

/// Anything that owns parameters.
///
/// Visit order is fixed by construction and is the order used by optimizers
/// and checkpoints.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Non-trainable state that still belongs in a checkpoint.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&Param)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.visit(&mut |p| ids.push(p.id()));
        ids
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }
}
