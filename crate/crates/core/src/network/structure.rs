//! Interchangeable FSAT block structures, looked up by name at runtime.
//!
//! Every structure wraps its body in a block-level residual
//! (`out = x + body(x)`); they differ in which sub-modules the body runs and
//! in what order.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fsam::{fsam_forward, FsamVars, GroupSpec};
use crate::itm::{itm_forward, ItmVars};
use crate::tensor::{Graph, Real, Var};

/// Which learnable sub-modules a block carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub itm: bool,
    pub fsam: bool,
}

/// Per-call settings shared by all blocks of a network.
#[derive(Debug, Clone)]
pub struct BlockContext {
    pub window: usize,
    pub groups: GroupSpec,
}

/// One block's parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct BlockVars<T> {
    pub itm: Option<ItmVars<T>>,
    pub fsam: Option<FsamVars<T>>,
}

impl<T: Real> BlockVars<T> {
    fn itm(&self, owner: &str) -> Result<&ItmVars<T>> {
        self.itm.as_ref().ok_or_else(|| {
            Error::Config(format!("structure `{owner}` needs transformer parameters"))
        })
    }

    fn fsam(&self, owner: &str) -> Result<&FsamVars<T>> {
        self.fsam
            .as_ref()
            .ok_or_else(|| Error::Config(format!("structure `{owner}` needs attention parameters")))
    }
}

pub trait BlockStructure<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Stable numeric id stored in model files.
    fn tag(&self) -> u32;

    fn components(&self) -> Components;

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        block: &BlockVars<T>,
        ctx: &BlockContext,
    ) -> Result<Var<T>>;
}

/// ITM then FSAM.
#[derive(Debug, Default, Clone, Copy)]
pub struct Full;

/// ITM only.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoFsam;

/// FSAM only.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoItm;

/// FSAM then ITM.
#[derive(Debug, Default, Clone, Copy)]
pub struct Reverse;

impl<T: Real> BlockStructure<T> for Full {
    fn name(&self) -> &'static str {
        "full"
    }
    fn tag(&self) -> u32 {
        0
    }
    fn components(&self) -> Components {
        Components {
            itm: true,
            fsam: true,
        }
    }
    fn forward(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        b: &BlockVars<T>,
        ctx: &BlockContext,
    ) -> Result<Var<T>> {
        let name = BlockStructure::<T>::name(self);
        let t = itm_forward(g, x, b.itm(name)?, ctx.window)?;
        let a = fsam_forward(g, &t, b.fsam(name)?, &ctx.groups)?;
        g.add(x, &a)
    }
}

impl<T: Real> BlockStructure<T> for NoFsam {
    fn name(&self) -> &'static str {
        "no_fsam"
    }
    fn tag(&self) -> u32 {
        1
    }
    fn components(&self) -> Components {
        Components {
            itm: true,
            fsam: false,
        }
    }
    fn forward(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        b: &BlockVars<T>,
        ctx: &BlockContext,
    ) -> Result<Var<T>> {
        let t = itm_forward(g, x, b.itm(BlockStructure::<T>::name(self))?, ctx.window)?;
        g.add(x, &t)
    }
}

impl<T: Real> BlockStructure<T> for NoItm {
    fn name(&self) -> &'static str {
        "no_itm"
    }
    fn tag(&self) -> u32 {
        2
    }
    fn components(&self) -> Components {
        Components {
            itm: false,
            fsam: true,
        }
    }
    fn forward(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        b: &BlockVars<T>,
        ctx: &BlockContext,
    ) -> Result<Var<T>> {
        let a = fsam_forward(g, x, b.fsam(BlockStructure::<T>::name(self))?, &ctx.groups)?;
        g.add(x, &a)
    }
}

impl<T: Real> BlockStructure<T> for Reverse {
    fn name(&self) -> &'static str {
        "reverse"
    }
    fn tag(&self) -> u32 {
        3
    }
    fn components(&self) -> Components {
        Components {
            itm: true,
            fsam: true,
        }
    }
    fn forward(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        b: &BlockVars<T>,
        ctx: &BlockContext,
    ) -> Result<Var<T>> {
        let name = BlockStructure::<T>::name(self);
        let a = fsam_forward(g, x, b.fsam(name)?, &ctx.groups)?;
        let t = itm_forward(g, &a, b.itm(name)?, ctx.window)?;
        g.add(x, &t)
    }
}

/// Name-keyed table of block structures.
pub struct StructureRegistry<T> {
    entries: BTreeMap<&'static str, Arc<dyn BlockStructure<T>>>,
}

impl<T: Real> Default for StructureRegistry<T> {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl<T: Real> StructureRegistry<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// `full`, `no_fsam`, `no_itm` and `reverse`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Full);
        r.register(NoFsam);
        r.register(NoItm);
        r.register(Reverse);
        r
    }

    /// Adds or replaces the structure registered under its name.
    pub fn register(&mut self, structure: impl BlockStructure<T> + 'static) {
        self.entries.insert(structure.name(), Arc::new(structure));
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn BlockStructure<T>>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStructure {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn by_tag(&self, tag: u32) -> Result<Arc<dyn BlockStructure<T>>> {
        self.entries
            .values()
            .find(|s| s.tag() == tag)
            .cloned()
            .ok_or_else(|| Error::UnknownStructure {
                name: format!("tag {tag}"),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
