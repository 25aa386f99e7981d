//! Model specifications, forward execution and transposition.

mod exec;
mod spec;
mod transpose;

pub use exec::{ExecutableGraph, Mode, BN_MOMENTUM};
pub use spec::*;
pub use transpose::{
    capture_frozen_branches, restore_last_layer, swap_last_layer, transpose_model, ArchivedHead, FrozenBranch,
    TransposedGraph, TransposedLayer, TransposedSpec, DEFAULT_ADDED_DROPOUT,
};
