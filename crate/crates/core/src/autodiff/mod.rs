//! Dense tensor algebra with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in execution order
//! together with the forward values. Backward is one reverse sweep over
//! that record. All reductions run left to right, so a forward pass is a
//! pure function of its inputs down to the last bit.

mod gradcheck;
mod graph;
mod params;
mod primitive;
pub mod spectral;

pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, SkippedCoord,
};
pub use graph::{huber, top_k_indices, Graph, Mask, Signature, Var, MAGNITUDE_EPS};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use primitive::{apply_primitive, Attr, Attrs};

#[cfg(test)]
mod tests;
