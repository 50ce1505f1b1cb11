//! Tangent spaces, scores, Hilbert projections, pathwise derivatives and
//! influence curves on a finite statistical manifold.
//!
//! Scores along charted paths are obtained by central differences of
//! `log p_t` with one Richardson step (steps `1e-3`, `5e-4`); mixture paths
//! use their closed-form score `dP'/dP - 1`.

mod influence;
mod path;
mod subspace;

pub use influence::{eic_from_chart, verify_influence_curve, EicResult, PathGap, RieszReport};
pub use path::{
    derivative_at, multinomial_chart, pathwise_derivative, score_at, score_of_path, Builder, Chart,
    Path,
};
pub use subspace::{convex_tangent_basis, orth_complement, subspace_residual, Subspace};

