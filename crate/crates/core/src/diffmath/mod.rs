//! Dense math and tape-based reverse-mode differentiation.
//!
//! The tape is not a general expression graph. It records a closed set of
//! batched operations (affine layers, activations, positional encoding, box
//! transforms, compositing, losses), each with a hand-written adjoint. Node
//! values are row-major matrices whose rows are independent samples, so a
//! layer over thousands of points is one matrix product.
//!
//! Tapes are generic over [`Real`]: models train in `f32`, while gradient
//! checks replay the same graph in `f64`.

mod params;
mod polar;
mod real;
mod scalar;
mod tape;

pub use params::{ParamVector, Segment};
pub use polar::{polar_factor, PolarFactor};
pub use real::Real;
pub use scalar::{sigmoid, softmax_cross_entropy, softplus};
pub use tape::{
    band_weights, composite_forward, forward_backward, CompositeSpec, Mat, NodeId, ParamRef, Tape,
    COMPOSITE_COLOR, COMPOSITE_DEPTH, COMPOSITE_OPACITY, COMPOSITE_SEMANTIC,
};
