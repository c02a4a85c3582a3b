//! Layer primitives with hand-written backward passes.
//!
//! Layers keep no activation state: `forward` takes `&self`, and `backward`
//! receives whatever forward inputs/outputs it needs from the caller and
//! accumulates parameter gradients into [`Param::grad`].

mod act;
mod conv;
mod norm;
mod param;
mod pool;
mod resize;

pub use act::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{conv2d_flops, Conv2d};
pub use norm::GroupNorm;
pub use param::{join, Init, Param, ParamVisitor, ParamVisitorMut, Parameterized};
pub use pool::{max_pool2, max_pool2_backward};
pub use resize::{resize_bilinear, resize_bilinear_backward};
