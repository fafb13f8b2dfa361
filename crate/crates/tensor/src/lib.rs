//! Dense arrays and a small reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and a backward closure to
//! a [`Tape`]; [`Var::backward`] replays the closures in reverse creation
//! order. Arrays are contiguous and row-major, convolutions are lowered to
//! im2col + GEMM, and everything runs single-threaded, so a computation is a
//! pure function of its inputs down to the last bit.
//!
//! Values are generic over [`Float`]: models train in `f32` and the same code
//! is instantiated in `f64` for finite-difference gradient checks.
//!
//! ```
//! use std::rc::Rc;
//! use kineflow_tensor::{Array, Tape};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Rc::new(Array::from_f64(vec![3], &[1.0, 2.0, 3.0])));
//! let loss = x.sqr().sum_all();
//! let grads = loss.backward();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod array;
mod conv;
mod float;
mod ops;
mod tape;

pub use array::{broadcast_binary, broadcast_shape, expand_to, reduce_to_shape, Array};
pub use conv::ConvGeometry;
pub use float::{gemm, Float};
pub use ops::contiguous_strides;
pub use tape::{BackwardFn, Gradients, Tape, Var};
