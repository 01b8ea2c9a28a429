//! Dense `f64` arrays with an explicit reverse-mode tape.
//!
//! A [`Tape`] records one computation. Operations are methods on the tape and
//! return new [`DiffArray`]s; [`Tape::backward`] walks the record once in
//! reverse. Tapes hold no global state, so independent tapes can run on
//! different threads.

mod array;
mod check;
mod tape;

pub use array::{DiffArray, NodeId};
pub use check::{finite_diff_check, finite_diff_check_many};
pub use tape::{ElementwiseOp, Tape};
