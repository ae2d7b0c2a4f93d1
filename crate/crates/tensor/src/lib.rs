//! A small reverse-mode automatic differentiation engine over dense,
//! row-major `f32` arrays.
//!
//! Graphs are built eagerly: every op computes its value immediately and,
//! if any input is trainable, records a closure that maps the output
//! gradient back to its inputs. Values that do not depend on a trainable
//! leaf carry no history, so inference runs without graph overhead.

pub mod ops;
mod var;

pub use var::{numel, Var};
