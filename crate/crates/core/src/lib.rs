//! Deep learning directly over relational databases.
//!
//! A database becomes a two-level hypergraph: tuples are typed nodes carrying
//! their attribute tokens, and foreign-key matches are typed edges in both
//! directions. Models are stacks of transform / combine / aggregate blocks
//! trained with a small reverse-mode tape.
#![no_std]

extern crate alloc;

pub mod datetime;
pub mod embed;
pub mod error;
pub mod hypergraph;
pub mod relmodel;
pub mod sampler;
pub mod scheme;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
