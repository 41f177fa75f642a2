//! Exact conversion of fully-connected ReLU binary classifiers into logical
//! circuits of linear atoms, with equivalence checks and capacity bounds.

pub mod capacity;
pub mod circuit;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod hexfloat;
pub mod interpret;
pub mod linalg;
pub mod nn;
pub mod render;
pub mod states;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    pub mod networks {}
    #[doc = include_str!("../../../book/src/states.md")]
    pub mod states {}
    #[doc = include_str!("../../../book/src/circuits.md")]
    pub mod circuits {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
    #[doc = include_str!("../../../book/src/capacity.md")]
    pub mod capacity {}
    #[doc = include_str!("../../../book/src/interpretation.md")]
    pub mod interpretation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
