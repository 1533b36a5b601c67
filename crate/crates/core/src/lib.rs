//! Geometry-assisted depth completion for transparent and specular objects.

pub mod aca;
pub mod error;
pub mod gcmf;
pub mod geometry;
pub mod image_branch;
pub mod pipeline;
pub mod point_branch;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/neighborhoods.md")]
    struct Neighborhoods;
    #[doc = include_str!("../../../book/src/fusion.md")]
    struct Fusion;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct Readme;
