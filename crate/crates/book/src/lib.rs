//! The guide under `book/src`, included chapter by chapter so that
//! `cargo test` runs its Rust snippets.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/gates.md")]
pub mod gates {}

#[doc = include_str!("../../../book/src/modifications.md")]
pub mod modifications {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
