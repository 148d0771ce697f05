//! Learning double-auction mechanisms with neural networks, alongside the
//! VCG and McAfee protocols they are measured against.
//!
//! Start with [`auction`] for the market model, [`protocols`] for the
//! classical mechanisms, [`drnet`] for the learned one, [`training`] to fit
//! it and [`evaluation`] to score it. The guide in `book/` walks through
//! the same ground with runnable examples.

pub mod auction;
pub mod checkpoint;
pub mod diffcore;
pub mod drnet;
pub mod error;
pub mod evaluation;
pub mod mechanism;
pub mod protocols;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/double-auctions.md")]
    mod double_auctions {}
    #[doc = include_str!("../../../book/src/protocols.md")]
    mod protocols {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
