//! Permute, quantize, fine-tune: vector-quantization compression of
//! neural-network weight checkpoints.
//!
//! The pipeline for one layer is
//!
//! 1. reshape the weight to a 2-D matrix and carve its columns into
//!    `d`-dimensional subvectors ([`layout`]),
//! 2. search for a row permutation that lowers the determinant of the
//!    subvector covariance ([`permsearch`]), shared across every layer that
//!    must agree on a channel order ([`graph`]),
//! 3. cluster the permuted subvectors with plain or annealed k-means
//!    ([`quantize`]) and assemble the encoding ([`codec`]),
//! 4. optionally fine-tune the codebooks by gradient descent with the codes
//!    frozen ([`finetune`]).
//!
//! Files on disk are handled by [`tensor_io`]; the `pqf` binary is a thin
//! wrapper over [`cli::dispatch`].

pub mod bench;
pub mod cli;
pub mod codec;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod layout;
pub mod permsearch;
pub mod quantize;
pub mod rng;
pub mod tensor_io;

pub use error::{Error, Result};
