//! Oblivious order-preserving encryption.
//!
//! A data analyst obtains the order encoding of a private value against a
//! data owner's encrypted table hosted by a storage server, without the
//! analyst revealing the value or the owner revealing its key.

pub mod circuits;
pub mod datastore;
pub mod error;
pub mod homcrypto;
pub mod integrity;
pub mod ope;
pub mod protocol;
pub mod transport;

pub use error::{AbortReason, Error, Result};
