//! Distributed observers for a jointly observable linear plant whose output
//! channels are spread across a network of agents.
//!
//! The crate is organised bottom-up: [`graph`] handles the neighbor graph,
//! [`linalg`] the plant and rank tests, [`netsys`] the network system and its
//! generic gains, [`spectra`] eigenvalue placement and the compensator,
//! [`assembler`] the observer itself and [`sim`] the simulation checks.
//! [`io`] reads and writes the JSON artifacts.

pub mod error;
pub mod graph;
pub mod linalg;
pub mod netsys;
pub mod spectra;
pub mod assembler;
pub mod sim;
pub mod io;

pub use error::{Error, Result};
