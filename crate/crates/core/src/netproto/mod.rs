//! Synchronous federated rounds over TCP: one aggregation server holding no
//! data, K clients each holding one dataset.

mod client;
mod server;
pub mod wire;

use thiserror::Error;

use crate::fl::{FlError, RoundReport};
use crate::nn::NnError;

pub use client::{join, join_with, JoinOptions, JoinReport};
pub use server::{serve, serve_on, ClientTraffic, ServeOutcome};
pub use wire::{
    decode, encode, read_message, write_message, Message, WireError, HEADER_LEN, MAX_FRAME,
};

pub const DEFAULT_PORT: u16 = 7180;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("server rejected client (code {code}): {text}")]
    Rejected { code: u16, text: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("run aborted in round {round}: {reason}")]
    Aborted {
        round: usize,
        reason: String,
        /// Reports of the rounds completed before the abort.
        partial: Vec<RoundReport>,
    },
    #[error("could not connect to {addr} after {attempts} attempts: {source}")]
    Connect {
        addr: String,
        attempts: usize,
        source: std::io::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl NetError {
    /// True for failures on the wire rather than bad local input.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            NetError::Wire(_)
                | NetError::Rejected { .. }
                | NetError::Protocol(_)
                | NetError::Aborted { .. }
        )
    }
}
