//! Binary wire format and a small TCP transport.
//!
//! Every message travels in a frame: the magic `FEDU`, a version byte, a
//! message-type byte, a little-endian `u64` payload length and the payload.
//! Model checkpoints on disk are `ModelResponse` frames.

mod codec;
mod net;

use thiserror::Error;

pub use codec::{
    decode_frame, decode_params, encode_frame, encode_params, read_checkpoint, write_checkpoint,
    Decoded, Message, HEADER_LEN, MAGIC, MAX_PAYLOAD, VERSION,
};
pub use net::{serve, RemoteClient, ServerHandle, StageAck};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("server replied {code}: {text}")]
    Remote { code: String, text: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
