//! Client side of the fit/predict wire protocol used to reach external
//! regressors, plus an in-tree reference server for testing.

mod protocol;
pub mod reference;
mod remote;
mod session;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use protocol::{
    decode_frame, encode_body, encode_frame, read_frame, write_frame, BackendInfo, BridgeMessage,
    Capabilities, FitOptions, Op, WireF64, MAX_FRAME_BYTES, PROTOCOL_VERSION,
};
pub use remote::BridgeRegressor;
pub use session::{
    BridgePool, BridgeSession, PooledSession, SessionConfig, DEFAULT_SIDECAR_CMD, SIDECAR_ENV,
};

/// Error codes carried by error frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Version,
    Timeout,
    OverContext,
    BackendFailure,
    Shape,
    UnknownModel,
    UnknownBackend,
    MissingUnsupported,
    BackendLost,
    Protocol,
    #[serde(other)]
    Other,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_string(self).unwrap_or_default();
        f.write_str(s.trim_matches('"'))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("bridge {code}: {message}")]
pub struct BridgeError {
    pub code: ErrorCode,
    pub message: String,
}

impl BridgeError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        BridgeError {
            code,
            message: message.into(),
        }
    }

    pub(crate) fn lost(message: impl Into<String>) -> Self {
        BridgeError::new(ErrorCode::BackendLost, message)
    }

    pub(crate) fn protocol(message: impl Into<String>) -> Self {
        BridgeError::new(ErrorCode::Protocol, message)
    }
}
