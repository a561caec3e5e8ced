//! Frames are a 4-byte big-endian length followed by a UTF-8 JSON body.
//! Floats are written with 17 significant digits; NaN travels as the
//! string `"NaN"`.

use std::fmt;
use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use super::{BridgeError, ErrorCode};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 1 << 30;

/// An `f64` that serializes NaN and infinities as strings.
#[derive(Clone, Copy, Debug, Default)]
pub struct WireF64(pub f64);

impl PartialEq for WireF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0 || (self.0.is_nan() && other.0.is_nan())
    }
}

impl Serialize for WireF64 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_nan() {
            s.serialize_str("NaN")
        } else if v == f64::INFINITY {
            s.serialize_str("Infinity")
        } else if v == f64::NEG_INFINITY {
            s.serialize_str("-Infinity")
        } else {
            s.serialize_f64(v)
        }
    }
}

impl<'de> Deserialize<'de> for WireF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = WireF64;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"NaN\"")
            }
            fn visit_f64<E>(self, v: f64) -> Result<WireF64, E> {
                Ok(WireF64(v))
            }
            fn visit_i64<E>(self, v: i64) -> Result<WireF64, E> {
                Ok(WireF64(v as f64))
            }
            fn visit_u64<E>(self, v: u64) -> Result<WireF64, E> {
                Ok(WireF64(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<WireF64, E> {
                match v {
                    "NaN" => Ok(WireF64(f64::NAN)),
                    "Infinity" => Ok(WireF64(f64::INFINITY)),
                    "-Infinity" => Ok(WireF64(f64::NEG_INFINITY)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

pub(crate) fn matrix_to_wire(x: &DMatrix<f64>) -> Vec<Vec<WireF64>> {
    x.row_iter()
        .map(|r| r.iter().map(|&v| WireF64(v)).collect())
        .collect()
}

pub(crate) fn wire_to_matrix(rows: &[Vec<WireF64>]) -> Result<DMatrix<f64>, BridgeError> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(BridgeError::new(ErrorCode::Shape, "ragged X rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j].0))
}

pub(crate) fn vec_to_wire(v: &[f64]) -> Vec<WireF64> {
    v.iter().map(|&x| WireF64(x)).collect()
}

pub(crate) fn wire_to_vec(v: &[WireF64]) -> Vec<f64> {
    v.iter().map(|x| x.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    #[default]
    Hello,
    Fit,
    Predict,
    Release,
    Shutdown,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub supports_missing: bool,
    pub max_context: usize,
    pub default_ensemble: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub backends: Vec<BackendInfo>,
    pub missing_values: bool,
    pub max_context_rows: usize,
}

impl Capabilities {
    pub fn backend(&self, name: &str) -> Option<&BackendInfo> {
        self.backends.iter().find(|b| b.name == name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    /// Artificial latency added to each predict on this model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

/// One frame body. Requests and responses share the shape; fields a given
/// `op` does not use are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeMessage {
    pub id: u64,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<FitOptions>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<WireF64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<WireF64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<WireF64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Capabilities>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resident_models: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl BridgeMessage {
    pub fn request(op: Op) -> Self {
        BridgeMessage {
            op,
            ..Default::default()
        }
    }

    pub fn error(id: u64, err: &BridgeError) -> Self {
        BridgeMessage {
            id,
            op: Op::Error,
            code: Some(err.code),
            message: Some(err.message.clone()),
            ..Default::default()
        }
    }
}

struct WireFormatter;

impl serde_json::ser::Formatter for WireFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// JSON body bytes for `msg`.
pub fn encode_body(msg: &BridgeMessage) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, WireFormatter);
    msg.serialize(&mut ser)
        .expect("bridge messages always serialize");
    out
}

/// Length prefix plus body.
pub fn encode_frame(msg: &BridgeMessage) -> Vec<u8> {
    let body = encode_body(msg);
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses a body (without the length prefix).
pub fn decode_frame(body: &[u8]) -> Result<BridgeMessage, BridgeError> {
    let text = std::str::from_utf8(body)
        .map_err(|e| BridgeError::protocol(format!("body is not UTF-8: {e}")))?;
    serde_json::from_str(text).map_err(|e| BridgeError::protocol(format!("malformed frame: {e}")))
}

/// Reads one frame body; `Ok(None)` on clean EOF before a length prefix.
pub fn read_frame<R: Read + ?Sized>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "truncated length prefix",
                ))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {n} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; n];
    reader.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, msg: &BridgeMessage) -> io::Result<()> {
    writer.write_all(&encode_frame(msg))?;
    writer.flush()
}
