//! A reference backend server speaking the bridge protocol. It exists so
//! the client can be exercised end to end without an external sidecar.
//!
//! Backends:
//! * `ols-ref`: least squares with intercept via the normal equations.
//! * `knn-missing-ref`: 5-nearest-neighbour averaging over the columns that
//!   are observed in both rows; accepts NaN inputs.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use super::protocol::{vec_to_wire, wire_to_matrix, wire_to_vec};
use super::{
    decode_frame, read_frame, write_frame, BackendInfo, BridgeError, BridgeMessage, Capabilities,
    ErrorCode, Op, PROTOCOL_VERSION,
};

pub const MAX_CONTEXT_ROWS: usize = 50_000;
pub const MODEL_CACHE: usize = 32;
const KNN_K: usize = 5;

pub fn reference_capabilities() -> Capabilities {
    Capabilities {
        backends: vec![
            BackendInfo {
                name: "ols-ref".into(),
                supports_missing: false,
                max_context: MAX_CONTEXT_ROWS,
                default_ensemble: 1,
            },
            BackendInfo {
                name: "knn-missing-ref".into(),
                supports_missing: true,
                max_context: MAX_CONTEXT_ROWS,
                default_ensemble: 1,
            },
        ],
        missing_values: true,
        max_context_rows: MAX_CONTEXT_ROWS,
    }
}

enum Fitted {
    Ols {
        beta: DVector<f64>,
    },
    Knn {
        x: DMatrix<f64>,
        y: Vec<f64>,
        scale: Vec<f64>,
    },
}

struct Stored {
    width: usize,
    delay: Option<Duration>,
    fitted: Fitted,
}

impl Stored {
    fn supports_missing(&self) -> bool {
        matches!(self.fitted, Fitted::Knn { .. })
    }
}

/// Server state shared by sequential connections: an LRU model cache.
#[derive(Default)]
pub struct ReferenceServer {
    models: HashMap<String, Stored>,
    order: VecDeque<String>,
}

fn fail(code: ErrorCode, message: impl Into<String>) -> BridgeError {
    BridgeError::new(code, message)
}

fn fit_ols(x: &DMatrix<f64>, y: &[f64]) -> Result<Fitted, BridgeError> {
    let (n, p) = (x.nrows(), x.ncols() + 1);
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * DVector::from_column_slice(y);
    let chol = gram.cholesky().ok_or_else(|| {
        fail(
            ErrorCode::BackendFailure,
            "ols-ref: normal equations are singular",
        )
    })?;
    Ok(Fitted::Ols {
        beta: chol.solve(&rhs),
    })
}

fn fit_knn(x: &DMatrix<f64>, y: &[f64]) -> Fitted {
    let scale = (0..x.ncols())
        .map(|j| {
            let obs: Vec<f64> = x
                .column(j)
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .collect();
            if obs.len() < 2 {
                return 1.0;
            }
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            let sd = (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64)
                .sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Fitted::Knn {
        x: x.clone(),
        y: y.to_vec(),
        scale,
    }
}

fn predict(stored: &Stored, q: &DMatrix<f64>) -> Vec<f64> {
    match &stored.fitted {
        Fitted::Ols { beta } => q
            .row_iter()
            .map(|r| {
                beta[0]
                    + r.iter()
                        .zip(beta.iter().skip(1))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect(),
        Fitted::Knn { x, y, scale } => q
            .row_iter()
            .map(|r| {
                let mut d: Vec<(f64, usize)> = (0..x.nrows())
                    .map(|i| {
                        let (mut sum, mut cnt) = (0.0, 0usize);
                        for j in 0..x.ncols() {
                            let (a, b) = (r[j], x[(i, j)]);
                            if a.is_finite() && b.is_finite() {
                                sum += ((a - b) / scale[j]).powi(2);
                                cnt += 1;
                            }
                        }
                        (
                            if cnt == 0 {
                                f64::INFINITY
                            } else {
                                sum / cnt as f64
                            },
                            i,
                        )
                    })
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let k = KNN_K.min(d.len());
                d[..k].iter().map(|&(_, i)| y[i]).sum::<f64>() / k as f64
            })
            .collect(),
    }
}

impl ReferenceServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resident(&self) -> usize {
        self.models.len()
    }

    fn insert(&mut self, id: String, model: Stored) {
        self.order.retain(|m| m != &id);
        while self.order.len() >= MODEL_CACHE {
            if let Some(old) = self.order.pop_front() {
                self.models.remove(&old);
            }
        }
        self.order.push_back(id.clone());
        self.models.insert(id, model);
    }

    fn handle_fit(&mut self, msg: &BridgeMessage) -> Result<(), BridgeError> {
        let id = msg
            .model_id
            .clone()
            .ok_or_else(|| fail(ErrorCode::Protocol, "fit without model_id"))?;
        let backend = msg.backend.as_deref().unwrap_or("ols-ref");
        let x = wire_to_matrix(
            msg.x
                .as_deref()
                .ok_or_else(|| fail(ErrorCode::Protocol, "fit without X"))?,
        )?;
        let y = wire_to_vec(
            msg.y
                .as_deref()
                .ok_or_else(|| fail(ErrorCode::Protocol, "fit without y"))?,
        );
        if y.len() != x.nrows() {
            return Err(fail(
                ErrorCode::Shape,
                format!("{} targets for {} rows", y.len(), x.nrows()),
            ));
        }
        if x.nrows() > MAX_CONTEXT_ROWS {
            return Err(fail(
                ErrorCode::OverContext,
                format!(
                    "{} rows exceed the context limit of {MAX_CONTEXT_ROWS}",
                    x.nrows()
                ),
            ));
        }
        if x.nrows() == 0 {
            return Err(fail(ErrorCode::Shape, "empty context"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(fail(ErrorCode::BackendFailure, "targets must be finite"));
        }
        let fitted = match backend {
            "ols-ref" => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(fail(
                        ErrorCode::MissingUnsupported,
                        "ols-ref does not accept missing values",
                    ));
                }
                fit_ols(&x, &y)?
            }
            "knn-missing-ref" => fit_knn(&x, &y),
            other => {
                return Err(fail(
                    ErrorCode::UnknownBackend,
                    format!("unknown backend `{other}`"),
                ))
            }
        };
        let delay = msg
            .options
            .as_ref()
            .and_then(|o| o.delay_ms)
            .map(Duration::from_millis);
        self.insert(
            id,
            Stored {
                width: x.ncols(),
                delay,
                fitted,
            },
        );
        Ok(())
    }

    fn handle_predict(&mut self, msg: &BridgeMessage) -> Result<Vec<f64>, BridgeError> {
        let id = msg
            .model_id
            .as_deref()
            .ok_or_else(|| fail(ErrorCode::Protocol, "predict without model_id"))?;
        let rows = msg
            .x
            .as_deref()
            .ok_or_else(|| fail(ErrorCode::Protocol, "predict without X"))?;
        let stored = self
            .models
            .get(id)
            .ok_or_else(|| fail(ErrorCode::UnknownModel, format!("no model `{id}`")))?;
        if let Some(d) = stored.delay {
            std::thread::sleep(d);
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let q = wire_to_matrix(rows)?;
        if q.ncols() != stored.width {
            return Err(fail(
                ErrorCode::Shape,
                format!(
                    "model has {} columns, request has {}",
                    stored.width,
                    q.ncols()
                ),
            ));
        }
        if !stored.supports_missing() && q.iter().any(|v| v.is_nan()) {
            return Err(fail(
                ErrorCode::MissingUnsupported,
                "backend does not accept missing values",
            ));
        }
        let preds = predict(stored, &q);
        self.order.retain(|m| m != id);
        self.order.push_back(id.to_string());
        Ok(preds)
    }

    /// Answers one frame body. The flag is true after `shutdown`.
    pub fn handle(&mut self, body: &[u8], greeted: &mut bool) -> (BridgeMessage, bool) {
        let msg = match decode_frame(body) {
            Ok(m) => m,
            Err(e) => return (BridgeMessage::error(0, &e), false),
        };
        let id = msg.id;
        let ok = |extra: BridgeMessage| BridgeMessage { id, ..extra };
        if msg.op != Op::Hello && !*greeted {
            return (
                BridgeMessage::error(
                    id,
                    &fail(
                        ErrorCode::Protocol,
                        "handshake required before other requests",
                    ),
                ),
                false,
            );
        }
        let result = match msg.op {
            Op::Hello => {
                if msg.protocol_version != Some(PROTOCOL_VERSION) {
                    Err(fail(
                        ErrorCode::Version,
                        format!(
                            "protocol {:?} not supported; this server speaks {PROTOCOL_VERSION}",
                            msg.protocol_version
                        ),
                    ))
                } else {
                    *greeted = true;
                    Ok(ok(BridgeMessage {
                        protocol_version: Some(PROTOCOL_VERSION),
                        capabilities: Some(reference_capabilities()),
                        ..BridgeMessage::request(Op::Hello)
                    }))
                }
            }
            Op::Fit => self.handle_fit(&msg).map(|_| {
                ok(BridgeMessage {
                    model_id: msg.model_id.clone(),
                    resident_models: Some(self.models.len()),
                    ..BridgeMessage::request(Op::Fit)
                })
            }),
            Op::Predict => self.handle_predict(&msg).map(|p| {
                ok(BridgeMessage {
                    model_id: msg.model_id.clone(),
                    predictions: Some(vec_to_wire(&p)),
                    ..BridgeMessage::request(Op::Predict)
                })
            }),
            Op::Release => {
                let id_str = msg.model_id.clone().unwrap_or_default();
                if self.models.remove(&id_str).is_some() {
                    self.order.retain(|m| m != &id_str);
                    Ok(ok(BridgeMessage {
                        model_id: msg.model_id.clone(),
                        resident_models: Some(self.models.len()),
                        ..BridgeMessage::request(Op::Release)
                    }))
                } else {
                    Err(fail(
                        ErrorCode::UnknownModel,
                        format!("no model `{id_str}`"),
                    ))
                }
            }
            Op::Shutdown => return (ok(BridgeMessage::request(Op::Shutdown)), true),
            Op::Error => Err(fail(
                ErrorCode::Protocol,
                "clients do not send error frames",
            )),
        };
        (
            result.unwrap_or_else(|e| BridgeError::error_frame(id, &e)),
            false,
        )
    }

    /// Serves one connection. Returns true when shutdown was requested.
    pub fn serve<R: Read, W: Write>(&mut self, reader: R, writer: W) -> io::Result<bool> {
        let mut reader = BufReader::new(reader);
        let mut writer = BufWriter::new(writer);
        let mut greeted = false;
        while let Some(body) = read_frame(&mut reader)? {
            let (reply, stop) = self.handle(&body, &mut greeted);
            write_frame(&mut writer, &reply)?;
            if stop {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Accepts connections one at a time until a client sends shutdown.
    pub fn serve_tcp(&mut self, listener: TcpListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let _ = stream.set_nodelay(true);
            let reader = stream.try_clone()?;
            match self.serve(reader, stream) {
                Ok(true) => return Ok(()),
                Ok(false) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

impl BridgeError {
    fn error_frame(id: u64, e: &BridgeError) -> BridgeMessage {
        BridgeMessage::error(id, e)
    }
}

/// Entry point shared by the reference sidecar binary and CLI subcommand.
/// Accepts `--transport stdio`, `--listen <port>`, and ignores
/// `--deterministic` and `--device <name>`.
pub fn run_from_args<I: IntoIterator<Item = String>>(args: I) -> Result<(), String> {
    let mut listen: Option<u16> = None;
    let mut args = args.into_iter();
    while let Some(a) = args.next() {
        match a.as_str() {
            "--transport" => match args.next().as_deref() {
                Some("stdio") => listen = None,
                other => return Err(format!("unsupported transport {other:?}")),
            },
            "--listen" => {
                let port = args.next().ok_or("--listen needs a port")?;
                listen = Some(
                    port.parse()
                        .map_err(|e| format!("bad port `{port}`: {e}"))?,
                );
            }
            "--deterministic" => {}
            "--device" => {
                args.next();
            }
            other => return Err(format!("unknown argument `{other}`")),
        }
    }
    let mut server = ReferenceServer::new();
    match listen {
        None => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            server
                .serve(stdin.lock(), stdout.lock())
                .map(|_| ())
                .map_err(|e| e.to_string())
        }
        Some(port) => {
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| e.to_string())?;
            server.serve_tcp(listener).map_err(|e| e.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::protocol::matrix_to_wire;
    use crate::bridge::{encode_body, WireF64};

    fn roundtrip(
        server: &mut ReferenceServer,
        greeted: &mut bool,
        msg: BridgeMessage,
    ) -> BridgeMessage {
        server.handle(&encode_body(&msg), greeted).0
    }

    fn hello(server: &mut ReferenceServer) -> bool {
        let mut greeted = false;
        let reply = roundtrip(
            server,
            &mut greeted,
            BridgeMessage {
                id: 1,
                protocol_version: Some(1),
                ..BridgeMessage::request(Op::Hello)
            },
        );
        assert_eq!(reply.op, Op::Hello);
        greeted
    }

    #[test]
    fn requires_handshake() {
        let mut s = ReferenceServer::new();
        let mut greeted = false;
        let reply = roundtrip(&mut s, &mut greeted, BridgeMessage::request(Op::Predict));
        assert_eq!(reply.code, Some(ErrorCode::Protocol));
    }

    #[test]
    fn version_mismatch() {
        let mut s = ReferenceServer::new();
        let mut greeted = false;
        let reply = roundtrip(
            &mut s,
            &mut greeted,
            BridgeMessage {
                protocol_version: Some(2),
                ..BridgeMessage::request(Op::Hello)
            },
        );
        assert_eq!(reply.code, Some(ErrorCode::Version));
        assert!(!greeted);
    }

    #[test]
    fn slope_two_and_shape_errors() {
        let mut s = ReferenceServer::new();
        let mut g = hello(&mut s);
        let x = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let fit = BridgeMessage {
            id: 2,
            model_id: Some("a".into()),
            backend: Some("ols-ref".into()),
            x: Some(matrix_to_wire(&x)),
            y: Some((0..5).map(|i| WireF64(2.0 * i as f64)).collect()),
            ..BridgeMessage::request(Op::Fit)
        };
        assert_eq!(roundtrip(&mut s, &mut g, fit.clone()).op, Op::Fit);
        let pred = roundtrip(
            &mut s,
            &mut g,
            BridgeMessage {
                id: 3,
                model_id: Some("a".into()),
                x: Some(vec![vec![WireF64(10.0)]]),
                ..BridgeMessage::request(Op::Predict)
            },
        );
        assert!((pred.predictions.unwrap()[0].0 - 20.0).abs() < 1e-10);
        let bad = BridgeMessage {
            y: Some(vec![WireF64(1.0)]),
            ..fit
        };
        assert_eq!(roundtrip(&mut s, &mut g, bad).code, Some(ErrorCode::Shape));
    }

    #[test]
    fn lru_caps_resident_models() {
        let mut s = ReferenceServer::new();
        let mut g = hello(&mut s);
        for i in 0..40 {
            let fit = BridgeMessage {
                id: i,
                model_id: Some(format!("m{i}")),
                backend: Some("knn-missing-ref".into()),
                x: Some(vec![vec![WireF64(1.0)]]),
                y: Some(vec![WireF64(1.0)]),
                ..BridgeMessage::request(Op::Fit)
            };
            roundtrip(&mut s, &mut g, fit);
        }
        assert_eq!(s.resident(), MODEL_CACHE);
    }

    #[test]
    fn knn_handles_missing_values() {
        let mut s = ReferenceServer::new();
        let mut g = hello(&mut s);
        let x = DMatrix::from_fn(10, 2, |i, j| (i * (j + 1)) as f64);
        roundtrip(
            &mut s,
            &mut g,
            BridgeMessage {
                model_id: Some("k".into()),
                backend: Some("knn-missing-ref".into()),
                x: Some(matrix_to_wire(&x)),
                y: Some((0..10).map(|i| WireF64(i as f64)).collect()),
                ..BridgeMessage::request(Op::Fit)
            },
        );
        let reply = roundtrip(
            &mut s,
            &mut g,
            BridgeMessage {
                model_id: Some("k".into()),
                x: Some(vec![
                    vec![WireF64(f64::NAN), WireF64(4.0)],
                    vec![WireF64(f64::NAN); 2],
                ]),
                ..BridgeMessage::request(Op::Predict)
            },
        );
        let p = reply.predictions.unwrap();
        assert!(p.iter().all(|v| v.0.is_finite()));
    }
}
