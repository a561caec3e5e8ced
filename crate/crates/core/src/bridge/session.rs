use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use super::protocol::{matrix_to_wire, vec_to_wire, wire_to_vec};
use super::{
    decode_frame, encode_frame, read_frame, BridgeError, BridgeMessage, Capabilities, ErrorCode,
    FitOptions, Op, PROTOCOL_VERSION,
};

/// Overrides the sidecar launch command.
pub const SIDECAR_ENV: &str = "CONDSHAP_BRIDGE_CMD";
pub const DEFAULT_SIDECAR_CMD: &str = "condshap-sidecar";

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub timeout: Duration,
    /// Models kept resident on the backend before the oldest is released.
    pub max_resident: usize,
    pub protocol_version: u32,
    /// Passes `--deterministic` to spawned sidecars.
    pub deterministic: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            timeout: Duration::from_secs(30),
            max_resident: 32,
            protocol_version: PROTOCOL_VERSION,
            deterministic: true,
        }
    }
}

type Frames = Receiver<std::io::Result<Vec<u8>>>;

/// One connection to a backend. Requests are strictly sequential.
pub struct BridgeSession {
    writer: Box<dyn Write + Send>,
    frames: Frames,
    child: Option<Child>,
    next_id: u64,
    capabilities: Capabilities,
    resident: VecDeque<String>,
    config: SessionConfig,
    lost: Option<String>,
    transcript: Option<Vec<u8>>,
}

fn split_command(cmd: &str) -> Result<(String, Vec<String>), BridgeError> {
    let mut parts = cmd.split_whitespace().map(str::to_string);
    let program = parts
        .next()
        .ok_or_else(|| BridgeError::lost("empty sidecar command"))?;
    Ok((program, parts.collect()))
}

/// The sidecar command: `$CONDSHAP_BRIDGE_CMD` if set, else `fallback`.
pub(crate) fn sidecar_command(fallback: &str) -> String {
    std::env::var(SIDECAR_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| fallback.to_string())
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Frames {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(body)) => {
                    if tx.send(Ok(body)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

impl BridgeSession {
    /// Wraps an already-connected byte stream pair and performs the handshake.
    pub fn from_streams<R, W>(
        reader: R,
        writer: W,
        config: SessionConfig,
    ) -> Result<Self, BridgeError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::build(
            Box::new(BufWriter::new(writer)),
            spawn_reader(reader),
            None,
            config,
            false,
        )
    }

    fn build(
        writer: Box<dyn Write + Send>,
        frames: Frames,
        child: Option<Child>,
        config: SessionConfig,
        record: bool,
    ) -> Result<Self, BridgeError> {
        let mut session = BridgeSession {
            writer,
            frames,
            child,
            next_id: 1,
            capabilities: Capabilities::default(),
            resident: VecDeque::new(),
            config,
            lost: None,
            transcript: record.then(Vec::new),
        };
        session.handshake()?;
        Ok(session)
    }

    /// Launches `command --transport stdio` and talks over its pipes.
    pub fn spawn(command: &str, config: SessionConfig) -> Result<Self, BridgeError> {
        Self::spawn_inner(command, config, false)
    }

    /// Like [`spawn`](Self::spawn) but records every frame in both
    /// directions; see [`take_transcript`](Self::take_transcript).
    pub fn spawn_recording(command: &str, config: SessionConfig) -> Result<Self, BridgeError> {
        Self::spawn_inner(command, config, true)
    }

    fn spawn_inner(
        command: &str,
        config: SessionConfig,
        record: bool,
    ) -> Result<Self, BridgeError> {
        let (program, mut args) = split_command(command)?;
        args.extend(["--transport".to_string(), "stdio".to_string()]);
        if config.deterministic {
            args.push("--deterministic".into());
        }
        let mut child = Command::new(&program)
            .args(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::lost(format!("cannot launch sidecar `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::build(
            Box::new(BufWriter::new(stdin)),
            spawn_reader(stdout),
            Some(child),
            config,
            record,
        )
    }

    /// Connects to a sidecar already listening on `addr`.
    pub fn connect(addr: impl ToSocketAddrs, config: SessionConfig) -> Result<Self, BridgeError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| BridgeError::lost(format!("cannot connect: {e}")))?;
        Self::from_tcp(stream, None, config)
    }

    fn from_tcp(
        stream: TcpStream,
        child: Option<Child>,
        config: SessionConfig,
    ) -> Result<Self, BridgeError> {
        let _ = stream.set_nodelay(true);
        let reader = stream
            .try_clone()
            .map_err(|e| BridgeError::lost(format!("cannot clone socket: {e}")))?;
        Self::build(
            Box::new(BufWriter::new(stream)),
            spawn_reader(reader),
            child,
            config,
            false,
        )
    }

    /// Launches `command --listen <port>` and connects to it over TCP,
    /// retrying until the timeout.
    pub fn spawn_tcp(command: &str, port: u16, config: SessionConfig) -> Result<Self, BridgeError> {
        let (program, mut args) = split_command(command)?;
        args.extend(["--listen".to_string(), port.to_string()]);
        if config.deterministic {
            args.push("--deterministic".into());
        }
        let mut child = Command::new(&program)
            .args(&args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::lost(format!("cannot launch sidecar `{command}`: {e}")))?;
        let deadline = Instant::now() + config.timeout;
        loop {
            match TcpStream::connect(("127.0.0.1", port)) {
                Ok(stream) => return Self::from_tcp(stream, Some(child), config),
                Err(e) => {
                    if let Ok(Some(status)) = child.try_wait() {
                        return Err(BridgeError::lost(format!(
                            "sidecar exited with {status} before listening"
                        )));
                    }
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(BridgeError::new(
                            ErrorCode::Timeout,
                            format!("sidecar never listened: {e}"),
                        ));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
            }
        }
    }

    fn handshake(&mut self) -> Result<Capabilities, BridgeError> {
        let msg = BridgeMessage {
            protocol_version: Some(self.config.protocol_version),
            ..BridgeMessage::request(Op::Hello)
        };
        let reply = self.request(msg)?;
        if reply.protocol_version != Some(PROTOCOL_VERSION) {
            return Err(BridgeError::new(
                ErrorCode::Version,
                format!(
                    "sidecar speaks protocol {:?}, expected {PROTOCOL_VERSION}",
                    reply.protocol_version
                ),
            ));
        }
        self.capabilities = reply
            .capabilities
            .ok_or_else(|| BridgeError::protocol("hello reply without capabilities"))?;
        Ok(self.capabilities.clone())
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    pub fn child_id(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    pub fn is_resident(&self, model_id: &str) -> bool {
        self.resident.iter().any(|m| m == model_id)
    }

    pub fn resident_count(&self) -> usize {
        self.resident.len()
    }

    /// Recorded frames (length prefixes included) since the session opened.
    pub fn take_transcript(&mut self) -> Vec<u8> {
        self.transcript
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    fn request(&mut self, mut msg: BridgeMessage) -> Result<BridgeMessage, BridgeError> {
        if let Some(why) = &self.lost {
            return Err(BridgeError::lost(why.clone()));
        }
        let id = self.next_id;
        self.next_id += 1;
        msg.id = id;
        let frame = encode_frame(&msg);
        if let Some(t) = &mut self.transcript {
            t.extend_from_slice(&frame);
        }
        if let Err(e) = self
            .writer
            .write_all(&frame)
            .and_then(|_| self.writer.flush())
        {
            return Err(self.mark_lost(format!("write failed: {e}")));
        }
        let body = match self.frames.recv_timeout(self.config.timeout) {
            Ok(Ok(body)) => body,
            Ok(Err(e)) => return Err(self.mark_lost(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(self.mark_lost("sidecar closed the connection"))
            }
            Err(RecvTimeoutError::Timeout) => {
                self.lost = Some("previous request timed out".into());
                return Err(BridgeError::new(
                    ErrorCode::Timeout,
                    format!("no reply within {:?}", self.config.timeout),
                ));
            }
        };
        if let Some(t) = &mut self.transcript {
            t.extend_from_slice(&(body.len() as u32).to_be_bytes());
            t.extend_from_slice(&body);
        }
        let reply = match decode_frame(&body) {
            Ok(r) => r,
            Err(e) => return Err(self.mark_lost(e.message)),
        };
        if reply.op == Op::Error {
            return Err(BridgeError::new(
                reply.code.unwrap_or(ErrorCode::Other),
                reply.message.unwrap_or_default(),
            ));
        }
        if reply.id != id {
            return Err(self.mark_lost(format!(
                "reply id {} does not match request id {id}",
                reply.id
            )));
        }
        Ok(reply)
    }

    fn mark_lost(&mut self, why: impl Into<String>) -> BridgeError {
        let why = why.into();
        self.lost = Some(why.clone());
        BridgeError::lost(why)
    }

    fn touch(&mut self, model_id: &str) {
        if let Some(pos) = self.resident.iter().position(|m| m == model_id) {
            let id = self.resident.remove(pos).expect("position is valid");
            self.resident.push_back(id);
        }
    }

    /// Stores `(x, y)` under `model_id` on `backend`, replacing any earlier
    /// context. Releases the least recently used model when the resident
    /// cap would be exceeded.
    pub fn remote_fit(
        &mut self,
        model_id: &str,
        backend: &str,
        ensemble_size: u32,
        x: &DMatrix<f64>,
        y: &[f64],
        options: &FitOptions,
    ) -> Result<(), BridgeError> {
        if y.len() != x.nrows() {
            return Err(BridgeError::new(
                ErrorCode::Shape,
                format!("{} targets for {} rows", y.len(), x.nrows()),
            ));
        }
        let info = self.capabilities.backend(backend).ok_or_else(|| {
            BridgeError::new(
                ErrorCode::UnknownBackend,
                format!("sidecar does not offer backend `{backend}`"),
            )
        })?;
        if x.nrows() > info.max_context {
            return Err(BridgeError::new(
                ErrorCode::OverContext,
                format!(
                    "{} context rows exceed the limit of {}",
                    x.nrows(),
                    info.max_context
                ),
            ));
        }
        if !self.is_resident(model_id) {
            while self.resident.len() >= self.config.max_resident.max(1) {
                let oldest = self.resident.front().cloned().expect("nonempty");
                self.release(&oldest)?;
            }
        }
        let msg = BridgeMessage {
            model_id: Some(model_id.to_string()),
            backend: Some(backend.to_string()),
            ensemble_size: Some(ensemble_size),
            options: Some(options.clone()),
            x: Some(matrix_to_wire(x)),
            y: Some(vec_to_wire(y)),
            ..BridgeMessage::request(Op::Fit)
        };
        self.request(msg)?;
        if self.is_resident(model_id) {
            self.touch(model_id);
        } else {
            self.resident.push_back(model_id.to_string());
        }
        Ok(())
    }

    pub fn remote_predict(
        &mut self,
        model_id: &str,
        x: &DMatrix<f64>,
    ) -> Result<Vec<f64>, BridgeError> {
        let msg = BridgeMessage {
            model_id: Some(model_id.to_string()),
            x: Some(matrix_to_wire(x)),
            ..BridgeMessage::request(Op::Predict)
        };
        let reply = match self.request(msg) {
            Ok(r) => r,
            Err(e) => {
                if e.code == ErrorCode::UnknownModel {
                    self.resident.retain(|m| m != model_id);
                }
                return Err(e);
            }
        };
        self.touch(model_id);
        let preds = wire_to_vec(
            reply
                .predictions
                .as_deref()
                .ok_or_else(|| BridgeError::protocol("predict reply without predictions"))?,
        );
        if preds.len() != x.nrows() {
            return Err(BridgeError::new(
                ErrorCode::Shape,
                format!("{} predictions for {} rows", preds.len(), x.nrows()),
            ));
        }
        Ok(preds)
    }

    pub fn release(&mut self, model_id: &str) -> Result<(), BridgeError> {
        self.resident.retain(|m| m != model_id);
        let msg = BridgeMessage {
            model_id: Some(model_id.to_string()),
            ..BridgeMessage::request(Op::Release)
        };
        match self.request(msg) {
            Ok(_) => Ok(()),
            Err(e) if e.code == ErrorCode::UnknownModel => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Asks the backend to stop and waits for the process, if any.
    pub fn shutdown(mut self) -> Result<(), BridgeError> {
        let result = self
            .request(BridgeMessage::request(Op::Shutdown))
            .map(|_| ());
        self.reap(Duration::from_secs(2));
        result
    }

    fn reap(&mut self, grace: Duration) {
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + grace;
            loop {
                match child.try_wait() {
                    Ok(Some(_)) | Err(_) => return,
                    Ok(None) if Instant::now() >= deadline => break,
                    Ok(None) => thread::sleep(Duration::from_millis(10)),
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Drop for BridgeSession {
    fn drop(&mut self) {
        if self.child.is_some() {
            // Closing stdin ends a stdio sidecar's request loop.
            self.writer = Box::new(std::io::sink());
            self.reap(Duration::from_millis(500));
        }
    }
}

/// A fixed set of sessions handed out exclusively.
pub struct BridgePool {
    idle: Mutex<Vec<BridgeSession>>,
    available: Condvar,
    capabilities: Capabilities,
    size: usize,
    next_model: AtomicU64,
}

impl BridgePool {
    pub fn new(sessions: Vec<BridgeSession>) -> Result<Self, BridgeError> {
        let capabilities = sessions
            .first()
            .map(|s| s.capabilities().clone())
            .ok_or_else(|| BridgeError::lost("bridge pool needs at least one session"))?;
        Ok(BridgePool {
            size: sessions.len(),
            idle: Mutex::new(sessions),
            available: Condvar::new(),
            capabilities,
            next_model: AtomicU64::new(1),
        })
    }

    /// Spawns `size` stdio sidecars using `$CONDSHAP_BRIDGE_CMD` or `command`.
    pub fn spawn(command: &str, size: usize, config: SessionConfig) -> Result<Self, BridgeError> {
        Self::spawn_exact(&sidecar_command(command), size, config)
    }

    /// Spawns `size` stdio sidecars with exactly `cmd`, ignoring the
    /// environment override.
    pub fn spawn_exact(cmd: &str, size: usize, config: SessionConfig) -> Result<Self, BridgeError> {
        let sessions = (0..size.max(1))
            .map(|_| BridgeSession::spawn(cmd, config.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(sessions)
    }

    /// [`spawn`](Self::spawn) with the default sidecar command.
    pub fn from_env(size: usize, config: SessionConfig) -> Result<Self, BridgeError> {
        Self::spawn(DEFAULT_SIDECAR_CMD, size, config)
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Blocks until a session is free.
    pub fn acquire(&self) -> PooledSession<'_> {
        let mut idle = self.idle.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(s) = idle.pop() {
                return PooledSession {
                    pool: self,
                    session: Some(s),
                };
            }
            idle = self.available.wait(idle).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn try_acquire(&self) -> Option<PooledSession<'_>> {
        let mut idle = self.idle.lock().ok()?;
        idle.pop().map(|s| PooledSession {
            pool: self,
            session: Some(s),
        })
    }

    pub fn fresh_model_id(&self, prefix: &str) -> String {
        format!(
            "{prefix}-{}",
            self.next_model.fetch_add(1, Ordering::Relaxed)
        )
    }

    /// Shuts every idle session down.
    pub fn shutdown(self) -> Result<(), BridgeError> {
        let sessions = std::mem::take(&mut *self.idle.lock().unwrap_or_else(|p| p.into_inner()));
        sessions.into_iter().try_for_each(BridgeSession::shutdown)
    }
}

/// A session on loan from a [`BridgePool`]; returned on drop.
pub struct PooledSession<'a> {
    pool: &'a BridgePool,
    session: Option<BridgeSession>,
}

impl std::ops::Deref for PooledSession<'_> {
    type Target = BridgeSession;
    fn deref(&self) -> &BridgeSession {
        self.session.as_ref().expect("session present until drop")
    }
}

impl std::ops::DerefMut for PooledSession<'_> {
    fn deref_mut(&mut self) -> &mut BridgeSession {
        self.session.as_mut().expect("session present until drop")
    }
}

impl Drop for PooledSession<'_> {
    fn drop(&mut self) {
        if let Some(s) = self.session.take() {
            self.pool
                .idle
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .push(s);
            self.pool.available.notify_one();
        }
    }
}
