//! Client side of the external feature/scoring worker.
//!
//! Frames are `u32 len | u8 opcode | payload` with `len` counting payload
//! bytes only, all integers little-endian. Opcodes:
//!
//! * `0 HELLO`: client sends `{"version":1}`, worker replies with its
//!   [`BridgeHandshake`] as JSON.
//! * `1 EXTRACT`: request `{"image":..,"x":..,"y":..,"w":..,"h":..}`, reply
//!   is an FMAP1 tensor.
//! * `2 SCORE`: request is an FMAP1 tensor, reply is K float32 scores.
//! * `3 ERROR`: worker-side failure, `{"code":..,"message":..}`.
//! * `4 BYE`: client asks the worker to exit.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::FeatureProvider;
use crate::error::{BridgeError, Error, Result};
use crate::format;
use crate::scoring::{ClassScores, ScoringHead};
use crate::tensor::{FeatureMap, PixelRect};

pub const PROTOCOL_VERSION: u32 = 1;
/// Environment variable naming the worker executable.
pub const BRIDGE_ENV: &str = "BEAMLOC_BRIDGE";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Hello = 0,
    Extract = 1,
    Score = 2,
    Error = 3,
    Bye = 4,
}

impl TryFrom<u8> for Opcode {
    type Error = BridgeError;

    fn try_from(v: u8) -> std::result::Result<Self, BridgeError> {
        Ok(match v {
            0 => Opcode::Hello,
            1 => Opcode::Extract,
            2 => Opcode::Score,
            3 => Opcode::Error,
            4 => Opcode::Bye,
            other => return Err(BridgeError::Protocol(format!("unknown opcode {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, payload: impl Into<Vec<u8>>) -> Self {
        Frame {
            opcode,
            payload: payload.into(),
        }
    }

    pub fn error(code: &str, message: &str) -> Self {
        let body = ErrorBody {
            code: code.to_owned(),
            message: message.to_owned(),
        };
        Frame::new(Opcode::Error, serde_json::to_vec(&body).expect("plain struct"))
    }
}

pub fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> io::Result<()> {
    let len = u32::try_from(frame.payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&[frame.opcode as u8])?;
    out.write_all(&frame.payload)?;
    out.flush()
}

/// Reads one frame. `Ok(None)` means a clean end of stream between frames.
pub fn read_frame<R: Read>(input: &mut R) -> std::result::Result<Option<Frame>, BridgeError> {
    let mut len = [0u8; 4];
    match input.read(&mut len[..1]) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e) => return Err(BridgeError::Transport(e)),
    }
    let short = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            BridgeError::Protocol("stream ended mid-frame".into())
        } else {
            BridgeError::Transport(e)
        }
    };
    input.read_exact(&mut len[1..]).map_err(short)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(BridgeError::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut op = [0u8; 1];
    input.read_exact(&mut op).map_err(short)?;
    let opcode = Opcode::try_from(op[0])?;
    let mut payload = vec![0u8; len as usize];
    input.read_exact(&mut payload).map_err(short)?;
    Ok(Some(Frame { opcode, payload }))
}

/// Session constants announced by the worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeHandshake {
    pub version: u32,
    #[serde(rename = "L")]
    pub grid: usize,
    #[serde(rename = "T")]
    pub channels: usize,
    #[serde(rename = "K")]
    pub classes: usize,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub image: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HelloRequest {
    version: u32,
}

type Incoming = std::result::Result<Frame, BridgeError>;

/// One connection to a worker; one request in flight at a time.
pub struct BridgeClient {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<Incoming>,
    reader: Option<JoinHandle<()>>,
    child: Option<Child>,
    handshake: BridgeHandshake,
    timeout: Duration,
    /// Set after a timeout or transport failure: the stream can no longer be
    /// trusted to be frame-aligned.
    broken: bool,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("handshake", &self.handshake)
            .field("timeout", &self.timeout)
            .field("broken", &self.broken)
            .finish_non_exhaustive()
    }
}

impl BridgeClient {
    /// Performs the HELLO exchange over an arbitrary byte transport.
    pub fn connect<R, W>(reader: R, writer: W, timeout: Duration) -> std::result::Result<Self, BridgeError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        let handle = std::thread::Builder::new()
            .name("bridge-reader".into())
            .spawn(move || {
                let mut reader = BufReader::new(reader);
                loop {
                    let msg = match read_frame(&mut reader) {
                        Ok(Some(frame)) => Ok(frame),
                        Ok(None) => Err(BridgeError::Closed),
                        Err(e) => Err(e),
                    };
                    let stop = msg.is_err();
                    if tx.send(msg).is_err() || stop {
                        break;
                    }
                }
            })
            .map_err(BridgeError::Transport)?;
        let mut client = BridgeClient {
            writer: Box::new(BufWriter::new(writer)),
            incoming: rx,
            reader: Some(handle),
            child: None,
            handshake: BridgeHandshake {
                version: 0,
                grid: 0,
                channels: 0,
                classes: 0,
                model: String::new(),
            },
            timeout,
            broken: false,
        };
        let hello = serde_json::to_vec(&HelloRequest {
            version: PROTOCOL_VERSION,
        })
        .expect("plain struct");
        let reply = client.request(Frame::new(Opcode::Hello, hello), Opcode::Hello)?;
        let hs: BridgeHandshake = serde_json::from_slice(&reply)
            .map_err(|e| BridgeError::Protocol(format!("bad handshake payload: {e}")))?;
        if hs.version != PROTOCOL_VERSION {
            return Err(BridgeError::Protocol(format!(
                "worker speaks protocol {}, expected {PROTOCOL_VERSION}",
                hs.version
            )));
        }
        if hs.grid < 2 || hs.channels == 0 || hs.classes == 0 {
            return Err(BridgeError::Protocol(format!("degenerate handshake {hs:?}")));
        }
        client.handshake = hs;
        Ok(client)
    }

    /// Starts `program` with piped stdio and connects to it.
    pub fn spawn<I, S>(program: impl AsRef<Path>, args: I, timeout: Duration) -> std::result::Result<Self, BridgeError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<std::ffi::OsStr>,
    {
        let mut child = Command::new(program.as_ref())
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(BridgeError::Transport)?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        match BridgeClient::connect(stdout, stdin, timeout) {
            Ok(mut client) => {
                client.child = Some(child);
                Ok(client)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Spawns the executable named by `BEAMLOC_BRIDGE`.
    pub fn from_env(timeout: Duration) -> std::result::Result<Self, BridgeError> {
        let program = std::env::var_os(BRIDGE_ENV).ok_or_else(|| {
            BridgeError::Transport(io::Error::new(
                io::ErrorKind::NotFound,
                format!("{BRIDGE_ENV} is not set"),
            ))
        })?;
        BridgeClient::spawn(program, std::iter::empty::<&str>(), timeout)
    }

    pub fn handshake(&self) -> &BridgeHandshake {
        &self.handshake
    }

    fn request(&mut self, frame: Frame, expect: Opcode) -> std::result::Result<Vec<u8>, BridgeError> {
        if self.broken {
            return Err(BridgeError::Protocol("connection unusable after an earlier failure".into()));
        }
        if let Err(e) = write_frame(&mut self.writer, &frame) {
            self.broken = true;
            return Err(match e.kind() {
                io::ErrorKind::BrokenPipe => BridgeError::Closed,
                _ => BridgeError::Transport(e),
            });
        }
        let reply = match self.incoming.recv_timeout(self.timeout) {
            Ok(Ok(frame)) => frame,
            Ok(Err(e)) => {
                self.broken = true;
                return Err(e);
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                return Err(BridgeError::Timeout(self.timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                return Err(BridgeError::Closed);
            }
        };
        match reply.opcode {
            op if op == expect => Ok(reply.payload),
            Opcode::Error => {
                let body: ErrorBody = serde_json::from_slice(&reply.payload).unwrap_or_else(|_| ErrorBody {
                    code: "unknown".into(),
                    message: String::from_utf8_lossy(&reply.payload).into_owned(),
                });
                Err(BridgeError::Remote {
                    code: body.code,
                    message: body.message,
                })
            }
            other => {
                self.broken = true;
                Err(BridgeError::Protocol(format!(
                    "expected {expect:?} reply, got {other:?}"
                )))
            }
        }
    }

    /// Feature map of `crop` within the image at `image`.
    pub fn extract(&mut self, image: &str, crop: PixelRect) -> std::result::Result<FeatureMap, BridgeError> {
        let req = ExtractRequest {
            image: image.to_owned(),
            x: crop.x,
            y: crop.y,
            w: crop.w,
            h: crop.h,
        };
        let payload = serde_json::to_vec(&req).expect("plain struct");
        let reply = self.request(Frame::new(Opcode::Extract, payload), Opcode::Extract)?;
        self.decode_tensor(&reply)
    }

    fn decode_tensor(&mut self, bytes: &[u8]) -> std::result::Result<FeatureMap, BridgeError> {
        if bytes.len() < format::HEADER_LEN {
            return Err(BridgeError::Protocol("tensor payload shorter than header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (l, t) = (word(8), word(12));
        let hs = &self.handshake;
        if &bytes[0..4] == b"FMAP" && (l != hs.grid || t != hs.channels) {
            return Err(BridgeError::DimensionMismatch {
                expected: format!("{0}x{0}x{1}", hs.grid, hs.channels),
                actual: format!("{l}x{l}x{t}"),
            });
        }
        let expected = format::HEADER_LEN + hs.grid * hs.grid * hs.channels * 4;
        if bytes.len() != expected {
            return Err(BridgeError::DimensionMismatch {
                expected: format!("{expected} bytes"),
                actual: format!("{} bytes", bytes.len()),
            });
        }
        format::fmap_from_bytes(bytes).map_err(|e| BridgeError::Protocol(e.to_string()))
    }

    /// Raw class scores for a (reconstructed) feature map.
    pub fn score(&mut self, map: &FeatureMap) -> std::result::Result<Vec<f64>, BridgeError> {
        let hs = &self.handshake;
        if map.grid_size() != hs.grid || map.channels() != hs.channels {
            return Err(BridgeError::DimensionMismatch {
                expected: format!("{0}x{0}x{1}", hs.grid, hs.channels),
                actual: format!("{0}x{0}x{1}", map.grid_size(), map.channels()),
            });
        }
        let k = hs.classes;
        let reply = self.request(Frame::new(Opcode::Score, format::fmap_to_bytes(map)), Opcode::Score)?;
        if reply.len() != k * 4 {
            return Err(BridgeError::DimensionMismatch {
                expected: format!("{k} scores"),
                actual: format!("{} bytes", reply.len()),
            });
        }
        Ok(reply
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    /// Sends BYE and waits for the worker process, if any, to exit.
    pub fn shutdown(mut self) -> std::result::Result<Option<std::process::ExitStatus>, BridgeError> {
        self.close()
    }

    fn close(&mut self) -> std::result::Result<Option<std::process::ExitStatus>, BridgeError> {
        if !self.broken {
            let _ = write_frame(&mut self.writer, &Frame::new(Opcode::Bye, Vec::new()));
        }
        self.broken = true;
        // Dropping our end of stdin lets a worker that missed BYE see EOF.
        self.writer = Box::new(io::sink());
        let status = match self.child.take() {
            Some(mut child) => Some(child.wait().map_err(BridgeError::Transport)?),
            None => None,
        };
        if let Some(handle) = self.reader.take() {
            if status.is_some() {
                let _ = handle.join();
            }
        }
        Ok(status)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            if self.broken {
                let _ = child.kill();
            }
        }
        let _ = self.close();
    }
}

/// Shared handle so a provider and a head can use the same worker.
pub type SharedClient = Arc<Mutex<BridgeClient>>;

fn lock(client: &SharedClient) -> std::sync::MutexGuard<'_, BridgeClient> {
    client.lock().unwrap_or_else(|p| p.into_inner())
}

/// [`FeatureProvider`] backed by a worker; images are paths the worker can open.
#[derive(Debug, Clone)]
pub struct BridgeProvider {
    client: SharedClient,
    grid: usize,
    channels: usize,
}

impl BridgeProvider {
    pub fn new(client: SharedClient) -> Self {
        let (grid, channels) = {
            let c = lock(&client);
            (c.handshake().grid, c.handshake().channels)
        };
        BridgeProvider {
            client,
            grid,
            channels,
        }
    }
}

impl FeatureProvider for BridgeProvider {
    type Image = str;

    fn grid_size(&self) -> usize {
        self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &str, crop: PixelRect) -> Result<FeatureMap> {
        Ok(lock(&self.client).extract(image, crop)?)
    }
}

/// [`ScoringHead`] that forwards reconstructed maps to the worker's classifier.
#[derive(Debug, Clone)]
pub struct BridgeHead {
    client: SharedClient,
    classes: usize,
}

impl BridgeHead {
    pub fn new(client: SharedClient) -> Self {
        let classes = lock(&client).handshake().classes;
        BridgeHead { client, classes }
    }
}

impl ScoringHead for BridgeHead {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn score(&self, map: &FeatureMap) -> Result<ClassScores> {
        let raw = lock(&self.client).score(map)?;
        ClassScores::new(raw).map_err(|e| Error::Bridge(BridgeError::Protocol(e.to_string())))
    }
}
