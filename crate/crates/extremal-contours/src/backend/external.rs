//! Newline-delimited JSON wire protocol for out-of-process backends.
//!
//! Requests and responses are single JSON lines. Images travel as base64
//! little-endian float32 HWC buffers; embeddings, cotangents and logits as
//! plain JSON arrays:
//!
//! ```text
//! -> {"op":"handshake"}
//! <- {"ok":true,"dims":[H,W,C],"embed_dim":D,"supports_vjp":b,"supports_logits":b}
//! -> {"op":"embed","image":"<base64>"}          <- {"embedding":[...]}
//! -> {"op":"vjp","image":"...","cotangent":[..]} <- {"grad":"<base64>"}
//! -> {"op":"logits","image":"..."}               <- {"logits":[...]}
//! ```
//!
//! Any `{"ok":false,"error":...}` response aborts the run. Requests are
//! strictly ordered; there is no pipelining.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

use super::{BackendCapability, BackendInfo, Embedding, ModelBackend};

/// Where an external backend lives: a subprocess speaking over its standard
/// streams, or a TCP address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Command(Vec<String>),
    Tcp(String),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Command(argv) => write!(f, "cmd={}", argv.join(" ")),
            Endpoint::Tcp(addr) => write!(f, "tcp={addr}"),
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum WireRequest<'a> {
    Handshake,
    Embed {
        image: &'a str,
    },
    Vjp {
        image: &'a str,
        cotangent: &'a [f64],
    },
    Logits {
        image: &'a str,
    },
}

#[derive(Deserialize, Default)]
struct WireResponse {
    ok: Option<bool>,
    error: Option<serde_json::Value>,
    dims: Option<[usize; 3]>,
    embed_dim: Option<usize>,
    supports_vjp: Option<bool>,
    supports_logits: Option<bool>,
    embedding: Option<Vec<f64>>,
    grad: Option<String>,
    logits: Option<Vec<f64>>,
}

trait Transport: Send {
    fn send(&mut self, line: &str) -> std::io::Result<()>;
    fn recv(&mut self) -> std::io::Result<String>;
}

struct StreamTransport<R: BufRead + Send, W: Write + Send> {
    reader: R,
    writer: W,
}

impl<R: BufRead + Send, W: Write + Send> Transport for StreamTransport<R, W> {
    fn send(&mut self, line: &str) -> std::io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }

    fn recv(&mut self) -> std::io::Result<String> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "backend closed the connection",
            ));
        }
        Ok(line)
    }
}

/// Backend speaking the wire protocol over a subprocess or TCP socket.
/// Capabilities are negotiated once at connect time.
pub struct ExternalBackend {
    transport: Box<dyn Transport>,
    info: BackendInfo,
    endpoint: Endpoint,
    // kept so the subprocess is reaped on drop
    child: Option<Child>,
}

impl ExternalBackend {
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        let transport_err =
            |e: std::io::Error| Error::Transport(format!("{endpoint}: {e}"));
        let (transport, child): (Box<dyn Transport>, Option<Child>) = match endpoint {
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(transport_err)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (
                    Box::new(StreamTransport {
                        reader: BufReader::new(stdout),
                        writer: stdin,
                    }),
                    Some(child),
                )
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(transport_err)?;
                let reader = BufReader::new(stream.try_clone().map_err(transport_err)?);
                (
                    Box::new(StreamTransport {
                        reader,
                        writer: stream,
                    }),
                    None,
                )
            }
        };

        let mut backend = ExternalBackend {
            transport,
            info: BackendInfo {
                height: 0,
                width: 0,
                channels: 0,
                embed_dim: 0,
                capability: BackendCapability {
                    supports_input_vjp: false,
                    supports_logits: false,
                },
            },
            endpoint: endpoint.clone(),
            child,
        };
        let resp = backend.roundtrip(&WireRequest::Handshake)?;
        if resp.ok != Some(true) {
            return Err(Error::Protocol(format!(
                "{endpoint}: handshake not acknowledged"
            )));
        }
        let dims = resp
            .dims
            .ok_or_else(|| Error::Protocol(format!("{endpoint}: handshake missing dims")))?;
        let embed_dim = resp
            .embed_dim
            .ok_or_else(|| Error::Protocol(format!("{endpoint}: handshake missing embed_dim")))?;
        backend.info = BackendInfo {
            height: dims[0],
            width: dims[1],
            channels: dims[2],
            embed_dim,
            capability: BackendCapability {
                supports_input_vjp: resp.supports_vjp.unwrap_or(false),
                supports_logits: resp.supports_logits.unwrap_or(false),
            },
        };
        Ok(backend)
    }

    fn roundtrip(&mut self, req: &WireRequest) -> Result<WireResponse> {
        let line = serde_json::to_string(req)
            .map_err(|e| Error::Protocol(format!("{}: encode: {e}", self.endpoint)))?;
        self.transport
            .send(&line)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let reply = self
            .transport
            .recv()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let resp: WireResponse = serde_json::from_str(reply.trim())
            .map_err(|e| Error::Protocol(format!("{}: bad response: {e}", self.endpoint)))?;
        if resp.ok == Some(false) {
            let detail = resp
                .error
                .map(|v| v.to_string())
                .unwrap_or_else(|| "unspecified error".into());
            return Err(Error::Transport(format!(
                "{}: backend reported {detail}",
                self.endpoint
            )));
        }
        Ok(resp)
    }

    fn encode_image(&self, x: &ImageTensor) -> Result<String> {
        self.info.check_dims(x)?;
        Ok(BASE64.encode(x.to_f32_bytes()))
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl ModelBackend for ExternalBackend {
    fn info(&self) -> BackendInfo {
        self.info
    }

    fn embed(&mut self, x: &ImageTensor) -> Result<Embedding> {
        let image = self.encode_image(x)?;
        let resp = self.roundtrip(&WireRequest::Embed { image: &image })?;
        let values = resp
            .embedding
            .ok_or_else(|| Error::Protocol(format!("{}: missing embedding", self.endpoint)))?;
        if values.len() != self.info.embed_dim {
            return Err(Error::Protocol(format!(
                "{}: embedding has dim {} but handshake promised {}",
                self.endpoint,
                values.len(),
                self.info.embed_dim
            )));
        }
        Ok(Embedding::new(values))
    }

    fn input_vjp(&mut self, x: &ImageTensor, cotangent: &Embedding) -> Result<Vec<f64>> {
        if !self.info.capability.supports_input_vjp {
            return Err(Error::Unsupported("input_vjp"));
        }
        let image = self.encode_image(x)?;
        let resp = self.roundtrip(&WireRequest::Vjp {
            image: &image,
            cotangent: cotangent.values(),
        })?;
        let b64 = resp
            .grad
            .ok_or_else(|| Error::Protocol(format!("{}: missing grad", self.endpoint)))?;
        let bytes = BASE64
            .decode(b64.as_bytes())
            .map_err(|e| Error::Protocol(format!("{}: grad base64: {e}", self.endpoint)))?;
        let expected = x.values().len() * 4;
        if bytes.len() != expected {
            return Err(Error::Protocol(format!(
                "{}: grad payload is {} bytes, expected {expected}",
                self.endpoint,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }

    fn logits(&mut self, x: &ImageTensor) -> Result<Vec<f64>> {
        if !self.info.capability.supports_logits {
            return Err(Error::Unsupported("logits"));
        }
        let image = self.encode_image(x)?;
        let resp = self.roundtrip(&WireRequest::Logits { image: &image })?;
        resp.logits
            .ok_or_else(|| Error::Protocol(format!("{}: missing logits", self.endpoint)))
    }
}

#[derive(Deserialize)]
struct IncomingRequest {
    op: String,
    image: Option<String>,
    cotangent: Option<Vec<f64>>,
}

/// Serve a backend over the wire protocol until EOF. This is the other side
/// of [`ExternalBackend`]; the CLI exposes it so any builtin backend can be
/// mounted as a subprocess or socket endpoint.
pub fn serve_backend(
    backend: &mut dyn ModelBackend,
    reader: impl BufRead,
    mut writer: impl Write,
) -> Result<()> {
    let info = backend.info();
    let decode_image = |b64: Option<String>| -> Result<ImageTensor> {
        let b64 = b64.ok_or_else(|| Error::Protocol("request missing image".into()))?;
        let bytes = BASE64
            .decode(b64.as_bytes())
            .map_err(|e| Error::Protocol(format!("image base64: {e}")))?;
        ImageTensor::from_f32_bytes(&bytes, info.height, info.width, info.channels)
    };

    for line in reader.lines() {
        let line = line.map_err(|e| Error::Transport(format!("serve: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<IncomingRequest>(&line) {
            Err(e) => serde_json::json!({"ok": false, "error": format!("bad request: {e}")}),
            Ok(req) => match req.op.as_str() {
                "handshake" => serde_json::json!({
                    "ok": true,
                    "dims": [info.height, info.width, info.channels],
                    "embed_dim": info.embed_dim,
                    "supports_vjp": info.capability.supports_input_vjp,
                    "supports_logits": info.capability.supports_logits,
                }),
                "embed" => match decode_image(req.image).and_then(|x| backend.embed(&x)) {
                    Ok(e) => serde_json::json!({"embedding": e.values()}),
                    Err(e) => serde_json::json!({"ok": false, "error": e.to_string()}),
                },
                "vjp" => {
                    let cot = req.cotangent.map(Embedding::new);
                    let run = || -> Result<Vec<f64>> {
                        let x = decode_image(req.image)?;
                        let cot =
                            cot.ok_or_else(|| Error::Protocol("missing cotangent".into()))?;
                        backend.input_vjp(&x, &cot)
                    };
                    match run() {
                        Ok(grad) => {
                            let mut bytes = Vec::with_capacity(grad.len() * 4);
                            for v in grad {
                                bytes.extend_from_slice(&(v as f32).to_le_bytes());
                            }
                            serde_json::json!({"grad": BASE64.encode(bytes)})
                        }
                        Err(e) => serde_json::json!({"ok": false, "error": e.to_string()}),
                    }
                }
                "logits" => match decode_image(req.image).and_then(|x| backend.logits(&x)) {
                    Ok(l) => serde_json::json!({"logits": l}),
                    Err(e) => serde_json::json!({"ok": false, "error": e.to_string()}),
                },
                other => serde_json::json!({"ok": false, "error": format!("unknown op `{other}`")}),
            },
        };
        let mut out = serde_json::to_string(&reply)
            .map_err(|e| Error::Protocol(format!("serve encode: {e}")))?;
        out.push('\n');
        writer
            .write_all(out.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Transport(format!("serve: {e}")))?;
    }
    Ok(())
}
