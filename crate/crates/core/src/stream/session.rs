//! Session files: `"SNAVLOG1"`, config JSON length (u32 LE), config JSON,
//! then encoded messages back to back.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::{decode_prefix, encode_into, CodecError, Message, HEADER_LEN, PROTOCOL_VERSION};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

pub const LOG_MAGIC: [u8; 8] = *b"SNAVLOG1";

/// File header, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub protocol_version: u8,
    pub seed: u64,
    /// SHA-256 of the session config JSON.
    pub config_digest: String,
    /// SHA-256 of the phantom JSON.
    pub phantom_digest: String,
    #[serde(default)]
    pub patient: Option<String>,
    #[serde(default)]
    pub session: Option<String>,
    /// Set on re-aligned sequences.
    #[serde(default)]
    pub aligned: bool,
    /// Frame poses before re-alignment, in frame order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_poses: Option<Vec<Option<RigidTransform>>>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub phantom: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl SessionHeader {
    /// Header with digests computed from the given config and phantom documents.
    pub fn new(seed: u64, config: serde_json::Value, phantom: serde_json::Value) -> Self {
        let config_digest = sha256_hex(config.to_string().as_bytes());
        let phantom_digest = sha256_hex(phantom.to_string().as_bytes());
        SessionHeader {
            protocol_version: PROTOCOL_VERSION,
            seed,
            config_digest,
            phantom_digest,
            patient: None,
            session: None,
            aligned: false,
            original_poses: None,
            config,
            phantom,
        }
    }

    pub fn empty() -> Self {
        Self::new(0, serde_json::Value::Null, serde_json::Value::Null)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(self)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::InvalidInput("session header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len());
        out.extend_from_slice(&LOG_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }
}

/// A whole session held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: SessionHeader,
    pub messages: Vec<Message>,
}

impl SessionLog {
    pub fn new(header: SessionHeader) -> Self {
        Self {
            header,
            messages: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.header.to_bytes()?;
        let mut last = 0u64;
        for m in &self.messages {
            check_order(last, m)?;
            last = m.timestamp_us;
            encode_into(m, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = SessionReader::new(bytes)?;
        let mut messages = Vec::new();
        while let Some(m) = reader.next_message()? {
            messages.push(m);
        }
        Ok(SessionLog {
            header: reader.header,
            messages,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = crate::phantom::VolumeFrame> + '_ {
        self.messages.iter().filter_map(|m| m.to_volume_frame())
    }
}

fn check_order(last_us: u64, m: &Message) -> Result<()> {
    if m.timestamp_us < last_us {
        return Err(Error::InvalidInput(format!(
            "message timestamp {} precedes {}",
            m.timestamp_us, last_us
        )));
    }
    Ok(())
}

/// Streaming reader over a session file.
pub struct SessionReader<R: Read> {
    inner: R,
    pub header: SessionHeader,
    last_us: u64,
    scratch: Vec<u8>,
}

impl SessionReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        SessionReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> SessionReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        inner.read_exact(&mut magic)?;
        if magic != LOG_MAGIC {
            return Err(CodecError::BadMagic.into());
        }
        let mut len = [0u8; 4];
        inner.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        let mut json = Vec::new();
        inner.by_ref().take(len as u64).read_to_end(&mut json)?;
        if json.len() != len {
            return Err(CodecError::Framing("truncated session header".into()).into());
        }
        let header: SessionHeader = serde_json::from_slice(&json)?;
        if header.protocol_version != PROTOCOL_VERSION {
            return Err(CodecError::UnsupportedVersion(header.protocol_version).into());
        }
        Ok(Self {
            inner,
            header,
            last_us: 0,
            scratch: Vec::new(),
        })
    }

    /// Next message, `Ok(None)` at a clean end of file.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        self.scratch.clear();
        self.scratch.resize(HEADER_LEN, 0);
        let mut filled = 0;
        while filled < HEADER_LEN {
            match self.inner.read(&mut self.scratch[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < HEADER_LEN {
            return Err(CodecError::Framing("truncated message header".into()).into());
        }
        // Let the codec validate magic, version and the size limit first.
        let payload_len = match decode_prefix(&self.scratch) {
            Err(CodecError::Framing(_)) => {
                u32::from_le_bytes(self.scratch[14..18].try_into().expect("4 bytes")) as usize
            }
            Err(e) => return Err(e.into()),
            Ok(_) => 0,
        };
        self.scratch.resize(HEADER_LEN + payload_len, 0);
        self.inner
            .read_exact(&mut self.scratch[HEADER_LEN..])
            .map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => {
                    Error::Codec(CodecError::Framing("truncated message payload".into()))
                }
                _ => e.into(),
            })?;
        let (msg, _) = decode_prefix(&self.scratch)?;
        check_order(self.last_us, &msg)?;
        self.last_us = msg.timestamp_us;
        Ok(Some(msg))
    }
}

impl<R: Read> Iterator for SessionReader<R> {
    type Item = Result<Message>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_message().transpose()
    }
}

pub fn read_session(path: impl AsRef<Path>) -> Result<SessionLog> {
    let mut reader = SessionReader::open(path)?;
    let mut messages = Vec::new();
    while let Some(m) = reader.next_message()? {
        messages.push(m);
    }
    Ok(SessionLog {
        header: reader.header,
        messages,
    })
}

/// Path of the in-progress file for a recording target.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Writes a session incrementally. Data goes to `<path>.partial` and is
/// renamed to `path` by [`SessionRecorder::finish`]; an aborted recording
/// leaves the `.partial` file behind as the marker.
pub struct SessionRecorder {
    target: PathBuf,
    partial: PathBuf,
    out: BufWriter<File>,
    last_us: u64,
    buf: Vec<u8>,
    count: usize,
}

impl SessionRecorder {
    pub fn create(path: impl AsRef<Path>, header: &SessionHeader) -> Result<Self> {
        let target = path.as_ref().to_path_buf();
        let partial = partial_path(&target);
        let mut out = BufWriter::new(File::create(&partial)?);
        out.write_all(&header.to_bytes()?)?;
        Ok(Self {
            target,
            partial,
            out,
            last_us: 0,
            buf: Vec::new(),
            count: 0,
        })
    }

    pub fn append(&mut self, msg: &Message) -> Result<()> {
        check_order(self.last_us, msg)?;
        self.buf.clear();
        encode_into(msg, &mut self.buf)?;
        self.out.write_all(&self.buf)?;
        self.last_us = msg.timestamp_us;
        self.count += 1;
        Ok(())
    }

    /// Appends pre-encoded bytes of one message (as received off the wire).
    pub fn append_encoded(&mut self, bytes: &[u8]) -> Result<()> {
        let (msg, used) = decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(CodecError::Framing("expected exactly one message".into()).into());
        }
        check_order(self.last_us, &msg)?;
        self.out.write_all(bytes)?;
        self.last_us = msg.timestamp_us;
        self.count += 1;
        Ok(())
    }

    pub fn message_count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        std::fs::rename(&self.partial, &self.target)?;
        Ok(self.target.clone())
    }
}

/// Records a message stream into `path`.
pub fn record_session<I>(messages: I, header: &SessionHeader, path: impl AsRef<Path>) -> Result<PathBuf>
where
    I: IntoIterator<Item = Message>,
{
    let mut rec = SessionRecorder::create(path, header)?;
    for m in messages {
        rec.append(&m)?;
    }
    rec.finish()
}
