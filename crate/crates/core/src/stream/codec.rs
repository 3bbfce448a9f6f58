//! Length-prefixed little-endian message codec.
//!
//! ```text
//! magic "SNAV" | version u8 | kind u8 | timestamp_us u64 | payload_len u32 | payload
//! ```
//!
//! Frame payload: pose (7 × f64: w, x, y, z, tx, ty, tz), dims (3 × u16),
//! voxel size (3 × f32, mm), raw 8-bit voxels. A frame without a tracked
//! pose carries NaN in all seven pose fields.
//!
//! Tracker payload: pose (7 × f64), quality (f32), dropout flag (u8). Dropout
//! samples carry a zeroed pose which the decoder ignores.
//!
//! Control payload: UTF-8 `key=value` lines joined by `\n`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::phantom::VolumeFrame;

pub const MAGIC: [u8; 4] = *b"SNAV";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 4;
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

const POSE_LEN: usize = 7 * 8;
/// Frame payload bytes before the voxels.
pub const FRAME_PREAMBLE_LEN: usize = POSE_LEN + 3 * 2 + 3 * 4;
pub const TRACKER_PAYLOAD_LEN: usize = POSE_LEN + 4 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("protocol error: bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("payload of {0} bytes exceeds the 256 MiB limit")]
    Oversize(usize),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Frame = 1,
    Tracker = 2,
    Control = 3,
}

impl MessageKind {
    fn from_byte(b: u8) -> Result<Self, CodecError> {
        match b {
            1 => Ok(MessageKind::Frame),
            2 => Ok(MessageKind::Tracker),
            3 => Ok(MessageKind::Control),
            other => Err(CodecError::UnknownKind(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePayload {
    pub pose: Option<RigidTransform>,
    pub dims: [u16; 3],
    pub voxel_size: [f32; 3],
    pub voxels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackerPayload {
    Sample { pose: RigidTransform, quality: f32 },
    Dropout,
}

/// Ordered `key=value` entries. Keys are non-empty and contain neither `=`
/// nor `\n`; values contain no `\n`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlPayload {
    pub entries: Vec<(String, String)>,
}

impl ControlPayload {
    pub fn event(name: &str) -> Self {
        Self {
            entries: vec![("event".to_string(), name.to_string())],
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn validate(&self) -> Result<(), CodecError> {
        for (k, v) in &self.entries {
            if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(CodecError::InvalidPayload(format!(
                    "control entry {k:?}={v:?} is not encodable"
                )));
            }
        }
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| CodecError::InvalidPayload("control payload is not UTF-8".into()))?;
        if text.is_empty() {
            return Ok(Self::default());
        }
        let entries = text
            .split('\n')
            .map(|line| match line.split_once('=') {
                Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
                _ => Err(CodecError::InvalidPayload(format!(
                    "malformed control line {line:?}"
                ))),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

/// Operator feedback condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Bmode,
    Tracked,
    Blind,
}

impl FeedbackMode {
    pub const ALL: [FeedbackMode; 3] = [FeedbackMode::Bmode, FeedbackMode::Tracked, FeedbackMode::Blind];

    pub fn as_str(&self) -> &'static str {
        match self {
            FeedbackMode::Bmode => "bmode",
            FeedbackMode::Tracked => "tracked",
            FeedbackMode::Blind => "blind",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bmode" => Some(FeedbackMode::Bmode),
            "tracked" => Some(FeedbackMode::Tracked),
            "blind" => Some(FeedbackMode::Blind),
            _ => None,
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed view of the control events the session service understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlEvent {
    CaptureReference,
    Flash,
    InfusionStart,
    InfusionStop,
    FeedbackMode(FeedbackMode),
}

impl ControlEvent {
    pub fn to_payload(&self) -> ControlPayload {
        match self {
            ControlEvent::CaptureReference => ControlPayload::event("capture_reference"),
            ControlEvent::Flash => ControlPayload::event("flash"),
            ControlEvent::InfusionStart => ControlPayload::event("infusion_start"),
            ControlEvent::InfusionStop => ControlPayload::event("infusion_stop"),
            ControlEvent::FeedbackMode(mode) => {
                ControlPayload::event("feedback_mode").with("mode", mode.as_str())
            }
        }
    }

    pub fn from_payload(payload: &ControlPayload) -> Option<Self> {
        match payload.get("event")? {
            "capture_reference" => Some(ControlEvent::CaptureReference),
            "flash" => Some(ControlEvent::Flash),
            "infusion_start" => Some(ControlEvent::InfusionStart),
            "infusion_stop" => Some(ControlEvent::InfusionStop),
            "feedback_mode" => FeedbackMode::parse(payload.get("mode")?).map(ControlEvent::FeedbackMode),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Frame(FramePayload),
    Tracker(TrackerPayload),
    Control(ControlPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    /// Microseconds since session start.
    pub timestamp_us: u64,
    pub body: MessageBody,
}

/// Seconds → whole microseconds (rounded).
pub fn seconds_to_us(t: f64) -> u64 {
    (t * 1e6).round().max(0.0) as u64
}

pub fn us_to_seconds(us: u64) -> f64 {
    us as f64 / 1e6
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self.body {
            MessageBody::Frame(_) => MessageKind::Frame,
            MessageBody::Tracker(_) => MessageKind::Tracker,
            MessageBody::Control(_) => MessageKind::Control,
        }
    }

    pub fn timestamp_s(&self) -> f64 {
        us_to_seconds(self.timestamp_us)
    }

    pub fn control(timestamp_us: u64, event: ControlEvent) -> Self {
        Message {
            timestamp_us,
            body: MessageBody::Control(event.to_payload()),
        }
    }

    pub fn tracker(timestamp_us: u64, payload: TrackerPayload) -> Self {
        Message {
            timestamp_us,
            body: MessageBody::Tracker(payload),
        }
    }

    /// Wraps a volume frame. Dimensions must fit in `u16`; voxel sizes are
    /// narrowed to `f32` and the timestamp rounded to microseconds.
    pub fn frame(frame: &VolumeFrame) -> Result<Self, CodecError> {
        let dims = frame.dims.map(|d| u16::try_from(d).ok());
        let [Some(nx), Some(ny), Some(nz)] = dims else {
            return Err(CodecError::InvalidPayload(format!(
                "frame dims {:?} exceed u16",
                frame.dims
            )));
        };
        Ok(Message {
            timestamp_us: seconds_to_us(frame.timestamp),
            body: MessageBody::Frame(FramePayload {
                pose: frame.pose,
                dims: [nx, ny, nz],
                voxel_size: frame.voxel_size.map(|v| v as f32),
                voxels: frame.voxels.clone(),
            }),
        })
    }

    /// The frame carried by this message, if any.
    pub fn to_volume_frame(&self) -> Option<VolumeFrame> {
        match &self.body {
            MessageBody::Frame(f) => Some(VolumeFrame {
                timestamp: self.timestamp_s(),
                pose: f.pose,
                dims: f.dims.map(usize::from),
                voxel_size: f.voxel_size.map(f64::from),
                voxels: f.voxels.clone(),
            }),
            _ => None,
        }
    }
}

fn put_pose(out: &mut Vec<u8>, pose: Option<&RigidTransform>, missing: f64) {
    match pose {
        Some(p) => {
            for v in p.quaternion_wxyz().iter().chain(p.translation_mm().iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => {
            for _ in 0..7 {
                out.extend_from_slice(&missing.to_le_bytes());
            }
        }
    }
}

fn payload_len(body: &MessageBody) -> usize {
    match body {
        MessageBody::Frame(f) => FRAME_PREAMBLE_LEN + f.voxels.len(),
        MessageBody::Tracker(_) => TRACKER_PAYLOAD_LEN,
        MessageBody::Control(c) => c
            .entries
            .iter()
            .map(|(k, v)| k.len() + v.len() + 1)
            .sum::<usize>()
            + c.entries.len().saturating_sub(1),
    }
}

/// Total encoded size of a message.
pub fn encoded_len(msg: &Message) -> usize {
    HEADER_LEN + payload_len(&msg.body)
}

/// Appends the encoding of `msg` to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let len = payload_len(&msg.body);
    if len > MAX_PAYLOAD {
        return Err(CodecError::Oversize(len));
    }
    match &msg.body {
        MessageBody::Frame(f) => {
            let expected: usize = f.dims.iter().map(|&d| d as usize).product();
            if expected != f.voxels.len() {
                return Err(CodecError::InvalidPayload(format!(
                    "dims {:?} need {expected} voxels, got {}",
                    f.dims,
                    f.voxels.len()
                )));
            }
        }
        MessageBody::Tracker(TrackerPayload::Sample { quality, .. }) if !(*quality >= 0.0) || !quality.is_finite() => {
            return Err(CodecError::InvalidPayload("tracker quality must be finite and >= 0".into()));
        }
        MessageBody::Control(c) => c.validate()?,
        _ => {}
    }

    out.reserve(HEADER_LEN + len);
    out.extend_from_slice(&MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&msg.timestamp_us.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    match &msg.body {
        MessageBody::Frame(f) => {
            put_pose(out, f.pose.as_ref(), f64::NAN);
            for d in f.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for s in f.voxel_size {
                out.extend_from_slice(&s.to_le_bytes());
            }
            out.extend_from_slice(&f.voxels);
        }
        MessageBody::Tracker(TrackerPayload::Sample { pose, quality }) => {
            put_pose(out, Some(pose), 0.0);
            out.extend_from_slice(&quality.to_le_bytes());
            out.push(0);
        }
        MessageBody::Tracker(TrackerPayload::Dropout) => {
            put_pose(out, None, 0.0);
            out.extend_from_slice(&0f32.to_le_bytes());
            out.push(1);
        }
        MessageBody::Control(c) => out.extend_from_slice(&c.to_bytes()),
    }
    Ok(())
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(encoded_len(msg));
    encode_into(msg, &mut out)?;
    Ok(out)
}

/// Bounds-checked little-endian reader over a payload.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CodecError::Framing("payload shorter than its layout".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn pose(&mut self) -> Result<[f64; 7], CodecError> {
        let mut v = [0.0; 7];
        for x in &mut v {
            *x = self.f64()?;
        }
        Ok(v)
    }
}

fn pose_from(raw: [f64; 7]) -> Result<RigidTransform, CodecError> {
    RigidTransform::from_components([raw[0], raw[1], raw[2], raw[3]], [raw[4], raw[5], raw[6]])
        .map_err(|e| CodecError::InvalidPayload(e.to_string()))
}

fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<MessageBody, CodecError> {
    let mut r = Reader { buf: payload, pos: 0 };
    match kind {
        MessageKind::Frame => {
            let raw = r.pose()?;
            let pose = if raw.iter().all(|v| v.is_nan()) {
                None
            } else {
                Some(pose_from(raw)?)
            };
            let dims = [r.u16()?, r.u16()?, r.u16()?];
            let voxel_size = [r.f32()?, r.f32()?, r.f32()?];
            if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(CodecError::InvalidPayload("voxel size must be positive".into()));
            }
            let voxels = r.rest();
            let expected: usize = dims.iter().map(|&d| d as usize).product();
            if voxels.len() != expected {
                return Err(CodecError::Framing(format!(
                    "frame dims {dims:?} need {expected} voxels, payload has {}",
                    voxels.len()
                )));
            }
            Ok(MessageBody::Frame(FramePayload {
                pose,
                dims,
                voxel_size,
                voxels: voxels.to_vec(),
            }))
        }
        MessageKind::Tracker => {
            if payload.len() != TRACKER_PAYLOAD_LEN {
                return Err(CodecError::Framing(format!(
                    "tracker payload must be {TRACKER_PAYLOAD_LEN} bytes, got {}",
                    payload.len()
                )));
            }
            let raw = r.pose()?;
            let quality = r.f32()?;
            match r.take(1)?[0] {
                0 => {
                    if !(quality.is_finite() && quality >= 0.0) {
                        return Err(CodecError::InvalidPayload("bad tracker quality".into()));
                    }
                    Ok(MessageBody::Tracker(TrackerPayload::Sample {
                        pose: pose_from(raw)?,
                        quality,
                    }))
                }
                1 => Ok(MessageBody::Tracker(TrackerPayload::Dropout)),
                other => Err(CodecError::InvalidPayload(format!("dropout flag {other}"))),
            }
        }
        MessageKind::Control => Ok(MessageBody::Control(ControlPayload::from_bytes(payload)?)),
    }
}

/// Parsed fixed header.
#[derive(Debug, Clone, Copy)]
struct Header {
    kind: u8,
    timestamp_us: u64,
    payload_len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Framing(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Framing(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[4] != PROTOCOL_VERSION {
        return Err(CodecError::UnsupportedVersion(bytes[4]));
    }
    let timestamp_us = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let payload_len = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(CodecError::Oversize(payload_len));
    }
    Ok(Header {
        kind: bytes[5],
        timestamp_us,
        payload_len,
    })
}

/// Decodes the first message in `bytes`, returning it with the number of
/// bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), CodecError> {
    let header = parse_header(bytes)?;
    let kind = MessageKind::from_byte(header.kind)?;
    let total = HEADER_LEN + header.payload_len;
    if bytes.len() < total {
        return Err(CodecError::Framing(format!(
            "truncated: declared {} payload bytes, {} available",
            header.payload_len,
            bytes.len() - HEADER_LEN
        )));
    }
    let body = decode_payload(kind, &bytes[HEADER_LEN..total])?;
    Ok((
        Message {
            timestamp_us: header.timestamp_us,
            body,
        },
        total,
    ))
}

/// Decodes exactly one message; trailing bytes are a framing error.
pub fn decode_message(bytes: &[u8]) -> Result<Message, CodecError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CodecError::Framing(format!(
            "{} trailing bytes after message",
            bytes.len() - used
        )));
    }
    Ok(msg)
}

fn find_magic(buf: &[u8], from: usize) -> Option<usize> {
    buf.get(from..)?
        .windows(MAGIC.len())
        .position(|w| w == MAGIC)
        .map(|p| p + from)
}

/// Incremental decoder for a byte stream. Malformed input is reported once
/// and the decoder resynchronises at the next magic.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete message, `None` when more bytes are needed.
    pub fn next_message(&mut self) -> Option<Result<Message, CodecError>> {
        loop {
            if self.buf.is_empty() {
                return None;
            }
            if self.buf.len() < MAGIC.len() {
                if MAGIC.starts_with(&self.buf) {
                    return None;
                }
                let err = CodecError::BadMagic;
                self.resync(1);
                return Some(Err(err));
            }
            let header = match parse_header(&self.buf) {
                Ok(h) => h,
                Err(CodecError::Framing(_)) => return None,
                Err(e) => {
                    self.resync(1);
                    return Some(Err(e));
                }
            };
            let total = HEADER_LEN + header.payload_len;
            if self.buf.len() < total {
                return None;
            }
            let result = decode_prefix(&self.buf[..total]).map(|(m, _)| m);
            match result {
                Ok(msg) => {
                    self.buf.drain(..total);
                    return Some(Ok(msg));
                }
                Err(e) => {
                    self.resync(1);
                    return Some(Err(e));
                }
            }
        }
    }

    fn resync(&mut self, skip: usize) {
        let start = find_magic(&self.buf, skip).unwrap_or_else(|| {
            // Keep a possible partial magic at the tail.
            let keep = (1..MAGIC.len())
                .rev()
                .find(|&k| self.buf.len() >= k && MAGIC.starts_with(&self.buf[self.buf.len() - k..]))
                .unwrap_or(0);
            self.buf.len() - keep
        });
        self.buf.drain(..start);
    }
}
