//! Session transport and persistence.

mod codec;
mod server;
mod session;

pub use codec::{
    decode_message, decode_prefix, encode_into, encode_message, encoded_len, seconds_to_us,
    us_to_seconds, CodecError, ControlEvent, ControlPayload, FeedbackMode, FramePayload, Message,
    MessageBody, MessageKind, StreamDecoder, TrackerPayload, FRAME_PREAMBLE_LEN, HEADER_LEN,
    MAGIC, MAX_PAYLOAD, PROTOCOL_VERSION, TRACKER_PAYLOAD_LEN,
};
pub use server::{
    read_subscription, Broadcaster, MessageSource, ReplaySource, ServeConfig, ServerHandle,
    SessionServer, DEFAULT_BACKLOG,
};
pub use session::{
    partial_path, read_session, record_session, sha256_hex, SessionHeader, SessionLog,
    SessionReader, SessionRecorder, LOG_MAGIC,
};
