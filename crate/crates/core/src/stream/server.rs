//! Session service: one producer fanned out to TCP subscribers and a
//! WebSocket bridge for the operator console.
//!
//! TCP subscribers receive the session file header followed by encoded
//! messages, so a subscriber that writes its bytes verbatim produces a valid
//! session file. WebSocket clients receive one binary frame per encoded
//! message and may send encoded control messages upstream. Control messages
//! from either kind of client are forwarded to the source and rebroadcast
//! so recorders log them.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::codec::{encode_message, ControlPayload, Message, MessageBody, StreamDecoder};
use super::session::{SessionHeader, SessionLog};
use crate::error::{Error, Result};

pub const DEFAULT_BACKLOG: usize = 64;

/// Producer side of a session.
pub trait MessageSource: Send {
    fn header(&self) -> SessionHeader;

    /// Next message in timestamp order, `None` at the end of the session.
    fn next_message(&mut self) -> Option<Message>;

    /// Called for each control message received from a client, with the
    /// current session time in seconds.
    fn handle_control(&mut self, _control: &ControlPayload, _session_time_s: f64) {}
}

/// Replays a recorded session.
pub struct ReplaySource {
    header: SessionHeader,
    messages: std::vec::IntoIter<Message>,
    pub received_controls: Vec<(f64, ControlPayload)>,
}

impl ReplaySource {
    pub fn new(log: SessionLog) -> Self {
        Self {
            header: log.header,
            messages: log.messages.into_iter(),
            received_controls: Vec::new(),
        }
    }
}

impl MessageSource for ReplaySource {
    fn header(&self) -> SessionHeader {
        self.header.clone()
    }

    fn next_message(&mut self) -> Option<Message> {
        self.messages.next()
    }

    fn handle_control(&mut self, control: &ControlPayload, session_time_s: f64) {
        self.received_controls.push((session_time_s, control.clone()));
    }
}

type Packet = Arc<Vec<u8>>;

/// Fan-out with bounded per-subscriber queues. A subscriber whose queue is
/// full is dropped instead of stalling the producer.
pub struct Broadcaster {
    subscribers: Mutex<Vec<(u64, SyncSender<Packet>)>>,
    backlog: usize,
    next_id: Mutex<u64>,
}

impl Broadcaster {
    pub fn new(backlog: usize) -> Self {
        Self {
            subscribers: Mutex::new(Vec::new()),
            backlog: backlog.max(1),
            next_id: Mutex::new(0),
        }
    }

    pub fn subscribe(&self) -> (u64, Receiver<Packet>) {
        let (tx, rx) = mpsc::sync_channel(self.backlog);
        let mut id = self.next_id.lock().expect("poisoned");
        *id += 1;
        self.subscribers.lock().expect("poisoned").push((*id, tx));
        (*id, rx)
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().expect("poisoned").len()
    }

    pub fn broadcast(&self, packet: Packet) {
        let mut subs = self.subscribers.lock().expect("poisoned");
        subs.retain(|(id, tx)| match tx.try_send(packet.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                warn!("subscriber {id} exceeded backlog, dropping");
                false
            }
            Err(TrySendError::Disconnected(_)) => {
                info!("subscriber {id} disconnected");
                false
            }
        });
    }

    /// Drops every queue; writers finish what they hold and close.
    pub fn close(&self) {
        self.subscribers.lock().expect("poisoned").clear();
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub tcp_addr: String,
    pub ws_addr: Option<String>,
    /// Ignore timestamps and emit as fast as possible.
    pub max_speed: bool,
    pub backlog: usize,
    /// Hold the session until this many clients (TCP or WebSocket) joined.
    pub min_subscribers: usize,
    /// How long to wait for `min_subscribers`.
    pub subscriber_timeout: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            tcp_addr: "127.0.0.1:7420".into(),
            ws_addr: Some("127.0.0.1:7421".into()),
            max_speed: false,
            backlog: DEFAULT_BACKLOG,
            min_subscribers: 0,
            subscriber_timeout: Duration::from_secs(30),
        }
    }
}

/// Bound listeners, ready to run a source.
pub struct SessionServer {
    config: ServeConfig,
    tcp: TcpListener,
    ws: Option<TcpListener>,
}

impl SessionServer {
    pub fn bind(config: ServeConfig) -> Result<Self> {
        let tcp = TcpListener::bind(&config.tcp_addr)?;
        let ws = config
            .ws_addr
            .as_ref()
            .map(TcpListener::bind)
            .transpose()?;
        Ok(Self { config, tcp, ws })
    }

    pub fn tcp_addr(&self) -> Result<SocketAddr> {
        Ok(self.tcp.local_addr()?)
    }

    pub fn ws_addr(&self) -> Result<Option<SocketAddr>> {
        Ok(self.ws.as_ref().map(|l| l.local_addr()).transpose()?)
    }

    /// Starts serving `source` on background threads.
    pub fn run<S: MessageSource + 'static>(self, source: S) -> Result<ServerHandle<S>> {
        let header_bytes = Arc::new(source.header().to_bytes()?);
        let broadcaster = Arc::new(Broadcaster::new(self.config.backlog));
        let stop = Arc::new(AtomicBool::new(false));
        let (control_tx, control_rx) = mpsc::channel::<ControlPayload>();
        let joined = Arc::new(Mutex::new(0usize));

        let tcp_addr = self.tcp.local_addr()?;
        let ws_addr = self.ws.as_ref().map(|l| l.local_addr()).transpose()?;

        let mut acceptors = Vec::new();
        {
            let (b, stop, ctl, joined, header) = (
                broadcaster.clone(),
                stop.clone(),
                control_tx.clone(),
                joined.clone(),
                header_bytes.clone(),
            );
            let listener = self.tcp;
            acceptors.push(thread::spawn(move || {
                accept_loop(listener, &stop, |stream| {
                    spawn_tcp_client(stream, &b, ctl.clone(), header.clone());
                    *joined.lock().expect("poisoned") += 1;
                })
            }));
        }
        if let Some(listener) = self.ws {
            let (b, stop, ctl, joined) = (
                broadcaster.clone(),
                stop.clone(),
                control_tx.clone(),
                joined.clone(),
            );
            acceptors.push(thread::spawn(move || {
                accept_loop(listener, &stop, |stream| {
                    if spawn_ws_client(stream, &b, ctl.clone(), stop.clone()) {
                        *joined.lock().expect("poisoned") += 1;
                    }
                })
            }));
        }
        drop(control_tx);

        let config = self.config.clone();
        let producer = {
            let (b, stop) = (broadcaster.clone(), stop.clone());
            thread::spawn(move || produce(source, &config, &b, &control_rx, &joined, &stop))
        };

        Ok(ServerHandle {
            producer: Some(producer),
            acceptors,
            stop,
            broadcaster,
            tcp_addr,
            ws_addr,
        })
    }
}

fn accept_loop(listener: TcpListener, stop: &AtomicBool, mut on_client: impl FnMut(TcpStream)) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(s) => {
                debug!("client connected from {:?}", s.peer_addr());
                on_client(s);
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

fn spawn_tcp_client(
    stream: TcpStream,
    broadcaster: &Broadcaster,
    control_tx: Sender<ControlPayload>,
    header: Packet,
) {
    let (id, rx) = broadcaster.subscribe();
    let _ = stream.set_nodelay(true);
    let Ok(mut reader) = stream.try_clone() else {
        warn!("subscriber {id}: cannot clone socket");
        return;
    };
    let mut writer = stream;
    thread::spawn(move || {
        if writer.write_all(&header).is_err() {
            return;
        }
        for packet in rx {
            if let Err(e) = writer.write_all(&packet) {
                info!("subscriber {id} write failed: {e}");
                return;
            }
        }
        let _ = writer.flush();
        let _ = writer.shutdown(std::net::Shutdown::Write);
    });
    thread::spawn(move || {
        let mut decoder = StreamDecoder::new();
        let mut buf = [0u8; 4096];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => return,
                Ok(n) => {
                    decoder.push(&buf[..n]);
                    while let Some(r) = decoder.next_message() {
                        forward_control(r, &control_tx, id);
                    }
                }
            }
        }
    });
}

fn forward_control(
    decoded: std::result::Result<Message, super::codec::CodecError>,
    control_tx: &Sender<ControlPayload>,
    client: u64,
) {
    match decoded {
        Ok(Message {
            body: MessageBody::Control(c),
            ..
        }) => {
            let _ = control_tx.send(c);
        }
        Ok(other) => debug!("client {client}: ignoring upstream {:?} message", other.kind()),
        Err(e) => warn!("client {client}: malformed upstream message: {e}"),
    }
}

fn spawn_ws_client(
    stream: TcpStream,
    broadcaster: &Broadcaster,
    control_tx: Sender<ControlPayload>,
    stop: Arc<AtomicBool>,
) -> bool {
    let _ = stream.set_nodelay(true);
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            warn!("websocket handshake failed: {e}");
            return false;
        }
    };
    let (id, rx) = broadcaster.subscribe();
    if ws
        .get_mut()
        .set_read_timeout(Some(Duration::from_millis(5)))
        .is_err()
    {
        return false;
    }
    thread::spawn(move || loop {
        // Drain outgoing packets first.
        loop {
            match rx.try_recv() {
                Ok(packet) => {
                    let bin = tungstenite::Message::Binary(packet.as_ref().clone().into());
                    if let Err(e) = ws.send(bin) {
                        info!("ws client {id} send failed: {e}");
                        return;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return;
                }
            }
        }
        if stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            return;
        }
        match ws.read() {
            Ok(tungstenite::Message::Binary(bytes)) => {
                let mut decoder = StreamDecoder::new();
                decoder.push(&bytes);
                while let Some(r) = decoder.next_message() {
                    forward_control(r, &control_tx, id);
                }
            }
            Ok(tungstenite::Message::Close(_)) => {
                info!("ws client {id} closed");
                return;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                info!("ws client {id} read failed: {e}");
                return;
            }
        }
    });
    true
}

fn produce<S: MessageSource>(
    mut source: S,
    config: &ServeConfig,
    broadcaster: &Broadcaster,
    controls: &Receiver<ControlPayload>,
    joined: &Mutex<usize>,
    stop: &AtomicBool,
) -> S {
    let deadline = Instant::now() + config.subscriber_timeout;
    while *joined.lock().expect("poisoned") < config.min_subscribers {
        if Instant::now() > deadline || stop.load(Ordering::SeqCst) {
            warn!("starting without the requested {} subscribers", config.min_subscribers);
            break;
        }
        thread::sleep(Duration::from_millis(2));
    }

    let start = Instant::now();
    let mut last_us = 0u64;
    let emit = |msg: &Message| match encode_message(msg) {
        Ok(bytes) => broadcaster.broadcast(Arc::new(bytes)),
        Err(e) => warn!("dropping unencodable message: {e}"),
    };
    let drain_controls = |source: &mut S, last_us: u64| {
        while let Ok(control) = controls.try_recv() {
            source.handle_control(&control, last_us as f64 / 1e6);
            emit(&Message {
                timestamp_us: last_us,
                body: MessageBody::Control(control),
            });
        }
    };

    while !stop.load(Ordering::SeqCst) {
        drain_controls(&mut source, last_us);
        let Some(msg) = source.next_message() else {
            break;
        };
        if !config.max_speed {
            let due = start + Duration::from_micros(msg.timestamp_us);
            loop {
                let now = Instant::now();
                if now >= due || stop.load(Ordering::SeqCst) {
                    break;
                }
                thread::sleep((due - now).min(Duration::from_millis(5)));
                drain_controls(&mut source, last_us);
            }
        }
        last_us = last_us.max(msg.timestamp_us);
        emit(&msg);
    }
    // Late controls sent just before the end still reach the source.
    drain_controls(&mut source, last_us);
    broadcaster.close();
    source
}

/// Running service.
pub struct ServerHandle<S> {
    producer: Option<JoinHandle<S>>,
    acceptors: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
    broadcaster: Arc<Broadcaster>,
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
}

impl<S> ServerHandle<S> {
    pub fn subscriber_count(&self) -> usize {
        self.broadcaster.subscriber_count()
    }

    pub fn is_finished(&self) -> bool {
        self.producer.as_ref().map_or(true, |p| p.is_finished())
    }

    /// Waits for the source to run out, stops the listeners and returns the
    /// source.
    pub fn join(mut self) -> Result<S> {
        let source = self
            .producer
            .take()
            .expect("producer present")
            .join()
            .map_err(|_| Error::InvalidInput("producer thread panicked".into()))?;
        self.shutdown_listeners();
        Ok(source)
    }

    /// Stops the producer early and returns the source.
    pub fn stop(self) -> Result<S> {
        self.stop.store(true, Ordering::SeqCst);
        self.join()
    }

    fn shutdown_listeners(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake blocking accept calls.
        let _ = TcpStream::connect(self.tcp_addr);
        if let Some(ws) = self.ws_addr {
            let _ = TcpStream::connect(ws);
        }
        for a in self.acceptors.drain(..) {
            let _ = a.join();
        }
    }
}

impl<S> Drop for ServerHandle<S> {
    fn drop(&mut self) {
        if !self.acceptors.is_empty() {
            self.shutdown_listeners();
        }
    }
}

/// Reads a TCP subscription (session header + messages) to the end and
/// returns it as a session log.
pub fn read_subscription(mut stream: impl Read) -> Result<SessionLog> {
    let mut bytes = Vec::new();
    stream.read_to_end(&mut bytes)?;
    SessionLog::from_bytes(&bytes)
}
