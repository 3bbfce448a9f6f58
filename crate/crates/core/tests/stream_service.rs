use std::io::Read;
use std::net::TcpStream;
use std::time::{Duration, Instant};

use ceusnav::harness::{SessionSimulator, SimulationConfig};
use ceusnav::motionsim::TrackerNoise;
use ceusnav::phantom::{GridGeometry, PhantomSpec, RenderSettings};
use ceusnav::stream::{
    decode_message, encode_message, read_session, record_session, ControlEvent, Message, MessageBody,
    MessageSource, ReplaySource, ServeConfig, SessionLog, SessionServer, FRAME_PREAMBLE_LEN, HEADER_LEN,
};

fn small_sim(duration: f64, emit_tracker: bool) -> SimulationConfig {
    // 32³ at 2 mm covers the default 64 mm phantom
    SimulationConfig {
        duration,
        emit_tracker,
        render: RenderSettings {
            geometry: GridGeometry::cubic(32, 2.0),
            noise_sd: 0.05,
            ..RenderSettings::default()
        },
        tracker: TrackerNoise {
            rate: 20.0,
            ..TrackerNoise::default()
        },
        ..SimulationConfig::default()
    }
}

fn local(max_speed: bool, min_subscribers: usize) -> ServeConfig {
    ServeConfig {
        tcp_addr: "127.0.0.1:0".into(),
        ws_addr: Some("127.0.0.1:0".into()),
        max_speed,
        min_subscribers,
        subscriber_timeout: Duration::from_secs(10),
        ..ServeConfig::default()
    }
}

fn read_all(addr: std::net::SocketAddr) -> std::thread::JoinHandle<Vec<u8>> {
    let mut s = TcpStream::connect(addr).unwrap();
    std::thread::spawn(move || {
        let mut bytes = Vec::new();
        s.read_to_end(&mut bytes).unwrap();
        bytes
    })
}

#[test]
fn two_subscribers_receive_identical_bytes() {
    let cfg = SimulationConfig {
        flash_times: vec![1.5],
        ..small_sim(3.0, true)
    };
    let expected = SessionSimulator::new(cfg.clone()).unwrap().collect().unwrap();

    let server = SessionServer::bind(local(true, 2)).unwrap();
    let addr = server.tcp_addr().unwrap();
    let a = read_all(addr);
    let b = read_all(addr);
    let handle = server.run(SessionSimulator::new(cfg).unwrap()).unwrap();
    handle.join().unwrap();
    let (a, b) = (a.join().unwrap(), b.join().unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let log = SessionLog::from_bytes(&a).unwrap();
    assert_eq!(log.messages, expected);
}

#[test]
fn replay_is_paced_by_timestamps() {
    let mut sim = SessionSimulator::new(small_sim(10.0, true)).unwrap();
    let messages = sim.collect().unwrap();
    let last = messages.last().unwrap().timestamp_s();
    assert!(last > 9.9 && last < 10.0);
    let log = SessionLog {
        header: sim.header(),
        messages,
    };

    let server = SessionServer::bind(local(false, 1)).unwrap();
    let sub = read_all(server.tcp_addr().unwrap());
    let start = Instant::now();
    let handle = server.run(ReplaySource::new(log.clone())).unwrap();
    handle.join().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let received = SessionLog::from_bytes(&sub.join().unwrap()).unwrap();
    assert!((elapsed - 10.0).abs() <= 0.5, "replay took {elapsed:.3} s");
    assert_eq!(received.messages, log.messages);
}

#[test]
fn websocket_flash_reaches_the_simulator() {
    let server = SessionServer::bind(local(false, 1)).unwrap();
    let ws_addr = server.ws_addr().unwrap().unwrap();
    let client = std::thread::spawn(move || {
        let (mut ws, _) = tungstenite::connect(format!("ws://{ws_addr}")).unwrap();
        let mut seen = Vec::new();
        let mut sent = false;
        loop {
            match ws.read() {
                Ok(tungstenite::Message::Binary(bytes)) => {
                    let msg = decode_message(&bytes).unwrap();
                    if !sent && msg.timestamp_s() >= 0.5 {
                        let flash = Message::control(0, ControlEvent::Flash);
                        ws.send(tungstenite::Message::Binary(encode_message(&flash).unwrap().into()))
                            .unwrap();
                        sent = true;
                    }
                    seen.push(msg);
                }
                Ok(tungstenite::Message::Close(_)) | Err(_) => break,
                Ok(_) => {}
            }
        }
        seen
    });
    let handle = server.run(SessionSimulator::new(small_sim(2.0, true)).unwrap()).unwrap();
    let sim = handle.join().unwrap();
    let seen = client.join().unwrap();

    assert_eq!(sim.flash_times().len(), 1);
    let t_flash = sim.flash_times()[0];
    assert!((0.5..2.0).contains(&t_flash), "flash at {t_flash}");
    assert_eq!(sim.received_controls().len(), 1);
    let echoed = seen.iter().any(|m| {
        matches!(&m.body, MessageBody::Control(c) if ControlEvent::from_payload(c) == Some(ControlEvent::Flash))
    });
    assert!(echoed, "flash control was not broadcast");
}

#[test]
fn ten_minute_session_file_size() {
    let cfg = SimulationConfig {
        duration: 600.0,
        emit_tracker: false,
        render: RenderSettings {
            noise_sd: 0.0,
            ..RenderSettings::default()
        },
        phantom: PhantomSpec::default(),
        ..SimulationConfig::default()
    };
    let mut sim = SessionSimulator::new(cfg).unwrap();
    let header = sim.header();
    let messages = sim.collect().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = record_session(messages, &header, dir.path().join("ten.snav")).unwrap();

    let header_len = header.to_bytes().unwrap().len();
    let expected = header_len + 600 * (HEADER_LEN + FRAME_PREAMBLE_LEN + 64 * 64 * 64);
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    assert_eq!(read_session(&path).unwrap().frames().count(), 600);
}
