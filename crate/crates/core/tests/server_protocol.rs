use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use serde_json::{json, Value};
use sweepguide_core::dataio::PreprocessConfig;
use sweepguide_core::guidance::{encode_image, serve, ServeMode, ServerConfig, ServerHandle};
use sweepguide_core::models::{BackboneConfig, Model, Topology};
use sweepguide_core::phantom::PhantomConfig;

fn small_phantom() -> PhantomConfig {
    PhantomConfig {
        height: 24,
        width: 24,
        pixel_size_mm: 2.0,
        desk_scale: true,
        frames_per_sweep: 30,
        theta_c_deg: Some(30.0),
        ..PhantomConfig::default()
    }
}

fn checkpoint(dir: &std::path::Path) {
    let backbone = BackboneConfig {
        input_side: 16,
        channels: vec![4, 8],
        ..BackboneConfig::default()
    };
    let mut model = Model::new(Topology::Sequence, backbone, 1).unwrap();
    let pre = PreprocessConfig {
        downsample_factor: 1.5,
        crop_size: 16,
    };
    model.save(dir, json!({ "preprocess": pre })).unwrap();
}

fn start(mode: ServeMode) -> (ServerHandle, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    checkpoint(dir.path());
    let cfg = ServerConfig {
        mode,
        checkpoint: dir.path().to_path_buf(),
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        phantom: small_phantom(),
        initial_theta_deg: 20.0,
        replay_fps: 200.0,
        ..ServerConfig::default()
    };
    (serve(&cfg).unwrap(), dir)
}

struct Client {
    out: TcpStream,
    lines: BufReader<TcpStream>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let mut c = Self {
            out: s.try_clone().unwrap(),
            lines: BufReader::new(s),
        };
        let hello = c.recv();
        assert_eq!(hello["type"], "hello");
        c
    }

    fn send(&mut self, text: &str) {
        self.out.write_all(text.as_bytes()).unwrap();
        self.out.write_all(b"\n").unwrap();
    }

    fn recv(&mut self) -> Value {
        let mut line = String::new();
        self.lines.read_line(&mut line).unwrap();
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["v"], 1, "{line}");
        v
    }

    fn recv_type(&mut self, ty: &str) -> Value {
        loop {
            let v = self.recv();
            if v["type"] == ty {
                return v;
            }
        }
    }
}

#[test]
fn control_moves_the_virtual_probe() {
    let (server, _dir) = start(ServeMode::LiveSim);
    let mut c = Client::connect(server.local_addr());
    c.send(r#"{"v":1,"type":"control","dtheta_deg":1.0}"#);
    let s = c.recv_type("state");
    assert!((s["theta_deg"].as_f64().unwrap() - 21.0).abs() < 1e-9);
    assert_eq!(s["clamped"], false);
    assert_eq!(s["recommendation"], "warmup");
    assert!(s["position"].is_null());
    let px = s["height"].as_u64().unwrap() * s["width"].as_u64().unwrap();
    assert_eq!(px, 24 * 24);
    assert!(s["latency_ms"].as_f64().unwrap() >= 0.0);

    // fill the window: the tenth frame carries the first prediction
    let mut last = s;
    for _ in 0..9 {
        c.send(r#"{"type":"control","dtheta_deg":0.5}"#);
        last = c.recv_type("state");
    }
    let p: Vec<f64> = serde_json::from_value(last["direction"].clone()).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_ne!(last["recommendation"], "warmup");
    assert!((last["theta_deg"].as_f64().unwrap() - 25.5).abs() < 1e-9);
}

#[test]
fn out_of_arc_requests_are_clamped_and_flagged() {
    let (server, _dir) = start(ServeMode::LiveSim);
    let mut c = Client::connect(server.local_addr());
    c.send(r#"{"type":"set_theta","theta_deg":100}"#);
    let s = c.recv_type("state");
    assert_eq!(s["theta_deg"], 60.0);
    assert_eq!(s["clamped"], true);
    c.send(r#"{"type":"control","dtheta_deg":-75}"#);
    let s = c.recv_type("state");
    assert_eq!(s["theta_deg"], 0.0);
    assert_eq!(s["clamped"], true);
}

#[test]
fn malformed_input_gets_an_error_and_the_connection_survives() {
    let (server, _dir) = start(ServeMode::LiveSim);
    let mut c = Client::connect(server.local_addr());
    for bad in ["{oops", r#"{"type":"teleport"}"#, r#"{"v":7,"type":"control","dtheta_deg":1}"#] {
        c.send(bad);
        let e = c.recv();
        assert_eq!(e["type"], "error", "{bad}");
        assert!(!e["message"].as_str().unwrap().is_empty());
    }
    // wrong pixel count in an external frame
    c.send(&json!({"type":"frame","seq":1,"pose":[0,0,0,0,10,0],"image_b64": encode_image(&[0.5; 10])}).to_string());
    assert_eq!(c.recv()["type"], "error");
    c.send(r#"{"type":"control","dtheta_deg":2}"#);
    assert_eq!(c.recv_type("state")["theta_deg"], 22.0);
}

#[test]
fn external_frames_are_accepted() {
    let (server, _dir) = start(ServeMode::LiveSim);
    let mut c = Client::connect(server.local_addr());
    c.send(&json!({"type":"frame","seq":9,"pose":[0,0,0,0,12.5,0],"image_b64": encode_image(&[0.25; 24 * 24])}).to_string());
    let s = c.recv_type("state");
    assert_eq!(s["theta_deg"], 12.5);
    assert_eq!(s["recommendation"], "warmup");
}

#[test]
fn every_subscriber_sees_the_state() {
    let (server, _dir) = start(ServeMode::LiveSim);
    let mut a = Client::connect(server.local_addr());
    let mut b = Client::connect(server.local_addr());
    a.send(r#"{"type":"control","dtheta_deg":3}"#);
    assert_eq!(a.recv_type("state")["theta_deg"], 23.0);
    assert_eq!(b.recv_type("state")["theta_deg"], 23.0);
}

#[test]
fn replay_streams_and_refuses_control() {
    let (server, _dir) = start(ServeMode::Replay);
    let mut c = Client::connect(server.local_addr());
    let first = c.recv_type("state");
    let second = c.recv_type("state");
    assert!(second["seq"].as_u64() > first["seq"].as_u64());
    c.send(r#"{"type":"control","dtheta_deg":1}"#);
    let e = c.recv_type("error");
    assert!(e["message"].as_str().unwrap().contains("live-sim"));
    let mut predicted = false;
    for _ in 0..40 {
        if !c.recv_type("state")["direction"].is_null() {
            predicted = true;
            break;
        }
    }
    assert!(predicted);
}

#[test]
fn flood_drops_are_reported() {
    let (server, _dir) = start(ServeMode::LiveSim);
    let mut c = Client::connect(server.local_addr());
    let burst: String = (0..200).map(|_| "{\"type\":\"control\",\"dtheta_deg\":0.1}\n").collect();
    c.out.write_all(burst.as_bytes()).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    c.send(r#"{"type":"set_theta","theta_deg":42}"#);
    // the most recent message is never the one discarded
    loop {
        let s = c.recv_type("state");
        if s["theta_deg"] == 42.0 {
            assert_eq!(s["dropped"].as_u64().unwrap(), server.dropped());
            break;
        }
    }
}

#[test]
fn websocket_clients_speak_the_same_protocol() {
    use tungstenite::Message;
    let (server, _dir) = start(ServeMode::LiveSim);
    let url = format!("ws://{}/", server.local_addr());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let next = |ws: &mut tungstenite::WebSocket<_>| loop {
        if let Message::Text(t) = ws.read().unwrap() {
            break serde_json::from_str::<Value>(&t).unwrap();
        }
    };
    assert_eq!(next(&mut ws)["type"], "hello");
    ws.send(Message::Text(r#"{"type":"control","dtheta_deg":-1}"#.into())).unwrap();
    let s = next(&mut ws);
    assert_eq!(s["type"], "state");
    assert_eq!(s["theta_deg"], 19.0);
    ws.send(Message::Text("garbage".into())).unwrap();
    assert_eq!(next(&mut ws)["type"], "error");
}
