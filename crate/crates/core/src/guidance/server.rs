//! The guidance service: one inference worker behind a small drop-oldest
//! ingress queue, fanning state out to any number of subscribers.
//!
//! Clients speak newline-delimited JSON over plain TCP, or the same messages
//! as WebSocket text frames; a connection opening with `GET ` is upgraded.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{decode_image, encode_image, ClientMessage, ServerMessage};
use super::{GuidanceEngine, GuidanceError, Step};
use crate::dataio::{load_sweep, WINDOW};
use crate::phantom::{generate_phantom, generate_sweep, render_bscan, Frame, Phantom, PhantomConfig, SweepVolume};

const SUBSCRIBER_BUFFER: usize = 32;
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServeMode {
    /// The server owns a phantom and a virtual probe angle driven by clients.
    LiveSim,
    /// The server streams a sweep on a clock, looping at the end.
    Replay,
}

impl std::str::FromStr for ServeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live-sim" => Ok(ServeMode::LiveSim),
            "replay" => Ok(ServeMode::Replay),
            other => Err(format!("unknown mode {other:?}, expected live-sim or replay")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub mode: ServeMode,
    pub checkpoint: PathBuf,
    pub bind: SocketAddr,
    pub hysteresis_k: usize,
    /// Live-sim phantom, and the replay source when no sweep is given.
    pub phantom: PhantomConfig,
    pub initial_theta_deg: f64,
    /// Stored sweep to replay.
    pub sweep: Option<PathBuf>,
    pub replay_fps: f64,
    pub queue_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            mode: ServeMode::LiveSim,
            checkpoint: PathBuf::new(),
            bind: SocketAddr::from(([127, 0, 0, 1], 8765)),
            hysteresis_k: 3,
            phantom: PhantomConfig::default(),
            initial_theta_deg: 0.0,
            sweep: None,
            replay_fps: 20.0,
            queue_capacity: 4,
        }
    }
}

struct Ingress {
    conn: u64,
    msg: ClientMessage,
}

struct Subscriber {
    id: u64,
    tx: SyncSender<Arc<str>>,
    stream: TcpStream,
}

struct Shared {
    queue: Mutex<VecDeque<Ingress>>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
    subscribers: Mutex<Vec<Subscriber>>,
    shutdown: AtomicBool,
    next_id: AtomicU64,
    hello: ServerMessage,
}

impl Shared {
    fn enqueue(&self, item: Ingress) {
        let mut q = self.queue.lock().expect("queue lock");
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(item);
        self.ready.notify_one();
    }

    fn dequeue(&self, timeout: Duration) -> Option<Ingress> {
        let q = self.queue.lock().expect("queue lock");
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| q.is_empty() && !self.shutdown.load(Ordering::Relaxed))
            .expect("queue lock");
        q.pop_front()
    }

    /// Never blocks: a subscriber whose buffer is full misses this message.
    fn broadcast(&self, msg: &ServerMessage) {
        let text: Arc<str> = msg.to_json().into();
        self.subscribers
            .lock()
            .expect("subscriber lock")
            .retain(|s| !matches!(s.tx.try_send(text.clone()), Err(TrySendError::Disconnected(_))));
    }

    fn reply(&self, conn: u64, msg: &ServerMessage) {
        if let Some(s) = self.subscribers.lock().expect("subscriber lock").iter().find(|s| s.id == conn) {
            let _ = s.tx.try_send(msg.to_json().into());
        }
    }

    fn remove(&self, conn: u64) {
        self.subscribers.lock().expect("subscriber lock").retain(|s| s.id != conn);
    }
}

/// A running server; dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Ingress messages discarded because the queue was full.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(self) {}
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        self.shared.ready.notify_all();
        for s in self.shared.subscribers.lock().expect("subscriber lock").drain(..) {
            let _ = s.stream.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

enum Source {
    Live { phantom: Phantom, theta: f64 },
    Replay { sweep: SweepVolume, next: usize, interval: Duration },
}

/// Starts the service. Fails without binding anything if the checkpoint
/// cannot be loaded or the simulation cannot be set up.
pub fn serve(config: &ServerConfig) -> Result<ServerHandle, GuidanceError> {
    let engine = GuidanceEngine::from_checkpoint(&config.checkpoint, config.hysteresis_k)?;
    if config.queue_capacity == 0 {
        return Err(GuidanceError::Data(crate::dataio::DataError::Shape("queue capacity must be positive".into())));
    }
    let phantom_err = |e: crate::phantom::PhantomError| GuidanceError::Data(crate::dataio::DataError::Shape(e.to_string()));
    let source = match config.mode {
        ServeMode::LiveSim => {
            let phantom = generate_phantom(config.phantom.clone()).map_err(phantom_err)?;
            let theta = config.initial_theta_deg.clamp(0.0, phantom.arc());
            Source::Live { phantom, theta }
        }
        ServeMode::Replay => {
            let sweep = match &config.sweep {
                Some(dir) => load_sweep(dir)?,
                None => {
                    let p = generate_phantom(config.phantom.clone()).map_err(phantom_err)?;
                    generate_sweep(&p, config.phantom.frames_per_sweep).map_err(phantom_err)?
                }
            };
            if !(config.replay_fps > 0.0) {
                return Err(GuidanceError::Data(crate::dataio::DataError::Shape("replay fps must be positive".into())));
            }
            Source::Replay {
                sweep,
                next: 0,
                interval: Duration::from_secs_f64(1.0 / config.replay_fps),
            }
        }
    };
    let (arc, theta0) = match &source {
        Source::Live { phantom, theta } => (phantom.arc(), *theta),
        Source::Replay { sweep, .. } => (sweep.arc_deg, sweep.frames.first().map_or(0.0, |f| f.sweep_angle_deg)),
    };
    let listener = TcpListener::bind(config.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        queue: Mutex::new(VecDeque::with_capacity(config.queue_capacity)),
        ready: Condvar::new(),
        capacity: config.queue_capacity,
        dropped: AtomicU64::new(0),
        subscribers: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
        next_id: AtomicU64::new(1),
        hello: ServerMessage::Hello {
            mode: match config.mode {
                ServeMode::LiveSim => "live-sim".into(),
                ServeMode::Replay => "replay".into(),
            },
            arc_deg: arc,
            theta_deg: theta0,
            window: WINDOW,
        },
    });
    log::info!("guidance service listening on {addr}");
    let worker = {
        let shared = shared.clone();
        std::thread::spawn(move || run_worker(&shared, engine, source))
    };
    let acceptor = {
        let shared = shared.clone();
        std::thread::spawn(move || run_acceptor(&shared, listener))
    };
    Ok(ServerHandle {
        addr,
        shared,
        threads: vec![worker, acceptor],
    })
}

fn state(step: &Step, frame: &Frame, theta: f64, dropped: u64, clamped: bool, seq: u64) -> ServerMessage {
    ServerMessage::State {
        seq,
        theta_deg: theta,
        image_b64: encode_image(&frame.image),
        height: frame.height,
        width: frame.width,
        position: step.prediction.map(|p| p.0.probs()),
        direction: step.prediction.map(|p| p.1.probs()),
        recommendation: step.recommendation,
        latency_ms: step.latency_ms,
        preprocess_ms: step.preprocess_ms,
        inference_ms: step.inference_ms,
        dropped,
        clamped,
    }
}

fn run_worker(shared: &Shared, mut engine: GuidanceEngine, mut source: Source) {
    let mut seq = 0u64;
    let mut due = Instant::now();
    while !shared.shutdown.load(Ordering::Relaxed) {
        let wait = match &source {
            Source::Live { .. } => POLL,
            Source::Replay { .. } => due.saturating_duration_since(Instant::now()),
        };
        if let Some(item) = shared.dequeue(wait) {
            handle(shared, &mut engine, &mut source, item, &mut seq);
            continue;
        }
        if let Source::Replay { sweep, next, interval } = &mut source {
            if Instant::now() < due {
                continue;
            }
            due += *interval;
            if *next == 0 {
                engine.reset();
            }
            let frame = &sweep.frames[*next];
            *next = (*next + 1) % sweep.len();
            match engine.push_frame(&frame.image, frame.height, frame.width, frame.pose.to_array()) {
                Ok(step) => {
                    seq += 1;
                    let dropped = shared.dropped.load(Ordering::Relaxed);
                    shared.broadcast(&state(&step, frame, frame.sweep_angle_deg, dropped, false, seq));
                }
                Err(e) => shared.broadcast(&ServerMessage::error(e.to_string())),
            }
        }
    }
}

fn handle(shared: &Shared, engine: &mut GuidanceEngine, source: &mut Source, item: Ingress, seq: &mut u64) {
    let result = match item.msg {
        ClientMessage::Control { .. } | ClientMessage::SetTheta { .. } => {
            let Source::Live { phantom, theta } = source else {
                shared.reply(item.conn, &ServerMessage::error("probe control is only available in live-sim mode"));
                return;
            };
            let target = match item.msg {
                ClientMessage::Control { dtheta_deg } => *theta + dtheta_deg,
                ClientMessage::SetTheta { theta_deg } => theta_deg,
                ClientMessage::Frame { .. } => unreachable!(),
            };
            let arc = phantom.arc();
            let clamped = !(0.0..=arc).contains(&target);
            *theta = target.clamp(0.0, arc);
            render_bscan(phantom, *theta)
                .map_err(|e| e.to_string())
                .and_then(|frame| {
                    engine
                        .push_frame(&frame.image, frame.height, frame.width, frame.pose.to_array())
                        .map(|step| (step, frame, *theta, clamped))
                        .map_err(|e| e.to_string())
                })
        }
        ClientMessage::Frame {
            seq: _,
            pose,
            image_b64,
            height,
            width,
        } => external_frame(engine, pose, &image_b64, height, width),
    };
    match result {
        Ok((step, frame, theta, clamped)) => {
            *seq += 1;
            let dropped = shared.dropped.load(Ordering::Relaxed);
            shared.broadcast(&state(&step, &frame, theta, dropped, clamped, *seq));
        }
        Err(message) => shared.reply(item.conn, &ServerMessage::error(message)),
    }
}

fn external_frame(
    engine: &mut GuidanceEngine,
    pose: [f64; 6],
    image_b64: &str,
    height: Option<usize>,
    width: Option<usize>,
) -> Result<(Step, Frame, f64, bool), String> {
    let image = decode_image(image_b64).map_err(|e| e.to_string())?;
    let (h, w) = match (height, width) {
        (Some(h), Some(w)) => (h, w),
        (None, None) => {
            let side = (image.len() as f64).sqrt().round() as usize;
            (side, side)
        }
        _ => return Err("give both height and width, or neither".into()),
    };
    if h * w != image.len() || image.is_empty() {
        return Err(format!("image has {} pixels, expected {h}×{w}", image.len()));
    }
    let step = engine.push_frame(&image, h, w, pose).map_err(|e| e.to_string())?;
    let frame = Frame {
        image,
        height: h,
        width: w,
        pose: crate::phantom::Pose::from_array(pose),
        sweep_angle_deg: pose[4],
    };
    Ok((step, frame, pose[4], false))
}

fn run_acceptor(shared: &Arc<Shared>, listener: TcpListener) {
    while !shared.shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                let shared = shared.clone();
                std::thread::spawn(move || {
                    if let Err(e) = connection(&shared, stream) {
                        log::debug!("connection from {peer} ended: {e}");
                    }
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
}

fn is_websocket(stream: &TcpStream) -> std::io::Result<bool> {
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut buf = [0u8; 4];
    let start = Instant::now();
    loop {
        match stream.peek(&mut buf) {
            Ok(n) if n >= 4 || n == 0 => return Ok(&buf[..n] == b"GET "),
            Ok(n) if !b"GET ".starts_with(&buf[..n]) => return Ok(false),
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(false),
            Err(e) => return Err(e),
        }
        if start.elapsed() > Duration::from_millis(200) {
            return Ok(false);
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn register(shared: &Shared, stream: &TcpStream) -> std::io::Result<(u64, Receiver<Arc<str>>)> {
    let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
    let (tx, rx) = sync_channel(SUBSCRIBER_BUFFER);
    let _ = tx.try_send(shared.hello.to_json().into());
    shared.subscribers.lock().expect("subscriber lock").push(Subscriber {
        id,
        tx,
        stream: stream.try_clone()?,
    });
    Ok((id, rx))
}

fn on_text(shared: &Shared, conn: u64, text: &str) {
    if text.trim().is_empty() {
        return;
    }
    match ClientMessage::parse(text) {
        Ok(msg) => shared.enqueue(Ingress { conn, msg }),
        Err(e) => shared.reply(conn, &ServerMessage::error(e.to_string())),
    }
}

fn connection(shared: &Arc<Shared>, stream: TcpStream) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    if is_websocket(&stream)? {
        return websocket(shared, stream);
    }
    stream.set_read_timeout(None)?;
    let (id, rx) = register(shared, &stream)?;
    let mut out = stream.try_clone()?;
    let writer = std::thread::spawn(move || {
        for text in rx {
            if out.write_all(text.as_bytes()).and_then(|_| out.write_all(b"\n")).is_err() {
                break;
            }
        }
    });
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    let result = loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break Ok(()),
            Ok(_) => on_text(shared, id, &line),
            Err(e) if e.kind() == ErrorKind::InvalidData => {
                shared.reply(id, &ServerMessage::error("message is not valid UTF-8"));
            }
            Err(e) => break Err(e),
        }
    };
    shared.remove(id);
    let _ = writer.join();
    result
}

fn websocket(shared: &Arc<Shared>, stream: TcpStream) -> std::io::Result<()> {
    use tungstenite::{Error as WsError, Message};
    stream.set_read_timeout(None)?;
    let probe = stream.try_clone()?;
    let mut ws = tungstenite::accept(stream).map_err(|e| std::io::Error::other(e.to_string()))?;
    probe.set_read_timeout(Some(POLL))?;
    let (id, rx) = register(shared, &probe)?;
    let result = 'session: loop {
        while let Ok(text) = rx.try_recv() {
            if let Err(e) = ws.send(Message::Text(text.to_string())) {
                break 'session Err(std::io::Error::other(e.to_string()));
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => on_text(shared, id, &text),
            Ok(Message::Binary(_)) => shared.reply(id, &ServerMessage::error("binary frames are not supported")),
            Ok(Message::Close(_)) => break Ok(()),
            Ok(_) => {}
            Err(WsError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(WsError::ConnectionClosed | WsError::AlreadyClosed) => break Ok(()),
            Err(e) => break Err(std::io::Error::other(e.to_string())),
        }
        if shared.shutdown.load(Ordering::Relaxed) {
            break Ok(());
        }
    };
    shared.remove(id);
    result
}
