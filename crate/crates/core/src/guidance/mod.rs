//! Streaming guidance: a sliding window over incoming frames, one sequence
//! prediction per frame once the window is full, and a debounced
//! left/right/aligned recommendation. Also hosts the network service.

mod protocol;
mod server;

pub use protocol::{decode_image, encode_image, ClientMessage, ProtocolError, ServerMessage, PROTOCOL_VERSION};
pub use server::{serve, ServeMode, ServerConfig, ServerHandle};

use std::collections::VecDeque;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{load_sweep, preprocess, DataError, PreprocessConfig, WINDOW};
use crate::labels::{ClassSet, DirectionClass};
use crate::models::{Model, ModelError, Prediction, SequenceModel};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("guidance needs a sequence checkpoint, found {0}")]
    Topology(&'static str),
    #[error("hysteresis k must be at least 1")]
    Hysteresis,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    MoveLeft,
    MoveRight,
    Aligned,
    Warmup,
}

impl Recommendation {
    pub fn as_str(self) -> &'static str {
        match self {
            Recommendation::MoveLeft => "move_left",
            Recommendation::MoveRight => "move_right",
            Recommendation::Aligned => "aligned",
            Recommendation::Warmup => "warmup",
        }
    }
}

/// Debounce over direction predictions: `k` consecutive Stops mean Aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Hysteresis {
    k: usize,
    stops: usize,
    last_move: Option<Recommendation>,
}

impl Hysteresis {
    pub fn new(k: usize) -> Result<Self, GuidanceError> {
        if k == 0 {
            return Err(GuidanceError::Hysteresis);
        }
        Ok(Self {
            k,
            stops: 0,
            last_move: None,
        })
    }

    pub fn stop_count(&self) -> usize {
        self.stops
    }

    /// Feeds one direction distribution (R, S, L order).
    ///
    /// A Stop that does not yet reach `k` keeps the previous movement; with
    /// no previous movement it leans toward the likelier of L and R, and to
    /// L on a tie.
    pub fn update(&mut self, direction: [f64; 3]) -> Recommendation {
        let class = crate::labels::ClassDistribution::new(direction)
            .map(|d| d.argmax())
            .unwrap_or_else(|_| argmax(direction));
        match DirectionClass::from_index(class).expect("argmax < 3") {
            DirectionClass::Stop => {
                self.stops += 1;
                if self.stops >= self.k {
                    Recommendation::Aligned
                } else {
                    *self.last_move.get_or_insert(if direction[2] >= direction[0] {
                        Recommendation::MoveLeft
                    } else {
                        Recommendation::MoveRight
                    })
                }
            }
            DirectionClass::Left => self.movement(Recommendation::MoveLeft),
            DirectionClass::Right => self.movement(Recommendation::MoveRight),
        }
    }

    fn movement(&mut self, r: Recommendation) -> Recommendation {
        self.stops = 0;
        self.last_move = Some(r);
        r
    }
}

fn argmax(p: [f64; 3]) -> usize {
    (1..3).fold(0, |best, k| if p[k] > p[best] { k } else { best })
}

/// Outcome of one pushed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub frames_seen: u64,
    pub prediction: Option<Prediction>,
    pub recommendation: Recommendation,
    /// Preprocessing plus inference; excludes any network time.
    pub latency_ms: f64,
    pub preprocess_ms: f64,
    pub inference_ms: f64,
}

/// Sliding-window inference over a frame stream.
///
/// The ring holds each frame's recurrent input (backbone features and pose)
/// rather than the image, so every frame passes through the backbone once.
#[derive(Debug, Clone)]
pub struct GuidanceEngine {
    model: SequenceModel,
    preprocess: PreprocessConfig,
    ring: VecDeque<Vec<f64>>,
    hysteresis: Hysteresis,
    frames_seen: u64,
    latest: Option<Prediction>,
    latencies_ms: Vec<f64>,
}

impl GuidanceEngine {
    pub fn new(model: SequenceModel, preprocess: PreprocessConfig, k: usize) -> Result<Self, GuidanceError> {
        Ok(Self {
            model,
            preprocess,
            ring: VecDeque::with_capacity(WINDOW),
            hysteresis: Hysteresis::new(k)?,
            frames_seen: 0,
            latest: None,
            latencies_ms: Vec::new(),
        })
    }

    /// Loads a sequence checkpoint; the preprocessing recorded at training
    /// time is reused when present.
    pub fn from_checkpoint(dir: &Path, k: usize) -> Result<Self, GuidanceError> {
        let (model, manifest) = Model::load(dir)?;
        let Model::Sequence(model) = model else {
            return Err(GuidanceError::Topology("single"));
        };
        let preprocess = manifest
            .training
            .get("preprocess")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        Self::new(model, preprocess, k)
    }

    pub fn model(&self) -> &SequenceModel {
        &self.model
    }

    pub fn buffered(&self) -> usize {
        self.ring.len()
    }

    pub fn latest(&self) -> Option<&Prediction> {
        self.latest.as_ref()
    }

    pub fn latencies_ms(&self) -> &[f64] {
        &self.latencies_ms
    }

    /// Empties the window and the debounce state.
    pub fn reset(&mut self) {
        self.ring.clear();
        self.latest = None;
        self.frames_seen = 0;
        self.hysteresis = Hysteresis::new(self.hysteresis.k).expect("k already validated");
    }

    /// Adds one raw frame. On error the engine state is unchanged.
    pub fn push_frame(&mut self, image: &[f32], height: usize, width: usize, pose: [f64; 6]) -> Result<Step, GuidanceError> {
        let t0 = Instant::now();
        let pre = preprocess(image, height, width, &self.preprocess)?;
        let preprocess_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let features = self.model.frame_features(&[&pre.image], &[pose])?.remove(0);
        let full = self.ring.len() + 1 >= WINDOW;
        let prediction = if full {
            let mut window: Vec<&[f64]> = self.ring.iter().skip(self.ring.len() + 1 - WINDOW).map(Vec::as_slice).collect();
            window.push(&features);
            Some(self.model.classify_features(&window)?)
        } else {
            None
        };
        let inference_ms = t1.elapsed().as_secs_f64() * 1e3;
        if self.ring.len() == WINDOW {
            self.ring.pop_front();
        }
        self.ring.push_back(features);
        self.frames_seen += 1;
        let recommendation = match &prediction {
            Some(p) => {
                self.latest = Some(*p);
                self.latencies_ms.push(preprocess_ms + inference_ms);
                self.hysteresis.update(p.1.probs())
            }
            None => Recommendation::Warmup,
        };
        Ok(Step {
            frames_seen: self.frames_seen,
            prediction,
            recommendation,
            latency_ms: preprocess_ms + inference_ms,
            preprocess_ms,
            inference_ms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    /// Milliseconds since the session started.
    pub timestamp_ms: f64,
    pub frame: u64,
    pub pose: [f64; 6],
    pub sweep_angle_deg: f64,
    pub prediction: Option<Prediction>,
    pub recommendation: Recommendation,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub records: Vec<SessionRecord>,
}

impl SessionLog {
    pub fn predictions(&self) -> usize {
        self.records.iter().filter(|r| r.prediction.is_some()).count()
    }

    /// One JSON object per line.
    pub fn save(&self, path: &Path) -> Result<(), GuidanceError> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r).expect("record serialises"));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub hysteresis_k: usize,
    /// Frames per second; `None` streams as fast as inference allows.
    pub fps: Option<f64>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            hysteresis_k: 3,
            fps: None,
        }
    }
}

/// Streams every frame of `sweep` through `engine`.
pub fn replay_sweep(
    engine: &mut GuidanceEngine,
    sweep: &crate::phantom::SweepVolume,
    fps: Option<f64>,
) -> Result<SessionLog, GuidanceError> {
    let start = Instant::now();
    let mut log = SessionLog::default();
    for (i, f) in sweep.frames.iter().enumerate() {
        if let Some(fps) = fps.filter(|r| *r > 0.0) {
            let due = Duration::from_secs_f64(i as f64 / fps);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let pose = f.pose.to_array();
        let step = engine.push_frame(&f.image, f.height, f.width, pose)?;
        log.records.push(SessionRecord {
            timestamp_ms: start.elapsed().as_secs_f64() * 1e3,
            frame: step.frames_seen,
            pose,
            sweep_angle_deg: f.sweep_angle_deg,
            prediction: step.prediction,
            recommendation: step.recommendation,
            latency_ms: step.latency_ms,
        });
    }
    Ok(log)
}

/// Replays a stored sweep through a fresh engine built from a checkpoint.
pub fn run_replay(sweep_dir: &Path, checkpoint: &Path, config: &ReplayConfig) -> Result<SessionLog, GuidanceError> {
    let mut engine = GuidanceEngine::from_checkpoint(checkpoint, config.hysteresis_k)?;
    let sweep = load_sweep(sweep_dir)?;
    replay_sweep(&mut engine, &sweep, config.fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((p * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Some(Self {
            n: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: q(0.5),
            p95_ms: q(0.95),
            p99_ms: q(0.99),
            max_ms: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total: LatencySummary,
    pub preprocess: LatencySummary,
    pub inference: LatencySummary,
}

/// Pushes `n` predicted frames (after a warm-up window) through the engine,
/// cycling over the frames of `sweep`.
pub fn bench(engine: &mut GuidanceEngine, sweep: &crate::phantom::SweepVolume, n: usize) -> Result<BenchReport, GuidanceError> {
    if sweep.is_empty() || n == 0 {
        return Err(GuidanceError::Data(DataError::Shape("bench needs frames and n ≥ 1".into())));
    }
    engine.reset();
    let (mut total, mut pre, mut inf) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut i = 0;
    while total.len() < n {
        let f = &sweep.frames[i % sweep.len()];
        let step = engine.push_frame(&f.image, f.height, f.width, f.pose.to_array())?;
        if step.prediction.is_some() {
            total.push(step.latency_ms);
            pre.push(step.preprocess_ms);
            inf.push(step.inference_ms);
        }
        i += 1;
    }
    Ok(BenchReport {
        total: LatencySummary::from_samples(&total).expect("n ≥ 1"),
        preprocess: LatencySummary::from_samples(&pre).expect("n ≥ 1"),
        inference: LatencySummary::from_samples(&inf).expect("n ≥ 1"),
    })
}
