//! Newline-delimited JSON messages shared by the TCP and WebSocket endpoints.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::Recommendation;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}, expected 1")]
    Version(Value),
    #[error("bad image payload: {0}")]
    Image(String),
}

/// Client to server. `v` may be omitted; any other value than 1 is refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Rotate the virtual probe by a relative angle.
    Control { dtheta_deg: f64 },
    /// Move the virtual probe to an absolute angle.
    SetTheta { theta_deg: f64 },
    /// A frame from an external probe. The image is base64 of little-endian
    /// f32 pixels; without explicit dimensions it must be square.
    Frame {
        seq: u64,
        pose: [f64; 6],
        image_b64: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        height: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<usize>,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        match value.get("v") {
            None => {}
            Some(v) if v.as_u64() == Some(PROTOCOL_VERSION as u64) => {}
            Some(v) => return Err(ProtocolError::Version(v.clone())),
        }
        let msg: Self = serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        let finite = match &msg {
            ClientMessage::Control { dtheta_deg } => dtheta_deg.is_finite(),
            ClientMessage::SetTheta { theta_deg } => theta_deg.is_finite(),
            ClientMessage::Frame { pose, .. } => pose.iter().all(|p| p.is_finite()),
        };
        if !finite {
            return Err(ProtocolError::Malformed("non-finite number".into()));
        }
        Ok(msg)
    }

    pub fn to_json(&self) -> String {
        with_version(serde_json::to_value(self).expect("message serialises"))
    }
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Sent once on connect.
    Hello {
        mode: String,
        arc_deg: f64,
        theta_deg: f64,
        window: usize,
    },
    State {
        seq: u64,
        theta_deg: f64,
        /// Raw frame, base64 of little-endian f32, `height × width`.
        image_b64: String,
        height: usize,
        width: usize,
        /// (O, P, C) probabilities; null while warming up.
        position: Option<[f64; 3]>,
        /// (R, S, L) probabilities; null while warming up.
        direction: Option<[f64; 3]>,
        recommendation: Recommendation,
        latency_ms: f64,
        preprocess_ms: f64,
        inference_ms: f64,
        /// Ingress messages discarded so far because the queue was full.
        dropped: u64,
        /// The requested angle lay outside the arc and was clamped.
        clamped: bool,
    },
    Error { message: String },
}

impl ServerMessage {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        with_version(serde_json::to_value(self).expect("message serialises"))
    }

    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error { message: message.into() }
    }
}

fn with_version(mut value: Value) -> String {
    value
        .as_object_mut()
        .expect("tagged enums serialise to objects")
        .insert("v".into(), PROTOCOL_VERSION.into());
    value.to_string()
}

pub fn encode_image(pixels: &[f32]) -> String {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_image(b64: &str) -> Result<Vec<f32>, ProtocolError> {
    let bytes = STANDARD.decode(b64).map_err(|e| ProtocolError::Image(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(ProtocolError::Image(format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
