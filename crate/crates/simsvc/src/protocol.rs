//! Wire format: one JSON object per WebSocket text frame, newline
//! terminated, discriminated by a `type` field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use aerobat::composer::{AnchorSpec, Script};
use aerobat::config::MAX_TIME_SCALE;
use aerobat::rewards::RewardBreakdown;
use aerobat::tasks::{Status, TaskId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid message: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Switch the active maneuver at the next policy step.
    Command {
        task: TaskId,
        #[serde(default)]
        param: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<AnchorSpec>,
    },
    /// Start a built-in script by name, or an inline script.
    RunScript {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<Script>,
    },
    /// Manual trigger event for the running script.
    Trigger,
    Pause,
    Resume,
    Reset,
    SetTimeScale {
        factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    /// Accumulated roll angle of the active maneuver, rad.
    pub roll: f64,
    /// Accumulated pitch angle of the active maneuver, rad.
    pub pitch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptState {
    pub name: String,
    /// Next step to fire; `None` once all steps have fired.
    pub pending_step: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryFrame {
    pub seq: u64,
    /// Simulated time, s.
    pub t: f64,
    pub p: [f64; 3],
    /// Attitude quaternion [w, x, y, z].
    pub q: [f64; 4],
    pub v: [f64; 3],
    /// Body rates, rad/s.
    pub omega: [f64; 3],
    pub task: TaskId,
    pub param: f64,
    pub reward: RewardBreakdown,
    pub progress: Progress,
    pub status: Status,
    pub paused: bool,
    pub time_scale: f64,
    pub script: Option<ScriptState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    CommandApplied { t: f64, task: TaskId, param: f64 },
    ScriptStarted { t: f64, name: String },
    TriggerFired { t: f64, step: usize, task: TaskId, param: f64 },
    ScriptFinished { t: f64, name: String },
    /// The vehicle crashed or diverged and was reset to hover.
    Crashed { t: f64, status: Status },
    Reset { t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerFrame {
    Hello {
        protocol_version: u32,
        config_hash: String,
        network_hash: String,
        tasks: Vec<TaskId>,
        scripts: Vec<String>,
        policy_hz: f64,
        telemetry_hz: f64,
    },
    Telemetry(TelemetryFrame),
    Event(Event),
    Error {
        message: String,
    },
}

/// JSON text plus the trailing newline.
pub fn encode_frame(frame: &ServerFrame) -> String {
    let mut s = serde_json::to_string(frame).expect("frames serialize");
    s.push('\n');
    s
}

pub fn encode_message(msg: &ClientMessage) -> String {
    let mut s = serde_json::to_string(msg).expect("messages serialize");
    s.push('\n');
    s
}

pub fn decode_message(text: &str) -> Result<ClientMessage, ProtocolError> {
    let value: serde_json::Value = serde_json::from_str(text.trim()).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let n_fields = value.as_object().map_or(0, |o| o.len());
    let msg: ClientMessage = serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    // serde skips unknown-field checks on internally tagged unit variants
    let unit = matches!(msg, ClientMessage::Trigger | ClientMessage::Pause | ClientMessage::Resume | ClientMessage::Reset);
    if unit && n_fields != 1 {
        return Err(ProtocolError::Malformed("unexpected fields for a message without payload".into()));
    }
    match &msg {
        ClientMessage::SetTimeScale { factor } if !(*factor > 0.0 && *factor <= MAX_TIME_SCALE) => {
            Err(ProtocolError::Invalid(format!("time scale must lie in (0, {MAX_TIME_SCALE}], got {factor}")))
        }
        ClientMessage::Command { param, .. } if !param.is_finite() => Err(ProtocolError::Invalid("param must be finite".into())),
        ClientMessage::RunScript { name, script } if name.is_some() == script.is_some() => {
            Err(ProtocolError::Invalid("run_script needs exactly one of `name` or `script`".into()))
        }
        _ => Ok(msg),
    }
}

pub fn decode_frame(text: &str) -> Result<ServerFrame, ProtocolError> {
    serde_json::from_str(text.trim()).map_err(|e| ProtocolError::Malformed(e.to_string()))
}
