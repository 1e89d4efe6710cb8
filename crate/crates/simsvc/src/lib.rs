//! Live simulator service: a policy flying the simulated vehicle in real
//! (or scaled) time, streaming telemetry and accepting commands over
//! WebSocket.

pub mod protocol;
pub mod server;
pub mod sim;

pub use protocol::{decode_message, encode_frame, ClientMessage, Event, ServerFrame, TelemetryFrame};
pub use server::{start, RunningService, ServiceInfo};
pub use sim::SimCore;
