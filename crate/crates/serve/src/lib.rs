//! Live accompaniment over a websocket: one session per connection, chord
//! frame `t` sent before melody frame `t` is consumed.

pub mod protocol;
pub mod registry;
pub mod server;
pub mod session;

pub use protocol::{Message, PerturbationRecord, SessionMetrics};
pub use registry::{ModelInfo, ModelRegistry};
pub use server::{router, serve, AppState, Connection, ServerConfig};
pub use session::{Direction, Session, SessionError, SessionOptions, Transcript, WireEvent};
