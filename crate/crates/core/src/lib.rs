//! LearnFlow core: flow documents, the session engine, prompt assembly,
//! reference materials and the durable event log.

pub mod content;
pub mod driver;
pub mod engine;
pub mod event;
pub mod exemplars;
pub mod flow;
pub mod gateway;
pub mod log;
pub mod text;
#[cfg(feature = "testkit")]
pub mod testkit;

pub use content::ContentStore;
pub use engine::{ControlAction, Engine, EngineAction, EngineError, SessionState, SessionStatus};
pub use event::{Clock, Event, EventKind, FixedClock, SystemClock};
pub use flow::{parse_flow, validate_flow, FlowDefinition, Source};
