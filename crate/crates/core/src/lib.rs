//! Campus card platform core: door controller, GSM modem emulator, device
//! wire protocol, attendance and payment ledgers, and the event-sourced
//! server state that ties them together.

pub mod attendance;
pub mod card;
pub mod check;
pub mod config;
pub mod door;
pub mod event;
pub mod modem;
pub mod payment;
pub mod sim;
pub mod time;
pub mod wire;
pub mod world;

#[doc(hidden)]
pub use serde_json as __serde_json;

pub use card::{CardRecord, CardUid, DeviceId, Phone, Pin, Registry, Role};
pub use event::{EventRecord, EventStore};
pub use time::{Clock, ManualClock, SystemClock, Timestamp};
pub use wire::WireMessage;
pub use world::{Effects, World, WorldError};
