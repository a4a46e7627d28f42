//! Platform parameters and the flat `key = value` configuration format.
//!
//! One file configures both the server and the scenario worlds:
//!
//! ```text
//! # timing
//! relock_after = 5
//! pin_entry_timeout = 10
//! door.door-101.phone = +919900000101
//! reader.att-1.session = CS101-0901
//! pos.canteen-1 =
//! card.9ABC1234 = Shravan | 1234 | student | +919900112233
//! session.CS101-0901 = CS101 | att-1
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::card::{CardUid, DeviceId, Phone, Pin, Role, MAX_PIN_LEN, MIN_PIN_LEN};

pub const CONFIG_ENV: &str = "CAMPUS_PASS_CONFIG";
pub const DEFAULT_WIRE_PORT: u16 = 7410;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: {message}")]
    InvalidValue { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformConfig {
    pub pin_length: usize,
    pub pin_entry_timeout: Duration,
    pub relock_after: Duration,
    pub failed_attempts_to_lockdown: u32,
    pub system_phone: Phone,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            pin_length: 4,
            pin_entry_timeout: Duration::from_secs(10),
            relock_after: Duration::from_secs(5),
            failed_attempts_to_lockdown: 1,
            system_phone: Phone::new("+910000000000").expect("static phone"),
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| ConfigError::InvalidValue {
            key: key.to_string(),
            message: message.to_string(),
        };
        if !(MIN_PIN_LEN..=MAX_PIN_LEN).contains(&self.pin_length) {
            return Err(bad("pin_length", "must be between 4 and 8"));
        }
        if self.pin_entry_timeout.is_zero() {
            return Err(bad("pin_entry_timeout", "must be positive"));
        }
        if self.relock_after.is_zero() {
            return Err(bad("relock_after", "must be positive"));
        }
        if self.failed_attempts_to_lockdown == 0 {
            return Err(bad("failed_attempts_to_lockdown", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DoorSettings {
    pub phone: Option<Phone>,
    pub owner: Option<CardUid>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReaderSettings {
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedCard {
    pub uid: CardUid,
    pub holder_name: String,
    pub pin: Pin,
    pub role: Role,
    pub owner_phone: Option<Phone>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSession {
    pub session_id: String,
    pub course: String,
    pub device_id: DeviceId,
}

/// Everything the server logic needs to know about its surroundings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldConfig {
    pub platform: PlatformConfig,
    pub doors: BTreeMap<DeviceId, DoorSettings>,
    pub readers: BTreeMap<DeviceId, ReaderSettings>,
    pub pos: BTreeSet<DeviceId>,
    pub device_token: String,
    pub modem_number: Phone,
    pub seed_cards: Vec<SeedCard>,
    pub seed_sessions: Vec<SeedSession>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            platform: PlatformConfig::default(),
            doors: BTreeMap::new(),
            readers: BTreeMap::new(),
            pos: BTreeSet::new(),
            device_token: "campus-pass-device".to_string(),
            modem_number: Phone::new("+910000000001").expect("static phone"),
            seed_cards: Vec::new(),
            seed_sessions: Vec::new(),
        }
    }
}

impl WorldConfig {
    pub fn is_device(&self, id: &DeviceId) -> bool {
        self.doors.contains_key(id) || self.readers.contains_key(id) || self.pos.contains(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerSettings {
    pub wire_addr: String,
    pub http_addr: String,
    pub modem_addr: String,
    pub event_log: Option<PathBuf>,
    pub admin_token: Option<String>,
    pub modem_transcript: Option<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings {
            wire_addr: format!("127.0.0.1:{DEFAULT_WIRE_PORT}"),
            http_addr: "127.0.0.1:7411".to_string(),
            modem_addr: "127.0.0.1:7412".to_string(),
            event_log: None,
            admin_token: None,
            modem_transcript: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    pub world: WorldConfig,
    pub server: ServerSettings,
}

fn parse_seconds(key: &str, value: &str) -> Result<Duration, ConfigError> {
    let secs: f64 = value.parse().map_err(|_| invalid(key, "expected seconds"))?;
    if !secs.is_finite() || secs <= 0.0 {
        return Err(invalid(key, "must be a positive number of seconds"));
    }
    Ok(Duration::from_millis((secs * 1000.0).round() as u64))
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        message: message.into(),
    }
}

fn fields(value: &str) -> Vec<&str> {
    value.split('|').map(str::trim).collect()
}

fn optional(value: &str) -> Option<&str> {
    let v = value.trim();
    (!v.is_empty()).then_some(v)
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings, ConfigError> {
        let mut settings = Settings::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            settings.set(key.trim(), value.trim())?;
        }
        settings.world.platform.validate()?;
        Ok(settings)
    }

    /// Applies one `key = value` assignment; used for file lines and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let world = &mut self.world;
        let platform = &mut world.platform;
        let server = &mut self.server;
        match key {
            "pin_length" => {
                platform.pin_length = value.parse().map_err(|_| invalid(key, "expected integer"))?;
            }
            "pin_entry_timeout" => platform.pin_entry_timeout = parse_seconds(key, value)?,
            "relock_after" => platform.relock_after = parse_seconds(key, value)?,
            "failed_attempts_to_lockdown" => {
                platform.failed_attempts_to_lockdown =
                    value.parse().map_err(|_| invalid(key, "expected integer"))?;
            }
            "system_phone" => platform.system_phone = value.parse().map_err(|e| invalid(key, format!("{e}")))?,
            "device_token" => world.device_token = value.to_string(),
            "modem_number" => world.modem_number = value.parse().map_err(|e| invalid(key, format!("{e}")))?,
            "wire_addr" => server.wire_addr = value.to_string(),
            "wire_port" => server.wire_addr = format!("127.0.0.1:{value}"),
            "http_addr" => server.http_addr = value.to_string(),
            "modem_addr" => server.modem_addr = value.to_string(),
            "event_log" => server.event_log = optional(value).map(PathBuf::from),
            "admin_token" => server.admin_token = optional(value).map(str::to_string),
            "modem_transcript" => server.modem_transcript = optional(value).map(PathBuf::from),
            _ => return self.set_keyed(key, value),
        }
        Ok(())
    }

    fn set_keyed(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let world = &mut self.world;
        let device = |id: &str| DeviceId::new(id).map_err(|e| invalid(key, format!("{e}")));

        if let Some(rest) = key.strip_prefix("door.") {
            let (id, attr) = rest.split_once('.').unwrap_or((rest, ""));
            let door = world.doors.entry(device(id)?).or_default();
            match attr {
                "" => {}
                "phone" => {
                    door.phone = optional(value)
                        .map(|v| v.parse().map_err(|e| invalid(key, format!("{e}"))))
                        .transpose()?;
                }
                "owner" => {
                    door.owner = optional(value)
                        .map(|v| v.parse().map_err(|e| invalid(key, format!("{e}"))))
                        .transpose()?;
                }
                _ => return Err(invalid(key, "unknown door attribute")),
            }
        } else if let Some(rest) = key.strip_prefix("reader.") {
            let (id, attr) = rest.split_once('.').unwrap_or((rest, ""));
            let reader = world.readers.entry(device(id)?).or_default();
            match attr {
                "" => {}
                "session" => reader.session = optional(value).map(str::to_string),
                _ => return Err(invalid(key, "unknown reader attribute")),
            }
        } else if let Some(id) = key.strip_prefix("pos.") {
            world.pos.insert(device(id)?);
        } else if let Some(uid) = key.strip_prefix("card.") {
            let uid = CardUid::parse(uid).map_err(|e| invalid(key, format!("{e}")))?;
            let parts = fields(value);
            if !(3..=4).contains(&parts.len()) {
                return Err(invalid(key, "expected name | pin | role [| phone]"));
            }
            let seed = SeedCard {
                uid,
                holder_name: parts[0].to_string(),
                pin: parts[1].parse().map_err(|e| invalid(key, format!("{e}")))?,
                role: parts[2].parse().map_err(|e| invalid(key, format!("{e}")))?,
                owner_phone: parts
                    .get(3)
                    .and_then(|p| optional(p))
                    .map(|p| p.parse().map_err(|e| invalid(key, format!("{e}"))))
                    .transpose()?,
            };
            world.seed_cards.retain(|c| c.uid != uid);
            world.seed_cards.push(seed);
        } else if let Some(id) = key.strip_prefix("session.") {
            let parts = fields(value);
            if parts.len() != 2 || id.is_empty() {
                return Err(invalid(key, "expected course | device"));
            }
            world.seed_sessions.retain(|s| s.session_id != id);
            world.seed_sessions.push(SeedSession {
                session_id: id.to_string(),
                course: parts[0].to_string(),
                device_id: device(parts[1])?,
            });
        } else {
            return Err(invalid(key, "unknown key"));
        }
        Ok(())
    }
}
