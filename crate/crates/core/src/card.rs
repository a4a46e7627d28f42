//! Card identity, PIN handling and the card registry.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::time::Timestamp;

pub const SALT_LEN: usize = 16;
pub const MIN_PIN_LEN: usize = 4;
pub const MAX_PIN_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CardError {
    #[error("malformed uid {0:?}: expected 8 hexadecimal characters")]
    MalformedUid(String),
    #[error("malformed pin: expected {MIN_PIN_LEN}-{MAX_PIN_LEN} decimal digits")]
    MalformedPin,
    #[error("malformed phone number {0:?}")]
    MalformedPhone(String),
    #[error("malformed device id {0:?}")]
    MalformedDeviceId(String),
    #[error("invalid holder name {0:?}")]
    InvalidHolderName(String),
    #[error("unknown role {0:?}")]
    UnknownRole(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("card {0} is already registered")]
    DuplicateUid(CardUid),
    #[error("card {0} is not registered")]
    UnknownCard(CardUid),
}

/// Four-octet card identifier, rendered as 8 uppercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CardUid([u8; 4]);

impl CardUid {
    pub const fn from_bytes(bytes: [u8; 4]) -> Self {
        CardUid(bytes)
    }

    pub const fn as_bytes(&self) -> [u8; 4] {
        self.0
    }

    pub fn parse(text: &str) -> Result<Self, CardError> {
        if text.len() != 8 || !text.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CardError::MalformedUid(text.to_string()));
        }
        let mut bytes = [0u8; 4];
        hex::decode_to_slice(text, &mut bytes)
            .map_err(|_| CardError::MalformedUid(text.to_string()))?;
        Ok(CardUid(bytes))
    }
}

/// Parses a card uid, accepting either letter case.
pub fn parse_uid(text: &str) -> Result<CardUid, CardError> {
    CardUid::parse(text)
}

impl fmt::Display for CardUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode_upper(self.0))
    }
}

impl fmt::Debug for CardUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CardUid({self})")
    }
}

impl FromStr for CardUid {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CardUid::parse(s)
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let text = String::deserialize(deserializer)?;
                text.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(CardUid);

/// Keypad PIN: decimal digits only.
#[derive(Clone, PartialEq, Eq)]
pub struct Pin(String);

impl Pin {
    pub fn new(digits: &str) -> Result<Self, CardError> {
        let len = digits.len();
        if !(MIN_PIN_LEN..=MAX_PIN_LEN).contains(&len) || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(CardError::MalformedPin);
        }
        Ok(Pin(digits.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Pin(****)")
    }
}

impl fmt::Display for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Pin {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pin::new(s)
    }
}

string_serde!(Pin);

/// Phone number: optional leading `+` then 3 to 15 digits.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Phone(String);

pub fn is_valid_phone(text: &str) -> bool {
    let digits = text.strip_prefix('+').unwrap_or(text);
    (3..=15).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit())
}

impl Phone {
    pub fn new(text: &str) -> Result<Self, CardError> {
        if is_valid_phone(text) {
            Ok(Phone(text.to_string()))
        } else {
            Err(CardError::MalformedPhone(text.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Phone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Phone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Phone({})", self.0)
    }
}

impl FromStr for Phone {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phone::new(s)
    }
}

string_serde!(Phone);

/// Identifier of a device or door: 1 to 64 characters from `[A-Za-z0-9._:-]`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(text: &str) -> Result<Self, CardError> {
        let ok = (1..=64).contains(&text.len())
            && text
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b':' | b'-'));
        if ok {
            Ok(DeviceId(text.to_string()))
        } else {
            Err(CardError::MalformedDeviceId(text.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({})", self.0)
    }
}

impl FromStr for DeviceId {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceId::new(s)
    }
}

string_serde!(DeviceId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Staff,
    Vendor,
    Admin,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Staff => "staff",
            Role::Vendor => "vendor",
            Role::Admin => "admin",
        }
    }

    pub fn can_top_up(self) -> bool {
        matches!(self, Role::Vendor | Role::Admin)
    }
}

impl FromStr for Role {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "student" => Ok(Role::Student),
            "staff" => Ok(Role::Staff),
            "vendor" => Ok(Role::Vendor),
            "admin" => Ok(Role::Admin),
            other => Err(CardError::UnknownRole(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardStatus {
    Active,
    Revoked,
}

/// SHA-256 over `salt || pin`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PinDigest([u8; 32]);

impl PinDigest {
    pub fn compute(salt: &[u8; SALT_LEN], pin: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(salt);
        hasher.update(pin.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&hasher.finalize());
        PinDigest(out)
    }

    /// Compares every octet regardless of where the first difference is.
    pub fn matches(&self, other: &PinDigest) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

impl fmt::Debug for PinDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PinDigest({})", hex::encode(self.0))
    }
}

impl Serialize for PinDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for PinDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(PinDigest(out))
    }
}

mod salt_hex {
    use super::SALT_LEN;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(salt: &[u8; SALT_LEN], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(salt))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<[u8; SALT_LEN], D::Error> {
        let text = String::deserialize(deserializer)?;
        let mut out = [0u8; SALT_LEN];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

fn validate_holder_name(name: &str) -> Result<(), CardError> {
    if name.trim().is_empty() || name.chars().any(char::is_control) || name.chars().count() > 128 {
        return Err(CardError::InvalidHolderName(name.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardRecord {
    pub uid: CardUid,
    pub holder_name: String,
    pub pin_digest: PinDigest,
    #[serde(with = "salt_hex")]
    pub salt: [u8; SALT_LEN],
    pub role: Role,
    pub status: CardStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner_phone: Option<Phone>,
    pub registered_at: Timestamp,
}

impl CardRecord {
    /// Builds an active record holding only the salted digest of `pin`.
    pub fn enroll(
        uid: CardUid,
        holder_name: &str,
        pin: &Pin,
        role: Role,
        owner_phone: Option<Phone>,
        registered_at: Timestamp,
        salt: [u8; SALT_LEN],
    ) -> Result<Self, CardError> {
        validate_holder_name(holder_name)?;
        Ok(CardRecord {
            uid,
            holder_name: holder_name.to_string(),
            pin_digest: PinDigest::compute(&salt, pin.as_str()),
            salt,
            role,
            status: CardStatus::Active,
            owner_phone,
            registered_at,
        })
    }

    pub fn is_active(&self) -> bool {
        self.status == CardStatus::Active
    }
}

/// True iff `attempt` is the PIN the record was enrolled with.
pub fn verify_pin(record: &CardRecord, attempt: &str) -> bool {
    PinDigest::compute(&record.salt, attempt).matches(&record.pin_digest)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    cards: BTreeMap<CardUid, CardRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, record: CardRecord) -> Result<(), RegistryError> {
        if self.cards.contains_key(&record.uid) {
            return Err(RegistryError::DuplicateUid(record.uid));
        }
        self.cards.insert(record.uid, record);
        Ok(())
    }

    /// Replaces a revoked record with a fresh enrollment. Active cards are refused.
    pub fn reenroll(&mut self, record: CardRecord) -> Result<(), RegistryError> {
        match self.cards.get(&record.uid) {
            Some(existing) if existing.is_active() => Err(RegistryError::DuplicateUid(record.uid)),
            _ => {
                self.cards.insert(record.uid, record);
                Ok(())
            }
        }
    }

    pub fn revoke(&mut self, uid: CardUid) -> Result<(), RegistryError> {
        let record = self.cards.get_mut(&uid).ok_or(RegistryError::UnknownCard(uid))?;
        record.status = CardStatus::Revoked;
        Ok(())
    }

    pub fn get(&self, uid: &CardUid) -> Option<&CardRecord> {
        self.cards.get(uid)
    }

    pub fn active(&self, uid: &CardUid) -> Option<&CardRecord> {
        self.cards.get(uid).filter(|r| r.is_active())
    }

    pub fn contains(&self, uid: &CardUid) -> bool {
        self.cards.contains_key(uid)
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CardRecord> {
        self.cards.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(uid: &str, pin: &str) -> CardRecord {
        CardRecord::enroll(
            CardUid::parse(uid).unwrap(),
            "Shravan",
            &Pin::new(pin).unwrap(),
            Role::Student,
            None,
            Timestamp::from_secs(0),
            [7u8; SALT_LEN],
        )
        .unwrap()
    }

    #[test]
    fn uid_parsing() {
        assert_eq!(parse_uid("9abc1234").unwrap().to_string(), "9ABC1234");
        assert_eq!(parse_uid("00000000").unwrap().to_string(), "00000000");
        assert!(matches!(parse_uid("9ABC12"), Err(CardError::MalformedUid(_))));
        assert!(parse_uid("9ABC123G").is_err());
        assert!(parse_uid("+ABC1234").is_err());
        assert!(parse_uid("9ABC12345").is_err());
    }

    proptest! {
        #[test]
        fn uid_round_trip(bytes in any::<[u8; 4]>()) {
            let uid = CardUid::from_bytes(bytes);
            let text = uid.to_string();
            prop_assert!(text.len() == 8 && text.bytes().all(|b| b.is_ascii_digit() || (b'A'..=b'F').contains(&b)));
            prop_assert_eq!(parse_uid(&text).unwrap(), uid);
        }
    }

    #[test]
    fn pin_rejects_keypad_letters_and_bad_lengths() {
        assert!(Pin::new("1234").is_ok());
        assert!(Pin::new("12345678").is_ok());
        assert!(Pin::new("123").is_err());
        assert!(Pin::new("123456789").is_err());
        assert!(Pin::new("12A4").is_err());
        assert!(Pin::new("12*4").is_err());
        assert_eq!(format!("{:?}", Pin::new("1234").unwrap()), "Pin(****)");
    }

    #[test]
    fn verify_pin_examples() {
        let r = record("AAAA0001", "1234");
        assert!(verify_pin(&r, "1234"));
        assert!(!verify_pin(&r, "1235"));
        assert!(!verify_pin(&r, "12345"));
        assert_ne!(hex::encode(r.pin_digest.0), hex::encode("1234"));
    }

    #[test]
    fn verify_pin_brute_force_four_and_five_digits() {
        let r = record("AAAA0001", "1234");
        let mut accepted = Vec::new();
        for n in 0..10_000u32 {
            let attempt = format!("{n:04}");
            if verify_pin(&r, &attempt) {
                accepted.push(attempt);
            }
        }
        for n in 0..100_000u32 {
            assert!(!verify_pin(&r, &format!("{n:05}")));
        }
        assert_eq!(accepted, vec!["1234".to_string()]);
    }

    #[test]
    fn digest_compare_checks_all_octets() {
        let a = PinDigest([0u8; 32]);
        let mut last = [0u8; 32];
        last[31] = 1;
        assert!(a.matches(&a));
        assert!(!a.matches(&PinDigest(last)));
    }

    #[test]
    fn registration_examples() {
        let mut reg = Registry::new();
        reg.register(record("AAAA0001", "1234")).unwrap();
        assert_eq!(reg.len(), 1);
        let before = reg.clone();
        assert_eq!(
            reg.register(record("AAAA0001", "9999")),
            Err(RegistryError::DuplicateUid(CardUid::parse("AAAA0001").unwrap()))
        );
        assert_eq!(reg, before);
        reg.register(record("AAAA0002", "1234")).unwrap();
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn reenroll_only_replaces_revoked_cards() {
        let mut reg = Registry::new();
        let uid = CardUid::parse("AAAA0001").unwrap();
        reg.register(record("AAAA0001", "1234")).unwrap();
        assert!(reg.reenroll(record("AAAA0001", "5555")).is_err());
        reg.revoke(uid).unwrap();
        assert!(reg.active(&uid).is_none());
        reg.reenroll(record("AAAA0001", "5555")).unwrap();
        assert!(verify_pin(reg.active(&uid).unwrap(), "5555"));
        assert_eq!(reg.len(), 1);
    }

    proptest! {
        #[test]
        fn registry_never_holds_duplicates(ids in proptest::collection::vec(0u8..8, 0..40)) {
            let mut reg = Registry::new();
            let mut seen = std::collections::BTreeSet::new();
            for id in ids {
                let uid = format!("AAAA000{id}");
                let before = reg.clone();
                let res = reg.register(record(&uid, "1234"));
                if seen.insert(id) {
                    prop_assert!(res.is_ok());
                    prop_assert_eq!(reg.len(), before.len() + 1);
                } else {
                    prop_assert!(res.is_err());
                    prop_assert_eq!(&reg, &before);
                }
            }
            prop_assert_eq!(reg.len(), seen.len());
        }
    }

    #[test]
    fn phones_and_device_ids() {
        assert!(is_valid_phone("+919900112233"));
        assert!(is_valid_phone("123"));
        assert!(!is_valid_phone("12"));
        assert!(!is_valid_phone("+1234567890123456"));
        assert!(!is_valid_phone("99-00"));
        assert!(DeviceId::new("door-101").is_ok());
        assert!(DeviceId::new("door 101").is_err());
        assert!(DeviceId::new("").is_err());
    }

    #[test]
    fn holder_name_validation() {
        let pin = Pin::new("1234").unwrap();
        let uid = CardUid::parse("AAAA0001").unwrap();
        let mk = |name: &str| {
            CardRecord::enroll(uid, name, &pin, Role::Staff, None, Timestamp::from_secs(0), [0; SALT_LEN])
        };
        assert!(mk("O\"Neil, A").is_ok());
        assert!(mk("").is_err());
        assert!(mk("line\nbreak").is_err());
    }
}
