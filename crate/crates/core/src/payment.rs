//! Server-authoritative balances backed by an append-only ledger.
//!
//! Amounts are integer minor units. Every operation either appends exactly one
//! entry or leaves accounts and ledger untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::card::{verify_pin, CardRecord, CardUid, DeviceId, Pin, Registry};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PaymentError {
    #[error("amount must be positive, got {0}")]
    NonPositiveAmount(i64),
    #[error("balance overflow")]
    Overflow,
    #[error("ledger entry {got} out of sequence, expected {expected}")]
    OutOfSequence { expected: u64, got: u64 },
    #[error("ledger entry would make balance of {0} negative")]
    NegativeBalance(CardUid),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub uid: CardUid,
    pub balance_minor: i64,
    pub updated_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Charge,
    Topup,
    Adjustment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub uid: CardUid,
    pub delta_minor: i64,
    pub kind: EntryKind,
    pub device_id: DeviceId,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeOutcome {
    NewBalance(i64),
    InsufficientFunds { balance_minor: i64 },
    BadPin,
    UnknownCard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopupOutcome {
    NewBalance(i64),
    Forbidden,
    UnknownCard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InquiryOutcome {
    Balance(i64),
    BadPin,
    UnknownCard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reconciliation {
    pub authoritative: i64,
    pub mismatch: bool,
}

/// Server value always wins; a missing cache is never a mismatch.
pub fn reconcile(card_cached_balance_minor: Option<i64>, account: &Account) -> Reconciliation {
    Reconciliation {
        authoritative: account.balance_minor,
        mismatch: card_cached_balance_minor.is_some_and(|c| c != account.balance_minor),
    }
}

/// Either the entry an operation would append, or the reason it would not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prepared<O> {
    Append(LedgerEntry),
    Refuse(O),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentLedger {
    accounts: BTreeMap<CardUid, Account>,
    entries: Vec<LedgerEntry>,
}

impl PaymentLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn account(&self, uid: &CardUid) -> Option<&Account> {
        self.accounts.get(uid)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn balance(&self, uid: &CardUid) -> i64 {
        self.accounts.get(uid).map_or(0, |a| a.balance_minor)
    }

    /// Creates a zero-balance account if none exists.
    pub fn open_account(&mut self, uid: CardUid, now: Timestamp) {
        self.accounts.entry(uid).or_insert(Account {
            uid,
            balance_minor: 0,
            updated_at: now,
        });
    }

    fn next_seq(&self) -> u64 {
        self.entries.len() as u64 + 1
    }

    fn entry(&self, uid: CardUid, delta_minor: i64, kind: EntryKind, device_id: &DeviceId, now: Timestamp) -> LedgerEntry {
        LedgerEntry {
            seq: self.next_seq(),
            uid,
            delta_minor,
            kind,
            device_id: device_id.clone(),
            ts: now,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn prepare_charge(
        &self,
        uid: CardUid,
        pin: &Pin,
        amount_minor: i64,
        device_id: &DeviceId,
        now: Timestamp,
        registry: &Registry,
    ) -> Result<Prepared<ChargeOutcome>, PaymentError> {
        if amount_minor <= 0 {
            return Err(PaymentError::NonPositiveAmount(amount_minor));
        }
        let Some(card) = registry.active(&uid) else {
            return Ok(Prepared::Refuse(ChargeOutcome::UnknownCard));
        };
        if !verify_pin(card, pin.as_str()) {
            return Ok(Prepared::Refuse(ChargeOutcome::BadPin));
        }
        let balance = self.balance(&uid);
        if balance < amount_minor {
            return Ok(Prepared::Refuse(ChargeOutcome::InsufficientFunds { balance_minor: balance }));
        }
        Ok(Prepared::Append(self.entry(uid, -amount_minor, EntryKind::Charge, device_id, now)))
    }

    pub fn charge(
        &mut self,
        uid: CardUid,
        pin: &Pin,
        amount_minor: i64,
        device_id: &DeviceId,
        now: Timestamp,
        registry: &Registry,
    ) -> Result<ChargeOutcome, PaymentError> {
        match self.prepare_charge(uid, pin, amount_minor, device_id, now, registry)? {
            Prepared::Append(entry) => Ok(ChargeOutcome::NewBalance(self.apply_entry(entry)?)),
            Prepared::Refuse(outcome) => Ok(outcome),
        }
    }

    pub fn prepare_topup(
        &self,
        uid: CardUid,
        amount_minor: i64,
        vendor_card: &CardRecord,
        device_id: &DeviceId,
        now: Timestamp,
        registry: &Registry,
    ) -> Result<Prepared<TopupOutcome>, PaymentError> {
        if amount_minor <= 0 {
            return Err(PaymentError::NonPositiveAmount(amount_minor));
        }
        if registry.active(&uid).is_none() {
            return Ok(Prepared::Refuse(TopupOutcome::UnknownCard));
        }
        if !vendor_card.is_active() || !vendor_card.role.can_top_up() {
            return Ok(Prepared::Refuse(TopupOutcome::Forbidden));
        }
        self.balance(&uid).checked_add(amount_minor).ok_or(PaymentError::Overflow)?;
        Ok(Prepared::Append(self.entry(uid, amount_minor, EntryKind::Topup, device_id, now)))
    }

    pub fn topup(
        &mut self,
        uid: CardUid,
        amount_minor: i64,
        vendor_card: &CardRecord,
        device_id: &DeviceId,
        now: Timestamp,
        registry: &Registry,
    ) -> Result<TopupOutcome, PaymentError> {
        match self.prepare_topup(uid, amount_minor, vendor_card, device_id, now, registry)? {
            Prepared::Append(entry) => Ok(TopupOutcome::NewBalance(self.apply_entry(entry)?)),
            Prepared::Refuse(outcome) => Ok(outcome),
        }
    }

    pub fn balance_inquiry(&self, uid: CardUid, pin: &Pin, registry: &Registry) -> InquiryOutcome {
        match registry.active(&uid) {
            None => InquiryOutcome::UnknownCard,
            Some(card) if !verify_pin(card, pin.as_str()) => InquiryOutcome::BadPin,
            Some(_) => InquiryOutcome::Balance(self.balance(&uid)),
        }
    }

    /// Appends an entry after checking sequence and the non-negative floor.
    /// Returns the account's new balance.
    pub fn apply_entry(&mut self, entry: LedgerEntry) -> Result<i64, PaymentError> {
        let expected = self.next_seq();
        if entry.seq != expected {
            return Err(PaymentError::OutOfSequence { expected, got: entry.seq });
        }
        let balance = self
            .balance(&entry.uid)
            .checked_add(entry.delta_minor)
            .ok_or(PaymentError::Overflow)?;
        if balance < 0 {
            return Err(PaymentError::NegativeBalance(entry.uid));
        }
        let account = self.accounts.entry(entry.uid).or_insert(Account {
            uid: entry.uid,
            balance_minor: 0,
            updated_at: entry.ts,
        });
        account.balance_minor = balance;
        account.updated_at = entry.ts;
        self.entries.push(entry);
        Ok(balance)
    }
}
