//! The single serialized command path. Every call into the world takes the
//! lock, runs, then fans out new events and routes commands before releasing
//! it, so subscribers see events in log order with no gaps.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use campus_pass_core::card::DeviceId;
use campus_pass_core::event::EventRecord;
use campus_pass_core::modem::SmsMessage;
use campus_pass_core::time::{Clock, Timestamp};
use campus_pass_core::wire::{Decoded, WireMessage};
use campus_pass_core::world::{Connection, Effects, World};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

struct DeviceRoute {
    conn_id: u64,
    tx: UnboundedSender<WireMessage>,
}

struct Inner {
    world: World,
    published: u64,
    subscribers: Vec<UnboundedSender<EventRecord>>,
    devices: BTreeMap<DeviceId, DeviceRoute>,
    sms_listeners: Vec<UnboundedSender<SmsMessage>>,
    next_conn: u64,
}

pub struct Hub {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
}

impl Hub {
    pub fn new(world: World, clock: Arc<dyn Clock>) -> Hub {
        let published = world.events().len() as u64;
        Hub {
            inner: Mutex::new(Inner {
                world,
                published,
                subscribers: Vec::new(),
                devices: BTreeMap::new(),
                sms_listeners: Vec::new(),
                next_conn: 1,
            }),
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Read-only access under the lock.
    pub fn read<R>(&self, f: impl FnOnce(&World) -> R) -> R {
        f(&self.lock().world)
    }

    /// Runs one mutation and dispatches what it produced. `f` returns a value
    /// for the caller plus effects for other parties.
    pub fn mutate<R>(&self, f: impl FnOnce(&mut World, Timestamp) -> (R, Effects)) -> (R, Vec<WireMessage>, bool) {
        let mut inner = self.lock();
        let now = self.clock.now();
        let (out, effects) = f(&mut inner.world, now);
        inner.publish();
        inner.route(&effects);
        (out, effects.replies, effects.close)
    }

    /// Handles one decoded frame from a device connection. Returns true when the
    /// connection must close. Route registration happens under the same lock, so no
    /// command sent after the `ack` can miss this connection.
    pub fn device_frame(
        &self,
        conn: &mut Connection,
        conn_id: u64,
        tx: &UnboundedSender<WireMessage>,
        decoded: Decoded,
    ) -> bool {
        let mut inner = self.lock();
        let now = self.clock.now();
        let greeted = conn.device.is_some();
        let effects = match decoded {
            Ok(msg) => inner.world.handle_wire(conn, msg, now),
            Err(e) => inner.world.frame_error(conn, &e.to_string(), now),
        };
        if !greeted {
            if let Some((id, _)) = &conn.device {
                inner.devices.insert(id.clone(), DeviceRoute { conn_id, tx: tx.clone() });
            }
        }
        for reply in &effects.replies {
            let _ = tx.send(reply.clone());
        }
        inner.publish();
        inner.route(&effects);
        effects.close
    }

    /// Backlog after `since` plus a live feed, joined atomically.
    pub fn subscribe(&self, since: u64) -> (Vec<EventRecord>, UnboundedReceiver<EventRecord>) {
        let mut inner = self.lock();
        let backlog = inner.world.events().since(since, usize::MAX).to_vec();
        let (tx, rx) = unbounded_channel();
        inner.subscribers.push(tx);
        (backlog, rx)
    }

    pub fn subscribe_sms(&self) -> UnboundedReceiver<SmsMessage> {
        let (tx, rx) = unbounded_channel();
        self.lock().sms_listeners.push(tx);
        rx
    }

    pub fn next_conn_id(&self) -> u64 {
        let mut inner = self.lock();
        inner.next_conn += 1;
        inner.next_conn
    }

    pub fn detach(&self, device: &DeviceId, conn_id: u64) {
        let mut inner = self.lock();
        if inner.devices.get(device).is_some_and(|r| r.conn_id == conn_id) {
            inner.devices.remove(device);
        }
    }

    pub fn connected_devices(&self) -> Vec<DeviceId> {
        self.lock().devices.keys().cloned().collect()
    }
}

impl Inner {
    fn publish(&mut self) {
        let fresh = self.world.events().since(self.published, usize::MAX);
        if let Some(last) = fresh.last() {
            self.published = last.seq;
        }
        let fresh = fresh.to_vec();
        self.subscribers
            .retain(|tx| fresh.iter().all(|e| tx.send(e.clone()).is_ok()));
    }

    fn route(&mut self, effects: &Effects) {
        for (device, msg) in &effects.commands {
            match self.devices.get(device) {
                Some(route) if route.tx.send(msg.clone()).is_ok() => {}
                _ => tracing::warn!(%device, "command for a device that is not connected"),
            }
        }
        for sms in &effects.sms {
            self.sms_listeners.retain(|tx| tx.send(sms.clone()).is_ok());
        }
    }
}
