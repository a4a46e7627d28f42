//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use campus_pass_core::attendance::{AttendanceLedger, Session, TapOutcome};
use campus_pass_core::card::{CardRecord, CardUid, DeviceId, Phone, Pin, Registry, Role};
use campus_pass_core::check::{fuzz_modem, Model, Symbol};
use campus_pass_core::config::{PlatformConfig, Settings};
use campus_pass_core::door::ModeTag;
use campus_pass_core::modem::Modem;
use campus_pass_core::payment::{ChargeOutcome, PaymentLedger, TopupOutcome};
use campus_pass_core::sim::{demo_world, run_scenario, ScenarioScript, SimResult};
use campus_pass_core::time::Timestamp;
use campus_pass_core::wire::{decode_all, decode_line, encode_frame, CommandName, DeviceKind, FrameCodec, WireMessage};
use campus_pass_core::world::{Connection, NewCard, World};
use campus_pass_core::event_data;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

// Pinned parameters.
const FSM_MAX_LEN: usize = 6;
const FSM_TIME_LIMIT: Duration = Duration::from_secs(10);
const RELOCK_AFTER_MS: i64 = 5_000;
const FUZZ_LINES: u64 = 100_000;
const CHUNKINGS: usize = 1_000;
const STREAM_MESSAGES: usize = 100;
const ROUND_TRIPS: usize = 10_000;
const LEDGER_BYTE_CHECK_EVERY: usize = 250;
const LEDGER_OPS: usize = 10_000;
const LEDGER_ACCOUNTS: usize = 100;
const REPLAY_OPS: usize = 500;

const OWNER_PHONE: &str = "+919900112233";
const DOOR_PHONE: &str = "+919900000101";

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn scenario(name: &str) -> SimResult {
    let text = std::fs::read_to_string(repo_root().join("scenarios").join(name)).unwrap();
    let world = Settings::parse(&std::fs::read_to_string(repo_root().join("scenarios/world.conf")).unwrap())
        .unwrap()
        .world;
    run_scenario(&ScenarioScript::parse(&text).unwrap(), &world).unwrap()
}

fn kinds(r: &SimResult) -> Vec<&str> {
    r.trace.iter().map(|e| e.kind.as_str()).collect()
}

fn at(secs: f64) -> Timestamp {
    Timestamp::from_millis(1_704_067_200_000 + (secs * 1000.0) as i64)
}

// ----- criteria -----

fn fsm_model_check() -> Outcome {
    let model = Model::new(PlatformConfig::default(), FSM_MAX_LEN);
    let started = Instant::now();
    let report = model.explore();
    let elapsed = started.elapsed();

    let expected_full = (Symbol::ALL.len() as u64).pow(FSM_MAX_LEN as u32);
    let expected_states: u64 = (0..=FSM_MAX_LEN as u32).map(|k| 9u64.pow(k)).sum();
    ensure(report.full_sequences == expected_full, || {
        format!("explored {} sequences, expected {expected_full}", report.full_sequences)
    })?;
    ensure(report.states_visited == expected_states, || {
        format!("visited {} prefixes, expected {expected_states}", report.states_visited)
    })?;
    ensure(report.is_clean(), || format!("violations: {:?}", report.violations))?;
    let all: BTreeSet<ModeTag> = [
        ModeTag::Locked,
        ModeTag::AwaitingPin,
        ModeTag::Unlocked,
        ModeTag::Lockdown,
        ModeTag::Shutdown,
    ]
    .into();
    ensure(report.reachable_within(5) == all, || {
        format!("reachable within 5: {:?}", report.reachable_within(5))
    })?;
    ensure(elapsed < FSM_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{expected_full} sequences of length {FSM_MAX_LEN}, {expected_states} prefixes, 0 violations, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn authorized_entry() -> Outcome {
    let r = scenario("authorized_entry.scn");
    ensure(kinds(&r) == ["pin_prompt", "door_unlocked", "door_relocked"], || format!("trace {:?}", kinds(&r)))?;
    let unlocked = &r.trace[1];
    let relocked = &r.trace[2];
    let gap = relocked.ts.as_millis() - unlocked.ts.as_millis();
    ensure(gap == RELOCK_AFTER_MS, || format!("relock after {gap} ms"))?;
    ensure(unlocked.ts == at(5.0), || format!("unlocked at {}", unlocked.ts))?;
    ensure(r.sms.len() == 1, || format!("{} SMS sent", r.sms.len()))?;
    let expected = "ALERT: door door-101 unlocked at 2024-01-01T00:00:05Z";
    ensure(r.sms[0].body == expected && r.sms[0].to == OWNER_PHONE, || format!("sms {:?}", r.sms[0]))?;
    ensure(r.passed(), || "expect directive failed".into())?;
    Ok(format!("relock after {gap} ms, sms {:?}", r.sms[0].body))
}

fn breach() -> Outcome {
    let r = scenario("breach.scn");
    ensure(kinds(&r) == ["breach_attempt", "lockdown"], || format!("trace {:?}", kinds(&r)))?;
    let buzzers = r.outputs.iter().filter(|o| o.output == "buzzer_on").count();
    ensure(buzzers == 1, || format!("{buzzers} buzzer outputs"))?;
    ensure(r.sms.len() == 1, || format!("{} SMS sent", r.sms.len()))?;
    let expected = "ALERT: breach attempt at door door-101 at 2024-01-01T00:00:01Z";
    ensure(r.sms[0].body == expected && r.sms[0].to == DOOR_PHONE, || format!("sms {:?}", r.sms[0]))?;
    ensure(r.passed(), || "expect directive failed".into())?;

    let cleared = scenario("breach_then_clear.scn");
    ensure(
        kinds(&cleared)
            == ["breach_attempt", "lockdown", "door_command", "lockdown_cleared", "pin_prompt", "pin_timeout"],
        || format!("after clear: {:?}", kinds(&cleared)),
    )?;
    ensure(cleared.passed(), || "clear expects failed".into())?;
    Ok("lockdown absorbs the valid tap, clears only on command".into())
}

fn remote_shutdown() -> Outcome {
    let r = scenario("remote_shutdown.scn");
    ensure(kinds(&r) == ["door_command", "remote_shutdown"], || format!("trace {:?}", kinds(&r)))?;
    let door = DeviceId::new("door-101").unwrap();
    let delivered = &r.commands;
    ensure(
        delivered.len() == 1
            && delivered[0].0 == door
            && matches!(delivered[0].1, WireMessage::Command { name: CommandName::Shutdown, .. }),
        || format!("commands {delivered:?}"),
    )?;
    let unlocks = r.outputs.iter().filter(|o| o.output == "actuator_unlock").count();
    ensure(unlocks == 0, || "door opened after shutdown".into())?;
    ensure(r.passed(), || "expect directive failed".into())?;

    // The inbound SMS travels as a +CMT indication on the modem line.
    #[derive(Clone, Default)]
    struct Tap(Arc<Mutex<Vec<u8>>>);
    impl Write for Tap {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let mut world = World::new(demo_world(), Some(1));
    world.seed(at(0.0)).unwrap();
    let tap = Tap::default();
    world.set_modem_transcript(Box::new(tap.clone()));
    let fx = world.receive_sms(OWNER_PHONE, "SHUTDOWN door-101", at(1.0));
    let line = String::from_utf8(tap.0.lock().unwrap().clone()).unwrap();
    let urc = "\r\n+CMT: \"+919900112233\",\"\",\"24/01/01,00:00:01+00\"\r\nSHUTDOWN door-101\r\n";
    ensure(line == urc, || format!("modem line {line:?}"))?;
    ensure(fx.commands.len() == 1, || "no command from +CMT".into())?;
    Ok("command{shutdown} delivered via +CMT, later taps refused".into())
}

fn modem_golden_and_fuzz() -> Outcome {
    let input = fixture("send_sms.at-input");
    let expected = fixture("send_sms.at-transcript");
    let mut modem = Modem::new("+910000000001");
    let out = modem.step(&input, at(0.0));
    ensure(out.response == expected, || {
        format!("transcript {:?}", String::from_utf8_lossy(&out.response))
    })?;
    ensure(
        out.outbound.len() == 1 && out.outbound[0].to == "123" && out.outbound[0].body == "hello",
        || format!("outbound {:?}", out.outbound),
    )?;
    // Byte-at-a-time feeding gives the same stream.
    let mut modem = Modem::new("+910000000001");
    let split: Vec<u8> = input.iter().flat_map(|b| modem.step(&[*b], at(0.0)).response).collect();
    ensure(split == expected, || "byte-wise transcript differs".into())?;

    let report = fuzz_modem(0xC0FFEE, FUZZ_LINES, 5_000);
    ensure(report.lines == FUZZ_LINES, || format!("fuzzed {} lines", report.lines))?;
    ensure(report.violations.is_empty(), || format!("{:?}", report.violations))?;
    Ok(format!(
        "golden {} bytes match; fuzz {} lines, {} SMS, 0 crashes",
        expected.len(),
        report.lines,
        report.sms_sent
    ))
}

fn codec() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5EED);
    let messages: Vec<WireMessage> = (0..STREAM_MESSAGES).map(|i| common::message_of(&mut rng, i % 10)).collect();
    let stream: Vec<u8> = messages.iter().flat_map(|m| encode_frame(m).unwrap()).collect();
    let single: Vec<WireMessage> = decode_all(&stream).into_iter().map(Result::unwrap).collect();
    ensure(single == messages, || "single-shot decode differs".into())?;
    for n in 0..CHUNKINGS {
        let mut codec = FrameCodec::new();
        let mut out = Vec::new();
        let mut rest = &stream[..];
        while !rest.is_empty() {
            let take = rng.random_range(1..=rest.len().min(if n % 2 == 0 { 8 } else { 600 }));
            out.extend(codec.decode(&rest[..take]));
            rest = &rest[take..];
        }
        let out: Vec<WireMessage> = out.into_iter().map(Result::unwrap).collect();
        ensure(out == single, || format!("chunking {n} differs"))?;
    }
    let mut per_type = BTreeMap::new();
    for i in 0..ROUND_TRIPS {
        let msg = common::message_of(&mut rng, i % 10);
        let frame = encode_frame(&msg).unwrap();
        ensure(frame.ends_with(b"\n") && !frame[..frame.len() - 1].contains(&b'\n'), || {
            format!("frame not one line: {msg:?}")
        })?;
        let back = decode_line(&frame).map_err(|e| format!("{e}: {msg:?}"))?;
        ensure(back == msg, || format!("round trip changed {msg:?}"))?;
        *per_type.entry(msg.type_name()).or_insert(0) += 1;
    }
    ensure(per_type.len() == 10, || format!("types covered {per_type:?}"))?;
    Ok(format!("{CHUNKINGS} chunkings of {STREAM_MESSAGES} messages, {ROUND_TRIPS} round trips over 10 types"))
}

fn ledger_conservation() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x1ED6E5);
    let t0 = at(0.0);
    let mut registry = Registry::new();
    let mut pins = BTreeMap::new();
    let mut roles = BTreeMap::new();
    let mut uids = Vec::new();
    for i in 0..LEDGER_ACCOUNTS {
        let uid = CardUid::from_bytes([0xA0, 0, (i >> 8) as u8, i as u8]);
        let pin = format!("{:04}", rng.random_range(0..10_000));
        let role = match i % 20 {
            0 => Role::Vendor,
            1 => Role::Admin,
            2 => Role::Staff,
            _ => Role::Student,
        };
        let record = CardRecord::enroll(uid, &format!("holder {i}"), &Pin::new(&pin).unwrap(), role, None, t0, [i as u8; 16]).unwrap();
        registry.register(record).unwrap();
        pins.insert(uid, pin);
        roles.insert(uid, role);
        uids.push(uid);
    }
    // Two strangers and one revoked card.
    let strangers = [CardUid::from_bytes([1, 2, 3, 4]), CardUid::from_bytes([5, 6, 7, 8])];
    registry.revoke(uids[99]).unwrap();
    let active = |u: &CardUid| u != &uids[99] && pins.contains_key(u);

    let mut ledger = PaymentLedger::new();
    // Rebuilt from applied entries only, through the replay path. A refused op
    // must leave `ledger` equal to it; equality is derived over every field.
    let mut mirror = PaymentLedger::new();
    let mut model: BTreeMap<CardUid, i64> = BTreeMap::new();
    let device = DeviceId::new("pos-1").unwrap();
    let (mut ok, mut refused) = (0, 0);
    for op in 0..LEDGER_OPS {
        let now = at(op as f64);
        let target = if rng.random_bool(0.03) { strangers[rng.random_range(0..2)] } else { uids[rng.random_range(0..uids.len())] };
        let changed = if rng.random_bool(0.45) {
            let vendor = if rng.random_bool(0.7) {
                uids[rng.random_range(0..5) * 20 + rng.random_range(0..2)]
            } else {
                uids[rng.random_range(0..uids.len())]
            };
            let amount = if rng.random_bool(0.02) { -rng.random_range(0..100) } else { rng.random_range(1..20_000) };
            let vendor_card = registry.get(&vendor).unwrap().clone();
            let allowed = amount > 0
                && active(&target)
                && active(&vendor)
                && matches!(roles[&vendor], Role::Vendor | Role::Admin);
            match ledger.topup(target, amount, &vendor_card, &device, now, &registry) {
                Ok(TopupOutcome::NewBalance(b)) => {
                    ensure(allowed, || format!("op {op}: top-up should have been refused"))?;
                    *model.entry(target).or_insert(0) += amount;
                    ensure(b == model[&target], || format!("op {op}: balance {b} != model"))?;
                    true
                }
                _ => {
                    ensure(!allowed, || format!("op {op}: valid top-up refused"))?;
                    false
                }
            }
        } else {
            let right_pin = rng.random_bool(0.85);
            let pin = match (right_pin, pins.get(&target)) {
                (true, Some(p)) => p.clone(),
                (_, Some(p)) => if p == "0000" { "0001".into() } else { "0000".into() },
                (_, None) => "1234".into(),
            };
            let amount = rng.random_range(1..8_000);
            let balance = model.get(&target).copied().unwrap_or(0);
            let allowed = active(&target) && right_pin && balance >= amount;
            match ledger.charge(target, &Pin::new(&pin).unwrap(), amount, &device, now, &registry) {
                Ok(ChargeOutcome::NewBalance(b)) => {
                    ensure(allowed, || format!("op {op}: charge should have been refused"))?;
                    *model.entry(target).or_insert(0) -= amount;
                    ensure(b == model[&target], || format!("op {op}: balance {b} != model"))?;
                    true
                }
                _ => {
                    ensure(!allowed, || format!("op {op}: valid charge refused"))?;
                    false
                }
            }
        };
        if changed {
            ok += 1;
            let entry = ledger.entries().last().cloned().expect("applied op appends");
            mirror
                .apply_entry(entry)
                .map_err(|e| format!("op {op}: entry does not replay: {e}"))?;
        } else {
            refused += 1;
            ensure(ledger == mirror, || format!("op {op}: refused op changed state"))?;
        }
        if op % LEDGER_BYTE_CHECK_EVERY == 0 || op + 1 == LEDGER_OPS {
            ensure(
                serde_json::to_vec(&ledger).unwrap() == serde_json::to_vec(&mirror).unwrap(),
                || format!("op {op}: serialized state differs from replay"),
            )?;
        }
        ensure(ledger.balance(&target) >= 0, || format!("op {op}: negative balance"))?;
    }
    for (i, entry) in ledger.entries().iter().enumerate() {
        ensure(entry.seq == i as u64 + 1, || format!("seq gap at {i}: {}", entry.seq))?;
    }
    let mut sums: BTreeMap<CardUid, i64> = BTreeMap::new();
    for e in ledger.entries() {
        *sums.entry(e.uid).or_insert(0) += e.delta_minor;
    }
    for account in ledger.accounts() {
        let sum = sums.get(&account.uid).copied().unwrap_or(0);
        ensure(account.balance_minor == sum, || format!("{}: balance != delta sum", account.uid))?;
        ensure(account.balance_minor >= 0, || format!("{}: negative", account.uid))?;
        ensure(model.get(&account.uid).copied().unwrap_or(0) == sum, || format!("{}: model differs", account.uid))?;
    }
    ensure(ok > 1_000 && refused > 1_000, || format!("degenerate mix: {ok} ok, {refused} refused"))?;
    Ok(format!("{LEDGER_OPS} ops ({ok} applied, {refused} refused) over {LEDGER_ACCOUNTS} accounts"))
}

fn attendance_dedupe() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xA77E);
    let t0 = at(0.0);
    let mut registry = Registry::new();
    let names = ["Shravan", "O\"Neil, A", "Meera", "Li, Wei", "Ana \"AJ\" Jo", "Ravi"];
    let mut uids = Vec::new();
    for i in 0..30u8 {
        let uid = CardUid::from_bytes([0xC0, 0, 0, i]);
        let name = format!("{} {i}", names[i as usize % names.len()]);
        registry
            .register(CardRecord::enroll(uid, &name, &Pin::new("1234").unwrap(), Role::Student, None, t0, [i; 16]).unwrap())
            .unwrap();
        uids.push(uid);
    }
    for &u in &uids[25..] {
        registry.revoke(u).unwrap();
    }
    let tappers: Vec<CardUid> = uids.iter().copied().chain((0..5).map(|i| CardUid::from_bytes([0xEE, 0, 0, i]))).collect();

    for round in 0..50 {
        let mut ledger = AttendanceLedger::new();
        let sessions: Vec<String> = (0..4).map(|i| format!("S{round}-{i}")).collect();
        for s in &sessions {
            ledger
                .open_session(Session {
                    session_id: s.clone(),
                    course: "CS101".into(),
                    device_id: DeviceId::new("att-1").unwrap(),
                    opened_at: t0,
                    closed_at: None,
                })
                .unwrap();
        }
        let mut closed = BTreeSet::new();
        let mut expected: BTreeMap<String, BTreeSet<(String, String, String)>> = BTreeMap::new();
        let mut accepted_count: BTreeMap<(String, CardUid), u32> = BTreeMap::new();
        for step in 0..400 {
            let now = at(1.0 + step as f64);
            let s = &sessions[rng.random_range(0..sessions.len())];
            if rng.random_bool(0.005) && !closed.contains(s) {
                ledger.close_session(s, now).unwrap();
                closed.insert(s.clone());
                continue;
            }
            let uid = tappers[rng.random_range(0..tappers.len())];
            let outcome = ledger.record_tap(s, uid, &registry, now).unwrap();
            let fresh = !closed.contains(s)
                && registry.active(&uid).is_some()
                && !accepted_count.contains_key(&(s.clone(), uid));
            match outcome {
                TapOutcome::Accepted(rec) => {
                    ensure(fresh, || format!("{s}/{uid}: accepted twice or wrongly"))?;
                    *accepted_count.entry((s.clone(), uid)).or_insert(0) += 1;
                    expected
                        .entry(s.clone())
                        .or_default()
                        .insert((uid.to_string(), rec.holder_name.clone(), now.to_string()));
                }
                other => ensure(!fresh, || format!("{s}/{uid}: should be accepted, got {other:?}"))?,
            }
        }
        ensure(accepted_count.values().all(|&c| c == 1), || "accepted more than once".into())?;
        for s in &sessions {
            let csv_bytes = ledger.export_csv(s).unwrap();
            let mut reader = csv::Reader::from_reader(csv_bytes.as_slice());
            let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
            ensure(header == ["uid", "name", "timestamp"], || format!("header {header:?}"))?;
            let parsed: BTreeSet<(String, String, String)> = reader
                .records()
                .map(|r| {
                    let r = r.unwrap();
                    (r[0].to_string(), r[1].to_string(), r[2].to_string())
                })
                .collect();
            let want = expected.remove(s).unwrap_or_default();
            ensure(parsed == want, || format!("{s}: csv {} rows, expected {}", parsed.len(), want.len()))?;
        }
    }

    // Three-record session against the stored file.
    let mut registry = Registry::new();
    for (uid, name) in [("0000BEEF", "Shravan"), ("9ABC1234", "O\"Neil, A"), ("1111AAAA", "Meera")] {
        let uid = CardUid::parse(uid).unwrap();
        registry
            .register(CardRecord::enroll(uid, name, &Pin::new("1234").unwrap(), Role::Student, None, t0, [0; 16]).unwrap())
            .unwrap();
    }
    let mut ledger = AttendanceLedger::new();
    ledger
        .open_session(Session {
            session_id: "CS101-L1".into(),
            course: "CS101".into(),
            device_id: DeviceId::new("att-1").unwrap(),
            opened_at: t0,
            closed_at: None,
        })
        .unwrap();
    let nine = |s: f64| at(9.0 * 3600.0 + s);
    for (uid, t) in [("9ABC1234", nine(5.0)), ("1111AAAA", nine(5.0)), ("0000BEEF", nine(60.0))] {
        ledger.record_tap("CS101-L1", CardUid::parse(uid).unwrap(), &registry, t).unwrap();
    }
    let got = ledger.export_csv("CS101-L1").unwrap();
    ensure(got == fixture("three_records.csv"), || format!("csv {:?}", String::from_utf8_lossy(&got)))?;
    Ok("50 randomized rounds, 1 accept per (session, uid), csv parses back, fixture matches".into())
}

fn replay_equivalence() -> Outcome {
    #[derive(Clone, Default)]
    struct Log(Arc<Mutex<Vec<u8>>>);
    impl Write for Log {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    let mut rng = StdRng::seed_from_u64(0x2E9);
    let config = demo_world();
    let mut world = World::new(config.clone(), Some(42));
    let log = Log::default();
    world.set_event_sink(Box::new(log.clone()));
    world.seed(at(0.0)).unwrap();

    let token = config.device_token.clone();
    let mut conns = BTreeMap::new();
    for (id, kind) in [("door-101", DeviceKind::Door), ("att-1", DeviceKind::Attendance), ("pos-1", DeviceKind::Pos)] {
        let mut c = Connection::new();
        let device_id = DeviceId::new(id).unwrap();
        world.handle_wire(&mut c, WireMessage::Hello { device_id, kind, token: token.clone() }, at(0.0));
        conns.insert(id, c);
    }
    let mut uids: Vec<CardUid> = config.seed_cards.iter().map(|c| c.uid).collect();
    let vendor = CardUid::parse("A0000001").unwrap();
    let mut sessions = vec!["CS101-L1".to_string()];
    let mut kinds_seen = BTreeSet::new();
    for op in 0..REPLAY_OPS {
        let now = at(1.0 + op as f64 * 0.25);
        let uid = if rng.random_bool(0.1) { common::uid(&mut rng) } else { uids[rng.random_range(0..uids.len())] };
        let before = world.events().len();
        match rng.random_range(0..11) {
            0 => {
                let new = common::uid(&mut rng);
                let phone = rng.random_bool(0.5).then(|| Phone::new("+919812345678").unwrap());
                let role = [Role::Student, Role::Staff, Role::Vendor][rng.random_range(0..3)];
                if world
                    .register_card(
                        NewCard { uid: new, holder_name: common::nonempty_text(&mut rng, 10).replace(|c: char| c.is_control(), "x"), pin: Pin::new("1234").unwrap(), role, owner_phone: phone },
                        now,
                    )
                    .is_ok()
                {
                    uids.push(new);
                }
            }
            1 => {
                let _ = world.revoke_card(uid, now);
            }
            2 => {
                let _ = world.topup(uid, rng.random_range(1..5_000), vendor, DeviceId::new("pos-1").unwrap(), now);
            }
            3 => {
                let id = format!("S{op}");
                if world.open_session(&id, "CS102", DeviceId::new("att-1").unwrap(), now).is_ok() {
                    sessions.push(id);
                }
            }
            4 => {
                let s = sessions[rng.random_range(0..sessions.len())].clone();
                let _ = world.close_session(&s, now);
            }
            5 | 6 => {
                let session_id = sessions[rng.random_range(0..sessions.len())].clone();
                let c = conns.get_mut("att-1").unwrap();
                world.handle_wire(c, WireMessage::AttendanceTap { device_id: DeviceId::new("att-1").unwrap(), session_id, uid, ts: now }, now);
            }
            7 => {
                let c = conns.get_mut("pos-1").unwrap();
                let pin = Pin::new(if rng.random_bool(0.7) { "1234" } else { "0000" }).unwrap();
                let cached = rng.random_bool(0.3).then(|| rng.random_range(0..10_000));
                let msg = if rng.random_bool(0.7) {
                    WireMessage::ChargeRequest { device_id: DeviceId::new("pos-1").unwrap(), uid, pin, amount_minor: rng.random_range(1..3_000), ts: now, cached_balance_minor: cached }
                } else {
                    WireMessage::BalanceInquiry { device_id: DeviceId::new("pos-1").unwrap(), uid, pin, ts: now, cached_balance_minor: cached }
                };
                world.handle_wire(c, msg, now);
            }
            8 => {
                let c = conns.get_mut("door-101").unwrap();
                let (kind, data) = match rng.random_range(0..5) {
                    0 => ("lockdown", event_data!("alert" => "breach", "uid" => uid.to_string(), "reason" => "unknown_card")),
                    1 => ("lockdown_cleared", event_data!()),
                    2 => ("remote_shutdown", event_data!()),
                    3 => ("door_unlocked", event_data!("alert" => "unlocked", "uid" => uid.to_string())),
                    _ => ("pin_prompt", event_data!("uid" => uid.to_string())),
                };
                world.handle_wire(c, WireMessage::DoorEvent { device_id: DeviceId::new("door-101").unwrap(), kind: kind.into(), data, ts: now }, now);
            }
            9 => {
                let text = ["SHUTDOWN door-101", "CLEAR door-101", "OPEN door-101"][rng.random_range(0..3)];
                let from = [OWNER_PHONE, DOOR_PHONE, "+15550001111"][rng.random_range(0..3)];
                world.receive_sms(from, text, now);
            }
            _ => {
                let c = conns.get_mut("door-101").unwrap();
                world.handle_wire(c, WireMessage::Heartbeat { ts: now }, now);
            }
        }
        for e in &world.events().all()[before..] {
            kinds_seen.insert(e.kind.clone());
        }
    }
    let written = log.0.lock().unwrap().clone();
    ensure(written == world.events().to_bytes(), || "sink bytes differ from the store".into())?;
    let replayed = World::replay(config, &written, None).map_err(|e| e.to_string())?;
    let (live, back) = (world.snapshot(), replayed.snapshot());
    ensure(live == back, || "replayed snapshot differs".into())?;
    ensure(kinds_seen.len() >= 15, || format!("too few event kinds: {kinds_seen:?}"))?;
    Ok(format!(
        "{REPLAY_OPS} ops, {} events, {} event kinds, snapshot {} bytes identical",
        world.events().len(),
        kinds_seen.len(),
        live.len()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("fsm_model_check", fsm_model_check),
        ("scenario_authorized_entry", authorized_entry),
        ("scenario_breach", breach),
        ("scenario_remote_shutdown", remote_shutdown),
        ("modem_golden_transcript_and_fuzz", modem_golden_and_fuzz),
        ("codec_split_invariance_and_round_trip", codec),
        ("ledger_conservation", ledger_conservation),
        ("attendance_dedupe_and_csv", attendance_dedupe),
        ("event_replay_snapshot", replay_equivalence),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
