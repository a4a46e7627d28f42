//! Verification sweeps: exhaustive door model check and modem fuzzing.
//!
//! Both sweeps split their input space into independent pieces, so they run
//! either sequentially or on the rayon pool (`parallel` feature). The two paths
//! must produce identical reports.

use std::collections::BTreeSet;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::card::{CardRecord, CardUid, Pin, Registry, Role};
use crate::config::PlatformConfig;
use crate::door::{step, DoorContext, DoorInput, DoorMode, DoorOutput, DoorState, Key, ModeTag};
use crate::modem::{Modem, ModemMode, CTRL_Z, ESC, MAX_SMS_CHARS};
use crate::time::Timestamp;

pub const KNOWN_UID: CardUid = CardUid::from_bytes([0x9A, 0xBC, 0x12, 0x34]);
pub const UNKNOWN_UID: CardUid = CardUid::from_bytes([0xDE, 0xAD, 0xBE, 0xEF]);
pub const KNOWN_PIN: &str = "1111";
const DOOR_ID: &str = "door-101";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    TapKnown,
    TapUnknown,
    One,
    Hash,
    Star,
    Tick,
    Inside,
    Shutdown,
    Clear,
}

impl Symbol {
    pub const ALL: [Symbol; 9] = [
        Symbol::TapKnown,
        Symbol::TapUnknown,
        Symbol::One,
        Symbol::Hash,
        Symbol::Star,
        Symbol::Tick,
        Symbol::Inside,
        Symbol::Shutdown,
        Symbol::Clear,
    ];

    pub fn input(self) -> DoorInput {
        let key = |c| DoorInput::KeyPress(Key::new(c).expect("keypad key"));
        match self {
            Symbol::TapKnown => DoorInput::CardTap(KNOWN_UID),
            Symbol::TapUnknown => DoorInput::CardTap(UNKNOWN_UID),
            Symbol::One => key('1'),
            Symbol::Hash => key('#'),
            Symbol::Star => key('*'),
            Symbol::Tick => DoorInput::Tick,
            Symbol::Inside => DoorInput::InsideSwitch,
            Symbol::Shutdown => DoorInput::RemoteShutdown,
            Symbol::Clear => DoorInput::AdminClear,
        }
    }

    /// Ticks jump far past every deadline; everything else is a keystroke apart.
    fn advance(self) -> Duration {
        match self {
            Symbol::Tick => Duration::from_secs(1000),
            _ => Duration::from_millis(1),
        }
    }
}

/// Independent description of when an unlock is allowed, computed from the
/// input sequence alone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Witness {
    /// Digits typed since the known card was tapped, capped at the PIN length.
    pending: Option<String>,
    authorised: bool,
}

impl Witness {
    fn push(&mut self, sym: Symbol, pin_length: usize) {
        match sym {
            Symbol::TapKnown if self.pending.is_none() => self.pending = Some(String::new()),
            Symbol::One => {
                if let Some(p) = self.pending.as_mut() {
                    if p.len() < pin_length {
                        p.push('1');
                    }
                }
            }
            Symbol::Star => {
                if let Some(p) = self.pending.as_mut() {
                    p.clear();
                }
            }
            Symbol::Hash => {
                if self.pending.take().as_deref() == Some(KNOWN_PIN) {
                    self.authorised = true;
                }
            }
            Symbol::Tick => self.pending = None,
            Symbol::Inside => self.authorised = true,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub sequence: Vec<Symbol>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelReport {
    /// Sequences of exactly the maximum length.
    pub full_sequences: u64,
    /// Every prefix visited, including the empty one.
    pub states_visited: u64,
    /// Modes seen at each depth, cumulative.
    pub reachable_by_depth: Vec<BTreeSet<ModeTag>>,
    pub violations: Vec<Violation>,
}

impl ModelReport {
    fn merge(mut self, other: ModelReport) -> ModelReport {
        self.full_sequences += other.full_sequences;
        self.states_visited += other.states_visited;
        if self.reachable_by_depth.len() < other.reachable_by_depth.len() {
            self.reachable_by_depth.resize(other.reachable_by_depth.len(), BTreeSet::new());
        }
        for (mine, theirs) in self.reachable_by_depth.iter_mut().zip(other.reachable_by_depth) {
            mine.extend(theirs);
        }
        self.violations.extend(other.violations);
        self.violations.sort_by(|a, b| a.sequence.cmp(&b.sequence));
        self
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// Modes reachable with at most `depth` inputs.
    pub fn reachable_within(&self, depth: usize) -> BTreeSet<ModeTag> {
        self.reachable_by_depth.get(depth).cloned().unwrap_or_default()
    }
}

pub type Stepper = fn(&DoorState, &DoorInput, &DoorContext<'_>, Timestamp) -> (DoorState, Vec<DoorOutput>);

/// Door under test: one active card with PIN 1111.
pub struct Model {
    pub step: Stepper,
    pub config: PlatformConfig,
    pub registry: Registry,
    pub start: Timestamp,
    pub max_len: usize,
}

const MAX_VIOLATIONS: usize = 16;

impl Model {
    pub fn new(config: PlatformConfig, max_len: usize) -> Model {
        let mut registry = Registry::new();
        let pin = Pin::new(KNOWN_PIN).expect("static pin");
        let start = Timestamp::from_secs(1_704_067_200);
        let card = CardRecord::enroll(KNOWN_UID, "Model", &pin, Role::Student, None, start, [7; 16])
            .expect("static card");
        registry.register(card).expect("empty registry");
        Model {
            step,
            config,
            registry,
            start,
            max_len,
        }
    }

    fn ctx(&self) -> DoorContext<'_> {
        DoorContext {
            door_id: DOOR_ID,
            door_phone: None,
            config: &self.config,
            registry: &self.registry,
        }
    }

    fn empty_report(&self) -> ModelReport {
        ModelReport {
            reachable_by_depth: vec![BTreeSet::new(); self.max_len + 1],
            ..ModelReport::default()
        }
    }

    fn visit(
        &self,
        seq: &mut Vec<Symbol>,
        state: &DoorState,
        witness: &Witness,
        now: Timestamp,
        report: &mut ModelReport,
    ) {
        let depth = seq.len();
        report.states_visited += 1;
        for set in &mut report.reachable_by_depth[depth..] {
            set.insert(state.mode.tag());
        }
        let fail = |report: &mut ModelReport, seq: &[Symbol], message: String| {
            if report.violations.len() < MAX_VIOLATIONS {
                report.violations.push(Violation {
                    sequence: seq.to_vec(),
                    message,
                });
            }
        };
        if matches!(state.mode, DoorMode::Unlocked { .. }) && !witness.authorised {
            fail(report, seq, "unlocked without an authorised entry".into());
        }
        if depth == self.max_len {
            report.full_sequences += 1;
            return;
        }
        let absorbing = matches!(state.mode, DoorMode::Lockdown | DoorMode::Shutdown);
        let ctx = self.ctx();
        for sym in Symbol::ALL {
            let t = now + sym.advance();
            let (next, outputs) = (self.step)(state, &sym.input(), &ctx, t);
            seq.push(sym);
            if absorbing && sym != Symbol::Clear && (next != *state || !outputs.is_empty()) {
                fail(report, seq, format!("{:?} left {:?}", sym, state.mode.tag()));
            }
            if absorbing && sym == Symbol::Clear && next != DoorState::default() {
                fail(report, seq, "clear did not reset the door".into());
            }
            let mut w = witness.clone();
            w.push(sym, self.config.pin_length);
            self.visit(seq, &next, &w, t, report);
            seq.pop();
        }
    }

    /// Explores everything below one fixed prefix.
    fn explore_from(&self, prefix: &[Symbol]) -> ModelReport {
        let mut report = self.empty_report();
        let ctx = self.ctx();
        let mut state = DoorState::default();
        let mut witness = Witness::default();
        let mut now = self.start;
        let mut seq = Vec::with_capacity(self.max_len);
        for &sym in prefix {
            now = now + sym.advance();
            let (next, _) = (self.step)(&state, &sym.input(), &ctx, now);
            state = next;
            witness.push(sym, self.config.pin_length);
            seq.push(sym);
        }
        self.visit(&mut seq, &state, &witness, now, &mut report);
        report
    }

    fn root_report(&self) -> ModelReport {
        // The empty sequence is the only node above the split.
        let mut report = self.empty_report();
        report.states_visited = 1;
        for set in &mut report.reachable_by_depth {
            set.insert(ModeTag::Locked);
        }
        report
    }

    pub fn explore_sequential(&self) -> ModelReport {
        if self.max_len == 0 {
            return self.explore_from(&[]);
        }
        Symbol::ALL
            .iter()
            .map(|&s| self.explore_from(&[s]))
            .fold(self.root_report(), ModelReport::merge)
    }

    #[cfg(feature = "parallel")]
    pub fn explore_parallel(&self) -> ModelReport {
        use rayon::prelude::*;
        if self.max_len == 0 {
            return self.explore_from(&[]);
        }
        let mut reports: Vec<ModelReport> = Symbol::ALL
            .par_iter()
            .map(|&s| self.explore_from(&[s]))
            .collect();
        reports.insert(0, self.root_report());
        reports.into_iter().reduce(ModelReport::merge).expect("non-empty")
    }

    /// Parallel when the `parallel` feature is on, sequential otherwise.
    pub fn explore(&self) -> ModelReport {
        #[cfg(feature = "parallel")]
        return self.explore_parallel();
        #[cfg(not(feature = "parallel"))]
        return self.explore_sequential();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub lines: u64,
    pub bytes: u64,
    pub sms_sent: u64,
    pub errors: u64,
    pub violations: Vec<String>,
}

impl FuzzReport {
    fn merge(mut self, other: FuzzReport) -> FuzzReport {
        self.lines += other.lines;
        self.bytes += other.bytes;
        self.sms_sent += other.sms_sent;
        self.errors += other.errors;
        self.violations.extend(other.violations);
        self
    }
}

const FRAGMENTS: &[&[u8]] = &[
    b"AT",
    b"ATE0",
    b"ATE1",
    b"AT+CMGF=1",
    b"AT+CMGF=0",
    b"AT+CMGF=",
    b"AT+CMGS=\"",
    b"+919900112233",
    b"\"",
    b"AT+CMGS=\"123\"",
    b"AT+CSQ",
    b"at+cmgf=1",
    b"hello",
    b"\r",
    b"\n",
    &[CTRL_Z],
    &[ESC],
    &[0xFF, 0xFE],
];

fn fuzz_line(rng: &mut StdRng) -> Vec<u8> {
    let mut line = Vec::new();
    let parts = rng.random_range(0..6);
    for _ in 0..parts {
        match rng.random_range(0..4) {
            0 => {
                let len = rng.random_range(0..48);
                line.extend((0..len).map(|_| rng.random::<u8>()));
            }
            1 if rng.random_bool(0.01) => line.extend(std::iter::repeat_n(b'A', 700)),
            _ => line.extend_from_slice(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]),
        }
    }
    line.push(if rng.random_bool(0.9) { b'\r' } else { CTRL_Z });
    line
}

fn fuzz_chunk(seed: u64, chunk: u64, lines: u64) -> FuzzReport {
    let mut rng = StdRng::seed_from_u64(seed ^ chunk.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut modem = Modem::new("+910000000001");
    let mut report = FuzzReport::default();
    let mut now = Timestamp::from_secs(1_704_067_200);
    let mut last_ref = 0;
    for _ in 0..lines {
        let line = fuzz_line(&mut rng);
        now = now + Duration::from_millis(5);
        let out = modem.step(&line, now);
        report.lines += 1;
        report.bytes += line.len() as u64;
        report.errors += out.response.windows(5).filter(|w| w == b"ERROR").count() as u64;
        for sms in &out.outbound {
            report.sms_sent += 1;
            if sms.body.chars().count() > MAX_SMS_CHARS {
                report.violations.push(format!("chunk {chunk}: body over {MAX_SMS_CHARS} chars"));
            }
        }
        let counter = modem.state().sent_counter;
        if counter < last_ref {
            report.violations.push(format!("chunk {chunk}: reference counter went backwards"));
        }
        last_ref = counter;
        if matches!(modem.state().mode, ModemMode::AwaitingBody { .. }) && !modem.state().text_mode {
            report.violations.push(format!("chunk {chunk}: body mode outside text mode"));
        }
    }
    report
}

/// Feeds `lines` random AT-ish lines, split into independent chunks of `chunk_lines`.
pub fn fuzz_modem_sequential(seed: u64, lines: u64, chunk_lines: u64) -> FuzzReport {
    let chunks = lines.div_ceil(chunk_lines);
    (0..chunks)
        .map(|c| fuzz_chunk(seed, c, chunk_lines.min(lines - c * chunk_lines)))
        .fold(FuzzReport::default(), FuzzReport::merge)
}

#[cfg(feature = "parallel")]
pub fn fuzz_modem_parallel(seed: u64, lines: u64, chunk_lines: u64) -> FuzzReport {
    use rayon::prelude::*;
    let chunks = lines.div_ceil(chunk_lines);
    let reports: Vec<FuzzReport> = (0..chunks)
        .into_par_iter()
        .map(|c| fuzz_chunk(seed, c, chunk_lines.min(lines - c * chunk_lines)))
        .collect();
    reports.into_iter().fold(FuzzReport::default(), FuzzReport::merge)
}

pub fn fuzz_modem(seed: u64, lines: u64, chunk_lines: u64) -> FuzzReport {
    #[cfg(feature = "parallel")]
    return fuzz_modem_parallel(seed, lines, chunk_lines);
    #[cfg(not(feature = "parallel"))]
    return fuzz_modem_sequential(seed, lines, chunk_lines);
}
