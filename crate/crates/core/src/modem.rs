//! Emulated SIM900-class GSM modem: AT command subset, text-mode SMS only.

use std::fmt;

use thiserror::Error;

use crate::card::is_valid_phone;
use crate::time::Timestamp;

pub const CTRL_Z: u8 = 0x1A;
pub const ESC: u8 = 0x1B;
pub const MAX_SMS_CHARS: usize = 160;
const MAX_LINE: usize = 512;
const MAX_BODY_BYTES: usize = MAX_SMS_CHARS * 4;

pub const OK: &[u8] = b"\r\nOK\r\n";
pub const ERROR: &[u8] = b"\r\nERROR\r\n";
pub const PROMPT: &[u8] = b"\r\n> ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModemError {
    #[error("unknown command")]
    UnknownCommand,
    #[error("malformed number {0:?}")]
    MalformedNumber(String),
    #[error("sms body exceeds {MAX_SMS_CHARS} characters")]
    BodyTooLong,
    #[error("sms body is not valid UTF-8")]
    InvalidBody,
    #[error("modem is not in text mode")]
    NotInTextMode,
    #[error("malformed +CMT indication")]
    MalformedIndication,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtCommand {
    Attention,
    EchoOff,
    SetTextMode(u8),
    SendSmsHeader(String),
    SmsBody(String),
    AbortBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsMessage {
    pub from: String,
    pub to: String,
    pub body: String,
    pub ts: Timestamp,
}

impl SmsMessage {
    pub fn new(from: &str, to: &str, body: &str, ts: Timestamp) -> Result<Self, ModemError> {
        check_body(body)?;
        Ok(SmsMessage {
            from: from.to_string(),
            to: to.to_string(),
            body: body.to_string(),
            ts,
        })
    }
}

fn check_body(body: &str) -> Result<(), ModemError> {
    if body.chars().count() > MAX_SMS_CHARS {
        Err(ModemError::BodyTooLong)
    } else {
        Ok(())
    }
}

fn strip_terminator(line: &[u8]) -> &[u8] {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    line.strip_suffix(b"\r").unwrap_or(line)
}

/// Parses one command line (CR or CRLF terminated, or bare).
pub fn parse_at_line(line: &[u8]) -> Result<AtCommand, ModemError> {
    let line = strip_terminator(line);
    let text = std::str::from_utf8(line).map_err(|_| ModemError::UnknownCommand)?;
    let rest = match text.get(..2) {
        Some(at) if at.eq_ignore_ascii_case("AT") => &text[2..],
        _ => return Err(ModemError::UnknownCommand),
    };
    if rest.is_empty() {
        return Ok(AtCommand::Attention);
    }
    if rest.eq_ignore_ascii_case("E0") {
        return Ok(AtCommand::EchoOff);
    }
    if rest.eq_ignore_ascii_case("+CMGF=0") {
        return Ok(AtCommand::SetTextMode(0));
    }
    if rest.eq_ignore_ascii_case("+CMGF=1") {
        return Ok(AtCommand::SetTextMode(1));
    }
    if rest.get(..6).is_some_and(|p| p.eq_ignore_ascii_case("+CMGS=")) {
        let arg = &rest[6..];
        let number = arg
            .strip_prefix('"')
            .and_then(|a| a.strip_suffix('"'))
            .ok_or_else(|| ModemError::MalformedNumber(arg.to_string()))?;
        if !is_valid_phone(number) {
            return Err(ModemError::MalformedNumber(number.to_string()));
        }
        return Ok(AtCommand::SendSmsHeader(number.to_string()));
    }
    Err(ModemError::UnknownCommand)
}

/// Parses an SMS body chunk ending in Ctrl-Z (send) or ESC (abort).
pub fn parse_body(chunk: &[u8]) -> Result<AtCommand, ModemError> {
    match chunk.split_last() {
        Some((&ESC, _)) => Ok(AtCommand::AbortBody),
        Some((&CTRL_Z, body)) => {
            let text = std::str::from_utf8(body).map_err(|_| ModemError::InvalidBody)?;
            check_body(text)?;
            Ok(AtCommand::SmsBody(text.to_string()))
        }
        _ => Err(ModemError::UnknownCommand),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModemMode {
    Command,
    AwaitingBody { to: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModemState {
    pub mode: ModemMode,
    pub echo: bool,
    pub text_mode: bool,
    /// Reference number the next sent SMS receives.
    pub sent_counter: u32,
}

impl Default for ModemState {
    fn default() -> Self {
        ModemState {
            mode: ModemMode::Command,
            echo: true,
            text_mode: false,
            sent_counter: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModemOutput {
    pub response: Vec<u8>,
    pub outbound: Vec<SmsMessage>,
}

/// A virtual modem: state plus the partial line it has buffered so far.
#[derive(Clone, PartialEq, Eq)]
pub struct Modem {
    state: ModemState,
    own_number: String,
    buf: Vec<u8>,
    overflow: bool,
}

impl fmt::Debug for Modem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Modem")
            .field("state", &self.state)
            .field("own_number", &self.own_number)
            .field("buffered", &self.buf.len())
            .finish()
    }
}

impl Modem {
    pub fn new(own_number: &str) -> Self {
        Modem {
            state: ModemState::default(),
            own_number: own_number.to_string(),
            buf: Vec::new(),
            overflow: false,
        }
    }

    pub fn state(&self) -> &ModemState {
        &self.state
    }

    pub fn own_number(&self) -> &str {
        &self.own_number
    }

    /// Feeds bytes from the terminal side; returns what the modem writes back.
    pub fn step(&mut self, input: &[u8], now: Timestamp) -> ModemOutput {
        let mut out = ModemOutput::default();
        for &byte in input {
            match self.state.mode {
                ModemMode::Command => self.command_byte(byte, &mut out),
                ModemMode::AwaitingBody { .. } => self.body_byte(byte, now, &mut out),
            }
        }
        out
    }

    fn command_byte(&mut self, byte: u8, out: &mut ModemOutput) {
        if self.state.echo {
            out.response.push(byte);
        }
        match byte {
            b'\n' => {}
            b'\r' => {
                let line = std::mem::take(&mut self.buf);
                let overflow = std::mem::replace(&mut self.overflow, false);
                if line.is_empty() && !overflow {
                    return;
                }
                let result = if overflow {
                    Err(ModemError::UnknownCommand)
                } else {
                    parse_at_line(&line)
                };
                self.execute(result, out);
            }
            _ if self.buf.len() >= MAX_LINE => self.overflow = true,
            _ => self.buf.push(byte),
        }
    }

    fn execute(&mut self, command: Result<AtCommand, ModemError>, out: &mut ModemOutput) {
        match command {
            Ok(AtCommand::Attention) => out.response.extend_from_slice(OK),
            Ok(AtCommand::EchoOff) => {
                self.state.echo = false;
                out.response.extend_from_slice(OK);
            }
            Ok(AtCommand::SetTextMode(1)) => {
                self.state.text_mode = true;
                out.response.extend_from_slice(OK);
            }
            Ok(AtCommand::SendSmsHeader(to)) if self.state.text_mode => {
                self.state.mode = ModemMode::AwaitingBody { to };
                out.response.extend_from_slice(PROMPT);
            }
            _ => out.response.extend_from_slice(ERROR),
        }
    }

    fn body_byte(&mut self, byte: u8, now: Timestamp, out: &mut ModemOutput) {
        if byte != CTRL_Z && byte != ESC {
            if self.state.echo {
                out.response.push(byte);
            }
            if self.buf.len() >= MAX_BODY_BYTES {
                self.overflow = true;
            } else {
                self.buf.push(byte);
            }
            return;
        }
        let mut chunk = std::mem::take(&mut self.buf);
        chunk.push(byte);
        let overflow = std::mem::replace(&mut self.overflow, false);
        let ModemMode::AwaitingBody { to } = std::mem::replace(&mut self.state.mode, ModemMode::Command) else {
            unreachable!("body bytes only arrive while awaiting a body");
        };
        let parsed = if overflow && byte == CTRL_Z {
            Err(ModemError::BodyTooLong)
        } else {
            parse_body(&chunk)
        };
        match parsed {
            Ok(AtCommand::SmsBody(body)) => {
                let reference = self.state.sent_counter;
                self.state.sent_counter += 1;
                out.outbound.push(SmsMessage {
                    from: self.own_number.clone(),
                    to,
                    body,
                    ts: now,
                });
                out.response
                    .extend_from_slice(format!("\r\n+CMGS: {reference}\r\n\r\nOK\r\n").as_bytes());
            }
            Ok(_) => out.response.extend_from_slice(OK),
            Err(_) => out.response.extend_from_slice(ERROR),
        }
    }

    /// Unsolicited result code announcing an incoming SMS.
    pub fn deliver_incoming_sms(&self, msg: &SmsMessage) -> Result<Vec<u8>, ModemError> {
        if !self.state.text_mode {
            return Err(ModemError::NotInTextMode);
        }
        if !is_valid_phone(&msg.from) {
            return Err(ModemError::MalformedNumber(msg.from.clone()));
        }
        check_body(&msg.body)?;
        Ok(format!(
            "\r\n+CMT: \"{}\",\"\",\"{}\"\r\n{}\r\n",
            msg.from,
            msg.ts.to_modem_format(),
            msg.body
        )
        .into_bytes())
    }
}

/// Parses a `+CMT` indication produced by [`Modem::deliver_incoming_sms`].
pub fn parse_cmt(bytes: &[u8], to: &str) -> Result<SmsMessage, ModemError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ModemError::MalformedIndication)?;
    let rest = text
        .strip_prefix("\r\n+CMT: \"")
        .and_then(|r| r.strip_suffix("\r\n"))
        .ok_or(ModemError::MalformedIndication)?;
    let (header, body) = rest.split_once("\r\n").ok_or(ModemError::MalformedIndication)?;
    let (from, rest) = header.split_once("\",\"\",\"").ok_or(ModemError::MalformedIndication)?;
    let ts = rest.strip_suffix('"').ok_or(ModemError::MalformedIndication)?;
    let ts = Timestamp::parse_modem_format(ts).map_err(|_| ModemError::MalformedIndication)?;
    SmsMessage::new(from, to, body, ts)
}
