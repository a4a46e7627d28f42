//! TCP listeners for devices and for the modem's network side.

use std::sync::Arc;

use campus_pass_core::wire::{encode_frame, FrameCodec, WireMessage};
use campus_pass_core::world::Connection;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::unbounded_channel;

use crate::hub::Hub;

pub async fn serve_devices(listener: TcpListener, hub: Arc<Hub>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                tracing::debug!(%peer, "device connected");
                tokio::spawn(device_session(stream, hub.clone()));
            }
            Err(e) => tracing::warn!(error = %e, "accept failed"),
        }
    }
}

async fn device_session(stream: TcpStream, hub: Arc<Hub>) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = unbounded_channel::<WireMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let Ok(frame) = encode_frame(&msg) else { continue };
            if wr.write_all(&frame).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });

    let conn_id = hub.next_conn_id();
    let mut conn = Connection::new();
    let mut codec = FrameCodec::new();
    let mut buf = vec![0u8; 16 * 1024];
    'read: loop {
        let n = match rd.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        for decoded in codec.decode(&buf[..n]) {
            if hub.device_frame(&mut conn, conn_id, &tx, decoded) {
                break 'read;
            }
        }
    }
    if let Some(id) = conn.device_id() {
        hub.detach(id, conn_id);
    }
    drop(tx);
    let _ = writer.await;
}

/// Network side of the modem. Clients inject SMS as `<from> <text>` lines and
/// receive every SMS the server sends as `SMS <to> <text>` lines.
pub async fn serve_modem(listener: TcpListener, hub: Arc<Hub>) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                tokio::spawn(modem_session(stream, hub.clone()));
            }
            Err(e) => tracing::warn!(error = %e, "accept failed"),
        }
    }
}

async fn modem_session(stream: TcpStream, hub: Arc<Hub>) {
    let (rd, mut wr) = stream.into_split();
    let mut outbound = hub.subscribe_sms();
    let writer = tokio::spawn(async move {
        while let Some(sms) = outbound.recv().await {
            let line = format!("SMS {} {}\n", sms.to, sms.body.replace('\n', " "));
            if wr.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(rd).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        let line = line.trim_end_matches('\r');
        let Some((from, text)) = line.split_once(' ') else {
            continue;
        };
        hub.mutate(|w, now| ((), w.receive_sms(from, text, now)));
    }
    writer.abort();
}
