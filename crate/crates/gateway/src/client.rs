//! Blocking NDJSON client.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use crate::codec;
use crate::protocol::{ManagementMessage, MessageType, ProtocolError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection: {0}")]
    Io(#[from] std::io::Error),
    #[error("no reply within the timeout")]
    Timeout,
    #[error("server closed the connection")]
    Closed,
    #[error("bad message from server: {0}")]
    Protocol(ProtocolError),
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    peer: SocketAddr,
    next_id: u64,
    pushes: VecDeque<ManagementMessage>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(timeout))?;
                    return Ok(Client {
                        reader: BufReader::new(stream.try_clone()?),
                        writer: stream,
                        peer: a,
                        next_id: 1,
                        pushes: VecDeque::new(),
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))
            .into())
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn set_timeout(&mut self, timeout: Duration) -> Result<(), ClientError> {
        self.writer.set_read_timeout(Some(timeout))?;
        Ok(())
    }

    /// Builds a request with a fresh correlation id.
    pub fn message(&mut self, kind: MessageType, payload: Value) -> ManagementMessage {
        let id = self.next_id;
        self.next_id += 1;
        ManagementMessage::new(kind, id.to_string(), payload)
    }

    pub fn request(&mut self, kind: MessageType, payload: Value) -> Result<ManagementMessage, ClientError> {
        let msg = self.message(kind, payload);
        self.send(&msg)
    }

    /// Sends `msg` and waits for the reply carrying its id. Pushes that
    /// arrive meanwhile are kept for [`Client::next_push`].
    pub fn send(&mut self, msg: &ManagementMessage) -> Result<ManagementMessage, ClientError> {
        self.writer.write_all(codec::encode(msg).as_bytes())?;
        loop {
            let reply = self.read_message()?;
            if reply.kind == MessageType::MetricsPush {
                self.pushes.push_back(reply);
            } else if reply.id == msg.id {
                return Ok(reply);
            }
        }
    }

    /// Sends raw bytes (which need not be valid) and returns the next
    /// non-push message.
    pub fn send_raw(&mut self, line: &[u8]) -> Result<ManagementMessage, ClientError> {
        self.writer.write_all(line)?;
        loop {
            let reply = self.read_message()?;
            if reply.kind != MessageType::MetricsPush {
                return Ok(reply);
            }
            self.pushes.push_back(reply);
        }
    }

    pub fn next_push(&mut self) -> Result<ManagementMessage, ClientError> {
        if let Some(p) = self.pushes.pop_front() {
            return Ok(p);
        }
        loop {
            let m = self.read_message()?;
            if m.kind == MessageType::MetricsPush {
                return Ok(m);
            }
        }
    }

    fn read_message(&mut self) -> Result<ManagementMessage, ClientError> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(ClientError::Closed),
            Ok(_) => codec::decode(&line).map_err(|(_, e)| ClientError::Protocol(e)),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                Err(ClientError::Timeout)
            }
            Err(e) => Err(e.into()),
        }
    }
}
