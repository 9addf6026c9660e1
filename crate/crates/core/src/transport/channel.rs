//! Channel backends: in-process queues and loopback TCP sockets.
//!
//! Both move the exact encoded frame bytes, so experiments are
//! backend-independent byte for byte.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{decode_frame, encode_frame, Frame, FrameLink, TransportError, FRAME_HEADER_LEN};

/// One endpoint of an in-process channel carrying encoded frames.
pub struct InprocLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Connected pair of in-process endpoints.
pub fn inproc_pair() -> (InprocLink, InprocLink) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (InprocLink { tx: tx_a, rx: rx_a }, InprocLink { tx: tx_b, rx: rx_b })
}

impl FrameLink for InprocLink {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame)?;
        self.tx.send(bytes).map_err(|_| TransportError::Closed)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Frame, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => decode_frame(&bytes),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

/// Wraps a link so one already-received frame is replayed first; used when
/// connection setup must read the registration frame to identify the peer.
pub struct ReplayLink<L> {
    first: Option<Frame>,
    inner: L,
}

impl<L: FrameLink> ReplayLink<L> {
    pub fn new(first: Frame, inner: L) -> Self {
        Self {
            first: Some(first),
            inner,
        }
    }
}

impl<L: FrameLink> FrameLink for ReplayLink<L> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.inner.send(frame)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Frame, TransportError> {
        if let Some(f) = self.first.take() {
            return Ok(f);
        }
        self.inner.recv_timeout(timeout)
    }
}

/// Frame endpoint over a connected TCP stream.
pub struct SocketLink {
    stream: TcpStream,
}

impl SocketLink {
    pub fn new(stream: TcpStream) -> Self {
        stream.set_nodelay(true).ok();
        Self { stream }
    }
}

fn map_io(op: &str, e: std::io::Error, timeout: Duration) -> TransportError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout(timeout),
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe
        | ErrorKind::ConnectionAborted | ErrorKind::NotConnected => TransportError::Closed,
        _ => TransportError::Io(format!("{op}: {e}")),
    }
}

impl FrameLink for SocketLink {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame)?;
        self.stream
            .write_all(&bytes)
            .map_err(|e| map_io("write", e, Duration::ZERO))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Frame, TransportError> {
        self.stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| TransportError::Io(format!("set_read_timeout: {e}")))?;
        let mut header = [0u8; FRAME_HEADER_LEN];
        self.stream
            .read_exact(&mut header)
            .map_err(|e| map_io("read header", e, timeout))?;
        let declared = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        if declared > super::MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(declared));
        }
        let mut buf = vec![0u8; FRAME_HEADER_LEN + declared];
        buf[..FRAME_HEADER_LEN].copy_from_slice(&header);
        self.stream
            .read_exact(&mut buf[FRAME_HEADER_LEN..])
            .map_err(|e| map_io("read payload", e, timeout))?;
        decode_frame(&buf)
    }
}
