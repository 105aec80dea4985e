//! UDP endpoint and a driver that runs an engine over it.

use std::io::ErrorKind;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use socket2::{Domain, Protocol, Socket, Type};

use crate::crypto::Cipher;
use crate::engine::{Callback, Engine, EngineConfig};
use crate::wire::{Packet, MAX_DATAGRAM};

use super::TransportError;

const SOCKET_BUFFER: usize = 8 << 20;

#[derive(Debug)]
pub struct UdpEndpoint {
    socket: UdpSocket,
    buf: Box<[u8]>,
}

impl UdpEndpoint {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(ErrorKind::InvalidInput, "no address to bind"))?;
        let socket = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
        // Best effort; the kernel may clamp these.
        let _ = socket.set_recv_buffer_size(SOCKET_BUFFER);
        let _ = socket.set_send_buffer_size(SOCKET_BUFFER);
        socket.bind(&addr.into())?;
        Ok(Self {
            socket: socket.into(),
            buf: vec![0; 65536].into_boxed_slice(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.socket.local_addr()?)
    }

    pub fn send_to(&self, to: SocketAddr, datagram: &[u8]) -> Result<(), TransportError> {
        if datagram.len() > MAX_DATAGRAM {
            return Err(TransportError::Mtu { len: datagram.len() });
        }
        loop {
            match self.socket.send_to(datagram, to) {
                Ok(_) => return Ok(()),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Waits up to `timeout` for a datagram, then drains whatever else is queued.
    pub fn poll(&mut self, timeout: Duration) -> Result<Vec<(SocketAddr, Vec<u8>)>, TransportError> {
        let mut out = Vec::new();
        self.socket.set_nonblocking(false)?;
        self.socket.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        match self.recv() {
            Ok(Some(d)) => out.push(d),
            Ok(None) => return Ok(out),
            Err(e) => return Err(e),
        }
        self.socket.set_nonblocking(true)?;
        while let Some(d) = self.recv()? {
            out.push(d);
        }
        Ok(out)
    }

    fn recv(&mut self) -> Result<Option<(SocketAddr, Vec<u8>)>, TransportError> {
        loop {
            match self.socket.recv_from(&mut self.buf) {
                Ok((n, from)) => return Ok(Some((from, self.buf[..n].to_vec()))),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(None),
                // ICMP unreachable from an earlier send surfaces here on some platforms.
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// What one [`UdpDriver::step`] produced.
#[derive(Debug, Default)]
pub struct StepOutput {
    pub callbacks: Vec<Callback<SocketAddr>>,
    /// Sends that failed; the packets are lost and the engine retransmits as usual.
    pub send_errors: Vec<TransportError>,
    pub undecodable: usize,
}

/// An engine bound to a UDP endpoint and a wall clock.
pub struct UdpDriver<C> {
    endpoint: UdpEndpoint,
    engine: Engine<SocketAddr>,
    cipher: C,
    epoch: Instant,
}

impl<C: Cipher> UdpDriver<C> {
    pub fn new(endpoint: UdpEndpoint, config: EngineConfig, entropy: u64, cipher: C) -> Self {
        Self {
            endpoint,
            engine: Engine::new(config, entropy),
            cipher,
            epoch: Instant::now(),
        }
    }

    pub fn endpoint(&self) -> &UdpEndpoint {
        &self.endpoint
    }

    pub fn engine(&self) -> &Engine<SocketAddr> {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine<SocketAddr> {
        &mut self.engine
    }

    /// Milliseconds since the driver was created.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn flush(&mut self, out: &mut StepOutput) {
        let mut plain = Vec::with_capacity(MAX_DATAGRAM);
        while let Some((to, packet)) = self.engine.poll_transmit() {
            plain.clear();
            packet.encode_into(&mut plain);
            let sealed = self.cipher.seal(&plain);
            if let Err(e) = self.endpoint.send_to(to, &sealed) {
                out.send_errors.push(e);
            }
        }
        while let Some(cb) = self.engine.poll_callback() {
            out.callbacks.push(cb);
        }
    }

    /// Sends pending packets, waits up to `max_wait` (less if a timer is due
    /// sooner) for input, feeds it to the engine and fires timers.
    pub fn step(&mut self, max_wait: Duration) -> Result<StepOutput, TransportError> {
        let mut out = StepOutput::default();
        self.flush(&mut out);
        let now = self.now_ms();
        let wait = match self.engine.next_deadline() {
            Some(d) => max_wait.min(Duration::from_millis(d.saturating_sub(now))),
            None => max_wait,
        };
        let datagrams = self.endpoint.poll(wait)?;
        let now = self.now_ms();
        for (from, bytes) in datagrams {
            match self.cipher.open(&bytes).ok().and_then(|b| Packet::decode(&b).ok()) {
                Some(packet) => self.engine.handle_packet(from, packet, now),
                None => out.undecodable += 1,
            }
        }
        self.engine.handle_tick(self.now_ms());
        self.flush(&mut out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::IdentityCipher;
    use crate::engine::TransferParameters;
    use crate::wire::{ErrorCode, ErrorPacket, TransferId};

    fn loopback() -> UdpEndpoint {
        UdpEndpoint::bind("127.0.0.1:0").unwrap()
    }

    #[test]
    fn loopback_delivers_bytes_intact() {
        let a = loopback();
        let mut b = loopback();
        let payload: Vec<u8> = (0..1400).map(|i| (i * 7) as u8).collect();
        a.send_to(b.local_addr().unwrap(), &payload).unwrap();
        let got = b.poll(Duration::from_secs(2)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, a.local_addr().unwrap());
        assert_eq!(got[0].1, payload);
    }

    #[test]
    fn oversize_datagram_rejected() {
        let a = loopback();
        let err = a.send_to(a.local_addr().unwrap(), &[0; MAX_DATAGRAM + 1]);
        assert!(matches!(err, Err(TransportError::Mtu { .. })));
    }

    #[test]
    fn unroutable_send_surfaces_error() {
        let a = loopback();
        let to: SocketAddr = "0.0.0.0:0".parse().unwrap();
        let packet = Packet::Error(ErrorPacket {
            id: TransferId(1),
            code: ErrorCode::Busy,
            message: String::new(),
        });
        assert!(matches!(a.send_to(to, &packet.encode()), Err(TransportError::Io(_))));
    }

    #[test]
    fn poll_times_out_empty() {
        let mut a = loopback();
        let start = Instant::now();
        assert!(a.poll(Duration::from_millis(30)).unwrap().is_empty());
        assert!(start.elapsed() >= Duration::from_millis(25));
    }

    #[test]
    fn tick_driven_retransmit_over_udp() {
        let silent = loopback();
        let params = TransferParameters {
            retransmit_interval_ms: 40,
            max_attempts: 3,
            ..Default::default()
        };
        let config = EngineConfig {
            params,
            ..Default::default()
        };
        let mut driver = UdpDriver::new(loopback(), config, 3, IdentityCipher);
        let peer = silent.local_addr().unwrap();
        let now = driver.now_ms();
        driver.engine_mut().start_transfer(peer, "t", vec![], vec![1; 10], None, now).unwrap();
        let mut errored = None;
        let start = Instant::now();
        while errored.is_none() && start.elapsed() < Duration::from_secs(5) {
            let out = driver.step(Duration::from_millis(20)).unwrap();
            errored = out.callbacks.into_iter().find_map(|cb| match cb {
                Callback::Errored { code, .. } => Some(code),
                _ => None,
            });
        }
        assert_eq!(errored, Some(ErrorCode::Timeout));
        let mut silent = silent;
        let got = silent.poll(Duration::from_millis(100)).unwrap();
        let requests = got
            .iter()
            .filter(|(_, b)| matches!(Packet::decode(b), Ok(Packet::WriteRequest(_))))
            .count();
        assert_eq!(requests, 3);
    }
}
