//! Blocking RPC client. Follows leader redirects.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use conledger_core::service::{Response, SignedRequest};

use crate::wire;

/// Status code for a write sent to a non-leader; body carries `leader_rpc`.
pub const REDIRECT: u16 = 307;
const MAX_REDIRECTS: usize = 5;

pub struct Client {
    addr: String,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    timeout: Duration,
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?.next().ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}

impl Client {
    pub fn new(addr: impl Into<String>) -> Self {
        Client { addr: addr.into(), conn: None, timeout: Duration::from_secs(15) }
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&mut self) -> io::Result<&mut (BufReader<TcpStream>, BufWriter<TcpStream>)> {
        if self.conn.is_none() {
            let s = TcpStream::connect_timeout(&resolve(&self.addr)?, Duration::from_secs(2))?;
            s.set_nodelay(true)?;
            s.set_read_timeout(Some(self.timeout))?;
            self.conn = Some((BufReader::new(s.try_clone()?), BufWriter::new(s)));
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }

    fn round_trip(&mut self, req: &SignedRequest) -> io::Result<Response> {
        let (r, w) = self.connect()?;
        let res = wire::write_frame(w, &wire::encode_request(req)).and_then(|_| wire::read_frame(r));
        match res {
            Ok(Some(b)) => wire::decode_response(&b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Ok(None) => {
                self.conn = None;
                Err(io::Error::new(io::ErrorKind::ConnectionAborted, "server closed the connection"))
            }
            Err(e) => {
                self.conn = None;
                Err(e)
            }
        }
    }

    /// Sends a request; on a redirect, reconnects to the named leader and
    /// resends.
    pub fn call(&mut self, req: &SignedRequest) -> io::Result<Response> {
        for _ in 0..MAX_REDIRECTS {
            let resp = self.round_trip(req)?;
            if resp.status != REDIRECT {
                return Ok(resp);
            }
            match resp.body.get("leader_rpc").and_then(|v| v.as_str()) {
                Some(l) if l != self.addr => {
                    self.addr = l.to_string();
                    self.conn = None;
                }
                _ => {
                    // no leader known yet
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
        Err(io::Error::new(io::ErrorKind::TimedOut, "no leader found"))
    }

    /// Like [`call`](Self::call) but retries connection failures with
    /// bounded exponential backoff.
    pub fn call_with_retry(&mut self, req: &SignedRequest, attempts: u32) -> io::Result<Response> {
        let mut delay = Duration::from_millis(50);
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match self.call(req) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::debug!("request to {} failed: {e}; retrying in {delay:?}", self.addr);
                    last = Some(e);
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(Duration::from_secs(2));
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
