//! Framing for both listeners.
//!
//! Every frame is `u32 len (LE) || payload`. On the node port the payload
//! is a canonical consensus [`Message`]; on the RPC port a request is a JSON
//! [`SignedRequest`] and its reply a JSON [`Response`].

use std::io::{self, Read, Write};

use conledger_core::codec::Canonical;
use conledger_core::consensus::Message;
use conledger_core::service::{Response, SignedRequest};

pub const MAX_FRAME: usize = 64 << 20;

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    m.to_bytes()
}

pub fn decode_message(b: &[u8]) -> Option<Message> {
    Message::from_bytes(b).ok()
}

pub fn encode_request(r: &SignedRequest) -> Vec<u8> {
    serde_json::to_vec(r).expect("requests serialize")
}

pub fn decode_request(b: &[u8]) -> Result<SignedRequest, String> {
    serde_json::from_slice(b).map_err(|e| e.to_string())
}

pub fn encode_response(r: &Response) -> Vec<u8> {
    serde_json::to_vec(r).expect("responses serialize")
}

pub fn decode_response(b: &[u8]) -> Result<Response, String> {
    serde_json::from_slice(b).map_err(|e| e.to_string())
}
