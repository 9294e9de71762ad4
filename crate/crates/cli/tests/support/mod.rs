//! Just enough of an MQTT 3.1.1 broker for loopback tests: CONNECT,
//! SUBSCRIBE (exact topics), QoS 0 PUBLISH fan-out, PINGREQ and DISCONNECT.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

#[derive(Default)]
struct Shared {
    subscribers: Vec<(String, TcpStream)>,
    published: Vec<(String, Vec<u8>)>,
}

#[derive(Clone)]
pub struct MiniBroker {
    pub addr: String,
    shared: Arc<Mutex<Shared>>,
}

impl MiniBroker {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let shared = Arc::new(Mutex::new(Shared::default()));
        let s = Arc::clone(&shared);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    let _ = serve_client(stream, s);
                });
            }
        });
        Self { addr, shared }
    }

    /// Payloads published on `topic` so far.
    pub fn published(&self, topic: &str) -> Vec<Vec<u8>> {
        let shared = self.shared.lock().unwrap();
        shared
            .published
            .iter()
            .filter(|(t, _)| t == topic)
            .map(|(_, p)| p.clone())
            .collect()
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.lock().unwrap().subscribers.len()
    }

    /// Publishes as if from another client.
    pub fn inject(&self, topic: &str, payload: &[u8]) {
        fan_out(&self.shared, topic, payload);
    }
}

fn read_packet(stream: &mut TcpStream) -> std::io::Result<(u8, Vec<u8>)> {
    let mut head = [0u8; 1];
    stream.read_exact(&mut head)?;
    let (mut len, mut shift) = (0usize, 0);
    loop {
        let mut b = [0u8; 1];
        stream.read_exact(&mut b)?;
        len |= ((b[0] & 0x7f) as usize) << shift;
        if b[0] & 0x80 == 0 {
            break;
        }
        shift += 7;
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok((head[0], body))
}

fn packet(head: u8, body: &[u8]) -> Vec<u8> {
    let mut out = vec![head];
    let mut len = body.len();
    loop {
        let mut b = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            b |= 0x80;
        }
        out.push(b);
        if len == 0 {
            break;
        }
    }
    out.extend_from_slice(body);
    out
}

fn string_at(body: &[u8], at: usize) -> (String, usize) {
    let n = u16::from_be_bytes([body[at], body[at + 1]]) as usize;
    (
        String::from_utf8_lossy(&body[at + 2..at + 2 + n]).into_owned(),
        at + 2 + n,
    )
}

fn fan_out(shared: &Mutex<Shared>, topic: &str, payload: &[u8]) {
    let mut body = Vec::new();
    body.extend_from_slice(&(topic.len() as u16).to_be_bytes());
    body.extend_from_slice(topic.as_bytes());
    body.extend_from_slice(payload);
    let bytes = packet(0x30, &body);
    let mut s = shared.lock().unwrap();
    s.published.push((topic.to_string(), payload.to_vec()));
    s.subscribers
        .retain_mut(|(t, stream)| t != topic || stream.write_all(&bytes).is_ok());
}

fn serve_client(mut stream: TcpStream, shared: Arc<Mutex<Shared>>) -> std::io::Result<()> {
    loop {
        let (head, body) = read_packet(&mut stream)?;
        match head >> 4 {
            1 => stream.write_all(&[0x20, 0x02, 0x00, 0x00])?,
            3 => {
                let (topic, mut at) = string_at(&body, 0);
                if (head >> 1) & 3 > 0 {
                    at += 2;
                }
                fan_out(&shared, &topic, &body[at..]);
            }
            8 => {
                let mut at = 2;
                let mut granted = body[..2].to_vec();
                while at < body.len() {
                    let (topic, next) = string_at(&body, at);
                    at = next + 1;
                    granted.push(0);
                    shared
                        .lock()
                        .unwrap()
                        .subscribers
                        .push((topic, stream.try_clone()?));
                }
                stream.write_all(&packet(0x90, &granted))?;
            }
            12 => stream.write_all(&[0xd0, 0x00])?,
            14 => return Ok(()),
            _ => {}
        }
    }
}
