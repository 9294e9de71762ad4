//! MQTT plumbing for the belt topic: a QoS 0 publisher and a subscription feed.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use rumqttc::{Client, Event, MqttOptions, Packet, QoS};
use vw_core::belt::Transport;
use vw_core::{Error, Result};

const KEEP_ALIVE: Duration = Duration::from_secs(5);
const RECONNECT_PAUSE: Duration = Duration::from_millis(500);

/// Splits `host:port`; a bare host gets the standard port.
pub fn parse_broker(addr: &str) -> Result<(String, u16)> {
    match addr.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() => {
            let port = port
                .parse()
                .map_err(|_| Error::Config(format!("bad broker port in `{addr}`")))?;
            Ok((host.to_string(), port))
        }
        None if !addr.is_empty() => Ok((addr.to_string(), 1883)),
        _ => Err(Error::Config(format!("bad broker address `{addr}`"))),
    }
}

fn options(broker: &str, client_id: &str) -> Result<MqttOptions> {
    let (host, port) = parse_broker(broker)?;
    let mut opts = MqttOptions::new(client_id, host, port);
    opts.set_keep_alive(KEEP_ALIVE);
    Ok(opts)
}

/// Publishes belt payloads. Reports an error while the broker link is down so
/// the publisher can back off and raise its connectivity flag.
pub struct MqttTransport {
    client: Client,
    link: Arc<AtomicBool>,
}

impl MqttTransport {
    pub fn connect(broker: &str, client_id: &str) -> Result<Self> {
        let (client, mut connection) = Client::new(options(broker, client_id)?, 16);
        let link = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&link);
        thread::Builder::new()
            .name("mqtt-pub".into())
            .spawn(move || {
                for event in connection.iter() {
                    match event {
                        Ok(Event::Incoming(Packet::ConnAck(_))) => {
                            flag.store(true, Ordering::Release)
                        }
                        Ok(_) => {}
                        Err(rumqttc::ConnectionError::RequestsDone) => break,
                        Err(e) => {
                            if flag.swap(false, Ordering::AcqRel) {
                                log::warn!("broker link lost: {e}");
                            }
                            thread::sleep(RECONNECT_PAUSE);
                        }
                    }
                }
            })?;
        Ok(Self { client, link })
    }

    pub fn is_linked(&self) -> bool {
        self.link.load(Ordering::Acquire)
    }

    /// Waits up to `timeout` for the first CONNACK.
    pub fn wait_linked(&self, timeout: Duration) -> bool {
        let step = Duration::from_millis(10);
        let mut waited = Duration::ZERO;
        while !self.is_linked() && waited < timeout {
            thread::sleep(step);
            waited += step;
        }
        self.is_linked()
    }
}

impl Transport for MqttTransport {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<()> {
        if !self.is_linked() {
            return Err(Error::Transport("broker not connected".into()));
        }
        self.client
            .try_publish(topic, QoS::AtMostOnce, false, payload.to_vec())
            .map_err(|e| Error::Transport(e.to_string()))
    }
}

impl Drop for MqttTransport {
    fn drop(&mut self) {
        let _ = self.client.disconnect();
    }
}

/// What a subscription delivers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Feed {
    Linked(bool),
    Payload(Vec<u8>),
}

/// Subscribes to `topic` and forwards link changes and payloads. The
/// subscription is renewed after every reconnect.
pub fn subscribe(broker: &str, client_id: &str, topic: &str) -> Result<mpsc::Receiver<Feed>> {
    let (client, mut connection) = Client::new(options(broker, client_id)?, 16);
    let (tx, rx) = mpsc::channel();
    let topic = topic.to_string();
    thread::Builder::new()
        .name("mqtt-sub".into())
        .spawn(move || {
            let mut linked = false;
            for event in connection.iter() {
                let sent = match event {
                    Ok(Event::Incoming(Packet::ConnAck(_))) => {
                        if let Err(e) = client.try_subscribe(topic.as_str(), QoS::AtMostOnce) {
                            log::warn!("subscribe failed: {e}");
                        }
                        Ok(())
                    }
                    Ok(Event::Incoming(Packet::SubAck(_))) if !linked => {
                        linked = true;
                        tx.send(Feed::Linked(true))
                    }
                    Ok(Event::Incoming(Packet::Publish(p))) if p.topic == topic => {
                        tx.send(Feed::Payload(p.payload.to_vec()))
                    }
                    Ok(_) => Ok(()),
                    Err(e) => {
                        let sent = if linked {
                            linked = false;
                            log::warn!("broker link lost: {e}");
                            tx.send(Feed::Linked(false))
                        } else {
                            Ok(())
                        };
                        thread::sleep(RECONNECT_PAUSE);
                        sent
                    }
                };
                if sent.is_err() {
                    break;
                }
            }
        })?;
    Ok(rx)
}
