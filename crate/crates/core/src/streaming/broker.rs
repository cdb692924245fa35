//! In-process publish/subscribe broker backing a streaming cluster.
//!
//! A channel is a bounded log. Each consumer owns a cursor into it: an
//! ungrouped subscriber has a private cursor (fan-out), while all members of a
//! group share one cursor, so each message goes to exactly one member.
//! Messages are retained until every cursor has passed them; while a channel
//! has no consumers at all, published messages are held for the first one.
//! A full log rejects publishes with [`BrokerError::Backpressure`].

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

pub const DEFAULT_CHANNEL_CAPACITY: usize = 10_000;
pub const DEFAULT_MAX_MESSAGE_BYTES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BrokerConfig {
    pub channel_capacity: usize,
    pub max_message_bytes: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            channel_capacity: DEFAULT_CHANNEL_CAPACITY,
            max_message_bytes: DEFAULT_MAX_MESSAGE_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrokerError {
    #[error("cluster stopped")]
    ClusterStopped,
    #[error("message of {size} bytes exceeds limit of {limit}")]
    Oversize { size: usize, limit: usize },
    #[error("BACKPRESSURE: channel {channel:?} is full ({capacity} messages)")]
    Backpressure { channel: String, capacity: usize },
}

#[derive(Clone, PartialEq, Eq)]
pub struct Message {
    /// Position in the channel, starting at 1.
    pub seq: u64,
    pub payload: Arc<[u8]>,
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Message")
            .field("seq", &self.seq)
            .field("len", &self.payload.len())
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum ConsumerKey {
    Group(String),
    Solo(u64),
}

#[derive(Debug)]
struct Cursor {
    next: u64,
    members: usize,
}

#[derive(Debug)]
struct ChannelState {
    log: VecDeque<Message>,
    next_seq: u64,
    cursors: HashMap<ConsumerKey, Cursor>,
    closed: bool,
}

impl ChannelState {
    fn base_seq(&self) -> u64 {
        self.log.front().map_or(self.next_seq, |m| m.seq)
    }

    fn trim(&mut self) {
        let Some(min) = self.cursors.values().map(|c| c.next).min() else {
            return;
        };
        while self.log.front().is_some_and(|m| m.seq < min) {
            self.log.pop_front();
        }
    }
}

#[derive(Debug)]
struct Channel {
    name: String,
    capacity: usize,
    state: Mutex<ChannelState>,
    ready: Condvar,
}

#[derive(Debug)]
pub struct Broker {
    name: String,
    config: BrokerConfig,
    channels: Mutex<HashMap<String, Arc<Channel>>>,
    closed: AtomicBool,
    next_subscriber: AtomicU64,
}

impl Broker {
    pub fn new(name: impl Into<String>, config: BrokerConfig) -> Self {
        Broker {
            name: name.into(),
            config,
            channels: Mutex::default(),
            closed: AtomicBool::new(false),
            next_subscriber: AtomicU64::new(1),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> BrokerConfig {
        self.config
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    fn channel(&self, name: &str) -> Result<Arc<Channel>, BrokerError> {
        let mut channels = self.channels.lock();
        // checked under the map lock so close() cannot race a new channel in
        if self.is_closed() {
            return Err(BrokerError::ClusterStopped);
        }
        Ok(channels
            .entry(name.to_string())
            .or_insert_with(|| {
                Arc::new(Channel {
                    name: name.to_string(),
                    capacity: self.config.channel_capacity,
                    state: Mutex::new(ChannelState {
                        log: VecDeque::new(),
                        next_seq: 1,
                        cursors: HashMap::new(),
                        closed: false,
                    }),
                    ready: Condvar::new(),
                })
            })
            .clone())
    }

    /// Appends to the channel (created on first use). Returns the message's sequence number.
    pub fn publish(&self, channel: &str, payload: &[u8]) -> Result<u64, BrokerError> {
        if payload.len() > self.config.max_message_bytes {
            return Err(BrokerError::Oversize {
                size: payload.len(),
                limit: self.config.max_message_bytes,
            });
        }
        let ch = self.channel(channel)?;
        let mut st = ch.state.lock();
        if st.closed {
            return Err(BrokerError::ClusterStopped);
        }
        if st.log.len() >= ch.capacity {
            return Err(BrokerError::Backpressure {
                channel: ch.name.clone(),
                capacity: ch.capacity,
            });
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.log.push_back(Message {
            seq,
            payload: Arc::from(payload),
        });
        drop(st);
        ch.ready.notify_all();
        Ok(seq)
    }

    /// Subscribes to `channel`. With a group, joins (or creates) the group's
    /// shared cursor. A consumer created on a channel that has no other
    /// consumers starts at the oldest held message; otherwise it starts with
    /// the next message published.
    pub fn subscribe(&self, channel: &str, group: Option<&str>) -> Result<Subscription, BrokerError> {
        let ch = self.channel(channel)?;
        let key = match group {
            Some(g) => ConsumerKey::Group(g.to_string()),
            None => ConsumerKey::Solo(self.next_subscriber.fetch_add(1, Ordering::Relaxed)),
        };
        {
            let mut st = ch.state.lock();
            if st.closed {
                return Err(BrokerError::ClusterStopped);
            }
            let start = if st.cursors.is_empty() {
                st.base_seq()
            } else {
                st.next_seq
            };
            st.cursors
                .entry(key.clone())
                .or_insert(Cursor {
                    next: start,
                    members: 0,
                })
                .members += 1;
        }
        Ok(Subscription { channel: ch, key })
    }

    /// Number of messages currently retained in `channel`.
    pub fn depth(&self, channel: &str) -> usize {
        self.channels
            .lock()
            .get(channel)
            .map_or(0, |c| c.state.lock().log.len())
    }

    /// Marks the broker stopped and wakes every blocked receiver, which then
    /// observes [`BrokerError::ClusterStopped`].
    pub fn close(&self) {
        let channels: Vec<_> = {
            let map = self.channels.lock();
            self.closed.store(true, Ordering::SeqCst);
            map.values().cloned().collect()
        };
        for ch in channels {
            let mut st = ch.state.lock();
            st.closed = true;
            st.log.clear();
            drop(st);
            ch.ready.notify_all();
        }
    }
}

/// A consumer handle. Dropping it leaves the channel (or the group, once the
/// last member leaves).
#[derive(Debug)]
pub struct Subscription {
    channel: Arc<Channel>,
    key: ConsumerKey,
}

impl Subscription {
    pub fn channel_name(&self) -> &str {
        &self.channel.name
    }

    pub fn group(&self) -> Option<&str> {
        match &self.key {
            ConsumerKey::Group(g) => Some(g),
            ConsumerKey::Solo(_) => None,
        }
    }

    pub fn try_recv(&self) -> Result<Option<Message>, BrokerError> {
        self.recv_timeout(Duration::ZERO)
    }

    /// Waits up to `timeout` for the next message. `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, BrokerError> {
        Ok(self.recv_batch(1, timeout)?.pop())
    }

    /// Takes up to `max` messages, waiting up to `timeout` for the first one.
    pub fn recv_batch(&self, max: usize, timeout: Duration) -> Result<Vec<Message>, BrokerError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.channel.state.lock();
        loop {
            if st.closed {
                return Err(BrokerError::ClusterStopped);
            }
            let base = st.base_seq();
            let next_seq = st.next_seq;
            let cursor = st
                .cursors
                .get(&self.key)
                .expect("cursor lives as long as subscription")
                .next;
            if cursor < next_seq {
                let take = ((next_seq - cursor) as usize).min(max.max(1));
                let from = (cursor - base) as usize;
                let out: Vec<Message> = st.log.range(from..from + take).cloned().collect();
                st.cursors.get_mut(&self.key).expect("cursor").next = cursor + take as u64;
                st.trim();
                let has_room = st.log.len() < self.channel.capacity;
                drop(st);
                if has_room {
                    self.channel.ready.notify_all();
                }
                return Ok(out);
            }
            if self.channel.ready.wait_until(&mut st, deadline).timed_out() {
                if st.closed {
                    return Err(BrokerError::ClusterStopped);
                }
                return Ok(Vec::new());
            }
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        let mut st = self.channel.state.lock();
        if let Some(c) = st.cursors.get_mut(&self.key) {
            c.members -= 1;
            if c.members == 0 {
                st.cursors.remove(&self.key);
                st.trim();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn broker(cap: usize) -> Broker {
        Broker::new(
            "b",
            BrokerConfig {
                channel_capacity: cap,
                max_message_bytes: 16,
            },
        )
    }

    #[test]
    fn publish_then_subscribe_round_trip() {
        let b = broker(8);
        b.publish("ch", b"hello").unwrap();
        let s = b.subscribe("ch", None).unwrap();
        let m = s.try_recv().unwrap().unwrap();
        assert_eq!(&*m.payload, b"hello");
        assert_eq!(m.seq, 1);
        assert_eq!(s.try_recv().unwrap(), None);
    }

    #[test]
    fn backpressure_at_capacity_leaves_buffer_unchanged() {
        let b = broker(3);
        for i in 0..3u8 {
            b.publish("ch", &[i]).unwrap();
        }
        let err = b.publish("ch", b"x").unwrap_err();
        assert!(matches!(err, BrokerError::Backpressure { capacity: 3, .. }));
        assert_eq!(b.depth("ch"), 3);
        let s = b.subscribe("ch", None).unwrap();
        let got: Vec<u8> = s
            .recv_batch(10, Duration::ZERO)
            .unwrap()
            .iter()
            .map(|m| m.payload[0])
            .collect();
        assert_eq!(got, vec![0, 1, 2]);
        assert_eq!(b.depth("ch"), 0);
        b.publish("ch", b"y").unwrap();
    }

    #[test]
    fn oversize_rejected() {
        let b = broker(3);
        assert_eq!(
            b.publish("ch", &[0; 17]).unwrap_err(),
            BrokerError::Oversize { size: 17, limit: 16 }
        );
        b.publish("ch", &[0; 16]).unwrap();
    }

    #[test]
    fn fan_out_to_every_ungrouped_subscriber() {
        let b = broker(8);
        let s1 = b.subscribe("ch", None).unwrap();
        let s2 = b.subscribe("ch", None).unwrap();
        b.publish("ch", b"m").unwrap();
        assert_eq!(&*s1.try_recv().unwrap().unwrap().payload, b"m");
        assert_eq!(&*s2.try_recv().unwrap().unwrap().payload, b"m");
    }

    #[test]
    fn late_subscriber_sees_only_new_messages() {
        let b = broker(8);
        let early = b.subscribe("ch", None).unwrap();
        b.publish("ch", b"1").unwrap();
        let late = b.subscribe("ch", None).unwrap();
        b.publish("ch", b"2").unwrap();
        assert_eq!(early.recv_batch(10, Duration::ZERO).unwrap().len(), 2);
        let got = late.recv_batch(10, Duration::ZERO).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(&*got[0].payload, b"2");
    }

    #[test]
    fn group_partitions_messages() {
        let b = broker(64);
        let g1 = b.subscribe("ch", Some("g")).unwrap();
        let g2 = b.subscribe("ch", Some("g")).unwrap();
        for i in 0..10u8 {
            b.publish("ch", &[i]).unwrap();
        }
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        for s in [&g1, &g2].iter().cycle().take(20) {
            if let Some(m) = s.try_recv().unwrap() {
                *counts.entry(m.payload[0]).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), 10);
        assert!(counts.values().all(|c| *c == 1));
    }

    #[test]
    fn channels_are_isolated() {
        let b = broker(8);
        let s = b.subscribe("a", None).unwrap();
        b.publish("b", b"x").unwrap();
        assert_eq!(s.try_recv().unwrap(), None);
    }

    #[test]
    fn close_wakes_blocked_receivers() {
        let b = Arc::new(broker(8));
        let subs: Vec<_> = (0..3).map(|_| b.subscribe("ch", None).unwrap()).collect();
        let handles: Vec<_> = subs
            .into_iter()
            .map(|s| std::thread::spawn(move || s.recv_timeout(Duration::from_secs(10))))
            .collect();
        std::thread::sleep(Duration::from_millis(50));
        let t0 = Instant::now();
        b.close();
        for h in handles {
            assert_eq!(h.join().unwrap(), Err(BrokerError::ClusterStopped));
        }
        assert!(t0.elapsed() < Duration::from_secs(1));
        assert_eq!(b.publish("ch", b"x").unwrap_err(), BrokerError::ClusterStopped);
        assert!(b.subscribe("ch", None).is_err());
        assert!(b.subscribe("new", None).is_err());
    }

    #[test]
    fn dropping_last_group_member_releases_retention() {
        let b = broker(2);
        let s = b.subscribe("ch", Some("g")).unwrap();
        let keep = b.subscribe("ch", None).unwrap();
        b.publish("ch", b"1").unwrap();
        b.publish("ch", b"2").unwrap();
        keep.recv_batch(10, Duration::ZERO).unwrap();
        assert_eq!(b.depth("ch"), 2);
        drop(s);
        assert_eq!(b.depth("ch"), 0);
    }
}
