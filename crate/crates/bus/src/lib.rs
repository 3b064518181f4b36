//! In-process publish/subscribe broker with one isolated topic per device.
//!
//! Semantics mirror a commodity streaming platform at desk scale: per-topic
//! FIFO, bounded retention with oldest-first eviction, at-least-once
//! delivery with consumer-side dedup on `msg_id`, and named consumers whose
//! committed offsets survive re-subscription (uncommitted envelopes are
//! redelivered, which is how crash recovery behaves). The broker lives
//! behind these types so an external transport can be substituted without
//! touching producers or consumers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default per-topic log bound; oldest envelopes are evicted past this.
pub const DEFAULT_RETENTION: usize = 10_000;

/// Maximum serialized payload size in bytes.
pub const MAX_PAYLOAD_BYTES: usize = 1024 * 1024;

const TOPIC_PREFIX: &str = "device-";

#[derive(Debug, Error)]
pub enum BusError {
    #[error("invalid device id {0:?}: expected 1-64 chars of [0-9A-Za-z_-]")]
    InvalidDeviceId(String),
    #[error("invalid topic {0:?}: expected \"device-\" followed by a device id")]
    InvalidTopic(String),
    #[error("broker is closed")]
    Closed,
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("msg_id {0:?} was already published on this broker")]
    DuplicateMsgId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    InstallEvent,
    WarningReport,
    ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub msg_id: String,
    pub topic: String,
    pub msg_type: MsgType,
    pub payload: serde_json::Value,
    pub sent_at: DateTime<Utc>,
}

impl MessageEnvelope {
    pub fn new(topic: impl Into<String>, msg_type: MsgType, payload: serde_json::Value) -> Self {
        MessageEnvelope {
            msg_id: uuid::Uuid::new_v4().to_string(),
            topic: topic.into(),
            msg_type,
            payload,
            sent_at: Utc::now(),
        }
    }
}

/// Body carried by an install_event envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallEventBody {
    pub package_name: String,
    pub granted: Vec<String>,
    pub at: DateTime<Utc>,
}

/// Body carried by an error_report envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReportBody {
    pub package_name: Option<String>,
    pub error: String,
}

pub fn install_event(topic: impl Into<String>, body: &InstallEventBody) -> MessageEnvelope {
    MessageEnvelope::new(
        topic,
        MsgType::InstallEvent,
        serde_json::to_value(body).expect("install body serializes"),
    )
}

pub fn warning_report(topic: impl Into<String>, payload: serde_json::Value) -> MessageEnvelope {
    MessageEnvelope::new(topic, MsgType::WarningReport, payload)
}

pub fn error_report(topic: impl Into<String>, body: &ErrorReportBody) -> MessageEnvelope {
    MessageEnvelope::new(
        topic,
        MsgType::ErrorReport,
        serde_json::to_value(body).expect("error body serializes"),
    )
}

fn is_valid_device_id(device_id: &str) -> bool {
    !device_id.is_empty()
        && device_id.len() <= 64
        && device_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Canonical topic for a device.
pub fn topic_name(device_id: &str) -> Result<String, BusError> {
    if !is_valid_device_id(device_id) {
        return Err(BusError::InvalidDeviceId(device_id.to_string()));
    }
    Ok(format!("{TOPIC_PREFIX}{device_id}"))
}

/// Checks topic grammar ("device-" + device id) and returns the topic.
pub fn validate_topic(topic: &str) -> Result<&str, BusError> {
    match topic.strip_prefix(TOPIC_PREFIX) {
        Some(id) if is_valid_device_id(id) => Ok(topic),
        _ => Err(BusError::InvalidTopic(topic.to_string())),
    }
}

struct TopicLog {
    entries: VecDeque<(u64, MessageEnvelope)>,
    next_seq: u64,
}

impl TopicLog {
    fn new() -> Self {
        TopicLog {
            entries: VecDeque::new(),
            next_seq: 0,
        }
    }

    fn head_seq(&self) -> u64 {
        self.entries.front().map_or(self.next_seq, |(seq, _)| *seq)
    }
}

struct BrokerState {
    topics: BTreeMap<String, TopicLog>,
    /// Committed offsets for named consumers: (topic, consumer) → next seq.
    offsets: BTreeMap<(String, String), u64>,
    published_ids: BTreeSet<String>,
    closed: bool,
}

struct BrokerInner {
    state: Mutex<BrokerState>,
    wakeup: Condvar,
    retention: usize,
    max_payload_bytes: usize,
}

#[derive(Clone)]
pub struct Broker {
    inner: Arc<BrokerInner>,
}

impl Default for Broker {
    fn default() -> Self {
        Broker::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        Broker::with_limits(DEFAULT_RETENTION, MAX_PAYLOAD_BYTES)
    }

    pub fn with_limits(retention: usize, max_payload_bytes: usize) -> Self {
        Broker {
            inner: Arc::new(BrokerInner {
                state: Mutex::new(BrokerState {
                    topics: BTreeMap::new(),
                    offsets: BTreeMap::new(),
                    published_ids: BTreeSet::new(),
                    closed: false,
                }),
                wakeup: Condvar::new(),
                retention,
                max_payload_bytes,
            }),
        }
    }

    /// Appends the envelope to its topic log. Returns the assigned
    /// per-topic sequence number as the publish acknowledgement.
    pub fn publish(&self, envelope: MessageEnvelope) -> Result<u64, BusError> {
        validate_topic(&envelope.topic)?;
        let payload_size = serde_json::to_vec(&envelope.payload)
            .map(|b| b.len())
            .unwrap_or(usize::MAX);
        if payload_size > self.inner.max_payload_bytes {
            return Err(BusError::PayloadTooLarge {
                size: payload_size,
                max: self.inner.max_payload_bytes,
            });
        }
        let mut state = self.inner.state.lock().unwrap();
        if state.closed {
            return Err(BusError::Closed);
        }
        if !state.published_ids.insert(envelope.msg_id.clone()) {
            return Err(BusError::DuplicateMsgId(envelope.msg_id));
        }
        let retention = self.inner.retention;
        let log = state
            .topics
            .entry(envelope.topic.clone())
            .or_insert_with(TopicLog::new);
        let seq = log.next_seq;
        log.next_seq += 1;
        log.entries.push_back((seq, envelope));
        while log.entries.len() > retention {
            log.entries.pop_front();
        }
        self.inner.wakeup.notify_all();
        Ok(seq)
    }

    /// Anonymous subscription starting at the topic's current log head.
    pub fn subscribe(
        &self,
        topic: &str,
        filter: Option<MsgType>,
    ) -> Result<Subscription, BusError> {
        self.subscription(topic, filter, None)
    }

    /// Named subscription: resumes from the consumer's committed offset,
    /// so anything delivered but never committed comes again.
    pub fn subscribe_named(
        &self,
        topic: &str,
        filter: Option<MsgType>,
        consumer: &str,
    ) -> Result<Subscription, BusError> {
        self.subscription(topic, filter, Some(consumer.to_string()))
    }

    fn subscription(
        &self,
        topic: &str,
        filter: Option<MsgType>,
        consumer: Option<String>,
    ) -> Result<Subscription, BusError> {
        validate_topic(topic)?;
        let state = self.inner.state.lock().unwrap();
        let head = state.topics.get(topic).map_or(0, TopicLog::head_seq);
        let cursor = match &consumer {
            Some(name) => *state
                .offsets
                .get(&(topic.to_string(), name.clone()))
                .unwrap_or(&head),
            None => head,
        };
        Ok(Subscription {
            inner: Arc::clone(&self.inner),
            topic: topic.to_string(),
            filter,
            consumer,
            cursor,
        })
    }

    /// Topics that exist right now, in name order.
    pub fn topics(&self) -> Vec<String> {
        self.inner.state.lock().unwrap().topics.keys().cloned().collect()
    }

    /// Blocks until the topic count differs from `seen` or the timeout
    /// elapses; returns the current topic list either way. Lets a
    /// discovery loop sleep instead of polling.
    pub fn wait_for_topic_change(&self, seen: usize, timeout: Duration) -> Vec<String> {
        let deadline = Instant::now() + timeout;
        let mut state = self.inner.state.lock().unwrap();
        while state.topics.len() == seen && !state.closed {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            let (next, _) = self
                .inner
                .wakeup
                .wait_timeout(state, deadline - now)
                .unwrap();
            state = next;
        }
        state.topics.keys().cloned().collect()
    }

    /// Closes the broker: publishes start failing, subscribers drain what
    /// is already logged and then see end-of-stream.
    pub fn close(&self) {
        self.inner.state.lock().unwrap().closed = true;
        self.inner.wakeup.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.state.lock().unwrap().closed
    }
}

pub struct Subscription {
    inner: Arc<BrokerInner>,
    topic: String,
    filter: Option<MsgType>,
    consumer: Option<String>,
    cursor: u64,
}

impl Subscription {
    /// Next matching envelope, blocking up to `timeout`. Returns `None` on
    /// timeout, or after the remaining log is drained on a closed broker.
    pub fn next(&mut self, timeout: Duration) -> Option<MessageEnvelope> {
        let deadline = Instant::now() + timeout;
        let mut state = self.inner.state.lock().unwrap();
        loop {
            if let Some(log) = state.topics.get(&self.topic) {
                // Skip past evicted history.
                let head = log.head_seq();
                if self.cursor < head {
                    self.cursor = head;
                }
                for (seq, envelope) in &log.entries {
                    if *seq < self.cursor {
                        continue;
                    }
                    self.cursor = seq + 1;
                    if self.filter.is_none_or(|f| f == envelope.msg_type) {
                        return Some(envelope.clone());
                    }
                }
            }
            if state.closed {
                return None;
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            let (next, _) = self
                .inner
                .wakeup
                .wait_timeout(state, deadline - now)
                .unwrap();
            state = next;
        }
    }

    /// Commits everything delivered so far. For named consumers the offset
    /// is persisted on the broker, so a re-subscription under the same name
    /// will not see committed envelopes again. At-least-once: skipping the
    /// commit forces redelivery.
    pub fn commit(&mut self) {
        if let Some(name) = &self.consumer {
            let mut state = self.inner.state.lock().unwrap();
            state
                .offsets
                .insert((self.topic.clone(), name.clone()), self.cursor);
        }
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn envelope(topic: &str, n: usize) -> MessageEnvelope {
        MessageEnvelope::new(
            topic,
            MsgType::InstallEvent,
            serde_json::json!({ "n": n }),
        )
    }

    #[test]
    fn topic_names_follow_the_device_grammar() {
        assert_eq!(
            topic_name("9774d56d682e549c").unwrap(),
            "device-9774d56d682e549c"
        );
        assert_eq!(topic_name("abc-123").unwrap(), "device-abc-123");
        assert!(matches!(topic_name(""), Err(BusError::InvalidDeviceId(_))));
        assert!(topic_name(&"x".repeat(65)).is_err());
        assert!(topic_name("bad!id").is_err());
        assert!(validate_topic("device-abc").is_ok());
        assert!(validate_topic("queue-abc").is_err());
        assert!(validate_topic("device-").is_err());
    }

    #[test]
    fn single_message_round_trip() {
        let broker = Broker::new();
        let topic = topic_name("roundtrip").unwrap();
        let mut sub = broker.subscribe(&topic, None).unwrap();
        let sent = envelope(&topic, 1);
        broker.publish(sent.clone()).unwrap();
        let got = sub.next(Duration::from_secs(1)).unwrap();
        assert_eq!(got, sent);
        assert!(sub.next(Duration::from_millis(20)).is_none());
    }

    #[test]
    fn hundred_publishes_arrive_in_order() {
        let broker = Broker::new();
        let topic = topic_name("ordered").unwrap();
        for n in 0..100 {
            broker.publish(envelope(&topic, n)).unwrap();
        }
        let mut sub = broker.subscribe(&topic, None).unwrap();
        for n in 0..100 {
            let got = sub.next(Duration::from_secs(1)).unwrap();
            assert_eq!(got.payload["n"], serde_json::json!(n));
        }
    }

    #[test]
    fn topics_are_isolated() {
        let broker = Broker::new();
        let topic_a = topic_name("aaaa").unwrap();
        let topic_b = topic_name("bbbb").unwrap();
        let mut sub_b = broker.subscribe(&topic_b, None).unwrap();
        broker.publish(envelope(&topic_a, 1)).unwrap();
        assert!(sub_b.next(Duration::from_millis(30)).is_none());
    }

    #[test]
    fn filter_passes_only_matching_types() {
        let broker = Broker::new();
        let topic = topic_name("filtered").unwrap();
        let mut warnings = broker
            .subscribe(&topic, Some(MsgType::WarningReport))
            .unwrap();
        broker.publish(envelope(&topic, 1)).unwrap();
        assert!(warnings.next(Duration::from_millis(30)).is_none());
        broker
            .publish(warning_report(&topic, serde_json::json!({"ok": true})))
            .unwrap();
        let got = warnings.next(Duration::from_secs(1)).unwrap();
        assert_eq!(got.msg_type, MsgType::WarningReport);
    }

    #[test]
    fn two_subscribers_both_see_everything() {
        let broker = Broker::new();
        let topic = topic_name("fanout").unwrap();
        let mut first = broker.subscribe(&topic, None).unwrap();
        let mut second = broker.subscribe(&topic, None).unwrap();
        for n in 0..5 {
            broker.publish(envelope(&topic, n)).unwrap();
        }
        for n in 0..5 {
            assert_eq!(first.next(Duration::from_secs(1)).unwrap().payload["n"], serde_json::json!(n));
            assert_eq!(second.next(Duration::from_secs(1)).unwrap().payload["n"], serde_json::json!(n));
        }
    }

    #[test]
    fn uncommitted_envelopes_are_redelivered_to_a_named_consumer() {
        let broker = Broker::new();
        let topic = topic_name("restart").unwrap();
        broker.publish(envelope(&topic, 0)).unwrap();
        broker.publish(envelope(&topic, 1)).unwrap();

        let mut sub = broker.subscribe_named(&topic, None, "server").unwrap();
        let first = sub.next(Duration::from_secs(1)).unwrap();
        sub.commit();
        let second = sub.next(Duration::from_secs(1)).unwrap();
        drop(sub); // crash before committing the second

        let mut resumed = broker.subscribe_named(&topic, None, "server").unwrap();
        let redelivered = resumed.next(Duration::from_secs(1)).unwrap();
        assert_eq!(redelivered.msg_id, second.msg_id, "same msg_id on redelivery");
        assert_ne!(redelivered.msg_id, first.msg_id);
        resumed.commit();
        assert!(resumed.next(Duration::from_millis(30)).is_none());
    }

    #[test]
    fn oversized_payload_is_rejected() {
        let broker = Broker::new();
        let topic = topic_name("big").unwrap();
        let huge = serde_json::json!({ "blob": "x".repeat(MAX_PAYLOAD_BYTES + 1) });
        let err = broker
            .publish(MessageEnvelope::new(&topic, MsgType::InstallEvent, huge))
            .unwrap_err();
        assert!(matches!(err, BusError::PayloadTooLarge { .. }));
    }

    #[test]
    fn duplicate_msg_ids_are_rejected() {
        let broker = Broker::new();
        let topic = topic_name("unique").unwrap();
        let sent = envelope(&topic, 1);
        broker.publish(sent.clone()).unwrap();
        assert!(matches!(
            broker.publish(sent),
            Err(BusError::DuplicateMsgId(_))
        ));
    }

    #[test]
    fn close_drains_then_ends_the_stream() {
        let broker = Broker::new();
        let topic = topic_name("closing").unwrap();
        broker.publish(envelope(&topic, 0)).unwrap();
        broker.publish(envelope(&topic, 1)).unwrap();
        let mut sub = broker.subscribe(&topic, None).unwrap();
        broker.close();
        assert!(matches!(
            broker.publish(envelope(&topic, 2)),
            Err(BusError::Closed)
        ));
        assert!(sub.next(Duration::from_millis(50)).is_some());
        assert!(sub.next(Duration::from_millis(50)).is_some());
        assert!(sub.next(Duration::from_millis(50)).is_none());
    }

    #[test]
    fn retention_evicts_the_oldest() {
        let broker = Broker::with_limits(10, MAX_PAYLOAD_BYTES);
        let topic = topic_name("bounded").unwrap();
        for n in 0..15 {
            broker.publish(envelope(&topic, n)).unwrap();
        }
        let mut sub = broker.subscribe(&topic, None).unwrap();
        let first = sub.next(Duration::from_secs(1)).unwrap();
        assert_eq!(first.payload["n"], serde_json::json!(5));
    }

    #[test]
    fn topic_discovery_wakes_on_new_topics() {
        let broker = Broker::new();
        assert!(broker.topics().is_empty());
        let waiter = broker.clone();
        let handle = std::thread::spawn(move || waiter.wait_for_topic_change(0, Duration::from_secs(2)));
        std::thread::sleep(Duration::from_millis(30));
        broker
            .publish(envelope(&topic_name("fresh").unwrap(), 0))
            .unwrap();
        let topics = handle.join().unwrap();
        assert_eq!(topics, vec!["device-fresh".to_string()]);
    }
}
