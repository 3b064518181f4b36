//! Simulated on-device agent: replays install scenarios onto a device topic
//! and collects the warning reports that come back.
//!
//! The real agent reads grants from the platform package manager; here they
//! arrive as scenario data, because the downstream contract is just
//! (package name, granted set). Granted sets pass through untouched: no
//! filtering by protection level or anything else.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use dsaudit_bus::{
    install_event, topic_name, Broker, BusError, InstallEventBody, MsgType,
};
use dsaudit_core::summary::WarningReport;
use dsaudit_core::PackageName;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("scenario invalid: {0}")]
    Scenario(String),
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// One app installation inside a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallSpec {
    pub package_name: PackageName,
    pub granted: BTreeSet<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallScenario {
    pub device_id: String,
    pub installs: Vec<InstallSpec>,
}

impl InstallScenario {
    pub fn from_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let scenario = Self::from_str(&text).map_err(|source| AgentError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Device id grammar, well-formed packages (already enforced by the
    /// type), non-empty permission names, non-decreasing timestamps.
    pub fn validate(&self) -> Result<(), AgentError> {
        topic_name(&self.device_id)?;
        for install in &self.installs {
            if install.granted.iter().any(|p| p.trim().is_empty()) {
                return Err(AgentError::Scenario(format!(
                    "{}: empty permission name in granted set",
                    install.package_name
                )));
            }
        }
        for pair in self.installs.windows(2) {
            if pair[1].at < pair[0].at {
                return Err(AgentError::Scenario(format!(
                    "installs out of order: {} at {} precedes {} at {}",
                    pair[1].package_name, pair[1].at, pair[0].package_name, pair[0].at
                )));
            }
        }
        Ok(())
    }

    pub fn topic(&self) -> Result<String, BusError> {
        topic_name(&self.device_id)
    }
}

/// Replay knobs. Defaults replay instantly and give up on a publish after
/// five attempts with doubling backoff.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub realtime: bool,
    /// Upper bound on any single realtime gap, so fixture timestamps minutes
    /// apart stay replayable.
    pub max_gap: Duration,
    pub max_attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            realtime: false,
            max_gap: Duration::from_secs(2),
            max_attempts: 5,
            base_backoff: Duration::from_millis(10),
        }
    }
}

/// One line of the emission log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub msg_id: String,
    pub seq: u64,
    pub topic: String,
    pub package_name: String,
    pub at: DateTime<Utc>,
    pub sent_at: DateTime<Utc>,
}

/// A publish that kept failing; everything emitted before it survives in
/// `emitted`.
#[derive(Debug, Error)]
#[error("publish of {package_name} to {topic} failed after {attempts} attempts: {source}")]
pub struct RunFailure {
    pub package_name: String,
    pub topic: String,
    pub attempts: u32,
    pub emitted: Vec<EmissionRecord>,
    #[source]
    pub source: BusError,
}

/// Publishes one install_event per scenario install, in order. Returns the
/// emission log; on persistent publish failure, aborts with the partial log.
pub fn run_scenario(
    scenario: &InstallScenario,
    bus: &Broker,
    options: &RunOptions,
) -> Result<Vec<EmissionRecord>, Box<RunFailure>> {
    scenario
        .validate()
        .unwrap_or_else(|err| panic!("scenario validated before replay: {err}"));
    let topic = scenario.topic().expect("validated device id");
    let mut emitted = Vec::with_capacity(scenario.installs.len());
    let mut previous_at: Option<DateTime<Utc>> = None;

    for install in &scenario.installs {
        if options.realtime {
            if let Some(prev) = previous_at {
                let gap = (install.at - prev).to_std().unwrap_or(Duration::ZERO);
                std::thread::sleep(gap.min(options.max_gap));
            }
        }
        previous_at = Some(install.at);

        let body = InstallEventBody {
            package_name: install.package_name.to_string(),
            granted: install.granted.iter().cloned().collect(),
            at: install.at,
        };
        let mut attempt = 0;
        let seq = loop {
            attempt += 1;
            let envelope = install_event(topic.clone(), &body);
            let msg_id = envelope.msg_id.clone();
            let sent_at = envelope.sent_at;
            match bus.publish(envelope) {
                Ok(seq) => {
                    emitted.push(EmissionRecord {
                        msg_id,
                        seq,
                        topic: topic.clone(),
                        package_name: body.package_name.clone(),
                        at: install.at,
                        sent_at,
                    });
                    break seq;
                }
                Err(err) if attempt < options.max_attempts => {
                    let backoff = options.base_backoff * 2u32.pow(attempt - 1);
                    std::thread::sleep(backoff);
                    let _ = err;
                }
                Err(err) => {
                    return Err(Box::new(RunFailure {
                        package_name: body.package_name.clone(),
                        topic,
                        attempts: attempt,
                        emitted,
                        source: err,
                    }));
                }
            }
        };
        let _ = seq;
    }
    Ok(emitted)
}

/// One line of the receipt log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedWarning {
    pub msg_id: String,
    pub package_name: String,
    pub received_at: DateTime<Utc>,
    pub report: WarningReport,
}

/// Result of waiting for warnings; `timed_out` marks a partial list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwaitOutcome {
    pub reports: Vec<ReceivedWarning>,
    pub timed_out: bool,
}

/// Collects warning reports from the device topic until `expected_count`
/// distinct messages arrive or `timeout` elapses. Replays retained history,
/// so warnings published before the call still count. Redelivered envelopes
/// collapse by msg_id.
pub fn await_warnings(
    device_id: &str,
    expected_count: usize,
    timeout: Duration,
    bus: &Broker,
) -> Result<AwaitOutcome, AgentError> {
    let topic = topic_name(device_id)?;
    let mut reports = Vec::new();
    if expected_count == 0 {
        return Ok(AwaitOutcome {
            reports,
            timed_out: false,
        });
    }
    let mut sub = bus.subscribe(&topic, Some(MsgType::WarningReport))?;
    let mut seen = BTreeSet::new();
    let deadline = Instant::now() + timeout;
    while reports.len() < expected_count {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Ok(AwaitOutcome {
                reports,
                timed_out: true,
            });
        }
        let Some(envelope) = sub.next(remaining.min(Duration::from_millis(50))) else {
            if bus.is_closed() {
                return Ok(AwaitOutcome {
                    reports,
                    timed_out: true,
                });
            }
            continue;
        };
        if !seen.insert(envelope.msg_id.clone()) {
            continue;
        }
        match serde_json::from_value::<WarningReport>(envelope.payload.clone()) {
            Ok(report) => reports.push(ReceivedWarning {
                msg_id: envelope.msg_id,
                package_name: report.package_name.to_string(),
                received_at: Utc::now(),
                report,
            }),
            Err(err) => {
                return Err(AgentError::Scenario(format!(
                    "warning envelope {} carries an unreadable payload: {err}",
                    envelope.msg_id
                )))
            }
        }
    }
    Ok(AwaitOutcome {
        reports,
        timed_out: false,
    })
}

/// Line-delimited JSON, one record per line, for emission/receipt logs.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("log record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(device: &str, installs: &[(&str, &[&str], &str)]) -> InstallScenario {
        InstallScenario {
            device_id: device.to_string(),
            installs: installs
                .iter()
                .map(|(pkg, granted, at)| InstallSpec {
                    package_name: PackageName::new(*pkg).unwrap(),
                    granted: granted.iter().map(|p| p.to_string()).collect(),
                    at: at.parse().unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let text = r#"{
            "device_id": "3f2c9a1e77b04d58",
            "installs": [
                {"package_name": "com.example.app", "granted": ["CAMERA"], "at": "2026-08-10T09:00:00Z"}
            ]
        }"#;
        let parsed = InstallScenario::from_str(text).unwrap();
        parsed.validate().unwrap();
        assert_eq!(parsed.topic().unwrap(), "device-3f2c9a1e77b04d58");
        assert_eq!(parsed.installs[0].granted.len(), 1);
        let json = serde_json::to_string(&parsed).unwrap();
        assert_eq!(InstallScenario::from_str(&json).unwrap(), parsed);
    }

    #[test]
    fn bundled_scenarios_validate() {
        for name in ["facebook.json", "three-installs.json"] {
            let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/scenarios/");
            let scenario = InstallScenario::load(format!("{path}{name}")).unwrap();
            assert!(!scenario.installs.is_empty());
        }
    }

    #[test]
    fn decreasing_timestamps_are_rejected() {
        let bad = scenario(
            "dev1",
            &[
                ("com.example.b", &[], "2026-08-10T09:05:00Z"),
                ("com.example.a", &[], "2026-08-10T09:00:00Z"),
            ],
        );
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("out of order"), "{err}");

        let equal_ok = scenario(
            "dev1",
            &[
                ("com.example.a", &[], "2026-08-10T09:00:00Z"),
                ("com.example.b", &[], "2026-08-10T09:00:00Z"),
            ],
        );
        equal_ok.validate().unwrap();
    }

    #[test]
    fn bad_device_id_is_rejected() {
        let bad = scenario("no spaces allowed", &[]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_scenario_emits_nothing() {
        let bus = Broker::new();
        let log = run_scenario(&scenario("dev1", &[]), &bus, &RunOptions::default()).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn emits_one_envelope_per_install_in_order() {
        let bus = Broker::new();
        let s = scenario(
            "dev1",
            &[
                ("com.example.a", &["CAMERA"], "2026-08-10T09:00:00Z"),
                ("com.example.b", &["RECORD_AUDIO", "CAMERA"], "2026-08-10T09:05:00Z"),
                ("com.example.c", &[], "2026-08-10T09:10:00Z"),
            ],
        );
        let log = run_scenario(&s, &bus, &RunOptions::default()).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.windows(2).all(|w| w[0].seq < w[1].seq));

        let mut sub = bus.subscribe("device-dev1", Some(MsgType::InstallEvent)).unwrap();
        for record in &log {
            let envelope = sub.next(Duration::from_millis(100)).unwrap();
            assert_eq!(envelope.msg_id, record.msg_id);
            let body: InstallEventBody = serde_json::from_value(envelope.payload).unwrap();
            assert_eq!(body.package_name, record.package_name);
        }
    }

    #[test]
    fn granted_set_passes_through_exactly() {
        let bus = Broker::new();
        // A mix of dangerous, normal, and unknown names; none may be dropped.
        let grants = &["CAMERA", "INTERNET", "VIBRATE", "SOME_VENDOR_PERM"][..];
        let s = scenario("dev1", &[("com.example.a", grants, "2026-08-10T09:00:00Z")]);
        run_scenario(&s, &bus, &RunOptions::default()).unwrap();

        let mut sub = bus.subscribe("device-dev1", None).unwrap();
        let body: InstallEventBody =
            serde_json::from_value(sub.next(Duration::from_millis(100)).unwrap().payload).unwrap();
        let expected: BTreeSet<String> = grants.iter().map(|p| p.to_string()).collect();
        assert_eq!(body.granted.iter().cloned().collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn publish_failure_aborts_with_partial_log() {
        let bus = Broker::with_limits(10, 100);
        let s = scenario(
            "dev1",
            &[
                ("com.example.a", &[], "2026-08-10T09:00:00Z"),
                (
                    "com.example.oversized",
                    &["A_VERY_LONG_PERMISSION_NAME_THAT_OVERFLOWS_THE_PAYLOAD_BUDGET"],
                    "2026-08-10T09:05:00Z",
                ),
            ],
        );
        let fast = RunOptions {
            max_attempts: 2,
            base_backoff: Duration::from_millis(1),
            ..RunOptions::default()
        };
        let failure = run_scenario(&s, &bus, &fast).unwrap_err();
        assert_eq!(failure.attempts, 2);
        assert_eq!(failure.emitted.len(), 1, "partial log keeps the first emit");
        assert_eq!(failure.package_name, "com.example.oversized");
    }

    #[test]
    fn await_zero_returns_immediately() {
        let bus = Broker::new();
        let outcome = await_warnings("dev1", 0, Duration::from_secs(5), &bus).unwrap();
        assert!(outcome.reports.is_empty());
        assert!(!outcome.timed_out);
    }

    #[test]
    fn await_times_out_with_partial_list() {
        let bus = Broker::new();
        let started = Instant::now();
        let outcome = await_warnings("dev1", 2, Duration::from_millis(120), &bus).unwrap();
        assert!(outcome.timed_out);
        assert!(outcome.reports.is_empty());
        assert!(started.elapsed() >= Duration::from_millis(120));
    }

    fn fake_warning(pkg: &str) -> serde_json::Value {
        serde_json::json!({
            "package_name": pkg,
            "verdict": "Consistent",
            "sentences": ["No privacy inconsistencies were detected: every permission you granted matches the developer's declared data practices."],
            "generated_at": "2026-08-10T09:00:01Z"
        })
    }

    #[test]
    fn await_collects_history_and_dedupes_redelivery() {
        let bus = Broker::new();
        let topic = "device-dev1";
        let first = dsaudit_bus::warning_report(topic, fake_warning("com.example.a"));
        let first_id = first.msg_id.clone();
        bus.publish(first).unwrap();
        let second = dsaudit_bus::warning_report(topic, fake_warning("com.example.b"));
        bus.publish(second).unwrap();
        // Redelivery is the same envelope read again; simulate with a fresh
        // envelope carrying the original msg_id.
        let outcome = await_warnings("dev1", 2, Duration::from_secs(2), &bus).unwrap();
        assert_eq!(outcome.reports.len(), 2);
        assert!(!outcome.timed_out);
        assert_eq!(outcome.reports[0].msg_id, first_id);
        assert_eq!(outcome.reports[0].package_name, "com.example.a");
    }

    #[test]
    fn jsonl_is_one_record_per_line() {
        let records = vec![
            EmissionRecord {
                msg_id: "m1".into(),
                seq: 0,
                topic: "device-dev1".into(),
                package_name: "com.example.a".into(),
                at: "2026-08-10T09:00:00Z".parse().unwrap(),
                sent_at: "2026-08-10T09:00:00Z".parse().unwrap(),
            },
            EmissionRecord {
                msg_id: "m2".into(),
                seq: 1,
                topic: "device-dev1".into(),
                package_name: "com.example.b".into(),
                at: "2026-08-10T09:05:00Z".parse().unwrap(),
                sent_at: "2026-08-10T09:05:00Z".parse().unwrap(),
            },
        ];
        let text = to_jsonl(&records);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            serde_json::from_str::<EmissionRecord>(line).unwrap();
        }
    }

    #[test]
    fn realtime_pacing_caps_long_gaps() {
        let bus = Broker::new();
        let s = scenario(
            "dev1",
            &[
                ("com.example.a", &[], "2026-08-10T09:00:00Z"),
                ("com.example.b", &[], "2026-08-10T09:05:00Z"),
            ],
        );
        let options = RunOptions {
            realtime: true,
            max_gap: Duration::from_millis(80),
            ..RunOptions::default()
        };
        let started = Instant::now();
        let log = run_scenario(&s, &bus, &options).unwrap();
        let elapsed = started.elapsed();
        assert_eq!(log.len(), 2);
        assert!(elapsed >= Duration::from_millis(80), "paced gap applies");
        assert!(elapsed < Duration::from_secs(2), "five-minute gap is capped");
    }
}
