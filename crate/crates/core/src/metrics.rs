//! Line-delimited metric records.

use std::fmt;
use std::io::Write;

use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Frame,
    Drop,
    Heartbeat,
    Alert,
    Failover,
    Placement,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Frame => "frame",
            Category::Drop => "drop",
            Category::Heartbeat => "heartbeat",
            Category::Alert => "alert",
            Category::Failover => "failover",
            Category::Placement => "placement",
        })
    }
}

/// One record: time, category, and a flat payload whose keys serialize in
/// sorted order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub time_us: u64,
    pub category: Category,
    #[serde(flatten)]
    pub payload: Map<String, Value>,
}

impl MetricRecord {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.payload.get(key)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.payload.get(key).and_then(Value::as_u64)
    }
}

/// Builds a payload from a serializable value, which must serialize to an
/// object.
pub fn payload(value: impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(map)) => map,
        Ok(other) => {
            let mut map = Map::new();
            map.insert("value".into(), other);
            map
        }
        Err(e) => {
            let mut map = Map::new();
            map.insert("error".into(), Value::String(e.to_string()));
            map
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    records: Vec<MetricRecord>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_us: u64, category: Category, payload: Map<String, Value>) {
        self.records.push(MetricRecord { time_us, category, payload });
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn by_category(&self, category: Category) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.category == category)
    }

    pub fn is_time_ordered(&self) -> bool {
        self.records.windows(2).all(|w| w[0].time_us <= w[1].time_us)
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut *out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
