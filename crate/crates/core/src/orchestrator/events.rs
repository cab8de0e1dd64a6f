use std::fs::File;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde_json::{json, Map, Value};

/// Append-only `events.jsonl`. Events carry a sequence number but no clock
/// readings, so replayed runs produce identical logs.
pub struct EventLog {
    inner: Mutex<Inner>,
}

struct Inner {
    file: Option<File>,
    events: Vec<Value>,
}

impl EventLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(EventLog {
            inner: Mutex::new(Inner {
                file: Some(File::create(path)?),
                events: Vec::new(),
            }),
        })
    }

    pub fn in_memory() -> Self {
        EventLog {
            inner: Mutex::new(Inner {
                file: None,
                events: Vec::new(),
            }),
        }
    }

    /// `fields` must be a JSON object; `seq` and `event` are added.
    pub fn emit(&self, event: &str, fields: Value) {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let mut obj = Map::new();
        obj.insert("seq".into(), json!(inner.events.len()));
        obj.insert("event".into(), json!(event));
        if let Value::Object(extra) = fields {
            obj.extend(extra);
        }
        let value = Value::Object(obj);
        if let Some(f) = inner.file.as_mut() {
            // a transcript write failure must not abort the run
            let _ = writeln!(f, "{value}").and_then(|_| f.flush());
        }
        inner.events.push(value);
    }

    pub fn events(&self) -> Vec<Value> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).events.clone()
    }

    pub fn named(&self, event: &str) -> Vec<Value> {
        self.events().into_iter().filter(|e| e["event"] == event).collect()
    }
}
