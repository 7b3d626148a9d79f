//! Line-delimited JSON log records on stderr, optionally mirrored to a file.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

pub struct Logger {
    file: Option<File>,
}

impl Logger {
    pub fn stderr_only() -> Self {
        Self { file: None }
    }

    pub fn with_file(path: &Path) -> semalign::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| semalign::Error::io(path, e))?;
        Ok(Self { file: Some(file) })
    }

    pub fn record(&mut self, event: &str, fields: Value) {
        let mut rec = json!({ "event": event });
        if let (Some(obj), Value::Object(extra)) = (rec.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let line = rec.to_string();
        eprintln!("{line}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
        }
    }
}

pub fn error(e: &semalign::Error) {
    Logger::stderr_only().record(
        "error",
        json!({ "kind": format!("{:?}", e.kind()).to_lowercase(), "message": e.to_string() }),
    );
}
