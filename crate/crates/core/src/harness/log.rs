use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::Value;

use crate::error::{Error, Result};

/// JSON-lines event log written to a file, stderr, both or neither.
pub struct JsonLog {
    file: Option<BufWriter<File>>,
    stderr: bool,
    start: Instant,
}

impl JsonLog {
    pub fn new(path: Option<&Path>, stderr: bool) -> Result<Self> {
        let file = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        Ok(Self {
            file,
            stderr,
            start: Instant::now(),
        })
    }

    pub fn silent() -> Self {
        Self {
            file: None,
            stderr: false,
            start: Instant::now(),
        }
    }

    /// Writes one record; objects get an `elapsed_s` field.
    pub fn record(&mut self, mut v: Value) {
        if let Value::Object(m) = &mut v {
            let ms = self.start.elapsed().as_millis() as f64;
            m.insert("elapsed_s".into(), (ms / 1e3).into());
        }
        let line = v.to_string();
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
        if self.stderr {
            eprintln!("{line}");
        }
    }
}
