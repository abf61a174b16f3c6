//! Checkpoint files: a header line, one JSON metadata line, then the
//! parameters as little-endian f64.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TrainError;
use crate::toyworld::{PolicyConfig, ToyPolicy};

pub const HEADER: &str = "MARCH-TOYCKPT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    step: usize,
    policy: PolicyConfig,
    n_params: usize,
    config: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub policy: ToyPolicy,
    /// Snapshot of the configuration that produced the checkpoint.
    pub config: Value,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let meta = Meta {
            step: self.step,
            policy: self.policy.config,
            n_params: self.policy.n_params(),
            config: self.config.clone(),
        };
        writeln!(w, "{HEADER}")?;
        writeln!(w, "{}", serde_json::to_string(&meta)?)?;
        for p in self.policy.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from(r: impl Read) -> Result<Checkpoint, TrainError> {
        let bad = |m: String| TrainError::Checkpoint(m);
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        if line.trim_end() != HEADER {
            return Err(bad(format!("unsupported header {:?}", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let meta: Meta = serde_json::from_str(&line).map_err(|e| bad(format!("metadata: {e}")))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        if bytes.len() != meta.n_params * 8 {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                meta.n_params * 8,
                bytes.len()
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let policy = ToyPolicy::from_params(meta.policy, params).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            step: meta.step,
            policy,
            config: meta.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let file = std::fs::File::open(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::read_from(file)
    }
}
