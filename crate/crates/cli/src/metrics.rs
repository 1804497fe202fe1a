//! Per-step metrics as JSON lines. The first line is a header carrying
//! provenance and optimizer settings; each following line is one step. Lines
//! are flushed as written, so an interrupted run leaves a valid prefix.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use moelab::distill::{AdamWConfig, StepRecord};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::report::Provenance;

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    record_wall_time: bool,
}

impl MetricsWriter {
    pub fn create(
        path: &Path,
        provenance: &Provenance,
        run: &str,
        adam: &AdamWConfig,
        record_wall_time: bool,
    ) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            record_wall_time,
        };
        let header = json!({
            "kind": "header",
            "config_hash": provenance.config_hash,
            "seed": provenance.seed,
            "version": provenance.version,
            "run": run,
            "adamw": adam,
        });
        w.line(&header)?;
        Ok(w)
    }

    fn line(&mut self, v: &serde_json::Value) -> Result<()> {
        let io = |e| CliError::io(&self.path, e);
        serde_json::to_writer(&mut self.out, v).map_err(|e| io(e.into()))?;
        self.out.write_all(b"\n").map_err(io)?;
        self.out.flush().map_err(io)
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        let v = json!({
            "kind": "step",
            "step": r.step,
            "outer_step": r.outer_step,
            "method": r.method,
            "loss": r.loss,
            "kl": r.kl,
            "lb_loss": r.lb_loss,
            "router_grad_norm": r.router_grad_norm,
            "wall_ms": self.record_wall_time.then_some(r.wall_ms),
        });
        self.line(&v)
    }

    /// Adapter for the training observers, which speak the library error type.
    pub fn observe(&mut self, r: &StepRecord) -> moelab::Result<()> {
        self.record(r).map_err(|e| match e {
            CliError::Io { path, source } => moelab::Error::Io { path, source },
            other => moelab::Error::Contract(other.to_string()),
        })
    }
}
