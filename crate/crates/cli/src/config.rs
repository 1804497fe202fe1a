//! Run configuration: a sectioned TOML file, overridable from the command line.
//!
//! Every section rejects unknown keys, and [`RunConfig::validate`] runs before
//! any compute so a typo fails fast with exit code 2.

use std::path::{Path, PathBuf};

use moelab::data::{SyntheticConfig, Task, VOCAB_SIZE};
use moelab::distill::{DistillConfig, Method, PretrainConfig};
use moelab::eval::RouteMode;
use moelab::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub pretrain: PretrainSection,
    pub distill: DistillConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            data: DataSection::default(),
            teacher: ModelConfig::desk_teacher(),
            student: ModelConfig::desk_student(),
            pretrain: PretrainSection::default(),
            distill: DistillConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write elapsed milliseconds into metrics. Off by default because timing
    /// makes metrics files differ between otherwise identical runs.
    pub record_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic tasks mixed uniformly.
    pub tasks: Vec<Task>,
    /// Synthetic corpus size before the train/valid/test split.
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: String,
    /// JSONL corpus, required when `source = "jsonl"`.
    pub path: Option<PathBuf>,
    pub max_request_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            source: DataSource::Synthetic,
            tasks: vec![Task::Copy, Task::Reverse],
            count: 3000,
            min_len: s.min_len,
            max_len: s.max_len,
            alphabet: s.alphabet,
            path: None,
            max_request_len: 12,
        }
    }
}

impl DataSection {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            min_len: self.min_len,
            max_len: self.max_len,
            alphabet: self.alphabet.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub teacher: PretrainConfig,
    /// Supervised fine-tuning of the student before distillation.
    pub student: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Test sets averaged by `eval` (seeds `seed..seed + seeds`).
    pub seeds: usize,
    pub max_new_tokens: usize,
    /// Top-k for the gate-mass report; defaults to the teacher's k.
    pub gate_mass_k: Option<usize>,
    pub router_shift_mode: RouteMode,
    pub k_values: Vec<usize>,
    pub k_sweep_method: Method,
    /// Step cap for each k-sweep student; falls back to `distill.max_steps`.
    pub k_sweep_max_steps: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: 1,
            max_new_tokens: 16,
            gate_mass_k: None,
            router_shift_mode: RouteMode::All,
            k_values: vec![1, 2, 4, 8],
            k_sweep_method: Method::Gkd,
            k_sweep_max_steps: None,
        }
    }
}

/// Grid for `moelab sweep`. Empty lists fall back to the `[distill]` value;
/// `lambda` and `augment_count` only vary knowledge-augmentation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    pub lambda: Vec<f64>,
    pub augment_count: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            methods: Method::EVERY.to_vec(),
            lambda: Vec::new(),
            augment_count: Vec::new(),
        }
    }
}

/// Checkpoint locations; relative paths resolve against `run.out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub teacher: PathBuf,
    pub student_init: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            teacher: PathBuf::from("teacher.ckpt"),
            student_init: PathBuf::from("student_init.ckpt"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub lambda: Option<f64>,
    pub augment_count: Option<usize>,
    pub beta: Option<f64>,
    /// Teacher top-k for KD/GKD and the gate-mass report.
    pub k: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if let Some(v) = o.method {
            self.distill.method = v;
        }
        if let Some(v) = o.lambda {
            self.distill.lambda = v;
        }
        if let Some(v) = o.augment_count {
            self.distill.augment_count = v;
        }
        if let Some(v) = o.beta {
            self.distill.beta = v;
        }
        if let Some(v) = o.k {
            self.distill.teacher_k = Some(v);
            self.eval.gate_mass_k = Some(v);
        }
        if let Some(v) = &o.out {
            self.run.out_dir = v.clone();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, with the output directory blanked
    /// so that relocating a run does not change its identity.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Sequence budget shared by teacher and student.
    pub fn max_seq_len(&self) -> usize {
        self.teacher.max_seq_len.min(self.student.max_seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        for (role, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            m.validate().map_err(|e| CliError::Config(format!("[{role}] {e}")))?;
            if m.vocab_size != VOCAB_SIZE {
                return bad(format!(
                    "[{role}] vocab_size {} must equal the byte vocabulary ({VOCAB_SIZE})",
                    m.vocab_size
                ));
            }
        }
        let Some(n) = self.teacher.n_experts() else {
            return bad("[teacher] needs an [teacher.moe] section".into());
        };
        self.distill.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, v) in [
            ("distill.ka_expert_count", self.distill.ka_expert_count),
            ("distill.teacher_k", self.distill.teacher_k),
            ("eval.gate_mass_k", self.eval.gate_mass_k),
        ] {
            if let Some(k) = v {
                if k == 0 || k > n {
                    return bad(format!("{name} = {k} outside [1, {n}]"));
                }
            }
        }
        for (role, p) in [("teacher", &self.pretrain.teacher), ("student", &self.pretrain.student)] {
            if p.batch_size == 0 || !(p.lr >= 0.0) || !(p.aux_coef >= 0.0) {
                return bad(format!("[pretrain.{role}] needs batch_size > 0, lr >= 0 and aux_coef >= 0"));
            }
            if p.epochs == 0 && p.max_steps.is_none() {
                return bad(format!("[pretrain.{role}] needs epochs > 0 or max_steps"));
            }
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.tasks.is_empty() {
                    return bad("data.tasks is empty".into());
                }
                if d.count < 3 {
                    return bad(format!("data.count = {} leaves no held-out examples", d.count));
                }
                if d.min_len == 0 || d.min_len > d.max_len || d.alphabet.is_empty() {
                    return bad("data needs 0 < min_len <= max_len and a nonempty alphabet".into());
                }
            }
            DataSource::Jsonl => {
                if d.path.is_none() {
                    return bad("data.source = \"jsonl\" needs data.path".into());
                }
            }
        }
        // BOS, SEP and EOS plus at least one response token must fit.
        if d.max_request_len == 0 || d.max_request_len + 4 > self.max_seq_len() {
            return bad(format!(
                "data.max_request_len = {} does not fit max_seq_len {}",
                d.max_request_len,
                self.max_seq_len()
            ));
        }
        let e = &self.eval;
        if e.seeds == 0 || e.max_new_tokens == 0 {
            return bad("eval.seeds and eval.max_new_tokens must be positive".into());
        }
        if let Some(&k) = e.k_values.iter().find(|&&k| k == 0 || k > n) {
            return bad(format!("eval.k_values entry {k} outside [1, {n}]"));
        }
        if let RouteMode::TopK(k) = e.router_shift_mode {
            if k == 0 || k > n {
                return bad(format!("eval.router_shift_mode top_k {k} outside [1, {n}]"));
            }
        }
        if !matches!(e.k_sweep_method, Method::Kd | Method::Gkd) {
            return bad(format!("eval.k_sweep_method must be kd or gkd, not {}", e.k_sweep_method));
        }
        if self.sweep.methods.is_empty() {
            return bad("sweep.methods is empty".into());
        }
        if let Some(l) = self.sweep.lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("sweep.lambda entry {l} outside [0, 1]"));
        }
        if self.sweep.augment_count.contains(&0) {
            return bad("sweep.augment_count entries must be positive".into());
        }
        Ok(())
    }
}
