//! The five subcommands. Each one runs inside a [`Session`], which validates
//! the configuration and holds the output-directory lock.

use std::path::{Path, PathBuf};

use log::info;
use moelab::data::{encode, gen_mixture, load_jsonl, split_corpus, EncodeLimits, EncodedExample, Split};
use moelab::distill::{pretrain as pretrain_model, run, DistillConfig, Method, StepRecord};
use moelab::eval::{
    activated_mass_report, generation_report, k_sweep, response_accuracy, router_shift_report, RouteMode,
    ScoredExample,
};
use moelab::model::LanguageModel;
use moelab::rng::{stream, Stream};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};
use crate::lock::RunLock;
use crate::metrics::MetricsWriter;
use crate::report::{write_csv, write_json, Provenance, ReportMeta};

pub struct Session {
    cfg: RunConfig,
    provenance: Provenance,
    out: PathBuf,
    _lock: RunLock,
}

impl Session {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.run.out_dir.clone();
        let lock = RunLock::acquire(&out)?;
        let provenance = Provenance::new(cfg.config_hash(), cfg.run.seed);
        Ok(Self {
            cfg,
            provenance,
            out,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.teacher)
    }

    pub fn student_init_path(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.student_init)
    }

    pub fn student_path(&self, tag: &str) -> PathBuf {
        self.out.join(format!("student_{tag}.ckpt"))
    }

    /// Where a student-aware-router run leaves its updated teacher.
    pub fn routed_teacher_path(&self, tag: &str) -> PathBuf {
        self.out.join(format!("teacher_{tag}.ckpt"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.out.join("metrics").join(format!("{name}.jsonl"))
    }

    fn checkpoint_meta(&self, role: &str, model: &LanguageModel) -> CheckpointMeta {
        CheckpointMeta {
            role: role.to_string(),
            model: model.config.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn save(&self, path: &Path, role: &str, model: &LanguageModel) -> Result<()> {
        checkpoint::save(path, model, &self.checkpoint_meta(role, model))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn report_meta(&self, kind: &str, details: serde_json::Value) -> ReportMeta {
        ReportMeta {
            provenance: self.provenance.clone(),
            kind: kind.to_string(),
            details,
        }
    }

    fn metrics(&self, name: &str, adam: &moelab::distill::AdamWConfig) -> Result<MetricsWriter> {
        MetricsWriter::create(
            &self.metrics_path(name),
            &self.provenance,
            name,
            adam,
            self.cfg.run.record_wall_time,
        )
    }

    pub fn dataset(&self, seed: u64) -> Result<Split<EncodedExample>> {
        build_dataset(&self.cfg, seed)
    }
}

/// Generates (or reads) the corpus, encodes it and splits it, all from the
/// data stream of `seed`.
pub fn build_dataset(cfg: &RunConfig, seed: u64) -> Result<Split<EncodedExample>> {
    let mut rng = stream(seed, Stream::Data);
    let d = &cfg.data;
    let pairs = match d.source {
        DataSource::Synthetic => gen_mixture(&d.tasks, d.count, &d.synthetic(), &mut rng)?,
        DataSource::Jsonl => load_jsonl(d.path.as_deref().expect("validated"))?,
    };
    let limits = EncodeLimits {
        max_seq_len: cfg.max_seq_len(),
        max_request_len: d.max_request_len,
    };
    let encoded = pairs
        .iter()
        .map(|p| encode(p, limits))
        .collect::<moelab::Result<Vec<_>>>()?;
    Ok(split_corpus(&encoded, &mut rng))
}

/// Step-0 loss and the mean over the last tenth of the steps (at least five).
pub fn loss_summary(records: &[StepRecord]) -> Option<(f64, f64)> {
    let first = records.first()?.loss;
    let tail = (records.len() / 10).max(5).min(records.len());
    let last = &records[records.len() - tail..];
    Some((first, last.iter().map(|r| r.loss).sum::<f64>() / tail as f64))
}

fn routing_for(model: &LanguageModel) -> RouteMode {
    if model.is_moe() {
        RouteMode::TopK(model.default_k())
    } else {
        RouteMode::All
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainedModel {
    pub role: String,
    pub params: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Teacher-forced response-token accuracy on the test split.
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub teacher: TrainedModel,
    pub student: TrainedModel,
}

/// Trains the MoE teacher (noisy top-k, balancing loss) and the student's
/// supervised starting point, then writes both checkpoints.
pub fn pretrain(s: &Session) -> Result<PretrainSummary> {
    let cfg = &s.cfg;
    let seed = cfg.run.seed;
    let data = s.dataset(seed)?;
    let mut out = Vec::new();
    for (role, model_cfg, train_cfg, path) in [
        ("teacher", &cfg.teacher, &cfg.pretrain.teacher, s.teacher_path()),
        ("student", &cfg.student, &cfg.pretrain.student, s.student_init_path()),
    ] {
        let mut model = LanguageModel::new(model_cfg.clone(), &mut stream(seed, Stream::Init))?;
        info!("pretraining {role} ({} parameters)", model.param_count());
        let mut metrics = s.metrics(&format!("pretrain_{role}"), &train_cfg.adam)?;
        let records = pretrain_model(&mut model, &data.train, train_cfg, seed, &mut |r| metrics.observe(r))?;
        let (initial_loss, final_loss) =
            loss_summary(&records).ok_or_else(|| moelab::Error::Contract("pretraining ran no steps".into()))?;
        let test_accuracy = response_accuracy(&model, &data.test, routing_for(&model))?;
        info!("{role}: loss {initial_loss:.4} -> {final_loss:.4}, test accuracy {test_accuracy:.4}");
        s.save(&path, role, &model)?;
        out.push(TrainedModel {
            role: role.to_string(),
            params: model.param_count(),
            steps: records.len(),
            initial_loss,
            final_loss,
            test_accuracy,
        });
    }
    let student = out.pop().expect("two models");
    let teacher = out.pop().expect("two models");
    let summary = PretrainSummary { teacher, student };
    let meta = s.report_meta("pretrain", json!({ "accuracy_split": "test" }));
    write_json(&s.report_path("pretrain.json"), &meta, &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillSummary {
    pub tag: String,
    pub method: Method,
    pub lambda: f64,
    pub augment_count: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Largest router gradient norm seen, for student-aware-router runs.
    pub max_router_grad_norm: Option<f64>,
    /// Greedy ROUGE-L F on the test split.
    pub rouge_l: f64,
}

fn load_model(path: &Path) -> Result<LanguageModel> {
    Ok(checkpoint::load(path)?.0)
}

/// Distills with `[distill]` as configured.
pub fn distill(s: &Session) -> Result<DistillSummary> {
    let cfg = s.cfg.distill.clone();
    distill_with(s, &cfg, cfg.method.name())
}

/// One distillation run from the pretrained student, written under `tag`.
pub fn distill_with(s: &Session, dcfg: &DistillConfig, tag: &str) -> Result<DistillSummary> {
    let seed = s.cfg.run.seed;
    let method = dcfg.method;
    let mut teacher = if method.needs_teacher() {
        let t = load_model(&s.teacher_path())?;
        dcfg.validate_for(&t)?;
        Some(t)
    } else {
        dcfg.validate()?;
        None
    };
    let mut student = load_model(&s.student_init_path())?;
    let data = s.dataset(seed)?;
    info!("distilling with {method} into student_{tag}");
    let mut metrics = s.metrics(&format!("distill_{tag}"), &dcfg.adam)?;
    let records = run(teacher.as_mut(), &mut student, &data.train, dcfg, seed, &mut |r| {
        metrics.observe(r)
    })?;
    let (initial_loss, final_loss) =
        loss_summary(&records).ok_or_else(|| moelab::Error::Contract("distillation ran no steps".into()))?;
    s.save(&s.student_path(tag), "student", &student)?;
    if method == Method::Sar {
        let t = teacher.as_ref().expect("sar has a teacher");
        s.save(&s.routed_teacher_path(tag), "teacher", t)?;
    }
    let rouge_l = generation_report(&student, &data.test, RouteMode::All, s.cfg.eval.max_new_tokens)?.mean_f;
    let summary = DistillSummary {
        tag: tag.to_string(),
        method,
        lambda: dcfg.lambda,
        augment_count: dcfg.augment_count,
        steps: records.len(),
        initial_loss,
        final_loss,
        max_router_grad_norm: records
            .iter()
            .filter_map(|r| r.router_grad_norm)
            .reduce(f64::max),
        rouge_l,
    };
    info!("{tag}: loss {initial_loss:.4} -> {final_loss:.4}, ROUGE-L {rouge_l:.4}");
    let meta = s.report_meta("distill", json!({ "rouge_split": "test", "decoding": "greedy" }));
    write_json(&s.report_path(&format!("distill_{tag}.json")), &meta, &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyzeKind {
    GateMass,
    RouterShift,
    KSweep,
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
}

fn emit<T: Serialize>(
    s: &Session,
    name: &str,
    meta: &ReportMeta,
    rows: &[T],
    header: &[&str],
    cells: impl Fn(&T) -> Vec<String>,
) -> Result<ReportFiles> {
    let files = ReportFiles {
        csv: s.report_path(&format!("{name}.csv")),
        json: s.report_path(&format!("{name}.json")),
    };
    let table: Vec<Vec<String>> = rows.iter().map(cells).collect();
    write_csv(&files.csv, meta, header, &table)?;
    write_json(&files.json, meta, &rows)?;
    info!("wrote {} and {}", files.csv.display(), files.json.display());
    Ok(files)
}

/// Gate-mass, router-shift or k-sweep report. `against` overrides the
/// updated teacher compared by the router-shift report.
pub fn analyze(s: &Session, kind: AnalyzeKind, against: Option<&Path>) -> Result<ReportFiles> {
    let cfg = &s.cfg;
    let data = s.dataset(cfg.run.seed)?;
    let teacher = load_model(&s.teacher_path())?;
    match kind {
        AnalyzeKind::GateMass => {
            let k = cfg.eval.gate_mass_k.unwrap_or_else(|| teacher.default_k());
            let rows = activated_mass_report(&teacher, &data.train, k)?;
            let meta = s.report_meta(
                "gate_mass",
                json!({
                    "k": k,
                    "population": "loss positions (response tokens and EOS) of the training split",
                    "noise": "off",
                }),
            );
            emit(
                s,
                "gate_mass",
                &meta,
                &rows,
                &["layer", "k", "activated_mass", "nonactivated_mass", "tokens"],
                |r| {
                    vec![
                        r.layer.to_string(),
                        k.to_string(),
                        r.activated_mass.to_string(),
                        r.nonactivated_mass.to_string(),
                        r.tokens.to_string(),
                    ]
                },
            )
        }
        AnalyzeKind::RouterShift => {
            let after_path = match against {
                Some(p) => p.to_path_buf(),
                None => s.routed_teacher_path(Method::Sar.name()),
            };
            let after = load_model(&after_path)?;
            let mode = cfg.eval.router_shift_mode;
            let rows = router_shift_report(&teacher, &after, &data.train, mode)?;
            let meta = s.report_meta(
                "router_shift",
                json!({
                    "before": s.teacher_path(),
                    "after": after_path,
                    "routing": mode,
                    "population": "every token position of the training split",
                    "noise": "off",
                }),
            );
            emit(
                s,
                "router_shift",
                &meta,
                &rows,
                &["layer", "mean_kl", "max_kl", "tokens"],
                |r| {
                    vec![
                        r.layer.to_string(),
                        r.mean_kl.to_string(),
                        r.max_kl.to_string(),
                        r.tokens.to_string(),
                    ]
                },
            )
        }
        AnalyzeKind::KSweep => {
            let init = s.student_init_path();
            let dcfg = DistillConfig {
                method: cfg.eval.k_sweep_method,
                max_steps: cfg.eval.k_sweep_max_steps.or(cfg.distill.max_steps),
                ..cfg.distill.clone()
            };
            let ctor = || load_model(&init).map_err(|e| moelab::Error::Contract(e.to_string()));
            // Surface a missing student checkpoint as such, not as a contract error.
            load_model(&init)?;
            let rows = k_sweep(
                &teacher,
                &ctor,
                &data.train,
                &data.test,
                &cfg.eval.k_values,
                &dcfg,
                cfg.run.seed,
                cfg.eval.max_new_tokens,
            )?;
            let meta = s.report_meta(
                "k_sweep",
                json!({
                    "method": dcfg.method,
                    "max_steps": dcfg.max_steps,
                    "score": "greedy ROUGE-L F on the test split",
                    "teacher_routing": "top-k",
                }),
            );
            emit(
                s,
                "k_sweep",
                &meta,
                &rows,
                &["k", "teacher_score", "student_score"],
                |r| vec![r.k.to_string(), r.teacher_score.to_string(), r.student_score.to_string()],
            )
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedScore {
    pub seed: u64,
    pub mean_f: f64,
    pub examples: Vec<ScoredExample>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    /// Average of the per-seed means.
    pub mean_f: f64,
    pub seeds: Vec<SeedScore>,
}

/// Greedy ROUGE-L of a checkpoint on the test split of `seeds` corpora.
/// Defaults to the student distilled with the configured method.
pub fn eval(s: &Session, checkpoint: Option<&Path>, seeds: Option<usize>) -> Result<(EvalSummary, PathBuf)> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => s.student_path(s.cfg.distill.method.name()),
    };
    let model = load_model(&path)?;
    let n = seeds.unwrap_or(s.cfg.eval.seeds);
    if n == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let mode = routing_for(&model);
    let mut scores = Vec::with_capacity(n);
    for seed in (s.cfg.run.seed..).take(n) {
        let data = s.dataset(seed)?;
        let r = generation_report(&model, &data.test, mode, s.cfg.eval.max_new_tokens)?;
        info!("seed {seed}: ROUGE-L {:.4} over {} examples", r.mean_f, r.examples.len());
        scores.push(SeedScore {
            seed,
            mean_f: r.mean_f,
            examples: r.examples,
        });
    }
    let summary = EvalSummary {
        checkpoint: path.clone(),
        mean_f: scores.iter().map(|x| x.mean_f).sum::<f64>() / n as f64,
        seeds: scores,
    };
    let stem = path.file_stem().map_or("model".into(), |x| x.to_string_lossy().into_owned());
    let report = s.report_path(&format!("eval_{stem}.json"));
    let meta = s.report_meta(
        "eval",
        json!({ "decoding": "greedy", "routing": mode, "split": "test", "max_new_tokens": s.cfg.eval.max_new_tokens }),
    );
    write_json(&report, &meta, &summary)?;
    Ok((summary, report))
}

/// The `[sweep]` grid: every listed method, with knowledge augmentation
/// expanded over the lambda and augment-count lists.
pub fn sweep_grid(cfg: &RunConfig) -> Vec<(String, DistillConfig)> {
    let base = &cfg.distill;
    let lambdas = if cfg.sweep.lambda.is_empty() {
        vec![base.lambda]
    } else {
        cfg.sweep.lambda.clone()
    };
    let counts = if cfg.sweep.augment_count.is_empty() {
        vec![base.augment_count]
    } else {
        cfg.sweep.augment_count.clone()
    };
    let expanded = cfg.sweep.lambda.len() > 1 || cfg.sweep.augment_count.len() > 1;
    let mut grid = Vec::new();
    for &method in &cfg.sweep.methods {
        if method != Method::Ka {
            grid.push((method.name().to_string(), DistillConfig { method, ..base.clone() }));
            continue;
        }
        for &lambda in &lambdas {
            for &augment_count in &counts {
                let tag = if expanded {
                    format!("ka_lambda{lambda}_m{augment_count}")
                } else {
                    "ka".to_string()
                };
                grid.push((
                    tag,
                    DistillConfig {
                        method,
                        lambda,
                        augment_count,
                        ..base.clone()
                    },
                ));
            }
        }
    }
    grid
}

pub fn sweep(s: &Session) -> Result<(Vec<DistillSummary>, ReportFiles)> {
    let mut rows = Vec::new();
    for (tag, dcfg) in sweep_grid(&s.cfg) {
        rows.push(distill_with(s, &dcfg, &tag)?);
    }
    let meta = s.report_meta("sweep", json!({ "score": "greedy ROUGE-L F on the test split" }));
    let files = emit(
        s,
        "sweep",
        &meta,
        &rows,
        &["tag", "method", "lambda", "augment_count", "steps", "initial_loss", "final_loss", "rouge_l"],
        |r| {
            vec![
                r.tag.clone(),
                r.method.name().to_string(),
                r.lambda.to_string(),
                r.augment_count.to_string(),
                r.steps.to_string(),
                r.initial_loss.to_string(),
                r.final_loss.to_string(),
                r.rouge_l.to_string(),
            ]
        },
    )?;
    Ok((rows, files))
}
