//! ROUGE-L scoring, teacher-forced accuracy, and the MoE diagnostics:
//! activated gate mass, the k-sweep and router shift.

mod gates;
mod rouge;

pub use gates::{
    activated_mass_report, gate_traces, router_shift_report, GateTrace, LayerReport, ShiftReport,
};
pub use rouge::{lcs_len, rouge_l, RougeScore};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{decode_response, EncodedExample};
use crate::distill::{run, DistillConfig, Method};
use crate::error::{Error, Result};
use crate::model::{generate, Decoding, LanguageModel};
use crate::rng::{stream, Stream};

/// Serializable routing choice for analyses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    TopK(usize),
    All,
}

/// Worker count for data-parallel evaluation, from `MOELAB_THREADS`.
pub fn eval_threads() -> usize {
    std::env::var("MOELAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Teacher-forced argmax accuracy over response tokens (EOS included).
pub fn response_accuracy(model: &LanguageModel, dataset: &[EncodedExample], mode: RouteMode) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in dataset.chunks(32) {
        let views: Vec<_> = chunk.iter().map(EncodedExample::lm_view).collect();
        let seqs: Vec<Vec<usize>> = views.iter().map(|v| v.inputs.clone()).collect();
        let inf = model.infer(&seqs, &mut mode.routing(), false)?;
        let mut row = 0;
        for v in &views {
            for (t, &m) in v.targets.iter().zip(&v.loss_mask) {
                if m {
                    let logits = inf.logits.row(row);
                    let mut best = 0;
                    for (i, &x) in logits.iter().enumerate() {
                        if x > logits[best] {
                            best = i;
                        }
                    }
                    correct += usize::from(best == *t);
                    total += 1;
                }
                row += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::contract("accuracy over no response tokens"));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub index: usize,
    pub generated: String,
    pub reference: String,
    pub score: RougeScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub mean_f: f64,
    pub examples: Vec<ScoredExample>,
}

/// Greedy decoding of every prompt in `dataset`, scored by byte-level ROUGE-L
/// against the golden responses. Batches are spread over [`eval_threads`]
/// workers; results keep dataset order.
pub fn generation_report(
    model: &LanguageModel,
    dataset: &[EncodedExample],
    mode: RouteMode,
    max_new: usize,
) -> Result<GenerationReport> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluation over an empty test set"));
    }
    let threads = eval_threads();
    let work = |(c, chunk): (usize, &[EncodedExample])| -> Result<Vec<ScoredExample>> {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|e| e.prompt().to_vec()).collect();
        // Greedy decoding never consumes randomness.
        let mut rng = stream(0, Stream::Sampling);
        let outs = generate(model, &prompts, max_new, Decoding::Greedy, &mut mode.routing(), &mut rng)?;
        Ok(chunk
            .iter()
            .zip(outs)
            .enumerate()
            .map(|(i, (e, out))| {
                let generated = decode_response(&out);
                let reference = e.response_bytes();
                ScoredExample {
                    index: c * 16 + i,
                    score: rouge_l(&generated, &reference),
                    generated: String::from_utf8_lossy(&generated).into_owned(),
                    reference: String::from_utf8_lossy(&reference).into_owned(),
                }
            })
            .collect())
    };
    let chunks: Vec<(usize, &[EncodedExample])> = dataset.chunks(16).enumerate().collect();
    let parts: Vec<Result<Vec<ScoredExample>>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        pool.install(|| chunks.into_par_iter().map(work).collect())
    } else {
        chunks.into_iter().map(work).collect()
    };
    let mut examples = Vec::with_capacity(dataset.len());
    for p in parts {
        examples.extend(p?);
    }
    let mean_f = examples.iter().map(|e| e.score.f).sum::<f64>() / examples.len() as f64;
    Ok(GenerationReport { mean_f, examples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub teacher_score: f64,
    pub student_score: f64,
}

/// For each `k`: the teacher's greedy ROUGE-L under top-`k` routing, and the
/// score of a fresh student distilled with the teacher routed to `k` experts.
#[allow(clippy::too_many_arguments)]
pub fn k_sweep(
    teacher: &LanguageModel,
    student_ctor: &dyn Fn() -> Result<LanguageModel>,
    train: &[EncodedExample],
    test: &[EncodedExample],
    ks: &[usize],
    cfg: &DistillConfig,
    seed: u64,
    max_new: usize,
) -> Result<Vec<KSweepRow>> {
    let n = teacher
        .config
        .n_experts()
        .ok_or_else(|| Error::contract("k-sweep needs a teacher with MoE layers"))?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::contract(format!("k={k} outside [1, {n}]")));
    }
    if !matches!(cfg.method, Method::Kd | Method::Gkd) {
        return Err(Error::contract(format!(
            "k-sweep distills with kd or gkd, not {}",
            cfg.method
        )));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let teacher_score = generation_report(teacher, test, RouteMode::TopK(k), max_new)?.mean_f;
        let mut student = student_ctor()?;
        let run_cfg = DistillConfig {
            teacher_k: Some(k),
            ..cfg.clone()
        };
        let mut t = teacher.clone();
        run(Some(&mut t), &mut student, train, &run_cfg, seed, &mut |_| Ok(()))?;
        let student_score = generation_report(&student, test, RouteMode::All, max_new)?.mean_f;
        rows.push(KSweepRow {
            k,
            teacher_score,
            student_score,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode, gen_synthetic, EncodeLimits, Task};
    use crate::model::{ModelConfig, MoeConfig};

    fn teacher(k: usize, seed: u64) -> LanguageModel {
        let cfg = ModelConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 16,
            moe: Some(MoeConfig {
                n_experts: 4,
                k,
                layers: vec![0, 1],
            }),
        };
        LanguageModel::new(cfg, &mut stream(seed, Stream::Init)).unwrap()
    }

    fn dataset(n: usize) -> Vec<EncodedExample> {
        let limits = EncodeLimits {
            max_seq_len: 16,
            max_request_len: 6,
        };
        gen_synthetic(Task::Copy, n, &mut stream(0, Stream::Data))
            .iter()
            .map(|p| encode(p, limits).unwrap())
            .collect()
    }

    #[test]
    fn full_selection_has_unit_mass() {
        let t = teacher(4, 1);
        for r in activated_mass_report(&t, &dataset(10), 4).unwrap() {
            assert!((r.activated_mass - 1.0).abs() < 1e-9);
            assert!(r.nonactivated_mass.abs() < 1e-9);
        }
    }

    #[test]
    fn masses_are_complementary() {
        let t = teacher(2, 2);
        let reports = activated_mass_report(&t, &dataset(10), 2).unwrap();
        assert_eq!(reports.len(), 2);
        for r in reports {
            assert!((0.0..=1.0).contains(&r.activated_mass));
            assert!((r.activated_mass + r.nonactivated_mass - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_router_splits_mass_evenly() {
        let mut t = teacher(1, 3);
        for (name, p) in t.named_params_mut() {
            if name.ends_with("router.w_gate") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for r in activated_mass_report(&t, &dataset(5), 2).unwrap() {
            assert!((r.activated_mass - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn router_shift_against_itself_is_zero() {
        let t = teacher(2, 4);
        for r in router_shift_report(&t, &t, &dataset(6), RouteMode::All).unwrap() {
            assert_eq!((r.mean_kl, r.max_kl), (0.0, 0.0));
        }
    }

    #[test]
    fn router_shift_is_nonnegative_and_ordered() {
        let a = teacher(2, 5);
        let mut b = a.clone();
        for (name, p) in b.named_params_mut() {
            if name.ends_with("router.w_gate") {
                p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * (i as f64).sin());
            }
        }
        let ab = router_shift_report(&a, &b, &dataset(6), RouteMode::All).unwrap();
        let ba = router_shift_report(&b, &a, &dataset(6), RouteMode::All).unwrap();
        for r in ab.iter().chain(&ba) {
            assert!(r.mean_kl >= 0.0 && r.mean_kl.is_finite());
            assert!(r.mean_kl <= r.max_kl);
        }
        assert!(ab[0].max_kl > 0.0);
        let other = teacher(2, 6);
        let mut wider = other.clone();
        wider.config.d_ff = 9;
        assert!(router_shift_report(&other, &wider, &dataset(2), RouteMode::All).is_err());
    }

    #[test]
    fn gate_traces_are_distributions() {
        let t = teacher(2, 7);
        let traces = gate_traces(&t, &[1, 2, 3], RouteMode::TopK(2)).unwrap();
        assert_eq!(traces.len(), 2);
        for tr in traces.iter().flatten() {
            assert!((tr.full_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(tr.selected.len(), 2);
        }
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let t = teacher(2, 8);
        assert!(generation_report(&t, &[], RouteMode::All, 4).is_err());
    }

    #[test]
    fn generation_scores_are_in_range() {
        let t = teacher(2, 9);
        let r = generation_report(&t, &dataset(5), RouteMode::TopK(2), 6).unwrap();
        assert_eq!(r.examples.len(), 5);
        assert!(r.examples.iter().all(|e| (0.0..=1.0).contains(&e.score.f)));
        assert!((0.0..=1.0).contains(&r.mean_f));
    }

    #[test]
    fn accuracy_in_unit_interval() {
        let t = teacher(2, 10);
        let a = response_accuracy(&t, &dataset(5), RouteMode::TopK(2)).unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
}
