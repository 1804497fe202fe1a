use std::time::Instant;

use rand::seq::SliceRandom;

use super::ka::KaSelector;
use super::optim::{grad_norm, AdamW};
use super::{DistillConfig, KlDirection, Method, PretrainConfig, StepRecord};
use crate::data::EncodedExample;
use crate::diffcore::{log_softmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    all_params, generate, no_params, router_param, Decoding, ForwardOptions, ForwardOutput,
    LanguageModel,
};
use crate::moe::{load_balance_loss_var, Routing};
use crate::rng::{stream, SeededRng, Stream};

/// Receives every step record as it is produced.
pub type Observer<'a> = dyn FnMut(&StepRecord) -> Result<()> + 'a;

/// A batch flattened into the model's next-token layout.
struct Batch {
    inputs: Vec<Vec<usize>>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

impl Batch {
    fn new(examples: &[&EncodedExample]) -> Self {
        let mut batch = Batch {
            inputs: Vec::with_capacity(examples.len()),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for e in examples {
            let v = e.lm_view();
            batch.inputs.push(v.inputs);
            batch.targets.extend(v.targets);
            batch.mask.extend(v.loss_mask);
        }
        batch
    }
}

/// Batch indices for every outer step: an independent shuffle per epoch,
/// continuing past `epochs` when `max_steps` asks for more.
fn schedule(
    n: usize,
    batch_size: usize,
    epochs: usize,
    max_steps: Option<usize>,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::contract("training on an empty dataset"));
    }
    let per_epoch = n.div_ceil(batch_size);
    let total = max_steps.unwrap_or(epochs * per_epoch);
    let mut steps = Vec::with_capacity(total);
    while steps.len() < total {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if steps.len() == total {
                break;
            }
            steps.push(chunk.to_vec());
        }
    }
    Ok(steps)
}

fn log_probs_of(logits: &Tensor) -> Result<Tensor> {
    let c = logits.cols();
    let mut data = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        data.extend(log_softmax(logits.row(r)));
    }
    Tensor::new(vec![logits.rows(), c], data)
}

/// Teacher log-probabilities over the batch, as a constant.
fn teacher_log_probs(teacher: &LanguageModel, batch: &Batch, routing: &mut Routing<'_>) -> Result<Tensor> {
    let inf = teacher.infer(&batch.inputs, routing, false)?;
    log_probs_of(&inf.logits)
}

enum Target<'a> {
    Golden,
    /// `KL(p || q)` against constant teacher log-probabilities.
    Forward(&'a Tensor),
    /// `KL(q || p)` against constant teacher log-probabilities.
    Reverse(&'a Tensor),
}

/// One optimizer step on the student; returns the pre-update loss.
fn student_step(student: &mut LanguageModel, opt: &mut AdamW, batch: &Batch, target: Target<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let mut routing = Routing::TopK(student.default_k());
    let out = student.forward(
        &mut g,
        &batch.inputs,
        ForwardOptions {
            routing: &mut routing,
            noise: None,
            trainable: &all_params,
            collect_gates: false,
        },
    )?;
    let loss = match target {
        Target::Golden => g.cross_entropy(out.logits, &batch.targets, &batch.mask)?,
        Target::Forward(p) => {
            let lq = g.log_softmax(out.logits)?;
            let lp = g.constant(p.clone());
            g.kl_div(lp, lq, &batch.mask)?
        }
        Target::Reverse(p) => {
            let lq = g.log_softmax(out.logits)?;
            let lp = g.constant(p.clone());
            g.kl_div(lq, lp, &batch.mask)?
        }
    };
    let value = g.data(loss)[0];
    g.backward(loss)?;
    student.zero_grad();
    student.collect_grads(&out, &g);
    opt.step(student.named_params_mut())?;
    Ok(value)
}

/// Samples a response from the student for every prompt in `examples`.
fn pseudo_targets(
    student: &LanguageModel,
    examples: &[&EncodedExample],
    cfg: &DistillConfig,
    rng: &mut SeededRng,
) -> Result<Vec<EncodedExample>> {
    let prompts: Vec<Vec<usize>> = examples.iter().map(|e| e.prompt().to_vec()).collect();
    let mut routing = Routing::TopK(student.default_k());
    let responses = generate(
        student,
        &prompts,
        cfg.max_new_tokens,
        Decoding::Sample(cfg.sampling),
        &mut routing,
        rng,
    )?;
    Ok(prompts
        .iter()
        .zip(&responses)
        .map(|(p, r)| EncodedExample::from_prompt_and_response(p, r))
        .collect())
}

struct Recorder<'o, 'a> {
    method: &'static str,
    step: usize,
    records: Vec<StepRecord>,
    observer: &'o mut Observer<'a>,
}

impl Recorder<'_, '_> {
    fn push(
        &mut self,
        outer_step: usize,
        loss: f64,
        kl: Option<f64>,
        lb_loss: Option<f64>,
        router_grad_norm: Option<f64>,
        started: Instant,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::contract(format!(
                "{} loss became non-finite at step {}",
                self.method, self.step
            )));
        }
        let rec = StepRecord {
            step: self.step,
            outer_step,
            method: self.method.to_string(),
            loss,
            kl,
            lb_loss,
            router_grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        (self.observer)(&rec)?;
        self.records.push(rec);
        self.step += 1;
        Ok(())
    }
}

fn require_moe(teacher: &LanguageModel, method: Method) -> Result<()> {
    if teacher.is_moe() {
        Ok(())
    } else {
        Err(Error::contract(format!("{method} needs a teacher with MoE layers")))
    }
}

/// Dispatches to the procedure named by `cfg.method`.
pub fn run(
    teacher: Option<&mut LanguageModel>,
    student: &mut LanguageModel,
    data: &[EncodedExample],
    cfg: &DistillConfig,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<Vec<StepRecord>> {
    match cfg.method {
        Method::Ka => {
            let t = teacher.ok_or_else(|| Error::contract("ka needs a teacher"))?;
            run_ka(t, student, data, cfg, seed, observer)
        }
        Method::Sar => {
            let t = teacher.ok_or_else(|| Error::contract("sar needs a teacher"))?;
            run_sar(t, student, data, cfg, seed, observer)
        }
        m => run_baseline(m, teacher.map(|t| &*t), student, data, cfg, seed, observer),
    }
}

/// SFT, KD, GKD and the all-experts baseline.
pub fn run_baseline(
    method: Method,
    teacher: Option<&LanguageModel>,
    student: &mut LanguageModel,
    data: &[EncodedExample],
    cfg: &DistillConfig,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<Vec<StepRecord>> {
    if matches!(method, Method::Ka | Method::Sar) {
        return Err(Error::contract(format!("{method} is not a baseline")));
    }
    let teacher = match (method.needs_teacher(), teacher) {
        (true, None) => return Err(Error::contract(format!("{method} needs a teacher"))),
        (true, Some(t)) => {
            cfg.validate_for(t)?;
            Some(t)
        }
        (false, _) => {
            cfg.validate()?;
            None
        }
    };
    let mut data_rng = stream(seed, Stream::Data);
    let mut sample_rng = stream(seed, Stream::Sampling);
    let steps = schedule(data.len(), cfg.batch_size, cfg.epochs, cfg.max_steps, &mut data_rng)?;
    let mut opt = AdamW::new(cfg.lr_student, cfg.adam);
    let mut rec = Recorder {
        method: method.name(),
        step: 0,
        records: Vec::with_capacity(steps.len()),
        observer,
    };
    for (outer, idx) in steps.iter().enumerate() {
        let started = Instant::now();
        let golden: Vec<&EncodedExample> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, kl) = match (method, teacher) {
            (Method::Sft, _) => {
                let batch = Batch::new(&golden);
                (student_step(student, &mut opt, &batch, Target::Golden)?, None)
            }
            (Method::Kd, Some(t)) => {
                let batch = Batch::new(&golden);
                let p = teacher_log_probs(t, &batch, &mut Routing::TopK(cfg.teacher_k(t)))?;
                let l = student_step(student, &mut opt, &batch, Target::Forward(&p))?;
                (l, Some(l))
            }
            (Method::Gkd | Method::All, Some(t)) => {
                let sampled = pseudo_targets(student, &golden, cfg, &mut sample_rng)?;
                let batch = Batch::new(&sampled.iter().collect::<Vec<_>>());
                let mut routing = if method == Method::All {
                    Routing::All
                } else {
                    Routing::TopK(cfg.teacher_k(t))
                };
                let p = teacher_log_probs(t, &batch, &mut routing)?;
                let l = student_step(student, &mut opt, &batch, Target::Reverse(&p))?;
                (l, Some(l))
            }
            _ => unreachable!("teacher presence checked above"),
        };
        rec.push(outer, loss, kl, None, None, started)?;
    }
    Ok(rec.records)
}

/// Knowledge augmentation: one sampled response per outer step, then
/// `augment_count` teacher forwards under fresh expert masks, each followed by
/// a student update on the reverse divergence.
pub fn run_ka(
    teacher: &LanguageModel,
    student: &mut LanguageModel,
    data: &[EncodedExample],
    cfg: &DistillConfig,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<Vec<StepRecord>> {
    require_moe(teacher, Method::Ka)?;
    cfg.validate_for(teacher)?;
    let count = cfg.ka_count(teacher);
    let mut data_rng = stream(seed, Stream::Data);
    let mut sample_rng = stream(seed, Stream::Sampling);
    let mut augment_rng = stream(seed, Stream::Augment);
    let steps = schedule(data.len(), cfg.batch_size, cfg.epochs, cfg.max_steps, &mut data_rng)?;
    let mut opt = AdamW::new(cfg.lr_student, cfg.adam);
    let mut rec = Recorder {
        method: Method::Ka.name(),
        step: 0,
        records: Vec::with_capacity(steps.len() * cfg.augment_count),
        observer,
    };
    for (outer, idx) in steps.iter().enumerate() {
        let golden: Vec<&EncodedExample> = idx.iter().map(|&i| &data[i]).collect();
        let sampled = pseudo_targets(student, &golden, cfg, &mut sample_rng)?;
        let batch = Batch::new(&sampled.iter().collect::<Vec<_>>());
        for _ in 0..cfg.augment_count {
            let started = Instant::now();
            let mut selector = KaSelector {
                lambda: cfg.lambda,
                count,
                rng: &mut augment_rng,
            };
            let p = teacher_log_probs(teacher, &batch, &mut Routing::Select(&mut selector))?;
            let l = student_step(student, &mut opt, &batch, Target::Reverse(&p))?;
            rec.push(outer, l, Some(l), None, None, started)?;
        }
    }
    Ok(rec.records)
}

/// Graph terms of the router objective.
pub struct SarTerms {
    pub loss: Var,
    pub kl: f64,
    pub lb: f64,
}

/// `KL + beta * sum of balancing losses` on a teacher forward already built on
/// `g`. `student_logq` holds the student's log-probabilities as a constant.
pub fn sar_router_objective(
    g: &mut Graph,
    out: &ForwardOutput,
    student_logq: &Tensor,
    mask: &[bool],
    beta: f64,
    direction: KlDirection,
) -> Result<SarTerms> {
    let lp = g.log_softmax(out.logits)?;
    let lq = g.constant(student_logq.clone());
    let kl = match direction {
        KlDirection::Forward => g.kl_div(lp, lq, mask)?,
        KlDirection::Reverse => g.kl_div(lq, lp, mask)?,
    };
    let mut lb_total: Option<Var> = None;
    for aux in &out.aux {
        let lb = load_balance_loss_var(g, aux.probs, &aux.counts)?;
        lb_total = Some(match lb_total {
            Some(acc) => g.add(acc, lb)?,
            None => lb,
        });
    }
    let kl_value = g.data(kl)[0];
    let Some(lb) = lb_total else {
        return Err(Error::contract("router objective on a teacher without MoE layers"));
    };
    let lb_value = g.data(lb)[0];
    let weighted = g.scale(lb, beta);
    let loss = g.add(kl, weighted)?;
    Ok(SarTerms {
        loss,
        kl: kl_value,
        lb: lb_value,
    })
}

fn student_log_probs(student: &LanguageModel, batch: &Batch) -> Result<Tensor> {
    let inf = student.infer(&batch.inputs, &mut Routing::TopK(student.default_k()), false)?;
    log_probs_of(&inf.logits)
}

fn fixed_batch_objective(
    teacher: &LanguageModel,
    student: &LanguageModel,
    examples: &[EncodedExample],
    cfg: &DistillConfig,
    noise_seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(Graph, ForwardOutput, SarTerms)> {
    require_moe(teacher, Method::Sar)?;
    let batch = Batch::new(&examples.iter().collect::<Vec<_>>());
    let logq = student_log_probs(student, &batch)?;
    let mut noise = stream(noise_seed, Stream::Routing);
    let mut g = Graph::new();
    let out = teacher.forward(
        &mut g,
        &batch.inputs,
        ForwardOptions {
            routing: &mut Routing::All,
            noise: Some(&mut noise),
            trainable,
            collect_gates: false,
        },
    )?;
    let terms = sar_router_objective(&mut g, &out, &logq, &batch.mask, cfg.beta, cfg.sar_kl_direction)?;
    Ok((g, out, terms))
}

/// Router objective on fixed golden sequences with noise drawn from
/// `noise_seed`, evaluated without touching any parameter.
pub fn sar_objective(
    teacher: &LanguageModel,
    student: &LanguageModel,
    examples: &[EncodedExample],
    cfg: &DistillConfig,
    noise_seed: u64,
) -> Result<f64> {
    let (g, _, terms) = fixed_batch_objective(teacher, student, examples, cfg, noise_seed, &no_params)?;
    Ok(g.data(terms.loss)[0])
}

/// [`sar_objective`] together with its gradient for every router parameter,
/// in `named_params` order. The noise draw is identical to the value-only
/// call, so finite differences of [`sar_objective`] see the same frozen noise.
pub fn sar_objective_grad(
    teacher: &LanguageModel,
    student: &LanguageModel,
    examples: &[EncodedExample],
    cfg: &DistillConfig,
    noise_seed: u64,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let (mut g, out, terms) = fixed_batch_objective(teacher, student, examples, cfg, noise_seed, &router_param)?;
    g.backward(terms.loss)?;
    let mut grads = teacher.clone();
    grads.zero_grad();
    grads.collect_grads(&out, &g);
    let named = grads
        .named_params()
        .into_iter()
        .filter(|(n, _)| router_param(n))
        .map(|(n, t)| {
            let grad = t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            (n, grad)
        })
        .collect();
    Ok((g.data(terms.loss)[0], named))
}

/// Student-aware router: each step first updates only the teacher's router on
/// the router objective (all experts, noise on), then updates the student on
/// the reverse divergence against the all-experts teacher (noise off).
pub fn run_sar(
    teacher: &mut LanguageModel,
    student: &mut LanguageModel,
    data: &[EncodedExample],
    cfg: &DistillConfig,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<Vec<StepRecord>> {
    require_moe(teacher, Method::Sar)?;
    cfg.validate_for(teacher)?;
    let mut data_rng = stream(seed, Stream::Data);
    let mut sample_rng = stream(seed, Stream::Sampling);
    let mut noise_rng = stream(seed, Stream::Routing);
    let steps = schedule(data.len(), cfg.batch_size, cfg.epochs, cfg.max_steps, &mut data_rng)?;
    let mut student_opt = AdamW::new(cfg.lr_student, cfg.adam);
    let mut router_opt = AdamW::new(cfg.lr_router, cfg.adam);
    let mut rec = Recorder {
        method: Method::Sar.name(),
        step: 0,
        records: Vec::with_capacity(steps.len()),
        observer,
    };
    for (outer, idx) in steps.iter().enumerate() {
        let started = Instant::now();
        let golden: Vec<&EncodedExample> = idx.iter().map(|&i| &data[i]).collect();
        let sampled = pseudo_targets(student, &golden, cfg, &mut sample_rng)?;
        let batch = Batch::new(&sampled.iter().collect::<Vec<_>>());

        // Stage 1: router update against the current student.
        let logq = student_log_probs(student, &batch)?;
        let mut g = Graph::new();
        let out = teacher.forward(
            &mut g,
            &batch.inputs,
            ForwardOptions {
                routing: &mut Routing::All,
                noise: Some(&mut noise_rng),
                trainable: &router_param,
                collect_gates: false,
            },
        )?;
        let terms = sar_router_objective(&mut g, &out, &logq, &batch.mask, cfg.beta, cfg.sar_kl_direction)?;
        g.backward(terms.loss)?;
        teacher.zero_grad();
        teacher.collect_grads(&out, &g);
        let norm = grad_norm(
            teacher
                .named_params()
                .into_iter()
                .filter(|(n, _)| router_param(n))
                .map(|(_, t)| t),
        );
        router_opt.step(teacher.named_params_mut())?;
        drop(g);

        // Stage 2: knowledge transfer with every expert active.
        let p = teacher_log_probs(teacher, &batch, &mut Routing::All)?;
        let l = student_step(student, &mut student_opt, &batch, Target::Reverse(&p))?;
        rec.push(outer, l, Some(terms.kl), Some(terms.lb), Some(norm), started)?;
    }
    Ok(rec.records)
}

/// Language-model training on golden responses. MoE models use top-k routing
/// (noisy when configured) and add `aux_coef` times the summed balancing loss.
pub fn pretrain(
    model: &mut LanguageModel,
    data: &[EncodedExample],
    cfg: &PretrainConfig,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<Vec<StepRecord>> {
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !(cfg.aux_coef >= 0.0) {
        return Err(Error::contract(format!("invalid pretrain config {cfg:?}")));
    }
    let mut data_rng = stream(seed, Stream::Data);
    let mut noise_rng = stream(seed, Stream::Routing);
    let steps = schedule(data.len(), cfg.batch_size, cfg.epochs, cfg.max_steps, &mut data_rng)?;
    let mut opt = AdamW::new(cfg.lr, cfg.adam);
    let mut rec = Recorder {
        method: "pretrain",
        step: 0,
        records: Vec::with_capacity(steps.len()),
        observer,
    };
    let k = model.default_k();
    for (outer, idx) in steps.iter().enumerate() {
        let started = Instant::now();
        let golden: Vec<&EncodedExample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::new(&golden);
        let mut g = Graph::new();
        let noise = (cfg.noisy && model.is_moe()).then_some(&mut noise_rng);
        let out = model.forward(
            &mut g,
            &batch.inputs,
            ForwardOptions {
                routing: &mut Routing::TopK(k),
                noise,
                trainable: &all_params,
                collect_gates: false,
            },
        )?;
        let ce = g.cross_entropy(out.logits, &batch.targets, &batch.mask)?;
        let ce_value = g.data(ce)[0];
        let mut loss = ce;
        let mut lb_value = None;
        if !out.aux.is_empty() {
            let mut total = 0.0;
            for aux in &out.aux {
                let lb = load_balance_loss_var(&mut g, aux.probs, &aux.counts)?;
                total += g.data(lb)[0];
                let weighted = g.scale(lb, cfg.aux_coef);
                loss = g.add(loss, weighted)?;
            }
            lb_value = Some(total);
        }
        g.backward(loss)?;
        model.zero_grad();
        model.collect_grads(&out, &g);
        opt.step(model.named_params_mut())?;
        rec.push(outer, ce_value, None, lb_value, None, started)?;
    }
    Ok(rec.records)
}
