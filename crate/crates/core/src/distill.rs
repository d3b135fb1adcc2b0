//! Activation distillation: the student (base model fed concept embeddings)
//! is trained to reproduce the teacher's (base model fed token embeddings)
//! per-layer hidden states on the answer positions.
//!
//! Per layer the loss is the mean SmoothL1 over the `|A| × d` answer slice,
//! divided by the population standard deviation of the teacher slice; layer
//! losses are summed and the batch loss is the mean over samples.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorBundle;
use crate::compressor::{CompressionConfig, Compressor, CompressorParams};
use crate::error::{Error, Result};
use crate::segmenter::{segment, SegmentationConfig, TokenId};
use crate::tensor::{Float, Mat};
use crate::tinylm::ModelParams;

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerSource {
    TeacherGenerated,
    DatasetProvided,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillSample {
    pub context_tokens: Vec<TokenId>,
    pub instruction_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    pub answer_source: AnswerSource,
}

impl DistillSample {
    pub fn total_len(&self) -> usize {
        self.context_tokens.len() + self.instruction_tokens.len() + self.answer_tokens.len()
    }

    fn validate(&self) -> Result<()> {
        if self.context_tokens.is_empty() || self.instruction_tokens.is_empty() || self.answer_tokens.is_empty() {
            return Err(Error::input("distillation samples need nonempty context, instruction and answer"));
        }
        Ok(())
    }
}

/// Answer-slice hidden states, one `|A| × d` matrix per layer, with the
/// per-layer population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations<T = f32> {
    pub layers: Vec<Mat<T>>,
    pub sigma: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Cap on teacher-generated answers.
    pub max_answer_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 1e-4,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_answer_tokens: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn smooth_l1<T: Float>(u: T, v: T, beta: T) -> T {
    let r = (u - v).abs();
    if r < beta {
        T::lit(0.5) * r * r / beta
    } else {
        r - T::lit(0.5) * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `u`.
pub fn smooth_l1_grad<T: Float>(u: T, v: T, beta: T) -> T {
    let r = u - v;
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}

/// Population standard deviation over every entry, floored at `SIGMA_FLOOR`.
pub fn population_std<T: Float>(m: &Mat<T>) -> T {
    let n = m.data().len();
    if n == 0 {
        return T::lit(SIGMA_FLOOR);
    }
    let nf = T::lit(n as f64);
    let mean = m.data().iter().copied().sum::<T>() / nf;
    let var = m.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
    var.sqrt().max(T::lit(SIGMA_FLOOR))
}

fn check_shapes<T: Float>(student: &Mat<T>, teacher: &Mat<T>) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    Ok(())
}

/// `(1/σ) · mean SmoothL1_β(student, teacher)` over all entries.
pub fn layer_loss<T: Float>(student: &Mat<T>, teacher: &Mat<T>, sigma: T, beta: T) -> Result<T> {
    check_shapes(student, teacher)?;
    let n = T::lit(student.data().len().max(1) as f64);
    let sum = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&s, &t)| smooth_l1(s, t, beta))
        .sum::<T>();
    Ok(sum / n / sigma)
}

/// Gradient of [`layer_loss`] with respect to `student`; σ is a constant.
pub fn layer_loss_grad<T: Float>(student: &Mat<T>, teacher: &Mat<T>, sigma: T, beta: T) -> Result<Mat<T>> {
    check_shapes(student, teacher)?;
    let coef = T::one() / (T::lit(student.data().len().max(1) as f64) * sigma);
    let data = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&s, &t)| smooth_l1_grad(s, t, beta) * coef)
        .collect();
    Ok(Mat::from_vec(student.rows(), student.cols(), data))
}

/// Σ over layers of the teacher-normalised layer loss.
pub fn total_loss<T: Float>(student: &LayerActivations<T>, teacher: &LayerActivations<T>, beta: T) -> Result<T> {
    if student.layers.len() != teacher.layers.len() {
        return Err(Error::Shape("student and teacher layer counts differ".into()));
    }
    let mut total = T::zero();
    for ((s, t), &sigma) in student.layers.iter().zip(&teacher.layers).zip(&teacher.sigma) {
        total += layer_loss(s, t, sigma, beta)?;
    }
    Ok(total)
}

fn answer_slice<T: Float>(hidden: Vec<Mat<T>>, answer_len: usize) -> LayerActivations<T> {
    let layers: Vec<Mat<T>> = hidden
        .into_iter()
        .map(|h| h.slice_rows(h.rows() - answer_len, h.rows()))
        .collect();
    let sigma = layers.iter().map(population_std).collect();
    LayerActivations { layers, sigma }
}

/// Base-model hidden states over `[TE(c); TE(x); TE(y)]`, restricted to the
/// answer positions.
pub fn teacher_pass<T: Float>(model: &ModelParams<T>, sample: &DistillSample) -> Result<LayerActivations<T>> {
    sample.validate()?;
    let ids: Vec<TokenId> = sample
        .context_tokens
        .iter()
        .chain(&sample.instruction_tokens)
        .chain(&sample.answer_tokens)
        .copied()
        .collect();
    let hidden = model.forward_hidden(&model.embed(&ids)?)?;
    Ok(answer_slice(hidden, sample.answer_tokens.len()))
}

/// Shared state for student passes.
pub struct DistillContext<'a, T = f32> {
    pub model: &'a ModelParams<T>,
    pub compression: CompressionConfig,
    pub segmentation: SegmentationConfig,
}

impl<'a, T: Float> DistillContext<'a, T> {
    pub fn new(model: &'a ModelParams<T>, compression: CompressionConfig) -> Self {
        let segmentation = compression.segmentation();
        Self {
            model,
            compression,
            segmentation,
        }
    }

    fn student_input(&self, compressor: &Compressor<'_, T>, sample: &DistillSample) -> Result<Mat<T>> {
        let (ces, _) = compressor.compress_context(&sample.context_tokens, &self.segmentation)?;
        let mut parts: Vec<Mat<T>> = ces.into_iter().map(|c| c.concept_embeddings).collect();
        parts.push(self.model.embed(&sample.instruction_tokens)?);
        parts.push(self.model.embed(&sample.answer_tokens)?);
        let refs: Vec<&Mat<T>> = parts.iter().collect();
        Ok(Mat::vstack(&refs, self.model.config.hidden_dim))
    }

    /// The student's input sequence `[CE(c); TE(x); TE(y)]`.
    pub fn student_sequence(&self, params: &CompressorParams<T>, sample: &DistillSample) -> Result<Mat<T>> {
        sample.validate()?;
        let compressor = Compressor::new(self.model, params, self.compression)?;
        self.student_input(&compressor, sample)
    }

    /// Base-model hidden states over `[CE(c); TE(x); TE(y)]`, restricted to
    /// the answer positions.
    pub fn student_pass(&self, params: &CompressorParams<T>, sample: &DistillSample) -> Result<LayerActivations<T>> {
        sample.validate()?;
        let compressor = Compressor::new(self.model, params, self.compression)?;
        let input = self.student_input(&compressor, sample)?;
        let hidden = self.model.forward_hidden(&input)?;
        Ok(answer_slice(hidden, sample.answer_tokens.len()))
    }

    pub fn sample_loss(&self, params: &CompressorParams<T>, sample: &DistillSample, beta: f64) -> Result<T> {
        let teacher = teacher_pass(self.model, sample)?;
        let student = self.student_pass(params, sample)?;
        total_loss(&student, &teacher, T::lit(beta))
    }

    /// Loss of one sample and its gradient with respect to every compressor
    /// parameter.
    pub fn loss_and_grad(
        &self,
        params: &CompressorParams<T>,
        sample: &DistillSample,
        teacher: &LayerActivations<T>,
        beta: f64,
    ) -> Result<(T, CompressorParams<T>)> {
        sample.validate()?;
        let beta = T::lit(beta);
        let compressor = Compressor::new(self.model, params, self.compression)?;
        let segments = segment(&sample.context_tokens, &self.segmentation)?;
        let taped: Vec<_> = segments
            .par_iter()
            .map(|s| compressor.compress_segment_taped(s))
            .collect::<Result<_>>()?;

        let d = self.model.config.hidden_dim;
        let question = self.model.embed(&sample.instruction_tokens)?;
        let answer = self.model.embed(&sample.answer_tokens)?;
        let mut parts: Vec<&Mat<T>> = taped.iter().map(|(ce, _)| ce).collect();
        parts.push(&question);
        parts.push(&answer);
        let input = Mat::vstack(&parts, d);

        let run = self.model.run(&input, None, None, true)?;
        let n = input.rows();
        let a = sample.answer_tokens.len();
        let mut loss = T::zero();
        let mut d_hidden = Vec::with_capacity(run.hidden.len());
        for ((h, t), &sigma) in run.hidden.iter().zip(&teacher.layers).zip(&teacher.sigma) {
            let s = h.slice_rows(n - a, n);
            loss += layer_loss(&s, t, sigma, beta)?;
            let g = layer_loss_grad(&s, t, sigma, beta)?;
            let mut full = Mat::zeros(n, d);
            full.data_mut()[(n - a) * d..].copy_from_slice(g.data());
            d_hidden.push(Some(full));
        }
        let (d_input, _) = self.model.backward(run.tape.as_ref().expect("recorded"), None, &d_hidden);

        let mut grads = params.zeros_like();
        let mut row = 0;
        for (ce, tape) in &taped {
            let d_ce = d_input.slice_rows(row, row + ce.rows());
            compressor.backward_segment(tape, &d_ce, &mut grads);
            row += ce.rows();
        }
        Ok((loss, grads))
    }
}

/// Adam moment buffers shaped like the compressor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: CompressorParams<T>,
    pub v: CompressorParams<T>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &CompressorParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut CompressorParams<T>, grads: &CompressorParams<T>, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = T::lit(cfg.learning_rate);
        let eps = T::lit(cfg.adam_eps);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let g_all = grads.named_tensors();
        for ((((_, p), (_, m)), (_, v)), (_, _, g)) in params
            .named_tensors_mut()
            .into_iter()
            .zip(self.m.named_tensors_mut())
            .zip(self.v.named_tensors_mut())
            .zip(g_all)
        {
            for i in 0..p.len() {
                m[i] = b1t * m[i] + (T::one() - b1t) * g[i];
                v[i] = b2t * v[i] + (T::one() - b2t) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub used: usize,
}

/// One optimisation step: mean loss over the batch, backprop into the
/// compressor parameters only, Adam update. The base model is borrowed
/// immutably and cannot change.
pub fn train_step(
    ctx: &DistillContext<'_, f32>,
    params: &mut CompressorParams<f32>,
    opt: &mut AdamState<f32>,
    batch: &[(&DistillSample, &LayerActivations<f32>)],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::input("empty training batch"));
    }
    let results: Vec<(f32, CompressorParams<f32>)> = batch
        .par_iter()
        .map(|(s, t)| ctx.loss_and_grad(params, s, t, cfg.beta))
        .collect::<Result<_>>()?;
    let scale = 1.0 / results.len() as f32;
    let mut grads = params.zeros_like();
    let mut loss = 0.0f64;
    for (l, g) in &results {
        loss += *l as f64;
        for ((_, dst), (_, _, src)) in grads.named_tensors_mut().into_iter().zip(g.named_tensors()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b * scale;
            }
        }
    }
    loss /= results.len() as f64;
    if !loss.is_finite() || !grads.all_finite() {
        let per_sample: Vec<f32> = results.iter().map(|(l, _)| *l).collect();
        return Err(Error::NonFiniteLoss {
            step: opt.t,
            detail: format!("per-sample losses {per_sample:?}"),
        });
    }
    opt.update(params, &grads, cfg);
    Ok(StepOutcome {
        loss,
        used: results.len(),
    })
}

/// Greedy teacher answer over `[TE(c); TE(x)]`. `None` when generation
/// produces nothing (immediate EOS); such samples are skipped.
pub fn generate_answer<T: Float>(
    model: &ModelParams<T>,
    context: &[TokenId],
    instruction: &[TokenId],
    max_len: usize,
) -> Result<Option<Vec<TokenId>>> {
    let ids: Vec<TokenId> = context.iter().chain(instruction).copied().collect();
    let g = model.generate(&model.embed(&ids)?, max_len)?;
    if g.tokens.is_empty() {
        warn!("teacher produced an empty answer; skipping sample");
        return Ok(None);
    }
    Ok(Some(g.tokens))
}

/// Fills teacher-generated answers and drops samples whose answer is empty.
pub fn prepare_samples(
    model: &ModelParams<f32>,
    samples: Vec<DistillSample>,
    max_answer_tokens: usize,
) -> Result<Vec<DistillSample>> {
    let prepared: Vec<Option<DistillSample>> = samples
        .into_par_iter()
        .map(|mut s| -> Result<Option<DistillSample>> {
            match s.answer_source {
                AnswerSource::DatasetProvided => Ok((!s.answer_tokens.is_empty()).then_some(s)),
                AnswerSource::TeacherGenerated => {
                    match generate_answer(model, &s.context_tokens, &s.instruction_tokens, max_answer_tokens)? {
                        Some(a) => {
                            s.answer_tokens = a;
                            Ok(Some(s))
                        }
                        None => Ok(None),
                    }
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(prepared.into_iter().flatten().collect())
}

/// Sample indices for `step`: consecutive slices of per-epoch permutations,
/// so any step's batch is reproducible from `(seed, step)` alone.
pub fn batch_indices(step: u64, n: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let epoch = pos / n as u64;
        let within = (pos % n as u64) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[within]);
    }
    out
}

/// Compressor parameters, optimiser state and step counter; everything a
/// resumed run needs to continue bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: CompressorParams<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: CompressorParams<f32>) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, step: 0 }
    }

    pub fn to_bundle(&self, base_digest: &str) -> TensorBundle {
        let mut b = self.params.to_bundle();
        b.meta.insert("step".into(), self.step.to_string());
        b.meta.insert("adam_t".into(), self.adam.t.to_string());
        b.meta.insert("base_digest".into(), base_digest.to_string());
        for (prefix, st) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, shape, data) in st.named_tensors() {
                b.push(format!("{prefix}{name}"), shape, data);
            }
        }
        b
    }

    /// Restores a state; optimiser moments default to zero when absent, as in
    /// a checkpoint written by something other than the trainer.
    pub fn from_bundle(bundle: &TensorBundle, model: &ModelParams<f32>) -> Result<Self> {
        if let Some(d) = bundle.meta.get("base_digest") {
            if *d != model.digest() {
                return Err(Error::input("checkpoint was trained against a different base model"));
            }
        }
        let params = CompressorParams::from_bundle(bundle, &model.config)?;
        let mut adam = AdamState::new(&params);
        let parse = |k: &str| bundle.meta.get(k).and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        adam.t = parse("adam_t");
        for (prefix, st) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            for (name, dst) in st.named_tensors_mut() {
                let full = format!("{prefix}{name}");
                if bundle.get(&full).is_some() {
                    bundle.load_into(&full, dst)?;
                }
            }
        }
        Ok(Self {
            params,
            adam,
            step: parse("step"),
        })
    }
}

/// Owns a corpus with precomputed teacher activations and steps through it.
pub struct Trainer<'a> {
    pub ctx: DistillContext<'a, f32>,
    pub config: TrainConfig,
    samples: Vec<DistillSample>,
    teachers: Vec<LayerActivations<f32>>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ctx: DistillContext<'a, f32>,
        config: TrainConfig,
        samples: Vec<DistillSample>,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        let samples = prepare_samples(ctx.model, samples, config.max_answer_tokens)?;
        if samples.is_empty() {
            return Err(Error::input("training corpus has no usable samples"));
        }
        let teachers = samples
            .par_iter()
            .map(|s| teacher_pass(ctx.model, s))
            .collect::<Result<_>>()?;
        Ok(Self {
            ctx,
            config,
            samples,
            teachers,
            state,
        })
    }

    pub fn samples(&self) -> &[DistillSample] {
        &self.samples
    }

    pub fn teachers(&self) -> &[LayerActivations<f32>] {
        &self.teachers
    }

    fn batch(&self, step: u64) -> Vec<(&DistillSample, &LayerActivations<f32>)> {
        batch_indices(step, self.samples.len(), self.config.batch_size, self.config.seed)
            .into_iter()
            .map(|i| (&self.samples[i], &self.teachers[i]))
            .collect()
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let step = self.state.step;
        let batch: Vec<(&DistillSample, &LayerActivations<f32>)> = batch_indices(
            step,
            self.samples.len(),
            self.config.batch_size,
            self.config.seed,
        )
        .into_iter()
        .map(|i| (&self.samples[i], &self.teachers[i]))
        .collect();
        let out = train_step(
            &self.ctx,
            &mut self.state.params,
            &mut self.state.adam,
            &batch,
            &self.config,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
            other => other,
        })?;
        self.state.step += 1;
        Ok(out)
    }

    /// Mean total loss over the whole corpus under the current parameters.
    pub fn corpus_loss(&self) -> Result<f64> {
        let losses: Vec<f32> = self
            .samples
            .par_iter()
            .zip(&self.teachers)
            .map(|(s, t)| {
                let st = self.ctx.student_pass(&self.state.params, s)?;
                total_loss(&st, t, self.config.beta as f32)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64)
    }

    /// Loss of the batch scheduled for `step`, without updating anything.
    pub fn batch_loss(&self, step: u64) -> Result<f64> {
        let batch = self.batch(step);
        let losses: Vec<f32> = batch
            .par_iter()
            .map(|(s, t)| {
                let st = self.ctx.student_pass(&self.state.params, s)?;
                total_loss(&st, t, self.config.beta as f32)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// Answer-slice residuals in the quadratic (`|r| < β`) and linear branches.
    pub quadratic_residuals: usize,
    pub linear_residuals: usize,
}

/// Central finite differences on `n_entries` randomly chosen compressor
/// parameters against the analytic gradient, in `f64`.
pub fn grad_check(
    ctx: &DistillContext<'_, f64>,
    params: &CompressorParams<f64>,
    sample: &DistillSample,
    beta: f64,
    epsilon: f64,
    n_entries: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let teacher = teacher_pass(ctx.model, sample)?;
    let (_, grads) = ctx.loss_and_grad(params, sample, &teacher, beta)?;
    let student = ctx.student_pass(params, sample)?;
    let (mut quadratic, mut linear) = (0, 0);
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        for (&a, &b) in s.data().iter().zip(t.data()) {
            if (a - b).abs() < beta {
                quadratic += 1;
            } else {
                linear += 1;
            }
        }
    }

    let analytic: Vec<Vec<f64>> = grads.named_tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss_at = |p: &CompressorParams<f64>| -> Result<f64> {
        let st = ctx.student_pass(p, sample)?;
        total_loss(&st, &teacher, beta)
    };
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_entries {
        let ti = rng.gen_range(0..analytic.len());
        let k = rng.gen_range(0..analytic[ti].len());
        let mut plus = params.clone();
        plus.named_tensors_mut()[ti].1[k] += epsilon;
        let mut minus = params.clone();
        minus.named_tensors_mut()[ti].1[k] -= epsilon;
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * epsilon);
        let a = analytic[ti][k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        entries_checked: n_entries,
        quadratic_residuals: quadratic,
        linear_residuals: linear,
    })
}
