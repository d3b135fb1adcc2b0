use cecomp::compressor::{total_ces, CompressionConfig, Compressor, CompressorParams, LoraConfig};
use cecomp::distill::{
    grad_check, prepare_samples, teacher_pass, total_loss, train_step, AdamState, AnswerSource, DistillContext,
    DistillSample, TrainConfig, TrainState, Trainer,
};
use cecomp::evalgen::{make_corpus, SyntheticSpec};
use cecomp::segmenter::{TokenId, Tokenizer, EOS, SEP};
use cecomp::tensor::argmax;
use cecomp::tinylm::{ModelConfig, ModelParams};
use cecomp::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelParams<f32> {
    ModelParams::init(&ModelConfig::tiny(), 0).unwrap()
}

fn corpus_samples(n: usize, seed: u64) -> Vec<DistillSample> {
    make_corpus(&SyntheticSpec {
        n_samples: n,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .iter()
    .map(|r| r.to_distill_sample(AnswerSource::DatasetProvided))
    .collect()
}

fn init_params() -> CompressorParams<f32> {
    CompressorParams::init(&ModelConfig::tiny(), LoraConfig::default(), 1)
}

#[test]
fn short_run_reduces_loss_and_leaves_base_frozen() {
    let model = tiny();
    let digest = model.digest();
    let samples = corpus_samples(8, 5);
    let ctx = DistillContext::new(&model, CompressionConfig::default());
    let mut trainer = Trainer::new(ctx, TrainConfig::default(), samples.clone(), TrainState::new(init_params())).unwrap();
    let start = trainer.corpus_loss().unwrap();
    assert!(start.is_finite() && start > 0.0);
    for _ in 0..200 {
        trainer.step().unwrap();
    }
    let end = trainer.corpus_loss().unwrap();
    assert!(end < start, "loss {start} -> {end}");
    assert_eq!(model.digest(), digest);
    for (s, t) in samples.iter().zip(trainer.teachers()) {
        assert_eq!(&teacher_pass(&model, s).unwrap(), t);
    }
}

#[test]
fn identical_runs_follow_identical_trajectories() {
    let model = tiny();
    let run = || {
        let ctx = DistillContext::new(&model, CompressionConfig::default());
        let mut tr = Trainer::new(ctx, TrainConfig::default(), corpus_samples(8, 6), TrainState::new(init_params())).unwrap();
        let losses: Vec<f64> = (0..5).map(|_| tr.step().unwrap().loss).collect();
        (losses, tr.state.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn student_sequence_length_and_answer_slice() {
    let model = tiny();
    let ctx = DistillContext::new(&model, CompressionConfig::default());
    let params = init_params();
    let sample = corpus_samples(1, 9).remove(0);
    let comp = Compressor::new(&model, &params, CompressionConfig::default()).unwrap();
    let (ces, _) = comp
        .compress_context(&sample.context_tokens, &CompressionConfig::default().segmentation())
        .unwrap();
    let student = ctx.student_sequence(&params, &sample).unwrap();
    let teacher_len = sample.total_len();
    assert_eq!(student.rows(), teacher_len - (sample.context_tokens.len() - total_ces(&ces)));

    let hidden = model.forward_hidden(&student).unwrap();
    let acts = ctx.student_pass(&params, &sample).unwrap();
    let a = sample.answer_tokens.len();
    for (h, s) in hidden.iter().zip(&acts.layers) {
        assert_eq!(&h.slice_rows(h.rows() - a, h.rows()), s);
    }
    // at init the CEs differ from the token embeddings, so the loss is positive
    let t = teacher_pass(&model, &sample).unwrap();
    let loss = total_loss(&acts, &t, 1.0).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}

#[test]
fn gradient_check_quadratic_branch() {
    let cfg = ModelConfig::grad_check();
    let model = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let mut params = CompressorParams::<f64>::init(&cfg, LoraConfig::default(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, t) in params.named_tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let ctx = DistillContext::new(
        &model,
        CompressionConfig {
            compression_rate: 2,
            max_segment_tokens: 8,
        },
    );
    let sample = DistillSample {
        context_tokens: Tokenizer.encode(b"Short one. Then a longer clause"),
        instruction_tokens: vec![SEP, b'q' as TokenId, SEP],
        answer_tokens: Tokenizer.encode(b"42"),
        answer_source: AnswerSource::DatasetProvided,
    };
    let report = grad_check(&ctx, &params, &sample, 1.0e3, 1e-5, 60, 8).unwrap();
    assert_eq!(report.linear_residuals, 0);
    assert_eq!(report.entries_checked, 60);
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

#[test]
fn non_finite_parameters_are_reported() {
    let model = tiny();
    let ctx = DistillContext::new(&model, CompressionConfig::default());
    let samples = corpus_samples(2, 1);
    let teachers: Vec<_> = samples.iter().map(|s| teacher_pass(&model, s).unwrap()).collect();
    let mut params = init_params();
    params.head_bias[0] = f32::NAN;
    let mut adam = AdamState::new(&params);
    let batch: Vec<_> = samples.iter().zip(&teachers).collect();
    let err = train_step(&ctx, &mut params, &mut adam, &batch, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn empty_teacher_answers_are_skipped() {
    let mut model = tiny();
    let context = Tokenizer.encode(b"Some context.");
    let silent_instr = vec![SEP, b'q' as TokenId, SEP];
    let ids: Vec<TokenId> = context.iter().chain(&silent_instr).copied().collect();
    let last_logits = |m: &ModelParams<f32>, ids: &[TokenId]| m.prefill(&m.embed(ids).unwrap()).unwrap().last_logits;
    // make EOS the greedy choice for this prefix: its unembedding column
    // becomes twice the winning column
    let logits = last_logits(&model, &ids);
    let best = argmax(&logits);
    assert!(logits[best] > 0.0);
    let vocab = model.config.vocab_size;
    let data = model.unembed.data_mut();
    for k in 0..data.len() / vocab {
        data[k * vocab + EOS as usize] = 2.0 * data[k * vocab + best];
    }
    assert_eq!(argmax(&last_logits(&model, &ids)) as TokenId, EOS);

    let silent = DistillSample {
        context_tokens: context.clone(),
        instruction_tokens: silent_instr,
        answer_tokens: Vec::new(),
        answer_source: AnswerSource::TeacherGenerated,
    };
    assert_eq!(
        cecomp::distill::generate_answer(&model, &silent.context_tokens, &silent.instruction_tokens, 6).unwrap(),
        None
    );
    let chatty = DistillSample {
        instruction_tokens: vec![SEP, b'x' as TokenId, b'y' as TokenId, SEP],
        ..silent.clone()
    };
    let chatty_ids = [context.as_slice(), &chatty.instruction_tokens].concat();
    let chatty_speaks = argmax(&last_logits(&model, &chatty_ids)) as TokenId != EOS;
    let kept = prepare_samples(&model, vec![silent, chatty.clone()], 6).unwrap();
    assert_eq!(kept.len(), usize::from(chatty_speaks));
    if chatty_speaks {
        assert_eq!(kept[0].instruction_tokens, chatty.instruction_tokens);
        assert!(!kept[0].answer_tokens.is_empty() && kept[0].answer_tokens.len() <= 6);
    }
}
