//! Synthetic key-value retrieval corpora and exact-match evaluation.
//!
//! Each context hides `n_facts` sentences of the form `key K is V.` among
//! filler sentences; the question asks for one key's value.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cecache::CeCache;
use crate::compressor::{CompressionConfig, CompressorParams};
use crate::distill::{AnswerSource, DistillSample};
use crate::error::{Error, Result};
use crate::pipeline::{answer, InferenceRequest};
use crate::segmenter::{Tokenizer, SEP};
use crate::tinylm::ModelParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_facts: usize,
    pub filler_sentences_per_fact: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub key_alphabet: String,
    pub value_alphabet: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 64,
            n_facts: 3,
            filler_sentences_per_fact: 2,
            key_len: 4,
            value_len: 4,
            key_alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
            value_alphabet: "0123456789".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_facts == 0 {
            return Err(Error::Config("n_facts must be at least 1".into()));
        }
        if self.key_len == 0 || self.value_len == 0 {
            return Err(Error::Config("key_len and value_len must be positive".into()));
        }
        if self.key_alphabet.is_empty() || self.value_alphabet.is_empty() {
            return Err(Error::Config("alphabets must be nonempty".into()));
        }
        let distinct: HashSet<char> = self.key_alphabet.chars().collect();
        let possible = (distinct.len() as f64).powi(self.key_len as i32);
        if possible < self.n_facts as f64 {
            return Err(Error::Config("key space too small for unique keys".into()));
        }
        Ok(())
    }
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub context: String,
    pub question: String,
    pub answer: String,
    /// Ordinal of the queried fact among the context's facts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_position: Option<usize>,
}

impl CorpusRecord {
    /// Instruction tokens wrap the question in separator tokens so the answer
    /// follows a fixed delimiter.
    pub fn instruction_tokens(&self) -> Vec<u32> {
        let mut ids = vec![SEP];
        ids.extend(Tokenizer.encode_str(&self.question));
        ids.push(SEP);
        ids
    }

    pub fn to_distill_sample(&self, source: AnswerSource) -> DistillSample {
        DistillSample {
            context_tokens: Tokenizer.encode_str(&self.context),
            instruction_tokens: self.instruction_tokens(),
            answer_tokens: match source {
                AnswerSource::DatasetProvided => Tokenizer.encode_str(&self.answer),
                AnswerSource::TeacherGenerated => Vec::new(),
            },
            answer_source: source,
        }
    }
}

const SUBJECTS: &[&str] = &[
    "the old sailor", "a quiet student", "the red fox", "my neighbour", "the tired baker",
    "a small robot", "the city council", "an eager child", "the night guard", "a travelling poet",
];
const VERBS: &[&str] = &[
    "walked past", "painted", "forgot about", "admired", "repaired", "counted", "visited",
    "described", "ignored", "photographed",
];
const OBJECTS: &[&str] = &[
    "the harbour", "a wooden fence", "the morning market", "an empty bench", "the stone bridge",
    "a crowded library", "the garden wall", "a broken clock", "the river bank", "a paper lantern",
];
const TAILS: &[&str] = &[
    "before sunrise", "after the storm", "without a word", "on a rainy day", "for no reason",
    "with great care", "during lunch", "in the evening",
];

fn filler(rng: &mut ChaCha8Rng) -> String {
    let s = SUBJECTS.choose(rng).expect("nonempty");
    let v = VERBS.choose(rng).expect("nonempty");
    let o = OBJECTS.choose(rng).expect("nonempty");
    let mut sentence = format!("{s} {v} {o}");
    if rng.gen_bool(0.5) {
        sentence.push(' ');
        sentence.push_str(TAILS.choose(rng).expect("nonempty"));
    }
    let mut chars = sentence.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or(' ');
    format!("{first}{}.", chars.as_str())
}

fn random_word(rng: &mut ChaCha8Rng, alphabet: &[char], len: usize) -> String {
    (0..len).map(|_| *alphabet.choose(rng).expect("nonempty")).collect()
}

pub fn fact_sentence(key: &str, value: &str) -> String {
    format!("key {key} is {value}.")
}

pub fn question_for(key: &str) -> String {
    format!("what is {key}?")
}

/// Deterministic per seed.
pub fn make_corpus(spec: &SyntheticSpec) -> Result<Vec<CorpusRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let key_chars: Vec<char> = spec.key_alphabet.chars().collect();
    let value_chars: Vec<char> = spec.value_alphabet.chars().collect();
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut keys = Vec::with_capacity(spec.n_facts);
        let mut used = HashSet::new();
        while keys.len() < spec.n_facts {
            let k = random_word(&mut rng, &key_chars, spec.key_len);
            if used.insert(k.clone()) {
                keys.push(k);
            }
        }
        let values: Vec<String> = (0..spec.n_facts)
            .map(|_| random_word(&mut rng, &value_chars, spec.value_len))
            .collect();

        // (sentence, fact index) with fillers tagged None
        let mut sentences: Vec<(String, Option<usize>)> = keys
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(i, (k, v))| (fact_sentence(k, v), Some(i)))
            .collect();
        for _ in 0..spec.n_facts * spec.filler_sentences_per_fact {
            sentences.push((filler(&mut rng), None));
        }
        sentences.shuffle(&mut rng);

        let target = rng.gen_range(0..spec.n_facts);
        let fact_position = sentences
            .iter()
            .filter_map(|(_, f)| *f)
            .position(|f| f == target)
            .expect("target fact present");
        let context = sentences
            .iter()
            .map(|(s, _)| s.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        out.push(CorpusRecord {
            context,
            question: question_for(&keys[target]),
            answer: values[target].clone(),
            fact_position: Some(fact_position),
        });
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(records: &[CorpusRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses line-delimited JSON records; blank lines are ignored.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::input(format!("corpus line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::input(format!("corpus line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Compressed,
    Uncompressed,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Compressed => "compressed",
            Variant::Uncompressed => "uncompressed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub variant: Variant,
    pub samples: usize,
    pub exact_match_rate: f64,
    /// fact position → (correct, total)
    pub per_position: BTreeMap<usize, (usize, usize)>,
    /// Sum of compression attention pairs across all samples.
    pub compression_pairs: u64,
    /// Generated answers, in corpus order.
    pub predictions: Vec<String>,
}

impl EvalResult {
    pub fn position_accuracy(&self) -> BTreeMap<usize, f64> {
        self.per_position
            .iter()
            .map(|(&p, &(c, t))| (p, c as f64 / t.max(1) as f64))
            .collect()
    }
}

pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub struct EvalSetup<'a> {
    pub model: &'a ModelParams<f32>,
    pub params: &'a CompressorParams<f32>,
    pub compression: CompressionConfig,
    /// Tokens to generate per answer.
    pub max_new_tokens: usize,
}

/// Greedy generation per sample, exact match after whitespace normalisation.
pub fn evaluate(
    setup: &EvalSetup<'_>,
    corpus: &[CorpusRecord],
    variant: Variant,
    cache: Option<&CeCache>,
) -> Result<EvalResult> {
    let outputs: Vec<(String, u64)> = corpus
        .par_iter()
        .map(|r| -> Result<(String, u64)> {
            let req = InferenceRequest {
                context_tokens: Tokenizer.encode_str(&r.context),
                question_tokens: r.instruction_tokens(),
                use_compression: variant == Variant::Compressed,
                max_new_tokens: setup.max_new_tokens,
                stop_at_eos: true,
            };
            let (text, report) = answer(setup.model, setup.params, &setup.compression, &req, cache)?;
            Ok((text, report.compression_pairs))
        })
        .collect::<Result<_>>()?;

    let mut per_position: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    let mut compression_pairs = 0;
    let mut predictions = Vec::with_capacity(corpus.len());
    for (r, (text, pairs)) in corpus.iter().zip(outputs) {
        let hit = normalize_answer(&text) == normalize_answer(&r.answer);
        correct += usize::from(hit);
        compression_pairs += pairs;
        let e = per_position.entry(r.fact_position.unwrap_or(0)).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
        predictions.push(text);
    }
    Ok(EvalResult {
        variant,
        samples: corpus.len(),
        exact_match_rate: correct as f64 / corpus.len().max(1) as f64,
        per_position,
        compression_pairs,
        predictions,
    })
}
