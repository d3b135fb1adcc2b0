//! The compressor: the frozen base model with LoRA adapters and a linear
//! output head. Each segment gets `ceil(len / C)` EOS query slots appended;
//! the head-projected, final-normed outputs at those slots are the segment's
//! concept embeddings (CEs).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{digest_tensors, TensorBundle};
use crate::error::{Error, Result};
use crate::segmenter::{segment, Segment, SegmentationConfig, TokenId, EOS};
use crate::tensor::{Float, Mat};
use crate::tinylm::{rms_norm, rms_norm_backward, LoraAdapters, ModelConfig, ModelParams, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    /// Tokens per concept embedding (`C`).
    pub compression_rate: usize,
    /// Segment cap (`S`), shared with segmentation.
    pub max_segment_tokens: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            compression_rate: 2,
            max_segment_tokens: 20,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.compression_rate == 0 {
            return Err(Error::Config("compression_rate must be at least 1".into()));
        }
        if self.max_segment_tokens < 2 {
            return Err(Error::Config("max_segment_tokens must be at least 2".into()));
        }
        Ok(())
    }

    /// Number of CEs for a segment of `len` tokens.
    pub fn slots_for(&self, len: usize) -> usize {
        len.div_ceil(self.compression_rate)
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig::with_max_tokens(self.max_segment_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

/// The trainable parameters: adapters plus the output head `ce = z · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorParams<T = f32> {
    pub adapters: LoraAdapters<T>,
    /// hidden_dim × hidden_dim
    pub head_weight: Mat<T>,
    pub head_bias: Vec<T>,
}

impl<T: Float> CompressorParams<T> {
    /// Zero `up` matrices and an identity head.
    pub fn init(model: &ModelConfig, lora: LoraConfig, seed: u64) -> Self {
        let d = model.hidden_dim;
        Self {
            adapters: LoraAdapters::seeded(model.n_layers, d, lora.rank, lora.alpha, seed),
            head_weight: Mat::identity(d),
            head_bias: vec![T::zero(); d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.head_bias.len();
        Self {
            adapters: self.adapters.zeros_like(),
            head_weight: Mat::zeros(d, d),
            head_bias: vec![T::zero(); d],
        }
    }

    pub fn cast<U: Float>(&self) -> CompressorParams<U> {
        CompressorParams {
            adapters: self.adapters.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = self.adapters.named_tensors();
        out.push((
            "head.weight".into(),
            vec![self.head_weight.rows(), self.head_weight.cols()],
            self.head_weight.data(),
        ));
        out.push(("head.bias".into(), vec![self.head_bias.len()], &self.head_bias[..]));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = self.adapters.named_tensors_mut();
        out.push(("head.weight".into(), self.head_weight.data_mut()));
        out.push(("head.bias".into(), &mut self.head_bias[..]));
        out
    }

    pub fn digest(&self) -> String {
        digest_tensors(self.named_tensors())
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "compressor".into());
        b.meta.insert("lora_rank".into(), self.adapters.rank.to_string());
        b.meta.insert("lora_alpha".into(), self.adapters.alpha.to_string());
        for (name, shape, data) in self.named_tensors() {
            b.push(name, shape, data);
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle, model: &ModelConfig) -> Result<Self> {
        let field = |k: &str| {
            bundle
                .meta
                .get(k)
                .ok_or_else(|| Error::input(format!("compressor container lacks {k}")))
        };
        let rank: usize = field("lora_rank")?
            .parse()
            .map_err(|_| Error::input("bad lora_rank"))?;
        let alpha: f64 = field("lora_alpha")?
            .parse()
            .map_err(|_| Error::input("bad lora_alpha"))?;
        let mut p = Self::init(model, LoraConfig { rank, alpha }, 0);
        for (name, dst) in p.named_tensors_mut() {
            bundle.load_into(&name, dst)?;
        }
        Ok(p)
    }
}

/// The CEs of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSegment<T = f32> {
    /// `ceil(len / C)` × hidden_dim
    pub concept_embeddings: Mat<T>,
    /// Hex digest of (token ids, compressor version, C); doubles as cache key.
    pub source_hash: String,
}

impl<T: Float> CompressedSegment<T> {
    pub fn len(&self) -> usize {
        self.concept_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "concept_embeddings".into());
        b.meta.insert("source_hash".into(), self.source_hash.clone());
        let ce = &self.concept_embeddings;
        b.push("concept_embeddings", vec![ce.rows(), ce.cols()], ce.data());
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let source_hash = bundle
            .meta
            .get("source_hash")
            .cloned()
            .ok_or_else(|| Error::input("CE container lacks source_hash"))?;
        let t = bundle
            .get("concept_embeddings")
            .ok_or_else(|| Error::input("CE container lacks concept_embeddings"))?;
        if t.shape.len() != 2 {
            return Err(Error::Shape("concept_embeddings must be 2-D".into()));
        }
        let mut m = Mat::zeros(t.shape[0], t.shape[1]);
        bundle.load_into("concept_embeddings", m.data_mut())?;
        Ok(Self {
            concept_embeddings: m,
            source_hash,
        })
    }
}

/// Key shared by [`CompressedSegment::source_hash`] and the CE cache:
/// SHA-256 over the little-endian token ids, the compressor version digest
/// and the compression rate.
pub fn segment_key(token_ids: &[TokenId], version: &str, compression_rate: usize) -> String {
    let mut h = Sha256::new();
    h.update((token_ids.len() as u64).to_le_bytes());
    for id in token_ids {
        h.update(id.to_le_bytes());
    }
    h.update(version.as_bytes());
    h.update((compression_rate as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Everything a segment's backward pass needs.
pub(crate) struct SegmentTape<T> {
    tape: Tape<T>,
    len: usize,
    last_hidden: Mat<T>,
    slot_hidden: Mat<T>,
    slot_inv: Vec<T>,
    slot_normed: Mat<T>,
}

/// A base model bound to a set of compressor parameters.
pub struct Compressor<'a, T = f32> {
    pub model: &'a ModelParams<T>,
    pub params: &'a CompressorParams<T>,
    pub config: CompressionConfig,
    version: String,
}

impl<'a, T: Float> Compressor<'a, T> {
    pub fn new(model: &'a ModelParams<T>, params: &'a CompressorParams<T>, config: CompressionConfig) -> Result<Self> {
        config.validate()?;
        let d = model.config.hidden_dim;
        if params.head_weight.shape() != (d, d) || params.adapters.layers.len() != model.config.n_layers {
            return Err(Error::Shape("compressor parameters do not fit the base model".into()));
        }
        let mut h = Sha256::new();
        h.update(model.digest().as_bytes());
        h.update(params.digest().as_bytes());
        Ok(Self {
            model,
            params,
            config,
            version: hex::encode(h.finalize()),
        })
    }

    /// Digest over base and compressor weights; changes whenever either does.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn key(&self, token_ids: &[TokenId]) -> String {
        segment_key(token_ids, &self.version, self.config.compression_rate)
    }

    fn query_input(&self, seg: &Segment) -> Result<(Mat<T>, usize)> {
        let len = seg.len();
        if len == 0 || len > self.config.max_segment_tokens {
            return Err(Error::input(format!(
                "segment of {len} tokens outside 1..={}",
                self.config.max_segment_tokens
            )));
        }
        let slots = self.config.slots_for(len);
        let mut ids = seg.token_ids.clone();
        ids.extend(std::iter::repeat_n(EOS, slots));
        Ok((self.model.embed(&ids)?, slots))
    }

    fn head(&self, normed: &Mat<T>) -> Mat<T> {
        let mut ce = normed.matmul(&self.params.head_weight);
        for i in 0..ce.rows() {
            for (v, &b) in ce.row_mut(i).iter_mut().zip(&self.params.head_bias) {
                *v += b;
            }
        }
        ce
    }

    /// Compresses one segment, with segment-local positions starting at 0.
    /// Returns the CEs and the attention-pair count of the adapted pass.
    pub fn compress_segment(&self, seg: &Segment) -> Result<(CompressedSegment<T>, u64)> {
        let (input, slots) = self.query_input(seg)?;
        let run = self.model.run(&input, Some(&self.params.adapters), None, false)?;
        let last = run.hidden.last().expect("at least one layer");
        let slot_hidden = last.slice_rows(seg.len(), seg.len() + slots);
        let (normed, _) = rms_norm(&slot_hidden, &self.model.final_norm);
        Ok((
            CompressedSegment {
                concept_embeddings: self.head(&normed),
                source_hash: self.key(&seg.token_ids),
            },
            run.pairs,
        ))
    }

    /// Segments `token_ids` and compresses every segment independently, in
    /// order. Returns the segments' CEs and the summed attention-pair count.
    pub fn compress_context(
        &self,
        token_ids: &[TokenId],
        seg_cfg: &SegmentationConfig,
    ) -> Result<(Vec<CompressedSegment<T>>, u64)> {
        let segments = segment(token_ids, seg_cfg)?;
        self.compress_segments(&segments)
    }

    pub fn compress_segments(&self, segments: &[Segment]) -> Result<(Vec<CompressedSegment<T>>, u64)> {
        let results: Vec<Result<(CompressedSegment<T>, u64)>> =
            segments.par_iter().map(|s| self.compress_segment(s)).collect();
        let mut out = Vec::with_capacity(segments.len());
        let mut pairs = 0;
        for r in results {
            let (c, p) = r?;
            pairs += p;
            out.push(c);
        }
        Ok((out, pairs))
    }

    pub(crate) fn compress_segment_taped(&self, seg: &Segment) -> Result<(Mat<T>, SegmentTape<T>)> {
        let (input, slots) = self.query_input(seg)?;
        let run = self.model.run(&input, Some(&self.params.adapters), None, true)?;
        let last_hidden = run.hidden.last().expect("at least one layer").clone();
        let slot_hidden = last_hidden.slice_rows(seg.len(), seg.len() + slots);
        let (slot_normed, slot_inv) = rms_norm(&slot_hidden, &self.model.final_norm);
        let ce = self.head(&slot_normed);
        Ok((
            ce,
            SegmentTape {
                tape: run.tape.expect("recorded"),
                len: seg.len(),
                last_hidden,
                slot_hidden,
                slot_inv,
                slot_normed,
            },
        ))
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose gradient
    /// with respect to this segment's CEs is `d_ce`.
    pub(crate) fn backward_segment(&self, tape: &SegmentTape<T>, d_ce: &Mat<T>, grads: &mut CompressorParams<T>) {
        grads.head_weight.add_assign(&tape.slot_normed.t_matmul(d_ce));
        for i in 0..d_ce.rows() {
            for (g, &v) in grads.head_bias.iter_mut().zip(d_ce.row(i)) {
                *g += v;
            }
        }
        let d_normed = d_ce.matmul_t(&self.params.head_weight);
        let d_slot = rms_norm_backward(&d_normed, &tape.slot_hidden, &tape.slot_inv, &self.model.final_norm);

        let d = self.model.config.hidden_dim;
        let mut d_last = Mat::zeros(tape.last_hidden.rows(), d);
        for i in 0..d_slot.rows() {
            d_last.row_mut(tape.len + i).copy_from_slice(d_slot.row(i));
        }
        let n_layers = self.model.config.n_layers;
        let mut d_hidden: Vec<Option<Mat<T>>> = (0..n_layers).map(|_| None).collect();
        d_hidden[n_layers - 1] = Some(d_last);
        let (_, lora_grads) = self.model.backward(&tape.tape, Some(&self.params.adapters), &d_hidden);
        let lora_grads = lora_grads.expect("adapters active");
        for ((_, dst), (_, _, src)) in grads
            .adapters
            .named_tensors_mut()
            .into_iter()
            .zip(lora_grads.named_tensors())
        {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

/// Concept-embedding rows of every segment, in order, followed by the
/// question's token embeddings.
pub fn effective_sequence<T: Float>(
    model: &ModelParams<T>,
    ces: &[CompressedSegment<T>],
    question_token_ids: &[TokenId],
) -> Result<Mat<T>> {
    let question = model.embed(question_token_ids)?;
    let mut parts: Vec<&Mat<T>> = ces.iter().map(|c| &c.concept_embeddings).collect();
    parts.push(&question);
    Ok(Mat::vstack(&parts, model.config.hidden_dim))
}

pub fn total_ces<T: Float>(ces: &[CompressedSegment<T>]) -> usize {
    ces.iter().map(CompressedSegment::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::Tokenizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams<f32>, CompressorParams<f32>) {
        let cfg = ModelConfig::grad_check();
        (
            ModelParams::init(&cfg, 1).unwrap(),
            CompressorParams::init(&cfg, LoraConfig::default(), 2),
        )
    }

    fn seg(ids: &[TokenId]) -> Segment {
        Segment {
            token_ids: ids.to_vec(),
            origin_span: (0, ids.len()),
        }
    }

    fn perturbed(p: &CompressorParams<f32>, seed: u64) -> CompressorParams<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = p.clone();
        for (_, t) in q.named_tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        q
    }

    #[test]
    fn ce_counts_follow_ceil_rule() {
        let (m, p) = setup();
        let c = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let (full, pairs) = c.compress_segment(&seg(&[b'a' as TokenId; 20])).unwrap();
        assert_eq!(full.len(), 10);
        assert_eq!(pairs, 30 * 31 / 2);
        let (one, _) = c.compress_segment(&seg(&[b'a' as TokenId])).unwrap();
        assert_eq!(one.len(), 1);
        assert!(full.concept_embeddings.is_finite());
        assert!(c.compress_segment(&seg(&[1; 21])).is_err());
        assert!(c.compress_segment(&seg(&[])).is_err());
    }

    #[test]
    fn zero_init_ces_are_final_normed_base_states() {
        let (m, p) = setup();
        let c = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let ids = Tokenizer.encode(b"A short one.");
        let (ce, _) = c.compress_segment(&seg(&ids)).unwrap();
        let mut input_ids = ids.clone();
        input_ids.extend([EOS; 6]);
        let trace = m.forward(&m.embed(&input_ids).unwrap()).unwrap();
        let last = trace.hidden_states.last().unwrap();
        let (normed, _) = rms_norm(&last.slice_rows(ids.len(), ids.len() + 6), &m.final_norm);
        assert_eq!(ce.concept_embeddings, normed);
    }

    #[test]
    fn segments_are_independent() {
        let (m, p) = setup();
        let p = perturbed(&p, 3);
        let c = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let cfg = SegmentationConfig::default();
        let a = Tokenizer.encode(b"First sentence here. Second one!");
        let b = Tokenizer.encode(b" And a third sentence follows.");
        let joined: Vec<TokenId> = a.iter().chain(&b).copied().collect();
        let (whole, _) = c.compress_context(&joined, &cfg).unwrap();
        let (mut parts, _) = c.compress_context(&a, &cfg).unwrap();
        parts.extend(c.compress_context(&b, &cfg).unwrap().0);
        assert_eq!(whole, parts);

        let mut changed = joined.clone();
        changed[3] = b'X' as TokenId;
        let (other, _) = c.compress_context(&changed, &cfg).unwrap();
        assert_ne!(other[0], whole[0]);
        assert_eq!(other[1..], whole[1..]);
    }

    #[test]
    fn context_pair_count_for_boundary_free_input() {
        let (m, p) = setup();
        let c = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let ids = vec![b'z' as TokenId; 400];
        let (ces, pairs) = c.compress_context(&ids, &SegmentationConfig::default()).unwrap();
        assert_eq!(ces.len(), 20);
        assert_eq!(total_ces(&ces), 200);
        let per_segment: u64 = (1..=30).sum();
        assert_eq!(per_segment, 465);
        assert_eq!(pairs, 20 * per_segment);
        assert!(pairs <= 400 * (20 + 10));
    }

    #[test]
    fn effective_sequence_lengths() {
        let (m, p) = setup();
        let c = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let q = Tokenizer.encode(b"what is it");
        assert_eq!(effective_sequence(&m, &[], &q).unwrap(), m.embed(&q).unwrap());
        let (ces, _) = c
            .compress_context(&vec![b'z' as TokenId; 400], &SegmentationConfig::default())
            .unwrap();
        let eff = effective_sequence(&m, &ces, &q).unwrap();
        assert_eq!(eff.rows(), 210);
        assert_eq!(eff.row(0), ces[0].concept_embeddings.row(0));
    }

    #[test]
    fn version_tracks_parameters() {
        let (m, p) = setup();
        let q = perturbed(&p, 4);
        let a = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let b = Compressor::new(&m, &q, CompressionConfig::default()).unwrap();
        assert_ne!(a.version(), b.version());
        assert_ne!(a.key(&[1, 2]), b.key(&[1, 2]));
        assert_ne!(segment_key(&[1, 2], a.version(), 2), segment_key(&[1, 2], a.version(), 4));
    }

    #[test]
    fn bundles_round_trip() {
        let (m, p) = setup();
        let p = perturbed(&p, 5);
        let back = CompressorParams::from_bundle(&p.to_bundle(), &m.config).unwrap();
        assert_eq!(back, p);
        let c = Compressor::new(&m, &p, CompressionConfig::default()).unwrap();
        let (ce, _) = c.compress_segment(&seg(&[5, 6, 7])).unwrap();
        assert_eq!(CompressedSegment::from_bundle(&ce.to_bundle()).unwrap(), ce);
    }
}
