use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::{rms_norm, LoraAdapters, ModelParams, ROPE_BASE};
use crate::error::{Error, Result};
use crate::segmenter::{TokenId, EOS};
use crate::tensor::{argmax, dot, Float, Mat};

/// Per-layer hidden states (post-block residual stream) and logits.
///
/// `attention_pairs` counts (query, key) interactions for one layer and one
/// head; every layer and head performs the same number.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub hidden_states: Vec<Mat<T>>,
    pub logits: Mat<T>,
    pub attention_pairs: u64,
}

/// Keys and values for every processed position, per layer. Rows are
/// `n_heads × head_dim` wide, keys already rotated.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    keys: Vec<Mat<T>>,
    values: Vec<Mat<T>>,
    current_len: usize,
}

impl<T: Float> KVCache<T> {
    pub fn new(n_layers: usize, hidden_dim: usize) -> Self {
        Self {
            keys: (0..n_layers).map(|_| Mat::zeros(0, hidden_dim)).collect(),
            values: (0..n_layers).map(|_| Mat::zeros(0, hidden_dim)).collect(),
            current_len: 0,
        }
    }

    pub fn current_len(&self) -> usize {
        self.current_len
    }

    /// Stored scalars: `current_len × n_layers × hidden_dim × 2`.
    pub fn footprint(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|m| m.rows() * m.cols())
            .sum()
    }

    pub fn keys(&self, layer: usize) -> &Mat<T> {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Mat<T> {
        &self.values[layer]
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput<T> {
    pub cache: KVCache<T>,
    pub last_logits: Vec<T>,
    pub attention_pairs: u64,
}

/// Result of greedy decoding. Every emitted token is fed back into the cache,
/// so `cache_len = prefix_len + tokens.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Capacity ran out before `max_new_tokens` or EOS.
    pub truncated: bool,
    pub prefill_pairs: u64,
    pub decode_pairs: u64,
    pub cache_len: usize,
}

/// Wall-clock split of one generation call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenerationTiming {
    pub prefill: Duration,
    pub decode: Duration,
}

pub(crate) struct LayerTape<T> {
    pub x_in: Mat<T>,
    pub inv1: Vec<T>,
    pub xn1: Mat<T>,
    pub uq: Option<Mat<T>>,
    pub uv: Option<Mat<T>>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    /// Row `i` holds `n_heads` consecutive probability vectors of length `i+1`.
    pub probs: Vec<Vec<T>>,
    pub h_mid: Mat<T>,
    pub inv2: Vec<T>,
    pub pre: Mat<T>,
}

/// Activations recorded by a forward pass from position 0, for backprop.
pub(crate) struct Tape<T> {
    pub layers: Vec<LayerTape<T>>,
}

pub(crate) struct RunOutput<T> {
    pub hidden: Vec<Mat<T>>,
    pub pairs: u64,
    pub tape: Option<Tape<T>>,
}

#[inline]
pub(crate) fn silu<T: Float>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad<T: Float>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Rotates interleaved pairs `(2p, 2p+1)` of every head by `pos · θ_p`.
/// `inverse` applies the transpose rotation, used for backprop.
pub(crate) fn rope<T: Float>(m: &mut Mat<T>, pos0: usize, n_heads: usize, inverse: bool) {
    let hd = m.cols() / n_heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| ROPE_BASE.powf(-2.0 * p as f64 / hd as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let rotate = |(i, row): (usize, &mut [T])| {
        let pos = (pos0 + i) as f64;
        for (p, &f) in freqs.iter().enumerate() {
            let (s, c) = (pos * f).sin_cos();
            let (s, c) = (T::lit(sign * s), T::lit(c));
            for h in 0..n_heads {
                let base = h * hd + 2 * p;
                let (a, b) = (row[base], row[base + 1]);
                row[base] = a * c - b * s;
                row[base + 1] = a * s + b * c;
            }
        }
    };
    let cols = m.cols();
    if m.rows() >= 256 {
        m.data_mut().par_chunks_mut(cols).enumerate().for_each(rotate);
    } else {
        m.data_mut().chunks_mut(cols).enumerate().for_each(rotate);
    }
}

/// Causal multi-head attention. Query row `i` sits at absolute position
/// `pos0 + i` and sees keys `0..=pos0+i`.
fn attend<T: Float>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    pos0: usize,
    n_heads: usize,
    record: bool,
) -> (Mat<T>, Vec<Vec<T>>, u64) {
    let d = q.cols();
    let hd = d / n_heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    assert!(k.rows() >= pos0 + q.rows(), "attention keys do not cover query positions");

    let row = |i: usize| -> (Vec<T>, Vec<T>) {
        let nk = pos0 + i + 1;
        let qi = q.row(i);
        let mut out = vec![T::zero(); d];
        let mut probs = Vec::with_capacity(if record { n_heads * nk } else { 0 });
        let mut scores = vec![T::zero(); nk];
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = &qi[cols.clone()];
            let mut max = T::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &k.row(j)[cols.clone()]) * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut sum = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = T::one() / sum;
            let oh = &mut out[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s *= inv;
                for (o, &vv) in oh.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += *s * vv;
                }
            }
            if record {
                probs.extend_from_slice(&scores);
            }
        }
        (out, probs)
    };

    let rows: Vec<(Vec<T>, Vec<T>)> = if q.rows() >= 16 {
        (0..q.rows()).into_par_iter().with_min_len(8).map(row).collect()
    } else {
        (0..q.rows()).map(row).collect()
    };
    let pairs = (0..q.rows()).map(|i| (pos0 + i + 1) as u64).sum();
    let mut out = Mat::zeros(0, d);
    let mut all_probs = Vec::with_capacity(if record { rows.len() } else { 0 });
    for (o, p) in rows {
        out.push_row(&o);
        if record {
            all_probs.push(p);
        }
    }
    (out, all_probs, pairs)
}

impl<T: Float> ModelParams<T> {
    fn check_capacity(&self, needed: usize) -> Result<()> {
        if needed > self.config.max_positions {
            return Err(Error::Capacity {
                needed,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    fn check_width(&self, input: &Mat<T>) -> Result<()> {
        if input.cols() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "input embeddings are {} wide, model expects {}",
                input.cols(),
                self.config.hidden_dim
            )));
        }
        Ok(())
    }

    /// Runs every block. With a cache, new keys/values are appended and
    /// positions continue from the cache length; recording requires no cache.
    pub(crate) fn run(
        &self,
        input: &Mat<T>,
        lora: Option<&LoraAdapters<T>>,
        mut cache: Option<&mut KVCache<T>>,
        record: bool,
    ) -> Result<RunOutput<T>> {
        self.check_width(input)?;
        let pos0 = cache.as_ref().map_or(0, |c| c.current_len);
        debug_assert!(!(record && pos0 > 0), "tapes start at position 0");
        self.check_capacity(pos0 + input.rows())?;

        let heads = self.config.n_heads;
        let mut x = input.clone();
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut tapes = Vec::new();
        let mut pairs = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let (xn1, inv1) = rms_norm(&x, &layer.attn_norm);
            let (mut q, uq) = match lora {
                Some(a) => {
                    let (y, u) = a.project(&a.layers[li].query, &xn1, &layer.wq);
                    (y, Some(u))
                }
                None => (xn1.matmul(&layer.wq), None),
            };
            let mut k = xn1.matmul(&layer.wk);
            let (v, uv) = match lora {
                Some(a) => {
                    let (y, u) = a.project(&a.layers[li].value, &xn1, &layer.wv);
                    (y, Some(u))
                }
                None => (xn1.matmul(&layer.wv), None),
            };
            rope(&mut q, pos0, heads, false);
            rope(&mut k, pos0, heads, false);

            let (attn, probs, p) = match cache.as_deref_mut() {
                Some(c) => {
                    for i in 0..k.rows() {
                        c.keys[li].push_row(k.row(i));
                        c.values[li].push_row(v.row(i));
                    }
                    attend(&q, &c.keys[li], &c.values[li], pos0, heads, record)
                }
                None => attend(&q, &k, &v, 0, heads, record),
            };
            if li == 0 {
                pairs = p;
            }

            let mut h_mid = attn.matmul(&layer.wo);
            h_mid.add_assign(&x);
            let (xn2, inv2) = rms_norm(&h_mid, &layer.ffn_norm);
            let pre = xn2.matmul(&layer.w_up);
            let mut act = pre.clone();
            for a in act.data_mut() {
                *a = silu(*a);
            }
            let mut out = act.matmul(&layer.w_down);
            out.add_assign(&h_mid);

            if record {
                tapes.push(LayerTape {
                    x_in: std::mem::replace(&mut x, out.clone()),
                    inv1,
                    xn1,
                    uq,
                    uv,
                    q,
                    k,
                    v,
                    probs,
                    h_mid,
                    inv2,
                    pre,
                });
            } else {
                x = out.clone();
            }
            hidden.push(out);
        }
        if let Some(c) = cache {
            c.current_len += input.rows();
        }
        Ok(RunOutput {
            hidden,
            pairs,
            tape: record.then_some(Tape { layers: tapes }),
        })
    }

    pub(crate) fn logits(&self, last_hidden: &Mat<T>) -> Mat<T> {
        let (normed, _) = rms_norm(last_hidden, &self.final_norm);
        normed.matmul(&self.unembed)
    }

    /// Full causal forward pass from position 0.
    pub fn forward(&self, input_embeddings: &Mat<T>) -> Result<ForwardTrace<T>> {
        let run = self.run(input_embeddings, None, None, false)?;
        let logits = match run.hidden.last() {
            Some(h) => self.logits(h),
            None => Mat::zeros(0, self.config.vocab_size),
        };
        Ok(ForwardTrace {
            hidden_states: run.hidden,
            logits,
            attention_pairs: run.pairs,
        })
    }

    /// Hidden states only, skipping the vocabulary projection.
    pub fn forward_hidden(&self, input_embeddings: &Mat<T>) -> Result<Vec<Mat<T>>> {
        Ok(self.run(input_embeddings, None, None, false)?.hidden)
    }

    pub fn prefill(&self, input_embeddings: &Mat<T>) -> Result<PrefillOutput<T>> {
        if input_embeddings.rows() == 0 {
            return Err(Error::input("prefill needs at least one input row"));
        }
        let mut cache = KVCache::new(self.config.n_layers, self.config.hidden_dim);
        let run = self.run(input_embeddings, None, Some(&mut cache), false)?;
        let last = run.hidden.last().expect("at least one layer");
        let last_row = last.slice_rows(last.rows() - 1, last.rows());
        Ok(PrefillOutput {
            cache,
            last_logits: self.logits(&last_row).into_vec(),
            attention_pairs: run.pairs,
        })
    }

    /// Appends one embedding to the cache and returns the logits at its
    /// position together with the attention-pair count of the step.
    pub fn decode_step(&self, cache: &mut KVCache<T>, next_embedding: &[T]) -> Result<(Vec<T>, u64)> {
        self.check_capacity(cache.current_len + 1)?;
        let x = Mat::from_vec(1, next_embedding.len(), next_embedding.to_vec());
        let run = self.run(&x, None, Some(cache), false)?;
        let last = run.hidden.last().expect("at least one layer");
        Ok((self.logits(last).into_vec(), run.pairs))
    }

    /// Greedy decoding, stopping at EOS.
    pub fn generate(&self, prefix_embeddings: &Mat<T>, max_new_tokens: usize) -> Result<Generation> {
        self.generate_with(prefix_embeddings, max_new_tokens, true)
    }

    /// Greedy decoding; argmax ties resolve to the lowest token id. With
    /// `stop_at_eos = false` exactly `max_new_tokens` are produced unless
    /// capacity runs out.
    pub fn generate_with(
        &self,
        prefix_embeddings: &Mat<T>,
        max_new_tokens: usize,
        stop_at_eos: bool,
    ) -> Result<Generation> {
        Ok(self.generate_timed(prefix_embeddings, max_new_tokens, stop_at_eos)?.0)
    }

    /// `generate_with` plus wall-clock timings.
    pub fn generate_timed(
        &self,
        prefix_embeddings: &Mat<T>,
        max_new_tokens: usize,
        stop_at_eos: bool,
    ) -> Result<(Generation, GenerationTiming)> {
        if prefix_embeddings.rows() == 0 {
            return Err(Error::input("generation needs a nonempty prefix"));
        }
        if max_new_tokens == 0 {
            let g = Generation {
                tokens: Vec::new(),
                truncated: false,
                prefill_pairs: 0,
                decode_pairs: 0,
                cache_len: 0,
            };
            return Ok((g, GenerationTiming::default()));
        }
        let start = Instant::now();
        let PrefillOutput {
            mut cache,
            last_logits,
            attention_pairs: prefill_pairs,
        } = self.prefill(prefix_embeddings)?;
        let prefill = start.elapsed();
        let decode_start = Instant::now();
        let mut logits = last_logits;
        let mut tokens = Vec::new();
        let mut decode_pairs = 0;
        let mut truncated = false;
        while tokens.len() < max_new_tokens {
            let next = argmax(&logits) as TokenId;
            if stop_at_eos && next == EOS {
                break;
            }
            tokens.push(next);
            if cache.current_len + 1 > self.config.max_positions {
                truncated = tokens.len() < max_new_tokens;
                break;
            }
            let (l, p) = self.decode_step(&mut cache, self.embedding.row(next as usize))?;
            logits = l;
            decode_pairs += p;
        }
        let decode = decode_start.elapsed();
        let g = Generation {
            tokens,
            truncated,
            prefill_pairs,
            decode_pairs,
            cache_len: cache.current_len,
        };
        Ok((g, GenerationTiming { prefill, decode }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelParams<f32> {
        ModelParams::init(&ModelConfig::grad_check(), 11).unwrap()
    }

    fn random_input(rows: usize, d: usize, seed: u64) -> Mat<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn max_rel(a: &[f32], b: &[f32]) -> f32 {
        let scale = b.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn trace_shape() {
        let m = model();
        let x = random_input(1, 16, 0);
        let t = m.forward(&x).unwrap();
        assert_eq!(t.hidden_states.len(), 2);
        assert!(t.hidden_states.iter().all(|h| h.shape() == (1, 16)));
        assert_eq!(t.logits.shape(), (1, 260));
    }

    #[test]
    fn positions_matter() {
        let m = model();
        let x = random_input(3, 16, 1);
        let mut swapped = Mat::zeros(0, 16);
        swapped.push_row(x.row(1));
        swapped.push_row(x.row(0));
        swapped.push_row(x.row(2));
        let a = m.forward(&x).unwrap();
        let b = m.forward(&swapped).unwrap();
        assert_ne!(a.hidden_states[1].row(2), b.hidden_states[1].row(2));
    }

    #[test]
    fn deterministic_and_causal() {
        let m = model();
        let x = random_input(6, 16, 2);
        let a = m.forward(&x).unwrap();
        assert_eq!(a, m.forward(&x).unwrap());
        let mut y = x.clone();
        for v in y.row_mut(4) {
            *v += 0.5;
        }
        let b = m.forward(&y).unwrap();
        for l in 0..2 {
            assert_eq!(a.hidden_states[l].slice_rows(0, 4), b.hidden_states[l].slice_rows(0, 4));
            assert_ne!(a.hidden_states[l].row(4), b.hidden_states[l].row(4));
        }
    }

    #[test]
    fn capacity_and_width_errors() {
        let m = model();
        let x = random_input(513, 16, 3);
        assert!(matches!(m.forward(&x), Err(Error::Capacity { needed: 513, max: 512 })));
        assert!(matches!(m.forward(&random_input(2, 8, 0)), Err(Error::Shape(_))));
        assert!(matches!(m.prefill(&Mat::zeros(0, 16)), Err(Error::Input(_))));
        let mut full = m.prefill(&random_input(512, 16, 4)).unwrap().cache;
        assert!(matches!(m.decode_step(&mut full, &[0.0; 16]), Err(Error::Capacity { .. })));
    }

    #[test]
    fn prefill_matches_forward_and_counts_pairs() {
        let m = model();
        let x = random_input(9, 16, 5);
        let p = m.prefill(&x).unwrap();
        let f = m.forward(&x).unwrap();
        assert_eq!(p.cache.current_len(), 9);
        assert_eq!(p.last_logits.as_slice(), f.logits.row(8));
        let direct: u64 = (1..=9).sum();
        assert_eq!(p.attention_pairs, direct);
        assert_eq!(p.cache.footprint(), 9 * 2 * 16 * 2);
    }

    #[test]
    fn decode_matches_batched_forward() {
        let m = model();
        let x = random_input(10, 16, 6);
        let mut cache = m.prefill(&x.slice_rows(0, 7)).unwrap().cache;
        for i in 7..10 {
            let (logits, pairs) = m.decode_step(&mut cache, x.row(i)).unwrap();
            assert_eq!(pairs, i as u64 + 1);
            assert_eq!(cache.current_len(), i + 1);
            let full = m.forward(&x.slice_rows(0, i + 1)).unwrap();
            assert!(max_rel(&logits, full.logits.row(i)) < 1e-5);
        }
    }

    #[test]
    fn generate_laws() {
        let m = model();
        let x = random_input(4, 16, 7);
        let g0 = m.generate(&x, 0).unwrap();
        assert!(g0.tokens.is_empty());
        let a = m.generate_with(&x, 5, false).unwrap();
        assert_eq!(a, m.generate_with(&x, 5, false).unwrap());
        assert_eq!(a.tokens.len(), 5);
        assert_eq!(a.cache_len, 4 + 5);
        let first = argmax(&m.prefill(&x).unwrap().last_logits) as TokenId;
        assert_eq!(a.tokens[0], first);
    }

    #[test]
    fn generation_truncates_at_capacity() {
        let m = model();
        let x = random_input(510, 16, 8);
        let g = m.generate_with(&x, 10, false).unwrap();
        assert!(g.truncated);
        assert_eq!(g.tokens.len(), 3);
        assert_eq!(g.cache_len, 512);
    }
}
