//! End-to-end inference with cost accounting, and the length sweep built on it.
//!
//! Counters are exact attention-pair counts for one layer and one head.
//! Timers are wall-clock and informational.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cecache::CeCache;
use crate::compressor::{effective_sequence, CompressedSegment, CompressionConfig, Compressor, CompressorParams};
use crate::error::{Error, Result};
use crate::segmenter::{TokenId, Tokenizer};
use crate::tensor::Mat;
use crate::tinylm::ModelParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub context_tokens: Vec<TokenId>,
    pub question_tokens: Vec<TokenId>,
    pub use_compression: bool,
    pub max_new_tokens: usize,
    /// Stop early when the model emits EOS.
    pub stop_at_eos: bool,
}

impl InferenceRequest {
    pub fn from_text(context: &str, question: &str, use_compression: bool, max_new_tokens: usize) -> Self {
        Self {
            context_tokens: Tokenizer.encode_str(context),
            question_tokens: Tokenizer.encode_str(question),
            use_compression,
            max_new_tokens,
            stop_at_eos: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub compression_pairs: u64,
    pub prefill_pairs: u64,
    pub decode_pairs: u64,
    pub compression_ms: f64,
    pub prefill_ms: f64,
    pub decode_ms: f64,
    /// `compression_ms + prefill_ms`; cache hits make the first term a lookup.
    pub ttft_ms: f64,
    /// Cache rows at the end: `effective_len + generated`.
    pub kv_entries: usize,
    pub effective_len: usize,
    pub generated: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn run_generation(
    model: &ModelParams<f32>,
    prefix: &Mat<f32>,
    max_new_tokens: usize,
    stop_at_eos: bool,
    mut report: CostReport,
) -> Result<(String, CostReport)> {
    if max_new_tokens == 0 {
        return Err(Error::input("max_new_tokens must be at least 1"));
    }
    if prefix.rows() == 0 {
        return Err(Error::input("context and question are both empty"));
    }
    let needed = prefix.rows() + max_new_tokens;
    if needed > model.config.max_positions {
        return Err(Error::Capacity {
            needed,
            max: model.config.max_positions,
        });
    }
    let (g, timing) = model.generate_timed(prefix, max_new_tokens, stop_at_eos)?;
    report.prefill_pairs = g.prefill_pairs;
    report.decode_pairs = g.decode_pairs;
    report.prefill_ms = ms(timing.prefill);
    report.decode_ms = ms(timing.decode);
    report.ttft_ms = report.compression_ms + report.prefill_ms;
    report.effective_len = prefix.rows();
    report.generated = g.tokens.len();
    report.kv_entries = g.cache_len;
    Ok((Tokenizer.decode_lossy(&g.tokens), report))
}

/// Answers a request: context to CEs (through the cache when given), question
/// appended as token embeddings, prefill, greedy decode.
pub fn answer(
    model: &ModelParams<f32>,
    params: &CompressorParams<f32>,
    compression: &CompressionConfig,
    req: &InferenceRequest,
    cache: Option<&CeCache>,
) -> Result<(String, CostReport)> {
    let mut report = CostReport::default();
    let prefix = if req.use_compression {
        let compressor = Compressor::new(model, params, *compression)?;
        let seg_cfg = compression.segmentation();
        let start = Instant::now();
        let ces = match cache {
            Some(c) => {
                let (ces, lookups) = c.compress_context(&compressor, &req.context_tokens, &seg_cfg)?;
                for l in lookups {
                    report.compression_pairs += l.pairs;
                    if l.hit {
                        report.cache_hits += 1;
                    } else {
                        report.cache_misses += 1;
                    }
                }
                ces
            }
            None => {
                let (ces, pairs) = compressor.compress_context(&req.context_tokens, &seg_cfg)?;
                report.compression_pairs = pairs;
                ces
            }
        };
        report.compression_ms = ms(start.elapsed());
        effective_sequence(model, &ces, &req.question_tokens)?
    } else {
        let ids: Vec<TokenId> = req.context_tokens.iter().chain(&req.question_tokens).copied().collect();
        model.embed(&ids)?
    };
    run_generation(model, &prefix, req.max_new_tokens, req.stop_at_eos, report)
}

/// Generation from CEs computed earlier (offline compression).
pub fn answer_from_ces(
    model: &ModelParams<f32>,
    ces: &[CompressedSegment<f32>],
    question_tokens: &[TokenId],
    max_new_tokens: usize,
    stop_at_eos: bool,
) -> Result<(String, CostReport)> {
    let prefix = effective_sequence(model, ces, question_tokens)?;
    run_generation(model, &prefix, max_new_tokens, stop_at_eos, CostReport::default())
}

/// `n` tokens of lowercase letters and spaces: no segment boundaries.
pub fn boundary_free_context(n: usize) -> Vec<TokenId> {
    const CYCLE: &[u8] = b"lorem ipsum dolor sit amet consectetur adipiscing elit ";
    CYCLE.iter().cycle().take(n).map(|&b| TokenId::from(b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchVariant {
    Compressed,
    Uncompressed,
}

impl BenchVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchVariant::Compressed => "compressed",
            BenchVariant::Uncompressed => "uncompressed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub variant: BenchVariant,
    pub report: CostReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub max_new_tokens: usize,
    pub rows: Vec<BenchRow>,
}

/// Runs both variants at every length on boundary-free contexts with an empty
/// question, decoding exactly `max_new_tokens` tokens.
pub fn bench_sweep(
    model: &ModelParams<f32>,
    params: &CompressorParams<f32>,
    compression: &CompressionConfig,
    lengths: &[usize],
    max_new_tokens: usize,
    cache: Option<&CeCache>,
) -> Result<BenchTable> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("bench lengths must be strictly ascending"));
    }
    let mut rows = Vec::with_capacity(lengths.len() * 2);
    for &n in lengths {
        for variant in [BenchVariant::Compressed, BenchVariant::Uncompressed] {
            let req = InferenceRequest {
                context_tokens: boundary_free_context(n),
                question_tokens: Vec::new(),
                use_compression: variant == BenchVariant::Compressed,
                max_new_tokens,
                stop_at_eos: false,
            };
            let (_, report) = answer(model, params, compression, &req, cache)?;
            log::debug!("bench n={n} {}: {:?}", variant.as_str(), report);
            rows.push(BenchRow { n, variant, report });
        }
    }
    Ok(BenchTable { max_new_tokens, rows })
}

/// Least-squares slope of `ln y` against `ln x`. Needs two distinct positive x.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    /// Smallest N whose compressed pair total (compression + prefill) is below
    /// the uncompressed prefill pairs.
    pub pair_crossover: Option<usize>,
    /// Smallest N whose measured compressed TTFT beats the uncompressed TTFT.
    pub wallclock_crossover: Option<usize>,
    /// Uncompressed minus compressed TTFT pairs, per N.
    pub pair_advantage: Vec<(usize, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub lengths: Vec<usize>,
    pub max_new_tokens: usize,
    pub compression_pairs_slope: Option<f64>,
    pub uncompressed_prefill_slope: Option<f64>,
    pub compressed_prefill_slope: Option<f64>,
    /// Uncompressed over compressed, per N.
    pub prefill_ratio: Vec<(usize, f64)>,
    pub decode_ratio: Vec<(usize, f64)>,
    pub kv_ratio: Vec<(usize, f64)>,
    pub crossover: CrossoverReport,
}

impl BenchTable {
    pub fn lengths(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.dedup();
        ns
    }

    pub fn get(&self, n: usize, variant: BenchVariant) -> Option<&CostReport> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.variant == variant)
            .map(|r| &r.report)
    }

    fn pairs_of(&self, variant: BenchVariant) -> impl Iterator<Item = (usize, &CostReport, &CostReport)> + '_ {
        let other = match variant {
            BenchVariant::Compressed => BenchVariant::Uncompressed,
            BenchVariant::Uncompressed => BenchVariant::Compressed,
        };
        self.lengths()
            .into_iter()
            .filter_map(move |n| Some((n, self.get(n, variant)?, self.get(n, other)?)))
    }

    fn ratio(&self, f: impl Fn(&CostReport) -> f64) -> Vec<(usize, f64)> {
        self.pairs_of(BenchVariant::Uncompressed)
            .map(|(n, u, c)| (n, f(u) / f(c)))
            .collect()
    }

    fn slope(&self, variant: BenchVariant, f: impl Fn(&CostReport) -> u64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.n as f64, f(&r.report) as f64))
            .collect();
        loglog_slope(&pts)
    }

    pub fn crossover(&self) -> CrossoverReport {
        let mut pair_crossover = None;
        let mut wallclock_crossover = None;
        let mut pair_advantage = Vec::new();
        for (n, u, c) in self.pairs_of(BenchVariant::Uncompressed) {
            let compressed_total = c.compression_pairs + c.prefill_pairs;
            pair_advantage.push((n, u.prefill_pairs as i64 - compressed_total as i64));
            if pair_crossover.is_none() && compressed_total < u.prefill_pairs {
                pair_crossover = Some(n);
            }
            if wallclock_crossover.is_none() && c.ttft_ms < u.ttft_ms {
                wallclock_crossover = Some(n);
            }
        }
        CrossoverReport {
            pair_crossover,
            wallclock_crossover,
            pair_advantage,
        }
    }

    pub fn summary(&self) -> BenchSummary {
        BenchSummary {
            lengths: self.lengths(),
            max_new_tokens: self.max_new_tokens,
            compression_pairs_slope: self.slope(BenchVariant::Compressed, |r| r.compression_pairs),
            uncompressed_prefill_slope: self.slope(BenchVariant::Uncompressed, |r| r.prefill_pairs),
            compressed_prefill_slope: self.slope(BenchVariant::Compressed, |r| r.prefill_pairs),
            prefill_ratio: self.ratio(|r| r.prefill_pairs as f64),
            decode_ratio: self.ratio(|r| r.decode_pairs as f64),
            kv_ratio: self.ratio(|r| r.kv_entries as f64),
            crossover: self.crossover(),
        }
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "n\tvariant\tcompression_pairs\tprefill_pairs\tdecode_pairs\tcompression_ms\tprefill_ms\tdecode_ms\tttft_ms\tkv_entries\teffective_len\n",
        );
        for r in &self.rows {
            let c = &r.report;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}\t{}",
                r.n,
                r.variant.as_str(),
                c.compression_pairs,
                c.prefill_pairs,
                c.decode_pairs,
                c.compression_ms,
                c.prefill_ms,
                c.decode_ms,
                c.ttft_ms,
                c.kv_entries,
                c.effective_len
            )
            .expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cecache::EvictionPolicy;
    use crate::compressor::LoraConfig;
    use crate::segmenter::{segment, SegmentationConfig};
    use crate::tinylm::ModelConfig;

    fn setup() -> (ModelParams<f32>, CompressorParams<f32>) {
        let cfg = ModelConfig::tiny();
        let model = ModelParams::init(&cfg, 3).unwrap();
        let mut params = CompressorParams::init(&cfg, LoraConfig::default(), 4);
        // nonzero adapters so the compressed path differs from the base model
        for (_, t) in params.adapters.named_tensors_mut() {
            for (i, v) in t.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f32 - 3.0);
            }
        }
        (model, params)
    }

    #[test]
    fn boundary_free_is_boundary_free() {
        let ids = boundary_free_context(400);
        assert_eq!(ids.len(), 400);
        let segs = segment(&ids, &SegmentationConfig::default()).unwrap();
        assert!(segs.iter().all(|s| s.len() == 20));
    }

    #[test]
    fn uncompressed_report() {
        let (m, p) = setup();
        let req = InferenceRequest {
            context_tokens: boundary_free_context(30),
            question_tokens: Tokenizer.encode(b"q?"),
            use_compression: false,
            max_new_tokens: 4,
            stop_at_eos: false,
        };
        let (_, r) = answer(&m, &p, &CompressionConfig::default(), &req, None).unwrap();
        assert_eq!(r.compression_pairs, 0);
        assert_eq!(r.effective_len, 32);
        assert_eq!(r.prefill_pairs, 32 * 33 / 2);
        assert_eq!(r.generated, 4);
        assert_eq!(r.kv_entries, 36);
        assert_eq!(r.decode_pairs, 33 + 34 + 35 + 36);
    }

    #[test]
    fn compressed_report() {
        let (m, p) = setup();
        let req = InferenceRequest {
            context_tokens: boundary_free_context(400),
            question_tokens: boundary_free_context(10),
            use_compression: true,
            max_new_tokens: 1,
            stop_at_eos: false,
        };
        let (_, r) = answer(&m, &p, &CompressionConfig::default(), &req, None).unwrap();
        assert_eq!(r.effective_len, 210);
        assert_eq!(r.compression_pairs, 20 * 465);
        assert_eq!(r.kv_entries, r.effective_len + r.generated);
        assert!((r.ttft_ms - (r.compression_ms + r.prefill_ms)).abs() < 1e-9);
    }

    #[test]
    fn prefill_ratio_closed_form() {
        let (m, p) = setup();
        let t = bench_sweep(&m, &p, &CompressionConfig::default(), &[4096], 1, None).unwrap();
        let u = t.get(4096, BenchVariant::Uncompressed).unwrap();
        let c = t.get(4096, BenchVariant::Compressed).unwrap();
        assert_eq!(u.prefill_pairs, 4096 * 4097 / 2);
        assert_eq!(c.prefill_pairs, 2048 * 2049 / 2);
        assert_eq!(c.kv_entries - c.generated, 2048);
        let ratio = u.prefill_pairs as f64 / c.prefill_pairs as f64;
        assert!((ratio - 3.999).abs() < 1e-3);
    }

    #[test]
    fn capacity_and_input_errors() {
        let (m, p) = setup();
        let cfg = CompressionConfig::default();
        let mut req = InferenceRequest {
            context_tokens: boundary_free_context(m.config.max_positions),
            question_tokens: Vec::new(),
            use_compression: false,
            max_new_tokens: 1,
            stop_at_eos: false,
        };
        assert!(matches!(answer(&m, &p, &cfg, &req, None), Err(Error::Capacity { .. })));
        req.context_tokens.clear();
        assert!(answer(&m, &p, &cfg, &req, None).is_err());
        req.context_tokens = boundary_free_context(5);
        req.max_new_tokens = 0;
        assert!(answer(&m, &p, &cfg, &req, None).is_err());
    }

    #[test]
    fn cache_is_transparent() {
        let (m, p) = setup();
        let cfg = CompressionConfig::default();
        let req = InferenceRequest::from_text("First fact. Second fact here. Third!", "what?", true, 6);
        let cache = CeCache::in_memory(EvictionPolicy::Unbounded);
        let (plain, _) = answer(&m, &p, &cfg, &req, None).unwrap();
        let (cold, r1) = answer(&m, &p, &cfg, &req, Some(&cache)).unwrap();
        let (warm, r2) = answer(&m, &p, &cfg, &req, Some(&cache)).unwrap();
        assert_eq!(plain, cold);
        assert_eq!(cold, warm);
        assert_eq!(r1.cache_misses, 3);
        assert_eq!((r2.cache_hits, r2.cache_misses, r2.compression_pairs), (3, 0, 0));
        assert_eq!(r1.prefill_pairs, r2.prefill_pairs);
    }

    #[test]
    fn offline_ces_match_online() {
        let (m, p) = setup();
        let cfg = CompressionConfig::default();
        let req = InferenceRequest::from_text("Alpha beta. Gamma delta.", "x", true, 5);
        let c = Compressor::new(&m, &p, cfg).unwrap();
        let (ces, _) = c.compress_context(&req.context_tokens, &cfg.segmentation()).unwrap();
        let (online, _) = answer(&m, &p, &cfg, &req, None).unwrap();
        let (offline, r) = answer_from_ces(&m, &ces, &req.question_tokens, 5, true).unwrap();
        assert_eq!(online, offline);
        assert_eq!(r.compression_pairs, 0);
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powi(2))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn sweep_table_and_crossover() {
        let (m, p) = setup();
        let cfg = CompressionConfig::default();
        let t = bench_sweep(&m, &p, &cfg, &[20, 64, 128, 256], 4, None).unwrap();
        assert_eq!(t.rows.len(), 8);
        let tsv = t.to_tsv();
        assert_eq!(tsv.lines().count(), 9);
        assert!(tsv.starts_with("n\tvariant\t"));
        let s = t.summary();
        // one segment: compression alone costs as much as the uncompressed prefill
        let (n0, adv0) = s.crossover.pair_advantage[0];
        assert_eq!(n0, 20);
        assert!(adv0 < 0);
        assert_eq!(s.crossover.pair_crossover, Some(64));
        let adv: Vec<i64> = s.crossover.pair_advantage.iter().map(|a| a.1).collect();
        assert!(adv[1..].windows(2).all(|w| w[0] <= w[1]));
        assert!(bench_sweep(&m, &p, &cfg, &[64, 20], 1, None).is_err());
    }
}
