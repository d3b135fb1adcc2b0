use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cecomp::evalgen::read_corpus;
use cecomp::segmenter::{Tokenizer, SEP};
use cecomp::tinylm::{ModelConfig, ModelParams};

fn cecomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cecomp"))
        .current_dir(dir)
        .env_remove("CECOMP_CACHE_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cecomp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} line in {stdout}"))
}

fn small_corpus(dir: &Path) {
    ok(dir, &["make-corpus", "--out", "c.jsonl", "--n-samples", "8", "--seed", "3"]);
}

#[test]
fn make_corpus_is_deterministic_and_parses() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-corpus", "--out", "a.jsonl", "--n-samples", "5"]);
    ok(d.path(), &["make-corpus", "--out", "b.jsonl", "--n-samples", "5"]);
    let a = fs::read(d.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.jsonl")).unwrap());
    let corpus = read_corpus(&a[..]).unwrap();
    assert_eq!(corpus.len(), 5);
    let mut again = Vec::new();
    cecomp::evalgen::write_corpus(&corpus, &mut again).unwrap();
    assert_eq!(again, a);
}

#[test]
fn zero_facts_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = cecomp(d.path(), &["make-corpus", "--out", "x.jsonl", "--n-facts", "0"]);
    assert!(!out.status.success());
    assert!(!d.path().join("x.jsonl").exists());
}

#[test]
fn config_file_rejects_unknown_keys_and_applies_values() {
    let d = tempfile::tempdir().unwrap();
    small_corpus(d.path());
    fs::write(d.path().join("bad.toml"), "nonsense = true\n").unwrap();
    let out = cecomp(d.path(), &["--config", "bad.toml", "make-corpus", "--out", "x.jsonl"]);
    assert!(!out.status.success());

    fs::write(d.path().join("seed.toml"), "model_seed = 5\n").unwrap();
    let default_digest = field(&ok(d.path(), &["train", "--corpus", "c.jsonl", "--out", "a.json", "--max-steps", "0"]), "base_digest").to_string();
    let seeded = ok(d.path(), &["--config", "seed.toml", "train", "--corpus", "c.jsonl", "--out", "b.json", "--max-steps", "0"]);
    assert_ne!(field(&seeded, "base_digest"), default_digest);
}

#[test]
fn train_zero_steps_keeps_initialisation() {
    let d = tempfile::tempdir().unwrap();
    small_corpus(d.path());
    let out = ok(d.path(), &["train", "--corpus", "c.jsonl", "--out", "ck.json", "--max-steps", "0"]);
    assert_eq!(field(&out, "base_digest"), field(&out, "base_digest_after"));
    let init = cecomp::compressor::CompressorParams::<f32>::init(
        &ModelConfig::tiny(),
        cecomp::compressor::LoraConfig::default(),
        1,
    );
    assert_eq!(field(&out, "compressor_digest"), init.digest());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = tempfile::tempdir().unwrap();
    small_corpus(d.path());
    let full = ok(d.path(), &["train", "--corpus", "c.jsonl", "--out", "full.json", "--max-steps", "6"]);
    ok(d.path(), &["train", "--corpus", "c.jsonl", "--out", "part.json", "--max-steps", "3", "--log", "part.tsv"]);
    let resumed = ok(
        d.path(),
        &["train", "--corpus", "c.jsonl", "--out", "part.json", "--max-steps", "6", "--resume", "part.json", "--log", "part.tsv"],
    );
    assert_eq!(field(&full, "compressor_digest"), field(&resumed, "compressor_digest"));
    assert_eq!(field(&full, "base_digest"), field(&resumed, "base_digest_after"));
    assert_eq!(
        fs::read(d.path().join("full.bin")).unwrap(),
        fs::read(d.path().join("part.bin")).unwrap()
    );
    let log = fs::read_to_string(d.path().join("part.tsv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6"]);
}

const CONTEXT: &str = "The cat sat on the mat. The dog ran far away! Birds sing?\nA long tail without any boundary at all here";

#[test]
fn compress_writes_one_blob_per_segment() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("ctx.txt"), CONTEXT).unwrap();
    ok(d.path(), &["compress", "--input", "ctx.txt", "--out-dir", "a"]);
    ok(d.path(), &["compress", "--input", "ctx.txt", "--out-dir", "b"]);
    let ids = Tokenizer.encode_str(CONTEXT);
    let n_segments = cecomp::segmenter::segment(&ids, &Default::default()).unwrap().len();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("a/manifest.json")).unwrap()).unwrap();
    let entries = manifest["segments"].as_array().unwrap();
    assert_eq!(entries.len(), n_segments);
    for e in entries {
        assert_eq!(e["source_hash"].as_str().unwrap().len(), 64);
        let f = e["file"].as_str().unwrap();
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap());
    }
    let blobs = fs::read_dir(d.path().join("a")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ceblob")
    });
    assert_eq!(blobs.count(), n_segments);
}

fn generate_json(dir: &Path, args: &[&str]) -> serde_json::Value {
    let mut full = vec!["generate", "--question", "who sat?", "--max-new-tokens", "6", "--json"];
    full.extend_from_slice(args);
    serde_json::from_str(ok(dir, &full).trim()).unwrap()
}

#[test]
fn generate_paths_agree() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("ctx.txt"), CONTEXT).unwrap();

    let plain = generate_json(d.path(), &["--context", "ctx.txt", "--no-compress"]);
    assert_eq!(plain["cost"]["compression_pairs"], 0);
    let model = ModelParams::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
    let mut ids = Tokenizer.encode_str(CONTEXT);
    ids.push(SEP);
    ids.extend(Tokenizer.encode_str("who sat?"));
    ids.push(SEP);
    let g = model.generate(&model.embed(&ids).unwrap(), 6).unwrap();
    assert_eq!(plain["answer"], Tokenizer.decode_lossy(&g.tokens));

    let online = generate_json(d.path(), &["--context", "ctx.txt"]);
    assert_eq!(online, {
        let mut again = generate_json(d.path(), &["--context", "ctx.txt"]);
        // timings differ between runs; everything else must not
        for k in ["compression_ms", "prefill_ms", "decode_ms", "ttft_ms"] {
            again["cost"][k] = online["cost"][k].clone();
        }
        again
    });
    assert!(online["cost"]["compression_pairs"].as_u64().unwrap() > 0);

    ok(d.path(), &["compress", "--input", "ctx.txt", "--out-dir", "ces"]);
    let offline = generate_json(d.path(), &["--ces", "ces/manifest.json"]);
    assert_eq!(offline["cost"]["compression_pairs"], 0);
    assert_eq!(offline["answer"], online["answer"]);
    assert_eq!(offline["cost"]["prefill_pairs"], online["cost"]["prefill_pairs"]);
}

#[test]
fn cache_dir_from_environment() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("ctx.txt"), CONTEXT).unwrap();
    let run = || {
        let out = Command::new(env!("CARGO_BIN_EXE_cecomp"))
            .current_dir(d.path())
            .env("CECOMP_CACHE_DIR", d.path().join("cache"))
            .env("RUST_LOG", "warn")
            .args(["generate", "--context", "ctx.txt", "--question", "q", "--max-new-tokens", "2", "--cache-stats"])
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run();
    let second = run();
    let files = fs::read_dir(d.path().join("cache")).unwrap().count();
    assert!(files > 0);
    assert!(first.contains(&format!("hits=0\tmisses={files}\tentries={files}")), "{first}");
    assert!(second.contains(&format!("hits={files}\tmisses=0\tentries={files}")), "{second}");
}

#[test]
fn bench_emits_one_row_per_length_and_variant() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(
        d.path(),
        &["bench", "--lengths", "256,512,1024,2048,4096,8192", "--max-new-tokens", "2", "--summary", "s.json", "--cache-stats"],
    );
    let rows: Vec<&str> = out.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 12);
    for n in [256, 512, 1024, 2048, 4096, 8192] {
        for v in ["compressed", "uncompressed"] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{n}\t{v}\t"))));
        }
    }
    assert!(out.lines().any(|l| l.starts_with("cache\thits=")));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("s.json")).unwrap()).unwrap();
    assert!(summary["uncompressed_prefill_slope"].as_f64().unwrap() > 1.9);
}

#[test]
fn eval_reports_per_position_columns() {
    let d = tempfile::tempdir().unwrap();
    small_corpus(d.path());
    let out = ok(d.path(), &["eval", "--corpus", "c.jsonl", "--max-new-tokens", "4", "--cache-stats"]);
    let mut lines = out.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("variant\tsamples\texact_match\tcompression_pairs\tpos0"));
    let cols = header.split('\t').count();
    let compressed = lines.next().unwrap();
    let uncompressed = lines.next().unwrap();
    assert!(compressed.starts_with("compressed\t8\t"));
    assert!(uncompressed.starts_with("uncompressed\t8\t"));
    assert_eq!(compressed.split('\t').count(), cols);
    assert_eq!(uncompressed.split('\t').nth(3), Some("0"));
    let stats = lines.next().unwrap();
    assert!(stats.starts_with("cache\thits=") && stats.contains("misses=") && stats.contains("entries="));
}
