use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use kvsculpt_core::{read_kvd, KvdFile};

const BIN: &str = env!("CARGO_BIN_EXE_kvsculpt");

fn kvsculpt(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("KVSCULPT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = kvsculpt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(format!("{name}.schema.json"));
    jsonschema::validator_for(&json(&path)).unwrap()
}

fn assert_valid(name: &str, value: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

/// Small toy cache: 2 layers, 2 KV heads, N = 64, T = 8.
fn small_cache(dir: &Path, seed: &str, name: &str) -> PathBuf {
    ok(
        dir,
        &[
            "gen",
            "--seed",
            seed,
            "--layers",
            "2",
            "--qheads",
            "4",
            "--kvheads",
            "2",
            "--dim",
            "8",
            "--ctx",
            "64",
            "--cont",
            "8",
            "--out",
            name,
        ],
    );
    dir.join(name)
}

const FAST: [&str; 6] = ["--retain", "8", "--outer-steps", "10", "--n-synth", "32"];

fn compress(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["compress", "--cache", "toy.kvd", "--report", "r.json"];
    args.extend_from_slice(&FAST);
    args.extend_from_slice(extra);
    ok(dir, &args);
    json(&dir.join("r.json"))
}

#[test]
fn gen_is_deterministic_and_seeded() {
    let dir = TempDir::new().unwrap();
    let args = |seed: &'static str, out: &'static str| {
        [
            "gen",
            "--seed",
            seed,
            "--layers",
            "4",
            "--qheads",
            "4",
            "--kvheads",
            "2",
            "--dim",
            "16",
            "--ctx",
            "256",
            "--out",
            out,
        ]
    };
    ok(dir.path(), &args("7", "a.kvd"));
    ok(dir.path(), &args("7", "b.kvd"));
    ok(dir.path(), &args("8", "c.kvd"));
    let read = |n| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.kvd"), read("b.kvd"));
    assert_ne!(read("a.kvd"), read("c.kvd"));
    let KvdFile::Full(cache) = read_kvd(dir.path().join("a.kvd")).unwrap() else {
        panic!("gen writes a full cache");
    };
    assert_eq!(cache.context_len(), 256);
    assert_eq!(cache.reference.unwrap().tokens.len(), 32);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&kvsculpt(d, &["gen", "--seed", "7"])), 2);
    assert_eq!(code(&kvsculpt(d, &["gen", "--bogus", "--out", "x.kvd"])), 2);
    assert_eq!(code(&kvsculpt(d, &["compress", "--cache", "toy.kvd"])), 2);
    assert_eq!(code(&kvsculpt(d, &["compress", "--method", "magic"])), 2);
    assert_eq!(code(&kvsculpt(d, &["allocate", "--pilot", "p.json"])), 2);
    assert_eq!(
        code(&kvsculpt(d, &["gen", "--dim", "7", "--out", "x.kvd"])),
        2
    );
    assert_eq!(code(&kvsculpt(d, &["frobnicate"])), 2);
    std::fs::write(d.join("bad.json"), r#"{"ratoi": 0.3}"#).unwrap();
    assert_eq!(
        code(&kvsculpt(
            d,
            &["gen", "--config", "bad.json", "--out", "x.kvd"]
        )),
        2
    );
    let threads = Command::new(BIN)
        .args(["gen", "--out", "x.kvd"])
        .current_dir(d)
        .env("KVSCULPT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
    assert_eq!(code(&kvsculpt(d, &["--help"])), 0);
    assert!(!d.join("x.kvd").exists());
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "1", "toy.kvd");
    let missing = kvsculpt(d, &["compress", "--cache", "nope.kvd", "--out", "c.kvd"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.kvd"));
    // ratio 0.1 keeps fewer rows than the retain zone
    let infeasible = kvsculpt(
        d,
        &[
            "compress", "--cache", "toy.kvd", "--out", "c.kvd", "--ratio", "0.1", "--retain", "8",
        ],
    );
    assert_eq!(code(&infeasible), 1);
    assert!(String::from_utf8_lossy(&infeasible.stderr).contains("budget"));
    std::fs::write(d.join("junk.kvd"), b"not a cache").unwrap();
    assert_eq!(
        code(&kvsculpt(
            d,
            &["compress", "--cache", "junk.kvd", "--out", "c.kvd"]
        )),
        1
    );
}

#[test]
fn compress_uniform_meets_the_ratio() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "2", "toy.kvd");
    let report = compress(
        d,
        &[
            "--ratio", "0.3", "--method", "kvsculpt", "--alloc", "uniform", "--out", "c.kvd",
        ],
    );
    assert_valid("compress_report", &report);
    // k = round(0.3 * 64) - 8 = 11 per head
    let ks: Vec<u64> = report["plan"]["k"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|l| l.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect();
    assert_eq!(ks, vec![11; 4]);
    let achieved = report["achieved_ratio"].as_f64().unwrap();
    assert!((achieved - 0.3).abs() <= 0.5 / 64.0, "{achieved}");
    let KvdFile::Compressed(c) = read_kvd(d.join("c.kvd")).unwrap() else {
        panic!("compress writes a compressed cache");
    };
    assert_eq!(c.retain(), 8);
    assert!(c.heads.iter().flatten().all(|h| h.k() == 11));
}

#[test]
fn layer_allocation_embeds_pilot_and_outputs_validate() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "3", "toy.kvd");
    let report = compress(
        d,
        &[
            "--alloc",
            "layer",
            "--alpha",
            "0.5",
            "--pilot-steps",
            "60",
            "--out",
            "c.kvd",
            "--trace",
            "t.jsonl",
            "--pilot-out",
            "p.json",
        ],
    );
    assert_valid("compress_report", &report);
    let pilots = report["pilots"].as_array().unwrap();
    assert_eq!(pilots.len(), 1);
    assert_eq!(pilots[0]["pilot_steps"], 60);
    assert_eq!(report["plan"]["alpha"], 0.5);
    let pilot_file = json(&d.join("p.json"));
    assert_eq!(&pilot_file[0], &pilots[0]);
    assert_valid("pilot_report", &pilot_file[0]);
    assert_valid("budget_plan", &report["plan"]);

    let text = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4 * 10);
    for line in lines {
        assert_valid("trace_record", &serde_json::from_str(line).unwrap());
    }
}

#[test]
fn distillation_beats_select_fit_on_every_head() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "4", "toy.kvd");
    let losses = |method: &str| -> Vec<f64> {
        let r = compress(d, &["--method", method, "--seed", "5", "--out", "c.kvd"]);
        r["heads"]
            .as_array()
            .unwrap()
            .iter()
            .map(|h| h["loss"].as_f64().unwrap())
            .collect()
    };
    let sf = losses("selectfit");
    let kv = losses("kvsculpt");
    assert_eq!(sf.len(), 4);
    for (k, s) in kv.iter().zip(&sf) {
        assert!(k <= s, "kvsculpt {k} > selectfit {s}");
    }
}

#[test]
fn eval_lossless_cache_and_plot_data() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "5", "toy.kvd");
    // ratio 1 keeps the whole compress zone verbatim
    compress(
        d,
        &["--method", "attn", "--ratio", "1.0", "--out", "full.kvd"],
    );
    ok(
        d,
        &[
            "eval",
            "--cache",
            "toy.kvd",
            "--compressed",
            "full.kvd",
            "--out",
            "e.json",
            "--plot-data",
            "plot",
        ],
    );
    let report = json(&d.join("e.json"));
    assert_valid("eval_report", &report);
    assert!(report["kl_mean"].as_f64().unwrap() <= 1e-10);
    assert_eq!(report["ratio"], 1.0);
    let kl_csv = std::fs::read_to_string(d.join("plot.kl.csv")).unwrap();
    assert_eq!(kl_csv.lines().count(), 1 + 8);
    assert!(kl_csv.starts_with("token,kl"));
    let layers_csv = std::fs::read_to_string(d.join("plot.layers.csv")).unwrap();
    assert_eq!(layers_csv.lines().count(), 1 + 2);
}

#[test]
fn eval_rejects_mismatched_caches() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "6", "toy.kvd");
    compress(d, &["--method", "attn", "--out", "c.kvd"]);
    ok(
        d,
        &[
            "gen",
            "--seed",
            "6",
            "--layers",
            "2",
            "--qheads",
            "4",
            "--kvheads",
            "2",
            "--dim",
            "8",
            "--ctx",
            "48",
            "--cont",
            "8",
            "--out",
            "short.kvd",
        ],
    );
    let out = kvsculpt(
        d,
        &["eval", "--cache", "short.kvd", "--compressed", "c.kvd"],
    );
    assert_eq!(code(&out), 1);
    // a compressed file where a full one is expected
    let out = kvsculpt(d, &["eval", "--cache", "c.kvd", "--compressed", "c.kvd"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_sweep_writes_one_report_per_ratio() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "7", "toy.kvd");
    let mut args = vec![
        "eval",
        "--cache",
        "toy.kvd",
        "--ratios",
        "0.3,0.5,0.7",
        "--method",
        "selectfit",
        "--out-dir",
        "sweep",
    ];
    args.extend_from_slice(&FAST);
    ok(d, &args);
    let mut files: Vec<String> = std::fs::read_dir(d.join("sweep"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        ["eval_r0.3.json", "eval_r0.5.json", "eval_r0.7.json"]
    );
    let kl: Vec<f64> = files
        .iter()
        .map(|f| {
            let r = json(&d.join("sweep").join(f));
            assert_valid("eval_report", &r);
            assert_eq!(r["method"], "selectfit");
            r["kl_mean"].as_f64().unwrap()
        })
        .collect();
    assert!(kl[2] < kl[0], "{kl:?}");
}

fn write_pilot(d: &Path) {
    let pilot = serde_json::json!({
        "mse": [[0.5, 0.1], [0.02, 0.01], [0.002, 0.004], [0.3, 0.0005]],
        "pilot_steps": 60,
        "uniform_k": 50
    });
    std::fs::write(d.join("p.json"), pilot.to_string()).unwrap();
}

fn plan(d: &Path, args: &[&str]) -> Value {
    let out = ok(d, args);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("budget_plan", &v);
    v
}

fn ks(plan: &Value) -> Vec<u64> {
    plan["k"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|l| l.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect()
}

#[test]
fn allocate_plans_and_spreads() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_pilot(d);
    let uniform = plan(
        d,
        &[
            "allocate", "--pilot", "p.json", "--budget", "400", "--alpha", "0",
        ],
    );
    assert_eq!(ks(&uniform), vec![50; 8]);

    let mut last = 0;
    for alpha in ["0", "0.5", "1.0"] {
        for alloc in ["layer", "head"] {
            let p = plan(
                d,
                &[
                    "allocate", "--pilot", "p.json", "--budget", "400", "--alpha", alpha,
                    "--alloc", alloc, "--cap", "224",
                ],
            );
            let k = ks(&p);
            assert_eq!(k.iter().sum::<u64>(), 400);
            if alloc == "head" {
                let spread = k.iter().max().unwrap() - k.iter().min().unwrap();
                assert!(spread >= last, "alpha {alpha}: {spread} < {last}");
                last = spread;
            }
        }
    }
    ok(
        d,
        &[
            "allocate",
            "--pilot",
            "p.json",
            "--budget",
            "400",
            "--out",
            "plan.json",
        ],
    );
    assert_valid("budget_plan", &json(&d.join("plan.json")));

    let floors = kvsculpt(
        d,
        &[
            "allocate",
            "--pilot",
            "p.json",
            "--budget",
            "20",
            "--k-min-floor",
            "4",
        ],
    );
    assert_eq!(code(&floors), 1);
    assert!(String::from_utf8_lossy(&floors.stderr).contains("floor"));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "8", "toy.kvd");
    std::fs::write(
        d.join("run.json"),
        r#"{"ratio": 0.5, "method": "attn", "retain": 8, "outer_steps": 3, "seed": 9}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "compress", "--config", "run.json", "--cache", "toy.kvd", "--out", "c.kvd", "--method",
            "random", "--report", "r.json",
        ],
    );
    let r = json(&d.join("r.json"));
    assert_eq!(r["method"], "random");
    assert_eq!(r["ratio"], 0.5);
    assert_eq!(r["retain"], 8);
    assert_eq!(r["seed"], 9);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_cache(d, "9", "toy.kvd");
    let run = |threads: &str, out: &str| {
        let mut args = vec![
            "compress",
            "--cache",
            "toy.kvd",
            "--alloc",
            "head",
            "--pilot-steps",
            "4",
            "--head-pilot-steps",
            "2",
            "--out",
            out,
        ];
        args.extend_from_slice(&FAST);
        let status = Command::new(BIN)
            .args(&args)
            .current_dir(d)
            .env("KVSCULPT_THREADS", threads)
            .output()
            .unwrap();
        assert!(status.status.success());
        std::fs::read(d.join(out)).unwrap()
    };
    assert_eq!(run("1", "a.kvd"), run("4", "b.kvd"));
}

#[test]
fn exporter_files_compress_but_cannot_be_evaluated() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/exporter_small.kvd")
        .canonicalize()
        .unwrap();
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cache = fixture.to_str().unwrap();
    ok(
        d,
        &[
            "compress",
            "--cache",
            cache,
            "--retain",
            "2",
            "--ratio",
            "0.67",
            "--n-synth",
            "4",
            "--outer-steps",
            "5",
            "--out",
            "c.kvd",
            "--report",
            "r.json",
        ],
    );
    assert_valid("compress_report", &json(&d.join("r.json")));
    // logits need the generating model, which exporter files do not carry
    let out = kvsculpt(d, &["eval", "--cache", cache, "--compressed", "c.kvd"]);
    assert_eq!(code(&out), 1);
}
