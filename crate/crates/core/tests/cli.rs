use std::path::Path;
use std::process::{Command, Output};

use tweetaffect::cli::RunConfig;
use tweetaffect::datasets::{TaskId, synth_task_dataset, synth_task_embeddings};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tweetaffect"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const CONF: &str = "seed = 4\nlstm_size = 4\nattention_hidden = 8\nmax_epochs = 2\nlr = 0.01\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth_task_embeddings(8, 1).unwrap().save_text(&p.join("emb.txt")).unwrap();
    synth_task_dataset(TaskId::PretrainSentiment, 40, 1).unwrap().save(&p.join("sa.tsv")).unwrap();
    synth_task_dataset(TaskId::EiReg, 30, 2).unwrap().save(&p.join("ei.tsv")).unwrap();
    std::fs::write(p.join("run.conf"), CONF).unwrap();
    dir
}

#[test]
fn gradcheck_passes_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--config", "small"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4, "{out}");
    for line in out.lines().skip(1) {
        let err: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{line}");
    }
}

#[test]
fn user_errors_exit_one_with_one_line() {
    let dir = workspace();
    let p = dir.path();
    let cases: &[&[&str]] = &[
        &["pretrain", "--data", "sa.tsv", "--embeddings", "emb.txt", "--out", "o"],
        &["pretrain", "--set", "seed=1", "--data", "missing.tsv", "--embeddings", "emb.txt", "--out", "o"],
        &["visualize", "--set", "colour=red", "--ckpt", "x", "--text", "hi"],
        &["finetune", "--task", "nope", "--mode", "rd", "--ckpt", "x", "--data", "ei.tsv", "--out", "o"],
        &["pretrain", "--bogus"],
        &["evaluate", "--config", "run.conf", "--task", "EI-reg", "--ckpt", "emb.txt", "--data", "ei.tsv"],
    ];
    for args in cases {
        let o = run(p, args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn tl_fr_then_evaluate_end_to_end() {
    let dir = workspace();
    let p = dir.path();
    let o = run(p, &["pretrain", "--config", "run.conf", "--data", "sa.tsv", "--embeddings", "emb.txt", "--out", "pre"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(p.join("pre/model.ckpt").exists() && p.join("pre/history.csv").exists());
    let echoed = RunConfig::load(&p.join("pre/run-config.txt")).unwrap();
    assert_eq!(echoed.seed().unwrap(), 4);
    assert_eq!(echoed.get::<usize>("lstm_size").unwrap(), 4);

    let o = run(
        p,
        &["finetune", "--config", "run.conf", "--task", "EI-reg", "--mode", "tl-fr", "--ckpt", "pre", "--data", "ei.tsv", "--out", "ft"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(p, &["evaluate", "--config", "run.conf", "--task", "EI-reg", "--ckpt", "ft", "--data", "ei.tsv", "--runs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "task,metric,value,run0");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&fields[..2], &["EI-reg", "pearson"]);
    assert_eq!(fields[2], fields[3]);

    // a fixed checkpoint scored several times has zero spread
    let o = run(p, &["evaluate", "--config", "run.conf", "--task", "EI-reg", "--ckpt", "ft", "--data", "ei.tsv", "--runs", "3"]);
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert!(row[3..].iter().all(|v| *v == row[2]), "{out}");
}

#[test]
fn head_mismatch_is_a_user_error() {
    let dir = workspace();
    let p = dir.path();
    assert!(run(p, &["pretrain", "--config", "run.conf", "--data", "sa.tsv", "--embeddings", "emb.txt", "--out", "pre"]).status.success());
    let o = run(p, &["evaluate", "--config", "run.conf", "--task", "EI-reg", "--ckpt", "pre", "--data", "ei.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("head"), "{}", stderr(&o));
}

#[test]
fn baseline_and_bias_audit_reports() {
    let dir = workspace();
    let p = dir.path();
    let o = run(p, &["baseline", "--config", "run.conf", "--kind", "bow", "--task", "EI-reg", "--data", "ei.tsv", "--out", "b/model.bin"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("task,metric,value,run0\nEI-reg:bow,pearson,"));
    assert!(p.join("b/model.bin").exists() && p.join("b/run-config.txt").exists());
    let o = run(p, &["baseline", "--config", "run.conf", "--kind", "nbow-affect", "--task", "EI-reg", "--data", "ei.tsv"]);
    assert_eq!(o.status.code(), Some(1));

    assert!(run(p, &["pretrain", "--config", "run.conf", "--data", "sa.tsv", "--embeddings", "emb.txt", "--out", "pre"]).status.success());
    std::fs::write(p.join("pairs.tsv"), "ID\ta\tb\tctx\n1\tp1 u2\tn1 u2\tg\n2\tp3\tp3\tg\n").unwrap();
    let o = run(p, &["bias-audit", "--config", "run.conf", "--ckpt", "pre", "--pairs", "pairs.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("context,dimension,pairs,avg_diff,p_value"));
    let names: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(names, ["class0", "class1", "class2"]);
}

#[test]
fn lexicon_pipeline_writes_composed_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let steps: &[&[&str]] = &[
        &["synth", "--set", "seed=2", "--what", "corpus", "--out", "syn"],
        &["train-embeddings", "--set", "seed=2", "--set", "sgns_dim=10", "--set", "sgns_min_count=2", "--corpus", "syn/corpus.txt", "--out", "e/e.txt"],
        &["build-lexicon", "--corpus", "syn/corpus.txt", "--seeds", "syn/seeds", "--embeddings", "e/e.txt", "--out", "l/lex.tsv"],
        &["compose", "--embeddings", "e/e.txt", "--lexicon", "l/lex.tsv", "--out", "c/e20.txt"],
    ];
    for args in steps {
        let o = run(p, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let composed = tweetaffect::embeddings::EmbeddingMatrix::load_text(&p.join("c/e20.txt")).unwrap();
    assert_eq!(composed.dim(), 20);
    assert!(p.join("l/run-config.txt").exists());
}

#[test]
fn visualize_writes_to_file_or_stdout() {
    let dir = workspace();
    let p = dir.path();
    assert!(run(p, &["pretrain", "--config", "run.conf", "--data", "sa.tsv", "--embeddings", "emb.txt", "--out", "pre"]).status.success());
    let o = run(p, &["visualize", "--ckpt", "pre", "--text", "p1 n2 u3", "--format", "html"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches("<span").count(), 3);
    let o = run(p, &["visualize", "--ckpt", "pre/model.ckpt", "--text", "p1 n2 u3", "--out", "v/map.html"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(p.join("v/map.html")).unwrap().matches("<span").count(), 3);
    let o = run(p, &["visualize", "--ckpt", "pre", "--text", "   "]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_config_parsing() {
    let cfg = RunConfig::parse("# comment\nseed = 9\n\nlr = 0.5 # trailing\n", "t").unwrap();
    assert_eq!(cfg.seed().unwrap(), 9);
    assert_eq!(cfg.get::<f64>("lr").unwrap(), 0.5);
    assert_eq!(cfg.get::<usize>("batch_size").unwrap(), 32);
    let err = RunConfig::parse("seed = 1\nwat = 2\n", "t").unwrap_err();
    assert!(err.to_string().contains("line 2") && err.to_string().contains("wat"), "{err}");
    assert!(RunConfig::parse("seed 1\n", "t").is_err());
    assert!(RunConfig::default().seed().is_err());
    let round = RunConfig::parse(&cfg.resolved(), "resolved").unwrap();
    assert_eq!(round.resolved(), cfg.resolved());
}
