use std::path::Path;
use std::process::{Command, Output};

fn mapfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
world.height = 16
world.width = 16
world.train = 3
world.test = 2
encoder.channels = 3,4
encoder.map_channels = 3
head.width = 4
head.scd_placement = on_post_features
fusion.K = 2
train.steps = 3
";

fn write_config(dir: &Path, data: &Path) -> String {
    let text = format!(
        "{SMALL}data.train = {}\ndata.test = {}\n",
        data.join("train/manifest.tsv").display(),
        data.join("test/manifest.tsv").display()
    );
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nfusion.K = 0\n").unwrap();
    let out_dir = dir.path().join("o");
    let o = mapfuse(&["gen-data", "-c", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("FusionConfig.K"));

    std::fs::write(&cfg, "# x\nworld.colour = 3\n").unwrap();
    let o = mapfuse(&["gen-data", "-c", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));

    let o = mapfuse(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overrides_win_and_defaults_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("k.cfg");
    std::fs::write(&cfg, "fusion.K = 4\nworld.height = 8\nworld.width = 8\nworld.train = 1\nworld.test = 1\n").unwrap();
    let out_dir = dir.path().join("o");
    let o = mapfuse(&[
        "gen-data",
        "-c",
        cfg.to_str().unwrap(),
        "--set",
        "fusion.K=6",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = stdout(&o);
    assert!(echo.contains("fusion.K = 6\n"));
    assert!(echo.contains("optim.beta2 = 0.999\n"));
    assert!(out_dir.join("test/manifest.tsv").exists());
}

#[test]
fn missing_files_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = mapfuse(&[
        "metrics",
        "--data",
        dir.path().join("nope.tsv").to_str().unwrap(),
        "--pred",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_pipeline_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let cfg = write_config(d, &data);
    let p = |s: &str| d.join(s).display().to_string();

    let run = |args: &[&str]| {
        let o = mapfuse(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["gen-data", "-c", &cfg, "--out-dir", data.to_str().unwrap()]);
    let first = std::fs::read(data.join("train/00001_img_post.cdr")).unwrap();
    run(&["gen-data", "-c", &cfg, "--out-dir", data.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(data.join("train/00001_img_post.cdr")).unwrap());

    run(&["train", "-c", &cfg, "--out-dir", &p("run1")]);
    run(&["train", "-c", &cfg, "--out-dir", &p("run2")]);
    let log1 = std::fs::read_to_string(d.join("run1/loss_log.jsonl")).unwrap();
    assert_eq!(log1.lines().count(), 3);
    assert!(log1.starts_with("{\"step\":1,"));
    assert_eq!(log1, std::fs::read_to_string(d.join("run2/loss_log.jsonl")).unwrap());
    let ckpt = p("run1/checkpoint.cdp");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(p("run2/checkpoint.cdp")).unwrap());

    // two more steps on top of the first run equal five straight steps
    run(&["train", "-c", &cfg, "--set", "train.steps=5", "--resume", "--out-dir", &p("run1")]);
    run(&["train", "-c", &cfg, "--set", "train.steps=5", "--out-dir", &p("run3")]);
    assert_eq!(
        std::fs::read_to_string(d.join("run1/loss_log.jsonl")).unwrap(),
        std::fs::read_to_string(d.join("run3/loss_log.jsonl")).unwrap()
    );

    let ev = run(&["eval", "-c", &cfg, "--checkpoint", &ckpt, "--out-dir", &p("eval")]);
    assert!(stdout(&ev).contains("\"bc\""));
    run(&["predict", "-c", &cfg, "--checkpoint", &ckpt, "--out-dir", &p("pred")]);
    assert!(d.join("pred/00003_change.cdr").exists());
    assert!(d.join("pred/00003_map_post.cdr").exists());
    let test_manifest = data.join("test/manifest.tsv");
    run(&[
        "metrics",
        "--data",
        test_manifest.to_str().unwrap(),
        "--pred",
        &p("pred"),
        "--out-dir",
        &p("scored"),
    ]);
    assert_eq!(
        std::fs::read(d.join("eval/metrics.json")).unwrap(),
        std::fs::read(d.join("scored/metrics.json")).unwrap()
    );

    run(&[
        "export-attention",
        "-c",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--ids",
        "3",
        "--channels",
        "0,1",
        "--out-dir",
        &p("attn"),
    ]);
    assert!(d.join("attn/00003/attn_scale1_ch1.cdr").exists());

    // a degraded evaluation with a mismatched superclass count is a config error
    let o = mapfuse(&[
        "eval",
        "-c",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--set",
        "degradation=high_level",
        "--set",
        "degradation.mapping=0:0,1:0,2:1,3:1,4:1",
        "--out-dir",
        &p("eval2"),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let m = run(&[
        "run-matrix",
        "-c",
        &cfg,
        "--set",
        "train.steps=1",
        "--cell",
        "regime=bi_temporal;fusion.kind=concat",
        "--cell",
        "fusion.kind=mapformer",
        "--seeds",
        "1,0",
        "--out-dir",
        &p("matrix"),
    ]);
    let _ = m;
    let csv = std::fs::read_to_string(d.join("matrix/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "regime,fusion,K,seed,bc,sc,scs,miou,wall_s");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("bi_temporal,concat,0,0,"));
    assert!(lines[2].starts_with("bi_temporal,concat,0,1,"));
    assert!(lines[3].starts_with("conditional,mapformer,2,0,"));
}
