use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_SPEC: &str = "scenes = 2\ninstances_min = 2\ninstances_max = 3\npoints_min = 60\npoints_max = 120\n";

fn tiny_config(train: &Path, eval: &Path) -> String {
    format!(
        "num_layers = 2\nd1 = 2\nd2 = 1\nheads = 2\nhidden_dim = 16\nffn_dim = 32\nencoder_hidden = 16\n\
         samples = 8\nagents = 8\nk = 3\nepochs = 2\nablation_seeds = 1\n\
         ablate_init_modes = agent,fps_zero\nablate_hqfd = on\nablate_nms = on\n\
         train_data = {}\neval_data = {}\n",
        train.display(),
        eval.display()
    )
}

fn agentseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn no_staging_left(dir: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let name = e.unwrap().file_name().to_string_lossy().into_owned();
        assert!(!name.contains(".partial-"), "leftover {name}");
    }
}

#[test]
fn generate_train_eval_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.txt");
    fs::write(&spec, TINY_SPEC).unwrap();
    let (train_dir, eval_dir) = (root.join("train"), root.join("eval"));
    ok(&agentseg(&["generate", "--spec", s(&spec), "--out", s(&train_dir), "--seed", "1"]));
    ok(&agentseg(&["generate", "--spec", s(&spec), "--out", s(&eval_dir), "--seed", "2"]));
    assert_eq!(fs::read_dir(&train_dir).unwrap().count(), 2);

    let cfg = root.join("config.txt");
    fs::write(&cfg, tiny_config(&train_dir, &eval_dir)).unwrap();
    let run = root.join("run");
    ok(&agentseg(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,lr,loss,"));
    let ckpt = run.join("checkpoint.txt");
    assert!(ckpt.exists());

    let ev = root.join("eval_out");
    ok(&agentseg(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&eval_dir), "--config", s(&cfg), "--out", s(&ev), "--per-layer",
    ]));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("scene,layer,query_count,recall50,ap25,ap50,map\n"));
    assert!(metrics.lines().any(|l| l.starts_with("ALL,")));
    for line in metrics.lines().skip(1) {
        for v in line.split(',').skip(3) {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{line}");
        }
    }
    assert!(ev.join("per_layer.csv").exists());
    assert!(ev.join("recall_by_layer.svg").exists());

    let ab = root.join("ablation");
    ok(&agentseg(&["ablate", "--config", s(&cfg), "--out", s(&ab)]));
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // Two grid rows and the COE row, each with a mean row.
    assert_eq!(rows.len(), 6, "{csv}");
    let checksums: Vec<&str> = rows.iter().map(|r| r.split(',').nth(9).unwrap()).collect();
    assert!(checksums.iter().all(|c| *c == checksums[0]));
    let params: Vec<&str> = rows[..3].iter().map(|r| r.split(',').nth(10).unwrap()).collect();
    assert!(params.iter().all(|c| *c == params[0]), "{csv}");
    no_staging_left(root);
}

#[test]
fn errors_exit_nonzero_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let bad_spec = root.join("bad_spec.txt");
    fs::write(&bad_spec, "scenes = 2\nwidth = 3\n").unwrap();
    let out = root.join("gen");
    let r = agentseg(&["generate", "--spec", s(&bad_spec), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("width"));
    assert!(!out.exists());

    // Training data directory that does not exist.
    let cfg = root.join("config.txt");
    fs::write(&cfg, tiny_config(&root.join("missing"), &root.join("missing"))).unwrap();
    let run = root.join("run");
    assert!(!agentseg(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    assert!(!run.exists());

    // A checkpoint whose dimensions do not match the config.
    let spec = root.join("spec.txt");
    fs::write(&spec, TINY_SPEC).unwrap();
    let data = root.join("data");
    ok(&agentseg(&["generate", "--spec", s(&spec), "--out", s(&data)]));
    fs::write(&cfg, tiny_config(&data, &data)).unwrap();
    ok(&agentseg(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let wide = root.join("wide.txt");
    fs::write(&wide, tiny_config(&data, &data).replace("hidden_dim = 16", "hidden_dim = 32")).unwrap();
    let ev = root.join("ev");
    let r = agentseg(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.txt")), "--data", s(&data), "--config", s(&wide), "--out", s(&ev),
    ]);
    assert!(!r.status.success());
    assert!(!ev.exists());
    no_staging_left(root);
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.txt");
    fs::write(&spec, TINY_SPEC).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&agentseg(&["generate", "--spec", s(&spec), "--out", s(&a), "--seed", "9"]));
    ok(&agentseg(&["generate", "--spec", s(&spec), "--out", s(&b), "--seed", "9"]));
    for e in fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}
