use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn vqarl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqarl"))
        .args(args)
        .env("VQARL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write(path: &Path, v: &Value) -> String {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn tiny_generator() -> Value {
    json!({"n_total": 120, "seed": 3, "grid_width": 3, "grid_height": 3, "max_objects": 3})
}

fn tiny_run(route: &str, stages: Value) -> Value {
    json!({
        "schema_version": 1,
        "route": route,
        "stages": stages,
        "data": {"generate": tiny_generator()},
        "policy": {"width": 8, "layers": 1, "mlp_hidden": 12, "context": 128},
        "sft": {"epochs": 1, "max_steps": 3},
        "grpo": {"group_size": 2, "max_steps": 3, "max_completion_len": 6},
        "eval": {"prompt_modes": ["prompting", "plain"], "max_completion_len": 6},
        "seed": 5
    })
}

#[test]
fn gen_data_writes_splits_and_refuses_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("gen.json"), &json!({"schema_version": 1, "generator": {"n_total": 200, "seed": 1}}));
    let out = dir.path().join("data");
    let o = vqarl(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sft.jsonl", "rl_a.jsonl", "rl_b.jsonl", "rl_c.jsonl", "test.jsonl", "manifest.json", "COMPLETE"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["total"], 200);
    assert_eq!(read_json(&out.join("manifest.json"))["command"], "gen-data");

    let again = vqarl(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(stderr_record(&again)["error"], "usage");
    let forced = vqarl(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap(), "--overwrite"]);
    assert!(forced.status.success());
    assert_eq!(read_json(&out.join("report.json")), report);
}

#[test]
fn config_errors_exit_three_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bad_key = write(&dir.path().join("a.json"), &json!({"schema_version": 1, "generator": {"n_total": 50, "colour": 1}}));
    let o = vqarl(&["gen-data", "--config", &bad_key, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let rec = stderr_record(&o);
    assert_eq!(rec["exit_code"], 3);
    assert!(out.join("error.json").exists());

    let no_version = write(&dir.path().join("b.json"), &json!({"generator": {}}));
    assert_eq!(vqarl(&["gen-data", "--config", &no_version, "--out", out.to_str().unwrap()]).status.code(), Some(3));
    let missing = dir.path().join("nope.json");
    assert_eq!(
        vqarl(&["gen-data", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(),
        Some(3)
    );
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(vqarl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(vqarl(&["eval", "--config", "x.json"]).status.code(), Some(2));
}

#[test]
fn bad_thread_budget_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("gen.json"), &json!({"schema_version": 1}));
    let o = Command::new(env!("CARGO_BIN_EXE_vqarl"))
        .args(["gen-data", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()])
        .env("VQARL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn curriculum_eval_and_dynamics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write(&dir.path().join("run.json"), &tiny_run("sft_grpo", json!(["A", "B"])));
    let o = vqarl(&["curriculum", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "report.json", "COMPLETE", "checkpoints/stage-sft.ckpt", "checkpoints/stage-a.ckpt",
        "checkpoints/stage-b.ckpt", "metrics/sft.jsonl", "metrics/stage-a.jsonl", "metrics/stage-b.jsonl"]
    {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest = read_json(&run.join("manifest.json"));
    assert!(manifest["dataset_fingerprint"].is_string());

    // the same data, written to disk, for eval
    let data = dir.path().join("data");
    let gen = write(&dir.path().join("gen.json"), &json!({"schema_version": 1, "generator": tiny_generator()}));
    assert!(vqarl(&["gen-data", "--config", &gen, "--out", data.to_str().unwrap()]).status.success());
    let eval_cfg = write(
        &dir.path().join("eval.json"),
        &json!({"schema_version": 1, "data": {"dir": data}, "checkpoint": run.join("checkpoints/stage-b.ckpt"),
                "prompt_modes": ["prompting"], "max_completion_len": 6}),
    );
    let ev = dir.path().join("eval");
    let o = vqarl(&["eval", "--config", &eval_cfg, "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&ev.join("report.json"));
    let preds = std::fs::read_to_string(ev.join("predictions-prompting.jsonl")).unwrap();
    let correct = preds.lines().filter(|l| serde_json::from_str::<Value>(l).unwrap()["correct"] == true).count();
    assert_eq!(report[0]["overall"]["correct"], correct);

    // offline scoring of the dumped outputs reproduces the report
    let raw: Vec<String> = preds
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            json!({"sample_id": v["sample_id"], "raw_output": v["raw_output"]}).to_string()
        })
        .collect();
    std::fs::write(dir.path().join("raw.jsonl"), raw.join("\n")).unwrap();
    let off_cfg = write(
        &dir.path().join("off.json"),
        &json!({"schema_version": 1, "data": {"dir": data}, "outputs": dir.path().join("raw.jsonl")}),
    );
    let off = dir.path().join("off");
    assert!(vqarl(&["eval", "--config", &off_cfg, "--out", off.to_str().unwrap()]).status.success());
    assert_eq!(read_json(&off.join("report.json"))[0]["overall"], report[0]["overall"]);

    let dyn_cfg = write(
        &dir.path().join("dyn.json"),
        &json!({"schema_version": 1, "metrics": run.join("metrics/stage-a.jsonl"), "dynamics": {"window": 2}}),
    );
    let dy = dir.path().join("dyn");
    assert!(vqarl(&["dynamics", "--config", &dyn_cfg, "--out", dy.to_str().unwrap()]).status.success());
    assert_eq!(read_json(&dy.join("report.json"))["steps"], 3);

    // vocabulary mismatch: a checkpoint evaluated against a different grid
    let other = dir.path().join("data4");
    let gen4 = write(
        &dir.path().join("gen4.json"),
        &json!({"schema_version": 1, "generator": {"n_total": 60, "grid_width": 4, "grid_height": 4}}),
    );
    assert!(vqarl(&["gen-data", "--config", &gen4, "--out", other.to_str().unwrap()]).status.success());
    let mismatch = write(
        &dir.path().join("mm.json"),
        &json!({"schema_version": 1, "data": {"dir": other}, "checkpoint": run.join("checkpoints/stage-b.ckpt")}),
    );
    let o = vqarl(&["eval", "--config", &mismatch, "--out", dir.path().join("mm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sft_grpo_and_cross_task_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = json!({"generate": tiny_generator()});
    let policy = json!({"width": 8, "layers": 1, "mlp_hidden": 12, "context": 128});
    let sft_cfg = write(
        &dir.path().join("sft.json"),
        &json!({"schema_version": 1, "data": data, "policy": policy, "sft": {"epochs": 1, "max_steps": 2}, "seed": 1}),
    );
    let sft = dir.path().join("sft");
    let o = vqarl(&["sft", "--config", &sft_cfg, "--out", sft.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = sft.join("checkpoints/stage-sft.ckpt");
    let mut stage_ckpts = serde_json::Map::new();
    for stage in ["A", "B", "C"] {
        let g = dir.path().join(format!("grpo-{stage}"));
        let cfg = write(
            &dir.path().join(format!("grpo-{stage}.json")),
            &json!({"schema_version": 1, "data": data, "stage": stage, "init_checkpoint": ck,
                    "grpo": {"group_size": 2, "max_steps": 1, "max_completion_len": 5}, "seed": 2}),
        );
        let o = vqarl(&["grpo", "--config", &cfg, "--out", g.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let path = g.join(format!("checkpoints/stage-{}.ckpt", stage.to_lowercase()));
        assert!(path.exists());
        stage_ckpts.insert(stage.into(), json!(path));
    }
    let ct_cfg = write(
        &dir.path().join("ct.json"),
        &json!({"schema_version": 1, "data": data, "checkpoints": stage_ckpts, "max_completion_len": 5}),
    );
    let ct = dir.path().join("ct");
    let o = vqarl(&["cross-task", "--config", &ct_cfg, "--out", ct.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&ct.join("report.json"));
    let rows = m[0]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let acc: Vec<f64> = r["accuracy"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((r["overall"].as_f64().unwrap() - acc.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
}

#[test]
fn ablate_runs_both_routes_over_every_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("ab.json"), &tiny_run("grpo_direct", json!(["A"])));
    let out = dir.path().join("ab");
    let o = vqarl(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("report.json"));
    // two prompt modes, so six variants per mode
    assert_eq!(r["rows"].as_array().unwrap().len(), 12);
    assert!(out.join("route-1/checkpoints/stage-c.ckpt").exists());
    assert!(out.join("route-2/checkpoints/stage-sft.ckpt").exists());
}
