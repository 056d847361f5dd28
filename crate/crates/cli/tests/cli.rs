use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medvlm_cli::{RunManifest, StageStatus};
use sha2::{Digest, Sha256};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy").canonicalize().unwrap()
}

/// A short-budget config over the bundled fixtures.
fn config(dir: &Path, instruct_steps: usize) -> PathBuf {
    let f = fixtures();
    let p = |name: &str| f.join(format!("{name}.jsonl")).display().to_string();
    let text = format!(
        r#"
run_id = "cli"
seed = 5

[paths]
output_root = "{out}"
medical_text = "{mt}"
general_text = "{gt}"
medical_captions = "{mc}"
general_captions = "{gc}"
medical_vqa = "{mv}"
general_vqa = "{gv}"

[optimizer]
lr_adapter = 3e-3
lr_lm = 1e-3
warmup_steps = 2

[mix]
scale = 0.001

[mix.budgets.text_sft_1]
steps = 2
batch_size = 2

[mix.budgets.text_sft_2]
steps = 2
batch_size = 2

[mix.budgets.mm_align]
steps = 2
batch_size = 2

[mix.budgets.mm_instruct]
steps = {instruct_steps}
batch_size = 2

[[eval]]
name = "medical_vqa"
dataset = "{ev}"
task = "vqa"

[[eval]]
name = "medical_qa"
dataset = "{eq}"
task = "qa-ynm"

[[eval]]
name = "medical_ic"
dataset = "{ei}"
task = "ic"
"#,
        out = dir.join("runs").display(),
        mt = p("medical_text"),
        gt = p("general_text"),
        mc = p("medical_captions"),
        gc = p("general_captions"),
        mv = p("medical_vqa"),
        gv = p("general_vqa"),
        ev = p("eval_medical_vqa"),
        eq = p("eval_medical_qa"),
        ei = p("eval_medical_ic"),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn medvlm(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvlm"))
        .arg("--config")
        .arg(config)
        .arg("-q")
        .args(args)
        .env_remove("MEDVLM_OUT")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("runs/cli/run_manifest.json")).unwrap()).unwrap()
}

fn tree_digest(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), digest.to_vec());
            }
        }
    }
    out
}

#[test]
fn reproduce_resumes_and_invalidates_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let inputs = tree_digest(&fixtures());

    ok(medvlm(&cfg, &["reproduce"]));
    let m = manifest(dir.path());
    assert!(m.stages.values().all(|s| s.status == StageStatus::Done));
    assert_eq!(m.last_invocation.train_steps, 8);
    let reports: Vec<_> = fs::read_dir(dir.path().join("runs/cli/reports"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .collect();
    assert!(reports.len() >= 3, "{} reports", reports.len());

    let out = ok(medvlm(&cfg, &["reproduce"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("executed [], "));
    let m = manifest(dir.path());
    assert_eq!(m.last_invocation.train_steps, 0);
    assert!(m.last_invocation.executed.is_empty());

    // A later-stage budget edit reuses everything before it.
    let cfg = config(dir.path(), 3);
    ok(medvlm(&cfg, &["reproduce"]));
    let inv = manifest(dir.path()).last_invocation;
    assert_eq!(inv.executed, ["mm_instruct", "eval"]);
    for s in ["curate", "text_sft_1", "text_sft_2", "mm_align"] {
        assert!(inv.skipped.iter().any(|x| x == s), "{s} was not reused: {inv:?}");
    }
    assert_eq!(inv.train_steps, 3);

    assert_eq!(tree_digest(&fixtures()), inputs, "inputs were modified");
}

#[test]
fn identical_config_and_seed_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(medvlm(&config(a.path(), 2), &["train", "--through", "mm_align"]));
    ok(medvlm(&config(b.path(), 2), &["--workers", "2", "train", "--through", "mm_align"]));
    let strip = |d: &Path| {
        let mut t = tree_digest(&d.join("runs/cli"));
        t.retain(|p, _| !p.ends_with("run_manifest.json") && !p.ends_with("config.json") && !p.starts_with("curated"));
        t
    };
    let (ta, tb) = (strip(a.path()), strip(b.path()));
    assert!(ta.keys().any(|p| p.starts_with("checkpoints/mm_align")));
    assert_eq!(ta, tb);
}

#[test]
fn validation_errors_exit_1_and_stage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);

    let text = fs::read_to_string(&cfg).unwrap().replace("medical_vqa.jsonl", "missing.jsonl");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, text).unwrap();
    let out = medvlm(&bad, &["curate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("medical_vqa"));

    // Curation that rejects every VQA record leaves mixing short of data.
    let text = fs::read_to_string(&cfg).unwrap()
        + "\n[curation]\nmedical_vqa = { filters = [{ kind = \"length_math\", min_chars = 100000 }] }\n";
    let starved = dir.path().join("starved.toml");
    fs::write(&starved, text).unwrap();
    let out = medvlm(&starved, &["mix"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mm_instruct"), "{err}");
}
