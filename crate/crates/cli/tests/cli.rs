use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtc_core::autodiff::Checkpoint;
use mtc_core::envs::PerturbationConfig;
use mtc_core::eval::{mean, parse_report_csv, rollout, PerturbKind, REPORT_HEADER};
use mtc_core::nn::ModelSet;
use mtc_core::util::fmt_g9;

const TINY: &str = "hidden = 16\nrnn_hidden = 16\nlatent_dim = 4\nbatch_size = 8\ninit_steps = 50\nhorizon = 40\neval_every = 100\neval_episodes = 2\ncheckpoint_every = 100\n";

fn mtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtc")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.conf");
    fs::write(&path, TINY).unwrap();
    path
}

fn train(dir: &Path, algo: &str, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let conf = tiny_config(dir);
    let mut args = vec!["train", "--env", "pendulum", "--algo", algo, "--steps", "200", "--config", p(&conf), "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = mtc(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn manifest(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Every file under `dir` keyed by relative path, with the manifest
/// timestamp line removed.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            if path.extension().is_some_and(|x| x == "manifest") {
                let text = String::from_utf8(bytes).unwrap();
                assert_eq!(text.lines().filter(|l| l.starts_with("timestamp=")).count(), 1);
                bytes = text.lines().filter(|l| !l.starts_with("timestamp=")).collect::<Vec<_>>().join("\n").into_bytes();
            }
            out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

#[test]
fn missing_env_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtc(&["train", "--algo", "sac", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--env"));
}

#[test]
fn invalid_algo_and_env_list_the_valid_set() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtc(&["train", "--env", "pendulum", "--algo", "ppo", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(["mtc", "mtc-noa", "rpc", "sac"].iter().all(|a| stderr(&o).contains(a)));
    let o = mtc(&["train", "--env", "cheetah", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(["pendulum", "pointmass", "massspring"].iter().all(|e| stderr(&o).contains(e)));
}

#[test]
fn unknown_flags_and_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtc(&["train", "--env", "pendulum", "--learning-rate", "1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "bogus = 3\n").unwrap();
    let o = mtc(&["train", "--env", "pendulum", "--config", p(&bad), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = mtc(&["train", "--env", "pendulum", "--set", "m=3", "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = mtc(&["tc-oracle", "--rho", "0.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sac_instantiates_no_predictors() {
    let dir = tempfile::tempdir().unwrap();
    let sac = train(dir.path(), "sac", "sac", &[]);
    let m = manifest(&sac.join("train.manifest"));
    assert_eq!((m["predictor_params"].as_str(), m["encoder_params"].as_str(), m["m_effective"].as_str()), ("0", "0", "0"));
    let models = ModelSet::from_checkpoint(&Checkpoint::load(&sac.join("final.ckpt")).unwrap()).unwrap();
    assert!(models.encoder.is_none() && models.dynamics.is_none() && models.action_model.is_none() && models.one_step.is_none());
}

#[test]
fn mtc_noa_records_zero_effective_mixing() {
    let dir = tempfile::tempdir().unwrap();
    let noa = manifest(&train(dir.path(), "mtc-noa", "noa", &["--m", "0.5"]).join("train.manifest"));
    let full = manifest(&train(dir.path(), "mtc", "mtc", &["--m", "0.5"]).join("train.manifest"));
    assert_eq!((noa["m"].as_str(), noa["m_effective"].as_str()), ("0.5", "0"));
    assert_eq!(full["m_effective"], "0.5");
    let sizes = |m: &BTreeMap<String, String>| m["predictor_params"].parse::<usize>().unwrap();
    assert!(sizes(&noa) > 0 && sizes(&noa) < sizes(&full));
}

#[test]
fn manifest_holds_resolved_config_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, format!("{TINY}seed = 5\nip = -3\ntau = 0.5\n")).unwrap();
    let out = dir.path().join("run");
    let o = mtc(&[
        "train", "--env", "pointmass", "--steps", "60", "--config", p(&conf), "--set", "tau=0.25", "--set", "ip=-2", "--seed", "7", "--ip", "-1",
        "--history", "3", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out.join("train.manifest"));
    assert_eq!(m["seed"], "7");
    assert_eq!(m["ip"], "-1");
    assert_eq!(m["tau"], "0.25");
    assert_eq!(m["history"], "3");
    assert_eq!(m["env"], "pointmass");
    assert_eq!(m["total_steps"], "60");
    assert_eq!(m["code_version"], env!("CARGO_PKG_VERSION"));
    for (k, _) in mtc_core::config::KEYS {
        assert!(m.contains_key(k), "manifest lacks {k}");
    }
}

#[test]
fn training_and_evaluation_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "mtc", "run", &[]);
    let first = snapshot(&run);
    train(dir.path(), "mtc", "run", &[]);
    assert_eq!(first, snapshot(&run));
    assert!(!run.join(".mtc.lock").exists());

    let ckpt = run.join("final.ckpt");
    let ev = dir.path().join("ev");
    let evaluate = || {
        for args in [
            vec!["eval-robustness", "--noise-kind", "mass", "--seeds", "0,1", "--episodes", "2"],
            vec!["eval-compress", "--episodes", "3"],
            vec!["eval-predict", "--episodes", "10", "--predictor-steps", "50", "--t", "3"],
        ] {
            let mut a = args.clone();
            a.extend(["--ckpt", p(&ckpt), "--out", p(&ev)]);
            let o = mtc(&a);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        snapshot(&ev)
    };
    let a = evaluate();
    assert_eq!(a, evaluate());
    assert_eq!(a.len(), 6);
}

#[test]
fn robustness_sweep_default_grid_schema_and_zero_cell() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "mtc", "run", &[]);
    let ev = dir.path().join("ev");
    let o = mtc(&["eval-robustness", "--ckpt", p(&run.join("final.ckpt")), "--noise-kind", "mass", "--seeds", "3,4", "--episodes", "2", "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(ev.join("robustness_mass.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    let rows = parse_report_csv(&text).unwrap();
    let mut levels: Vec<f64> = rows.iter().map(|r| r.level).collect();
    levels.dedup();
    assert_eq!(levels, vec![1.0, 0.25, 0.5, 0.75, 1.25, 1.5, 1.75]);
    assert_eq!(PerturbKind::Mass.default_levels(), levels[1..]);

    let models = ModelSet::from_checkpoint(&Checkpoint::load(&run.join("final.ckpt")).unwrap()).unwrap();
    for seed in [3, 4] {
        let plain = rollout(&models, "pendulum", &PerturbationConfig::default(), 2, seed, 40).unwrap();
        let cell = rows.iter().find(|r| r.level == 1.0 && r.seed == Some(seed)).unwrap();
        assert_eq!(fmt_g9(cell.mean_return), fmt_g9(mean(&plain.returns)));
    }

    let o = mtc(&["eval-robustness", "--ckpt", p(&run.join("final.ckpt")), "--noise-kind", "act", "--levels", "", "--out", p(&ev)]);
    assert_eq!(code(&o), 2);
    let o = mtc(&["eval-robustness", "--ckpt", p(&run.join("final.ckpt")), "--noise-kind", "wind", "--out", p(&ev)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_predict_rejects_offsets_beyond_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "sac", "run", &[]);
    let ckpt = run.join("final.ckpt");
    let out = dir.path().join("ev");
    for t in ["40", "41", "3,40"] {
        let o = mtc(&["eval-predict", "--ckpt", p(&ckpt), "--t", t, "--out", p(&out)]);
        assert_eq!(code(&o), 3, "t={t}: {}", stderr(&o));
    }
    assert!(!out.join("predict.csv").exists());
}

#[test]
fn evaluating_a_bare_checkpoint_needs_an_env() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "sac", "run", &[]);
    let bare = dir.path().join("bare.ckpt");
    fs::copy(run.join("final.ckpt"), &bare).unwrap();
    let out = dir.path().join("ev");
    let o = mtc(&["eval-compress", "--ckpt", p(&bare), "--episodes", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    let o = mtc(&["eval-compress", "--ckpt", p(&bare), "--episodes", "1", "--env", "pendulum", "--horizon", "40", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mtc(&["eval-compress", "--ckpt", p(&bare), "--episodes", "1", "--env", "pointmass", "--out", p(&out)]);
    assert_eq!(code(&o), 3, "mismatched dimensions must be rejected");
}

#[test]
fn tc_oracle_without_correlation_is_zero() {
    for n in ["2", "5", "13"] {
        let o = mtc(&["tc-oracle", "--rho", "0", "--n", n, "--samples", "2000"]);
        assert_eq!(code(&o), 0);
        let out: BTreeMap<String, String> =
            stdout(&o).lines().filter_map(|l| l.split_once('=').map(|(k, v)| (k.into(), v.into()))).collect();
        assert_eq!(out["tc_analytic"], "0");
        let (m, se): (f64, f64) = (out["bound_mean"].parse().unwrap(), out["bound_se"].parse().unwrap());
        assert!(m.abs() <= 3.0 * se, "n={n}: {m} ± {se}");
    }
}

#[test]
fn tc_oracle_writes_outputs_and_rejects_bad_domains() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtc(&["tc-oracle", "--rho", "-0.5", "--n", "8", "--samples", "20000", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("within_3se=true"));
    let csv = fs::read_to_string(dir.path().join("tc_oracle.csv")).unwrap();
    assert!(csv.starts_with("rho,n,samples,tc_analytic,bound_mean,bound_se\n-0.5,8,20000,"));
    assert_eq!(manifest(&dir.path().join("tc_oracle.manifest"))["command"], "tc-oracle");
    assert_eq!(code(&mtc(&["tc-oracle", "--rho", "1", "--n", "8"])), 3);
    assert_eq!(code(&mtc(&["tc-oracle", "--rho", "0.5", "--n", "1"])), 3);
}

#[test]
fn report_with_one_input_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(
        &input,
        format!("{REPORT_HEADER}\nmtc,pendulum,act,0.1,0,-500,3,0.2\nmtc,pendulum,act,0.1,1,-700,3,0.9\nmtc,pendulum,act,0.1,all,-600,100,0.5\n"),
    )
    .unwrap();
    let out = dir.path().join("rep");
    let o = mtc(&["report", "--inputs", p(&input), "--normalize", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = parse_report_csv(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.normalized_score == 1.0));
    let curves = parse_report_csv(&fs::read_to_string(out.join("curves.csv")).unwrap()).unwrap();
    assert_eq!(curves.len(), 1);
    assert_eq!(curves[0].seed, None);
}

#[test]
fn report_merges_methods_and_rejects_bad_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, format!("{REPORT_HEADER}\nmtc,pendulum,mass,0.5,all,-1000,1,1\n")).unwrap();
    fs::write(&b, format!("{REPORT_HEADER}\nsac,pendulum,mass,0.5,all,-2000,1,1\n")).unwrap();
    let out = dir.path().join("rep");
    let o = mtc(&["report", "--inputs", p(&a), p(&b), "--normalize", "--horizon", "1000", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = parse_report_csv(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    let floor = mtc_core::eval::return_floor("pendulum", 1000).unwrap();
    assert_eq!(rows[0].normalized_score, 1.0);
    assert!((rows[1].normalized_score - (-2000.0 - floor) / (-1000.0 - floor)).abs() < 1e-8);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "method,score\nmtc,1\n").unwrap();
    assert_eq!(code(&mtc(&["report", "--inputs", p(&bad), "--out", p(&out)])), 3);
    assert_eq!(code(&mtc(&["report", "--out", p(&out)])), 2);
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".mtc.lock"), "1\n").unwrap();
    let conf = tiny_config(dir.path());
    let o = mtc(&["train", "--env", "pendulum", "--steps", "10", "--config", p(&conf), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("in use"));
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn diverging_training_is_a_numerical_fault() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = mtc(&["train", "--env", "pendulum", "--steps", "200", "--config", p(&conf), "--set", "critic_lr=1e200", "--set", "actor_lr=1e200", "--out", p(&out)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!out.join(".mtc.lock").exists());
}

#[test]
fn reference_page_is_current() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/cli-reference.md");
    let o = mtc(&["reference"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(path).unwrap(), stdout(&o), "regenerate with `mtc reference > docs/cli-reference.md`");
}
