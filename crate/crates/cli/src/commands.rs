use std::fs;
use std::path::{Path, PathBuf};

use mtc_core::autodiff::Checkpoint;
use mtc_core::config::{Algo, TrainConfig};
use mtc_core::envs::PerturbationConfig;
use mtc_core::eval::{
    ar1_bound_estimate, ar1_covariance, compress_trajectory, gaussian_tc_analytic, mean, normalize,
    parse_report_csv, report_csv, robustness_sweep, rollout, t_step_prediction_error, Compressor,
    LinearGaussianModel, PerturbKind, PredictorConfig, SweepSpec,
};
use mtc_core::nn::ModelSet;
use mtc_core::rng::stream;
use mtc_core::trainer;
use mtc_core::util::fmt_g9;
use mtc_core::MtcError;

use crate::output::{Manifest, OutputLock};
use crate::{CkptArgs, CliError, CompressArgs, OracleArgs, PredictArgs, ReportArgs, RobustnessArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const TRAIN_MANIFEST: &str = "train";

fn scalar_count(models: &ModelSet, ids: &[mtc_core::autodiff::ParamId]) -> usize {
    ids.iter().map(|&id| models.store.get(id).data().len()).sum()
}

/// Parameter counts of the encoder and of the prediction models.
fn representation_sizes(models: &ModelSet) -> (usize, usize) {
    let encoder = models.encoder.as_ref().map_or(0, |e| scalar_count(models, &e.mlp.params()));
    let mut predictors = Vec::new();
    if let Some(d) = &models.dynamics {
        predictors.extend(d.params());
    }
    if let Some(a) = &models.action_model {
        predictors.extend(a.params());
    }
    if let Some(o) = &models.one_step {
        predictors.extend(o.mlp.params());
    }
    (encoder, scalar_count(models, &predictors))
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    c.env = a.env.clone();
    if let Some(x) = &a.algo {
        c.algo = Algo::parse(x)?;
    }
    if let Some(x) = a.steps {
        c.total_steps = x;
    }
    if let Some(x) = a.seed {
        c.seed = x;
    }
    if let Some(x) = a.ip {
        c.ip = x;
    }
    if let Some(x) = a.m {
        c.m = x;
    }
    if let Some(x) = a.history {
        c.history = x;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = resolve_train_config(&a)?;
    let _lock = OutputLock::acquire(&a.out)?;
    let summary = trainer::run(&config, &a.out, a.resume)?;
    let models = ModelSet::from_checkpoint(&Checkpoint::load(&summary.final_checkpoint)?)?;
    let (encoder, predictors) = representation_sizes(&models);
    let mut m = Manifest::new("train");
    m.push("m_effective", fmt_g9(config.m_effective()));
    m.push("encoder_params", encoder);
    m.push("predictor_params", predictors);
    m.push("steps", summary.steps);
    m.push("updates", summary.updates);
    m.push_config(&config);
    m.write(&a.out, TRAIN_MANIFEST)?;
    match summary.final_eval {
        Some((r, ci)) => println!("trained {} steps; final evaluation return {} ± {}", summary.steps, fmt_g9(r), fmt_g9(ci)),
        None => println!("trained {} steps", summary.steps),
    }
    Ok(())
}

/// Models plus the run facts an evaluation needs.
struct Evaluated {
    models: ModelSet,
    env: String,
    method: String,
    horizon: usize,
    base: PerturbationConfig,
}

fn find_train_manifest(ckpt: &Path) -> Option<PathBuf> {
    let name = format!("{TRAIN_MANIFEST}.manifest");
    ckpt.ancestors().skip(1).take(2).map(|d| d.join(&name)).find(|p| p.is_file())
}

fn load_checkpoint(a: &CkptArgs) -> Result<Evaluated> {
    let models = ModelSet::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let recorded = match find_train_manifest(&a.ckpt) {
        Some(p) => Some(Manifest::parse(&fs::read_to_string(p)?).train_config()?),
        None => None,
    };
    let env = match (&a.env, &recorded) {
        (Some(e), _) => e.clone(),
        (None, Some(c)) => c.env.clone(),
        (None, None) => {
            return Err(MtcError::Contract(format!("no {TRAIN_MANIFEST}.manifest next to {}; pass --env", a.ckpt.display())).into())
        }
    };
    let method = a.method.clone().or_else(|| recorded.as_ref().map(|c| c.algo.as_str().to_string())).unwrap_or_else(|| "unknown".into());
    let horizon = a.horizon.or(recorded.as_ref().map(|c| c.horizon)).unwrap_or(mtc_core::envs::DEFAULT_HORIZON);
    let base = recorded.map(|c| c.perturbation).unwrap_or_default();
    if horizon == 0 {
        return Err(CliError::Usage("--horizon must be positive".into()));
    }
    Ok(Evaluated { models, env, method, horizon, base })
}

fn eval_manifest(command: &str, a: &CkptArgs, e: &Evaluated) -> Manifest {
    let mut m = Manifest::new(command);
    m.push("ckpt", a.ckpt.display());
    m.push("env", &e.env);
    m.push("method", &e.method);
    m.push("horizon", e.horizon);
    m
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn eval_robustness(a: RobustnessArgs) -> Result<()> {
    let kind = PerturbKind::parse(&a.noise_kind)?;
    let levels = match &a.levels {
        Some(l) => l.0.clone(),
        None => std::iter::once(kind.identity_level()).chain(kind.default_levels()).collect(),
    };
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let e = load_checkpoint(&a.ckpt)?;
    let _lock = OutputLock::acquire(&a.ckpt.out)?;
    let spec = SweepSpec {
        method: &e.method,
        env_id: &e.env,
        kind,
        levels: &levels,
        seeds: &a.seeds.0,
        episodes: a.episodes,
        horizon: e.horizon,
        base: e.base.clone(),
    };
    let rows = robustness_sweep(&e.models, &spec)?;
    let stem = format!("robustness_{}", kind.as_str());
    fs::write(a.ckpt.out.join(format!("{stem}.csv")), report_csv(&rows))?;
    let mut m = eval_manifest("eval-robustness", &a.ckpt, &e);
    m.push("noise_kind", kind.as_str());
    m.push("levels", join(&levels.iter().map(|&l| fmt_g9(l)).collect::<Vec<_>>()));
    m.push("seeds", join(&a.seeds.0));
    m.push("episodes", a.episodes);
    m.write(&a.ckpt.out, &stem)?;
    for r in rows.iter().filter(|r| r.seed.is_none()) {
        println!("{} {}={}: return {} ± {}", r.method, r.kind, fmt_g9(r.level), fmt_g9(r.mean_return), fmt_g9(r.ci90));
    }
    Ok(())
}

pub const COMPRESS_HEADER: &str = "method,task,seed,episode,steps,compressed_bytes";

pub fn eval_compress(a: CompressArgs) -> Result<()> {
    let compressor = Compressor::parse(&a.compressor)?;
    let e = load_checkpoint(&a.ckpt)?;
    let _lock = OutputLock::acquire(&a.ckpt.out)?;
    let report = rollout(&e.models, &e.env, &e.base, a.episodes, a.seed, e.horizon)?;
    let mut csv = format!("{COMPRESS_HEADER}\n");
    let mut sizes = Vec::new();
    for (i, traj) in report.trajectories.iter().enumerate() {
        let bytes = compress_trajectory(traj, compressor)?;
        sizes.push(bytes as f64);
        csv.push_str(&format!("{},{},{},{i},{},{bytes}\n", e.method, e.env, a.seed, traj.len()));
    }
    fs::write(a.ckpt.out.join("compress.csv"), csv)?;
    let mut m = eval_manifest("eval-compress", &a.ckpt, &e);
    m.push("compressor", &a.compressor);
    m.push("episodes", a.episodes);
    m.push("seed", a.seed);
    m.write(&a.ckpt.out, "compress")?;
    if !sizes.is_empty() {
        println!("mean compressed size over {} episodes: {} bytes", sizes.len(), fmt_g9(mean(&sizes)));
    }
    Ok(())
}

pub const PREDICT_HEADER: &str = "method,task,t,heldout_nll";

pub fn eval_predict(a: PredictArgs) -> Result<()> {
    let e = load_checkpoint(&a.ckpt)?;
    if let Some(&t) = a.t.0.iter().find(|&&t| t == 0 || t >= e.horizon) {
        return Err(MtcError::Contract(format!("offset t={t} must lie in 1..{} (the trajectory length)", e.horizon)).into());
    }
    let _lock = OutputLock::acquire(&a.ckpt.out)?;
    let report = rollout(&e.models, &e.env, &e.base, a.episodes, a.seed, e.horizon)?;
    let actions: Vec<Vec<Vec<f64>>> = report.trajectories.into_iter().map(|t| t.actions).collect();
    let cfg = PredictorConfig { steps: a.predictor_steps, seed: a.seed, ..PredictorConfig::default() };
    let mut csv = format!("{PREDICT_HEADER}\n");
    for &t in &a.t.0 {
        let nll = t_step_prediction_error(&actions, t, &cfg)?;
        csv.push_str(&format!("{},{},{t},{}\n", e.method, e.env, fmt_g9(nll)));
        println!("t={t}: held-out NLL {}", fmt_g9(nll));
    }
    fs::write(a.ckpt.out.join("predict.csv"), csv)?;
    let mut m = eval_manifest("eval-predict", &a.ckpt, &e);
    m.push("t", join(&a.t.0));
    m.push("episodes", a.episodes);
    m.push("seed", a.seed);
    m.push("predictor_steps", a.predictor_steps);
    m.write(&a.ckpt.out, "predict")?;
    Ok(())
}

pub const ORACLE_HEADER: &str = "rho,n,samples,tc_analytic,bound_mean,bound_se";

pub fn tc_oracle(a: OracleArgs) -> Result<()> {
    if !(a.rho.abs() < 1.0) || a.n < 2 {
        return Err(MtcError::Domain(format!("need |rho| < 1 and n >= 2 (rho={}, n={})", a.rho, a.n)).into());
    }
    let tc = gaussian_tc_analytic(&ar1_covariance(a.n, a.rho))?;
    let mut rng = stream(a.seed, "tc-oracle");
    let est = ar1_bound_estimate(a.rho, a.n, a.samples, LinearGaussianModel::exact(a.rho), &mut rng)?;
    println!("tc_analytic={}", fmt_g9(tc));
    println!("bound_mean={}", fmt_g9(est.mean));
    println!("bound_se={}", fmt_g9(est.std_err));
    println!("within_3se={}", (est.mean - tc).abs() <= 3.0 * est.std_err);
    if let Some(out) = &a.out {
        let _lock = OutputLock::acquire(out)?;
        let row = [fmt_g9(a.rho), a.n.to_string(), a.samples.to_string(), fmt_g9(tc), fmt_g9(est.mean), fmt_g9(est.std_err)];
        fs::write(out.join("tc_oracle.csv"), format!("{ORACLE_HEADER}\n{}\n", row.join(",")))?;
        let mut m = Manifest::new("tc-oracle");
        m.push("rho", fmt_g9(a.rho));
        m.push("n", a.n);
        m.push("samples", a.samples);
        m.push("seed", a.seed);
        m.write(out, "tc_oracle")?;
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).map_err(|e| MtcError::Contract(format!("{}: {e}", p.display())))?;
        rows.extend(parse_report_csv(&text)?);
    }
    if a.normalize {
        if a.horizon == 0 {
            return Err(CliError::Usage("--horizon must be positive".into()));
        }
        normalize(&mut rows, a.horizon)?;
    }
    let _lock = OutputLock::acquire(&a.out)?;
    fs::write(a.out.join("report.csv"), report_csv(&rows))?;
    let curves: Vec<_> = rows.iter().filter(|r| r.seed.is_none()).cloned().collect();
    fs::write(a.out.join("curves.csv"), report_csv(&curves))?;
    let mut m = Manifest::new("report");
    m.push("inputs", join(&a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    m.push("normalize", a.normalize);
    m.push("horizon", a.horizon);
    m.write(&a.out, "report")?;
    println!("{} rows, {} aggregate", rows.len(), curves.len());
    Ok(())
}
