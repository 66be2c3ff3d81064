//! Command-line surface: dataset generation, training, evaluation, bound
//! analysis, and the inner-step ablation. Every command is deterministic for
//! a fixed seed, and reruns with identical inputs produce byte-identical
//! output files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use rand::Rng;

use moorl::analysis::{
    random_bound_trial, random_mdp, random_policy, verify_bounds, STREAM_BOUND_TRIAL,
};
use moorl::data::{
    generate_offline_dataset, load_dataset, save_dataset, ScriptedExpert, Tier,
};
use moorl::envs::{build_env, Env, EnvOverrides, TabularMdp};
use moorl::meta::{
    ablate_k, evaluate_policy, load_checkpoint, metrics_csv_string, reference_returns,
    save_checkpoint, train_moorl, train_sac_mixed, train_sac_online, MoorlConfig, OptimKind,
    STREAM_EVAL, STREAM_TRAIN,
};
use moorl::rng::substream;

#[derive(Parser)]
#[command(
    name = "moorl",
    version,
    about = "Desk-scale laboratory for meta offline-online reinforcement learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an offline dataset with a behavior policy of the given tier.
    GenData {
        /// Builtin environment id (grid5, grid8, pointmass) or a map file.
        #[arg(long)]
        env: String,
        /// Behavior quality: random, medium, or expert.
        #[arg(long)]
        tier: String,
        /// Number of transitions.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent and write metrics.csv plus a final checkpoint.
    Train {
        /// Algorithm: moorl, sac (online only), or mixed.
        #[arg(long)]
        algo: String,
        #[arg(long)]
        env: String,
        /// Offline dataset; required for moorl and mixed.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Single key=value override; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Roll out a checkpointed policy and print its score.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify the mixed-distribution performance bounds on tabular models,
    /// one JSON line per trial.
    AnalyzeBound {
        /// Map file, builtin grid id, or random:SxA:seed for fresh models.
        #[arg(long)]
        mdp: String,
        /// Fix the mixture weight instead of sampling it per trial.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 100)]
        trials: u32,
        /// Trial seed for map-file models (random:SxA:seed carries its own).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep the inner adaptation steps K over seeds and aggregate scores.
    AblateK {
        /// Comma-separated K values, e.g. 2,4,6.
        #[arg(long)]
        k: String,
        /// Comma list or inclusive range, e.g. 0,1,2 or 0..9.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        env: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Marker for user-input errors so main can exit 2 instead of 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<Usage>().is_some() { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<i32> {
    match cmd {
        Cmd::GenData {
            env,
            tier,
            n,
            seed,
            out,
        } => cmd_gen_data(&env, &tier, n, seed, &out),
        Cmd::Train {
            algo,
            env,
            dataset,
            config,
            set,
            seed,
            out_dir,
        } => cmd_train(&algo, &env, dataset, config, &set, seed, &out_dir),
        Cmd::Eval {
            checkpoint,
            env,
            episodes,
            seed,
        } => cmd_eval(&checkpoint, &env, episodes, seed),
        Cmd::AnalyzeBound {
            mdp,
            lambda,
            trials,
            seed,
        } => cmd_analyze_bound(&mdp, lambda, trials, seed),
        Cmd::AblateK {
            k,
            seeds,
            env,
            dataset,
            config,
            set,
            out_dir,
        } => cmd_ablate_k(&k, &seeds, &env, &dataset, config, &set, &out_dir),
    }
}

// ---------------------------------------------------------------------------
// Run configuration: key=value file, then --set overrides, then flags.

#[derive(Debug)]
struct Resolved {
    cfg: MoorlConfig,
    overrides: EnvOverrides,
    env_id: String,
    dataset: Option<PathBuf>,
    algo: String,
}

fn parse_kv_file(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_kv_flag(raw: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| usage(format!("--set '{raw}': expected key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn num<T: std::str::FromStr>(key: &str, val: &str) -> anyhow::Result<T> {
    val.parse::<T>()
        .map_err(|_| usage(format!("bad value '{val}' for {key}")))
}

fn parse_bool(key: &str, val: &str) -> anyhow::Result<bool> {
    match val {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(usage(format!("bad value '{val}' for {key} (true/false)"))),
    }
}

fn parse_hidden(val: &str) -> anyhow::Result<Vec<usize>> {
    if val.is_empty() || val == "-" {
        return Ok(Vec::new());
    }
    val.split(',')
        .map(|w| num::<usize>("hidden", w.trim()))
        .collect()
}

/// Merge config file, --set pairs, and dedicated flags into one trainer
/// configuration. Later assignments win; unknown keys are rejected.
fn resolve_config(
    env_flag: &str,
    algo: &str,
    dataset_flag: Option<PathBuf>,
    config: Option<PathBuf>,
    set: &[String],
    seed_flag: Option<u64>,
) -> anyhow::Result<Resolved> {
    let mut kv: Vec<(String, String)> = match &config {
        Some(path) => parse_kv_file(path)?,
        None => Vec::new(),
    };
    for raw in set {
        kv.push(parse_kv_flag(raw)?);
    }

    // Environment-shaping keys first; the env fixes the trainer defaults.
    let mut overrides = EnvOverrides::default();
    let mut env_id = env_flag.to_string();
    for (k, v) in &kv {
        match k.as_str() {
            "slip" => overrides.slip = Some(num("slip", v)?),
            "gamma" => overrides.gamma = Some(num("gamma", v)?),
            "horizon" => overrides.horizon = Some(num("horizon", v)?),
            "env" => env_id = v.clone(),
            _ => {}
        }
    }
    if !env_flag.is_empty() {
        env_id = env_flag.to_string();
    }
    let env = build_env(&env_id, &overrides)?;
    let mut cfg = MoorlConfig::for_env(env.as_ref());
    let mut dataset = dataset_flag;

    for (k, v) in &kv {
        match k.as_str() {
            "slip" | "gamma" | "horizon" | "env" => {}
            "algo" | "out_dir" => {} // always set by flags
            "dataset" => {
                if dataset.is_none() {
                    dataset = Some(PathBuf::from(v));
                }
            }
            "seed" => cfg.seed = num("seed", v)?,
            "total_steps" => cfg.total_steps = num(k, v)?,
            "inner_steps" => cfg.inner_steps = num(k, v)?,
            "inner_lr" => cfg.inner_lr = num(k, v)?,
            "meta_lr_base" => cfg.meta_lr_base = num(k, v)?,
            "offline_choice_prob" => cfg.offline_choice_prob = num(k, v)?,
            "batch_size" => cfg.batch_size = num(k, v)?,
            "warmup_steps" => cfg.warmup_steps = num(k, v)?,
            "eval_every" => cfg.eval_every = num(k, v)?,
            "eval_episodes" => cfg.eval_episodes = num(k, v)?,
            "env_steps_per_epoch" => cfg.env_steps_per_epoch = num(k, v)?,
            "hidden" => cfg.hidden = parse_hidden(v)?,
            "inner_optim" => cfg.inner_optim = v.parse::<OptimKind>()?,
            "meta_optim" => cfg.meta_optim = v.parse::<OptimKind>()?,
            "target_entropy" => cfg.sac.target_entropy = num(k, v)?,
            "ema_rho" => cfg.sac.ema_rho = num(k, v)?,
            "use_cdq" => cfg.sac.use_cdq = parse_bool(k, v)?,
            "use_entropy_backup" => cfg.sac.use_entropy_backup = parse_bool(k, v)?,
            other => return Err(usage(format!("unknown config key '{other}'"))),
        }
    }
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    // The optimizer step size and the critic loss share one learning rate.
    cfg.sac.lr = cfg.inner_lr;
    cfg.validate()?;
    Ok(Resolved {
        cfg,
        overrides,
        env_id,
        dataset,
        algo: algo.to_string(),
    })
}

/// The fully-resolved key=value listing written next to every training run.
fn resolved_text(r: &Resolved, env: &dyn Env, out_dir: &Path) -> String {
    let mut map = BTreeMap::new();
    let cfg = &r.cfg;
    map.insert("algo", r.algo.clone());
    map.insert("env", r.env_id.clone());
    if let Some(ds) = &r.dataset {
        map.insert("dataset", ds.display().to_string());
    }
    map.insert("out_dir", out_dir.display().to_string());
    map.insert("seed", cfg.seed.to_string());
    map.insert("gamma", env.gamma().to_string());
    map.insert("horizon", env.horizon().to_string());
    if let Some(slip) = r.overrides.slip {
        map.insert("slip", slip.to_string());
    }
    map.insert("total_steps", cfg.total_steps.to_string());
    map.insert("inner_steps", cfg.inner_steps.to_string());
    map.insert("inner_lr", cfg.inner_lr.to_string());
    map.insert("meta_lr_base", cfg.meta_lr_base.to_string());
    map.insert("offline_choice_prob", cfg.offline_choice_prob.to_string());
    map.insert("batch_size", cfg.batch_size.to_string());
    map.insert("warmup_steps", cfg.warmup_steps.to_string());
    map.insert("eval_every", cfg.eval_every.to_string());
    map.insert("eval_episodes", cfg.eval_episodes.to_string());
    map.insert("env_steps_per_epoch", cfg.env_steps_per_epoch.to_string());
    let hidden = if cfg.hidden.is_empty() {
        "-".to_string()
    } else {
        cfg.hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    map.insert("hidden", hidden);
    map.insert("inner_optim", cfg.inner_optim.to_string());
    map.insert("meta_optim", cfg.meta_optim.to_string());
    map.insert("target_entropy", cfg.sac.target_entropy.to_string());
    map.insert("ema_rho", cfg.sac.ema_rho.to_string());
    map.insert("use_cdq", cfg.sac.use_cdq.to_string());
    map.insert("use_entropy_backup", cfg.sac.use_entropy_backup.to_string());
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands.

fn cmd_gen_data(env_id: &str, tier: &str, n: usize, seed: u64, out: &Path) -> anyhow::Result<i32> {
    let tier: Tier = tier.parse().map_err(|e| usage(format!("{e}")))?;
    let env = build_env(env_id, &EnvOverrides::default())?;
    // Non-tabular environments get their scripted controller as the expert;
    // tabular ones plan their own.
    let expert = ScriptedExpert;
    let expert_src = if env.tabular_mdp().is_some() {
        None
    } else {
        Some(&expert as &dyn moorl::data::ActionSource)
    };
    let ds = generate_offline_dataset(env.as_ref(), tier, n, seed, expert_src)?;
    save_dataset(&ds, out)?;
    let m = ds.meta();
    println!(
        "wrote {} transitions ({} tier) for {} to {} (ret_random={}, ret_expert={})",
        m.size,
        m.tier,
        m.env_id,
        out.display(),
        m.ret_random,
        m.ret_expert
    );
    Ok(0)
}

fn cmd_train(
    algo: &str,
    env_id: &str,
    dataset: Option<PathBuf>,
    config: Option<PathBuf>,
    set: &[String],
    seed: Option<u64>,
    out_dir: &Path,
) -> anyhow::Result<i32> {
    if !matches!(algo, "moorl" | "sac" | "mixed") {
        return Err(usage(format!("unknown algorithm '{algo}' (moorl|sac|mixed)")));
    }
    if algo == "sac" && dataset.is_some() {
        return Err(usage("the online baseline takes no dataset"));
    }
    let mut r = resolve_config(env_id, algo, dataset, config, set, seed)?;
    if algo == "sac" {
        // A dataset key from a shared config file is simply unused here.
        r.dataset = None;
    }
    let env = build_env(&r.env_id, &r.overrides)?;
    let offline = match &r.dataset {
        Some(path) => Some(
            load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?,
        ),
        None if algo != "sac" => {
            return Err(usage(format!("--dataset is required for {algo}")));
        }
        None => None,
    };
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(
        out_dir.join("config.resolved"),
        resolved_text(&r, env.as_ref(), out_dir),
    )?;

    let mut rng = substream(r.cfg.seed, STREAM_TRAIN, 0);
    let (state, records) = match algo {
        "moorl" => train_moorl(env.as_ref(), offline.as_ref().unwrap(), &r.cfg, &mut rng)?,
        "sac" => train_sac_online(env.as_ref(), &r.cfg, &mut rng)?,
        _ => train_sac_mixed(env.as_ref(), offline.as_ref().unwrap(), &r.cfg, &mut rng)?,
    };
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv_string(&records))?;
    save_checkpoint(&state, env.id(), &out_dir.join("final.ckpt"))?;
    let last = records.last().expect("training always evaluates at the end");
    println!(
        "finished {} on {} after {} steps: eval_return={} normalized_score={}",
        algo, r.env_id, state.step, last.eval_return, last.normalized_score
    );
    Ok(0)
}

fn cmd_eval(checkpoint: &Path, env_id: &str, episodes: usize, seed: u64) -> anyhow::Result<i32> {
    let (state, ckpt_env) = load_checkpoint(checkpoint)?;
    let env = build_env(env_id, &EnvOverrides::default())?;
    if env.id() != ckpt_env {
        anyhow::bail!(
            "checkpoint was trained on '{ckpt_env}' but evaluation requested '{}'",
            env.id()
        );
    }
    let (ret_random, ret_expert) = reference_returns(env.as_ref(), &mut substream(seed, STREAM_EVAL, 1))?;
    let mut rng = substream(seed, STREAM_EVAL, 0);
    let (mean_return, score) = evaluate_policy(
        &state.spec,
        env.as_ref(),
        &state.meta,
        ret_random,
        ret_expert,
        episodes,
        &mut rng,
    )?;
    println!("mean_return={mean_return}");
    println!("normalized_score={score}");
    Ok(0)
}

/// `random:SxA:seed` or a tabular environment (builtin id or map file).
enum BoundModel {
    Random { n_states: usize, n_actions: usize, seed: u64 },
    Fixed { mdp: TabularMdp, seed: u64 },
}

fn parse_bound_model(spec: &str, seed_flag: u64) -> anyhow::Result<BoundModel> {
    if let Some(rest) = spec.strip_prefix("random:") {
        let (dims, seed) = rest
            .split_once(':')
            .ok_or_else(|| usage(format!("bad model spec '{spec}' (random:SxA:seed)")))?;
        let (s, a) = dims
            .split_once('x')
            .ok_or_else(|| usage(format!("bad dimensions '{dims}' (SxA)")))?;
        return Ok(BoundModel::Random {
            n_states: num("states", s)?,
            n_actions: num("actions", a)?,
            seed: num("seed", seed)?,
        });
    }
    let env = build_env(spec, &EnvOverrides::default())?;
    let mdp = env
        .tabular_mdp()
        .ok_or_else(|| usage(format!("'{spec}' is not a tabular model")))?
        .clone();
    Ok(BoundModel::Fixed { mdp, seed: seed_flag })
}

fn cmd_analyze_bound(
    spec: &str,
    lambda: Option<f64>,
    trials: u32,
    seed_flag: u64,
) -> anyhow::Result<i32> {
    if trials == 0 {
        return Err(usage("need at least one trial"));
    }
    if let Some(l) = lambda {
        if !(0.0..=1.0).contains(&l) {
            return Err(usage(format!("lambda {l} outside [0, 1]")));
        }
    }
    let model = parse_bound_model(spec, seed_flag)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut violations = 0u32;
    for trial in 0..trials {
        let report = match &model {
            BoundModel::Random {
                n_states,
                n_actions,
                seed,
            } => {
                if let Some(lam) = lambda {
                    let mut rng = substream(*seed, STREAM_BOUND_TRIAL, trial);
                    let mdp = random_mdp(*n_states, *n_actions, &mut rng);
                    let sparsify = rng.random::<f64>() < 0.25;
                    let mu = random_policy(*n_states, *n_actions, sparsify, &mut rng);
                    let pi = random_policy(*n_states, *n_actions, false, &mut rng);
                    verify_bounds(&mdp, &mu, &pi, lam)?
                } else {
                    random_bound_trial(*seed, trial, *n_states, *n_actions)?
                }
            }
            BoundModel::Fixed { mdp, seed } => {
                let mut rng = substream(*seed, STREAM_BOUND_TRIAL, trial);
                let sparsify = rng.random::<f64>() < 0.25;
                let mu = random_policy(mdp.n_states(), mdp.n_actions(), sparsify, &mut rng);
                let pi = random_policy(mdp.n_states(), mdp.n_actions(), false, &mut rng);
                let lam = lambda.unwrap_or_else(|| rng.random_range(0.0..=1.0));
                verify_bounds(mdp, &mu, &pi, lam)?
            }
        };
        if !(report.holds_tv && report.holds_pinsker) {
            violations += 1;
        }
        use std::io::Write;
        if let Err(e) = writeln!(out, "{}", report.to_json_line()) {
            // The reader hung up; stop streaming without a panic.
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                return Ok(0);
            }
            return Err(e.into());
        }
    }
    if violations > 0 {
        eprintln!("bound violated in {violations} of {trials} trials");
        return Ok(1);
    }
    Ok(0)
}

fn parse_usize_list(raw: &str) -> anyhow::Result<Vec<usize>> {
    raw.split(',')
        .map(|p| num::<usize>("k", p.trim()))
        .collect()
}

/// `0..9` (inclusive) or a comma list.
fn parse_seed_list(raw: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = raw.split_once("..") {
        let lo: u64 = num("seeds", a.trim())?;
        let hi: u64 = num("seeds", b.trim())?;
        if hi < lo {
            return Err(usage(format!("empty seed range '{raw}'")));
        }
        return Ok((lo..=hi).collect());
    }
    raw.split(',')
        .map(|p| num::<u64>("seeds", p.trim()))
        .collect()
}

fn cmd_ablate_k(
    k_raw: &str,
    seeds_raw: &str,
    env_id: &str,
    dataset: &Path,
    config: Option<PathBuf>,
    set: &[String],
    out_dir: &Path,
) -> anyhow::Result<i32> {
    let k_values = parse_usize_list(k_raw)?;
    let seeds = parse_seed_list(seeds_raw)?;
    let r = resolve_config(env_id, "moorl", Some(dataset.to_path_buf()), config, set, None)?;
    let env = build_env(&r.env_id, &r.overrides)?;
    let offline = load_dataset(dataset)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(
        out_dir.join("config.resolved"),
        resolved_text(&r, env.as_ref(), out_dir),
    )?;
    let rows = ablate_k(env.as_ref(), &offline, &r.cfg, &k_values, &seeds)?;
    let mut csv = String::from("k,mean_score,std_score\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{}\n", row.k, row.mean_score, row.std_score));
        println!(
            "K={}: mean normalized score {} (std {}, {} seeds)",
            row.k,
            row.mean_score,
            row.std_score,
            seeds.len()
        );
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(0)
}
