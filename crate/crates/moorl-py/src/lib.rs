//! Python bindings for the core library: the bound verifier, dataset
//! generation, reference returns, and checkpoint evaluation. Everything is
//! seeded and deterministic, matching the command line tool stream for
//! stream, so numbers produced here agree bit for bit with `moorl` runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moorl::analysis::random_bound_trial;
use moorl::data::{generate_offline_dataset, load_dataset, save_dataset, ScriptedExpert, Tier};
use moorl::envs::{build_env, EnvOverrides};
use moorl::meta::{evaluate_policy, load_checkpoint, reference_returns, STREAM_EVAL};
use moorl::rng::substream;

fn py_err(e: moorl::Error) -> PyErr {
    match e {
        moorl::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Run one seeded verifier trial on a fresh random MDP and return every
/// field of the report as a dict. `kl` is `inf` when the target policy
/// leaves the behavior policy's support.
#[pyfunction]
fn bound_trial<'py>(
    py: Python<'py>,
    seed: u64,
    trial: u32,
    n_states: usize,
    n_actions: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = random_bound_trial(seed, trial, n_states, n_actions).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("lambda", r.lambda)?;
    d.set_item("delta_r", r.delta_r)?;
    d.set_item("tv", r.tv)?;
    d.set_item("kl", r.kl)?;
    d.set_item("tv_bound", r.tv_bound)?;
    d.set_item("pinsker_bound", r.pinsker_bound)?;
    d.set_item("r_max", r.r_max)?;
    d.set_item("gamma", r.gamma)?;
    d.set_item("holds_tv", r.holds_tv)?;
    d.set_item("holds_pinsker", r.holds_pinsker)?;
    Ok(d)
}

fn meta_dict<'py>(py: Python<'py>, m: &moorl::data::DatasetMeta) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("env", &m.env_id)?;
    d.set_item("tier", m.tier.to_string())?;
    d.set_item("size", m.size)?;
    d.set_item("seed", m.behavior_policy_seed)?;
    d.set_item("ret_random", m.ret_random)?;
    d.set_item("ret_expert", m.ret_expert)?;
    Ok(d)
}

/// Generate an offline dataset for a builtin environment and write it to
/// `out`. Identical arguments always produce byte-identical files. Returns
/// the dataset metadata as a dict.
#[pyfunction]
fn gen_dataset<'py>(
    py: Python<'py>,
    env: &str,
    tier: &str,
    n: usize,
    seed: u64,
    out: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let tier: Tier = tier.parse().map_err(py_err)?;
    let env = build_env(env, &EnvOverrides::default()).map_err(py_err)?;
    let expert = ScriptedExpert;
    let expert_src = if env.tabular_mdp().is_some() {
        None
    } else {
        Some(&expert as &dyn moorl::data::ActionSource)
    };
    let ds = generate_offline_dataset(env.as_ref(), tier, n, seed, expert_src).map_err(py_err)?;
    save_dataset(&ds, &out).map_err(py_err)?;
    meta_dict(py, ds.meta())
}

/// Read back the metadata header of a dataset file as a dict.
#[pyfunction]
fn dataset_meta<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ds = load_dataset(&path).map_err(py_err)?;
    meta_dict(py, ds.meta())
}

/// Discounted returns of the uniform-random and expert reference policies
/// for a builtin environment, as `(ret_random, ret_expert)`. Exact for the
/// tabular grids, Monte Carlo (seeded) for the continuous task.
#[pyfunction]
#[pyo3(signature = (env, seed = 0))]
fn refs(env: &str, seed: u64) -> PyResult<(f64, f64)> {
    let env = build_env(env, &EnvOverrides::default()).map_err(py_err)?;
    let mut rng = substream(seed, STREAM_EVAL, 1);
    reference_returns(env.as_ref(), &mut rng).map_err(py_err)
}

/// Load a training checkpoint and evaluate its deterministic policy on the
/// environment it was trained for. Returns a dict with `mean_return` and
/// `normalized_score` (0 is the uniform-random policy, 1 the expert).
#[pyfunction]
#[pyo3(signature = (checkpoint, env, episodes = 100, seed = 0))]
fn eval_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    env: &str,
    episodes: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let (state, ckpt_env) = load_checkpoint(&checkpoint).map_err(py_err)?;
    let env = build_env(env, &EnvOverrides::default()).map_err(py_err)?;
    if env.id() != ckpt_env {
        return Err(PyValueError::new_err(format!(
            "checkpoint was trained on {ckpt_env}, not {}",
            env.id()
        )));
    }
    let mut ref_rng = substream(seed, STREAM_EVAL, 1);
    let (ret_random, ret_expert) =
        reference_returns(env.as_ref(), &mut ref_rng).map_err(py_err)?;
    let mut rng = substream(seed, STREAM_EVAL, 0);
    let (mean_return, score) = evaluate_policy(
        &state.spec,
        env.as_ref(),
        &state.meta,
        ret_random,
        ret_expert,
        episodes,
        &mut rng,
    )
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mean_return", mean_return)?;
    d.set_item("normalized_score", score)?;
    Ok(d)
}

#[pymodule]
fn moorl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bound_trial, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_meta, m)?)?;
    m.add_function(wrap_pyfunction!(refs, m)?)?;
    m.add_function(wrap_pyfunction!(eval_checkpoint, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn get_f64(d: &Bound<'_, PyDict>, key: &str) -> f64 {
        d.get_item(key).unwrap().unwrap().extract().unwrap()
    }

    #[test]
    fn trial_reports_cross_the_boundary_intact() {
        Python::initialize();
        Python::attach(|py| {
            let d = bound_trial(py, 7, 0, 5, 3).unwrap();
            let report = random_bound_trial(7, 0, 5, 3).unwrap();
            assert_eq!(get_f64(&d, "tv"), report.tv);
            assert_eq!(get_f64(&d, "tv_bound"), report.tv_bound);
            assert_eq!(get_f64(&d, "delta_r"), report.delta_r);
            let holds: bool = d.get_item("holds_tv").unwrap().unwrap().extract().unwrap();
            assert!(holds);
        });
    }

    #[test]
    fn bad_input_becomes_a_value_error() {
        Python::initialize();
        Python::attach(|py| {
            let tmp = std::env::temp_dir().join("moorl-py-bad-tier.ds");
            let err = gen_dataset(py, "grid5", "imaginary", 4, 0, tmp).unwrap_err();
            assert!(err.is_instance_of::<PyValueError>(py));
        });
    }
}
