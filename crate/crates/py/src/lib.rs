//! Python bindings for the core types and operations: synthetic data,
//! training, encode/decode, checkpoints, test-time sweeps, and the
//! scaling-law fitters. Build with `cargo build -p sae-py --release` and
//! import the produced cdylib as `sae_py`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sae_core::autoencoder::{self, AeConfig, AutoencoderParams, Latents};
use sae_core::checkpoint::Checkpoint;
use sae_core::data::{ActivationStore, DictDataConfig};
use sae_core::error::Error;
use sae_core::tensor::SparseVec;
use sae_core::trainer::{train as train_impl, StopMode, TrainConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) | Error::Underdetermined(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn store_from_rows(rows: Vec<Vec<f32>>) -> PyResult<ActivationStore> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("rows must be non-empty"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must share a dimension"));
    }
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    ActivationStore::new(d, data.len() / d, data).map_err(py_err)
}

/// Keeps the `k` largest values; ties break toward the lower index.
#[pyfunction]
#[pyo3(signature = (values, k, relu_after = true))]
fn topk_select(values: Vec<f32>, k: usize, relu_after: bool) -> PyResult<Vec<(u32, f32)>> {
    let z = sae_core::tensor::topk_select(&values, k, relu_after).map_err(py_err)?;
    Ok(z.entries().to_vec())
}

/// Analytic dense/sparse flop counts for one of the training-path kernels.
#[pyfunction]
fn count_flops(py: Python<'_>, kernel: &str, b: u64, d: u64, n: u64, k: u64) -> PyResult<PyObject> {
    let op = sae_core::tensor::KernelOp::parse(kernel).map_err(py_err)?;
    let rep = sae_core::tensor::count_flops(op, b, d, n, k).map_err(py_err)?;
    let out = PyDict::new_bound(py);
    out.set_item("dense_flops", rep.dense_flops)?;
    out.set_item("sparse_flops", rep.sparse_flops)?;
    out.set_item("ratio", rep.ratio)?;
    Ok(out.into())
}

/// I.i.d. standard-normal activation rows.
#[pyfunction]
fn gen_gaussian(d: usize, rows: usize, seed: u64) -> PyResult<Vec<Vec<f32>>> {
    let store = sae_core::data::gen_gaussian(d, rows, seed).map_err(py_err)?;
    Ok((0..store.rows()).map(|r| store.row(r).to_vec()).collect())
}

/// Sparse-superposition rows `x = D a + sigma * noise`; returns
/// `(rows, dictionary_rows)`.
#[pyfunction]
#[pyo3(signature = (d, n_true, k_true, sigma, rows, seed))]
fn gen_dictionary(
    d: usize,
    n_true: usize,
    k_true: usize,
    sigma: f32,
    rows: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let cfg = DictDataConfig {
        d,
        n_true,
        k_true,
        value_range: (0.5, 1.5),
        noise_sigma: sigma,
        seed,
    };
    let (store, truth) = sae_core::data::gen_dictionary_data(&cfg, rows).map_err(py_err)?;
    let data = (0..store.rows()).map(|r| store.row(r).to_vec()).collect();
    let dict = (0..n_true).map(|i| truth.dictionary.row(i).to_vec()).collect();
    Ok((data, dict))
}

/// Fits `y = alpha x^beta (+ e)` and returns the parameters.
#[pyfunction]
#[pyo3(signature = (points, irreducible = true))]
fn fit_power_law(py: Python<'_>, points: Vec<(f64, f64)>, irreducible: bool) -> PyResult<PyObject> {
    let fit = sae_core::scaling::fit_power_law(&points, irreducible).map_err(py_err)?;
    let out = PyDict::new_bound(py);
    out.set_item("alpha", fit.alpha)?;
    out.set_item("beta", fit.beta)?;
    out.set_item("irreducible", fit.irreducible)?;
    out.set_item("log_rms", fit.log_rms)?;
    Ok(out.into())
}

/// A trained autoencoder with its configuration.
#[pyclass]
struct Autoencoder {
    params: AutoencoderParams,
    config: AeConfig,
    tokens_seen: u64,
    step: u64,
}

#[pymethods]
impl Autoencoder {
    #[getter]
    fn n(&self) -> usize {
        self.params.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.params.d
    }

    #[getter]
    fn k(&self) -> usize {
        self.config.k
    }

    #[getter]
    fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    /// Normalizes a raw activation row and encodes it; returns the sparse
    /// latents as (index, value) pairs.
    fn encode(&self, x: Vec<f32>) -> PyResult<Vec<(u32, f32)>> {
        let (normed, _) = autoencoder::normalize_input(&x).map_err(py_err)?;
        let z = autoencoder::encode(&self.params, &self.config, &normed).map_err(py_err)?;
        match z {
            Latents::Sparse(sv) => Ok(sv.entries().to_vec()),
            Latents::Dense(dv) => Ok(dv
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect()),
        }
    }

    /// Decodes (index, value) pairs back to the normalized input space.
    fn decode(&self, latents: Vec<(u32, f32)>) -> PyResult<Vec<f32>> {
        let mut pairs = latents;
        pairs.sort_unstable_by_key(|&(i, _)| i);
        let z = SparseVec::new(self.params.n, pairs).map_err(py_err)?;
        autoencoder::decode(&self.params, &Latents::Sparse(z)).map_err(py_err)
    }

    /// Normalized reconstruction MSE over raw rows.
    fn nmse(&self, rows: Vec<Vec<f32>>) -> PyResult<f32> {
        if rows.is_empty() {
            return Err(PyValueError::new_err("rows must be non-empty"));
        }
        let normed: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| autoencoder::normalize_input(r).map(|(x, _)| x))
            .collect::<Result<_, _>>()
            .map_err(py_err)?;
        let refs: Vec<&[f32]> = normed.iter().map(|r| r.as_slice()).collect();
        let baseline = autoencoder::mean_predictor_baseline(&refs).map_err(py_err)?;
        let mut total = 0.0f64;
        for x in &normed {
            let z = autoencoder::encode(&self.params, &self.config, x).map_err(py_err)?;
            let x_hat = autoencoder::decode(&self.params, &z).map_err(py_err)?;
            total += autoencoder::sq_err(x, &x_hat) as f64;
        }
        Ok(((total / normed.len() as f64) as f32) / baseline)
    }

    /// Mean L0 and normalized MSE with a test-time TopK(k') swap.
    fn test_time_topk(&self, rows: Vec<Vec<f32>>, k_values: Vec<usize>) -> PyResult<Vec<(f32, f32, f32)>> {
        let normed: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| autoencoder::normalize_input(r).map(|(x, _)| x))
            .collect::<Result<_, _>>()
            .map_err(py_err)?;
        let points = sae_core::eval::test_time_topk(&self.params, &self.config, &normed, &k_values)
            .map_err(py_err)?;
        Ok(points.iter().map(|p| (p.setting, p.l0, p.nmse)).collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            params: self.params.clone(),
            config: self.config.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
            ema: None,
            adam: None,
        };
        ckpt.save(std::path::Path::new(path)).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Autoencoder> {
        let ckpt = Checkpoint::load(std::path::Path::new(path)).map_err(py_err)?;
        Ok(Autoencoder {
            params: ckpt.params,
            config: ckpt.config,
            tokens_seen: ckpt.tokens_seen,
            step: ckpt.step,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Autoencoder(n={}, d={}, k={}, activation={:?}, tokens_seen={})",
            self.params.n, self.params.d, self.config.k, self.config.activation, self.tokens_seen
        )
    }
}

/// Trains a TopK autoencoder on raw activation rows and returns the model
/// plus its training log as a list of dict records.
#[pyfunction]
#[pyo3(signature = (rows, n, k, lr = 1e-3, batch_size = 4096, budget_tokens = 1_000_000, seed = 0, activation = "topk", l1_coeff = 0.0, converge = false))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    rows: Vec<Vec<f32>>,
    n: usize,
    k: usize,
    lr: f32,
    batch_size: usize,
    budget_tokens: u64,
    seed: u64,
    activation: &str,
    l1_coeff: f32,
    converge: bool,
) -> PyResult<(Autoencoder, Vec<PyObject>)> {
    let store = store_from_rows(rows)?;
    let ae = match activation {
        "topk" => AeConfig::topk(n, k),
        "multi_topk" => AeConfig::multi_topk(n, k),
        "relu" => AeConfig::relu(n, l1_coeff),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown activation '{}' (topk | multi_topk | relu)",
                other
            )))
        }
    };
    let mut tc = TrainConfig::new(budget_tokens, lr, seed);
    tc.batch_size = batch_size;
    if converge {
        tc.stop_mode = StopMode::Converged;
    }
    let outcome = train_impl(&ae, &tc, &store).map_err(py_err)?;
    let mut log = Vec::with_capacity(outcome.log.records.len());
    for r in &outcome.log.records {
        let d = PyDict::new_bound(py);
        d.set_item("tokens_seen", r.tokens_seen)?;
        d.set_item("train_mse", r.train_mse)?;
        d.set_item("val_nmse", r.val_nmse)?;
        d.set_item("dead_fraction", r.dead_fraction)?;
        d.set_item("l0", r.l0)?;
        d.set_item("aux_loss", r.aux_loss)?;
        d.set_item("lr", r.lr)?;
        d.set_item("val_nmse_ema", r.val_nmse_ema)?;
        log.push(d.into());
    }
    let model = Autoencoder {
        params: outcome.checkpoint.params,
        config: outcome.checkpoint.config,
        tokens_seen: outcome.checkpoint.tokens_seen,
        step: outcome.checkpoint.step,
    };
    Ok((model, log))
}

#[pymodule]
fn sae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(topk_select, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(gen_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dictionary, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Autoencoder>()?;
    Ok(())
}
