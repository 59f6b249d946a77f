//! Python bindings: the loss functions, channel model, prototype memory and
//! a small end-to-end simulator driven by the same TOML configs as the CLI.

use ndarray::{Array2, Array3, Array4};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use ukie_core::channel::{
    equalize, snr_to_noise_variance, transmit_indexed, ChannelConfig, ChannelFrame, ChannelKind,
};
use ukie_core::config::parse_config;
use ukie_core::data::{load_dataset, make_glyphs, make_synthetic, Split};
use ukie_core::error::UkieError;
use ukie_core::eval::{build_memory_from_dataset, evaluate_link, mutual_information_estimate, psnr_from_mse};
use ukie_core::losses;
use ukie_core::memory::{run_network_sim, DeltaBaseline, MergeMode, ProtocolConfig, SemanticMemory};
use ukie_core::models::ModelSet;
use ukie_core::rng::derive_seed;
use ukie_core::training::train;

fn err(e: UkieError) -> PyErr {
    match &e {
        UkieError::Ingestion { .. } | UkieError::Io(_) | UkieError::MissingArtifact(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn batch4(flat: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Array4<f64>> {
    let expect = shape.0 * shape.1 * shape.2 * shape.3;
    if flat.len() != expect {
        return Err(PyValueError::new_err(format!(
            "expected {expect} values for shape {shape:?}, got {}",
            flat.len()
        )));
    }
    Ok(Array4::from_shape_vec(shape, flat).unwrap())
}

/// sigma_n^2 = signal_power / 10^(snr_db/10)
#[pyfunction]
#[pyo3(name = "snr_to_noise_variance")]
fn py_snr_to_noise_variance(snr_db: f64, signal_power: f64) -> f64 {
    snr_to_noise_variance(snr_db, signal_power)
}

/// Peak-1 PSNR in dB from a mean squared error.
#[pyfunction]
fn psnr_from_mse_db(mse: f64) -> f64 {
    psnr_from_mse(mse)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    losses::cosine_similarity(&a, &b).map_err(err)
}

/// Class-conditional Gaussian blobs: (flat images, labels).
#[pyfunction]
fn synthetic_blobs(
    n: usize,
    num_classes: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let ds = make_synthetic(n, num_classes, shape, seed).map_err(err)?;
    Ok((ds.images.into_raw_vec_and_offset().0, ds.labels))
}

/// Procedural digit glyphs: (flat images, labels).
#[pyfunction]
fn glyph_digits(n: usize, shape: (usize, usize, usize), seed: u64) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let ds = make_glyphs(n, shape, seed).map_err(err)?;
    Ok((ds.images.into_raw_vec_and_offset().0, ds.labels))
}

/// Prototype-softmax invariance loss with batch prototypes.
#[pyfunction]
fn invariant_loss(
    zk: Vec<f64>,
    shape: (usize, usize, usize, usize),
    labels: Vec<usize>,
) -> PyResult<f64> {
    let zk = batch4(zk, shape)?;
    let protos = losses::batch_prototypes(&zk, &labels).map_err(err)?;
    losses::invariant_loss(&zk, &labels, &protos).map_err(err)
}

/// Hinge on the within-class spread of the variant representations.
#[pyfunction]
fn variant_loss(
    zv: Vec<f64>,
    shape: (usize, usize, usize, usize),
    labels: Vec<usize>,
    epsilon_var: f64,
) -> PyResult<f64> {
    Ok(losses::variant_loss(&batch4(zv, shape)?, &labels, epsilon_var))
}

/// Batch-mean softmax cross-entropy.
#[pyfunction]
fn classification_loss(logits: Vec<f64>, num_classes: usize, labels: Vec<usize>) -> PyResult<f64> {
    if labels.is_empty() || logits.len() != labels.len() * num_classes {
        return Err(PyValueError::new_err("logits must be batch x num_classes"));
    }
    let arr = Array2::from_shape_vec((labels.len(), num_classes), logits).unwrap();
    Ok(losses::classification_loss(&arr, &labels))
}

/// Binned random-projection MI estimate between two representation batches.
#[pyfunction]
fn mutual_information(
    zk: Vec<f64>,
    zk_dim: usize,
    zv: Vec<f64>,
    zv_dim: usize,
    bins: usize,
    pairs: usize,
    seed: u64,
) -> PyResult<f64> {
    if zk_dim == 0 || zv_dim == 0 || zk.len() % zk_dim != 0 || zv.len() % zv_dim != 0 {
        return Err(PyValueError::new_err("flat arrays must be multiples of their dims"));
    }
    let a = Array2::from_shape_vec((zk.len() / zk_dim, zk_dim), zk).unwrap();
    let b = Array2::from_shape_vec((zv.len() / zv_dim, zv_dim), zv).unwrap();
    mutual_information_estimate(&a, &b, bins, pairs, seed).map_err(err)
}

fn parse_kind(kind: &str) -> PyResult<ChannelKind> {
    match kind {
        "awgn" => Ok(ChannelKind::Awgn),
        "rayleigh" => Ok(ChannelKind::Rayleigh),
        other => Err(PyValueError::new_err(format!("unknown channel kind '{other}'"))),
    }
}

/// Transmits paired-real symbols through the configured channel and applies
/// perfect-CSI equalization. Returns (equalized reals, |h|, erased).
#[pyfunction]
fn channel_roundtrip(
    symbols: Vec<f64>,
    kind: &str,
    snr_db: f64,
    seed: u64,
    frame_index: u64,
) -> PyResult<(Vec<f64>, f64, bool)> {
    let cfg = ChannelConfig {
        kind: parse_kind(kind)?,
        snr_db,
        seed,
        compression_ratio: 1.0,
    };
    let frame = ChannelFrame::from_reals(&symbols, 0).map_err(err)?;
    let rx = transmit_indexed(&frame, &cfg, frame_index);
    let eq = equalize(&rx);
    Ok((eq.to_reals(), rx.h.norm(), eq.erased))
}

/// Per-user prototype store with the threshold-gated broadcast check.
#[pyclass]
struct Memory {
    inner: SemanticMemory,
    shape: Option<(usize, usize, usize)>,
}

#[pymethods]
impl Memory {
    #[new]
    fn new(user_id: usize, kappa: f64, tau: u64) -> PyResult<Self> {
        Ok(Memory { inner: SemanticMemory::new(user_id, kappa, tau).map_err(err)?, shape: None })
    }

    fn update_local(
        &mut self,
        class: usize,
        prototype: Vec<f64>,
        shape: (usize, usize, usize),
        t: u64,
        ema_beta: f64,
    ) -> PyResult<()> {
        if let Some(s) = self.shape {
            if s != shape {
                return Err(PyValueError::new_err(format!("prototype shape {shape:?} != {s:?}")));
            }
        }
        let expect = shape.0 * shape.1 * shape.2;
        if prototype.len() != expect {
            return Err(PyValueError::new_err("prototype length does not match shape"));
        }
        let p = Array3::from_shape_vec(shape, prototype).unwrap();
        self.inner.update_local(class, &p, t, ema_beta);
        self.shape = Some(shape);
        Ok(())
    }

    fn lookup(&self, class: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.lookup(class).map_err(err)?.iter().copied().collect())
    }

    fn classes(&self) -> Vec<usize> {
        self.inner.classes()
    }

    /// Returns (delta_norm, broadcast happened) and advances the baselines.
    fn should_broadcast(&mut self, t: u64) -> (f64, bool) {
        let d = self.inner.should_broadcast(t, DeltaBaseline::LastBroadcast);
        (d.delta_norm, d.message.is_some())
    }
}

/// Multi-user sparse knowledge-update simulation; returns a summary dict.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn simulate_protocol(
    py: Python<'_>,
    users: usize,
    classes: usize,
    kappa: f64,
    tau: u64,
    horizon: u64,
    drift_rate: f64,
    drift_stagger: f64,
    merge_mode: &str,
    seed: u64,
) -> PyResult<PyObject> {
    let merge = match merge_mode {
        "additive" => MergeMode::Additive,
        "replace" => MergeMode::Replace,
        other => return Err(PyValueError::new_err(format!("unknown merge mode '{other}'"))),
    };
    let cfg = ProtocolConfig {
        users,
        classes,
        kappa,
        tau,
        horizon,
        drift_rate,
        drift_stagger,
        merge_mode: merge,
        delta_baseline: DeltaBaseline::LastBroadcast,
        proto_shape: (2, 2, 2),
    };
    let res = run_network_sim(&cfg, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("broadcasts_sent", res.ledger.broadcasts_sent.clone())?;
    out.set_item("broadcasts_suppressed", res.ledger.broadcasts_suppressed.clone())?;
    out.set_item("scalars_transmitted", res.ledger.scalars_transmitted.clone())?;
    out.set_item("divergence", res.divergence.clone())?;
    Ok(out.into())
}

/// End-to-end simulator sharing the CLI's TOML configuration format.
#[pyclass]
struct Simulator {
    cfg: ukie_core::config::ExperimentConfig,
    model: ModelSet,
    train_ds: ukie_core::data::LabeledDataset,
    test_ds: ukie_core::data::LabeledDataset,
    memory: Option<SemanticMemory>,
}

#[pymethods]
impl Simulator {
    #[new]
    fn new(config_toml: &str) -> PyResult<Self> {
        let cfg = parse_config(config_toml).map_err(err)?;
        cfg.validate().map_err(err)?;
        let root = cfg.dataset.resolved_root();
        let synth = cfg.dataset.synthetic.clone();
        let mut train_ds =
            load_dataset(&cfg.dataset.name, Split::Train, &root, synth.as_ref()).map_err(err)?;
        let mut test_ds =
            load_dataset(&cfg.dataset.name, Split::Test, &root, synth.as_ref()).map_err(err)?;
        if let Some(n) = cfg.dataset.train_limit {
            train_ds = train_ds.take(n);
        }
        if let Some(n) = cfg.dataset.test_limit {
            test_ds = test_ds.take(n);
        }
        let (c, h, w) = train_ds.shape();
        let m = cfg.channel_config().num_symbols(c * h * w).map_err(err)?;
        let model = ModelSet::build(
            cfg.model.arch_config(),
            cfg.model.layout().map_err(err)?,
            (c, h, w),
            train_ds.num_classes,
            m,
            cfg.seed(),
        )
        .map_err(err)?;
        Ok(Simulator { cfg, model, train_ds, test_ds, memory: None })
    }

    /// Runs the configured training loop; returns per-phase metric rows as
    /// (round, phase, probe_psnr, probe_acc).
    fn train(&mut self) -> PyResult<Vec<(usize, String, f64, f64)>> {
        let tcfg = self.cfg.train_config();
        let outcome =
            train(&mut self.model, &self.train_ds, &self.test_ds, &tcfg, None).map_err(err)?;
        self.memory = Some(outcome.memory);
        Ok(outcome
            .metrics
            .iter()
            .map(|r| (r.round, r.phase.as_str().to_string(), r.probe_psnr, r.probe_acc))
            .collect())
    }

    /// Link evaluation at the given SNR; returns a metric dict.
    fn evaluate(&mut self, py: Python<'_>, snr_db: f64) -> PyResult<PyObject> {
        let memory = match &self.memory {
            Some(m) => m.clone(),
            None => build_memory_from_dataset(&self.model, &self.train_ds, self.cfg.eval.memory_samples)
                .map_err(err)?,
        };
        let ch = ChannelConfig {
            kind: self.cfg.channel.kind,
            snr_db,
            seed: derive_seed(self.cfg.seed(), "py-eval", snr_db.to_bits()),
            compression_ratio: self.cfg.channel.compression_ratio,
        };
        let row = evaluate_link(&self.model, &memory, &self.test_ds, &ch, None).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("compression_ratio", row.compression_ratio)?;
        out.set_item("snr_db", row.snr_db)?;
        out.set_item("channel_kind", row.channel_kind)?;
        out.set_item("psnr_db", row.psnr_db)?;
        out.set_item("mse", row.mse)?;
        out.set_item("accuracy", row.accuracy)?;
        out.set_item("var_z", row.var_z)?;
        out.set_item("var_zV", row.var_zv)?;
        out.set_item("mi_estimate", row.mi_estimate)?;
        out.set_item("comm_cost", row.comm_cost)?;
        Ok(out.into())
    }

    #[getter]
    fn m_symbols(&self) -> usize {
        self.model.m_symbols
    }

    #[getter]
    fn latent_layout(&self) -> (usize, usize, usize) {
        (
            self.model.layout.total_channels,
            self.model.layout.invariant_channels,
            self.model.layout.variant_channels,
        )
    }
}

#[pymodule]
fn ukie_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(py_snr_to_noise_variance, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_from_mse_db, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(glyph_digits, m)?)?;
    m.add_function(wrap_pyfunction!(invariant_loss, m)?)?;
    m.add_function(wrap_pyfunction!(variant_loss, m)?)?;
    m.add_function(wrap_pyfunction!(classification_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(channel_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_protocol, m)?)?;
    m.add_class::<Memory>()?;
    m.add_class::<Simulator>()?;
    Ok(())
}
