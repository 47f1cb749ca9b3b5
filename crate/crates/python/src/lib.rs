//! Python bindings. Tensors cross the boundary as flat lists of floats plus
//! an explicit shape.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spikekit::architecture::{param_count as count_params, ModelConfig, ResidualMode, Spikformer, StemConfig, StemKind};
use spikekit::attention::{self, AttentionVariant, ProductOrder};
use spikekit::harness::{load_dataset, Dataset, DatasetSpec};
use spikekit::neuron::{lif_forward, LifConfig};
use spikekit::pretrain;
use spikekit::profiler::{report, EnergyModel, ReportTotals};
use spikekit::tensor::{DenseTensor, SpikeTensor};
use spikekit::training::{TrainConfig, Trainer};
use spikekit::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(m) => PyArithmeticError::new_err(m),
        Error::Load(_) | Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn dense(data: Vec<f32>, shape: Vec<usize>) -> PyResult<DenseTensor> {
    DenseTensor::new(shape, data).map_err(py_err)
}

fn rows<T: Clone>(data: &[T], width: usize) -> Vec<Vec<T>> {
    data.chunks(width.max(1)).map(<[T]>::to_vec).collect()
}

fn matrix(m: &[Vec<f32>]) -> PyResult<SpikeTensor> {
    let d = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let flat: Vec<f32> = m.concat();
    SpikeTensor::from_values([m.len(), d], &flat).map_err(py_err)
}

fn totals_dict<'py>(py: Python<'py>, t: &ReportTotals) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("flops", t.flops)?;
    d.set_item("sops", t.sops)?;
    d.set_item("energy_uj", t.energy_mj * 1e3)?;
    Ok(d)
}

/// A spiking transformer classifier.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Spikformer,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (depth=2, dim=64, *, small=true, stem="sps", variant="ssa", residual="add", time_steps=4, num_classes=3, image_size=32, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        depth: usize,
        dim: usize,
        small: bool,
        stem: &str,
        variant: &str,
        residual: &str,
        time_steps: usize,
        num_classes: usize,
        image_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = if small { ModelConfig::spikformer_small(depth, dim) } else { ModelConfig::spikformer(depth, dim) };
        cfg.stem = StemConfig::of_kind(StemKind::parse(stem).map_err(py_err)?, small);
        cfg.variant = AttentionVariant::parse(variant).map_err(py_err)?;
        cfg.residual = match residual.to_ascii_lowercase().as_str() {
            "add" => ResidualMode::Add,
            "iand" => ResidualMode::Iand,
            other => return Err(PyValueError::new_err(format!("unknown residual mode {other:?}"))),
        };
        cfg.time_steps = time_steps;
        cfg.num_classes = num_classes;
        cfg.image_size = [image_size, image_size];
        Ok(Self { inner: Spikformer::new(cfg, seed).map_err(py_err)? })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn time_steps(&self) -> usize {
        self.inner.cfg().time_steps
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.cfg().num_classes
    }

    /// Logits `[batch][classes]` for images given as a flat list and an NCHW shape.
    #[pyo3(signature = (images, shape, steps=None))]
    fn predict(&mut self, images: Vec<f32>, shape: Vec<usize>, steps: Option<usize>) -> PyResult<Vec<Vec<f32>>> {
        let steps = steps.unwrap_or(self.inner.cfg().time_steps);
        let logits = self.inner.predict(&dense(images, shape)?, steps).map_err(py_err)?;
        Ok(rows(logits.data(), self.inner.cfg().num_classes))
    }

    /// Re-estimates batch-norm running statistics from `images`.
    #[pyo3(signature = (images, shape, passes=2))]
    fn calibrate(&mut self, images: Vec<f32>, shape: Vec<usize>, passes: usize) -> PyResult<()> {
        let steps = self.inner.cfg().time_steps;
        self.inner.calibrate(&dense(images, shape)?, steps, passes).map_err(py_err)
    }

    /// Per-sample op counts and energy: totals over all steps, one step, and per layer.
    #[pyo3(signature = (images, shape, steps=None))]
    fn profile<'py>(&mut self, py: Python<'py>, images: Vec<f32>, shape: Vec<usize>, steps: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let steps = steps.unwrap_or(self.inner.cfg().time_steps);
        let ledger = self.inner.profile(&dense(images, shape)?, steps).map_err(py_err)?;
        let rep = report(&ledger, &EnergyModel::default());
        let out = totals_dict(py, &rep.total)?;
        out.set_item("time_steps", rep.time_steps)?;
        out.set_item("per_step", totals_dict(py, &rep.per_step)?)?;
        let layers = rep
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("layer", &r.layer)?;
                d.set_item("kind", r.kind.as_str())?;
                d.set_item("flops", r.flops)?;
                d.set_item("sops", r.sops)?;
                d.set_item("firing_rate", r.firing_rate)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        out.set_item("layers", layers)?;
        Ok(out)
    }

    /// Supervised training; returns one dict per epoch.
    #[pyo3(signature = (images, shape, labels, epochs=10, batch_size=16, lr=2e-3, target_accuracy=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        images: Vec<f32>,
        shape: Vec<usize>,
        labels: Vec<usize>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        target_accuracy: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let data = Dataset::new(dense(images, shape)?, labels, self.inner.cfg().num_classes).map_err(py_err)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            base_lr: lr,
            time_steps: self.inner.cfg().time_steps,
            target_accuracy,
            seed,
            ..TrainConfig::default()
        };
        let hist = Trainer::new(cfg).and_then(|mut t| t.fit(&mut self.inner, &data, None, |_| {})).map_err(py_err)?;
        hist.iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("epoch", m.epoch)?;
                d.set_item("lr", m.lr)?;
                d.set_item("loss", m.train_loss)?;
                d.set_item("train_acc", m.train_acc)?;
                Ok(d)
            })
            .collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path, serde_json::Value::Null).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Spikformer::load(path).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.cfg();
        format!("Model(depth={}, dim={}, time_steps={}, params={})", c.depth, c.dim, c.time_steps, self.inner.num_params())
    }
}

/// Energy in microjoules for `flops` multiply-accumulates and `sops` accumulates.
#[pyfunction]
#[pyo3(signature = (flops, sops, e_mac_pj=4.6, e_ac_pj=0.9))]
fn energy_uj(flops: f64, sops: f64, e_mac_pj: f64, e_ac_pj: f64) -> PyResult<f64> {
    Ok(EnergyModel::new(e_mac_pj, e_ac_pj).map_err(py_err)?.energy(flops, sops).micro_joules())
}

/// Trainable parameter count of a configuration, without building it.
#[pyfunction]
#[pyo3(signature = (depth, dim, small=false, stem="sps", num_classes=None))]
fn param_count(depth: usize, dim: usize, small: bool, stem: &str, num_classes: Option<usize>) -> PyResult<usize> {
    let mut cfg = if small { ModelConfig::spikformer_small(depth, dim) } else { ModelConfig::spikformer(depth, dim) };
    cfg.stem = StemConfig::of_kind(StemKind::parse(stem).map_err(py_err)?, small);
    if let Some(n) = num_classes {
        cfg.num_classes = n;
    }
    Ok(count_params(&cfg))
}

/// Token mask over a `grid_h x grid_w` grid; `True` marks a masked token.
#[pyfunction]
fn sample_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> PyResult<Vec<Vec<bool>>> {
    let m = pretrain::sample_mask([grid_h, grid_w], ratio, seed).map_err(py_err)?;
    Ok((0..grid_h).map(|y| (0..grid_w).map(|x| !m.base.get(y, x)).collect()).collect())
}

/// Integer spiking attention product of binary `[N][d]` matrices and the
/// number of accumulations it took.
#[pyfunction]
#[pyo3(signature = (q, k, v, order="qk"))]
fn ssa_product(q: Vec<Vec<f32>>, k: Vec<Vec<f32>>, v: Vec<Vec<f32>>, order: &str) -> PyResult<(Vec<Vec<i32>>, u64)> {
    let order = match order {
        "qk" => ProductOrder::QkFirst,
        "kv" => ProductOrder::KvFirst,
        other => return Err(PyValueError::new_err(format!("order must be 'qk' or 'kv', got {other:?}"))),
    };
    let (out, sops) = attention::ssa_product(&matrix(&q)?, &matrix(&k)?, &matrix(&v)?, order).map_err(py_err)?;
    Ok((rows(out.data(), out.shape()[1]), sops))
}

/// Spikes of a leaky integrate-and-fire neuron driven by `currents`, a flat
/// list viewed as `[steps, rest]`.
#[pyfunction]
#[pyo3(signature = (currents, steps, tau=2.0, v_threshold=1.0, v_reset=0.0))]
fn lif(currents: Vec<f32>, steps: usize, tau: f32, v_threshold: f32, v_reset: f32) -> PyResult<Vec<f32>> {
    let n = currents.len();
    let x = dense(currents, vec![n])?;
    let cfg = LifConfig { tau, v_threshold, v_reset, ..LifConfig::default() };
    let (s, _) = lif_forward(&x, steps, &cfg).map_err(py_err)?;
    Ok(s.to_values())
}

/// Oriented-grating 3-class dataset: `(images, shape, labels)`.
#[pyfunction]
fn synthetic_dataset(per_class: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<usize>, Vec<usize>)> {
    let d = load_dataset(&DatasetSpec::synthetic(per_class, seed)).map_err(py_err)?;
    Ok((d.images.data().to_vec(), d.images.shape().to_vec(), d.labels))
}

#[pymodule]
fn spikekit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(energy_uj, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(ssa_product, m)?)?;
    m.add_function(wrap_pyfunction!(lif, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    Ok(())
}
