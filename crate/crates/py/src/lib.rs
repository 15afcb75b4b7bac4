//! Python bindings for the book-keeping DP training library. The module
//! exposes the pieces a notebook needs: building a network from the catalog
//! or a spec text, running instrumented private steps under any
//! implementation kind, oracle verification, short training loops, and the
//! static layerwise cost analysis.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use bkdp_core::analyzer::{impl_cost, layerwise_decision_table, predicted_space_bytes};
use bkdp_core::archspec::{self, ArchSpec};
use bkdp_core::catalog;
use bkdp_core::clipping::{ClipFn, ClipMode};
use bkdp_core::engine::{
    naive_oracle_grad, private_step, synth_targets, ImplKind, Optimizer, PrivacyParams, ALL_KINDS,
};
use bkdp_core::graph::{Batch, Graph};
use bkdp_core::{OpCounters, SeededRng};

fn err(e: bkdp_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn resolve_spec(arch: &str, input: Option<usize>) -> PyResult<ArchSpec> {
    if arch.contains('\n') {
        if input.is_some() {
            return Err(PyValueError::new_err("input override only applies to catalog names"));
        }
        archspec::parse("inline", arch).map_err(err)
    } else {
        catalog::build(arch, input).map_err(err)
    }
}

fn resolve_clip(clip_fn: &str, radius: f64) -> PyResult<ClipFn> {
    ClipFn::from_name(clip_fn, radius, radius).map_err(err)
}

fn resolve_kind(kind: &str) -> PyResult<ImplKind> {
    ImplKind::parse(kind).map_err(err)
}

/// One instrumented private step's results and counter totals.
#[pyclass(frozen)]
struct StepResult {
    #[pyo3(get)]
    kind: String,
    #[pyo3(get)]
    losses: Vec<f64>,
    #[pyo3(get)]
    per_sample_norms: Vec<f64>,
    #[pyo3(get)]
    clip_factors: Vec<f64>,
    #[pyo3(get)]
    backward_passes: u64,
    #[pyo3(get)]
    mul_adds: u64,
    #[pyo3(get)]
    peak_live_bytes: u64,
    grads: Vec<(String, Vec<usize>, Vec<f64>)>,
}

#[pymethods]
impl StepResult {
    /// Parameter names in gradient order.
    fn grad_names(&self) -> Vec<String> {
        self.grads.iter().map(|(n, _, _)| n.clone()).collect()
    }

    /// (shape, flat values) of one parameter's summed private gradient.
    fn grad(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        self.grads
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, v)| (s.clone(), v.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named '{name}'")))
    }

    fn __repr__(&self) -> String {
        format!(
            "StepResult(kind='{}', batch={}, mul_adds={}, peak_live_bytes={})",
            self.kind,
            self.losses.len(),
            self.mul_adds,
            self.peak_live_bytes
        )
    }
}

/// A feed-forward network with live weights, built from a catalog name or an
/// inline architecture text (one layer per line).
#[pyclass]
struct Model {
    graph: Graph,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (arch, seed=42, input=None))]
    fn new(arch: &str, seed: u64, input: Option<usize>) -> PyResult<Self> {
        let spec = resolve_spec(arch, input)?;
        let graph = Graph::build(spec, &mut SeededRng::new(seed)).map_err(err)?;
        Ok(Model { graph })
    }

    /// Parameter names in update order.
    fn param_names(&self) -> Vec<String> {
        self.graph.param_ids().iter().map(|id| id.to_string()).collect()
    }

    /// Run one instrumented private step on a synthetic batch.
    #[pyo3(signature = (kind, batch=8, clip_fn="abadi", radius=1.0, sigma=0.0, seed=0))]
    fn step(
        &self,
        kind: &str,
        batch: usize,
        clip_fn: &str,
        radius: f64,
        sigma: f64,
        seed: u64,
    ) -> PyResult<StepResult> {
        let kind = resolve_kind(kind)?;
        let privacy = PrivacyParams::new(resolve_clip(clip_fn, radius)?, sigma).map_err(err)?;
        let mut rng = SeededRng::new(seed);
        let batch = Batch::synth(&self.graph.spec, batch, &mut rng);
        let targets = synth_targets(&self.graph, batch.len(), &mut rng).map_err(err)?;
        let mut counters = OpCounters::new();
        let mut nrng = SeededRng::new(seed.wrapping_add(1));
        let rep =
            private_step(&self.graph, &batch, &targets, kind, &privacy, &mut nrng, &mut counters)
                .map_err(err)?;
        Ok(StepResult {
            kind: rep.kind.to_string(),
            losses: rep.losses,
            per_sample_norms: rep.per_sample_norms,
            clip_factors: rep.clip_factors,
            backward_passes: rep.backward_passes,
            mul_adds: counters.mul_adds,
            peak_live_bytes: counters.peak_live_bytes,
            grads: rep
                .grads
                .into_iter()
                .map(|(id, g)| (id.to_string(), g.shape.clone(), g.data))
                .collect(),
        })
    }

    /// Max relative gradient deviation of every implementation kind from the
    /// brute-force per-sample oracle, as a dict kind -> deviation.
    #[pyo3(signature = (batch=8, clip_fn="abadi", radius=1.0, seed=0))]
    fn verify<'py>(
        &self,
        py: Python<'py>,
        batch: usize,
        clip_fn: &str,
        radius: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let clip = resolve_clip(clip_fn, radius)?;
        let mut rng = SeededRng::new(seed);
        let batch = Batch::synth(&self.graph.spec, batch, &mut rng);
        let targets = synth_targets(&self.graph, batch.len(), &mut rng).map_err(err)?;
        let (_, oracle) = naive_oracle_grad(&self.graph, &batch, &targets, clip).map_err(err)?;
        let privacy = PrivacyParams::new(clip, 0.0).map_err(err)?;
        let out = PyDict::new(py);
        for kind in ALL_KINDS.into_iter().filter(|k| k.is_dp()) {
            let mut counters = OpCounters::new();
            let mut nrng = SeededRng::new(seed);
            let rep = private_step(
                &self.graph,
                &batch,
                &targets,
                kind,
                &privacy,
                &mut nrng,
                &mut counters,
            )
            .map_err(err)?;
            let mut worst = 0.0_f64;
            for ((_, got), (_, want)) in rep.grads.iter().zip(oracle.iter()) {
                let scale = want.data.iter().map(|x| x.abs()).fold(1e-30_f64, f64::max);
                for (x, y) in got.data.iter().zip(want.data.iter()) {
                    worst = worst.max((x - y).abs() / scale);
                }
            }
            out.set_item(kind.to_string(), worst)?;
        }
        Ok(out)
    }

    /// Train with DP-SGD for `steps` steps on synthetic batches; returns the
    /// mean loss per step.
    #[pyo3(signature = (kind, steps, batch=8, lr=0.1, clip_fn="abadi", radius=1.0, sigma=0.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        kind: &str,
        steps: usize,
        batch: usize,
        lr: f64,
        clip_fn: &str,
        radius: f64,
        sigma: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let kind = resolve_kind(kind)?;
        let privacy = PrivacyParams::new(resolve_clip(clip_fn, radius)?, sigma).map_err(err)?;
        let mut data_rng = SeededRng::new(seed);
        let mut nrng = SeededRng::new(seed.wrapping_add(1));
        let mut opt = Optimizer::sgd(lr);
        let mut mean_losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let b = Batch::synth(&self.graph.spec, batch, &mut data_rng);
            let targets = synth_targets(&self.graph, batch, &mut data_rng).map_err(err)?;
            let mut counters = OpCounters::new();
            let rep =
                private_step(&self.graph, &b, &targets, kind, &privacy, &mut nrng, &mut counters)
                    .map_err(err)?;
            mean_losses.push(rep.losses.iter().sum::<f64>() / batch as f64);
            let grads: Vec<_> = rep.grads;
            opt.apply(&mut self.graph, &grads, batch).map_err(err)?;
        }
        Ok(mean_losses)
    }
}

/// Layerwise ghost/instantiate decision table and per-sample space totals.
#[pyfunction]
#[pyo3(signature = (arch, input=None))]
fn analyze<'py>(py: Python<'py>, arch: &str, input: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let spec = resolve_spec(arch, input)?;
    let report = layerwise_decision_table(&spec).map_err(err)?;
    let rows = PyList::empty(py);
    for r in &report.rows {
        let row = PyDict::new(py);
        row.set_item("layer", r.layer)?;
        row.set_item("label", &r.label)?;
        row.set_item("T", r.t)?;
        row.set_item("d", r.d)?;
        row.set_item("p", r.p)?;
        row.set_item("ghost_space", r.ghost_space)?;
        row.set_item("inst_space", r.inst_space)?;
        row.set_item(
            "decision",
            match r.decision {
                ClipMode::Ghost => "ghost",
                ClipMode::Instantiate => "instantiate",
            },
        )?;
        row.set_item("min_space", r.min_space)?;
        rows.append(row)?;
    }
    let out = PyDict::new(py);
    out.set_item("arch", &report.arch)?;
    out.set_item("rows", rows)?;
    out.set_item("ghost_total", report.ghost_total)?;
    out.set_item("inst_total", report.inst_total)?;
    out.set_item("mixed_total", report.mixed_total)?;
    Ok(out)
}

/// Predicted (time mul-adds, extra space scalars, peak bytes) for one kind.
#[pyfunction]
#[pyo3(signature = (arch, batch, kind, input=None))]
fn predicted_cost(
    arch: &str,
    batch: usize,
    kind: &str,
    input: Option<usize>,
) -> PyResult<(u128, u128, u128)> {
    let spec = resolve_spec(arch, input)?;
    let kind = resolve_kind(kind)?;
    let cost = impl_cost(&spec, batch, kind).map_err(err)?;
    let bytes = predicted_space_bytes(&spec, batch, kind).map_err(err)?;
    Ok((cost.time, cost.extra_space, bytes))
}

/// All implementation kind names.
#[pyfunction]
fn impl_kinds() -> Vec<String> {
    ALL_KINDS.iter().map(|k| k.to_string()).collect()
}

/// Built-in architecture names.
#[pyfunction]
fn catalog_names() -> Vec<String> {
    catalog::names().iter().map(|s| s.to_string()).collect()
}

#[pymodule]
fn bkdp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<StepResult>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_cost, m)?)?;
    m.add_function(wrap_pyfunction!(impl_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(catalog_names, m)?)?;
    Ok(())
}
