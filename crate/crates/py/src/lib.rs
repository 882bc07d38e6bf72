use std::collections::HashMap;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use shiftc::artifacts::{compile as compile_model, write_artifacts, PlanFile};
use shiftc::chipsim::{run_plan, simulate_model};
use shiftc::costmodel::{estimate, fit_linear_csv, footprint, ChipConfig, ComputeModel, CostEstimate};
use shiftc::dense::{max_relative_error, random_inputs, DenseTensor};
use shiftc::plangen::{relax_and_retry, Relaxation, SearchConstraints};
use shiftc::rtensor::{Partitioning, PlanSpec};
use shiftc::texpr::{parse_model_str, reference_execute, serialize_model, ModelGraph};

create_exception!(shiftc_py, ShiftcError, PyException);
create_exception!(shiftc_py, CapacityError, ShiftcError);
create_exception!(shiftc_py, InfeasibleError, ShiftcError);

fn err(e: shiftc::Error) -> PyErr {
    match e {
        shiftc::Error::CapacityExceeded { .. } => CapacityError::new_err(e.to_string()),
        shiftc::Error::NoFeasiblePlan(_) | shiftc::Error::ModelDoesNotFit(_) => {
            InfeasibleError::new_err(e.to_string())
        }
        _ => ShiftcError::new_err(e.to_string()),
    }
}

fn cost_dict<'py>(py: Python<'py>, c: &CostEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("compute_cycles", c.compute_cycles)?;
    d.set_item("comm_cycles", c.comm_cycles)?;
    d.set_item("sync_cycles", c.sync_cycles)?;
    d.set_item("total_cycles", c.total_cycles)?;
    d.set_item("steps", c.steps)?;
    d.set_item("bytes_shifted_per_core", c.bytes_shifted_per_core)?;
    d.set_item("bytes_reduced_per_core", c.bytes_reduced_per_core)?;
    Ok(d)
}

/// Accelerator description.
#[pyclass(name = "Chip", module = "shiftc", from_py_object)]
#[derive(Clone)]
struct PyChip {
    inner: ChipConfig,
}

#[pymethods]
impl PyChip {
    /// Built-in profile (`ipu-mk2`, `toy-16`) or a chip JSON file path.
    #[new]
    fn new(name_or_path: &str) -> PyResult<Self> {
        Ok(PyChip {
            inner: ChipConfig::resolve(name_or_path, None).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyChip {
            inner: ChipConfig::from_json(text).map_err(err)?,
        })
    }

    /// Same chip with a different per-core memory size.
    fn with_memory(&self, mem_per_core: u64) -> PyResult<Self> {
        let inner = ChipConfig {
            mem_per_core,
            ..self.inner.clone()
        };
        inner.validate().map_err(err)?;
        Ok(PyChip { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn num_cores(&self) -> usize {
        self.inner.num_cores
    }

    #[getter]
    fn mem_per_core(&self) -> u64 {
        self.inner.mem_per_core
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| ShiftcError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Chip('{}', cores={}, mem_per_core={})",
            self.inner.name, self.inner.num_cores, self.inner.mem_per_core
        )
    }
}

/// Validated operator graph.
#[pyclass(name = "Model", module = "shiftc", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelGraph,
}

impl PyModel {
    fn operator(&self, op_id: &str) -> PyResult<Arc<shiftc::texpr::Operator>> {
        self.inner
            .operator(op_id)
            .map(|(_, op)| Arc::new(op.clone()))
            .ok_or_else(|| ShiftcError::new_err(format!("unknown operator `{op_id}`")))
    }

    fn inputs(&self, seed: u64, given: Option<HashMap<String, Vec<f32>>>) -> PyResult<HashMap<String, DenseTensor>> {
        let mut inputs = random_inputs(&self.inner, seed);
        for (name, data) in given.unwrap_or_default() {
            let t = inputs
                .get_mut(&name)
                .ok_or_else(|| ShiftcError::new_err(format!("`{name}` is not a graph input")))?;
            *t = DenseTensor::new(t.dtype, t.shape.clone(), data).map_err(err)?;
        }
        Ok(inputs)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: parse_model_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ShiftcError::new_err(e.to_string()))?;
        Self::from_json(&text)
    }

    #[getter]
    fn operators(&self) -> Vec<String> {
        self.inner.operators.iter().map(|o| o.id.clone()).collect()
    }

    #[getter]
    fn graph_inputs(&self) -> Vec<String> {
        self.inner.inputs.clone()
    }

    #[getter]
    fn graph_outputs(&self) -> Vec<String> {
        self.inner.outputs.clone()
    }

    fn shape(&self, tensor: &str) -> PyResult<Vec<usize>> {
        self.inner
            .tensor(tensor)
            .map(|t| t.shape.clone())
            .ok_or_else(|| ShiftcError::new_err(format!("unknown tensor `{tensor}`")))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&serialize_model(&self.inner)).map_err(|e| ShiftcError::new_err(e.to_string()))
    }

    /// Dense reference outputs as flat lists, keyed by tensor.
    #[pyo3(signature = (seed = 0, inputs = None))]
    fn reference(&self, seed: u64, inputs: Option<HashMap<String, Vec<f32>>>) -> PyResult<HashMap<String, Vec<f32>>> {
        let inputs = self.inputs(seed, inputs)?;
        let out = reference_execute(&self.inner, &inputs).map_err(err)?;
        Ok(out.into_iter().map(|(k, v)| (k, v.data)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(operators={:?})", self.operators())
    }
}

/// One operator's compute-shift execution plan.
#[pyclass(name = "Plan", module = "shiftc", from_py_object)]
#[derive(Clone)]
struct PyPlan {
    inner: Partitioning,
}

#[pymethods]
impl PyPlan {
    /// `f_t` is indexed by slot (inputs first, output last).
    #[new]
    fn new(model: &PyModel, op_id: &str, f_op: Vec<usize>, f_t: Vec<Vec<usize>>, rp: Vec<usize>) -> PyResult<Self> {
        let op = model.operator(op_id)?;
        Ok(PyPlan {
            inner: Partitioning::new(op, PlanSpec { f_op, f_t, rp }).map_err(err)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    #[getter]
    fn f_op(&self) -> Vec<usize> {
        self.inner.spec.f_op.clone()
    }

    #[getter]
    fn f_t(&self) -> Vec<Vec<usize>> {
        self.inner.spec.f_t.clone()
    }

    #[getter]
    fn rp(&self) -> Vec<usize> {
        self.inner.spec.rp.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn cores_used(&self) -> usize {
        self.inner.cores_used()
    }

    fn estimate<'py>(&self, py: Python<'py>, chip: &PyChip) -> PyResult<Bound<'py, PyDict>> {
        cost_dict(py, &estimate(&self.inner, &chip.inner, &ComputeModel::Rates))
    }

    /// Per-core resident bytes.
    fn footprint(&self, chip: &PyChip) -> u64 {
        footprint(&self.inner, &chip.inner).total
    }

    /// Run on the simulator against the dense reference; returns
    /// `(max_rel_err, stats)`.
    #[pyo3(signature = (model, chip, seed = 0))]
    fn simulate<'py>(&self, py: Python<'py>, model: &PyModel, chip: &PyChip, seed: u64) -> PyResult<(f64, Bound<'py, PyDict>)> {
        let inputs = random_inputs(&model.inner, seed);
        let op = &self.inner.op;
        let mut args = Vec::with_capacity(op.inputs.len());
        for t in &op.inputs {
            let a = inputs
                .get(&t.name)
                .ok_or_else(|| ShiftcError::new_err(format!("`{}` is not a graph input", t.name)))?;
            args.push(a);
        }
        let (out, stats) = run_plan(&self.inner, &chip.inner, &ComputeModel::Rates, &args).map_err(err)?;
        let reference = reference_execute(&model.inner, &inputs).map_err(err)?;
        let e = max_relative_error(&out, &reference[&op.output.name]).map_err(err)?;
        let d = cost_dict(py, &stats.as_estimate())?;
        d.set_item("high_water", stats.high_water.iter().max().copied().unwrap_or(0))?;
        d.set_item("homogeneous", stats.homogeneous)?;
        Ok((e, d))
    }

    fn __repr__(&self) -> String {
        format!("Plan('{}')", self.inner.id())
    }
}

fn constraints(min_util: f64, min_pad_ratio: f64, relax: bool, search_rp: bool) -> SearchConstraints {
    SearchConstraints {
        min_core_utilization: min_util,
        min_padding_ratio: min_pad_ratio,
        relaxation: if relax { Relaxation::IterativeDoubling } else { Relaxation::None },
        search_rp,
    }
}

/// Pareto-optimal plans of one operator, ordered by memory.
#[pyfunction]
#[pyo3(signature = (model, op_id, chip, min_util = 0.9, min_pad_ratio = 0.75, relax = false, search_rp = false))]
fn pareto(
    py: Python<'_>,
    model: &PyModel,
    op_id: &str,
    chip: &PyChip,
    min_util: f64,
    min_pad_ratio: f64,
    relax: bool,
    search_rp: bool,
) -> PyResult<Vec<PyPlan>> {
    let op = model.operator(op_id)?;
    let c = constraints(min_util, min_pad_ratio, relax, search_rp);
    let res = py
        .detach(|| relax_and_retry(&op, &chip.inner, &c, &ComputeModel::Rates))
        .map_err(err)?;
    Ok(res.pareto.into_iter().map(|p| PyPlan { inner: p.part }).collect())
}

/// Whole-model compilation result.
#[pyclass(name = "CompiledModel", module = "shiftc")]
struct PyCompiled {
    file: PlanFile,
}

#[pymethods]
impl PyCompiled {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCompiled {
            file: PlanFile::load(path).map_err(err)?,
        })
    }

    #[getter]
    fn total_time(&self) -> u64 {
        self.file.total_time
    }

    #[getter]
    fn idle_mem_size(&self) -> u64 {
        self.file.idle_mem_size
    }

    #[getter]
    fn evaluations(&self) -> usize {
        self.file.evaluations
    }

    /// `(step, idle_mem, total_time)` rows of the memory search.
    #[getter]
    fn trace(&self) -> Vec<(usize, u64, Option<u64>)> {
        self.file.trace.iter().map(|t| (t.step, t.idle_mem, t.total_time)).collect()
    }

    /// Active plan id per operator.
    #[getter]
    fn active_plans(&self) -> Vec<(String, String)> {
        self.file
            .ops
            .iter()
            .map(|e| (e.op_id.clone(), e.active.plan_id.clone()))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.file).map_err(|e| ShiftcError::new_err(e.to_string()))
    }

    fn write(&self, dir: &str) -> PyResult<()> {
        write_artifacts(dir, &self.file).map_err(err)
    }

    /// Execute on the simulator. Returns `(outputs, total_cycles,
    /// max_rel_err)` with outputs as flat lists.
    #[pyo3(signature = (seed = 0, inputs = None))]
    fn simulate(
        &self,
        py: Python<'_>,
        seed: u64,
        inputs: Option<HashMap<String, Vec<f32>>>,
    ) -> PyResult<(HashMap<String, Vec<f32>>, u64, f64)> {
        let model = PyModel {
            inner: self.file.graph().map_err(err)?,
        };
        let pairs = self.file.op_plans(&model.inner).map_err(err)?;
        let inputs = model.inputs(seed, inputs)?;
        let file = &self.file;
        let (outs, stats, worst) = py
            .detach(|| -> shiftc::Result<_> {
                let (outs, stats) = simulate_model(&model.inner, &pairs, &file.chip, &file.cost_model, &inputs)?;
                let reference = reference_execute(&model.inner, &inputs)?;
                let mut worst = 0.0f64;
                for (name, t) in &outs {
                    worst = worst.max(max_relative_error(t, &reference[name])?);
                }
                Ok((outs, stats, worst))
            })
            .map_err(err)?;
        let outs = outs.into_iter().map(|(k, v)| (k, v.data)).collect();
        Ok((outs, stats.total_cycles, worst))
    }
}

#[pyfunction]
#[pyo3(signature = (model, chip, min_util = 0.9, min_pad_ratio = 0.75, relax = false, search_rp = false))]
fn compile(
    py: Python<'_>,
    model: &PyModel,
    chip: &PyChip,
    min_util: f64,
    min_pad_ratio: f64,
    relax: bool,
    search_rp: bool,
) -> PyResult<PyCompiled> {
    let c = constraints(min_util, min_pad_ratio, relax, search_rp);
    let compiled = py
        .detach(|| compile_model(&model.inner, &chip.inner, &c, &ComputeModel::Rates))
        .map_err(err)?;
    Ok(PyCompiled {
        file: PlanFile::of(&compiled),
    })
}

/// Least-squares fit of a samples CSV; returns the coefficients as JSON.
#[pyfunction]
fn fit_linear(csv_text: &str) -> PyResult<String> {
    let m = fit_linear_csv(csv_text.as_bytes()).map_err(err)?;
    serde_json::to_string(&m).map_err(|e| ShiftcError::new_err(e.to_string()))
}

#[pymodule]
fn shiftc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ShiftcError", py.get_type::<ShiftcError>())?;
    m.add("CapacityError", py.get_type::<CapacityError>())?;
    m.add("InfeasibleError", py.get_type::<InfeasibleError>())?;
    m.add_class::<PyChip>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyCompiled>()?;
    m.add_function(wrap_pyfunction!(pareto, m)?)?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear, m)?)?;
    Ok(())
}
