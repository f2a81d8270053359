//! Python bindings: process models, the duration and scaling formulas, and
//! an in-memory engine with the same request surface as the REST API.

use std::collections::{BTreeMap, BTreeSet};

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use procforge::model::{
    parse_process, serialize_process, topological_levels, validate, ElasticityPolicy, ProcessModel,
    ScalingType,
};
use procforge::report::export_report;
use procforge::runtime::RuntimeError;
use procforge::service::{canonical_json, ApiError, Service};
use procforge::sim::{parse_topology, CostScope, TaskProfile};
use procforge::{Runtime, Scale};

create_exception!(procforge, ProcforgeError, PyException, "Raised with `(code, message)` arguments.");

fn api_err(e: impl Into<ApiError>) -> PyErr {
    let e = e.into();
    ProcforgeError::new_err((e.code, e.message))
}

fn runtime_err(e: RuntimeError) -> PyErr {
    api_err(e)
}

/// Converts through JSON so Python gets plain dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = canonical_json(value);
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = value.py().import("json")?;
    let text: String = json.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A parsed process model.
#[pyclass(name = "Model", module = "procforge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ProcessModel,
}

#[pymethods]
impl PyModel {
    /// Parses a YAML or JSON process document.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_process(text)
            .map(|inner| PyModel { inner })
            .map_err(|e| api_err(&e))
    }

    #[getter]
    fn model_id(&self) -> &str {
        &self.inner.model_id
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    fn activity_ids(&self) -> Vec<String> {
        self.inner.activities.iter().map(|a| a.activity_id.clone()).collect()
    }

    /// Violations as dicts with `code`, `ids` and `message`; empty when valid.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &validate(&self.inner))
    }

    /// Activity ids grouped by topological level.
    fn levels(&self) -> PyResult<Vec<Vec<String>>> {
        topological_levels(&self.inner).map_err(|e| ProcforgeError::new_err(("CycleDetected", e.to_string())))
    }

    fn to_yaml(&self) -> String {
        serialize_process(&self.inner)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({:?}, {} activities, {} edges)",
            self.inner.model_id,
            self.inner.activities.len(),
            self.inner.edges.len()
        )
    }
}

/// Duration in whole seconds of a task on `n` nodes.
#[pyfunction]
#[pyo3(signature = (base_duration_s, serial_fraction, sync_overhead_s_per_node, n))]
fn task_duration(
    base_duration_s: u64,
    serial_fraction: f64,
    sync_overhead_s_per_node: f64,
    n: u32,
) -> PyResult<u64> {
    let profile = TaskProfile {
        base_duration_s,
        serial_fraction,
        sync_overhead_s_per_node,
    };
    if !profile.is_valid() || n == 0 {
        return Err(PyValueError::new_err("profile out of range or n == 0"));
    }
    Ok(procforge::task_duration(&profile, n))
}

/// Instance count for elastic round `attempt`, or `None` once exhausted.
#[pyfunction]
#[pyo3(signature = (initial_instances, scaling_type, max_rounds, max_instances, attempt))]
fn next_scale(
    initial_instances: u32,
    scaling_type: &str,
    max_rounds: u32,
    max_instances: u32,
    attempt: u32,
) -> PyResult<Option<u32>> {
    let scaling_type = match scaling_type {
        "linear" => ScalingType::Linear,
        "exponential" => ScalingType::Exponential,
        other => return Err(PyValueError::new_err(format!("unknown scaling type `{other}`"))),
    };
    let policy = ElasticityPolicy {
        machine_type: String::new(),
        initial_instances,
        timeout_hours: 1.0,
        scaling_type,
        max_rounds,
        max_instances,
    };
    Ok(match procforge::next_scale(&policy, attempt) {
        Scale::Count(n) => Some(n),
        Scale::Exhausted => None,
    })
}

/// An in-memory runtime over a simulated topology with a manual clock.
#[pyclass(name = "Engine", module = "procforge", unsendable)]
struct PyEngine {
    service: Service,
}

#[pymethods]
impl PyEngine {
    /// `topology` is a YAML cloud list; the bundled two-cloud topology is used
    /// when omitted.
    #[new]
    #[pyo3(signature = (topology = None))]
    fn new(topology: Option<&str>) -> PyResult<Self> {
        let clouds = parse_topology(topology.unwrap_or(procforge::SAMPLE_TOPOLOGY))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyEngine {
            service: Service::new(Runtime::in_memory(clouds)),
        })
    }

    fn register_model(&mut self, model: &PyModel) -> PyResult<String> {
        self.service
            .runtime_mut()
            .register_model(model.inner.clone())
            .map_err(runtime_err)?;
        Ok(model.inner.model_id.clone())
    }

    /// Starts an instance. External inputs default to every declared one;
    /// `profiles` maps activity ids to `{base_duration_s, serial_fraction,
    /// sync_overhead_s_per_node}`.
    #[pyo3(signature = (model_id, external_inputs = None, profiles = None))]
    fn create_instance(
        &mut self,
        model_id: &str,
        external_inputs: Option<Vec<String>>,
        profiles: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<String> {
        let rt = self.service.runtime_mut();
        let externals: BTreeSet<String> = match external_inputs {
            Some(v) => v.into_iter().collect(),
            None => rt.model(model_id).map_err(runtime_err)?.external_artifacts(),
        };
        let profiles: BTreeMap<String, TaskProfile> = match profiles {
            Some(p) => from_py(p)?,
            None => BTreeMap::new(),
        };
        rt.create_instance(model_id, &externals, profiles).map_err(runtime_err)
    }

    #[pyo3(signature = (role = None, instance = None))]
    fn worklist<'py>(
        &self,
        py: Python<'py>,
        role: Option<&str>,
        instance: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.service.runtime().worklist(role, instance))
    }

    /// Completes a manual task given as `"<instance>:<activity>"`.
    #[pyo3(signature = (task_id, role, decision_label = None))]
    fn complete_task(&mut self, task_id: &str, role: &str, decision_label: Option<&str>) -> PyResult<()> {
        let (instance, activity) = task_id
            .split_once(':')
            .ok_or_else(|| PyValueError::new_err("task ids look like `<instance>:<activity>`"))?;
        self.service
            .runtime_mut()
            .complete_task(instance, activity, role, decision_label)
            .map_err(runtime_err)
    }

    /// Fires every pending event; returns the new simulated time.
    fn run_until_quiescent(&mut self) -> PyResult<u64> {
        self.service.runtime_mut().run_until_quiescent().map_err(runtime_err)
    }

    /// Advances the clock by `seconds`; returns the new simulated time.
    fn advance(&mut self, seconds: u64) -> PyResult<u64> {
        let rt = self.service.runtime_mut();
        let until = rt.now_s() + seconds;
        rt.advance_to(until).map_err(runtime_err)?;
        Ok(rt.now_s())
    }

    #[getter]
    fn now_s(&self) -> u64 {
        self.service.runtime().now_s()
    }

    fn view<'py>(&self, py: Python<'py>, instance_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.service.runtime().view(instance_id).map_err(runtime_err)?)
    }

    fn report<'py>(&self, py: Python<'py>, instance_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &export_report(self.service.runtime(), instance_id).map_err(runtime_err)?)
    }

    /// Accrued cost in currency units, for one instance, one cloud, or everything.
    #[pyo3(signature = (instance = None, cloud = None))]
    fn cost(&self, instance: Option<&str>, cloud: Option<&str>) -> PyResult<f64> {
        let scope = match (instance, cloud) {
            (Some(i), None) => CostScope::Process(i),
            (None, Some(c)) => CostScope::Cloud(c),
            (None, None) => CostScope::All,
            (Some(_), Some(_)) => return Err(PyValueError::new_err("pass instance or cloud, not both")),
        };
        Ok(self.service.runtime().cost(scope).as_units())
    }

    /// Sends one request through the REST handler; returns `(status, body)`
    /// with the body decoded from JSON.
    #[pyo3(signature = (method, target, body = ""))]
    fn request<'py>(
        &mut self,
        py: Python<'py>,
        method: &str,
        target: &str,
        body: &str,
    ) -> PyResult<(u16, Bound<'py, PyAny>)> {
        let response = self.service.handle_request(method, target, body.as_bytes());
        let decoded = py.import("json")?.call_method1("loads", (response.body,))?;
        Ok((response.status, decoded))
    }
}

#[pymodule]
#[pyo3(name = "procforge")]
fn procforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProcforgeError", m.py().get_type::<ProcforgeError>())?;
    m.add("SAMPLE_MODEL", procforge::SAMPLE_MODEL)?;
    m.add("SAMPLE_TOPOLOGY", procforge::SAMPLE_TOPOLOGY)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(task_duration, m)?)?;
    m.add_function(wrap_pyfunction!(next_scale, m)?)?;
    Ok(())
}
