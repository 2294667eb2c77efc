use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use ::hacommit::audit::{audit, AuditReport};
use ::hacommit::experiment::{run_experiment, ExperimentConfig, RunOutput};
use ::hacommit::serial::{check_serializable, committed_footprints, MAX_WINDOW};
use ::hacommit::sim::{format_fault_schedule, parse_fault_schedule, DelayDist};
use ::hacommit::topology::{ShardMap, Topology};
use ::hacommit::trace::{EventTrace, Protocol};
use ::hacommit::types::{Isolation, Key, TxnId};

fn err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes `value` and hands it to Python's json module.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn read_trace(jsonl: &[u8]) -> PyResult<EventTrace> {
    EventTrace::read_jsonl(jsonl).map_err(err)
}

/// Nodes, shards and replicas per shard; shard `s` lives on the
/// `replicas` nodes following node `s`.
#[pyclass(name = "Topology", frozen)]
struct PyTopology(Topology);

#[pymethods]
impl PyTopology {
    #[new]
    fn new(nodes: u32, shards: u32, replicas: u32) -> Self {
        Self(Topology::new(nodes, shards, replicas))
    }

    /// Replica ids of `shard`, leader first.
    fn members(&self, shard: u32) -> Vec<u32> {
        let map = ShardMap::from_topology(&self.0);
        map.groups()
            .filter(|g| g.shard.0 == shard)
            .flat_map(|g| g.members.iter().map(|n| n.0))
            .collect()
    }

    fn quorum_size(&self, shard: u32) -> Option<usize> {
        ShardMap::from_topology(&self.0)
            .groups()
            .find(|g| g.shard.0 == shard)
            .map(|g| g.quorum_size())
    }

    fn shard_of(&self, key: &str) -> u32 {
        ShardMap::from_topology(&self.0).shard_of(key).0
    }

    fn first_client_id(&self) -> u32 {
        self.0.first_client_id()
    }

    fn __repr__(&self) -> String {
        format!(
            "Topology(nodes={}, shards={}, replicas={})",
            self.0.nodes, self.0.shards, self.0.replicas
        )
    }
}

/// A complete experiment description.
#[pyclass(name = "Config", frozen)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (
        protocol = "hacommit", nodes = 8, shards = 8, replicas = 3, clients = 1, txns = Some(100),
        duration_s = None, ops_per_txn = 4, read_fraction = 0.5, key_space = None, isolation = None,
        seed = 1, delay_us = 50, drop_rate = 0.0, timeout_ms = None, fault_schedule = None, record_messages = true,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        protocol: &str,
        nodes: u32,
        shards: u32,
        replicas: u32,
        clients: u32,
        txns: Option<u64>,
        duration_s: Option<f64>,
        ops_per_txn: u32,
        read_fraction: f64,
        key_space: Option<u64>,
        isolation: Option<&str>,
        seed: u64,
        delay_us: u64,
        drop_rate: f64,
        timeout_ms: Option<f64>,
        fault_schedule: Option<&str>,
        record_messages: bool,
    ) -> PyResult<Self> {
        let mut c = ExperimentConfig {
            protocol: protocol.parse::<Protocol>().map_err(err)?,
            ..Default::default()
        };
        c.topology = Topology::new(nodes, shards, replicas);
        let w = &mut c.workload;
        w.clients = clients;
        w.txn_count = txns;
        w.duration = duration_s.map(|s| (s * 1e6).round() as u64);
        w.ops_per_txn = ops_per_txn;
        w.read_fraction = read_fraction;
        if let Some(k) = key_space {
            w.key_space = k;
        }
        match isolation {
            None => {}
            Some("serializable") => w.isolation = Isolation::Serializable,
            Some("read-committed") => w.isolation = Isolation::ReadCommitted,
            Some(other) => return Err(err(format!("unknown isolation {other:?}"))),
        }
        c.sim.seed = seed;
        c.sim.one_way_delay = DelayDist::Constant { us: delay_us };
        c.sim.drop_rate = drop_rate;
        c.sim.record_messages = record_messages;
        if let Some(text) = fault_schedule {
            c.sim.fault_schedule = parse_fault_schedule(text).map_err(err)?;
        }
        if let Some(t) = timeout_ms {
            c.participant = c.participant.clone().with_timeout((t * 1e3).round() as u64);
        }
        c.validate().map_err(err)?;
        Ok(Self(c))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(err)?;
        c.validate().map_err(err)?;
        Ok(Self(c))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(err)
    }

    #[getter]
    fn protocol(&self) -> &'static str {
        self.0.protocol.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.sim.seed
    }

    #[getter]
    fn topology(&self) -> PyTopology {
        PyTopology(self.0.topology)
    }

    #[getter]
    fn fault_schedule(&self) -> String {
        format_fault_schedule(&self.0.sim.fault_schedule)
    }

    fn run(&self) -> PyResult<PyRun> {
        run_experiment(&self.0).map(PyRun).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(protocol={:?}, seed={}, ops_per_txn={}, clients={})",
            self.0.protocol.name(),
            self.0.sim.seed,
            self.0.workload.ops_per_txn,
            self.0.workload.clients
        )
    }
}

/// Checker verdict on one trace.
#[pyclass(name = "AuditReport", frozen)]
struct PyAudit(AuditReport);

#[pymethods]
impl PyAudit {
    #[getter]
    fn passed(&self) -> bool {
        self.0.passed()
    }

    #[getter]
    fn decided(&self) -> usize {
        self.0.decided
    }

    fn summary(&self) -> String {
        self.0.summary()
    }

    fn violations(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.violations)
    }

    fn blocked(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.blocked)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0)
    }

    fn __bool__(&self) -> bool {
        self.0.passed()
    }

    fn __repr__(&self) -> String {
        format!("AuditReport({})", self.0.summary())
    }
}

/// Outcome of one simulated run.
#[pyclass(name = "Run", frozen)]
struct PyRun(RunOutput);

#[pymethods]
impl PyRun {
    #[getter]
    fn end_time_us(&self) -> u64 {
        self.0.end_time
    }

    #[getter]
    fn event_count(&self) -> usize {
        self.0.trace.len()
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.metrics)
    }

    /// Final committed value and writer per key, values as lists of bytes.
    fn final_state(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.final_state)
    }

    fn trace_jsonl<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.trace.to_jsonl())
    }

    fn audit(&self) -> PyAudit {
        PyAudit(audit(&self.0.trace))
    }

    /// A serial order of the committed transactions, per window, that also
    /// explains the final store contents.
    fn check_serializable(&self) -> PyResult<Vec<String>> {
        let finals: BTreeMap<Key, TxnId> = self
            .0
            .final_state
            .iter()
            .map(|(k, r)| (k.clone(), r.writer))
            .collect();
        check_serializable(
            &committed_footprints(&self.0.trace),
            MAX_WINDOW,
            Some(&finals),
        )
        .map(|order| order.iter().map(TxnId::to_string).collect())
        .map_err(err)
    }
}

#[pyfunction]
fn run(config: &PyConfig) -> PyResult<PyRun> {
    config.run()
}

/// Audits a trace read back from JSON lines.
#[pyfunction]
fn audit_jsonl(jsonl: &[u8]) -> PyResult<PyAudit> {
    Ok(PyAudit(audit(&read_trace(jsonl)?)))
}

/// Parses a fault schedule and returns it in canonical form.
#[pyfunction]
fn normalize_fault_schedule(text: &str) -> PyResult<String> {
    parse_fault_schedule(text)
        .map(|f| format_fault_schedule(&f))
        .map_err(err)
}

#[pyfunction]
fn protocols() -> Vec<&'static str> {
    Protocol::ALL.iter().map(|p| p.name()).collect()
}

#[pymodule]
fn hacommit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTopology>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_class::<PyAudit>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(audit_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_fault_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(protocols, m)?)?;
    Ok(())
}
