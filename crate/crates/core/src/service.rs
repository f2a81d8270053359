//! The REST surface.
//!
//! [`Service::handle_request`] is a plain function from `(method, target,
//! body)` to `(status, body)`; the HTTP server in [`serve`] only forwards to
//! it. Response bodies are canonical JSON: object keys are sorted and there is
//! no insignificant whitespace, so identical snapshots give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use percent_encoding::percent_decode_str;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ClockMode;
use crate::engine::EnactmentError;
use crate::model::{parse_process, serialize_process, ExpandError, ParseError};
use crate::money::Money;
use crate::provenance::{StoreError, VersionSelector};
use crate::report::export_report;
use crate::runtime::{Runtime, RuntimeError};
use crate::sim::{CostScope, SimError, TaskProfile};

/// Every `(status, code)` pair the API can return.
pub const ERROR_CATALOG: &[(u16, &str)] = &[
    (400, "SyntaxError"),
    (400, "SchemaError"),
    (400, "InvalidModel"),
    (400, "InvalidProfile"),
    (403, "RoleMismatch"),
    (404, "NotFound"),
    (405, "MethodNotAllowed"),
    (409, "IllegalState"),
    (409, "InstanceClosed"),
    (409, "ConstraintViolation"),
    (409, "AlreadyExists"),
    (409, "ClockRegression"),
    (409, "CapacityExceeded"),
    (409, "InstanceNotRunning"),
    (409, "MixedClouds"),
    (422, "UnknownDecisionLabel"),
    (422, "MissingExternalInput"),
    (422, "UnexpectedExternalInput"),
    (422, "UnresolvedReference"),
    (422, "RecursiveSubWorkflow"),
    (422, "AmbiguousBoundary"),
    (422, "UnknownMachineType"),
    (422, "ZeroCount"),
    (500, "StorageFailure"),
    (500, "HashMismatch"),
    (500, "CorruptLog"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "NotFound", message)
    }

    fn schema(message: impl Into<String>) -> Self {
        Self::new(400, "SchemaError", message)
    }

    fn body(&self) -> Value {
        let mut body = json!({
            "status": self.status,
            "code": self.code,
            "message": self.message,
        });
        if let Some(details) = &self.details {
            body["details"] = details.clone();
        }
        body
    }
}

impl From<&ParseError> for ApiError {
    fn from(e: &ParseError) -> Self {
        match e {
            ParseError::Syntax(_) => ApiError::new(400, "SyntaxError", e.to_string()),
            ParseError::Schema(_) => ApiError::new(400, "SchemaError", e.to_string()),
        }
    }
}

impl From<&ExpandError> for ApiError {
    fn from(e: &ExpandError) -> Self {
        let code = match e {
            ExpandError::UnresolvedReference { .. } => "UnresolvedReference",
            ExpandError::RecursiveSubWorkflow { .. } => "RecursiveSubWorkflow",
            ExpandError::AmbiguousBoundary { .. } => "AmbiguousBoundary",
        };
        ApiError::new(422, code, e.to_string())
    }
}

impl From<&EnactmentError> for ApiError {
    fn from(e: &EnactmentError) -> Self {
        let msg = e.to_string();
        match e {
            EnactmentError::InvalidModel(violations) => ApiError {
                details: serde_json::to_value(violations).ok(),
                ..ApiError::new(400, "InvalidModel", msg)
            },
            EnactmentError::MissingExternalInput(_) => {
                ApiError::new(422, "MissingExternalInput", msg)
            }
            EnactmentError::UnexpectedExternalInput(_) => {
                ApiError::new(422, "UnexpectedExternalInput", msg)
            }
            EnactmentError::UnknownActivity(_) => ApiError::not_found(msg),
            EnactmentError::IllegalState { .. } => ApiError::new(409, "IllegalState", msg),
            EnactmentError::InstanceClosed(_) => ApiError::new(409, "InstanceClosed", msg),
            EnactmentError::ConstraintViolation { .. } => {
                ApiError::new(409, "ConstraintViolation", msg)
            }
            EnactmentError::RoleMismatch { .. } => ApiError::new(403, "RoleMismatch", msg),
            EnactmentError::UnknownDecisionLabel { options, .. } => ApiError {
                details: Some(json!({ "options": options })),
                ..ApiError::new(422, "UnknownDecisionLabel", msg)
            },
            EnactmentError::CorruptLog { .. } => ApiError::new(500, "CorruptLog", msg),
        }
    }
}

impl From<&SimError> for ApiError {
    fn from(e: &SimError) -> Self {
        let msg = e.to_string();
        match e {
            SimError::UnknownCloud(_) => ApiError::not_found(msg),
            SimError::UnknownMachineType { .. } => ApiError::new(422, "UnknownMachineType", msg),
            SimError::CapacityExceeded { .. } => ApiError::new(409, "CapacityExceeded", msg),
            SimError::InstanceNotRunning(_) => ApiError::new(409, "InstanceNotRunning", msg),
            SimError::MixedClouds => ApiError::new(409, "MixedClouds", msg),
            SimError::ClockRegression { .. } => ApiError::new(409, "ClockRegression", msg),
            SimError::ZeroCount => ApiError::new(422, "ZeroCount", msg),
        }
    }
}

impl From<&StoreError> for ApiError {
    fn from(e: &StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotFound { .. } => ApiError::not_found(msg),
            StoreError::HashMismatch { .. } => ApiError::new(500, "HashMismatch", msg),
            StoreError::StorageFailure(_) => ApiError::new(500, "StorageFailure", msg),
        }
    }
}

impl From<&RuntimeError> for ApiError {
    fn from(e: &RuntimeError) -> Self {
        let msg = e.to_string();
        match e {
            RuntimeError::InvalidModel(violations) => ApiError {
                details: serde_json::to_value(violations).ok(),
                ..ApiError::new(400, "InvalidModel", msg)
            },
            RuntimeError::ModelExists(_) => ApiError::new(409, "AlreadyExists", msg),
            RuntimeError::UnknownModel(_) | RuntimeError::UnknownInstance(_) => {
                ApiError::not_found(msg)
            }
            RuntimeError::InvalidProfile(_) => ApiError::new(400, "InvalidProfile", msg),
            RuntimeError::Expand(e) => e.into(),
            RuntimeError::Enactment(e) => e.into(),
            RuntimeError::Sim(e) => e.into(),
            RuntimeError::Store(e) => e.into(),
        }
    }
}

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        (&e).into()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        (&e).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: String,
}

/// Serializes with sorted keys and no whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("responses serialize");
    serde_json::to_string(&value).expect("values serialize")
}

fn value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("responses serialize")
}

fn decode_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ApiError::schema(e.to_string()),
        _ => ApiError::new(400, "SyntaxError", e.to_string()),
    })
}

fn decode(segment: &str) -> Result<String, ApiError> {
    percent_decode_str(segment)
        .decode_utf8()
        .map(|s| s.into_owned())
        .map_err(|_| ApiError::schema(format!("`{segment}` is not valid percent-encoded UTF-8")))
}

fn parse_query(query: &str) -> Result<BTreeMap<String, String>, ApiError> {
    query
        .split('&')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            Ok((decode(k)?, decode(v)?))
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateInstance {
    model_id: String,
    #[serde(default)]
    external_inputs: BTreeSet<String>,
    #[serde(default)]
    profiles: BTreeMap<String, TaskProfile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteTask {
    role: String,
    #[serde(default)]
    decision_label: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceClock {
    seconds: u64,
}

#[derive(Serialize)]
struct InstanceSummary<'a> {
    instance_id: &'a str,
    model_id: &'a str,
    status: crate::engine::InstanceStatus,
    sim_time_s: u64,
}

#[derive(Serialize)]
struct VmCost<'a> {
    vm_id: &'a str,
    cloud_id: &'a str,
    machine_type: &'a str,
    state: crate::sim::InstanceState,
    running_seconds: u64,
    cost: Money,
}

enum Route<'a> {
    Models,
    Model(&'a str),
    Instances,
    Instance(&'a str),
    Report(&'a str),
    Events(&'a str),
    Tasks,
    CompleteTask(&'a str),
    Artifact(&'a str),
    Costs,
    Clock,
}

impl<'a> Route<'a> {
    fn parse(path: &'a str) -> Option<Self> {
        let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        let route = match segments.as_slice() {
            ["models"] => Route::Models,
            ["models", id] => Route::Model(id),
            ["instances"] => Route::Instances,
            ["instances", id] => Route::Instance(id),
            ["instances", id, "report"] => Route::Report(id),
            ["instances", id, "events"] => Route::Events(id),
            ["tasks"] => Route::Tasks,
            ["tasks", .., "complete"] if segments.len() >= 3 => {
                let rest = &path["/tasks/".len()..];
                Route::CompleteTask(&rest[..rest.len() - "/complete".len()])
            }
            ["artifacts", _, ..] => Route::Artifact(&path["/artifacts/".len()..]),
            ["costs"] => Route::Costs,
            ["clock", "advance"] => Route::Clock,
            _ => return None,
        };
        match route {
            Route::Model(id) | Route::Instance(id) | Route::Report(id) | Route::Events(id)
                if id.is_empty() =>
            {
                None
            }
            r => Some(r),
        }
    }

    fn allows(&self, method: &str) -> bool {
        match self {
            Route::Models | Route::Instances => method == "GET" || method == "POST",
            Route::CompleteTask(_) | Route::Clock => method == "POST",
            _ => method == "GET",
        }
    }
}

/// The REST service over one runtime.
pub struct Service {
    runtime: Runtime,
    profiles: BTreeMap<String, TaskProfile>,
}

impl Service {
    pub fn new(runtime: Runtime) -> Self {
        Service {
            runtime,
            profiles: BTreeMap::new(),
        }
    }

    /// Task profiles applied to instances whose request does not name one.
    pub fn with_profiles(mut self, profiles: BTreeMap<String, TaskProfile>) -> Self {
        self.profiles = profiles;
        self
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn runtime_mut(&mut self) -> &mut Runtime {
        &mut self.runtime
    }

    /// Routes one request. `target` is the path with an optional `?query`.
    pub fn handle_request(&mut self, method: &str, target: &str, body: &[u8]) -> ApiResponse {
        let (status, value) = match self.dispatch(method, target, body) {
            Ok((status, value)) => (status, value),
            Err(e) => (e.status, e.body()),
        };
        ApiResponse {
            status,
            body: canonical_json(&value),
        }
    }

    fn dispatch(&mut self, method: &str, target: &str, body: &[u8]) -> Result<(u16, Value), ApiError> {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        let query = parse_query(query)?;
        let route = Route::parse(path)
            .ok_or_else(|| ApiError::not_found(format!("no resource at {path}")))?;
        if !route.allows(method) {
            return Err(ApiError::new(
                405,
                "MethodNotAllowed",
                format!("{method} is not supported on {path}"),
            ));
        }
        let ok = |v: Value| Ok((200, v));

        match (method, route) {
            ("GET", Route::Models) => {
                let ids: Vec<&str> = self.runtime.models().map(|m| m.model_id.as_str()).collect();
                ok(json!(ids))
            }
            ("POST", Route::Models) => {
                let text = std::str::from_utf8(body)
                    .map_err(|_| ApiError::new(400, "SyntaxError", "body is not UTF-8"))?;
                let model = parse_process(text).map_err(|e| ApiError::from(&e))?;
                let model_id = model.model_id.clone();
                self.runtime.register_model(model)?;
                Ok((201, json!({ "model_id": model_id })))
            }
            (_, Route::Model(id)) => {
                let model = self.runtime.model(&decode(id)?)?;
                let doc: Value = serde_yaml::from_str(&serialize_process(model))
                    .expect("serialized models parse");
                ok(doc)
            }
            ("POST", Route::Instances) => {
                let req: CreateInstance = decode_body(body)?;
                let mut profiles = self.profiles.clone();
                profiles.extend(req.profiles);
                let id = self
                    .runtime
                    .create_instance(&req.model_id, &req.external_inputs, profiles)?;
                Ok((201, value(&self.runtime.view(&id)?)))
            }
            (_, Route::Instances) => {
                let list: Vec<InstanceSummary> = self
                    .runtime
                    .instance_ids()
                    .map(|id| {
                        let inst = self.runtime.instance(id).expect("listed ids exist");
                        InstanceSummary {
                            instance_id: id,
                            model_id: &inst.model.model_id,
                            status: inst.status,
                            sim_time_s: inst.sim_time_s,
                        }
                    })
                    .collect();
                ok(value(&list))
            }
            (_, Route::Instance(id)) => ok(value(&self.runtime.view(&decode(id)?)?)),
            (_, Route::Report(id)) => ok(value(&export_report(&self.runtime, &decode(id)?)?)),
            (_, Route::Events(id)) => {
                let id = decode(id)?;
                self.runtime.instance(&id)?;
                let from_seq = match query.get("from_seq") {
                    None => 0,
                    Some(s) => s
                        .parse::<u64>()
                        .map_err(|_| ApiError::schema(format!("from_seq `{s}` is not a non-negative integer")))?,
                };
                let events: Vec<_> = self.runtime.log().records_from(from_seq, Some(&id)).collect();
                let last_seq = self.runtime.records_of(&id).last().map_or(0, |r| r.seq);
                ok(json!({
                    "instance_id": id,
                    "last_seq": last_seq,
                    "events": value(&events),
                }))
            }
            (_, Route::Tasks) => {
                let instance = query.get("instance").map(String::as_str);
                if let Some(id) = instance {
                    self.runtime.instance(id)?;
                }
                let role = query.get("role").map(String::as_str);
                ok(value(&self.runtime.worklist(role, instance)))
            }
            (_, Route::CompleteTask(task_id)) => {
                let task_id = decode(task_id)?;
                let req: CompleteTask = decode_body(body)?;
                let (iid, activity_id) = task_id
                    .split_once(':')
                    .ok_or_else(|| ApiError::not_found(format!("no task `{task_id}`")))?;
                self.runtime.complete_task(
                    iid,
                    activity_id,
                    &req.role,
                    req.decision_label.as_deref(),
                )?;
                ok(value(&self.runtime.view(iid)?))
            }
            (_, Route::Artifact(id)) => {
                let id = decode(id)?;
                let selector = match query.get("version").map(String::as_str) {
                    None | Some("latest") => VersionSelector::Latest,
                    Some(v) => VersionSelector::Version(v.parse().map_err(|_| {
                        ApiError::schema(format!("version `{v}` is neither a positive integer nor `latest`"))
                    })?),
                };
                let store = self.runtime.store();
                let (version, content) = store.get_artifact(&id, selector)?;
                let lineage = store.lineage(&id, version.version)?;
                ok(json!({
                    "artifact": value(&version),
                    "content_base64": base64::engine::general_purpose::STANDARD.encode(content),
                    "lineage": value(&lineage),
                }))
            }
            (_, Route::Costs) => {
                let cloud = query.get("cloud").map(String::as_str);
                if let Some(c) = cloud {
                    self.runtime
                        .sim()
                        .cloud(c)
                        .ok_or_else(|| ApiError::from(&SimError::UnknownCloud(c.to_string())))?;
                }
                let sim = self.runtime.sim();
                let now = sim.now_s();
                let per_cloud: BTreeMap<&str, Money> = sim
                    .clouds()
                    .filter(|c| cloud.is_none_or(|id| id == c.cloud_id))
                    .map(|c| (c.cloud_id.as_str(), sim.accrued_cost(CostScope::Cloud(&c.cloud_id))))
                    .collect();
                let vms: Vec<VmCost> = sim
                    .instances()
                    .filter(|vm| cloud.is_none_or(|id| id == vm.cloud_id))
                    .map(|vm| VmCost {
                        vm_id: &vm.vm_id,
                        cloud_id: &vm.cloud_id,
                        machine_type: &vm.machine_type,
                        state: vm.state,
                        running_seconds: vm.running_seconds(now),
                        cost: vm.cost(now),
                    })
                    .collect();
                let total = match cloud {
                    Some(c) => sim.accrued_cost(CostScope::Cloud(c)),
                    None => sim.accrued_cost(CostScope::All),
                };
                ok(json!({
                    "now_s": now,
                    "total": value(&total),
                    "per_cloud": value(&per_cloud),
                    "vms": value(&vms),
                }))
            }
            (_, Route::Clock) => {
                let req: AdvanceClock = decode_body(body)?;
                let now = self.runtime.now_s();
                let until = now
                    .checked_add(req.seconds)
                    .ok_or_else(|| ApiError::schema("seconds overflows the simulated clock"))?;
                let fired = self.runtime.advance_to(until)?;
                ok(json!({ "now_s": self.runtime.now_s(), "fired": fired.len() }))
            }
            _ => unreachable!("route methods are checked above"),
        }
    }
}

/// Serves `service` on `listener` until ctrl-c. Under [`ClockMode::AutoStep`]
/// simulated time advances by `step_s` every wall-clock second.
pub async fn serve(
    service: Arc<Mutex<Service>>,
    listener: tokio::net::TcpListener,
    clock: ClockMode,
) -> std::io::Result<()> {
    use axum::body::Bytes;
    use axum::extract::State;
    use axum::http::{header, Method, StatusCode, Uri};
    use axum::response::IntoResponse;

    async fn forward(
        State(service): State<Arc<Mutex<Service>>>,
        method: Method,
        uri: Uri,
        body: Bytes,
    ) -> impl IntoResponse {
        let target = uri
            .path_and_query()
            .map(|p| p.as_str().to_string())
            .unwrap_or_else(|| uri.path().to_string());
        let response = tokio::task::spawn_blocking(move || {
            let mut service = service.lock().unwrap_or_else(|e| e.into_inner());
            service.handle_request(method.as_str(), &target, &body)
        })
        .await
        .expect("request handler panicked");
        (
            StatusCode::from_u16(response.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            [(header::CONTENT_TYPE, "application/json")],
            response.body,
        )
    }

    if let ClockMode::AutoStep { step_s } = clock {
        let service = Arc::clone(&service);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(1));
            tick.tick().await;
            loop {
                tick.tick().await;
                let service = Arc::clone(&service);
                let result = tokio::task::spawn_blocking(move || {
                    let mut service = service.lock().unwrap_or_else(|e| e.into_inner());
                    let until = service.runtime.now_s().saturating_add(step_s);
                    service.runtime.advance_to(until).map(|_| ())
                })
                .await;
                if let Ok(Err(e)) = result {
                    eprintln!("auto-step failed: {e}");
                }
            }
        });
    }

    let app = axum::Router::new().fallback(forward).with_state(service);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
