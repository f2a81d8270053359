use procforge::service::{ApiResponse, Service};
use procforge::Runtime;
use serde_json::{json, Value};

pub struct Exchange {
    pub name: &'static str,
    pub method: &'static str,
    pub target: String,
    pub body: String,
    pub response: ApiResponse,
}

pub fn service() -> Service {
    Service::new(Runtime::in_memory(super::sample_topology()))
}

/// A scripted session touching every endpoint and the main error paths:
/// the sample process with an elastic model-check, a failing decision and
/// the fix branch.
pub fn golden_session() -> Vec<Exchange> {
    let mut svc = service();
    let mut out = Vec::new();
    let mut call = |name: &'static str, method: &'static str, target: &str, body: String| {
        let response = svc.handle_request(method, target, body.as_bytes());
        out.push(Exchange {
            name,
            method,
            target: target.to_string(),
            body,
            response,
        });
    };
    let j = |v: Value| v.to_string();

    call("create-model", "POST", "/models", procforge::SAMPLE_MODEL.to_string());
    call("create-model-again", "POST", "/models", procforge::SAMPLE_MODEL.to_string());
    call("create-model-syntax", "POST", "/models", "model_id: [".into());
    call("create-model-schema", "POST", "/models", "model_id: x\nname: y\nactivities: 5\n".into());
    call("list-models", "GET", "/models", String::new());
    call("get-model", "GET", "/models/verify-release", String::new());
    call("get-model-missing", "GET", "/models/nope", String::new());
    call(
        "create-instance-missing-input",
        "POST",
        "/instances",
        j(json!({"model_id": "verify-release", "external_inputs": []})),
    );
    call(
        "create-instance",
        "POST",
        "/instances",
        j(json!({
            "model_id": "verify-release",
            "external_inputs": ["requirements"],
            "profiles": {"model-check": {
                "base_duration_s": 10000,
                "serial_fraction": 0.1,
                "sync_overhead_s_per_node": 0.0
            }}
        })),
    );
    call("list-instances", "GET", "/instances", String::new());
    call("tasks-qa", "GET", "/tasks?role=qa", String::new());
    call("tasks-dev", "GET", "/tasks?role=dev", String::new());
    call(
        "complete-wrong-role",
        "POST",
        "/tasks/inst-0001:spec-review/complete",
        j(json!({"role": "dev"})),
    );
    call(
        "complete-spec-review",
        "POST",
        "/tasks/inst-0001:spec-review/complete",
        j(json!({"role": "qa"})),
    );
    call(
        "complete-spec-review-twice",
        "POST",
        "/tasks/inst-0001:spec-review/complete",
        j(json!({"role": "qa"})),
    );
    call("advance-600", "POST", "/clock/advance", j(json!({"seconds": 600})));
    call("instance-mid-run", "GET", "/instances/inst-0001", String::new());
    call("advance-10000", "POST", "/clock/advance", j(json!({"seconds": 10000})));
    call("tasks-instance", "GET", "/tasks?role=qa&instance=inst-0001", String::new());
    call(
        "complete-unknown-label",
        "POST",
        "/tasks/inst-0001:decision/complete",
        j(json!({"role": "qa", "decision_label": "maybe"})),
    );
    call(
        "complete-decision-fail",
        "POST",
        "/tasks/inst-0001:decision/complete",
        j(json!({"role": "qa", "decision_label": "fail"})),
    );
    call("advance-3600", "POST", "/clock/advance", j(json!({"seconds": 3600})));
    call("instance-final", "GET", "/instances/inst-0001", String::new());
    call("events-all", "GET", "/instances/inst-0001/events", String::new());
    call("events-from-20", "GET", "/instances/inst-0001/events?from_seq=20", String::new());
    call("report", "GET", "/instances/inst-0001/report", String::new());
    call("report-missing", "GET", "/instances/inst-0404/report", String::new());
    call(
        "artifact-pinned",
        "GET",
        "/artifacts/inst-0001:verification-report?version=1",
        String::new(),
    );
    call("artifact-latest", "GET", "/artifacts/inst-0001%3Apatch", String::new());
    call("artifact-missing", "GET", "/artifacts/ghost", String::new());
    call("costs", "GET", "/costs", String::new());
    call("costs-private", "GET", "/costs?cloud=private", String::new());
    call("costs-unknown-cloud", "GET", "/costs?cloud=moon", String::new());
    call("instance-missing", "GET", "/instances/inst-9999", String::new());
    call("clock-bad-body", "POST", "/clock/advance", j(json!({"seconds": -5})));
    call("method-not-allowed", "DELETE", "/models", String::new());
    call("unknown-route", "GET", "/nowhere", String::new());
    out
}
