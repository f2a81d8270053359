use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use procforge::config::{parse_profiles, ServerConfig};
use procforge::engine::InstanceStatus;
use procforge::model::{parse_process, validate};
use procforge::report::export_report;
use procforge::runtime::Runtime;
use procforge::service::{canonical_json, serve, Service};
use procforge::sim::{parse_topology, CloudSpec, CostScope};

const VALIDATION_FAILURE: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "procforge", version, about = "Software-process enactment over a simulated hybrid cloud")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a process definition and list its violations.
    Validate { model: PathBuf },
    /// Enact a process to completion under a manually stepped clock.
    Run {
        model: PathBuf,
        /// YAML map of activity id to `{role, decision_label}`.
        #[arg(long)]
        answers: Option<PathBuf>,
        /// Write the run report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        topology: Option<PathBuf>,
        /// YAML map of activity id to task profile.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Persist the event log and artifacts here instead of in memory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Extra model files that sub-workflows may reference.
        #[arg(long = "library")]
        library: Vec<PathBuf>,
    },
    /// Serve the REST API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List manual tasks awaiting a human.
    Tasks {
        #[arg(long)]
        role: Option<String>,
        #[arg(long)]
        instance: Option<String>,
        #[arg(long, env = "PROCFORGE_URL", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    /// Complete a manual task or decision point.
    Complete {
        task: String,
        #[arg(long)]
        role: String,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, env = "PROCFORGE_URL", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    /// Print the report of an instance.
    Report {
        instance: String,
        #[arg(long, env = "PROCFORGE_URL", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
}

/// A failed command: exit code plus diagnostic.
struct Failure(u8, String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(RUNTIME_FAILURE, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { model } => validate_cmd(&model),
        Command::Run {
            model,
            answers,
            report,
            topology,
            profiles,
            data_dir,
            library,
        } => run_cmd(RunArgs {
            model,
            answers,
            report,
            topology,
            profiles,
            data_dir,
            library,
        }),
        Command::Serve { config } => serve_cmd(config.as_deref()),
        Command::Tasks {
            role,
            instance,
            server,
        } => tasks_cmd(&server, role.as_deref(), instance.as_deref()),
        Command::Complete {
            task,
            role,
            label,
            server,
        } => complete_cmd(&server, &task, &role, label.as_deref()),
        Command::Report { instance, server } => report_cmd(&server, &instance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure(RUNTIME_FAILURE, format!("cannot read {}: {e}", path.display())))
}

fn validate_cmd(path: &Path) -> CmdResult {
    let model = parse_process(&read(path)?)
        .map_err(|e| Failure(VALIDATION_FAILURE, format!("{}: {e}", path.display())))?;
    let violations = validate(&model);
    if violations.is_empty() {
        println!("OK");
        return Ok(());
    }
    for v in &violations {
        println!("{:?} [{}]: {}", v.code, v.ids.join(", "), v.message);
    }
    Err(Failure(
        VALIDATION_FAILURE,
        format!("{} violation(s)", violations.len()),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Answer {
    role: Option<String>,
    decision_label: Option<String>,
}

struct RunArgs {
    model: PathBuf,
    answers: Option<PathBuf>,
    report: Option<PathBuf>,
    topology: Option<PathBuf>,
    profiles: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    library: Vec<PathBuf>,
}

fn run_cmd(args: RunArgs) -> CmdResult {
    let invalid = |m: String| Failure(VALIDATION_FAILURE, m);
    let model = parse_process(&read(&args.model)?)
        .map_err(|e| invalid(format!("{}: {e}", args.model.display())))?;
    let violations = validate(&model);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{:?} [{}]: {}", v.code, v.ids.join(", "), v.message);
        }
        return Err(invalid(format!("{} violation(s)", violations.len())));
    }
    let clouds: Vec<CloudSpec> = match &args.topology {
        Some(p) => parse_topology(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => parse_topology(procforge::SAMPLE_TOPOLOGY).expect("bundled topology parses"),
    };
    let profiles = match &args.profiles {
        Some(p) => parse_profiles(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => BTreeMap::new(),
    };
    let answers: BTreeMap<String, Answer> = match &args.answers {
        Some(p) => serde_yaml::from_str(&read(p)?)
            .map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => BTreeMap::new(),
    };

    let mut rt = match &args.data_dir {
        Some(dir) => Runtime::persistent(clouds, dir)?,
        None => Runtime::in_memory(clouds),
    };
    for path in &args.library {
        let m = parse_process(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if m.model_id != model.model_id {
            rt.register_model(m)?;
        }
    }
    let model_id = model.model_id.clone();
    let externals: BTreeSet<String> = model.external_artifacts();
    rt.register_model(model)?;
    let id = rt.create_instance(&model_id, &externals, profiles)?;
    eprintln!("started {id}");

    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        rt.run_until_quiescent()?;
        let items = rt.worklist(None, Some(&id));
        let Some(item) = items.into_iter().next() else {
            break;
        };
        let (role, label) = match answers.get(&item.activity_id) {
            Some(a) => (
                a.role.clone().unwrap_or_else(|| item.role.clone()),
                a.decision_label.clone(),
            ),
            None => {
                let options = if item.guard_options.is_empty() {
                    String::new()
                } else {
                    format!(" [{}]", item.guard_options.join("/"))
                };
                eprint!("{} ({}) at t={}s{options}> ", item.task_id, item.role, rt.now_s());
                std::io::stderr().flush().ok();
                let line = lines.next().transpose()?.ok_or_else(|| {
                    Failure(
                        RUNTIME_FAILURE,
                        format!("no answer for {} and stdin is closed", item.task_id),
                    )
                })?;
                let line = line.trim();
                (item.role.clone(), (!line.is_empty()).then(|| line.to_string()))
            }
        };
        rt.complete_task(&id, &item.activity_id, &role, label.as_deref())?;
    }

    let report = export_report(&rt, &id)?;
    if let Some(path) = &args.report {
        std::fs::write(path, canonical_json(&report))
            .map_err(|e| Failure(RUNTIME_FAILURE, format!("cannot write {}: {e}", path.display())))?;
    }
    println!(
        "{id} {:?} at t={}s, cost {}",
        report.status,
        rt.now_s(),
        rt.cost(CostScope::Process(&id))
    );
    match report.status {
        InstanceStatus::Completed => Ok(()),
        InstanceStatus::Failed => Err(Failure(RUNTIME_FAILURE, format!("{id} failed"))),
        InstanceStatus::Running => Err(Failure(
            RUNTIME_FAILURE,
            format!("{id} stalled: no ready work fits the available clouds"),
        )),
    }
}

fn serve_cmd(config: Option<&Path>) -> CmdResult {
    let config = ServerConfig::load(config)?;
    let clouds = config.check()?;
    let mut rt = Runtime::persistent(clouds, &config.data_dir)?;
    for model in config.library()? {
        rt.register_model(model)?;
    }
    let service = Service::new(rt).with_profiles(config.task_profiles()?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen_address).await?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush().ok();
        serve(Arc::new(Mutex::new(service)), listener, config.clock_mode).await
    })?;
    Ok(())
}

/// Sends a request and returns the JSON body, turning API errors into failures.
fn call(server: &str, method: &str, path: &str, body: Option<String>) -> Result<serde_json::Value, Failure> {
    let client = reqwest::blocking::Client::new();
    let url = format!("{}{path}", server.trim_end_matches('/'));
    let request = match method {
        "POST" => client
            .post(&url)
            .header("content-type", "application/json")
            .body(body.unwrap_or_default()),
        _ => client.get(&url),
    };
    let response = request.send()?;
    let status = response.status();
    let value: serde_json::Value = serde_json::from_str(&response.text()?)?;
    if status.is_success() {
        Ok(value)
    } else {
        Err(Failure(
            RUNTIME_FAILURE,
            format!(
                "{} {}: {}",
                status.as_u16(),
                value["code"].as_str().unwrap_or("?"),
                value["message"].as_str().unwrap_or("")
            ),
        ))
    }
}

fn encode(s: &str) -> String {
    percent_encoding::utf8_percent_encode(s, percent_encoding::NON_ALPHANUMERIC).to_string()
}

fn tasks_cmd(server: &str, role: Option<&str>, instance: Option<&str>) -> CmdResult {
    let mut query = Vec::new();
    if let Some(r) = role {
        query.push(format!("role={}", encode(r)));
    }
    if let Some(i) = instance {
        query.push(format!("instance={}", encode(i)));
    }
    let items = call(server, "GET", &format!("/tasks?{}", query.join("&")), None)?;
    for item in items.as_array().into_iter().flatten() {
        let options: Vec<&str> = item["guard_options"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|o| o.as_str())
            .collect();
        println!(
            "{}\t{}\t{}",
            item["task_id"].as_str().unwrap_or_default(),
            item["role"].as_str().unwrap_or_default(),
            options.join("/")
        );
    }
    Ok(())
}

fn complete_cmd(server: &str, task: &str, role: &str, label: Option<&str>) -> CmdResult {
    let body = serde_json::json!({ "role": role, "decision_label": label });
    let view = call(
        server,
        "POST",
        &format!("/tasks/{}/complete", encode(task)),
        Some(body.to_string()),
    )?;
    println!(
        "{} {}",
        view["instance_id"].as_str().unwrap_or_default(),
        view["status"].as_str().unwrap_or_default()
    );
    Ok(())
}

fn report_cmd(server: &str, instance: &str) -> CmdResult {
    let report = call(server, "GET", &format!("/instances/{}/report", encode(instance)), None)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
