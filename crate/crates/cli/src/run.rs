use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ephemstore::bench::{self, BenchError, BenchSpec, DirMount, Mount, StoreMount};
use ephemstore::executor::{
    self, attach_clients, deploy, refresh_states, stage, teardown, DaemonCommand, DeploymentHandle, ExecError,
    NodeExecutor, HANDLE_FILE,
};
use ephemstore::inventory::{
    load_inventory, AllocationRequest, Cluster, InventoryError, NodeSpec, Purpose, LOCAL_STORAGE, STORAGE,
};
use ephemstore::ministore::ClientConfig;
use ephemstore::parallel::Execution;
use ephemstore::planner::{plan_deployment, render_configs, DeploymentPlan, DeploymentPolicy};
use log::info;
use serde::{Deserialize, Serialize};

use crate::{Cli, Cmd, CommonBench, PlanArgs, PolicyPreset, Workload};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_USAGE,
            error,
        }
    }
    pub fn missing(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_MISSING,
            error,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            error,
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Everything a later command needs to find the state of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub inventory: PathBuf,
    pub policy: DeploymentPolicy,
    pub storage_allocation: String,
    pub compute_allocation: Option<String>,
    pub compute_nodes: Vec<NodeSpec>,
    pub plan: PathBuf,
    pub handle: PathBuf,
    pub working_root: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub bench: Vec<BenchSpec>,
}

impl RunManifest {
    fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Failure::missing(anyhow!(
                "{} not found; run `ephemstore plan` first",
                path.display()
            )));
        }
        let doc = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&doc).with_context(|| format!("parsing {}", path.display()))?;
        for f in [&m.inventory, &out.join(&m.plan)] {
            if !f.is_file() {
                return Err(Failure::missing(anyhow!(
                    "manifest references {}, which does not exist",
                    f.display()
                )));
            }
        }
        Ok(m)
    }

    fn save(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST_FILE), self)
    }

    fn plan(&self, out: &Path) -> Result<DeploymentPlan> {
        let path = out.join(&self.plan);
        let doc = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&doc).with_context(|| format!("parsing {}", path.display()))?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let doc = serde_json::to_string_pretty(value).context("serializing")?;
    executor::write_atomic(path, doc.as_bytes()).map_err(|e| anyhow!(e))?;
    Ok(())
}

fn write_file(path: &Path, doc: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Holds `<out>/.lock` for the lifetime of one command.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(out: &Path) -> Result<RunLock> {
        let path = out.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = write!(f, "{}", std::process::id());
                    return Ok(RunLock(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if Path::new(&format!("/proc/{pid}")).exists() => {
                            return Err(anyhow!("{} is locked by running command pid {pid}", out.display()).into());
                        }
                        // stale lock from a command that died
                        _ => {
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(anyhow!(e).context(format!("creating {}", path.display())).into()),
            }
        }
        Err(anyhow!("could not take {}", path.display()).into())
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Create the run directory in one step: build it under a temporary name,
/// then rename it into place.
fn create_out_dir(out: &Path) -> Result<()> {
    if out.is_dir() {
        return Ok(());
    }
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let name = out
        .file_name()
        .ok_or_else(|| Failure::usage(anyhow!("--out must name a directory")))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    if let Err(e) = fs::rename(&tmp, out) {
        let _ = fs::remove_dir(&tmp);
        if !out.is_dir() {
            return Err(anyhow!(e).context(format!("creating {}", out.display())).into());
        }
    }
    Ok(())
}

fn require_out(out: &Path) -> Result<()> {
    if out.is_dir() {
        Ok(())
    } else {
        Err(Failure::missing(anyhow!(
            "run directory {} does not exist; run `ephemstore plan` first",
            out.display()
        )))
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Cmd::Daemon { config } = &cli.cmd {
        return ephemstore::ministore::server::run_daemon(config).map_err(|e| anyhow!(e).into());
    }
    let out = absolute(&cli.out)?;
    if matches!(cli.cmd, Cmd::Plan(_)) || bench_baseline(&cli.cmd) {
        create_out_dir(&out)?;
    } else {
        require_out(&out)?;
    }
    let _lock = RunLock::acquire(&out)?;
    match &cli.cmd {
        Cmd::Plan(args) => cmd_plan(&cli, &out, args),
        Cmd::Deploy => cmd_deploy(&cli, &out),
        Cmd::Status => cmd_status(&out),
        Cmd::Attach(args) => cmd_attach(&out, &args.nodes),
        Cmd::Stage(args) => cmd_stage(&out, args),
        Cmd::Bench(b) => cmd_bench(&out, &b.workload),
        Cmd::Report => crate::report::cmd_report(&out),
        Cmd::Teardown => cmd_teardown(&out),
        Cmd::Daemon { .. } => unreachable!("handled above"),
    }
}

/// A baseline benchmark needs no prior state, only somewhere to write.
fn bench_baseline(cmd: &Cmd) -> bool {
    let Cmd::Bench(b) = cmd else { return false };
    let common = match &b.workload {
        Workload::Ior(a) => &a.common,
        Workload::Mdtest(a) => &a.common,
        Workload::Hacc(a) => &a.common,
    };
    common.baseline.is_some()
}

fn handle_path(out: &Path) -> PathBuf {
    out.join(HANDLE_FILE)
}

fn load_handle(out: &Path) -> Result<DeploymentHandle> {
    let path = handle_path(out);
    if !path.is_file() {
        return Err(Failure::missing(anyhow!(
            "no deployment handle at {}; run `ephemstore deploy` first",
            path.display()
        )));
    }
    DeploymentHandle::load(&path).map_err(|e| anyhow!(e).into())
}

fn policy_from(args: &PlanArgs) -> DeploymentPolicy {
    let mut p = match args.policy {
        PolicyPreset::Dom => DeploymentPolicy::dom(),
        PolicyPreset::Ault => DeploymentPolicy::ault(),
    };
    if let Some(v) = args.meta_disks {
        p.meta_disks_per_node = v;
    }
    if let Some(v) = args.storage_disks {
        p.storage_disks_per_node = v;
    }
    if let Some(v) = args.dedicated_mgmt_disks {
        p.colocate_mgmt_on_first_meta = v == 0;
        p.dedicated_mgmt_disks = v;
    }
    if let Some(v) = args.stripe_size {
        p.stripe_size_bytes = v;
    }
    if let Some(v) = args.base_port {
        p.base_port = v;
    }
    if args.no_xattr {
        p.enable_xattr_metadata = false;
    }
    p
}

fn cmd_plan(cli: &Cli, out: &Path, args: &PlanArgs) -> Result<()> {
    let inventory = cli
        .inventory
        .as_deref()
        .ok_or_else(|| Failure::usage(anyhow!("plan needs --inventory <file>")))?;
    let inventory = absolute(inventory)?;
    let doc = fs::read_to_string(&inventory)
        .map_err(|e| Failure::missing(anyhow!(e).context(format!("reading inventory {}", inventory.display()))))?;
    let nodes = load_inventory(&doc).with_context(|| format!("loading {}", inventory.display()))?;
    if let Ok(h) = DeploymentHandle::load(&handle_path(out)) {
        if !h.torn_down {
            return Err(anyhow!(
                "a deployment is active in {}; run `ephemstore teardown` first",
                out.display()
            )
            .into());
        }
    }

    let mut cluster = Cluster::new(nodes);
    let storage_constraint = args.storage_constraint.clone().unwrap_or_else(|| {
        let declared = cluster.declared_features();
        if declared.contains(STORAGE) || !declared.contains(LOCAL_STORAGE) {
            STORAGE.to_string()
        } else {
            LOCAL_STORAGE.to_string()
        }
    });
    let req = AllocationRequest::new(args.storage_nodes as usize, &storage_constraint, Purpose::Storage)
        .map_err(|e| Failure::usage(anyhow!(e)))?;
    let storage = cluster.request(&req).context("allocating storage nodes")?;

    let compute = allocate_compute(&mut cluster, args)?;
    let policy = policy_from(args);
    let plan = plan_deployment(&storage, &policy).context("planning the deployment")?;

    write_json(&out.join(PLAN_FILE), &plan)?;
    let table = plan.role_table();
    write_file(&out.join("roles.txt"), &table)?;
    let mut csv = String::from("node,disk,mount_root,role\n");
    for a in &plan.assignments {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            a.node,
            a.disk,
            a.mount_root.display(),
            a.role
        ));
    }
    write_file(&out.join("roles.csv"), &csv)?;
    let configs = out.join("configs");
    let _ = fs::remove_dir_all(&configs);
    for (rel, doc) in render_configs(&plan) {
        write_file(&configs.join(rel), &doc)?;
    }
    let manifest = RunManifest {
        inventory,
        policy,
        storage_allocation: storage.id.clone(),
        compute_allocation: compute.as_ref().map(|a| a.0.clone()),
        compute_nodes: compute.map(|a| a.1).unwrap_or_default(),
        plan: PathBuf::from(PLAN_FILE),
        handle: PathBuf::from(HANDLE_FILE),
        working_root: executor::resolve_working_root(
            &out.join("work"),
            std::env::var(executor::ROOT_ENV).ok().as_deref(),
        ),
        out_dir: out.to_path_buf(),
        bench: Vec::new(),
    };
    manifest.save(out)?;

    print!("{table}");
    println!(
        "compute nodes: {}",
        if manifest.compute_nodes.is_empty() {
            "none".to_string()
        } else {
            manifest
                .compute_nodes
                .iter()
                .map(|n| n.id.as_str())
                .collect::<Vec<_>>()
                .join(",")
        }
    );
    println!("configs written to {}", configs.display());
    Ok(())
}

fn allocate_compute(cluster: &mut Cluster, args: &PlanArgs) -> Result<Option<(String, Vec<NodeSpec>)>> {
    let wanted = match args.compute_nodes {
        Some(0) => return Ok(None),
        Some(n) => n,
        None => cluster.nodes().len(),
    };
    let req = AllocationRequest::new(wanted, &args.compute_constraint, Purpose::Compute)
        .map_err(|e| Failure::usage(anyhow!(e)))?;
    match cluster.request(&req) {
        Ok(a) => Ok(Some((a.id, a.nodes))),
        // no explicit count: take every eligible node
        Err(InventoryError::InsufficientNodes { eligible, .. }) if args.compute_nodes.is_none() => {
            if eligible == 0 {
                return Ok(None);
            }
            let req = AllocationRequest::new(eligible, &args.compute_constraint, Purpose::Compute)
                .map_err(|e| Failure::usage(anyhow!(e)))?;
            let a = cluster.request(&req).context("allocating compute nodes")?;
            Ok(Some((a.id, a.nodes)))
        }
        Err(InventoryError::UnknownFeature(_)) if args.compute_nodes.is_none() => Ok(None),
        Err(e) => Err(anyhow!(e).context("allocating compute nodes").into()),
    }
}

fn daemon_command() -> Result<DaemonCommand> {
    let exe = std::env::current_exe().context("locating the ephemstore executable")?;
    Ok(DaemonCommand::new(exe).arg("daemon"))
}

fn cmd_deploy(cli: &Cli, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::load(out)?;
    let plan = manifest.plan(out)?;
    // the environment may move the working root after planning
    manifest.working_root = executor::resolve_working_root(
        &manifest.working_root,
        std::env::var(executor::ROOT_ENV).ok().as_deref(),
    );
    manifest.save(out)?;
    let exec = NodeExecutor::new(cli.backend, &manifest.working_root, daemon_command()?);
    match deploy(&plan, &exec) {
        Ok(handle) => {
            handle.save(&handle_path(out)).map_err(|e| anyhow!(e))?;
            let mut csv = String::from("phase,seconds\n");
            for (k, v) in &handle.timings {
                csv.push_str(&format!("{k},{v:.6}\n"));
            }
            write_file(&out.join("timings.csv"), &csv)?;
            match cli.backend {
                executor::Backend::Local => {
                    print!("{}", handle.status_table());
                    println!(
                        "deployed {} services in {:.3} s",
                        handle.service_states.len(),
                        handle.timings.get("deploy").copied().unwrap_or(0.0)
                    );
                }
                executor::Backend::Emit => println!(
                    "wrote configs and {} under {}",
                    executor::MANIFEST_FILE,
                    manifest.working_root.display()
                ),
            }
            Ok(())
        }
        Err(ExecError::ServiceFailed {
            service,
            reason,
            handle,
        }) => {
            handle.save(&handle_path(out)).map_err(|e| anyhow!(e))?;
            Err(anyhow!("service {service} failed to start: {reason}").into())
        }
        Err(e) => Err(anyhow!(e).into()),
    }
}

fn cmd_status(out: &Path) -> Result<()> {
    let mut handle = load_handle(out)?;
    let lost = refresh_states(&mut handle);
    print!("{}", handle.status_table());
    let mut csv = String::from("service,state,pid\n");
    for (id, state) in &handle.service_states {
        let pid = handle.pids.get(id).map(u32::to_string).unwrap_or_default();
        csv.push_str(&format!("{id},{state},{pid}\n"));
    }
    write_file(&out.join("status.csv"), &csv)?;
    if !lost.is_empty() {
        return Err(anyhow!("services no longer running: {}", lost.join(", ")).into());
    }
    Ok(())
}

/// Missing inputs and deployments that are not live are missing state; the
/// rest are runtime failures.
fn exec_failure(e: ExecError) -> Failure {
    match e {
        ExecError::SourceMissing(_)
        | ExecError::NotRunning(_)
        | ExecError::Store(ephemstore::ministore::StoreError::Unreachable { .. }) => Failure::missing(anyhow!(e)),
        e => anyhow!(e).into(),
    }
}

fn cmd_attach(out: &Path, only: &[String]) -> Result<()> {
    let manifest = RunManifest::load(out)?;
    let mut handle = load_handle(out)?;
    let nodes: Vec<NodeSpec> = if only.is_empty() {
        manifest.compute_nodes.clone()
    } else {
        let mut picked = Vec::new();
        for id in only {
            let n = manifest
                .compute_nodes
                .iter()
                .find(|n| &n.id == id)
                .ok_or_else(|| Failure::usage(anyhow!("{id} is not an allocated compute node")))?;
            picked.push(n.clone());
        }
        picked
    };
    attach_clients(&mut handle, &nodes).map_err(exec_failure)?;
    handle.save(&handle_path(out)).map_err(|e| anyhow!(e))?;
    if nodes.is_empty() {
        println!("no compute nodes to attach");
    }
    for n in &nodes {
        println!("{} -> {}", n.id, handle.client_mounts[&n.id].display());
    }
    Ok(())
}

fn cmd_stage(out: &Path, args: &crate::StageArgs) -> Result<()> {
    let handle = load_handle(out)?;
    let bytes = stage(&handle, args.direction.into(), &args.src, &args.dst).map_err(exec_failure)?;
    println!("staged {bytes} bytes from {} to {}", args.src, args.dst);
    Ok(())
}

fn bench_spec(common: &CommonBench, default_nodes: u32, mut spec: BenchSpec) -> BenchSpec {
    spec.nodes = common.nodes.unwrap_or(default_nodes);
    spec.ppn = common.ppn;
    spec.iterations = common.iterations;
    spec.seed = common.seed;
    spec.reorder_read_ranks = !common.no_reorder;
    spec.execution = if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    spec
}

fn cmd_bench(out: &Path, workload: &Workload) -> Result<()> {
    let mut manifest = RunManifest::load(out).ok();
    let default_nodes = manifest
        .as_ref()
        .map(|m| m.compute_nodes.len().max(1) as u32)
        .unwrap_or(1);
    let (common, spec) = match workload {
        Workload::Ior(a) => {
            let transfer = a.transfer.unwrap_or_else(|| (1u64 << 20).min(a.size).max(1));
            let spec = BenchSpec::ior(1, 1, a.mode.into(), a.size, transfer);
            (&a.common, bench_spec(&a.common, default_nodes, spec))
        }
        Workload::Mdtest(a) => {
            let mut spec = BenchSpec::mdtest(1, 1, a.items);
            spec.transfer_size_bytes = a.write_bytes;
            (&a.common, bench_spec(&a.common, default_nodes, spec))
        }
        Workload::Hacc(a) => (
            &a.common,
            bench_spec(&a.common, default_nodes, BenchSpec::hacc(1, 1, a.particles)),
        ),
    };
    spec.validate().map_err(|e| Failure::usage(anyhow!(e)))?;

    let result = match &common.baseline {
        Some(dir) => {
            let mount = bench::baseline(dir).map_err(|e| Failure::missing(anyhow!(e)))?;
            run_bench(&spec, &mount)?
        }
        None => {
            let handle = load_handle(out)?;
            if !handle.all_running() {
                return Err(Failure::missing(anyhow!(
                    "the deployment is not running; deploy first or pass --baseline <dir>"
                )));
            }
            let cfg = match handle.client_mounts.values().next() {
                Some(mount) => ClientConfig::load(&mount.join(executor::CLIENT_CONF)).map_err(|e| anyhow!(e))?,
                None => handle.client_config(),
            };
            run_bench(&spec, &StoreMount::new(cfg))?
        }
    };

    let target = match &common.baseline {
        Some(d) => DirMount::new(d).describe(),
        None => "deployment".to_string(),
    };
    print!("{}", bench::render_summary(&spec, &result, &target));

    let dir = out.join("bench");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let run_no = fs::read_dir(&dir)
        .map(|rd| {
            rd.flatten()
                .filter(|e| e.file_name().to_string_lossy().starts_with("run-"))
                .count()
        })
        .unwrap_or(0)
        / 2
        + 1;
    let stem = format!("run-{run_no:03}-{}-{}", spec.workload, spec.mode);
    let mut run_csv = Vec::new();
    let mut summary = Vec::new();
    if spec.workload == bench::Workload::Mdtest {
        bench::write_mdtest_csv(&mut run_csv, &result).context("formatting CSV")?;
        append_csv(&out.join("mdtest.csv"), &run_csv)?;
    } else {
        bench::write_results_csv(&mut run_csv, &spec, &result, true).context("formatting CSV")?;
        append_csv(&out.join("results.csv"), &run_csv)?;
    }
    bench::write_summary_csv(&mut summary, &result).context("formatting CSV")?;
    fs::write(dir.join(format!("{stem}.csv")), &run_csv).context("writing run CSV")?;
    fs::write(dir.join(format!("{stem}-summary.csv")), &summary).context("writing summary CSV")?;
    println!("results: {}", dir.join(format!("{stem}.csv")).display());

    if let Some(m) = manifest.as_mut() {
        m.bench.push(spec);
        m.save(out)?;
    }
    Ok(())
}

fn run_bench<M: Mount>(spec: &BenchSpec, mount: &M) -> Result<bench::BenchResult> {
    info!("running {} against {}", spec.workload, mount.describe());
    bench::run(spec, mount).map_err(|e| match e {
        BenchError::InvalidSpec(_) => Failure::usage(anyhow!(e)),
        other => anyhow!(other).into(),
    })
}

/// Append CSV rows to `path`, writing the header only when the file is new.
fn append_csv(path: &Path, doc: &[u8]) -> Result<()> {
    let text = String::from_utf8_lossy(doc);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut chunk = String::new();
    if fresh {
        chunk.push_str(header);
        chunk.push('\n');
    }
    for l in lines {
        chunk.push_str(l);
        chunk.push('\n');
    }
    f.write_all(chunk.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_teardown(out: &Path) -> Result<()> {
    let mut handle = load_handle(out)?;
    let report = teardown(&mut handle);
    write_file(&out.join("teardown.csv"), &report.to_csv())?;
    println!("{:<28} {:>16} {:>16}", "disk", "residual_entries", "bytes_scrubbed");
    for d in &report.disks {
        println!("{:<28} {:>16} {:>16}", d.disk, d.residual_entries, d.bytes_scrubbed);
    }
    println!(
        "stopped {} services, removed {} attach points",
        report.services_stopped.len(),
        report.mounts_removed.len()
    );
    if !report.unresponsive.is_empty() {
        println!("killed unresponsive services: {}", report.unresponsive.join(", "));
    }
    if !report.clean() {
        eprintln!(
            "warning: residue left behind ({} daemons, {} entries)",
            report.residual_daemons.len(),
            report.disks.iter().map(|d| d.residual_entries).sum::<u64>()
        );
    }
    fs::remove_file(handle_path(out)).with_context(|| format!("removing {}", handle_path(out).display()))?;
    Ok(())
}
