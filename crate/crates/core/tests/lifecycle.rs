use std::fs;
use std::path::Path;

use ephemstore::executor::{
    attach_clients, deploy, scan_daemons, stage, teardown, Backend, DaemonCommand, DeploymentHandle, Direction,
    ExecError, NodeExecutor, ServiceState,
};
use ephemstore::inventory::{presets, AllocationRequest, Cluster, NodeSpec, Purpose};
use ephemstore::ministore::{Client, ClientConfig, StoreError};
use ephemstore::planner::{plan_deployment, DeploymentPlan, DeploymentPolicy, ServiceKind};

fn executor(root: &Path) -> NodeExecutor {
    NodeExecutor::new(
        Backend::Local,
        root,
        DaemonCommand::new(env!("CARGO_BIN_EXE_ministored")),
    )
}

fn dom() -> (DeploymentPlan, Vec<NodeSpec>) {
    let mut cluster = Cluster::new(presets::dom());
    let storage = cluster
        .request(&AllocationRequest::new(2, "storage", Purpose::Storage).unwrap())
        .unwrap();
    let compute = cluster
        .request(&AllocationRequest::new(8, "compute", Purpose::Compute).unwrap())
        .unwrap();
    let plan = plan_deployment(&storage, &DeploymentPolicy::dom()).unwrap();
    (plan, compute.nodes)
}

fn entries(dir: &Path) -> usize {
    fs::read_dir(dir).map(|rd| rd.count()).unwrap_or(0)
}

#[test]
fn full_cycle() {
    let root = tempfile::tempdir().unwrap();
    let exec = executor(root.path());
    let (plan, compute) = dom();

    let mut handle = deploy(&plan, &exec).unwrap();
    assert_eq!(handle.service_states.len(), 8);
    assert!(handle.all_running());
    let total = handle.timings["deploy"];
    let tiers: f64 = handle
        .timings
        .iter()
        .filter(|(k, _)| k.starts_with("tier"))
        .map(|(_, v)| v)
        .sum();
    assert!(total > 0.0);
    assert!(
        tiers <= total + 1e-6 && total - tiers < 0.05,
        "deploy {total} vs tiers {tiers}"
    );
    assert_eq!(scan_daemons(root.path()).len(), 8);

    match deploy(&plan, &exec) {
        Err(ExecError::PortCollision { .. }) => {}
        other => panic!("expected port collision, got {other:?}"),
    }

    attach_clients(&mut handle, &compute).unwrap();
    assert_eq!(handle.client_mounts.len(), 8);
    assert!(matches!(
        attach_clients(&mut handle, &compute[..1]),
        Err(ExecError::DuplicateAttach(_))
    ));
    let mut clients: Vec<Client> = handle
        .client_mounts
        .values()
        .map(|m| Client::connect(&ClientConfig::load(&m.join("client.conf")).unwrap()).unwrap())
        .collect();
    let fs_id = clients[0].fs_id();
    assert!(clients.iter().all(|c| c.fs_id() == fs_id));
    for i in 0..10 {
        let p = format!("/f{i}");
        clients[0].create(&p).unwrap();
        clients[0].write(&p, 0, &vec![i as u8; 300_000]).unwrap();
    }
    assert_eq!(clients[7].read("/f3", 0, 300_000).unwrap(), vec![3u8; 300_000]);
    drop(clients);

    let path = root.path().join("handle.json");
    handle.save(&path).unwrap();
    // teardown from a reloaded handle, as a later command would
    let mut reloaded = DeploymentHandle::load(&path).unwrap();
    let report = teardown(&mut reloaded);
    assert!(report.clean(), "{report:?}");
    assert!(report.unresponsive.is_empty());
    assert_eq!(report.disks.len(), 6);
    assert!(report.disks.iter().map(|d| d.bytes_scrubbed).sum::<u64>() >= 3_000_000);
    for dir in reloaded.disk_dirs.values() {
        assert_eq!(entries(dir), 0, "{}", dir.display());
    }
    assert!(scan_daemons(root.path()).is_empty());
    assert!(!root.path().join("clients/nid00001").exists());
    assert!(reloaded.service_states.values().all(|s| *s == ServiceState::Stopped));

    let again = teardown(&mut reloaded);
    assert_eq!(again.actions, 0);
    assert!(again.clean());

    // the original process still holds the children; reap them
    drop(handle);

    let (plan2, _) = dom();
    assert_eq!(plan, plan2);
    let mut second = deploy(&plan2, &exec).unwrap();
    assert!(second.all_running());
    assert!(teardown(&mut second).clean());
}

#[test]
fn attach_requires_management() {
    let root = tempfile::tempdir().unwrap();
    let exec = executor(root.path());
    let (plan, compute) = dom();
    let mut handle = deploy(&plan, &exec).unwrap();
    teardown(&mut handle);
    match attach_clients(&mut handle, &compute) {
        Err(ExecError::Store(StoreError::Unreachable { .. })) => {}
        other => panic!("expected unreachable management, got {other:?}"),
    }
    attach_clients(&mut handle, &[]).unwrap();
    assert!(handle.client_mounts.is_empty());
}

/// Make `dir` unusable as a storage disk. Root ignores permission bits, so
/// a plain file is planted where the chunk directory must go.
fn make_read_only(dir: &Path) {
    use std::os::unix::fs::PermissionsExt;
    fs::create_dir_all(dir).unwrap();
    // SAFETY: geteuid has no preconditions.
    if unsafe { libc::geteuid() } == 0 {
        fs::write(dir.join("chunks"), b"").unwrap();
    }
    fs::set_permissions(dir, fs::Permissions::from_mode(0o555)).unwrap();
}

#[test]
fn read_only_storage_disk_fails_that_service() {
    let root = tempfile::tempdir().unwrap();
    let exec = executor(root.path());
    let (plan, _) = dom();
    let victim = plan.services_of(ServiceKind::Storage).nth(1).unwrap().clone();
    let disk = plan
        .assignments
        .iter()
        .find(|a| a.node == victim.node && a.mount_root == victim.data_dir)
        .unwrap();
    let dir = exec.disk_dir(&disk.node, &disk.disk);
    make_read_only(&dir);

    let err = deploy(&plan, &exec).unwrap_err();
    let ExecError::ServiceFailed { service, handle, .. } = err else {
        panic!("expected a failed service, got {err}");
    };
    assert_eq!(service, victim.id);
    assert_eq!(handle.state(&victim.id), Some(ServiceState::Failed));
    for id in &plan.startup_order {
        assert_ne!(handle.state(id), Some(ServiceState::Running), "{id} left running");
    }
    assert_eq!(handle.state(&plan.management().id), Some(ServiceState::Stopped));
    assert!(scan_daemons(root.path()).is_empty());
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(&dir, fs::Permissions::from_mode(0o755)).unwrap();
}

#[test]
fn unresponsive_service_is_killed_and_flagged() {
    let root = tempfile::tempdir().unwrap();
    let exec = executor(root.path());
    let (plan, _) = dom();
    let mut handle = deploy(&plan, &exec).unwrap();
    let victim = plan.services_of(ServiceKind::Storage).next().unwrap().id.clone();
    let pid = handle.pids[&victim];
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGSTOP);
    }
    let report = teardown(&mut handle);
    assert_eq!(report.unresponsive, vec![victim]);
    assert!(report.clean(), "{report:?}");
    assert!(scan_daemons(root.path()).is_empty());
}

#[test]
fn stage_round_trips() {
    let root = tempfile::tempdir().unwrap();
    let exec = executor(root.path());
    let (plan, _) = dom();
    let mut handle = deploy(&plan, &exec).unwrap();

    let ext = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..1 << 20)
        .map(|i: u32| (i.wrapping_mul(2654435761) >> 24) as u8)
        .collect();
    let src = ext.path().join("in.bin");
    fs::write(&src, &data).unwrap();
    let n = stage(&handle, Direction::In, src.to_str().unwrap(), "/in/data.bin").unwrap();
    assert_eq!(n, 1 << 20);
    let mut c = Client::connect(&handle.client_config()).unwrap();
    assert_eq!(c.read("/in/data.bin", 0, 2 << 20).unwrap(), data);

    let tree = ext.path().join("tree");
    fs::create_dir_all(tree.join("sub")).unwrap();
    fs::write(tree.join("a"), b"alpha").unwrap();
    fs::write(tree.join("b"), b"beta").unwrap();
    fs::write(tree.join("sub/c"), b"gamma").unwrap();
    assert_eq!(
        stage(&handle, Direction::In, tree.to_str().unwrap(), "/tree").unwrap(),
        14
    );
    let out = ext.path().join("out");
    assert_eq!(
        stage(&handle, Direction::Out, "/tree", out.to_str().unwrap()).unwrap(),
        14
    );
    assert_eq!(fs::read(out.join("a")).unwrap(), b"alpha");
    assert_eq!(fs::read(out.join("b")).unwrap(), b"beta");
    assert_eq!(fs::read(out.join("sub/c")).unwrap(), b"gamma");

    let missing = ext.path().join("nope");
    assert!(matches!(
        stage(&handle, Direction::In, missing.to_str().unwrap(), "/x"),
        Err(ExecError::SourceMissing(_))
    ));
    assert!(matches!(
        stage(&handle, Direction::Out, "/nope", out.to_str().unwrap()),
        Err(ExecError::SourceMissing(_))
    ));
    assert!(teardown(&mut handle).clean());
}

#[test]
fn bad_working_root_is_named() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("not-a-dir");
    fs::write(&file, b"").unwrap();
    let (plan, _) = dom();
    match deploy(&plan, &executor(&file)) {
        Err(e @ ExecError::WorkingRoot { .. }) => assert!(e.to_string().contains("not-a-dir")),
        other => panic!("expected working root error, got {other:?}"),
    }
}
