use std::collections::BTreeMap;
use std::fs;

use ephemstore::ministore::namespace::{join, parent};
use ephemstore::ministore::wire::RegistryEntry;
use ephemstore::ministore::{server, Endpoint, Entry, LocalCluster, StoreError};
use ephemstore::parallel::Execution;
use ephemstore::planner::ServiceKind;
use ephemstore::MIB;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, RngCore, SeedableRng};

const KIB: u64 = 1024;

fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    rand::rngs::StdRng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

#[test]
fn four_mib_lands_one_chunk_per_target() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 1, 4, MIB).unwrap();
    let mut c = cluster.client().unwrap();
    let meta = c.create("/a").unwrap();
    let data = pattern(1, 4 * MIB as usize);
    c.write("/a", 0, &data).unwrap();
    assert_eq!(c.read("/a", 0, data.len()).unwrap(), data);

    let start = meta.stripe.start_target_index;
    for (t, (id, dir)) in cluster.target_dirs().iter().enumerate() {
        let chunks = c.list_chunks(id, meta.file_id).unwrap();
        assert_eq!(chunks.len(), 1, "target {id}");
        let (chunk, len) = chunks[0];
        assert_eq!(len, MIB);
        assert_eq!((start + chunk as usize) % 4, t);
        let on_disk = dir.join("chunks").join(format!("{}.{}", meta.file_id, chunk));
        assert_eq!(fs::metadata(on_disk).unwrap().len(), MIB);
    }
}

#[test]
fn boundary_write_splits_across_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 1, 4, MIB).unwrap();
    let mut c = cluster.client().unwrap();
    let meta = c.create("/b").unwrap();
    c.write("/b", MIB - 1, b"xyz").unwrap();
    let t0 = meta.stripe.target_for(0).to_string();
    let t1 = meta.stripe.target_for(1).to_string();
    // the gap below the write is zero-filled, so chunk 0 is a full stripe
    assert_eq!(c.list_chunks(&t0, meta.file_id).unwrap(), vec![(0, MIB)]);
    assert_eq!(c.list_chunks(&t1, meta.file_id).unwrap(), vec![(1, 2)]);
    assert_eq!(c.read("/b", MIB - 1, 10).unwrap(), b"xyz");
    assert_eq!(c.read("/b", 0, 4).unwrap(), vec![0; 4]);
}

#[test]
fn start_targets_identical_across_fresh_namespaces() {
    let mut starts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cluster = LocalCluster::start(dir.path(), 1, 4, MIB).unwrap();
        let mut c = cluster.client().unwrap();
        starts.push(c.create("/a").unwrap().stripe.start_target_index);
    }
    assert_eq!(starts[0], starts[1]);
}

#[test]
fn create_under_missing_parent() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 2, 2, MIB).unwrap();
    let mut c = cluster.client().unwrap();
    assert!(matches!(c.create("/nope/f"), Err(StoreError::ParentMissing(_))));
    c.create("/f").unwrap();
    assert!(matches!(c.create("/f"), Err(StoreError::Exists(_))));
    assert!(matches!(c.create("/f/g"), Err(StoreError::NotADirectory(_))));
    assert!(matches!(c.write("/missing", 0, b"x"), Err(StoreError::NotFound(_))));
}

#[test]
fn namespace_basics_and_unlink_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 2, 4, MIB).unwrap();
    let mut c = cluster.client().unwrap();
    c.mkdir("/d").unwrap();
    assert_eq!(c.stat("/d").unwrap(), Entry::Dir { path: "/d".into() });
    let meta = c.create("/d/f").unwrap();
    c.write("/d/f", 0, &pattern(2, 4 * MIB as usize)).unwrap();
    assert!(matches!(c.rmdir("/d"), Err(StoreError::NotEmpty(_))));
    let before: Vec<u64> = c.target_stats().unwrap().iter().map(|s| s.chunks).collect();
    assert_eq!(before, vec![1, 1, 1, 1]);
    c.unlink("/d/f").unwrap();
    for id in c.target_ids() {
        assert!(c.list_chunks(&id, meta.file_id).unwrap().is_empty());
    }
    assert!(c
        .target_stats()
        .unwrap()
        .iter()
        .all(|s| s.chunks == 0 && s.used_bytes == 0));
    c.rmdir("/d").unwrap();
    assert!(matches!(c.stat("/d"), Err(StoreError::NotFound(_))));
    assert!(matches!(c.rmdir("/d"), Err(StoreError::NotFound(_))));
}

#[test]
fn registry_snapshot_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 2, 4, MIB).unwrap();
    let c = cluster.client().unwrap();
    assert_eq!(c.snapshot().counts(), (2, 4));

    let cfg = cluster.client_config();
    let dup = RegistryEntry {
        kind: ServiceKind::Storage,
        id: "target0".into(),
        index: 9,
        endpoint: Endpoint::new("elsewhere", 1),
    };
    let err = server::register(&cfg.mgmt, &cfg.socket_dir, &dup, std::time::Duration::from_secs(1)).unwrap_err();
    assert!(matches!(err, StoreError::Duplicate(id) if id == "target0"));

    let empty_dir = tempfile::tempdir().unwrap();
    let empty = LocalCluster::start(empty_dir.path(), 0, 0, MIB).unwrap();
    assert_eq!(empty.client().unwrap().snapshot().counts(), (0, 0));
}

#[test]
fn unreachable_management() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = {
        let cluster = LocalCluster::start(dir.path(), 1, 1, MIB).unwrap();
        cluster.client_config()
    };
    assert!(matches!(
        ephemstore::ministore::Client::connect(&cfg),
        Err(StoreError::Unreachable { .. })
    ));
}

#[test]
fn target_down_names_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let mut cluster = LocalCluster::start(dir.path(), 1, 2, 64 * KIB).unwrap();
    let mut c = cluster.client().unwrap();
    c.create("/f").unwrap();
    c.write("/f", 0, &[1; 1024]).unwrap();
    cluster.stop_service("target1");
    cluster.stop_service("target0");
    match c.write("/f", 0, &[2; 1024]) {
        Err(StoreError::TargetDown { target, .. }) => assert!(target.starts_with("target")),
        other => panic!("expected TargetDown, got {other:?}"),
    }
}

#[test]
fn namespace_full() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ephemstore::ministore::local::LocalClusterSpec::new(1, 2, 64 * KIB);
    spec.target_capacity = 128 * KIB;
    let cluster = LocalCluster::start_with(dir.path(), &spec).unwrap();
    let mut c = cluster.client().unwrap();
    c.create("/big").unwrap();
    c.write("/big", 0, &vec![7; 256 * KIB as usize]).unwrap();
    assert!(matches!(
        c.write("/big", 256 * KIB, &[1; 10]),
        Err(StoreError::NoSpace(_))
    ));
}

/// Random write schedules against a flat shadow buffer.
fn run_schedules(targets: usize, stripe: u64, schedules: usize, seed: u64) {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 2, targets, stripe).unwrap();
    let base = cluster.client().unwrap();
    let mut clients: Vec<_> = (0..schedules).map(|_| base.reconnect().unwrap()).collect();
    let failures = Execution::Parallel.for_each_rank(&mut clients, |i, c| -> Result<(), String> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ (i as u64) << 8);
        let path = format!("/s{i}");
        let meta = c.create(&path).map_err(|e| e.to_string())?;
        let mut shadow: Vec<u8> = Vec::new();
        for w in 0..rng.gen_range(1..5) {
            let off = rng.gen_range(0..3 * stripe) as usize;
            let len = rng.gen_range(0..=stripe as usize + 17);
            let data = pattern(seed + i as u64 * 31 + w, len);
            c.write(&path, off as u64, &data).map_err(|e| e.to_string())?;
            if len > 0 {
                if shadow.len() < off + len {
                    shadow.resize(off + len, 0);
                }
                shadow[off..off + len].copy_from_slice(&data);
            }
        }
        let got = c.read(&path, 0, shadow.len() + 100).map_err(|e| e.to_string())?;
        if got != shadow {
            return Err(format!("schedule {i}: read-back differs from shadow"));
        }
        // conservation and placement
        let mut total = 0;
        for (t, id) in c.target_ids().iter().enumerate() {
            for (chunk, len) in c.list_chunks(id, meta.file_id).map_err(|e| e.to_string())? {
                if meta.stripe.target_index(chunk) != t {
                    return Err(format!("chunk {chunk} on wrong target {id}"));
                }
                total += len;
            }
        }
        if total != shadow.len() as u64 {
            return Err(format!("chunk bytes {total} != size {}", shadow.len()));
        }
        Ok(())
    });
    let errs: Vec<_> = failures.into_iter().filter_map(Result::err).collect();
    assert!(errs.is_empty(), "{errs:?}");
}

#[test]
fn shadow_oracle_small_stripe() {
    for t in [1, 2, 4, 8] {
        run_schedules(t, 64 * KIB, 40, 11);
    }
}

#[test]
fn shadow_oracle_mib_stripe() {
    for t in [1, 4] {
        run_schedules(t, MIB, 20, 12);
    }
}

#[derive(Debug, Clone)]
enum NsOp {
    Mkdir(String),
    Rmdir(String),
    Create(String),
    Unlink(String),
    Stat(String),
}

fn arb_path() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 1..4).prop_map(|p| format!("/{}", p.join("/")))
}

fn arb_op() -> impl Strategy<Value = NsOp> {
    prop_oneof![
        arb_path().prop_map(NsOp::Mkdir),
        arb_path().prop_map(NsOp::Rmdir),
        arb_path().prop_map(NsOp::Create),
        arb_path().prop_map(NsOp::Unlink),
        arb_path().prop_map(NsOp::Stat),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Dir,
    File,
}

/// Reference tree: outcome of each op as Ok or an error class name.
fn model_apply(model: &mut BTreeMap<String, Kind>, op: &NsOp) -> Result<Option<Kind>, &'static str> {
    let parent_ok = |m: &BTreeMap<String, Kind>, p: &str| -> Result<(), &'static str> {
        match parent(p) {
            Some("/") | None => Ok(()),
            Some(pp) => match m.get(pp) {
                Some(Kind::Dir) => Ok(()),
                Some(Kind::File) => Err("notdir"),
                None => Err("parent"),
            },
        }
    };
    match op {
        NsOp::Mkdir(p) | NsOp::Create(p) => {
            parent_ok(model, p)?;
            if model.contains_key(p) {
                return Err("exists");
            }
            let kind = if matches!(op, NsOp::Mkdir(_)) {
                Kind::Dir
            } else {
                Kind::File
            };
            model.insert(p.clone(), kind);
            Ok(None)
        }
        NsOp::Rmdir(p) => match model.get(p) {
            None => Err("notfound"),
            Some(Kind::File) => Err("notdir"),
            Some(Kind::Dir) => {
                if model.keys().any(|k| parent(k) == Some(p.as_str())) {
                    return Err("notempty");
                }
                model.remove(p);
                Ok(None)
            }
        },
        NsOp::Unlink(p) => match model.get(p) {
            None => Err("notfound"),
            Some(Kind::Dir) => Err("isdir"),
            Some(Kind::File) => {
                model.remove(p);
                Ok(None)
            }
        },
        NsOp::Stat(p) => model.get(p).copied().map(Some).ok_or("notfound"),
    }
}

fn classify(e: &StoreError) -> &'static str {
    match e {
        StoreError::NotFound(_) => "notfound",
        StoreError::Exists(_) => "exists",
        StoreError::ParentMissing(_) => "parent",
        StoreError::NotADirectory(_) => "notdir",
        StoreError::IsADirectory(_) => "isdir",
        StoreError::NotEmpty(_) => "notempty",
        _ => "other",
    }
}

#[test]
fn namespace_matches_reference_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 3, 2, 64 * KIB).unwrap();
    let client = std::cell::RefCell::new(cluster.client().unwrap());
    let case = std::cell::Cell::new(0usize);
    let mut runner = TestRunner::new(Config {
        cases: 64,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(arb_op(), 1..40), |ops| {
            let mut c = client.borrow_mut();
            let root = format!("/case{}", case.get());
            case.set(case.get() + 1);
            c.mkdir(&root).unwrap();
            let mut model = BTreeMap::new();
            for op in &ops {
                let rebase = |p: &String| join(&root, &p[1..]);
                let expected = model_apply(&mut model, op);
                let got = match op {
                    NsOp::Mkdir(p) => c.mkdir(&rebase(p)).map(|_| None),
                    NsOp::Rmdir(p) => c.rmdir(&rebase(p)).map(|_| None),
                    NsOp::Create(p) => c.create(&rebase(p)).map(|_| None),
                    NsOp::Unlink(p) => c.unlink(&rebase(p)).map(|_| None),
                    NsOp::Stat(p) => c
                        .stat(&rebase(p))
                        .map(|e| Some(if e.is_dir() { Kind::Dir } else { Kind::File })),
                };
                let got = got.map_err(|e| classify(&e));
                prop_assert_eq!(got, expected, "op {:?}", op);
            }
            Ok(())
        })
        .unwrap();
}
