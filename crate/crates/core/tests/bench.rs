use std::fs;

use ephemstore::bench::{
    predict_per_node_volume, run_hacc, run_ior, run_mdtest, BenchSpec, DirMount, MdOp, MdTarget, Mode, Particle,
    StoreMount, HACC_PATH, MD_ROWS,
};
use ephemstore::ministore::LocalCluster;
use ephemstore::MIB;
use proptest::prelude::*;

/// Serializer written independently of the library: nine fields, little
/// endian, in declaration order.
fn reference_record(p: &Particle) -> Vec<u8> {
    let mut v = Vec::with_capacity(38);
    for f in [p.xx, p.yy, p.zz, p.vx, p.vy, p.vz, p.phi] {
        v.extend_from_slice(&f.to_bits().to_le_bytes());
    }
    v.extend_from_slice(&p.pid.to_le_bytes());
    v.extend_from_slice(&p.mask.to_le_bytes());
    v
}

#[test]
fn ior_shared_matches_flat_file_and_conserves_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 1, 2, MIB).unwrap();
    let mount = StoreMount::new(cluster.client_config());
    let mut spec = BenchSpec::ior(1, 2, Mode::SharedFile, 2 * MIB, 256 * 1024);
    spec.iterations = 1;
    spec.keep_files = true;
    let r = run_ior(&spec, &mount).unwrap();
    assert_eq!(r.file_bytes, 4 * MIB);

    let flat_dir = tempfile::tempdir().unwrap();
    run_ior(&spec, &DirMount::new(flat_dir.path())).unwrap();
    let flat = fs::read(flat_dir.path().join("ior.shared")).unwrap();
    assert_eq!(flat.len() as u64, 4 * MIB);

    let mut c = cluster.client().unwrap();
    let meta = c.open("/ior.shared").unwrap();
    assert_eq!(meta.size_bytes, 4 * MIB);
    assert_eq!(c.read("/ior.shared", 0, flat.len()).unwrap(), flat);
    let mut per_target = Vec::new();
    for id in c.target_ids() {
        per_target.push(
            c.list_chunks(&id, meta.file_id)
                .unwrap()
                .iter()
                .map(|(_, l)| l)
                .sum::<u64>(),
        );
    }
    assert_eq!(per_target.iter().sum::<u64>(), 4 * MIB);
    assert_eq!(per_target, vec![2 * MIB, 2 * MIB]);
}

#[test]
fn ior_fpp_file_count_on_store() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 2, 2, 64 * 1024).unwrap();
    let mount = StoreMount::new(cluster.client_config());
    let mut spec = BenchSpec::ior(2, 2, Mode::FilePerProcess, 128 * 1024, 32 * 1024);
    spec.iterations = 2;
    spec.keep_files = true;
    let r = run_ior(&spec, &mount).unwrap();
    assert_eq!(r.per_iteration.len(), 2);
    let mut c = cluster.client().unwrap();
    let files = c.list("/").unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        assert_eq!(c.open(&format!("/{f}")).unwrap().size_bytes, 128 * 1024);
    }
}

#[test]
fn hacc_regions_match_reference_serializer() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 1, 3, 64).unwrap();
    let mount = StoreMount::new(cluster.client_config());
    let mut spec = BenchSpec::hacc(1, 3, 5);
    spec.iterations = 1;
    spec.keep_files = true;
    let r = run_hacc(&spec, &mount).unwrap();
    assert_eq!(r.file_bytes, 3 * 190);

    let mut expected = Vec::new();
    for rank in 0..3u64 {
        let region: Vec<u8> = (0..5)
            .flat_map(|i| reference_record(&Particle::generate(spec.seed, rank, i, 5)))
            .collect();
        assert_eq!(region.len(), 190);
        expected.extend(region);
    }
    let mut c = cluster.client().unwrap();
    assert_eq!(c.read(HACC_PATH, 0, 1000).unwrap(), expected);
    for rank in 0..3 {
        let region = c.read(HACC_PATH, rank * 190, 190).unwrap();
        assert_eq!(region, expected[rank as usize * 190..(rank as usize + 1) * 190]);
    }
}

#[test]
fn hacc_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = BenchSpec::hacc(1, 2, 0);
    spec.iterations = 1;
    let r = run_hacc(&spec, &DirMount::new(dir.path())).unwrap();
    assert_eq!(r.file_bytes, 0);
    assert_eq!((r.write_bw, r.read_bw), (0.0, 0.0));
}

#[test]
fn mdtest_accounting_on_store() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(dir.path(), 2, 2, 64 * 1024).unwrap();
    let mount = StoreMount::new(cluster.client_config());
    for (workers, items) in [(1u32, 1u64), (2, 10), (4, 100)] {
        let mut spec = BenchSpec::mdtest(1, workers, items);
        spec.iterations = 1;
        spec.transfer_size_bytes = 64;
        let r = run_mdtest(&spec, &mount).unwrap();
        assert_eq!(r.ops_table.len(), MD_ROWS.len());
        for row in &r.ops_table {
            let expected = if row.target == MdTarget::Tree {
                workers as u64
            } else {
                workers as u64 * items
            };
            assert_eq!(row.ops, expected, "{:?} {:?}", row.target, row.op);
            let rel = (row.ops_per_s * row.seconds - expected as f64).abs() / expected as f64;
            assert!(rel < 1e-12, "{:?} {:?}", row.target, row.op);
        }
        assert!(r.ops_row(MdTarget::File, MdOp::Read).is_some());
    }
    assert!(cluster.client().unwrap().list("/").unwrap().is_empty());
}

proptest! {
    #[test]
    fn predictor_monotone(
        cn in 0u64..64, ppn in 0u64..64, sp in 0u64..1_000_000_000, sn in 1u64..16,
        which in 0usize..4, bump in 1u64..8,
    ) {
        let base = predict_per_node_volume(cn, ppn, sp, sn, 0).unwrap().per_node_volume_bytes;
        let bumped = match which {
            0 => predict_per_node_volume(cn + bump, ppn, sp, sn, 0),
            1 => predict_per_node_volume(cn, ppn + bump, sp, sn, 0),
            2 => predict_per_node_volume(cn, ppn, sp + bump, sn, 0),
            _ => predict_per_node_volume(cn, ppn, sp, sn + bump, 0),
        }
        .unwrap()
        .per_node_volume_bytes;
        if which < 3 {
            prop_assert!(bumped >= base);
        } else {
            prop_assert!(bumped <= base);
        }
    }

    #[test]
    fn fits_iff_volume_within_dram(cn in 0u64..16, ppn in 0u64..16, sp in 0u64..1_000_000, sn in 1u64..4, dram in 0u64..100_000_000) {
        let r = predict_per_node_volume(cn, ppn, sp, sn, dram).unwrap();
        prop_assert_eq!(r.fits, r.per_node_volume_bytes <= dram);
    }

    #[test]
    fn particle_roundtrip(bits in prop::array::uniform7(any::<u32>()), pid in any::<i64>(), mask in any::<u16>()) {
        let f = |i: usize| f32::from_bits(bits[i]);
        let p = Particle { xx: f(0), yy: f(1), zz: f(2), vx: f(3), vy: f(4), vz: f(5), phi: f(6), pid, mask };
        let bytes = p.to_bytes();
        prop_assert_eq!(bytes.to_vec(), reference_record(&p));
        let q = Particle::from_bytes(&bytes);
        prop_assert_eq!(q.to_bytes(), bytes);
    }
}
