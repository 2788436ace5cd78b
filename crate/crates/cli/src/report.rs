//! `report`: min/median/max over every benchmark run recorded in the run
//! directory, plus the analytic predictions for the planned deployment.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use ephemstore::bench::{
    aggregate_peak_bw, aggregate_peak_read_bw, min_median_max, predict_per_node_volume, MDTEST_CSV_HEADER,
    RESULTS_CSV_HEADER,
};
use ephemstore::inventory::DiskSpec;
use ephemstore::planner::{DeploymentPlan, Role};

use crate::run::{Failure, PLAN_FILE};

type Result<T> = std::result::Result<T, Failure>;

/// Rows of a CSV file with the expected header, split on commas.
fn read_rows(path: &Path, header: &str) -> Result<Option<Vec<Vec<String>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let doc = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = doc.lines();
    if lines.next() != Some(header) {
        return Err(anyhow!("{} does not start with `{header}`", path.display()).into());
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let row: Vec<String> = l.split(',').map(str::to_string).collect();
        if row.len() != width {
            return Err(anyhow!("{} line {}: expected {width} fields", path.display(), i + 2).into());
        }
        rows.push(row);
    }
    Ok(Some(rows))
}

fn num(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|_| anyhow!("bad {what} `{s}`").into())
}

/// Groups in first-seen order.
fn group<K: PartialEq + Clone>(items: impl IntoIterator<Item = (K, f64)>) -> Vec<(K, Vec<f64>)> {
    let mut out: Vec<(K, Vec<f64>)> = Vec::new();
    for (k, v) in items {
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, vs)) => vs.push(v),
            None => out.push((k, vec![v])),
        }
    }
    out
}

pub fn cmd_report(out: &Path) -> Result<()> {
    let results = read_rows(&out.join("results.csv"), RESULTS_CSV_HEADER)?;
    let mdtest = read_rows(&out.join("mdtest.csv"), MDTEST_CSV_HEADER)?;
    if results.is_none() && mdtest.is_none() {
        return Err(Failure::missing(anyhow!(
            "no benchmark results in {}; run `ephemstore bench` first",
            out.display()
        )));
    }

    let mut ior_shapes = BTreeSet::new();
    if let Some(rows) = &results {
        // workload,mode,nodes,ppn,size_per_proc,iteration,phase,bytes,seconds,bw
        let mut items = Vec::new();
        for r in rows {
            let key = (
                r[0].clone(),
                r[1].clone(),
                r[2].clone(),
                r[3].clone(),
                r[4].clone(),
                r[6].clone(),
            );
            items.push((key, num(&r[9], "bandwidth")?));
            if r[0] == "ior" {
                ior_shapes.insert((
                    num(&r[2], "nodes")? as u64,
                    num(&r[3], "ppn")? as u64,
                    num(&r[4], "size")? as u64,
                ));
            }
        }
        let mut csv = String::from("workload,mode,nodes,ppn,size_per_proc,phase,samples,min_bw,median_bw,max_bw\n");
        println!(
            "{:<8} {:<7} {:>5} {:>4} {:>14} {:<6} {:>7} {:>12} {:>12} {:>12}",
            "workload", "mode", "nodes", "ppn", "size_per_proc", "phase", "samples", "min MiB/s", "median", "max"
        );
        for ((w, m, n, p, s, phase), v) in group(items) {
            let samples = v.len();
            let st = min_median_max(&phase, v);
            let mib = (1u64 << 20) as f64;
            println!(
                "{w:<8} {m:<7} {n:>5} {p:>4} {s:>14} {phase:<6} {samples:>7} {:>12.2} {:>12.2} {:>12.2}",
                st.min / mib,
                st.median / mib,
                st.max / mib
            );
            csv.push_str(&format!(
                "{w},{m},{n},{p},{s},{phase},{samples},{:.3},{:.3},{:.3}\n",
                st.min, st.median, st.max
            ));
        }
        fs::write(out.join("report.csv"), csv).context("writing report.csv")?;
    }

    if let Some(rows) = &mdtest {
        // iteration,target,operation,ops,seconds,ops_per_s
        let items: Vec<_> = rows
            .iter()
            .map(|r| Ok(((r[1].clone(), r[2].clone()), num(&r[5], "ops/s")?)))
            .collect::<Result<_>>()?;
        let mut csv = String::from("target,operation,samples,min_ops_per_s,median_ops_per_s,max_ops_per_s\n");
        println!(
            "{:<10} {:<10} {:>7} {:>14} {:>14} {:>14}",
            "target", "operation", "samples", "min ops/s", "median", "max"
        );
        for ((t, o), v) in group(items) {
            let samples = v.len();
            let st = min_median_max(&o, v);
            println!(
                "{t:<10} {o:<10} {samples:>7} {:>14.1} {:>14.1} {:>14.1}",
                st.min, st.median, st.max
            );
            csv.push_str(&format!(
                "{t},{o},{samples},{:.3},{:.3},{:.3}\n",
                st.min, st.median, st.max
            ));
        }
        fs::write(out.join("report_mdtest.csv"), csv).context("writing report_mdtest.csv")?;
    }

    predictions(out, &ior_shapes)
}

/// Peak bandwidth of the planned storage disks and, per IOR shape, whether
/// the data per storage node fits in its DRAM.
fn predictions(out: &Path, ior_shapes: &BTreeSet<(u64, u64, u64)>) -> Result<()> {
    let Ok(doc) = fs::read_to_string(out.join(PLAN_FILE)) else {
        return Ok(());
    };
    let plan: DeploymentPlan = serde_json::from_str(&doc).context("parsing plan.json")?;
    let disks: Vec<DiskSpec> = plan
        .assignments
        .iter()
        .filter(|a| a.role == Role::Storage)
        .filter_map(|a| {
            plan.allocation
                .nodes
                .iter()
                .find(|n| n.id == a.node)
                .and_then(|n| n.disks.iter().find(|d| d.id == a.disk))
                .cloned()
        })
        .collect();
    let mut csv = String::from("quantity,nodes,ppn,size_per_proc,value,dram_bytes,fits\n");
    if let (Ok(w), Ok(r)) = (aggregate_peak_bw(&disks), aggregate_peak_read_bw(&disks)) {
        println!(
            "nominal peak over {} storage disks: write {w} B/s, read {r} B/s",
            disks.len()
        );
        csv.push_str(&format!("peak_write_bw,,,,{w},,\npeak_read_bw,,,,{r},,\n"));
    }
    let storage_nodes = plan.allocation.nodes.len() as u64;
    let dram = plan.allocation.nodes.iter().map(|n| n.dram_bytes).min().unwrap_or(0);
    for &(nodes, ppn, size) in ior_shapes {
        let fit = predict_per_node_volume(nodes, ppn, size, storage_nodes, dram).map_err(|e| anyhow!(e))?;
        println!(
            "ior {nodes}x{ppn} x {size} B: {} B per storage node, DRAM {} B, fits: {}",
            fit.per_node_volume_bytes, fit.dram_bytes, fit.fits
        );
        csv.push_str(&format!(
            "per_node_volume,{nodes},{ppn},{size},{},{},{}\n",
            fit.per_node_volume_bytes, fit.dram_bytes, fit.fits
        ));
    }
    fs::write(out.join("predictions.csv"), csv).context("writing predictions.csv")?;
    Ok(())
}
