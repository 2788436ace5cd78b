//! Disk-role assignment and per-service configuration rendering.
//!
//! A plan is a pure function of an allocation and a [`DeploymentPolicy`]:
//! disks on each node are taken in lexicographic id order, the first
//! `meta_disks_per_node` become metadata disks and the next
//! `storage_disks_per_node` become storage targets. Management and
//! monitoring live on the first node, either sharing its first metadata
//! disk or on dedicated disks placed before the metadata ones.
//!
//! Ports follow `base_port + offset`: management `+0`, metadata `+10+k`,
//! storage `+20+k` and monitoring `+30`, where `k` is the disk's index
//! within its role on that node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::{Allocation, AllocationState, DiskSpec, NodeSpec};

/// Mount point written into the client template.
pub const CLIENT_MOUNT_POINT: &str = "/mnt/ephemstore";

const META_PORT_OFFSET: u16 = 10;
const STORAGE_PORT_OFFSET: u16 = 20;
const MONITORING_PORT_OFFSET: u16 = 30;
const MAX_PER_ROLE: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("node `{node}` has {have} usable disks, the policy needs {need}")]
    InsufficientDisks { node: String, have: usize, need: usize },
    #[error("allocation holds zero storage nodes")]
    NoStorageNodes,
    #[error("allocation `{0}` has been released")]
    Released(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("config line {line}: {msg}")]
    BadDocument { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPolicy {
    pub meta_disks_per_node: usize,
    pub storage_disks_per_node: usize,
    pub colocate_mgmt_on_first_meta: bool,
    pub dedicated_mgmt_disks: usize,
    pub stripe_size_bytes: u64,
    pub base_port: u16,
    pub enable_xattr_metadata: bool,
}

impl Default for DeploymentPolicy {
    fn default() -> Self {
        Self::dom()
    }
}

impl DeploymentPolicy {
    /// One metadata and two storage disks per node, management and
    /// monitoring sharing the first node's metadata disk.
    pub fn dom() -> Self {
        DeploymentPolicy {
            meta_disks_per_node: 1,
            storage_disks_per_node: 2,
            colocate_mgmt_on_first_meta: true,
            dedicated_mgmt_disks: 0,
            stripe_size_bytes: crate::MIB,
            base_port: 8000,
            enable_xattr_metadata: true,
        }
    }

    /// One dedicated management/monitoring disk, two metadata disks and
    /// five storage disks on a single node.
    pub fn ault() -> Self {
        DeploymentPolicy {
            meta_disks_per_node: 2,
            storage_disks_per_node: 5,
            colocate_mgmt_on_first_meta: false,
            dedicated_mgmt_disks: 1,
            ..Self::dom()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlanError::InvalidPolicy(m.to_string()));
        if self.stripe_size_bytes == 0 {
            return bad("stripe_size_bytes must be > 0");
        }
        if self.storage_disks_per_node == 0 {
            return bad("storage_disks_per_node must be >= 1");
        }
        if self.colocate_mgmt_on_first_meta == (self.dedicated_mgmt_disks >= 1) {
            return bad("exactly one of colocate_mgmt_on_first_meta and dedicated_mgmt_disks >= 1 must hold");
        }
        if self.colocate_mgmt_on_first_meta && self.meta_disks_per_node == 0 {
            return bad("colocating management needs at least one metadata disk");
        }
        if self.meta_disks_per_node > MAX_PER_ROLE || self.storage_disks_per_node > MAX_PER_ROLE {
            return bad("at most 10 metadata and 10 storage disks per node fit the port scheme");
        }
        if u32::from(self.base_port) + u32::from(MONITORING_PORT_OFFSET) > u32::from(u16::MAX) {
            return bad("base_port too large");
        }
        Ok(())
    }

    fn disks_needed(&self, first_node: bool) -> usize {
        let mgmt = if first_node { self.dedicated_mgmt_disks } else { 0 };
        mgmt + self.meta_disks_per_node + self.storage_disks_per_node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Management,
    Monitoring,
    Metadata,
    Storage,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Management => "management",
            Role::Monitoring => "monitoring",
            Role::Metadata => "metadata",
            Role::Storage => "storage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub node: String,
    pub disk: String,
    pub mount_root: PathBuf,
    pub capacity_bytes: u64,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Management,
    Metadata,
    Storage,
    Monitoring,
    Client,
}

impl ServiceKind {
    /// Startup tier; lower tiers must be healthy before the next starts.
    pub fn tier(self) -> usize {
        match self {
            ServiceKind::Management => 0,
            ServiceKind::Metadata => 1,
            ServiceKind::Storage => 2,
            ServiceKind::Monitoring => 3,
            ServiceKind::Client => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Management => "management",
            ServiceKind::Metadata => "metadata",
            ServiceKind::Storage => "storage",
            ServiceKind::Monitoring => "monitoring",
            ServiceKind::Client => "client",
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "management" => ServiceKind::Management,
            "metadata" => ServiceKind::Metadata,
            "storage" => ServiceKind::Storage,
            "monitoring" => ServiceKind::Monitoring,
            "client" => ServiceKind::Client,
            other => return Err(format!("unknown service kind `{other}`")),
        })
    }
}

/// One daemon's configuration. Rendered as `key = value` lines; the fixed
/// keys come first, then `options` in key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub id: String,
    pub service: ServiceKind,
    pub node: String,
    pub address: String,
    pub listen_port: u16,
    pub mgmt_address: String,
    pub mgmt_port: u16,
    pub data_dir: PathBuf,
    pub stripe_size: u64,
    pub use_xattr: bool,
    pub options: BTreeMap<String, String>,
}

const FIXED_KEYS: [&str; 10] = [
    "service",
    "service_id",
    "node",
    "address",
    "listen_port",
    "mgmt_address",
    "mgmt_port",
    "data_dir",
    "stripe_size",
    "use_xattr",
];

impl ServiceConfig {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| out.push_str(&format!("{k} = {v}\n"));
        kv("service", &self.service);
        kv("service_id", &self.id);
        kv("node", &self.node);
        kv("address", &self.address);
        kv("listen_port", &self.listen_port);
        kv("mgmt_address", &self.mgmt_address);
        kv("mgmt_port", &self.mgmt_port);
        kv("data_dir", &self.data_dir.display());
        kv("stripe_size", &self.stripe_size);
        kv("use_xattr", &self.use_xattr);
        for (k, v) in &self.options {
            kv(k, v);
        }
        out
    }

    pub fn parse(doc: &str) -> Result<ServiceConfig> {
        let mut fixed: BTreeMap<&str, (usize, String)> = BTreeMap::new();
        let mut options = BTreeMap::new();
        for (idx, raw) in doc.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| PlanError::BadDocument { line: idx + 1, msg };
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected `key = value`, found `{line}`")))?;
            if let Some(key) = FIXED_KEYS.iter().find(|f| **f == k) {
                if fixed.insert(key, (idx + 1, v.to_string())).is_some() {
                    return Err(bad(format!("duplicate key `{k}`")));
                }
            } else if options.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate key `{k}`")));
            }
        }
        let get = |k: &str| -> Result<(usize, &str)> {
            fixed
                .get(k)
                .map(|(l, v)| (*l, v.as_str()))
                .ok_or_else(|| PlanError::BadDocument {
                    line: 0,
                    msg: format!("missing key `{k}`"),
                })
        };
        fn num<T: FromStr>(pair: (usize, &str)) -> Result<T> {
            pair.1.parse().map_err(|_| PlanError::BadDocument {
                line: pair.0,
                msg: format!("invalid number `{}`", pair.1),
            })
        }
        let (svc_line, svc) = get("service")?;
        let use_xattr = match get("use_xattr")? {
            (_, "true") => true,
            (_, "false") => false,
            (line, other) => {
                return Err(PlanError::BadDocument {
                    line,
                    msg: format!("expected true/false, found `{other}`"),
                })
            }
        };
        Ok(ServiceConfig {
            service: svc
                .parse()
                .map_err(|msg| PlanError::BadDocument { line: svc_line, msg })?,
            id: get("service_id")?.1.to_string(),
            node: get("node")?.1.to_string(),
            address: get("address")?.1.to_string(),
            listen_port: num(get("listen_port")?)?,
            mgmt_address: get("mgmt_address")?.1.to_string(),
            mgmt_port: num(get("mgmt_port")?)?,
            data_dir: PathBuf::from(get("data_dir")?.1),
            stripe_size: num(get("stripe_size")?)?,
            use_xattr,
            options,
        })
    }

    /// Per-role index (`meta_index` / `target_index`) if present.
    pub fn index(&self) -> Option<usize> {
        let key = match self.service {
            ServiceKind::Metadata => "meta_index",
            ServiceKind::Storage => "target_index",
            _ => return None,
        };
        self.options.get(key).and_then(|v| v.parse().ok())
    }

    /// Relative path of this service's document inside a config tree.
    pub fn config_path(&self) -> PathBuf {
        match self.service {
            ServiceKind::Client => PathBuf::from("client.conf"),
            _ => Path::new(&self.node).join(format!("{}.conf", file_safe(&self.id))),
        }
    }
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub allocation: Allocation,
    pub assignments: Vec<RoleAssignment>,
    pub services: Vec<ServiceConfig>,
    /// Service ids, management first and clients last.
    pub startup_order: Vec<String>,
    pub policy: DeploymentPolicy,
}

impl DeploymentPlan {
    pub fn service(&self, id: &str) -> Option<&ServiceConfig> {
        self.services.iter().find(|s| s.id == id)
    }

    pub fn management(&self) -> &ServiceConfig {
        self.services
            .iter()
            .find(|s| s.service == ServiceKind::Management)
            .expect("plan always holds a management service")
    }

    pub fn services_of(&self, kind: ServiceKind) -> impl Iterator<Item = &ServiceConfig> {
        self.services.iter().filter(move |s| s.service == kind)
    }

    /// Daemon services grouped by startup tier (clients excluded).
    pub fn tiers(&self) -> Vec<Vec<&ServiceConfig>> {
        let mut tiers: Vec<Vec<&ServiceConfig>> = vec![Vec::new(); 4];
        for id in &self.startup_order {
            let svc = self.service(id).expect("startup order references known services");
            if svc.service != ServiceKind::Client {
                tiers[svc.service.tier()].push(svc);
            }
        }
        tiers.retain(|t| !t.is_empty());
        tiers
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.assignments.iter().filter(|a| a.role == role).count()
    }

    /// Distinct (node, disk) pairs used by the plan.
    pub fn disks_used(&self) -> BTreeSet<(&str, &str)> {
        self.assignments
            .iter()
            .map(|a| (a.node.as_str(), a.disk.as_str()))
            .collect()
    }

    /// Human-readable role table.
    pub fn role_table(&self) -> String {
        let mut out = format!("{:<12} {:<12} {:<22} {}\n", "node", "disk", "mount_root", "roles");
        let mut rows: BTreeMap<(usize, &str, &str), (String, Vec<String>)> = BTreeMap::new();
        for a in &self.assignments {
            let node_pos = self
                .allocation
                .nodes
                .iter()
                .position(|n| n.id == a.node)
                .unwrap_or(usize::MAX);
            rows.entry((node_pos, &a.node, &a.disk))
                .or_insert_with(|| (a.mount_root.display().to_string(), Vec::new()))
                .1
                .push(a.role.to_string());
        }
        for ((_, node, disk), (mount, roles)) in rows {
            out.push_str(&format!("{node:<12} {disk:<12} {mount:<22} {}\n", roles.join("+")));
        }
        out.push_str(&format!(
            "metadata disks: {}, storage disks: {}, management: {}\n",
            self.count_role(Role::Metadata),
            self.count_role(Role::Storage),
            self.management().node
        ));
        out
    }
}

fn usable_disks(node: &NodeSpec) -> Vec<&DiskSpec> {
    let mut disks: Vec<&DiskSpec> = node.disks.iter().filter(|d| d.capacity_bytes > 0).collect();
    disks.sort_by(|a, b| a.id.cmp(&b.id));
    disks
}

pub fn plan_deployment(alloc: &Allocation, policy: &DeploymentPolicy) -> Result<DeploymentPlan> {
    policy.validate()?;
    if alloc.state == AllocationState::Released {
        return Err(PlanError::Released(alloc.id.clone()));
    }
    if alloc.nodes.is_empty() {
        return Err(PlanError::NoStorageNodes);
    }
    for (i, node) in alloc.nodes.iter().enumerate() {
        let need = policy.disks_needed(i == 0);
        let have = usable_disks(node).len();
        if have < need {
            return Err(PlanError::InsufficientDisks {
                node: node.id.clone(),
                have,
                need,
            });
        }
    }

    let first = &alloc.nodes[0];
    // Either the first metadata disk or the first dedicated disk: both are
    // the node's first disk.
    let mgmt_disk = usable_disks(first)[0];
    let mgmt_address = first.address.clone();
    let mgmt_port = policy.base_port;

    let mut assignments = Vec::new();
    let mut metas = Vec::new();
    let mut storages = Vec::new();
    let assign = |node: &NodeSpec, disk: &DiskSpec, role: Role| RoleAssignment {
        node: node.id.clone(),
        disk: disk.id.clone(),
        mount_root: disk.mount_root.clone(),
        capacity_bytes: disk.capacity_bytes,
        role,
    };
    let base = |kind: ServiceKind, id: String, node: &NodeSpec, port: u16, data_dir: &Path| ServiceConfig {
        id,
        service: kind,
        node: node.id.clone(),
        address: node.address.clone(),
        listen_port: port,
        mgmt_address: mgmt_address.clone(),
        mgmt_port,
        data_dir: data_dir.to_path_buf(),
        stripe_size: policy.stripe_size_bytes,
        use_xattr: policy.enable_xattr_metadata,
        options: BTreeMap::new(),
    };

    let mgmt = base(
        ServiceKind::Management,
        format!("mgmt@{}", first.id),
        first,
        mgmt_port,
        &mgmt_disk.mount_root,
    );
    let monitoring = base(
        ServiceKind::Monitoring,
        format!("mon@{}", first.id),
        first,
        policy.base_port + MONITORING_PORT_OFFSET,
        &mgmt_disk.mount_root,
    );

    for (i, node) in alloc.nodes.iter().enumerate() {
        let disks = usable_disks(node);
        let mut cursor = 0;
        if i == 0 {
            if policy.colocate_mgmt_on_first_meta {
                assignments.push(assign(node, disks[0], Role::Management));
                assignments.push(assign(node, disks[0], Role::Monitoring));
            } else {
                for (k, d) in disks.iter().take(policy.dedicated_mgmt_disks).enumerate() {
                    assignments.push(assign(node, d, Role::Management));
                    if k == 0 {
                        assignments.push(assign(node, d, Role::Monitoring));
                    }
                }
                cursor = policy.dedicated_mgmt_disks;
            }
        }
        for k in 0..policy.meta_disks_per_node {
            let d = disks[cursor + k];
            assignments.push(assign(node, d, Role::Metadata));
            let mut svc = base(
                ServiceKind::Metadata,
                format!("meta@{}:{}", node.id, d.id),
                node,
                policy.base_port + META_PORT_OFFSET + k as u16,
                &d.mount_root,
            );
            svc.options.insert("meta_index".into(), metas.len().to_string());
            metas.push(svc);
        }
        cursor += policy.meta_disks_per_node;
        for k in 0..policy.storage_disks_per_node {
            let d = disks[cursor + k];
            assignments.push(assign(node, d, Role::Storage));
            let mut svc = base(
                ServiceKind::Storage,
                format!("storage@{}:{}", node.id, d.id),
                node,
                policy.base_port + STORAGE_PORT_OFFSET + k as u16,
                &d.mount_root,
            );
            svc.options.insert("target_index".into(), storages.len().to_string());
            svc.options
                .insert("capacity_bytes".into(), d.capacity_bytes.to_string());
            storages.push(svc);
        }
    }

    let mut client = base(
        ServiceKind::Client,
        "client".into(),
        first,
        0,
        Path::new(CLIENT_MOUNT_POINT),
    );
    client.node = "*".into();
    client.address = "*".into();

    let mut services = vec![mgmt];
    services.extend(metas);
    services.extend(storages);
    services.push(monitoring);
    services.push(client);
    let startup_order = services.iter().map(|s| s.id.clone()).collect();

    Ok(DeploymentPlan {
        allocation: alloc.clone(),
        assignments,
        services,
        startup_order,
        policy: policy.clone(),
    })
}

/// One `(relative path, document)` pair per service, in startup order.
pub fn render_configs(plan: &DeploymentPlan) -> Vec<(PathBuf, String)> {
    plan.startup_order
        .iter()
        .filter_map(|id| plan.service(id))
        .map(|s| (s.config_path(), s.render()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::{presets, AllocationRequest, Cluster, Purpose, LOCAL_STORAGE};

    fn dom_plan(nodes: usize) -> DeploymentPlan {
        let mut cluster = Cluster::new(presets::dom());
        let alloc = cluster
            .request(&AllocationRequest::new(nodes, "storage", Purpose::Storage).unwrap())
            .unwrap();
        plan_deployment(&alloc, &DeploymentPolicy::dom()).unwrap()
    }

    #[test]
    fn dom_layout() {
        let plan = dom_plan(2);
        assert_eq!(plan.count_role(Role::Metadata), 2);
        assert_eq!(plan.count_role(Role::Storage), 4);
        let mgmt: Vec<_> = plan
            .assignments
            .iter()
            .filter(|a| matches!(a.role, Role::Management | Role::Monitoring))
            .collect();
        assert_eq!(mgmt.len(), 2);
        for a in mgmt {
            assert_eq!((a.node.as_str(), a.disk.as_str()), ("dw01", "nvme0n1"));
        }
        let meta_on_first = plan
            .assignments
            .iter()
            .find(|a| a.role == Role::Metadata && a.node == "dw01")
            .unwrap();
        assert_eq!(meta_on_first.disk, "nvme0n1");
        assert_eq!(plan.management().data_dir, PathBuf::from("/mnt/nvme0n1"));
    }

    #[test]
    fn ault_layout() {
        let mut cluster = Cluster::new(presets::ault());
        let alloc = cluster
            .request(&AllocationRequest::new(1, LOCAL_STORAGE, Purpose::Storage).unwrap())
            .unwrap();
        let plan = plan_deployment(&alloc, &DeploymentPolicy::ault()).unwrap();
        assert_eq!(plan.disks_used().len(), 8);
        assert_eq!(plan.count_role(Role::Management), 1);
        assert_eq!(plan.count_role(Role::Monitoring), 1);
        assert_eq!(plan.count_role(Role::Metadata), 2);
        assert_eq!(plan.count_role(Role::Storage), 5);
        let mgmt_disk = &plan
            .assignments
            .iter()
            .find(|a| a.role == Role::Management)
            .unwrap()
            .disk;
        assert!(plan
            .assignments
            .iter()
            .filter(|a| &a.disk == mgmt_disk)
            .all(|a| matches!(a.role, Role::Management | Role::Monitoring)));
    }

    #[test]
    fn one_disk_node_is_rejected() {
        let mut nodes = presets::dom();
        for n in &mut nodes {
            n.disks.truncate(1);
        }
        let mut cluster = Cluster::new(nodes);
        let alloc = cluster
            .request(&AllocationRequest::new(1, "storage", Purpose::Storage).unwrap())
            .unwrap();
        assert_eq!(
            plan_deployment(&alloc, &DeploymentPolicy::dom()),
            Err(PlanError::InsufficientDisks {
                node: "dw01".into(),
                have: 1,
                need: 3
            })
        );
    }

    #[test]
    fn zero_nodes_and_released() {
        let mut alloc = dom_plan(1).allocation;
        alloc.nodes.clear();
        assert_eq!(
            plan_deployment(&alloc, &DeploymentPolicy::dom()),
            Err(PlanError::NoStorageNodes)
        );
        let mut alloc = dom_plan(1).allocation;
        alloc.state = AllocationState::Released;
        assert!(matches!(
            plan_deployment(&alloc, &DeploymentPolicy::dom()),
            Err(PlanError::Released(_))
        ));
    }

    #[test]
    fn policy_validation() {
        let mut p = DeploymentPolicy::dom();
        p.stripe_size_bytes = 0;
        assert!(p.validate().is_err());
        let mut p = DeploymentPolicy::dom();
        p.dedicated_mgmt_disks = 1;
        assert!(p.validate().is_err());
        let mut p = DeploymentPolicy::ault();
        p.dedicated_mgmt_disks = 0;
        assert!(p.validate().is_err());
        let mut p = DeploymentPolicy::dom();
        p.storage_disks_per_node = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rendered_documents() {
        let plan = dom_plan(2);
        let docs = render_configs(&plan);
        assert_eq!(docs.len(), 9);
        let metas: Vec<_> = docs
            .iter()
            .filter(|(_, d)| d.starts_with("service = metadata"))
            .collect();
        assert_eq!(metas.len(), 2);
        for (_, d) in &metas {
            assert!(d.contains("use_xattr = true\n"));
        }
        let (_, client) = docs.last().unwrap();
        assert!(client.contains("mgmt_address = dw01\n"));
        assert!(client.contains("mgmt_port = 8000\n"));
        assert_eq!(docs, render_configs(&plan));
    }

    #[test]
    fn port_scheme_and_uniqueness() {
        let plan = dom_plan(4);
        let mut per_node: BTreeMap<&str, BTreeSet<u16>> = BTreeMap::new();
        for s in plan.services.iter().filter(|s| s.service != ServiceKind::Client) {
            assert!(per_node.entry(&s.node).or_default().insert(s.listen_port));
        }
        let ports: BTreeSet<u16> = plan
            .services
            .iter()
            .filter(|s| s.node == "dw01")
            .map(|s| s.listen_port)
            .collect();
        assert_eq!(ports, [8000, 8010, 8020, 8021, 8030].into_iter().collect());
    }

    #[test]
    fn config_documents_parse_back() {
        let plan = dom_plan(2);
        for s in &plan.services {
            assert_eq!(&ServiceConfig::parse(&s.render()).unwrap(), s);
        }
        assert!(matches!(
            ServiceConfig::parse("service = storage\nservice = storage\n"),
            Err(PlanError::BadDocument { line: 2, .. })
        ));
    }

    #[test]
    fn startup_order_is_tiered() {
        let plan = dom_plan(2);
        let tiers: Vec<usize> = plan
            .startup_order
            .iter()
            .map(|id| plan.service(id).unwrap().service.tier())
            .collect();
        assert_eq!(tiers[0], 0);
        assert!(tiers.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(plan.tiers().len(), 4);
    }
}
