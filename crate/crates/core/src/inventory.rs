//! Cluster model and constraint-based allocations.
//!
//! The inventory file is a line-oriented, sectioned text format:
//!
//! ```text
//! # comment
//! [node dw01]
//! address    = dw01
//! kind       = storage            # compute | storage
//! features   = storage, datawarp  # comma separated
//! cpus       = 36
//! dram_bytes = 64_000_000_000
//! disk       = nvme0n1, /mnt/nvme0n1, 5_900_000_000_000, 6_340_000_000, 3_200_000_000
//! ```
//!
//! `disk` lines may repeat and carry `id, mount_root, capacity_bytes,
//! read_bw, write_bw` (bandwidths in bytes per second). Integers accept `_`
//! separators. Everything after a `#` is ignored. Keys other than `disk` may
//! appear at most once per node; `address` defaults to the node id.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feature that lets a node be held by a compute and a storage allocation
/// at the same time (node-local disks on compute nodes).
pub const LOCAL_STORAGE: &str = "local-storage";
/// Feature every storage node carries.
pub const STORAGE: &str = "storage";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InventoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate node id `{id}`")]
    DuplicateNode { id: String, line: usize },
    #[error("node `{node}`: disk declared on a compute node without the `local-storage` feature")]
    DiskOnComputeNode { node: String },
    #[error("node `{node}`: {reason}")]
    Invalid { node: String, reason: String },
    #[error("constraint `{expr}`: {msg}")]
    BadConstraint { expr: String, msg: String },
    #[error("constraint references unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("insufficient eligible nodes: requested {requested}, {eligible} eligible")]
    InsufficientNodes { requested: usize, eligible: usize },
    #[error("allocation request must ask for at least one node")]
    EmptyRequest,
    #[error("inventory is empty")]
    EmptyInventory,
    #[error("allocation `{0}` is unknown")]
    UnknownAllocation(String),
    #[error("allocation `{0}` was already released")]
    DoubleRelease(String),
}

pub type Result<T> = std::result::Result<T, InventoryError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiskSpec {
    pub id: String,
    pub mount_root: PathBuf,
    pub capacity_bytes: u64,
    pub nominal_read_bw: u64,
    pub nominal_write_bw: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Compute,
    Storage,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::Compute => "compute",
            NodeKind::Storage => "storage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub address: String,
    pub kind: NodeKind,
    pub features: BTreeSet<String>,
    pub cpus: u32,
    pub dram_bytes: u64,
    pub disks: Vec<DiskSpec>,
}

impl NodeSpec {
    pub fn has_feature(&self, feature: &str) -> bool {
        self.features.contains(feature)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| InventoryError::Invalid {
            node: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.dram_bytes == 0 {
            return Err(invalid("dram_bytes must be > 0"));
        }
        match self.kind {
            NodeKind::Storage => {
                if self.disks.is_empty() {
                    return Err(invalid("storage node declares no disks"));
                }
                if !self.has_feature(STORAGE) {
                    return Err(invalid("storage node lacks the `storage` feature"));
                }
            }
            NodeKind::Compute => {
                if self.has_feature(STORAGE) {
                    return Err(invalid("compute node carries the `storage` feature"));
                }
                if !self.disks.is_empty() && !self.has_feature(LOCAL_STORAGE) {
                    return Err(InventoryError::DiskOnComputeNode { node: self.id.clone() });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for disk in &self.disks {
            if !seen.insert(disk.id.as_str()) {
                return Err(invalid(&format!("duplicate disk id `{}`", disk.id)));
            }
        }
        Ok(())
    }
}

/// Parse an inventory document. Nodes come back in document order.
pub fn load_inventory(document: &str) -> Result<Vec<NodeSpec>> {
    struct Pending {
        node: NodeSpec,
        header_line: usize,
        seen_keys: BTreeSet<String>,
        kind_set: bool,
        cpus_set: bool,
        dram_set: bool,
    }

    fn finish(p: Pending) -> Result<NodeSpec> {
        let missing = if !p.kind_set {
            Some("kind")
        } else if !p.cpus_set {
            Some("cpus")
        } else if !p.dram_set {
            Some("dram_bytes")
        } else {
            None
        };
        if let Some(key) = missing {
            return Err(InventoryError::Parse {
                line: p.header_line,
                msg: format!("node `{}` is missing key `{key}`", p.node.id),
            });
        }
        p.node.validate()?;
        Ok(p.node)
    }

    let mut nodes: Vec<NodeSpec> = Vec::new();
    let mut ids = BTreeSet::new();
    let mut current: Option<Pending> = None;

    for (idx, raw) in document.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| InventoryError::Parse { line: line_no, msg };

        if let Some(rest) = line.strip_prefix('[') {
            let inner = rest
                .strip_suffix(']')
                .ok_or_else(|| perr("unterminated section header".into()))?;
            let mut parts = inner.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("node"), Some(id), None) => {
                    if let Some(p) = current.take() {
                        nodes.push(finish(p)?);
                    }
                    if !ids.insert(id.to_string()) {
                        return Err(InventoryError::DuplicateNode {
                            id: id.to_string(),
                            line: line_no,
                        });
                    }
                    current = Some(Pending {
                        node: NodeSpec {
                            id: id.to_string(),
                            address: id.to_string(),
                            kind: NodeKind::Compute,
                            features: BTreeSet::new(),
                            cpus: 0,
                            dram_bytes: 0,
                            disks: Vec::new(),
                        },
                        header_line: line_no,
                        seen_keys: BTreeSet::new(),
                        kind_set: false,
                        cpus_set: false,
                        dram_set: false,
                    });
                }
                _ => return Err(perr(format!("expected `[node <id>]`, found `[{inner}]`"))),
            }
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| perr(format!("expected `key = value`, found `{line}`")))?;
        let p = current
            .as_mut()
            .ok_or_else(|| perr(format!("key `{key}` outside of a [node] section")))?;
        if key != "disk" && !p.seen_keys.insert(key.to_string()) {
            return Err(perr(format!("duplicate key `{key}`")));
        }
        match key {
            "address" => {
                if value.is_empty() {
                    return Err(perr("empty address".into()));
                }
                p.node.address = value.to_string();
            }
            "kind" => {
                p.node.kind = match value {
                    "compute" => NodeKind::Compute,
                    "storage" => NodeKind::Storage,
                    other => return Err(perr(format!("unknown node kind `{other}`"))),
                };
                p.kind_set = true;
            }
            "features" => {
                for f in value.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                    if !is_feature_name(f) {
                        return Err(perr(format!("invalid feature name `{f}`")));
                    }
                    p.node.features.insert(f.to_string());
                }
            }
            "cpus" => {
                p.node.cpus = parse_int(value).map_err(perr)? as u32;
                p.cpus_set = true;
            }
            "dram_bytes" => {
                p.node.dram_bytes = parse_int(value).map_err(perr)?;
                p.dram_set = true;
            }
            "disk" => {
                let fields: Vec<&str> = value.split(',').map(str::trim).collect();
                if fields.len() != 5 {
                    return Err(perr(format!(
                        "disk needs 5 fields (id, mount_root, capacity, read_bw, write_bw), got {}",
                        fields.len()
                    )));
                }
                if fields[0].is_empty() || fields[1].is_empty() {
                    return Err(perr("disk id and mount_root must be non-empty".into()));
                }
                p.node.disks.push(DiskSpec {
                    id: fields[0].to_string(),
                    mount_root: PathBuf::from(fields[1]),
                    capacity_bytes: parse_int(fields[2]).map_err(perr)?,
                    nominal_read_bw: parse_int(fields[3]).map_err(perr)?,
                    nominal_write_bw: parse_int(fields[4]).map_err(perr)?,
                });
            }
            other => return Err(perr(format!("unknown key `{other}`"))),
        }
    }
    if let Some(p) = current.take() {
        nodes.push(finish(p)?);
    }
    Ok(nodes)
}

/// Render nodes back into the inventory format.
pub fn render_inventory(nodes: &[NodeSpec]) -> String {
    let mut out = String::new();
    for (i, n) in nodes.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[node {}]\n", n.id));
        out.push_str(&format!("address = {}\n", n.address));
        out.push_str(&format!("kind = {}\n", n.kind));
        let features: Vec<&str> = n.features.iter().map(String::as_str).collect();
        out.push_str(&format!("features = {}\n", features.join(", ")));
        out.push_str(&format!("cpus = {}\n", n.cpus));
        out.push_str(&format!("dram_bytes = {}\n", n.dram_bytes));
        for d in &n.disks {
            out.push_str(&format!(
                "disk = {}, {}, {}, {}, {}\n",
                d.id,
                d.mount_root.display(),
                d.capacity_bytes,
                d.nominal_read_bw,
                d.nominal_write_bw
            ));
        }
    }
    out
}

fn parse_int(s: &str) -> std::result::Result<u64, String> {
    let cleaned: String = s.chars().filter(|c| *c != '_').collect();
    cleaned
        .parse::<u64>()
        .map_err(|_| format!("expected a non-negative integer, found `{s}`"))
}

fn is_feature_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
}

/// Boolean expression over node features: literals joined by `&` (and) and
/// `|` (or), with `&` binding tighter and parentheses for grouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Constraint {
    Feature(String),
    And(Box<Constraint>, Box<Constraint>),
    Or(Box<Constraint>, Box<Constraint>),
}

impl Constraint {
    pub fn parse(expr: &str) -> Result<Constraint> {
        let tokens = tokenize(expr)?;
        let mut parser = ConstraintParser {
            tokens: &tokens,
            pos: 0,
            expr,
        };
        let c = parser.or_expr()?;
        if parser.pos != tokens.len() {
            return Err(parser.err("trailing input"));
        }
        Ok(c)
    }

    pub fn matches(&self, node: &NodeSpec) -> bool {
        match self {
            Constraint::Feature(f) => node.has_feature(f),
            Constraint::And(a, b) => a.matches(node) && b.matches(node),
            Constraint::Or(a, b) => a.matches(node) || b.matches(node),
        }
    }

    /// Feature literals referenced by the expression.
    pub fn features(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Constraint::Feature(f) => {
                out.insert(f);
            }
            Constraint::And(a, b) | Constraint::Or(a, b) => {
                a.collect(out);
                b.collect(out);
            }
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Feature(name) => f.write_str(name),
            Constraint::And(a, b) => {
                let wrap = |c: &Constraint| matches!(c, Constraint::Or(..));
                if wrap(a) {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                f.write_str("&")?;
                if wrap(b) {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
            Constraint::Or(a, b) => write!(f, "{a}|{b}"),
        }
    }
}

impl TryFrom<String> for Constraint {
    type Error = InventoryError;
    fn try_from(s: String) -> Result<Self> {
        Constraint::parse(&s)
    }
}

impl From<Constraint> for String {
    fn from(c: Constraint) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Ident(String),
    And,
    Or,
    Open,
    Close,
}

fn tokenize(expr: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut chars = expr.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' => {
                chars.next();
            }
            '&' => {
                chars.next();
                out.push(Token::And);
            }
            '|' => {
                chars.next();
                out.push(Token::Or);
            }
            '(' => {
                chars.next();
                out.push(Token::Open);
            }
            ')' => {
                chars.next();
                out.push(Token::Close);
            }
            c if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' => {
                let mut ident = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                        ident.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(Token::Ident(ident));
            }
            other => {
                return Err(InventoryError::BadConstraint {
                    expr: expr.to_string(),
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(out)
}

struct ConstraintParser<'a> {
    tokens: &'a [Token],
    pos: usize,
    expr: &'a str,
}

impl ConstraintParser<'_> {
    fn err(&self, msg: &str) -> InventoryError {
        InventoryError::BadConstraint {
            expr: self.expr.to_string(),
            msg: msg.to_string(),
        }
    }

    fn or_expr(&mut self) -> Result<Constraint> {
        let mut lhs = self.and_expr()?;
        while self.tokens.get(self.pos) == Some(&Token::Or) {
            self.pos += 1;
            let rhs = self.and_expr()?;
            lhs = Constraint::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Constraint> {
        let mut lhs = self.atom()?;
        while self.tokens.get(self.pos) == Some(&Token::And) {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Constraint::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Constraint> {
        match self.tokens.get(self.pos) {
            Some(Token::Ident(name)) => {
                self.pos += 1;
                Ok(Constraint::Feature(name.clone()))
            }
            Some(Token::Open) => {
                self.pos += 1;
                let inner = self.or_expr()?;
                if self.tokens.get(self.pos) != Some(&Token::Close) {
                    return Err(self.err("missing `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(_) => Err(self.err("expected a feature name or `(`")),
            None => Err(self.err("unexpected end of expression")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Compute,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRequest {
    pub count: usize,
    pub constraint: Constraint,
    pub purpose: Purpose,
}

impl AllocationRequest {
    pub fn new(count: usize, constraint: &str, purpose: Purpose) -> Result<Self> {
        Ok(AllocationRequest {
            count,
            constraint: Constraint::parse(constraint)?,
            purpose,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationState {
    Granted,
    Active,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub id: String,
    pub purpose: Purpose,
    pub constraint: Constraint,
    pub nodes: Vec<NodeSpec>,
    pub state: AllocationState,
}

impl Allocation {
    pub fn node_ids(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    fn holds(&self, node_id: &str) -> bool {
        self.state != AllocationState::Released && self.nodes.iter().any(|n| n.id == node_id)
    }
}

/// Allocation registry over a fixed inventory. All mutations go through
/// `&mut self`, so a shared registry needs an outer lock.
#[derive(Debug, Clone, Default)]
pub struct Cluster {
    nodes: Vec<NodeSpec>,
    allocations: Vec<Allocation>,
    next_id: u64,
}

impl Cluster {
    pub fn new(nodes: Vec<NodeSpec>) -> Self {
        Cluster {
            nodes,
            allocations: Vec::new(),
            next_id: 1,
        }
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn allocations(&self) -> &[Allocation] {
        &self.allocations
    }

    pub fn declared_features(&self) -> BTreeSet<&str> {
        self.nodes
            .iter()
            .flat_map(|n| n.features.iter().map(String::as_str))
            .collect()
    }

    fn eligible(&self, req: &AllocationRequest) -> Vec<&NodeSpec> {
        let mut out: Vec<&NodeSpec> = self
            .nodes
            .iter()
            .filter(|n| req.constraint.matches(n))
            .filter(|n| req.purpose == Purpose::Compute || !n.disks.is_empty())
            .filter(|n| {
                self.allocations
                    .iter()
                    .filter(|a| a.holds(&n.id))
                    .all(|a| a.purpose != req.purpose && n.has_feature(LOCAL_STORAGE))
            })
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Grant `req.count` eligible nodes, lowest node id first.
    pub fn request(&mut self, req: &AllocationRequest) -> Result<Allocation> {
        if req.count == 0 {
            return Err(InventoryError::EmptyRequest);
        }
        if self.nodes.is_empty() {
            return Err(InventoryError::EmptyInventory);
        }
        let declared = self.declared_features();
        if let Some(unknown) = req.constraint.features().into_iter().find(|f| !declared.contains(f)) {
            return Err(InventoryError::UnknownFeature(unknown.to_string()));
        }
        let eligible = self.eligible(req);
        if eligible.len() < req.count {
            return Err(InventoryError::InsufficientNodes {
                requested: req.count,
                eligible: eligible.len(),
            });
        }
        let nodes: Vec<NodeSpec> = eligible.into_iter().take(req.count).cloned().collect();
        let alloc = Allocation {
            id: format!("alloc-{}", self.next_id),
            purpose: req.purpose,
            constraint: req.constraint.clone(),
            nodes,
            state: AllocationState::Granted,
        };
        self.next_id += 1;
        self.allocations.push(alloc.clone());
        Ok(alloc)
    }

    /// Mark a granted allocation as in use by a deployment.
    pub fn activate(&mut self, alloc: &Allocation) -> Result<Allocation> {
        let entry = self.entry_mut(&alloc.id)?;
        if entry.state == AllocationState::Released {
            return Err(InventoryError::DoubleRelease(alloc.id.clone()));
        }
        entry.state = AllocationState::Active;
        Ok(entry.clone())
    }

    pub fn release(&mut self, alloc: &Allocation) -> Result<Allocation> {
        let entry = self.entry_mut(&alloc.id)?;
        if entry.state == AllocationState::Released {
            return Err(InventoryError::DoubleRelease(alloc.id.clone()));
        }
        entry.state = AllocationState::Released;
        Ok(entry.clone())
    }

    fn entry_mut(&mut self, id: &str) -> Result<&mut Allocation> {
        self.allocations
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or_else(|| InventoryError::UnknownAllocation(id.to_string()))
    }
}

/// Reference inventories modelled on the two evaluation systems.
pub mod presets {
    use super::*;

    const GB: u64 = 1_000_000_000;

    fn datawarp_disks() -> Vec<DiskSpec> {
        (0..3)
            .map(|i| DiskSpec {
                id: format!("nvme{i}n1"),
                mount_root: PathBuf::from(format!("/mnt/nvme{i}n1")),
                capacity_bytes: 5_900 * GB,
                nominal_read_bw: 6_340_000_000,
                nominal_write_bw: 3_200_000_000,
            })
            .collect()
    }

    /// 8 compute nodes plus 4 storage nodes with three SSDs each.
    pub fn dom() -> Vec<NodeSpec> {
        let mut nodes = Vec::new();
        for i in 1..=8 {
            nodes.push(NodeSpec {
                id: format!("nid{i:05}"),
                address: format!("nid{i:05}"),
                kind: NodeKind::Compute,
                features: ["compute", "mc"].iter().map(|s| s.to_string()).collect(),
                cpus: 36,
                dram_bytes: 64 * GB,
                disks: Vec::new(),
            });
        }
        for i in 1..=4 {
            nodes.push(NodeSpec {
                id: format!("dw{i:02}"),
                address: format!("dw{i:02}"),
                kind: NodeKind::Storage,
                features: [STORAGE, "datawarp"].iter().map(|s| s.to_string()).collect(),
                cpus: 36,
                dram_bytes: 64 * GB,
                disks: datawarp_disks(),
            });
        }
        nodes
    }

    /// A single node with 16 NVMe disks exposed as node-local storage.
    pub fn ault() -> Vec<NodeSpec> {
        vec![NodeSpec {
            id: "ault01".into(),
            address: "ault01".into(),
            kind: NodeKind::Compute,
            features: ["compute", LOCAL_STORAGE].iter().map(|s| s.to_string()).collect(),
            cpus: 64,
            dram_bytes: 512 * GB,
            disks: (0..16)
                .map(|i| DiskSpec {
                    id: format!("nvme{i}n1"),
                    mount_root: PathBuf::from(format!("/mnt/nvme{i}n1")),
                    capacity_bytes: 1_600 * GB,
                    nominal_read_bw: 3_500_000_000,
                    nominal_write_bw: 2_000_000_000,
                })
                .collect(),
        }]
    }

    /// Small inventory for single-host runs: `compute` compute nodes and
    /// `storage` storage nodes with three 1 GiB disks each.
    pub fn localhost(compute: usize, storage: usize) -> Vec<NodeSpec> {
        let mut nodes = Vec::new();
        for i in 1..=compute {
            nodes.push(NodeSpec {
                id: format!("cn{i:02}"),
                address: format!("cn{i:02}"),
                kind: NodeKind::Compute,
                features: ["compute".to_string()].into_iter().collect(),
                cpus: 4,
                dram_bytes: 8 * GB,
                disks: Vec::new(),
            });
        }
        for i in 1..=storage {
            nodes.push(NodeSpec {
                id: format!("sn{i:02}"),
                address: format!("sn{i:02}"),
                kind: NodeKind::Storage,
                features: [STORAGE.to_string()].into_iter().collect(),
                cpus: 4,
                dram_bytes: 8 * GB,
                disks: (0..3)
                    .map(|d| DiskSpec {
                        id: format!("disk{d}"),
                        mount_root: PathBuf::from(format!("/mnt/disk{d}")),
                        capacity_bytes: 1 << 30,
                        nominal_read_bw: 1_000_000_000,
                        nominal_write_bw: 500_000_000,
                    })
                    .collect(),
            });
        }
        nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn storage_req(count: usize) -> AllocationRequest {
        AllocationRequest::new(count, "storage", Purpose::Storage).unwrap()
    }

    #[test]
    fn dom_document_round_trips() {
        let doc = render_inventory(&presets::dom());
        let nodes = load_inventory(&doc).unwrap();
        assert_eq!(nodes.len(), 12);
        let disks: usize = nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Storage)
            .map(|n| n.disks.len())
            .sum();
        assert_eq!(disks, 12);
        assert_eq!(nodes, presets::dom());
    }

    #[test]
    fn empty_document() {
        assert!(load_inventory("").unwrap().is_empty());
        assert!(load_inventory("# only a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn ault_document() {
        let nodes = load_inventory(&render_inventory(&presets::ault())).unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].disks.len(), 16);
        assert!(nodes[0].has_feature(LOCAL_STORAGE));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let doc = "[node a]\nkind = compute\ncpus = 4\ndram_bytes = x\n";
        match load_inventory(doc) {
            Err(InventoryError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        match load_inventory("cpus = 3\n") {
            Err(InventoryError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_node() {
        let doc = "[node a]\nkind = compute\ncpus = 1\ndram_bytes = 1\n\n[node a]\n";
        assert_eq!(
            load_inventory(doc),
            Err(InventoryError::DuplicateNode {
                id: "a".into(),
                line: 6
            })
        );
    }

    #[test]
    fn disk_on_plain_compute_node() {
        let doc = "[node a]\nkind = compute\ncpus = 1\ndram_bytes = 1\ndisk = d0, /mnt/d0, 10, 1, 1\n";
        assert_eq!(
            load_inventory(doc),
            Err(InventoryError::DiskOnComputeNode { node: "a".into() })
        );
        let ok = format!("{doc}features = local-storage\n");
        assert_eq!(load_inventory(&ok).unwrap()[0].disks.len(), 1);
    }

    #[test]
    fn storage_kind_requires_feature_and_disks() {
        let no_feature = "[node s]\nkind = storage\ncpus = 1\ndram_bytes = 1\ndisk = d0, /mnt/d0, 10, 1, 1\n";
        assert!(matches!(
            load_inventory(no_feature),
            Err(InventoryError::Invalid { .. })
        ));
        let no_disks = "[node s]\nkind = storage\nfeatures = storage\ncpus = 1\ndram_bytes = 1\n";
        assert!(matches!(load_inventory(no_disks), Err(InventoryError::Invalid { .. })));
    }

    #[test]
    fn constraint_grammar() {
        let c = Constraint::parse("storage & (ssd | nvme)").unwrap();
        assert_eq!(c.features(), ["nvme", "ssd", "storage"].into_iter().collect());
        assert_eq!(Constraint::parse(&c.to_string()).unwrap(), c);
        assert!(Constraint::parse("").is_err());
        assert!(Constraint::parse("a &").is_err());
        assert!(Constraint::parse("(a").is_err());
        assert!(Constraint::parse("a ! b").is_err());
    }

    #[test]
    fn dom_storage_allocations() {
        let mut cluster = Cluster::new(presets::dom());
        let two = cluster.request(&storage_req(2)).unwrap();
        assert_eq!(two.node_ids(), ["dw01", "dw02"]);

        let mut cluster = Cluster::new(presets::dom());
        let four = cluster.request(&storage_req(4)).unwrap();
        assert_eq!(four.node_ids(), ["dw01", "dw02", "dw03", "dw04"]);

        let mut cluster = Cluster::new(presets::dom());
        assert_eq!(
            cluster.request(&storage_req(5)),
            Err(InventoryError::InsufficientNodes {
                requested: 5,
                eligible: 4
            })
        );
    }

    #[test]
    fn unknown_feature_rejected() {
        let mut cluster = Cluster::new(presets::dom());
        let req = AllocationRequest::new(1, "gpu", Purpose::Compute).unwrap();
        assert_eq!(cluster.request(&req), Err(InventoryError::UnknownFeature("gpu".into())));
    }

    #[test]
    fn empty_inventory_and_zero_count() {
        let mut cluster = Cluster::new(Vec::new());
        assert_eq!(cluster.request(&storage_req(1)), Err(InventoryError::EmptyInventory));
        let mut cluster = Cluster::new(presets::dom());
        assert_eq!(cluster.request(&storage_req(0)), Err(InventoryError::EmptyRequest));
    }

    #[test]
    fn release_lifecycle() {
        let mut cluster = Cluster::new(presets::dom());
        let first = cluster.request(&storage_req(4)).unwrap();
        assert!(matches!(
            cluster.request(&storage_req(1)),
            Err(InventoryError::InsufficientNodes { eligible: 0, .. })
        ));
        let released = cluster.release(&first).unwrap();
        assert_eq!(released.state, AllocationState::Released);
        assert_eq!(
            cluster.release(&first),
            Err(InventoryError::DoubleRelease(first.id.clone()))
        );
        let again = cluster.request(&storage_req(4)).unwrap();
        assert_eq!(again.node_ids(), first.node_ids());
        assert_ne!(again.id, first.id);
    }

    #[test]
    fn node_local_storage_may_overlap_purposes() {
        let mut cluster = Cluster::new(presets::ault());
        let compute = AllocationRequest::new(1, "compute", Purpose::Compute).unwrap();
        let storage = AllocationRequest::new(1, LOCAL_STORAGE, Purpose::Storage).unwrap();
        cluster.request(&compute).unwrap();
        let s = cluster.request(&storage).unwrap();
        assert_eq!(s.node_ids(), ["ault01"]);
        // same purpose stays exclusive
        assert!(cluster.request(&storage).is_err());
    }

    #[test]
    fn storage_purpose_skips_diskless_nodes() {
        let mut cluster = Cluster::new(presets::dom());
        let req = AllocationRequest::new(1, "compute", Purpose::Storage).unwrap();
        assert!(matches!(
            cluster.request(&req),
            Err(InventoryError::InsufficientNodes { eligible: 0, .. })
        ));
    }
}
