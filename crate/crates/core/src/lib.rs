//! On-demand provisioning of a striped, user-space data manager on top of a
//! cluster inventory, plus the I/O benchmark harness used to evaluate it.
//!
//! The pipeline is:
//!
//! 1. [`inventory`] parses the cluster description and grants allocations
//!    against feature constraints.
//! 2. [`planner`] assigns disk roles on a storage allocation and renders one
//!    configuration document per service.
//! 3. [`executor`] launches the [`ministore`] daemons tier by tier, attaches
//!    clients, stages data in and out and scrubs the disks on teardown.
//! 4. [`bench`] runs IOR-, mdtest- and HACC-IO-style workloads against a
//!    deployment or a plain directory, and hosts the analytic predictors.

pub mod bench;
pub mod executor;
pub mod inventory;
pub mod ministore;
pub mod parallel;
pub mod planner;

pub use inventory::{Allocation, AllocationRequest, Cluster, DiskSpec, NodeKind, NodeSpec, Purpose};
pub use planner::{DeploymentPlan, DeploymentPolicy, Role, ServiceKind};

/// One mebibyte, the default stripe size.
pub const MIB: u64 = 1 << 20;
