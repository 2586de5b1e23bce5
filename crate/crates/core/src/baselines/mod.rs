//! Reference planners: equal split, Q-MCKP and a HiBid'-style allocator.

pub mod hibid;
pub mod mckp;
pub mod qmckp;

use crate::domain::BudgetPlan;
use crate::error::Result;

pub use hibid::{run_hibid, train_hibid, HibidArch, HibidPolicy};
pub use mckp::{bin_grid, nearest_bin, solve_mckp, MckpSolution};
pub use qmckp::{run_qmckp, train_qmckp, QMckpArch, QMckpModel};

/// `B / m` in every stage.
pub fn equal_split_plan(budget: f64, stages: usize) -> Result<BudgetPlan> {
    BudgetPlan::equal_split(budget, stages)
}
