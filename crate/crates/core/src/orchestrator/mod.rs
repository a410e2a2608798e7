//! Rerun campaigns: planning, isolated execution, isolation reruns.
//!
//! Runs of one iteration execute strictly one after another on this machine.
//! Separate campaigns may run in parallel, each with its own output
//! directory.

mod campaign;
mod exec;
mod plan;

pub use campaign::{
    load_isolation, read_isolation, run_campaign, write_isolation, write_run_manifest, CampaignError,
    CampaignOutput, ARCHIVE_FILE, ISOLATION_FILE, RUNS_FILE,
};
pub use exec::{
    execute_isolation, execute_run, machine_fingerprint, render_command, shell_quote, terminate_group,
    ExecError, ENV_ORDER_SCOPE, ENV_ORDER_SEED, ENV_TRACE_DIR,
};
pub use plan::{expand_plan, PlanError, RunPlan, RunSpec, SeedPolicy, ShuffleScope, PLACEHOLDERS};
