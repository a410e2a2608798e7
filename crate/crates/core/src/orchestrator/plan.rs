//! Declarative rerun campaigns and their expansion into concrete runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::verdict::OrderMode;

pub const PLACEHOLDERS: [&str; 4] = ["REPORT_PATH", "ORDER_SEED", "ORDER_SCOPE", "TEST_SELECTOR"];

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{mode} runs: {total} is not {iterations} iterations x {per_iteration} runs")]
    NonRectangularPlan {
        mode: &'static str,
        total: u32,
        iterations: u32,
        per_iteration: u32,
    },
    #[error("command template uses unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("{0}")]
    Invalid(String),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config: {0}")]
    Io(#[from] std::io::Error),
}

/// Granularity at which the test adapter permutes tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleScope {
    Class,
    Module,
    Package,
    Project,
}

impl ShuffleScope {
    pub fn as_str(self) -> &'static str {
        match self {
            ShuffleScope::Class => "class",
            ShuffleScope::Module => "module",
            ShuffleScope::Package => "package",
            ShuffleScope::Project => "project",
        }
    }
}

impl fmt::Display for ShuffleScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShuffleScope {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class" => Ok(ShuffleScope::Class),
            "module" => Ok(ShuffleScope::Module),
            "package" => Ok(ShuffleScope::Package),
            "project" => Ok(ShuffleScope::Project),
            other => Err(PlanError::Invalid(format!("unknown shuffle scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Shuffled run `i` uses `base + i`.
    PerRunDistinct(u64),
    /// Every shuffled run uses the same seed.
    Fixed(u64),
}

impl SeedPolicy {
    pub fn seed_for(self, run_index: u32) -> u64 {
        match self {
            SeedPolicy::PerRunDistinct(base) => base.wrapping_add(u64::from(run_index)),
            SeedPolicy::Fixed(seed) => seed,
        }
    }
}

fn default_workdir() -> PathBuf {
    PathBuf::from(".")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("flakelab-out")
}
fn default_same() -> u32 {
    200
}
fn default_shuffled() -> u32 {
    200
}
fn default_iterations() -> u32 {
    10
}
fn default_per_iteration() -> u32 {
    20
}
fn default_scope() -> ShuffleScope {
    ShuffleScope::Module
}
fn default_seed() -> SeedPolicy {
    SeedPolicy::PerRunDistinct(0)
}
fn default_timeout() -> f64 {
    3600.0
}
fn default_isolation() -> u32 {
    10
}

/// A rerun campaign as written in the config file. Every field except
/// `command` has a default; see `campaign.example.toml`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPlan {
    /// Shell command; `{REPORT_PATH}`, `{ORDER_SEED}`, `{ORDER_SCOPE}` and
    /// `{TEST_SELECTOR}` are replaced by shell-quoted values.
    pub command: String,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_same")]
    pub same_order_runs: u32,
    #[serde(default = "default_shuffled")]
    pub shuffled_runs: u32,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_per_iteration")]
    pub runs_per_iteration: u32,
    #[serde(default = "default_scope")]
    pub shuffle_scope: ShuffleScope,
    #[serde(default = "default_seed")]
    pub seed: SeedPolicy,
    #[serde(default = "default_timeout")]
    pub per_run_timeout_s: f64,
    #[serde(default = "default_isolation")]
    pub isolation_runs: u32,
    /// Root for per-run trace directories handed to the adapter.
    #[serde(default)]
    pub trace_dir: Option<PathBuf>,
    /// Start children from an empty environment (keeping PATH, HOME, LANG).
    #[serde(default)]
    pub scrub_env: bool,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl RunPlan {
    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        let plan: RunPlan = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Loads a config file; relative paths in it resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let mut plan = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut plan.workdir, &mut plan.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = plan.trace_dir.as_mut() {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for (mode, total) in [("same-order", self.same_order_runs), ("shuffled", self.shuffled_runs)] {
            if total > 0 && self.iterations.checked_mul(self.runs_per_iteration) != Some(total) {
                return Err(PlanError::NonRectangularPlan {
                    mode,
                    total,
                    iterations: self.iterations,
                    per_iteration: self.runs_per_iteration,
                });
            }
        }
        if !(self.per_run_timeout_s.is_finite() && self.per_run_timeout_s > 0.0) {
            return Err(PlanError::Invalid("per_run_timeout_s must be positive".into()));
        }
        if self.command.trim().is_empty() {
            return Err(PlanError::Invalid("command must not be empty".into()));
        }
        for name in placeholders_in(&self.command) {
            if !PLACEHOLDERS.contains(&name) {
                return Err(PlanError::UnknownPlaceholder(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.per_run_timeout_s)
    }

    pub fn supports_selection(&self) -> bool {
        self.command.contains("{TEST_SELECTOR}")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
}

/// `{NAME}` tokens made of uppercase letters and underscores.
fn placeholders_in(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        rest = &rest[open + 1..];
        if let Some(close) = rest.find('}') {
            let name = &rest[..close];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_uppercase() || c == '_') {
                out.push(name);
            }
        }
    }
    out
}

/// One concrete execution of the suite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub run_index: u32,
    pub iteration_id: u32,
    pub order_mode: OrderMode,
    pub report_path: PathBuf,
}

impl RunSpec {
    pub fn order_seed(&self) -> Option<u64> {
        self.order_mode.seed()
    }
}

/// Expands a plan into its runs: same-order iterations first, then the
/// shuffled ones. Run indices and iteration ids are contiguous over the
/// whole campaign, so each iteration is a consecutive block of runs.
pub fn expand_plan(plan: &RunPlan) -> Result<Vec<RunSpec>, PlanError> {
    plan.validate()?;
    let reports = plan.reports_dir();
    let mut specs = Vec::new();
    let mut iteration = 0;
    for (total, shuffled) in [(plan.same_order_runs, false), (plan.shuffled_runs, true)] {
        if total == 0 {
            continue;
        }
        for _ in 0..plan.iterations {
            for _ in 0..plan.runs_per_iteration {
                let run_index = specs.len() as u32;
                let order_mode = if shuffled {
                    OrderMode::Shuffled(plan.seed.seed_for(run_index))
                } else {
                    OrderMode::SameOrder
                };
                specs.push(RunSpec {
                    run_index,
                    iteration_id: iteration,
                    order_mode,
                    report_path: reports.join(format!("run-{run_index:05}.xml")),
                });
            }
            iteration += 1;
        }
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(same: u32, shuffled: u32, iterations: u32, per: u32) -> RunPlan {
        RunPlan::from_toml(&format!(
            "command = \"true\"\nsame_order_runs = {same}\nshuffled_runs = {shuffled}\n\
             iterations = {iterations}\nruns_per_iteration = {per}\n"
        ))
        .unwrap()
    }

    #[test]
    fn example_config_parses() {
        let text = include_str!("../../../../campaign.example.toml");
        let p = RunPlan::from_toml(text).unwrap();
        p.validate().unwrap();
        assert_eq!(p.isolation_runs, 10);
        assert!(p.supports_selection());
    }

    #[test]
    fn defaults() {
        let p = RunPlan::from_toml("command = \"pytest\"").unwrap();
        assert_eq!(p.same_order_runs, 200);
        assert_eq!(p.shuffled_runs, 200);
        assert_eq!((p.iterations, p.runs_per_iteration), (10, 20));
        assert_eq!(p.shuffle_scope, ShuffleScope::Module);
        assert_eq!(p.seed, SeedPolicy::PerRunDistinct(0));
        assert_eq!(p.per_run_timeout_s, 3600.0);
        assert_eq!(p.isolation_runs, 10);
        assert!(!p.scrub_env);
    }

    #[test]
    fn full_config() {
        let p = RunPlan::from_toml(
            r#"
command = "pytest --junitxml={REPORT_PATH} {TEST_SELECTOR}"
same_order_runs = 20
shuffled_runs = 20
iterations = 2
runs_per_iteration = 10
shuffle_scope = "class"
per_run_timeout_s = 30
seed = { policy = "fixed", value = 5 }
[env]
PYTHONHASHSEED = "0"
"#,
        )
        .unwrap();
        assert_eq!(p.seed, SeedPolicy::Fixed(5));
        assert_eq!(p.shuffle_scope, ShuffleScope::Class);
        assert_eq!(p.env["PYTHONHASHSEED"], "0");
        assert!(p.supports_selection());
    }

    #[test]
    fn ten_iterations_of_twenty() {
        let specs = expand_plan(&plan(200, 0, 10, 20)).unwrap();
        assert_eq!(specs.len(), 200);
        for (i, chunk) in specs.chunks(20).enumerate() {
            assert!(chunk.iter().all(|s| s.iteration_id == i as u32));
            assert!(chunk.iter().all(|s| s.order_mode == OrderMode::SameOrder));
        }
        assert!(specs.windows(2).all(|w| w[1].run_index == w[0].run_index + 1));
    }

    #[test]
    fn single_run() {
        let specs = expand_plan(&plan(1, 0, 1, 1)).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].iteration_id, 0);
        assert_eq!(specs[0].run_index, 0);
    }

    #[test]
    fn per_run_seeds() {
        let mut p = plan(0, 3, 1, 3);
        p.seed = SeedPolicy::PerRunDistinct(7);
        let seeds: Vec<_> = expand_plan(&p).unwrap().iter().map(|s| s.order_seed()).collect();
        assert_eq!(seeds, vec![Some(7), Some(8), Some(9)]);
        p.seed = SeedPolicy::Fixed(7);
        let seeds: Vec<_> = expand_plan(&p).unwrap().iter().map(|s| s.order_seed()).collect();
        assert_eq!(seeds, vec![Some(7); 3]);
    }

    #[test]
    fn shuffled_iterations_follow_same_order() {
        let specs = expand_plan(&plan(4, 4, 2, 2)).unwrap();
        let its: Vec<u32> = specs.iter().map(|s| s.iteration_id).collect();
        assert_eq!(its, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(specs[4].order_mode, OrderMode::Shuffled(4));
        assert!(specs[7].report_path.ends_with("reports/run-00007.xml"));
    }

    #[test]
    fn expansion_is_pure() {
        let p = plan(6, 6, 3, 2);
        assert_eq!(expand_plan(&p).unwrap(), expand_plan(&p).unwrap());
    }

    #[test]
    fn rejects_bad_plans() {
        let non_rect = RunPlan::from_toml("command = \"x\"\nsame_order_runs = 7\niterations = 2\nruns_per_iteration = 3\nshuffled_runs = 0");
        assert!(matches!(non_rect, Err(PlanError::NonRectangularPlan { .. })));
        let placeholder = RunPlan::from_toml("command = \"x {REPORT} \"");
        assert!(matches!(placeholder, Err(PlanError::UnknownPlaceholder(n)) if n == "REPORT"));
        assert!(RunPlan::from_toml("command = \"x\"\nbogus = 1").is_err());
        assert!(RunPlan::from_toml("command = \"x\"\nper_run_timeout_s = 0").is_err());
        assert!(RunPlan::from_toml("command = \"x\"\nshuffle_scope = \"galaxy\"").is_err());
        // braces that are not placeholders are left alone
        assert!(RunPlan::from_toml("command = \"awk '{print $1}'\"").is_ok());
    }
}
