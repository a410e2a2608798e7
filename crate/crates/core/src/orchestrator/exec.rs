//! Running the suite in a fresh process group with a deadline.

use std::collections::BTreeMap;
use std::fs::File;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant, SystemTime};

use log::{debug, info, warn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::plan::{RunPlan, RunSpec};
use crate::junit::{entries_to_verdicts, parse_junit_report};
use crate::verdict::{ExitStatus, OrderMode, RunRecord, TestId, Verdict};

pub const ENV_ORDER_SEED: &str = "FLAKELAB_ORDER_SEED";
pub const ENV_ORDER_SCOPE: &str = "FLAKELAB_ORDER_SCOPE";
pub const ENV_TRACE_DIR: &str = "FLAKELAB_TRACE_DIR";

const KEPT_ON_SCRUB: [&str; 4] = ["PATH", "HOME", "LANG", "LC_ALL"];

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("working directory {0} does not exist")]
    WorkdirMissing(PathBuf),
    #[error("failed to start {command:?}: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stable hash of hostname, OS identification and CPU model.
pub fn machine_fingerprint() -> &'static str {
    static FP: OnceLock<String> = OnceLock::new();
    FP.get_or_init(|| {
        let mut h = Sha256::new();
        for part in [hostname(), os_identifier(), cpu_model()] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    })
}

fn hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: buf is valid for buf.len() bytes.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return String::new();
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}

fn os_identifier() -> String {
    let release = std::fs::read_to_string("/etc/os-release")
        .ok()
        .and_then(|t| {
            t.lines()
                .find_map(|l| l.strip_prefix("PRETTY_NAME=").map(|v| v.trim_matches('"').to_string()))
        })
        .unwrap_or_default();
    let kernel = std::fs::read_to_string("/proc/sys/kernel/osrelease").unwrap_or_default();
    format!("{} {} {} {}", std::env::consts::OS, std::env::consts::ARCH, release, kernel.trim())
}

fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| {
            t.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_default()
}

/// POSIX single-quote quoting.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Substitutes the placeholders of `template`.
pub fn render_command(template: &str, spec: &RunSpec, plan: &RunPlan, selector: Option<&TestId>) -> String {
    let seed = spec.order_seed().map(|s| s.to_string()).unwrap_or_default();
    let scope = match spec.order_mode {
        OrderMode::SameOrder => String::new(),
        OrderMode::Shuffled(_) => plan.shuffle_scope.to_string(),
    };
    let selector = selector.map(|t| t.to_string()).unwrap_or_default();
    let quote = |s: &str| if s.is_empty() { String::new() } else { shell_quote(s) };
    template
        .replace("{REPORT_PATH}", &shell_quote(&spec.report_path.to_string_lossy()))
        .replace("{ORDER_SEED}", &quote(&seed))
        .replace("{ORDER_SCOPE}", &quote(&scope))
        .replace("{TEST_SELECTOR}", &quote(&selector))
}

fn group_alive(pgid: i32) -> bool {
    // SAFETY: signal 0 only probes for existence.
    unsafe { libc::kill(-pgid, 0) == 0 }
}

fn reap_group(pgid: i32) {
    loop {
        // SAFETY: plain waitpid on our own process group.
        let pid = unsafe { libc::waitpid(-pgid, std::ptr::null_mut(), libc::WNOHANG) };
        if pid <= 0 {
            break;
        }
    }
}

/// Kills every process in the group and waits until none is left. Returns
/// false if members were still visible after `grace`.
pub fn terminate_group(pgid: i32, grace: Duration) -> bool {
    // SAFETY: pgid is the group we created for the child.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let deadline = Instant::now() + grace;
    loop {
        reap_group(pgid);
        if !group_alive(pgid) {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn become_subreaper() {
    // Orphaned grandchildren get reparented to us so they can be reaped.
    #[cfg(target_os = "linux")]
    {
        static ONCE: OnceLock<()> = OnceLock::new();
        ONCE.get_or_init(|| {
            // SAFETY: prctl with an integer flag has no memory effects.
            unsafe {
                libc::prctl(libc::PR_SET_CHILD_SUBREAPER, 1, 0, 0, 0);
            }
        });
    }
}

/// Waits for `child` until `timeout`; true if it exited in time.
fn wait_with_deadline(child: &mut Child, timeout: Duration) -> std::io::Result<bool> {
    let deadline = Instant::now() + timeout;
    let mut pause = Duration::from_millis(1);
    loop {
        if child.try_wait()?.is_some() {
            return Ok(true);
        }
        let now = Instant::now();
        if now >= deadline {
            return Ok(false);
        }
        std::thread::sleep(pause.min(deadline - now));
        pause = (pause * 2).min(Duration::from_millis(50));
    }
}

/// Outcome of one child process, before its report is interpreted.
struct RawRun {
    started_at: SystemTime,
    ended_at: SystemTime,
    timed_out: bool,
}

fn spawn_and_wait(
    spec: &RunSpec,
    plan: &RunPlan,
    selector: Option<&TestId>,
    log_path: &Path,
) -> Result<RawRun, ExecError> {
    if !plan.workdir.is_dir() {
        return Err(ExecError::WorkdirMissing(plan.workdir.clone()));
    }
    become_subreaper();
    if let Some(dir) = spec.report_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    if let Some(dir) = log_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    match std::fs::remove_file(&spec.report_path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let scratch = tempfile::Builder::new().prefix("flakelab-run-").tempdir()?;
    let command = render_command(&plan.command, spec, plan, selector);
    let log = File::create(log_path)?;

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .current_dir(&plan.workdir)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log)
        .process_group(0);
    if plan.scrub_env {
        let kept: BTreeMap<&str, String> = KEPT_ON_SCRUB
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (*k, v)))
            .collect();
        cmd.env_clear().envs(kept);
    }
    cmd.env_remove(ENV_ORDER_SEED)
        .env_remove(ENV_ORDER_SCOPE)
        .env_remove(ENV_TRACE_DIR)
        .env("TMPDIR", scratch.path());
    if let OrderMode::Shuffled(seed) = spec.order_mode {
        cmd.env(ENV_ORDER_SEED, seed.to_string())
            .env(ENV_ORDER_SCOPE, plan.shuffle_scope.as_str());
    }
    if let Some(traces) = &plan.trace_dir {
        let dir = traces.join(format!("run-{:05}", spec.run_index));
        std::fs::create_dir_all(&dir)?;
        cmd.env(ENV_TRACE_DIR, dir);
    }
    cmd.envs(&plan.env);

    debug!("run {}: {command}", spec.run_index);
    let started_at = SystemTime::now();
    let mut child = cmd.spawn().map_err(|source| ExecError::Spawn {
        command: command.clone(),
        source,
    })?;
    let pgid = child.id() as i32;
    let exited = wait_with_deadline(&mut child, plan.timeout())?;
    if !exited {
        warn!("run {} exceeded {:?}; killing process group", spec.run_index, plan.timeout());
    }
    // Stray background processes must not leak into later runs either.
    if !terminate_group(pgid, Duration::from_secs(5)) {
        warn!("process group {pgid} still has members after SIGKILL");
    }
    let _ = child.wait();
    Ok(RawRun {
        started_at,
        ended_at: SystemTime::now(),
        timed_out: !exited,
    })
}

fn log_path(plan: &RunPlan, name: &str) -> PathBuf {
    plan.output_dir.join("logs").join(format!("{name}.log"))
}

/// Executes one run and turns its report into a record. A missing or
/// unparsable report yields a `Crashed` record without verdicts, a deadline
/// overrun a `Timeout` record; the matrix fills both with ABSENT.
pub fn execute_run(spec: &RunSpec, plan: &RunPlan) -> Result<RunRecord, ExecError> {
    run_with_selector(spec, plan, None, &log_path(plan, &format!("run-{:05}", spec.run_index)))
}

fn run_with_selector(
    spec: &RunSpec,
    plan: &RunPlan,
    selector: Option<&TestId>,
    log: &Path,
) -> Result<RunRecord, ExecError> {
    let raw = spawn_and_wait(spec, plan, selector, log)?;
    let (exit_status, verdicts) = if raw.timed_out {
        (ExitStatus::Timeout, BTreeMap::new())
    } else {
        match std::fs::read(&spec.report_path) {
            Err(e) => {
                warn!("run {}: report missing ({e})", spec.run_index);
                (ExitStatus::Crashed, BTreeMap::new())
            }
            Ok(bytes) => match parse_junit_report(&bytes) {
                Ok(entries) => (ExitStatus::Completed, entries_to_verdicts(entries)),
                Err(e) => {
                    warn!("run {}: {e}", spec.run_index);
                    (ExitStatus::Crashed, BTreeMap::new())
                }
            },
        }
    };
    info!(
        "run {} (iteration {}) {}: {} verdicts",
        spec.run_index,
        spec.iteration_id,
        exit_status.as_str(),
        verdicts.len()
    );
    Ok(RunRecord {
        run_index: spec.run_index,
        iteration_id: spec.iteration_id,
        order_mode: spec.order_mode,
        machine_fingerprint: machine_fingerprint().to_string(),
        started_at: raw.started_at,
        ended_at: raw.ended_at,
        verdicts,
        exit_status,
    })
}

fn file_stem_for(test: &TestId) -> String {
    test.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs only `test`, `n` times in a row, in natural order. Runs where the
/// selector did not reach the test (or the run crashed) give ABSENT.
pub fn execute_isolation(test: &TestId, n: u32, plan: &RunPlan) -> Result<Vec<Verdict>, ExecError> {
    let stem = file_stem_for(test);
    let dir = plan.output_dir.join("isolation");
    (0..n)
        .map(|attempt| {
            let spec = RunSpec {
                run_index: attempt,
                iteration_id: 0,
                order_mode: OrderMode::SameOrder,
                report_path: dir.join(format!("{stem}-{attempt:03}.xml")),
            };
            let log = log_path(plan, &format!("isolation-{stem}-{attempt:03}"));
            let record = run_with_selector(&spec, plan, Some(test), &log)?;
            Ok(record
                .verdicts
                .get(test)
                .map_or(Verdict::Absent, |o| o.verdict))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::plan::ShuffleScope;

    fn plan(command: &str, out: &Path) -> RunPlan {
        let mut p = RunPlan::from_toml(&format!("command = {command:?}")).unwrap();
        p.output_dir = out.to_path_buf();
        p.workdir = out.to_path_buf();
        p
    }

    fn spec(out: &Path, mode: OrderMode) -> RunSpec {
        RunSpec {
            run_index: 3,
            iteration_id: 1,
            order_mode: mode,
            report_path: out.join("r.xml"),
        }
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
    }

    #[test]
    fn rendering() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = plan("run {REPORT_PATH} {ORDER_SEED} {ORDER_SCOPE} {TEST_SELECTOR}", dir.path());
        p.shuffle_scope = ShuffleScope::Class;
        let t: TestId = "a.py::test_x[1]".parse().unwrap();
        let s = spec(Path::new("/r"), OrderMode::Shuffled(9));
        assert_eq!(
            render_command(&p.command, &s, &p, Some(&t)),
            "run '/r/r.xml' '9' 'class' 'a.py::test_x[1]'"
        );
        let s = spec(Path::new("/r"), OrderMode::SameOrder);
        assert_eq!(render_command(&p.command, &s, &p, None), "run '/r/r.xml'   ");
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(machine_fingerprint(), machine_fingerprint());
        assert_eq!(machine_fingerprint().len(), 16);
    }

    #[test]
    fn missing_workdir() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = plan("true", dir.path());
        p.workdir = dir.path().join("nope");
        let err = execute_run(&spec(dir.path(), OrderMode::SameOrder), &p).unwrap_err();
        assert!(matches!(err, ExecError::WorkdirMissing(_)));
    }

    #[test]
    fn completed_run_parses_report() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = r#"printf '<testsuite><testcase name="t"/><testcase name="u"><failure/></testcase></testsuite>' > {REPORT_PATH}; exit 1"#;
        let rec = execute_run(&spec(dir.path(), OrderMode::SameOrder), &plan(cmd, dir.path())).unwrap();
        assert_eq!(rec.exit_status, ExitStatus::Completed);
        assert_eq!(rec.verdicts.len(), 2);
        assert!(rec.started_at <= rec.ended_at);
        assert_eq!(rec.machine_fingerprint, machine_fingerprint());
    }

    #[test]
    fn missing_report_is_crash() {
        let dir = tempfile::tempdir().unwrap();
        let rec = execute_run(&spec(dir.path(), OrderMode::SameOrder), &plan("true", dir.path())).unwrap();
        assert_eq!(rec.exit_status, ExitStatus::Crashed);
        assert!(rec.verdicts.is_empty());
    }

    #[test]
    fn stale_report_is_not_reused() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.xml"), "<testsuite><testcase name=\"t\"/></testsuite>").unwrap();
        let rec = execute_run(&spec(dir.path(), OrderMode::SameOrder), &plan("true", dir.path())).unwrap();
        assert_eq!(rec.exit_status, ExitStatus::Crashed);
    }

    #[test]
    fn timeout_kills_whole_group() {
        let dir = tempfile::tempdir().unwrap();
        let pidfile = dir.path().join("pids");
        let cmd = format!(
            "sleep 30 & echo $! >> {0}; (sleep 30 & echo $! >> {0}; wait) & sleep 30",
            pidfile.display()
        );
        let mut p = plan(&cmd, dir.path());
        p.per_run_timeout_s = 0.5;
        let started = Instant::now();
        let rec = execute_run(&spec(dir.path(), OrderMode::SameOrder), &p).unwrap();
        assert!(started.elapsed() < Duration::from_secs(10));
        assert_eq!(rec.exit_status, ExitStatus::Timeout);
        assert!(rec.verdicts.is_empty());
        let pids = std::fs::read_to_string(&pidfile).unwrap();
        for pid in pids.split_whitespace() {
            let pid: i32 = pid.parse().unwrap();
            // SAFETY: existence probe only.
            let alive = unsafe { libc::kill(pid, 0) } == 0;
            assert!(!alive, "pid {pid} survived");
        }
    }

    #[test]
    fn environment_for_shuffled_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = r#"printf '<testsuite><testcase name="%s_%s_%s"/></testsuite>' "$FLAKELAB_ORDER_SEED" "$FLAKELAB_ORDER_SCOPE" "$EXTRA" > {REPORT_PATH}"#;
        let mut p = plan(cmd, dir.path());
        p.env.insert("EXTRA".into(), "x".into());
        let rec = execute_run(&spec(dir.path(), OrderMode::Shuffled(42)), &p).unwrap();
        let name = rec.verdicts.keys().next().unwrap().test_name().to_string();
        assert_eq!(name, "42_module_x");
        let rec = execute_run(&spec(dir.path(), OrderMode::SameOrder), &p).unwrap();
        let name = rec.verdicts.keys().next().unwrap().test_name().to_string();
        assert_eq!(name, "__x");
    }

    #[test]
    fn scratch_tmpdir_and_scrubbing() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = r#"test -d "$TMPDIR" && printf '<testsuite><testcase name="t%s"/></testsuite>' "${SECRET_TOKEN:-none}" > {REPORT_PATH}"#;
        let mut p = plan(cmd, dir.path());
        // SAFETY: single assignment of a variable no other test reads.
        unsafe { std::env::set_var("SECRET_TOKEN", "leak") };
        p.scrub_env = true;
        let rec = execute_run(&spec(dir.path(), OrderMode::SameOrder), &p).unwrap();
        assert_eq!(rec.verdicts.keys().next().unwrap().test_name(), "tnone");
    }

    #[test]
    fn isolation_runs() {
        let dir = tempfile::tempdir().unwrap();
        // The fake runner reports the selected test as passing, or nothing
        // at all if no selector was given.
        let cmd = r#"sel={TEST_SELECTOR}; printf '<testsuite><testcase file="a.py" name="%s"/><testcase file="a.py" name="other"/></testsuite>' "${sel#a.py::}" > {REPORT_PATH}"#;
        let p = plan(cmd, dir.path());
        let t: TestId = "a.py::test_v".parse().unwrap();
        assert_eq!(execute_isolation(&t, 3, &p).unwrap(), vec![Verdict::Pass; 3]);

        let never = plan(r#"printf '<testsuite><testcase file="a.py" name="zzz"/></testsuite>' > {REPORT_PATH}"#, dir.path());
        assert_eq!(execute_isolation(&t, 10, &never).unwrap(), vec![Verdict::Absent; 10]);
    }
}
