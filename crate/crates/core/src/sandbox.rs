//! Subprocess execution of candidate programs against a problem's tests.
//!
//! Every test snippet is appended to the candidate source and run in a fresh
//! interpreter process with its own scratch directory, process group, and
//! resource limits. The verdict is `pass` only when every test exits cleanly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use crate::corpus::Problem;

/// Python prelude that confines writes to the working directory and refuses
/// sockets and process spawning. Audit hooks cannot be removed once installed.
const PYTHON_GUARD: &str = r#"def __deed_guard():
    import os, sys
    root = os.path.realpath(os.getcwd())
    wflags = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
    def inside(p):
        if isinstance(p, int):
            return True
        if isinstance(p, bytes):
            p = os.fsdecode(p)
        p = os.path.realpath(os.path.join(root, os.fspath(p)))
        return p == root or p.startswith(root + os.sep)
    path_events = {"os.remove", "os.rename", "os.rmdir", "os.mkdir", "os.chmod",
                   "os.chown", "os.symlink", "os.link", "os.truncate", "os.utime",
                   "shutil.rmtree", "shutil.move", "shutil.copyfile"}
    denied = {"socket.connect", "socket.bind", "socket.sendto", "subprocess.Popen",
              "os.system", "os.exec", "os.posix_spawn", "os.spawn", "os.fork",
              "os.forkpty", "os.kill", "os.killpg"}
    def hook(event, args):
        if event == "open":
            path, mode, flags = args
            writing = (isinstance(mode, str) and any(c in mode for c in "wax+")) or \
                      (isinstance(flags, int) and flags & wflags)
            if writing and not inside(path):
                raise PermissionError("sandbox: write outside scratch directory: %r" % (path,))
        elif event in path_events:
            for a in args[:2]:
                if isinstance(a, (str, bytes, os.PathLike)) and not inside(a):
                    raise PermissionError("sandbox: %s outside scratch directory" % event)
        elif event in denied:
            raise PermissionError("sandbox: %s is not permitted" % event)
    sys.addaudithook(hook)
__deed_guard()
del __deed_guard
"#;

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("runner binary not found: {0}")]
    RunnerMissing(String),
    #[error("sandbox setup failed: {0}")]
    Setup(String),
    #[error("invalid runner configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guard {
    /// Install the Python audit-hook prelude.
    Python,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunnerConfig {
    /// Interpreter argv; `{file}` is replaced by the program path.
    pub command: Vec<String>,
    pub file_extension: String,
    /// Per-test wall-clock limit in seconds.
    pub timeout_secs: f64,
    /// Address-space cap per process; `None` disables it.
    pub memory_mb: Option<u64>,
    pub max_file_mb: u64,
    pub deny_network: bool,
    pub guard: Guard,
    pub scratch_root: Option<PathBuf>,
    pub message_cap: usize,
    pub stderr_cap: usize,
    /// Exception types that classify a run as a crash of the candidate itself.
    pub crash_markers: Vec<String>,
    pub cache: bool,
    /// Append one JSON record per execution to this file.
    pub audit_log: Option<PathBuf>,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            command: vec!["python3".into(), "-I".into(), "{file}".into()],
            file_extension: "py".into(),
            timeout_secs: 10.0,
            memory_mb: Some(2048),
            max_file_mb: 64,
            deny_network: true,
            guard: Guard::Python,
            scratch_root: None,
            message_cap: 512,
            stderr_cap: 4096,
            crash_markers: vec!["SyntaxError".into(), "IndentationError".into(), "TabError".into()],
            cache: true,
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Timeout,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedTest {
    pub test_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub verdict: Verdict,
    pub failed_tests: Vec<FailedTest>,
    /// Wall-clock seconds across all executed tests.
    pub duration: f64,
    pub stderr_excerpt: String,
}

impl ExecutionOutcome {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn failed_test_ids(&self) -> Vec<String> {
        self.failed_tests.iter().map(|f| f.test_id.clone()).collect()
    }

    /// Distinct failure messages in test order, one per line.
    pub fn error_message(&self) -> String {
        let mut seen = Vec::<&str>::new();
        for f in &self.failed_tests {
            if !seen.contains(&f.message.as_str()) {
                seen.push(&f.message);
            }
        }
        seen.join("\n")
    }
}

/// 1 iff the candidate passed every test; timeouts and crashes score 0.
pub fn test_eval(outcome: &ExecutionOutcome) -> u8 {
    u8::from(outcome.verdict == Verdict::Pass)
}

enum SingleRun {
    Pass,
    Fail { message: String, stderr: String },
    Timeout,
    Crash { message: String, stderr: String },
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    problem_id: &'a str,
    code_sha256: &'a str,
    verdict: Verdict,
    failed_tests: &'a [FailedTest],
    duration: f64,
    cached: bool,
}

pub struct Sandbox {
    cfg: RunnerConfig,
    net_namespace: bool,
    cache: Mutex<HashMap<String, ExecutionOutcome>>,
    audit: Option<Mutex<fs::File>>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("cfg", &self.cfg)
            .field("net_namespace", &self.net_namespace)
            .finish()
    }
}

impl Sandbox {
    pub fn new(cfg: RunnerConfig) -> Result<Self, SandboxError> {
        if cfg.command.is_empty() {
            return Err(SandboxError::Config("runner command is empty".into()));
        }
        if !cfg.command.iter().any(|a| a.contains("{file}")) {
            return Err(SandboxError::Config("runner command lacks a {file} placeholder".into()));
        }
        if !(cfg.timeout_secs > 0.0 && cfg.timeout_secs.is_finite()) {
            return Err(SandboxError::Config(format!("timeout must be positive, got {}", cfg.timeout_secs)));
        }
        if let Some(root) = &cfg.scratch_root {
            fs::create_dir_all(root).map_err(|e| SandboxError::Setup(format!("{}: {e}", root.display())))?;
        }
        let audit = match &cfg.audit_log {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| SandboxError::Setup(e.to_string()))?;
                }
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| SandboxError::Setup(format!("{}: {e}", path.display())))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        let net_namespace = cfg.deny_network && probe_net_namespace();
        if cfg.deny_network && !net_namespace {
            log::debug!("network namespaces unavailable; relying on the interpreter guard for network denial");
        }
        Ok(Self {
            cfg,
            net_namespace,
            cache: Mutex::new(HashMap::new()),
            audit,
        })
    }

    pub fn config(&self) -> &RunnerConfig {
        &self.cfg
    }

    pub fn run_tests(&self, code: &str, problem: &Problem) -> Result<ExecutionOutcome, SandboxError> {
        self.run_tests_with_timeout(code, problem, Duration::from_secs_f64(self.cfg.timeout_secs))
    }

    pub fn run_tests_with_timeout(
        &self,
        code: &str,
        problem: &Problem,
        timeout: Duration,
    ) -> Result<ExecutionOutcome, SandboxError> {
        if timeout.is_zero() {
            return Err(SandboxError::Config("timeout must be positive".into()));
        }
        let code_hash = hex::encode(Sha256::digest(code.as_bytes()));
        let key = self.cache_key(&code_hash, problem, timeout);
        if self.cfg.cache {
            let hit = self.cache.lock().unwrap().get(&key).cloned();
            if let Some(outcome) = hit {
                self.audit(problem, &code_hash, &outcome, true);
                return Ok(outcome);
            }
        }

        let start = Instant::now();
        let mut failed = Vec::new();
        let mut verdict = Verdict::Pass;
        let mut stderr_excerpt = String::new();
        for (i, test) in problem.tests.iter().enumerate() {
            match self.run_single(code, &test.snippet, timeout)? {
                SingleRun::Pass => {}
                SingleRun::Fail { message, stderr } => {
                    if stderr_excerpt.is_empty() {
                        stderr_excerpt = stderr;
                    }
                    verdict = Verdict::Fail;
                    failed.push(FailedTest {
                        test_id: test.test_id.clone(),
                        message,
                    });
                }
                SingleRun::Timeout => {
                    verdict = Verdict::Timeout;
                    failed.push(FailedTest {
                        test_id: test.test_id.clone(),
                        message: "timeout".into(),
                    });
                    break;
                }
                SingleRun::Crash { message, stderr } => {
                    if stderr_excerpt.is_empty() {
                        stderr_excerpt = stderr;
                    }
                    verdict = Verdict::Crash;
                    // the candidate is broken as a whole: attribute every remaining test
                    failed.extend(problem.tests[i..].iter().map(|t| FailedTest {
                        test_id: t.test_id.clone(),
                        message: message.clone(),
                    }));
                    break;
                }
            }
        }
        let outcome = ExecutionOutcome {
            verdict,
            failed_tests: failed,
            duration: start.elapsed().as_secs_f64(),
            stderr_excerpt,
        };
        if self.cfg.cache {
            self.cache.lock().unwrap().insert(key, outcome.clone());
        }
        self.audit(problem, &code_hash, &outcome, false);
        Ok(outcome)
    }

    fn cache_key(&self, code_hash: &str, problem: &Problem, timeout: Duration) -> String {
        let mut h = Sha256::new();
        h.update(code_hash.as_bytes());
        h.update(problem.id.as_bytes());
        for t in &problem.tests {
            h.update([0u8]);
            h.update(t.test_id.as_bytes());
            h.update([0u8]);
            h.update(t.snippet.as_bytes());
        }
        h.update(timeout.as_nanos().to_le_bytes());
        hex::encode(h.finalize())
    }

    fn audit(&self, problem: &Problem, code_hash: &str, outcome: &ExecutionOutcome, cached: bool) {
        let Some(file) = &self.audit else { return };
        let rec = AuditRecord {
            problem_id: &problem.id,
            code_sha256: code_hash,
            verdict: outcome.verdict,
            failed_tests: &outcome.failed_tests,
            duration: outcome.duration,
            cached,
        };
        let mut line = serde_json::to_vec(&rec).expect("audit record serializes");
        line.push(b'\n');
        if let Err(e) = file.lock().unwrap().write_all(&line) {
            log::warn!("audit log write failed: {e}");
        }
    }

    fn program_text(&self, code: &str, snippet: &str) -> String {
        let mut text = String::new();
        if self.cfg.guard == Guard::Python {
            text.push_str(PYTHON_GUARD);
            text.push('\n');
        }
        text.push_str(code);
        text.push_str("\n\n");
        text.push_str(snippet);
        text.push('\n');
        text
    }

    fn run_single(&self, code: &str, snippet: &str, timeout: Duration) -> Result<SingleRun, SandboxError> {
        let setup = |e: std::io::Error| SandboxError::Setup(e.to_string());
        let mut builder = tempfile::Builder::new();
        builder.prefix("deed-exec-");
        let exec_dir = match &self.cfg.scratch_root {
            Some(root) => builder.tempdir_in(root),
            None => builder.tempdir(),
        }
        .map_err(setup)?;
        // stdout/stderr live outside the candidate's working directory
        let work = exec_dir.path().join("work");
        fs::create_dir(&work).map_err(setup)?;
        let program = work.join(format!("candidate.{}", self.cfg.file_extension));
        fs::write(&program, self.program_text(code, snippet)).map_err(setup)?;
        let stdout_path = exec_dir.path().join("stdout");
        let stderr_path = exec_dir.path().join("stderr");
        let stdout = fs::File::create(&stdout_path).map_err(setup)?;
        let stderr = fs::File::create(&stderr_path).map_err(setup)?;

        let argv: Vec<String> = self
            .cfg
            .command
            .iter()
            .map(|a| a.replace("{file}", &program.to_string_lossy()))
            .collect();
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(&work)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
            .env("HOME", &work)
            .env("TMPDIR", &work)
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0");
        let limits = ProcessLimits {
            memory_bytes: self.cfg.memory_mb.map(|mb| mb * 1024 * 1024),
            file_bytes: self.cfg.max_file_mb * 1024 * 1024,
            cpu_secs: timeout.as_secs() + 2,
            net_namespace: self.net_namespace,
        };
        unsafe {
            cmd.pre_exec(move || limits.apply());
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(SandboxError::RunnerMissing(argv[0].clone()));
            }
            Err(e) => return Err(SandboxError::Setup(format!("spawn {}: {e}", argv[0]))),
        };
        let pid = child.id() as libc::pid_t;
        let status = match child.wait_timeout(timeout).map_err(setup)? {
            Some(status) => status,
            None => {
                kill_group(pid);
                let _ = child.wait();
                return Ok(SingleRun::Timeout);
            }
        };
        // reap anything the candidate left running in its group
        kill_group(pid);

        if status.success() {
            return Ok(SingleRun::Pass);
        }
        let raw = fs::read(&stderr_path).unwrap_or_default();
        let stderr_text = String::from_utf8_lossy(&raw);
        let stderr = tail_chars(stderr_text.trim_end(), self.cfg.stderr_cap);
        if let Some(sig) = status.signal() {
            // RLIMIT_CPU backs up the wall-clock limit
            if sig == libc::SIGXCPU {
                return Ok(SingleRun::Timeout);
            }
            return Ok(SingleRun::Crash {
                message: format!("terminated by signal {sig}"),
                stderr,
            });
        }
        let last = stderr_text
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("exit status {}", status.code().unwrap_or(-1)));
        let message = head_chars(&last, self.cfg.message_cap);
        let is_crash = self
            .cfg
            .crash_markers
            .iter()
            .any(|m| last.starts_with(m.as_str()));
        Ok(if is_crash {
            SingleRun::Crash { message, stderr }
        } else {
            SingleRun::Fail { message, stderr }
        })
    }
}

#[derive(Clone, Copy)]
struct ProcessLimits {
    memory_bytes: Option<u64>,
    file_bytes: u64,
    cpu_secs: u64,
    net_namespace: bool,
}

impl ProcessLimits {
    // Runs between fork and exec: only async-signal-safe calls.
    fn apply(&self) -> std::io::Result<()> {
        unsafe {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            if self.net_namespace && libc::unshare(libc::CLONE_NEWNET) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            let set = |res, v: u64| {
                let lim = libc::rlimit {
                    rlim_cur: v as libc::rlim_t,
                    rlim_max: v as libc::rlim_t,
                };
                libc::setrlimit(res, &lim)
            };
            if let Some(mem) = self.memory_bytes {
                set(libc::RLIMIT_AS, mem);
            }
            set(libc::RLIMIT_FSIZE, self.file_bytes);
            set(libc::RLIMIT_CORE, 0);
            set(libc::RLIMIT_CPU, self.cpu_secs);
        }
        Ok(())
    }
}

fn kill_group(pid: libc::pid_t) {
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
}

fn probe_net_namespace() -> bool {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c").arg("exit 0").stdout(Stdio::null()).stderr(Stdio::null());
    unsafe {
        cmd.pre_exec(|| {
            if libc::unshare(libc::CLONE_NEWNET) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    matches!(cmd.status(), Ok(s) if s.success())
}

fn head_chars(s: &str, cap: usize) -> String {
    s.chars().take(cap).collect()
}

fn tail_chars(s: &str, cap: usize) -> String {
    let n = s.chars().count();
    s.chars().skip(n.saturating_sub(cap)).collect()
}

/// Check that each problem's reference solution passes its own tests.
/// Returns the ids of problems whose solution does not.
pub fn verify_solutions(
    sandbox: &Sandbox,
    problems: &[Problem],
) -> Result<Vec<(String, ExecutionOutcome)>, SandboxError> {
    let outcomes = problems
        .par_iter()
        .map(|p| sandbox.run_tests(&p.solution, p).map(|o| (p.id.clone(), o)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(outcomes.into_iter().filter(|(_, o)| test_eval(o) != 1).collect())
}
