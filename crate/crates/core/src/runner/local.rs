//! Local subprocess venue.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::{RunError, Venue};
use crate::manifest::{ToolManifest, WorkflowStep};
use crate::record::StepResult;

pub const RUN_DIR_ENV: &str = "FAIRFLOW_RUN_DIR";
const STDERR_TAIL_BYTES: u64 = 2048;

/// Runs each step as a child process in its own process group, with the
/// run directory as working directory.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalVenue;

impl Venue for LocalVenue {
    fn execute(&self, m: &ToolManifest, dir: &Path, limit: Duration) -> (Vec<StepResult>, Option<RunError>) {
        let started = Instant::now();
        let mut results = Vec::new();
        for step in &m.steps {
            let remaining = limit.saturating_sub(started.elapsed());
            let budget = match step.timeout_seconds {
                Some(s) => remaining.min(Duration::from_secs(s)),
                None => remaining,
            };
            match run_step(step, dir, budget) {
                Ok(r) if r.exit_code == Some(0) => results.push(r),
                Ok(r) => {
                    let err = RunError::StepFailed {
                        step: step.name.clone(),
                        exit_code: r.exit_code,
                        stderr_tail: stderr_tail(&log_path(dir, &step.name, "err")),
                    };
                    results.push(r);
                    return (results, Some(err));
                }
                Err(StepError::Timeout(r)) => {
                    results.push(r);
                    let err = RunError::Timeout {
                        step: step.name.clone(),
                        seconds: budget.as_secs_f64(),
                    };
                    return (results, Some(err));
                }
                Err(StepError::Run(e)) => return (results, Some(e)),
            }
        }
        (results, None)
    }
}

enum StepError {
    Timeout(StepResult),
    Run(RunError),
}

fn log_path(dir: &Path, step: &str, ext: &str) -> PathBuf {
    dir.join("_logs").join(format!("{step}.{ext}"))
}

fn program_path(dir: &Path, program: &str) -> PathBuf {
    let p = Path::new(program);
    // relative paths with a separator are relative to the run directory
    if p.is_relative() && program.contains('/') {
        dir.join(p)
    } else {
        p.to_path_buf()
    }
}

fn run_step(step: &WorkflowStep, dir: &Path, budget: Duration) -> Result<StepResult, StepError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| StepError::Run(RunError::Io { path, source })
    };
    let logs = dir.join("_logs");
    fs::create_dir_all(&logs).map_err(io(&logs))?;
    let out_path = log_path(dir, &step.name, "out");
    let err_path = log_path(dir, &step.name, "err");
    let stdout = File::create(&out_path).map_err(io(&out_path))?;
    let stderr = File::create(&err_path).map_err(io(&err_path))?;

    let start = Instant::now();
    let mut cmd = Command::new(program_path(dir, &step.command[0]));
    cmd.args(&step.command[1..])
        .current_dir(dir)
        .env(RUN_DIR_ENV, dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0);
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            return Err(StepError::Run(RunError::StepFailed {
                step: step.name.clone(),
                exit_code: None,
                stderr_tail: format!("cannot start '{}': {e}", step.command[0]),
            }))
        }
    };
    let status = wait_with_deadline(&mut child, start + budget).map_err(io(dir))?;
    // reap anything the step left running in its group
    kill_group(&child);
    let result = |exit_code| -> Result<StepResult, StepError> {
        let (stdout_len, stdout_sha256) = digest_file(&out_path).map_err(io(&out_path))?;
        let (stderr_len, stderr_sha256) = digest_file(&err_path).map_err(io(&err_path))?;
        Ok(StepResult {
            name: step.name.clone(),
            exit_code,
            duration: start.elapsed(),
            stdout_len,
            stdout_sha256,
            stderr_len,
            stderr_sha256,
        })
    };
    match status {
        Some(status) => result(status.code()),
        None => Err(StepError::Timeout(result(None)?)),
    }
}

// `None` when the deadline passed; the process group is killed first.
fn wait_with_deadline(child: &mut Child, deadline: Instant) -> std::io::Result<Option<std::process::ExitStatus>> {
    let mut pause = Duration::from_micros(200);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        let now = Instant::now();
        if now >= deadline {
            kill_group(child);
            child.wait()?;
            return Ok(None);
        }
        thread::sleep(pause.min(deadline - now));
        pause = (pause * 2).min(Duration::from_millis(20));
    }
}

fn kill_group(child: &Child) {
    let pgid = child.id() as libc::pid_t;
    // SAFETY: killpg only sends a signal; ESRCH for an empty group is fine.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn digest_file(path: &Path) -> std::io::Result<(u64, String)> {
    let bytes = fs::read(path)?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn stderr_tail(path: &Path) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let _ = f.seek(SeekFrom::Start(len.saturating_sub(STDERR_TAIL_BYTES)));
    let mut buf = Vec::new();
    let _ = f.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).trim_end().to_string()
}
