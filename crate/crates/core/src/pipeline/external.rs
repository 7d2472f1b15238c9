//! Stages backed by shell commands.
//!
//! Placeholders substituted into the command template:
//! `{x1}`..`{xN}` (this stage's hyperparameters), `{params}` (all of them,
//! space separated), `{input}` (path to the previous stage's output, empty
//! for the first stage), `{output}` (path the stage may write its output
//! to) and `{stage}` (1-based stage index). The final stage reports its
//! objective as `objective=<float>` on the last line of standard output.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ExternalStage<'a> {
    pub stage: usize,
    pub command: &'a str,
    pub env: &'a BTreeMap<String, String>,
    pub workdir: Option<&'a Path>,
    pub timeout: Duration,
}

#[derive(Debug)]
pub struct ExternalOutcome {
    /// Contents of `{output}` if the command wrote it, otherwise stdout.
    pub payload: Vec<u8>,
    pub stdout: String,
    pub seconds: f64,
}

pub fn render(template: &str, stage: usize, params: &[f64], input: &str, output: &str) -> String {
    let mut cmd = template.to_string();
    // Longest index first so `{x1}` does not clobber `{x12}`.
    for (i, v) in params.iter().enumerate().rev() {
        cmd = cmd.replace(&format!("{{x{}}}", i + 1), &v.to_string());
    }
    let joined = params
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    cmd.replace("{params}", &joined)
        .replace("{input}", input)
        .replace("{output}", output)
        .replace("{stage}", &stage.to_string())
}

impl ExternalStage<'_> {
    pub fn run(
        &self,
        params: &[f64],
        input: Option<&Path>,
        output: &Path,
    ) -> Result<ExternalOutcome> {
        let input_str = input.map(|p| p.display().to_string()).unwrap_or_default();
        let rendered = render(
            self.command,
            self.stage,
            params,
            &input_str,
            &output.display().to_string(),
        );
        let _ = std::fs::remove_file(output);

        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&rendered)
            .envs(self.env)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = self.workdir {
            cmd.current_dir(dir);
        }

        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| Error::StageExecution {
            stage: self.stage,
            message: format!("failed to spawn `{rendered}`: {e}"),
            output: String::new(),
        })?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());

        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::StageExecution {
                    stage: self.stage,
                    message: format!("timed out after {:.1}s", self.timeout.as_secs_f64()),
                    // Readers are left detached: orphaned grandchildren may
                    // still hold the pipes open.
                    output: String::new(),
                });
            }
            thread::sleep(Duration::from_millis(2));
        };
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        let out_bytes = stdout.join().unwrap_or_default();
        let err_bytes = stderr.join().unwrap_or_default();

        if !status.success() {
            let mut output = String::from_utf8_lossy(&out_bytes).into_owned();
            output.push_str(&String::from_utf8_lossy(&err_bytes));
            return Err(Error::StageExecution {
                stage: self.stage,
                message: format!("`{rendered}` exited with {status}"),
                output,
            });
        }

        let payload = match std::fs::read(output) {
            Ok(bytes) => bytes,
            Err(_) => out_bytes.clone(),
        };
        Ok(ExternalOutcome {
            payload,
            stdout: String::from_utf8_lossy(&out_bytes).into_owned(),
            seconds,
        })
    }
}

/// Parses `objective=<float>` from the last non-empty line.
pub fn parse_objective(stage: usize, stdout: &str) -> Result<f64> {
    let last = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| Error::Protocol {
            stage,
            message: "final stage printed nothing".into(),
        })?;
    let value = last
        .strip_prefix("objective=")
        .ok_or_else(|| Error::Protocol {
            stage,
            message: format!("expected `objective=<float>`, got `{last}`"),
        })?;
    let y: f64 = value.trim().parse().map_err(|_| Error::Protocol {
        stage,
        message: format!("unparseable objective `{value}`"),
    })?;
    if !y.is_finite() {
        return Err(Error::Protocol {
            stage,
            message: format!("non-finite objective `{value}`"),
        });
    }
    Ok(y)
}

pub(crate) fn scratch_path(root: &Path, name: &str) -> PathBuf {
    root.join("work").join(name)
}

type Reader = thread::JoinHandle<Vec<u8>>;

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> Reader {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_placeholders() {
        let s = render(
            "run {x1} {x2} --all {params} < {input} > {output} #{stage}",
            3,
            &[0.5, 2.0],
            "in",
            "out",
        );
        assert_eq!(s, "run 0.5 2 --all 0.5 2 < in > out #3");
    }

    #[test]
    fn objective_protocol() {
        assert_eq!(parse_objective(1, "log\nobjective=0.5\n\n").unwrap(), 0.5);
        assert!(matches!(
            parse_objective(2, "objective=abc"),
            Err(Error::Protocol { stage: 2, .. })
        ));
        assert!(parse_objective(1, "objective=0.5\nbye").is_err());
        assert!(parse_objective(1, "").is_err());
    }
}
