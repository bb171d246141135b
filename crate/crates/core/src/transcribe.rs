//! Speech-to-text clients. A transcriber turns a waveform into a UTF-8
//! transcript; the toolkit never runs recognition itself.

use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::audio::{encode_wav, Waveform};
use crate::error::{Error, Result};

pub trait Transcriber: Send + Sync {
    fn transcribe(&self, w: &Waveform) -> Result<String>;
}

/// Placeholder replaced by a temporary WAV path in command arguments.
pub const WAV_PLACEHOLDER: &str = "{wav}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TranscriberConfig {
    /// No transcription; word accuracy is reported as null.
    #[default]
    None,
    /// Runs `program args…`. If an argument contains `{wav}` the audio is
    /// written to a temporary file and its path substituted; otherwise WAV
    /// bytes are piped on stdin. The transcript is read from stdout.
    Command { program: String, #[serde(default)] args: Vec<String> },
    /// POSTs WAV bytes (`audio/wav`) and reads the response body.
    Http { url: String, #[serde(default = "default_timeout")] timeout_secs: f64 },
}

fn default_timeout() -> f64 {
    60.0
}

impl TranscriberConfig {
    pub fn build(&self) -> Result<Option<Arc<dyn Transcriber>>> {
        Ok(match self {
            TranscriberConfig::None => None,
            TranscriberConfig::Command { program, args } => {
                if program.trim().is_empty() {
                    return Err(Error::Config("transcriber program is empty".into()));
                }
                Some(Arc::new(CommandTranscriber {
                    program: program.clone(),
                    args: args.clone(),
                }))
            }
            TranscriberConfig::Http { url, timeout_secs } => {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    return Err(Error::Config(format!("transcriber url `{url}` is not http(s)")));
                }
                if !(*timeout_secs > 0.0) {
                    return Err(Error::Config("transcriber timeout must be > 0".into()));
                }
                Some(Arc::new(HttpTranscriber::new(url.clone(), Duration::from_secs_f64(*timeout_secs))))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CommandTranscriber {
    pub program: String,
    pub args: Vec<String>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Transcriber for CommandTranscriber {
    fn transcribe(&self, w: &Waveform) -> Result<String> {
        let bytes = encode_wav(w);
        let by_path = self.args.iter().any(|a| a.contains(WAV_PLACEHOLDER));
        let temp = by_path.then(|| {
            std::env::temp_dir().join(format!(
                "deid-asr-{}-{}.wav",
                std::process::id(),
                TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
            ))
        });
        if let Some(p) = &temp {
            std::fs::write(p, &bytes).map_err(|e| Error::io(p, e))?;
        }
        let args: Vec<String> = match &temp {
            Some(p) => self.args.iter().map(|a| a.replace(WAV_PLACEHOLDER, &p.to_string_lossy())).collect(),
            None => self.args.clone(),
        };
        let result = run(&self.program, &args, (!by_path).then_some(&bytes[..]));
        if let Some(p) = &temp {
            let _ = std::fs::remove_file(p);
        }
        result
    }
}

fn run(program: &str, args: &[String], stdin: Option<&[u8]>) -> Result<String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Service(format!("cannot start transcriber `{program}`: {e}")))?;
    if let (Some(data), Some(mut pipe)) = (stdin, child.stdin.take()) {
        // A transcriber may exit without reading; a broken pipe then surfaces
        // through the exit status.
        let _ = pipe.write_all(data);
    }
    let out = child
        .wait_with_output()
        .map_err(|e| Error::Service(format!("transcriber `{program}` failed: {e}")))?;
    if !out.status.success() {
        return Err(Error::Service(format!(
            "transcriber `{program}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    String::from_utf8(out.stdout)
        .map(|s| s.trim().to_string())
        .map_err(|_| Error::Service(format!("transcriber `{program}` wrote non-UTF-8 output")))
}

pub struct HttpTranscriber {
    url: String,
    agent: ureq::Agent,
}

impl HttpTranscriber {
    pub fn new(url: String, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url, agent }
    }
}

impl Transcriber for HttpTranscriber {
    fn transcribe(&self, w: &Waveform) -> Result<String> {
        let bytes = encode_wav(w);
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "audio/wav")
            .send(&bytes[..])
            .map_err(|e| Error::Service(format!("POST {}: {e}", self.url)))?;
        resp.body_mut()
            .read_to_string()
            .map(|s| s.trim().to_string())
            .map_err(|e| Error::Service(format!("reading response from {}: {e}", self.url)))
    }
}
