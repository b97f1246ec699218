//! Line-delimited JSON bridge to an out-of-process model server.
//!
//! Each call writes one request line and reads one response line:
//!
//! ```text
//! -> {"op":"generate","prompt":"...","params":{...},"seed":7}
//! <- {"text":"..."}
//! -> {"op":"predict","text":"..."}
//! <- {"proba":0.83}
//! ```
//!
//! A response of the form `{"error": "..."}` surfaces as a transport error.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AnnotationBackend, BackendError, Capabilities, ClassifierBackend, GenerationParams, GeneratorBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Generate { prompt: String, params: GenerationParams, seed: u64 },
    Predict { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Text { text: String },
    Proba { proba: f64 },
    Error { error: String },
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

pub struct ExternalBackend {
    channel: Mutex<Channel>,
    child: Option<Mutex<Child>>,
    annotation_params: GenerationParams,
}

impl ExternalBackend {
    /// Wraps an already-connected reader/writer pair.
    pub fn from_streams<R, W>(reader: R, writer: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            channel: Mutex::new(Channel { reader: Box::new(reader), writer: Box::new(writer) }),
            child: None,
            annotation_params: GenerationParams::default(),
        }
    }

    /// Spawns `program args..` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("failed to spawn {program}: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut backend = Self::from_streams(BufReader::new(stdout), stdin);
        backend.child = Some(Mutex::new(child));
        Ok(backend)
    }

    /// Parameters sent with annotation prompts (annotation reuses `generate`).
    pub fn with_annotation_params(mut self, params: GenerationParams) -> Self {
        self.annotation_params = params;
        self
    }

    pub fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let mut line = serde_json::to_string(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        let mut ch = self.channel.lock().map_err(|_| BackendError::Transport("channel poisoned".into()))?;
        ch.writer
            .write_all(line.as_bytes())
            .and_then(|_| ch.writer.flush())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let mut reply = String::new();
        let n = ch.reader.read_line(&mut reply).map_err(|e| BackendError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(BackendError::Transport("server closed the connection".into()));
        }
        let response: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| BackendError::Protocol(format!("bad response {:?}: {e}", reply.trim_end())))?;
        match response {
            Response::Error { error } => Err(BackendError::Transport(error)),
            r => Ok(r),
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl GeneratorBackend for ExternalBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities { trainable: false, deterministic_given_seed: false }
    }

    fn generate(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String, BackendError> {
        let req = Request::Generate { prompt: prompt.to_string(), params: params.clone(), seed };
        match self.call(&req)? {
            Response::Text { text } => Ok(text),
            other => Err(BackendError::Protocol(format!("expected text, got {other:?}"))),
        }
    }
}

impl ClassifierBackend for ExternalBackend {
    fn predict_proba(&self, text: &str) -> Result<f64, BackendError> {
        match self.call(&Request::Predict { text: text.to_string() })? {
            Response::Proba { proba } if (0.0..=1.0).contains(&proba) => Ok(proba),
            other => Err(BackendError::Protocol(format!("expected proba in [0,1], got {other:?}"))),
        }
    }
}

impl AnnotationBackend for ExternalBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.generate(prompt, &self.annotation_params, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use std::sync::Arc;

    #[derive(Clone, Default)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn wire_format() {
        let sent = SharedBuf::default();
        let replies = "{\"text\":\"B: hello <END>\"}\n{\"proba\":0.25}\n{\"error\":\"overloaded\"}\n";
        let be = ExternalBackend::from_streams(Cursor::new(replies.as_bytes().to_vec()), sent.clone());
        let params = GenerationParams::new(1.0, 0.9, 1.05, 16, "<END>").unwrap();
        assert_eq!(be.generate("A: hi", &params, 3).unwrap(), "B: hello <END>");
        assert_eq!(be.predict_proba("A: hi").unwrap(), 0.25);
        let err = be.predict_proba("x").unwrap_err();
        assert!(err.is_retriable());
        assert!(be.predict_proba("x").is_err());

        let written = String::from_utf8(sent.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<serde_json::Value> = written.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["op"], "generate");
        assert_eq!(lines[0]["prompt"], "A: hi");
        assert_eq!(lines[0]["seed"], 3);
        assert_eq!(lines[0]["params"]["top_p"], 0.9);
        assert_eq!(lines[1], serde_json::json!({"op": "predict", "text": "A: hi"}));
    }

    #[test]
    fn subprocess_round_trip() {
        if Command::new("sh").arg("-c").arg("true").status().is_err() {
            return;
        }
        let script = r#"while IFS= read -r line; do case "$line" in *'"predict"'*) echo '{"proba":0.75}';; *) echo '{"text":"B: ok <END>"}';; esac; done"#;
        let be = ExternalBackend::spawn("sh", &["-c".to_string(), script.to_string()]).unwrap();
        assert_eq!(be.predict_proba("anything").unwrap(), 0.75);
        let p = GenerationParams::default();
        assert_eq!(be.generate("A: hi", &p, 1).unwrap(), "B: ok <END>");
        assert_eq!(be.complete("prompt").unwrap(), "B: ok <END>");
    }

    #[test]
    fn out_of_range_probability_is_a_protocol_error() {
        let be = ExternalBackend::from_streams(Cursor::new(b"{\"proba\":1.5}\n".to_vec()), SharedBuf::default());
        assert!(matches!(be.predict_proba("x"), Err(BackendError::Protocol(_))));
    }
}
