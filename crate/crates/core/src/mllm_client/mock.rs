use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Deserialize;

use super::{validate_history, BackendProvider, ChatBackend, ClientError, Message};

/// Replays canned completions in order and records every request.
#[derive(Debug, Default)]
pub struct ScriptedMock {
    script: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<Vec<Message>>>,
}

impl ScriptedMock {
    pub fn new<I, S>(completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Mutex::new(completions.into_iter().map(Into::into).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Every history passed to [`ChatBackend::chat`], in call order.
    pub fn requests(&self) -> Vec<Vec<Message>> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }

    pub fn is_drained(&self) -> bool {
        self.remaining() == 0
    }
}

impl ChatBackend for ScriptedMock {
    fn chat(&self, history: &[Message]) -> Result<String, ClientError> {
        validate_history(history)?;
        let calls = {
            let mut reqs = self.requests.lock().unwrap();
            reqs.push(history.to_vec());
            reqs.len()
        };
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(ClientError::ScriptExhausted { calls: calls - 1 })
    }
}

/// Per-sample, per-attempt scripts. Attempt `n` (1-based) of sample `id`
/// replays `samples[id][n-1]`, falling back to `default[n-1]`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptBook {
    #[serde(default)]
    pub default: Vec<Vec<String>>,
    #[serde(default)]
    pub samples: HashMap<String, Vec<Vec<String>>>,
    #[serde(skip)]
    issued: Mutex<Vec<(String, u32, Arc<ScriptedMock>)>>,
}

impl ScriptBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(mut self, attempts: Vec<Vec<String>>) -> Self {
        self.default = attempts;
        self
    }

    pub fn with_sample(mut self, id: impl Into<String>, attempts: Vec<Vec<String>>) -> Self {
        self.samples.insert(id.into(), attempts);
        self
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))
    }

    /// Mocks handed out so far, with their sample id and attempt.
    pub fn issued(&self) -> Vec<(String, u32, Arc<ScriptedMock>)> {
        self.issued.lock().unwrap().clone()
    }
}

impl BackendProvider for ScriptBook {
    fn backend(&self, sample_id: &str, attempt: u32) -> Result<Arc<dyn ChatBackend>, ClientError> {
        let idx = attempt.saturating_sub(1) as usize;
        let script = self
            .samples
            .get(sample_id)
            .and_then(|a| a.get(idx))
            .or_else(|| self.default.get(idx))
            .cloned()
            .unwrap_or_default();
        let mock = Arc::new(ScriptedMock::new(script));
        self.issued
            .lock()
            .unwrap()
            .push((sample_id.to_string(), attempt, mock.clone()));
        Ok(mock)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllm_client::Part;

    fn history() -> Vec<Message> {
        vec![Message::system("s"), Message::user(vec![Part::text("q")])]
    }

    #[test]
    fn replays_in_order_then_exhausts() {
        let mock = ScriptedMock::new(["<Real><reason>ok</reason>"]);
        assert_eq!(mock.chat(&history()).unwrap(), "<Real><reason>ok</reason>");
        assert!(mock.is_drained());
        assert!(matches!(
            mock.chat(&history()),
            Err(ClientError::ScriptExhausted { calls: 1 })
        ));
        assert_eq!(mock.requests().len(), 2);
    }

    #[test]
    fn book_falls_back_to_default() {
        let book = ScriptBook::new()
            .with_default(vec![vec!["d1".into()], vec!["d2".into()]])
            .with_sample("a", vec![vec!["a1".into()]]);
        let h = history();
        assert_eq!(book.backend("a", 1).unwrap().chat(&h).unwrap(), "a1");
        assert_eq!(book.backend("a", 2).unwrap().chat(&h).unwrap(), "d2");
        assert_eq!(book.backend("b", 1).unwrap().chat(&h).unwrap(), "d1");
        assert!(book.backend("b", 3).unwrap().chat(&h).is_err());
        assert_eq!(book.issued().len(), 4);
    }
}
