use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use super::{ChatTransport, LlmRequest, TransportError, TransportReply, Usage};

type Responder = dyn Fn(&LlmRequest) -> Result<Vec<String>, TransportError> + Send + Sync;

/// In-process transport driven by a closure. Used for offline runs, tests and
/// for producing cassettes without a network.
pub struct ScriptedTransport {
    responder: Box<Responder>,
    seen: Mutex<Vec<LlmRequest>>,
}

impl ScriptedTransport {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&LlmRequest) -> Result<Vec<String>, TransportError> + Send + Sync + 'static,
    {
        ScriptedTransport {
            responder: Box::new(responder),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Replies with the request tag, once per requested completion.
    pub fn echo_tag() -> Self {
        Self::new(|req| Ok(vec![req.tag.clone(); req.params.n_completions as usize]))
    }

    /// Exact tag lookup; unknown tags answer HTTP 404.
    pub fn from_table(table: HashMap<String, Vec<String>>) -> Self {
        Self::new(move |req| {
            table.get(&req.tag).cloned().ok_or_else(|| TransportError::Status {
                code: 404,
                body: format!("no scripted reply for tag {}", req.tag),
            })
        })
    }

    /// Per-tag reply queues: each call pops the next completion list for its
    /// tag, and the last list repeats once the queue is down to one.
    pub fn queued<I, S>(script: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<Vec<String>>)>,
        S: Into<String>,
    {
        let queues: HashMap<String, VecDeque<Vec<String>>> =
            script.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        let queues = Mutex::new(queues);
        Self::new(move |req| {
            let mut q = queues.lock().unwrap_or_else(|e| e.into_inner());
            let missing = || TransportError::Status {
                code: 404,
                body: format!("no scripted reply for tag {}", req.tag),
            };
            let queue = q.get_mut(&req.tag).ok_or_else(missing)?;
            match queue.len() {
                0 => Err(missing()),
                1 => Ok(queue[0].clone()),
                _ => Ok(queue.pop_front().expect("non-empty")),
            }
        })
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl ChatTransport for ScriptedTransport {
    fn send(&self, request: &LlmRequest) -> Result<TransportReply, TransportError> {
        self.seen
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        let completions = (self.responder)(request)?;
        Ok(TransportReply {
            completions,
            usage: Usage::default(),
        })
    }
}
