//! Router and editor backed by a chat-completion model prompted with in-context
//! demonstrations. One completion answers both questions: whether the source
//! concept occurs in the input, and the rewritten input.

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::FactEdit;
use crate::error::{Error, Result};

/// Demonstration block placed before every query. Versioned with the crate.
pub const DEMONSTRATIONS: &str = include_str!("../assets/demonstrations.txt");

pub const QUESTION: &str = "Does the entity specified by source concept appeared in the Input:";

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "EDIT_HARNESS_LLM_KEY";

fn with_period(s: &str) -> String {
    let s = s.trim();
    if s.ends_with('.') {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// Full completion prompt for `prompt` against `edit`.
pub fn render_prompt(prompt: &str, edit: &FactEdit) -> String {
    let next = DEMONSTRATIONS
        .lines()
        .filter_map(|l| l.strip_suffix('.').and_then(|n| n.parse::<usize>().ok()))
        .max()
        .unwrap_or(0)
        + 1;
    format!(
        "{}\n{next}.\nInput: {}\nsource concept: {}\ntarget concept: {}\n{QUESTION}",
        DEMONSTRATIONS.trim_end(),
        prompt.trim(),
        with_period(&edit.edit_prompt),
        with_period(&edit.target_prompt),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatAnswer {
    No,
    Yes { output: String },
}

/// Reads the yes/no answer and, for yes, the `Output:` line.
pub fn parse_response(text: &str) -> Result<ChatAnswer> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let bad = || Error::UnparseableResponse(text.trim().chars().take(200).collect());
    let (at, answer) = lines
        .iter()
        .enumerate()
        .find_map(|(i, l)| l.strip_prefix(QUESTION).map(|rest| (i, rest.trim())))
        .or_else(|| lines.first().map(|l| (0, *l)))
        .ok_or_else(bad)?;
    let word = answer.trim_end_matches('.').trim().to_ascii_lowercase();
    match word.as_str() {
        "no" => Ok(ChatAnswer::No),
        "yes" => {
            let output = lines[at + 1..]
                .iter()
                .find_map(|l| l.strip_prefix("Output:"))
                .map(str::trim)
                .filter(|o| !o.is_empty())
                .ok_or_else(bad)?;
            Ok(ChatAnswer::Yes {
                output: output.to_string(),
            })
        }
        _ => Err(bad()),
    }
}

pub trait ChatTransport: Send + Sync {
    /// Returns the model's completion for a single user message.
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatConfig {
    /// Chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Minimum spacing between outbound calls.
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_timeout() -> u64 {
    60
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

impl ChatConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    }
}

/// OpenAI-compatible chat-completions client. Calls are serialized.
pub struct HttpChatTransport {
    config: ChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    last_call: Mutex<Option<Instant>>,
}

impl HttpChatTransport {
    pub fn new(config: ChatConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        HttpChatTransport {
            config,
            api_key,
            agent,
            last_call: Mutex::new(None),
        }
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last = self.last_call.lock().expect("chat lock");
        if let Some(t) = *last {
            let gap = Duration::from_millis(self.config.min_interval_ms);
            if let Some(wait) = gap.checked_sub(t.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body);
        *last = Some(Instant::now());
        let resp = resp.map_err(|e| Error::Backend(format!("chat completion: {e}")))?;
        let completion: Completion = resp
            .into_json()
            .map_err(|e| Error::UnparseableResponse(format!("chat completion body: {e}")))?;
        completion
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::UnparseableResponse("chat completion has no choices".into()))
    }
}

pub struct ChatRouter {
    transport: Box<dyn ChatTransport>,
}

impl ChatRouter {
    pub fn new(transport: Box<dyn ChatTransport>) -> Self {
        ChatRouter { transport }
    }

    pub fn ask(&self, prompt: &str, edit: &FactEdit) -> Result<ChatAnswer> {
        let reply = self.transport.complete(&render_prompt(prompt, edit))?;
        parse_response(&reply)
    }
}
