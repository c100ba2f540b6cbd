//! Prompt generation through a chat-completion endpoint.

use std::time::Duration;

use serde_json::json;

use super::format::{parse_llm_response, PromptPair};
use super::record::TimingRecord;
use crate::error::{Result, VapError};

pub const API_KEY_VAR: &str = "VAPP_LLM_API_KEY";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

const INSTRUCTION: &str = "\
Below are the start and end times, in seconds, of every utterance by Person A and Person B in one conversation.
From how much each person talks, how long they hold the floor, how quickly they start after the other stops, how long the silences are and the overall tempo, first describe your impression of each person's turn-taking.
Then, from those impressions, write an instruction that would make an AI reproduce that person's turn-taking style.

Reply with exactly four lines in this format:

Impression of Person A: <one sentence on how Person A takes turns>
Impression of Person B: <one sentence on how Person B takes turns>
Prompt for Person A: <instruction for imitating Person A>
Prompt for Person B: <instruction for imitating Person B>
";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub instruction: String,
    pub timing: String,
}

impl LlmRequest {
    pub fn text(&self) -> String {
        format!("{}\n{}", self.instruction, self.timing)
    }
}

pub fn build_llm_request(record: &TimingRecord) -> LlmRequest {
    LlmRequest {
        instruction: INSTRUCTION.to_string(),
        timing: record.to_text(),
    }
}

/// Parses a textual record and builds the request for it.
pub fn build_llm_request_from_text(record: &str) -> Result<LlmRequest> {
    Ok(build_llm_request(&TimingRecord::parse(record)?))
}

#[derive(Debug, Clone)]
pub struct LlmEndpoint {
    pub url: String,
    pub model: String,
    pub timeout: Duration,
    pub offline: bool,
}

impl LlmEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            timeout: DEFAULT_TIMEOUT,
            offline: false,
        }
    }
}

/// Sends the request with the key from `VAPP_LLM_API_KEY`.
pub fn call_llm(req: &LlmRequest, endpoint: &LlmEndpoint) -> Result<String> {
    if endpoint.offline {
        return Err(offline_error());
    }
    let key = std::env::var(API_KEY_VAR)
        .map_err(|_| VapError::Config(format!("{API_KEY_VAR} is not set")))?;
    call_llm_with_key(req, endpoint, &key)
}

fn offline_error() -> VapError {
    VapError::Config("LLM calls are disabled in offline mode; use template mode instead".into())
}

/// Sends one chat completion; a transport failure is retried once.
pub fn call_llm_with_key(req: &LlmRequest, endpoint: &LlmEndpoint, key: &str) -> Result<String> {
    if endpoint.offline {
        return Err(offline_error());
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(endpoint.timeout)
        .build()
        .map_err(|e| VapError::Transport(format!("client setup: {e}")))?;
    let body = json!({
        "model": endpoint.model,
        "messages": [{"role": "user", "content": req.text()}],
    });
    let send = || {
        client
            .post(&endpoint.url)
            .bearer_auth(key)
            .json(&body)
            .send()
    };
    let resp = match send() {
        Ok(r) => r,
        Err(first) => {
            tracing::warn!("LLM request failed ({first}); retrying once");
            send().map_err(|e| VapError::Transport(format!("{}: {e}", endpoint.url)))?
        }
    };
    let status = resp.status();
    let text = resp
        .text()
        .map_err(|e| VapError::Transport(format!("{}: reading body: {e}", endpoint.url)))?;
    if !status.is_success() {
        let snippet: String = text.chars().take(200).collect();
        return Err(VapError::Transport(format!(
            "{}: status {status}: {snippet}",
            endpoint.url
        )));
    }
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| VapError::Format(format!("LLM response is not JSON: {e}")))?;
    doc["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| VapError::Format("LLM response has no choices[0].message.content".into()))
}

/// Requests prompts for `record`, asking again once if the reply does not
/// follow the four-line format.
pub fn llm_prompts(record: &TimingRecord, endpoint: &LlmEndpoint, key: &str) -> Result<PromptPair> {
    let req = build_llm_request(record);
    match parse_llm_response(&call_llm_with_key(&req, endpoint, key)?) {
        Ok(p) => Ok(p),
        Err(VapError::Format(m)) => {
            tracing::warn!("LLM reply rejected ({m}); asking again");
            parse_llm_response(&call_llm_with_key(&req, endpoint, key)?)
        }
        Err(e) => Err(e),
    }
}
