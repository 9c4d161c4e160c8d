//! HTTP adapters: an OpenAI-compatible chat-completions client and a generic
//! txt2img endpoint client. API keys come from environment variables only.

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ImageArtifact, ImageBackend, T2iRequest};

fn map_status(status: reqwest::StatusCode, body: &str) -> BackendError {
    if status.as_u16() == 429 {
        BackendError::RateLimited
    } else if status.is_server_error() {
        BackendError::Transport(format!("http {status}"))
    } else {
        BackendError::BadResponse(format!("http {status}: {body}"))
    }
}

fn map_transport(e: reqwest::Error) -> BackendError {
    BackendError::Transport(e.to_string())
}

/// OpenAI-compatible chat completions client.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpChatBackend {
            client: reqwest::blocking::Client::new(),
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut messages = vec![json!({"role": "system", "content": req.system})];
        for m in &req.messages {
            messages.push(json!({"role": m.role, "content": m.content}));
        }
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(map_transport)?;
        let status = response.status();
        let text = response.text().map_err(map_transport)?;
        if !status.is_success() {
            return Err(map_status(status, &text));
        }
        let reply: ChatCompletionReply = serde_json::from_str(&text)
            .map_err(|e| BackendError::BadResponse(format!("malformed chat reply: {e}")))?;
        reply
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| BackendError::BadResponse("chat reply has no choices".into()))
    }
}

/// Txt2img wire format: the endpoint accepts this JSON body and returns
/// `{"image": "<base64 png>"}` (an `{"images": [...]}` array in the style of
/// common web UIs is accepted too).
#[derive(Debug, Serialize)]
struct T2iBody<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    negative_prompt: Option<&'a str>,
    seed: u64,
    width: u32,
    height: u32,
    steps: u32,
}

pub struct HttpImageBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpImageBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        HttpImageBackend { client: reqwest::blocking::Client::new(), endpoint: endpoint.into(), api_key }
    }
}

#[derive(Deserialize)]
struct T2iReply {
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    images: Vec<String>,
    #[serde(default)]
    error: Option<String>,
}

impl ImageBackend for HttpImageBackend {
    fn generate(&self, req: &T2iRequest) -> Result<ImageArtifact, BackendError> {
        let body = T2iBody {
            prompt: &req.prompt,
            negative_prompt: req.negative_prompt.as_deref(),
            seed: req.seed,
            width: req.width,
            height: req.height,
            steps: req.steps,
        };
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(map_transport)?;
        let status = response.status();
        let text = response.text().map_err(map_transport)?;
        if !status.is_success() {
            return Err(map_status(status, &text));
        }
        let reply: T2iReply = serde_json::from_str(&text)
            .map_err(|e| BackendError::BadResponse(format!("malformed txt2img reply: {e}")))?;
        if let Some(err) = reply.error {
            // Backends signal refused prompts in-band with a 200 + error field.
            return Err(BackendError::SafetyRejected(err));
        }
        let encoded = reply
            .image
            .or_else(|| reply.images.into_iter().next())
            .ok_or_else(|| BackendError::BadResponse("txt2img reply has no image".into()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(encoded.as_bytes())
            .map_err(|e| BackendError::BadResponse(format!("image is not valid base64: {e}")))?;
        Ok(ImageArtifact {
            bytes,
            prompt: req.prompt.clone(),
            seed: req.seed,
            width: req.width,
            height: req.height,
        })
    }
}
