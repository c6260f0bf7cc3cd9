//! HTTP client for external multimodal models (captioner and judge).
//!
//! Targets the generic chat-completions-with-images schema: one user message
//! whose content is a text part followed by base64 data-URL image parts. Any
//! provider speaking that schema works; the endpoint URL comes from config
//! and the bearer token from the `TALC_API_TOKEN` environment variable.

use base64::Engine;
use serde_json::{json, Value};

use crate::error::{Result, TalcError};
use crate::video::VideoTensor;

pub const TOKEN_ENV_VAR: &str = "TALC_API_TOKEN";

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: Option<String>,
    pub timeout_secs: u64,
    /// Retries after the first attempt on transient failures.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ClientConfig {
            endpoint: endpoint.into(),
            model: None,
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

pub struct ChatClient {
    config: ClientConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(config: ClientConfig) -> Result<ChatClient> {
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TalcError::Transport(format!("client setup: {e}")))?;
        Ok(ChatClient {
            config,
            token: std::env::var(TOKEN_ENV_VAR).ok(),
            http,
        })
    }

    /// Send one chat request with inline images; returns the assistant text.
    pub fn chat_with_images(&self, prompt: &str, pngs: &[Vec<u8>]) -> Result<String> {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        for png in pngs {
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        let mut body = json!({
            "messages": [{"role": "user", "content": content}]
        });
        if let Some(model) = &self.config.model {
            body["model"] = json!(model);
        }

        let mut attempt = 0u32;
        loop {
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    let transient = matches!(&e, TalcError::Transport(_));
                    if transient && attempt < self.config.max_retries {
                        let wait = self.config.backoff_ms << attempt;
                        std::thread::sleep(std::time::Duration::from_millis(wait));
                        attempt += 1;
                        continue;
                    }
                    return Err(e);
                }
            }
        }
    }

    fn send_once(&self, body: &Value) -> Result<String> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| TalcError::Transport(format!("request failed: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| TalcError::Transport(format!("reading response: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TalcError::Transport(format!(
                "endpoint returned {status}: {text}"
            )));
        }
        if !status.is_success() {
            return Err(TalcError::Parse {
                reason: format!("endpoint returned {status}"),
                raw: text,
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| TalcError::Parse {
            reason: format!("response is not JSON: {e}"),
            raw: text.clone(),
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| TalcError::Parse {
                reason: "missing choices[0].message.content".into(),
                raw: text,
            })
    }
}

/// Encode one video frame as PNG bytes for an image payload.
pub fn frame_to_png(video: &VideoTensor, frame: usize) -> Result<Vec<u8>> {
    let rgb = video.frame_rgb8(frame);
    let img = image::RgbImage::from_raw(video.width as u32, video.height as u32, rgb)
        .ok_or_else(|| TalcError::Shape("frame buffer does not match dimensions".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| TalcError::Format(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}
