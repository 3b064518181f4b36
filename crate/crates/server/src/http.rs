//! HTTP-backed generation client: POSTs the prompt as JSON and reads the
//! model output back. The endpoint contract is deliberately small:
//! request `{"prompt": "..."}`, response either `{"response": "..."}` or a
//! raw text body.

use std::time::Duration;

use dsaudit_core::analyst::GenerationError;
use dsaudit_core::GenerationClient;

pub struct HttpGenerationClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpGenerationClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(30))
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Self {
        HttpGenerationClient {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl GenerationClient for HttpGenerationClient {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError> {
        let response = self
            .agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "prompt": prompt }))
            .map_err(|err| match err {
                ureq::Error::Status(code, _) => {
                    GenerationError::new(format!("endpoint returned status {code}"))
                }
                ureq::Error::Transport(t) => GenerationError::new(format!("transport: {t}")),
            })?;
        let body = response
            .into_string()
            .map_err(|err| GenerationError::new(format!("unreadable response body: {err}")))?;
        match serde_json::from_str::<serde_json::Value>(&body) {
            Ok(serde_json::Value::Object(map)) => match map.get("response") {
                Some(serde_json::Value::String(text)) => Ok(text.clone()),
                _ => Ok(body),
            },
            _ => Ok(body),
        }
    }
}
