//! Client for remote language-model and embedding services.
//!
//! Each capability has an offline fallback: extraction falls back to the
//! rule-based extractor, embeddings to word overlap, repair proposals to none.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::debug::{RemoteRepair, RepairContext};
use crate::intent::{Extractor, PartialJobSpec, RuleExtractor};
use crate::retrieval::Embedder;

const PROMPTS: &str = include_str!("../data/prompts.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Extract,
    Embed,
    Repair,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Extract => "extract",
            Capability::Embed => "embed",
            Capability::Repair => "repair",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("bridge unavailable: {0}")]
    Unavailable(String),
    #[error("bridge protocol error: {0}")]
    Protocol(String),
    #[error("bridge configuration error: {0}")]
    Config(String),
    #[error("bridge capability `{0}` is not enabled")]
    Disabled(Capability),
}

fn default_timeout() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub capabilities: BTreeSet<Capability>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            endpoint: None,
            api_key_env: None,
            timeout_ms: default_timeout(),
            retries: default_retries(),
            capabilities: BTreeSet::new(),
        }
    }
}

/// Upper bound on retries.
pub const MAX_RETRIES: u32 = 5;

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.timeout_ms == 0 {
            return Err(BridgeError::Config("timeout_ms must be positive".into()));
        }
        if self.retries > MAX_RETRIES {
            return Err(BridgeError::Config(format!("retries must be at most {MAX_RETRIES}")));
        }
        if !self.capabilities.is_empty() && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(BridgeError::Config("enabled capabilities require an endpoint".into()));
        }
        if let Some(var) = &self.api_key_env {
            if var.is_empty() || !var.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(BridgeError::Config(format!("`{var}` is not an environment variable name")));
            }
        }
        Ok(())
    }

    pub fn enabled(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }
}

pub fn load_bridge_config(source: &str) -> Result<BridgeConfig, BridgeError> {
    let config: BridgeConfig =
        serde_json::from_str(source).map_err(|e| BridgeError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn prompt(cap: Capability) -> &'static str {
    static P: OnceLock<serde_json::Map<String, Value>> = OnceLock::new();
    P.get_or_init(|| serde_json::from_str(PROMPTS).expect("bundled prompts are valid"))
        .get(&cap.to_string())
        .and_then(Value::as_str)
        .unwrap_or("")
}

#[derive(Deserialize)]
struct Envelope {
    ok: bool,
    #[serde(default)]
    result: Option<Value>,
    #[serde(default)]
    error: Option<String>,
}

/// Blocking HTTP client; safe to share between threads.
#[derive(Debug)]
pub struct BridgeClient {
    config: BridgeConfig,
    agent: ureq::Agent,
}

impl BridgeClient {
    pub fn new(config: BridgeConfig) -> Result<BridgeClient, BridgeError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(BridgeClient { config, agent })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    fn attempt(&self, endpoint: &str, body: &Value) -> Result<Value, BridgeError> {
        let mut req = self.agent.post(endpoint);
        if let Some(var) = &self.config.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BridgeError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(BridgeError::Unavailable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(BridgeError::Protocol(format!("HTTP {status}")));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BridgeError::Unavailable(e.to_string()))?;
        if text.trim().is_empty() {
            return Err(BridgeError::Protocol("empty response body".into()));
        }
        let env: Envelope =
            serde_json::from_str(&text).map_err(|e| BridgeError::Protocol(format!("malformed response: {e}")))?;
        match (env.ok, env.result, env.error) {
            (true, Some(result), _) => Ok(result),
            (true, None, _) => Err(BridgeError::Protocol("`ok` response without `result`".into())),
            (false, _, error) => Err(BridgeError::Protocol(format!(
                "service reported an error: {}",
                error.unwrap_or_else(|| "unspecified".into())
            ))),
        }
    }

    /// Sends `{capability, payload}`; transport failures are retried after
    /// `timeout_ms * attempt` milliseconds.
    pub fn call(&self, cap: Capability, input: Value) -> Result<Value, BridgeError> {
        if !self.config.enabled(cap) {
            return Err(BridgeError::Disabled(cap));
        }
        let endpoint = self.config.endpoint.as_deref().expect("validated: capabilities imply endpoint");
        let body = json!({
            "capability": cap,
            "payload": { "system": prompt(cap), "input": input },
        });
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(endpoint, &body) {
                Err(BridgeError::Unavailable(reason)) if attempt <= self.config.retries => {
                    log::warn!("{cap} request failed ({reason}); retry {attempt}");
                    thread::sleep(Duration::from_millis(self.config.timeout_ms * attempt as u64));
                }
                other => return other,
            }
        }
    }

    /// Asks the remote model for job fields. Unknown keys are ignored; every
    /// known key is re-validated.
    pub fn remote_extract(&self, text: &str) -> Result<PartialJobSpec, BridgeError> {
        let result = self.call(Capability::Extract, Value::String(text.to_string()))?;
        let Value::Object(fields) = result else {
            return Err(BridgeError::Protocol("extract result is not an object".into()));
        };
        let mut p = PartialJobSpec::default();
        for (key, value) in &fields {
            let text = match value {
                Value::Null => continue,
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                other => {
                    return Err(BridgeError::Protocol(format!("field `{key}` has non-scalar value {other}")))
                }
            };
            match p.set_field(key, &text) {
                Ok(()) => {}
                Err(crate::intent::IntentError::InvalidField { field: "name", .. }) => {
                    log::debug!("ignoring unknown extract key `{key}`");
                }
                Err(e) => return Err(BridgeError::Protocol(format!("field `{key}`: {e}"))),
            }
        }
        let dropped = p.sanitize();
        if !dropped.is_empty() {
            return Err(BridgeError::Protocol(format!("invalid values for {}", dropped.join(", "))));
        }
        Ok(p)
    }

    /// Free-text repair proposals, in the order given.
    pub fn remote_repair(&self, ctx: &RepairContext) -> Result<Vec<String>, BridgeError> {
        let input = serde_json::to_value(ctx).expect("repair context serializes");
        match self.call(Capability::Repair, input)? {
            Value::Array(items) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(BridgeError::Protocol(format!("proposal {other} is not a string"))),
                })
                .collect(),
            _ => Err(BridgeError::Protocol("repair result is not an array".into())),
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, BridgeError> {
        match self.call(Capability::Embed, Value::String(text.to_string()))? {
            Value::Array(items) => items
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| BridgeError::Protocol("embedding holds a non-number".into())))
                .collect(),
            _ => Err(BridgeError::Protocol("embed result is not an array".into())),
        }
    }
}

impl Embedder for BridgeClient {
    fn embed(&self, text: &str) -> Option<Vec<f64>> {
        if !self.config.enabled(Capability::Embed) {
            return None;
        }
        BridgeClient::embed(self, text)
            .inspect_err(|e| log::warn!("embedding fell back to word overlap: {e}"))
            .ok()
    }
}

impl RemoteRepair for BridgeClient {
    fn remote_repair(&self, ctx: &RepairContext) -> Vec<String> {
        if !self.config.enabled(Capability::Repair) {
            return Vec::new();
        }
        BridgeClient::remote_repair(self, ctx)
            .inspect_err(|e| log::warn!("remote repair unavailable: {e}"))
            .unwrap_or_default()
    }
}

/// Remote extraction with the rule-based extractor behind it.
pub struct BridgeExtractor<'a> {
    pub client: &'a BridgeClient,
    pub fallback: RuleExtractor,
}

impl Extractor for BridgeExtractor<'_> {
    fn extract(&self, text: &str) -> PartialJobSpec {
        if !self.client.config.enabled(Capability::Extract) {
            return self.fallback.extract(text);
        }
        match self.client.remote_extract(text) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("remote extraction failed, using rules: {e}");
                self.fallback.extract(text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    use crate::debug::parse_proposal;
    use crate::kinds::Launcher;
    use crate::registry::ProfileSet;

    /// Serves the given bodies, one connection each, and reports each request body.
    fn stub(responses: Vec<(u16, &'static str)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((auth, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, rx)
    }

    fn client(url: &str, caps: &[Capability], retries: u32) -> BridgeClient {
        BridgeClient::new(BridgeConfig {
            endpoint: Some(url.into()),
            api_key_env: Some("CLUSTERPORT_TEST_KEY".into()),
            timeout_ms: 200,
            retries,
            capabilities: caps.iter().copied().collect(),
        })
        .unwrap()
    }

    fn dead_endpoint() -> String {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", l.local_addr().unwrap());
        drop(l);
        url
    }

    #[test]
    fn config_validation() {
        assert!(BridgeConfig::default().validate().is_ok());
        let mut c = BridgeConfig::default();
        c.capabilities.insert(Capability::Extract);
        assert!(matches!(c.validate(), Err(BridgeError::Config(_))));
        c.endpoint = Some("http://localhost:1".into());
        assert!(c.validate().is_ok());
        c.timeout_ms = 0;
        assert!(c.validate().is_err());
        assert!(load_bridge_config(r#"{"capabilities":["embed"],"endpoint":"http://x"}"#).is_ok());
        assert!(load_bridge_config(r#"{"capabilities":["telepathy"]}"#).is_err());
        assert!(load_bridge_config(r#"{"api_key":"sk-123"}"#).is_err());
    }

    #[test]
    fn remote_extract_validates_fields() {
        let (url, rx) = stub(vec![(
            200,
            r#"{"ok":true,"result":{"cluster":"perlmutter","launcher":"torchrun","total_gpus":8,"nodes":2,"entry_script":"run_image_classification.py","mood":"happy"}}"#,
        )]);
        std::env::set_var("CLUSTERPORT_TEST_KEY", "k-123");
        let p = client(&url, &[Capability::Extract], 0).remote_extract("anything").unwrap();
        assert_eq!(p.cluster.as_deref(), Some("perlmutter"));
        assert_eq!(p.launcher, Some(Launcher::Torchrun));
        assert_eq!((p.nodes, p.total_gpus), (Some(2), Some(8)));
        let (auth, body) = rx.recv().unwrap();
        assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer k-123");
        let req: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(req["capability"], "extract");
        assert_eq!(req["payload"]["input"], "anything");
    }

    #[test]
    fn bad_responses_are_protocol_errors() {
        let (url, _rx) = stub(vec![
            (200, ""),
            (200, r#"{"ok":true,"result":{"nodes":0}}"#),
            (200, r#"{"ok":false,"error":"overloaded"}"#),
            (400, r#"{}"#),
        ]);
        let c = client(&url, &[Capability::Extract], 0);
        for _ in 0..4 {
            assert!(matches!(c.remote_extract("x"), Err(BridgeError::Protocol(_))));
        }
    }

    #[test]
    fn endpoint_down_is_unavailable_and_extractor_falls_back() {
        let c = client(&dead_endpoint(), &[Capability::Extract], 1);
        assert!(matches!(c.remote_extract("x"), Err(BridgeError::Unavailable(_))));
        let ex = BridgeExtractor {
            client: &c,
            fallback: RuleExtractor::new(&ProfileSet::bundled()),
        };
        let p = ex.extract("two nodes on delta");
        assert_eq!((p.nodes, p.cluster.as_deref()), (Some(2), Some("delta")));
    }

    #[test]
    fn retries_after_server_error() {
        let (url, rx) = stub(vec![(503, "busy"), (200, r#"{"ok":true,"result":[1.0,0.5]}"#)]);
        let c = client(&url, &[Capability::Embed], 1);
        assert_eq!(c.embed("t").unwrap(), vec![1.0, 0.5]);
        assert_eq!(rx.try_iter().count(), 2);
    }

    #[test]
    fn disabled_capability_is_refused_without_network() {
        let c = client(&dead_endpoint(), &[], 0);
        assert!(matches!(c.remote_extract("x"), Err(BridgeError::Disabled(Capability::Extract))));
        assert_eq!(Embedder::embed(&c, "x"), None);
    }

    #[test]
    fn repair_proposals_keep_order_and_drop_prose() {
        let (url, _rx) = stub(vec![(
            200,
            r#"{"ok":true,"result":["switch to the latest nightly PyTorch build","reinstall the universe","export TORCH_CUDA_ARCH_LIST=9.0"]}"#,
        )]);
        let c = client(&url, &[Capability::Repair], 0);
        let ctx = RepairContext {
            stderr: "Apex compilation failed".into(),
            script: String::new(),
            spec: Value::Null,
            profile_summary: "vista".into(),
        };
        let proposals = RemoteRepair::remote_repair(&c, &ctx);
        assert_eq!(proposals.len(), 3);
        let actions: Vec<_> = proposals.iter().filter_map(|p| parse_proposal(p)).collect();
        assert_eq!(actions.len(), 2);
        assert_eq!(actions[0].kind(), crate::kinds::ActionKind::PinVersion);
        assert_eq!(actions[1].kind(), crate::kinds::ActionKind::ExportEnv);
    }
}
