//! SQL generation backends.

use crate::error::{Error, Result};
use crate::prompt::prompt_question;
use crate::remote::{self, InFlightLimit, RetryPolicy};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

pub const SYSTEM_LINE: &str = "Generate only the SQL query.";
pub const DEFAULT_CANDIDATES: usize = 8;
pub const SAMPLING_TEMPERATURE: f64 = 0.7;

pub trait SqlGenerator: Send + Sync {
    /// One candidate for `prompt`.
    fn generate(&self, prompt: &str) -> Result<String>;

    /// `n` independent candidates for `prompt`.
    fn sample(&self, prompt: &str, n: usize) -> Result<Vec<String>>;
}

/// Strips a surrounding code fence (with or without a language tag) and
/// whitespace; anything else is returned as is.
pub fn extract_sql(text: &str) -> String {
    let trimmed = text.trim();
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let body = match after.find('\n') {
            Some(nl)
                if after[..nl]
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') =>
            {
                &after[nl + 1..]
            }
            _ => after,
        };
        let body = body.find("```").map_or(body, |end| &body[..end]);
        return body.trim().to_string();
    }
    trimmed.to_string()
}

fn check_prompt(prompt: &str) -> Result<()> {
    if prompt.trim().is_empty() {
        return Err(Error::Validation("generation prompt is empty".into()));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation(
            "candidate count must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Replays a fixed response list in order; running out is an error.
#[derive(Debug)]
pub struct ScriptedGenerator {
    script: Mutex<(VecDeque<String>, usize)>,
}

impl ScriptedGenerator {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Result<Self> {
        let script: VecDeque<String> = script.into_iter().map(Into::into).collect();
        if script.is_empty() {
            return Err(Error::Validation(
                "scripted generator needs at least one response".into(),
            ));
        }
        Ok(Self {
            script: Mutex::new((script, 0)),
        })
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().expect("script lock").0.len()
    }
}

impl SqlGenerator for ScriptedGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        Ok(self.sample(prompt, 1)?.remove(0))
    }

    fn sample(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        check_prompt(prompt)?;
        check_n(n)?;
        let mut guard = self.script.lock().expect("script lock");
        let (queue, consumed) = &mut *guard;
        if queue.len() < n {
            return Err(Error::ScriptExhausted {
                consumed: *consumed,
            });
        }
        *consumed += n;
        Ok(queue.drain(..n).map(|s| extract_sql(&s)).collect())
    }
}

/// One script per question, selected by the question text of the prompt, so
/// concurrent questions cannot consume each other's responses.
#[derive(Debug)]
pub struct KeyedScriptedGenerator {
    scripts: BTreeMap<String, ScriptedGenerator>,
}

impl KeyedScriptedGenerator {
    pub fn new(scripts: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let scripts = scripts
            .into_iter()
            .map(|(k, v)| Ok((k, ScriptedGenerator::new(v)?)))
            .collect::<Result<_>>()?;
        Ok(Self { scripts })
    }

    fn script_for(&self, prompt: &str) -> Result<&ScriptedGenerator> {
        let question = prompt_question(prompt).unwrap_or(prompt);
        self.scripts
            .get(question)
            .ok_or_else(|| Error::Generation(format!("no script for question {question:?}")))
    }
}

impl SqlGenerator for KeyedScriptedGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        self.script_for(prompt)?.generate(prompt)
    }

    fn sample(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        self.script_for(prompt)?.sample(prompt, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Full chat-completions URL.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Decoding temperature for `generate`.
    pub temperature: f64,
    /// Decoding temperature for `sample`.
    pub sample_temperature: f64,
    pub max_tokens: u32,
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Sequential responses.
    pub script: Vec<String>,
    /// Responses per question text; takes precedence over `script`.
    pub scripts: BTreeMap<String, Vec<String>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Scripted,
            endpoint: None,
            model: None,
            temperature: 0.0,
            sample_temperature: SAMPLING_TEMPERATURE,
            max_tokens: 512,
            api_key_env: Some("NL2SQL_GENERATOR_API_KEY".into()),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            script: Vec::new(),
            scripts: BTreeMap::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !(self.sample_temperature >= 0.0) {
            return Err(Error::Validation("temperature must be non-negative".into()));
        }
        match self.kind {
            GeneratorKind::Remote if self.endpoint.is_none() || self.model.is_none() => Err(
                Error::Validation("remote generator requires endpoint and model".into()),
            ),
            GeneratorKind::Scripted if self.script.is_empty() && self.scripts.is_empty() => Err(
                Error::Validation("scripted generator needs a non-empty script".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn SqlGenerator>> {
        self.validate()?;
        Ok(match self.kind {
            GeneratorKind::Remote => Box::new(RemoteGenerator::new(self.clone())?),
            GeneratorKind::Scripted if !self.scripts.is_empty() => {
                Box::new(KeyedScriptedGenerator::new(self.scripts.clone())?)
            }
            GeneratorKind::Scripted => Box::new(ScriptedGenerator::new(self.script.clone())?),
        })
    }
}

/// Chat-completions client.
pub struct RemoteGenerator {
    cfg: GeneratorConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteGenerator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Generation(e.to_string()))?;
        let limit = InFlightLimit::new(cfg.max_in_flight);
        Ok(Self { cfg, client, limit })
    }

    fn complete(&self, prompt: &str, n: usize, temperature: f64) -> Result<Vec<String>> {
        check_prompt(prompt)?;
        check_n(n)?;
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": SYSTEM_LINE},
                {"role": "user", "content": prompt},
            ],
            "temperature": temperature,
            "max_tokens": self.cfg.max_tokens,
            "n": n,
        });
        let key = remote::api_key(self.cfg.api_key_env.as_deref());
        let resp = {
            let _permit = self.limit.acquire();
            remote::post_json(
                &self.client,
                self.cfg.endpoint.as_deref().unwrap_or_default(),
                key.as_deref(),
                &body,
                self.cfg.retry,
            )
            .map_err(|e| Error::Generation(e.to_string()))?
        };
        #[derive(Deserialize)]
        struct Message {
            content: Option<String>,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: Message,
        }
        #[derive(Deserialize)]
        struct Resp {
            choices: Vec<Choice>,
        }
        let parsed: Resp = serde_json::from_value(resp)
            .map_err(|e| Error::Generation(format!("malformed completion: {e}")))?;
        let out: Vec<String> = parsed
            .choices
            .into_iter()
            .map(|c| extract_sql(c.message.content.as_deref().unwrap_or_default()))
            .collect();
        if out.len() != n {
            return Err(Error::Generation(format!(
                "asked for {n} completions, got {}",
                out.len()
            )));
        }
        Ok(out)
    }
}

impl SqlGenerator for RemoteGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        Ok(self.complete(prompt, 1, self.cfg.temperature)?.remove(0))
    }

    fn sample(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        self.complete(prompt, n, self.cfg.sample_temperature)
    }
}
