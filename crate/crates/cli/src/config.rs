use anyhow::{bail, Context};
use nl2sql_core::embedding::{EmbeddingProviderConfig, ProviderKind};
use nl2sql_core::executor::ExecutionLimits;
use nl2sql_core::generator::{GeneratorConfig, GeneratorKind};
use nl2sql_core::orchestrator::PipelineOptions;
use serde::{Deserialize, Serialize};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub const DEFAULT_ROW_CAP: usize = 500;
pub const ENV_PREFIX: &str = "NL2SQL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub db_dir: PathBuf,
    pub index_dir: PathBuf,
    /// Trained projection head; indexes are built through it when set.
    pub head: Option<PathBuf>,
    pub k: usize,
    pub max_iterations: usize,
    pub timeout_secs: f64,
    /// Rows returned per result by the HTTP service.
    pub row_cap: usize,
    pub workers: usize,
    pub seed: u64,
    pub embedding: EmbeddingProviderConfig,
    pub generator: GeneratorConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            db_dir: "data".into(),
            index_dir: "indexes".into(),
            head: None,
            k: nl2sql_core::retriever::DEFAULT_K,
            max_iterations: nl2sql_core::orchestrator::DEFAULT_MAX_ITERATIONS,
            timeout_secs: 30.0,
            row_cap: DEFAULT_ROW_CAP,
            workers: 4,
            seed: 0,
            embedding: EmbeddingProviderConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `NL2SQL_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        let get = |key: &str| var(&format!("{ENV_PREFIX}{key}"));
        fn num<T: std::str::FromStr>(key: &str, v: String) -> anyhow::Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| anyhow::anyhow!("{ENV_PREFIX}{key}={v}: {e}"))
        }
        if let Some(v) = get("LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("DB_DIR") {
            self.db_dir = v.into();
        }
        if let Some(v) = get("INDEX_DIR") {
            self.index_dir = v.into();
        }
        if let Some(v) = get("HEAD") {
            self.head = Some(v.into());
        }
        if let Some(v) = get("K") {
            self.k = num("K", v)?;
        }
        if let Some(v) = get("MAX_ITERATIONS") {
            self.max_iterations = num("MAX_ITERATIONS", v)?;
        }
        if let Some(v) = get("TIMEOUT_SECS") {
            self.timeout_secs = num("TIMEOUT_SECS", v)?;
        }
        if let Some(v) = get("ROW_CAP") {
            self.row_cap = num("ROW_CAP", v)?;
        }
        if let Some(v) = get("WORKERS") {
            self.workers = num("WORKERS", v)?;
        }
        if let Some(v) = get("SEED") {
            self.seed = num("SEED", v)?;
        }
        if let Some(v) = get("GENERATOR_ENDPOINT") {
            self.generator.kind = GeneratorKind::Remote;
            self.generator.endpoint = Some(v);
        }
        if let Some(v) = get("GENERATOR_MODEL") {
            self.generator.model = Some(v);
        }
        if let Some(v) = get("EMBEDDING_ENDPOINT") {
            self.embedding.kind = ProviderKind::Remote;
            self.embedding.endpoint = Some(v);
        }
        if let Some(v) = get("EMBEDDING_MODEL") {
            self.embedding.model_name = Some(v);
        }
        Ok(())
    }

    /// Checks the fields every subcommand relies on.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.row_cap == 0 || self.workers == 0 {
            bail!("row_cap and workers must be at least 1");
        }
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            bail!("timeout_secs must be positive");
        }
        self.embedding.validate()?;
        Ok(())
    }

    /// [`validate`](Self::validate) plus the directory and address checks of
    /// the service.
    pub fn validate_for_service(&self) -> anyhow::Result<()> {
        self.validate()?;
        for (name, dir) in [("db_dir", &self.db_dir), ("index_dir", &self.index_dir)] {
            if !dir.is_dir() {
                bail!("{name} {} is not a directory", dir.display());
            }
        }
        self.listen_addr()?;
        self.generator.validate()?;
        Ok(())
    }

    pub fn listen_addr(&self) -> anyhow::Result<SocketAddr> {
        self.listen
            .parse()
            .with_context(|| format!("invalid listen address {:?}", self.listen))
    }

    pub fn limits(&self) -> ExecutionLimits {
        ExecutionLimits::with_timeout(Duration::from_secs_f64(self.timeout_secs))
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            k: self.k,
            max_iterations: self.max_iterations,
            limits: self.limits(),
            full_schema: false,
            parallelism: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ServiceConfig::parse(
            r#"
            db_dir = "/tmp/dbs"
            k = 10
            [generator]
            kind = "scripted"
            script = ["SELECT 1"]
            [embedding]
            dim = 128
            "#,
        )
        .unwrap();
        assert_eq!(cfg.k, 10);
        assert_eq!(cfg.embedding.dim, 128);
        assert_eq!(cfg.row_cap, DEFAULT_ROW_CAP);
        assert_eq!(cfg.generator.script, vec!["SELECT 1".to_string()]);
        let again = ServiceConfig::parse(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert!(ServiceConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn environment_overrides_file_values() {
        let env: HashMap<&str, &str> = [
            ("NL2SQL_K", "7"),
            ("NL2SQL_LISTEN", "0.0.0.0:9000"),
            ("NL2SQL_GENERATOR_ENDPOINT", "http://h/v1/chat/completions"),
        ]
        .into();
        let mut cfg = ServiceConfig::default();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string()))
            .unwrap();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.generator.kind, GeneratorKind::Remote);
        let mut bad = ServiceConfig::default();
        assert!(bad
            .apply_env(|k| (k == "NL2SQL_K").then(|| "x".to_string()))
            .is_err());
    }

    #[test]
    fn zero_k_is_rejected() {
        let cfg = ServiceConfig {
            k: 0,
            ..ServiceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
