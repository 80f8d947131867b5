//! Unit-norm embeddings and the providers that produce them.

use crate::error::{Error, Result};
use crate::remote::{self, InFlightLimit, RetryPolicy};
use crate::scalar::{dot, l2_norm, Scalar};
use serde::{Deserialize, Serialize};

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Wraps values that are already unit-norm. Callers outside the crate go
    /// through [`normalize`].
    pub(crate) fn from_unit(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.values, &other.values)
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Scales `raw` to unit L2 norm.
pub fn normalize<T: Scalar>(raw: &[T]) -> Result<EmbeddingVector<T>> {
    if raw.is_empty() {
        return Err(Error::Degenerate("empty vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("vector has non-finite entries".into()));
    }
    let norm = l2_norm(raw);
    if norm == T::zero() || !norm.is_finite() {
        return Err(Error::Degenerate("vector has zero norm".into()));
    }
    Ok(EmbeddingVector {
        values: raw.iter().map(|&v| v / norm).collect(),
    })
}

/// Anything that maps texts to raw (not necessarily normalized) vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the model so stale indexes can be detected.
    fn fingerprint(&self) -> String;

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Embeds and normalizes `texts`, preserving order.
pub fn embed_texts<T: Scalar>(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
) -> Result<Vec<EmbeddingVector<T>>> {
    if texts.is_empty() {
        return Err(Error::Validation("no texts to embed".into()));
    }
    let raw = provider.embed_raw(texts)?;
    if raw.len() != texts.len() {
        return Err(Error::Contract(format!(
            "provider returned {} vectors for {} texts",
            raw.len(),
            texts.len()
        )));
    }
    raw.iter()
        .map(|v| {
            if v.len() != provider.dim() {
                return Err(Error::Contract(format!(
                    "provider returned dimension {} but {} is configured",
                    v.len(),
                    provider.dim()
                )));
            }
            let cast: Vec<T> = v.iter().map(|&x| T::of(x)).collect();
            normalize(&cast)
        })
        .collect()
}

pub fn embed_one<T: Scalar>(
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<EmbeddingVector<T>> {
    let mut v = embed_texts(provider, &[text.to_string()])?;
    Ok(v.remove(0))
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-tokens embedder: each token adds 1 to bucket
/// `fnv1a(token) % dim`. Pure function of the text.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }

    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text) {
            v[self.bucket(&t)] += 1.0;
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hashing-bow-v1/dim={}", self.dim)
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.counts(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Remote,
    DeterministicTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub dim: usize,
    pub batch_size: usize,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::DeterministicTest,
            endpoint: None,
            model_name: None,
            dim: 64,
            batch_size: 32,
            api_key_env: Some("NL2SQL_EMBEDDING_API_KEY".into()),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn deterministic(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation(
                "embedding batch_size must be positive".into(),
            ));
        }
        if self.kind == ProviderKind::Remote
            && (self.endpoint.is_none() || self.model_name.is_none())
        {
            return Err(Error::Validation(
                "remote embedding provider requires endpoint and model_name".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::DeterministicTest => Box::new(HashingEmbedder::new(self.dim)),
            ProviderKind::Remote => Box::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

/// Client for `POST {endpoint}` with body `{model, input}` returning
/// `{data: [{embedding, index?}]}`.
pub struct RemoteEmbedder {
    cfg: EmbeddingProviderConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbeddingProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport {
                retries: 0,
                message: e.to_string(),
            })?;
        let limit = InFlightLimit::new(cfg.max_in_flight);
        Ok(Self { cfg, client, limit })
    }

    fn embed_chunk(&self, chunk: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "input": chunk,
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
            )?
        };
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
            #[serde(default)]
            index: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Resp {
            data: Vec<Item>,
        }
        let mut parsed: Resp = serde_json::from_value(resp)
            .map_err(|e| Error::Contract(format!("embedding response: {e}")))?;
        if parsed.data.len() != chunk.len() {
            return Err(Error::Contract(format!(
                "embedding response has {} items for {} inputs",
                parsed.data.len(),
                chunk.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        for d in &parsed.data {
            if d.embedding.len() != self.cfg.dim {
                return Err(Error::Contract(format!(
                    "remote returned dimension {} but {} is configured",
                    d.embedding.len(),
                    self.cfg.dim
                )));
            }
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn fingerprint(&self) -> String {
        format!(
            "remote/{}/dim={}",
            self.cfg.model_name.as_deref().unwrap_or_default(),
            self.cfg.dim
        )
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size) {
            out.extend(self.embed_chunk(chunk)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remote::testing;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-15 && (v.values()[1] - 0.8).abs() < 1e-15);
        let u = normalize(&[0.0f64, 1.0]).unwrap();
        assert_eq!(u.values(), &[0.0, 1.0]);
        assert!(matches!(
            normalize(&[0.0f64, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            normalize(&[f64::NAN, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn deterministic_embedder_is_pure_and_unit_norm() {
        let p = HashingEmbedder::new(64);
        let texts = vec![
            "How many cards were issued?".to_string(),
            "How many cards were issued?".to_string(),
        ];
        let v: Vec<EmbeddingVector<f64>> = embed_texts(&p, &texts).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((l2_norm(v[0].values()) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn tokenization_splits_punctuation_and_lowercases() {
        let toks: Vec<String> = tokenize("table:Disp\ncolumn:disp_id, TYPE!").collect();
        assert_eq!(toks, ["table", "disp", "column", "disp", "id", "type"]);
    }

    #[test]
    fn disjoint_buckets_give_zero_cosine() {
        let p = HashingEmbedder::new(64);
        let (a, b) = ("salary employee", "city office");
        let ba: Vec<usize> = tokenize(a).map(|t| p.bucket(&t)).collect();
        let bb: Vec<usize> = tokenize(b).map(|t| p.bucket(&t)).collect();
        assert!(ba.iter().all(|x| !bb.contains(x)), "fixture tokens collide");
        let va: EmbeddingVector<f64> = embed_one(&p, a).unwrap();
        let vb: EmbeddingVector<f64> = embed_one(&p, b).unwrap();
        assert_eq!(va.dot(&vb), 0.0);
    }

    #[test]
    fn token_free_text_is_degenerate() {
        let p = HashingEmbedder::new(16);
        assert!(matches!(
            embed_one::<f64>(&p, "?!"),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            embed_texts::<f64>(&p, &[]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn remote_config_requires_endpoint() {
        let cfg = EmbeddingProviderConfig {
            kind: ProviderKind::Remote,
            ..Default::default()
        };
        assert!(cfg.build().is_err());
    }

    fn remote_cfg(url: String, dim: usize, batch_size: usize) -> EmbeddingProviderConfig {
        EmbeddingProviderConfig {
            kind: ProviderKind::Remote,
            endpoint: Some(url),
            model_name: Some("test-embed".into()),
            dim,
            batch_size,
            api_key_env: None,
            max_in_flight: 2,
            retry: RetryPolicy {
                retries: 1,
                base_delay_ms: 1,
            },
        }
    }

    #[test]
    fn remote_dimension_mismatch_is_contract_error() {
        let body = serde_json::json!({"data": [{"embedding": vec![0.5; 1024]}]}).to_string();
        let server = testing::serve(vec![(200, body)]);
        let p = RemoteEmbedder::new(remote_cfg(server.url, 64, 8)).unwrap();
        let err = embed_texts::<f64>(&p, &["x".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn remote_batches_and_reorders_by_index() {
        let first = serde_json::json!({"data": [
            {"embedding": [0.0, 2.0], "index": 1},
            {"embedding": [3.0, 4.0], "index": 0}
        ]})
        .to_string();
        let second = serde_json::json!({"data": [{"embedding": [1.0, 0.0]}]}).to_string();
        let server = testing::serve(vec![(200, first), (200, second)]);
        let requests = server.requests.clone();
        let p = RemoteEmbedder::new(remote_cfg(server.url, 2, 2)).unwrap();
        let texts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let v: Vec<EmbeddingVector<f64>> = embed_texts(&p, &texts).unwrap();
        assert_eq!(v.len(), 3);
        assert!((v[0].values()[0] - 0.6).abs() < 1e-12);
        assert_eq!(v[1].values(), &[0.0, 1.0]);
        let reqs = requests.lock().unwrap();
        assert_eq!(reqs[0]["model"], "test-embed");
        assert_eq!(reqs[0]["input"].as_array().unwrap().len(), 2);
        assert_eq!(reqs[1]["input"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn remote_failure_reports_transport_error() {
        let server = testing::serve(vec![(500, "{}".into()), (500, "{}".into())]);
        let p = RemoteEmbedder::new(remote_cfg(server.url, 2, 2)).unwrap();
        let err = embed_texts::<f64>(&p, &["a".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Transport { retries: 1, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn normalized_vectors_have_unit_norm(raw in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            prop_assume!(raw.iter().any(|&x| x.abs() > 1e-9));
            let v = normalize(&raw).unwrap();
            prop_assert!((l2_norm(v.values()) - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn embedding_preserves_length_and_order(words in proptest::collection::vec("[a-z]{1,8}", 1..10)) {
            let p = HashingEmbedder::new(32);
            let v: Vec<EmbeddingVector<f32>> = embed_texts(&p, &words).unwrap();
            prop_assert_eq!(v.len(), words.len());
            for (w, e) in words.iter().zip(&v) {
                let single: EmbeddingVector<f32> = embed_one(&p, w).unwrap();
                prop_assert_eq!(&single, e);
                prop_assert!(((l2_norm(e.values()) as f64) - 1.0).abs() <= 1e-6);
            }
        }
    }
}
