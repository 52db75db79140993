//! TOML run configuration. One structured file plus flag overrides;
//! secrets never live in the file, only the *name* of an environment
//! variable holding the API key.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use qpaug::embed::{EmbeddingProvider, HttpEmbedder, MockEmbedder, PrecomputedEmbedder};
use qpaug::llm::{HttpBackend, LlmBackend, MockLlm};
use qpaug::pipeline::PipelineMode;
use qpaug::prompts::Prompts;

fn default_k_total() -> usize {
    10
}

fn default_max_parallel() -> usize {
    8
}

fn default_gen_max_tokens() -> u32 {
    512
}

fn default_answer_max_tokens() -> u32 {
    64
}

fn default_dim() -> usize {
    64
}

fn default_batch_size() -> usize {
    64
}

fn default_unit_norm() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<String>,
    #[serde(default = "default_k_total")]
    pub k_total: usize,
    pub dataset_path: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    /// defaults to `{corpus_dir}/index`
    pub index_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub seed: u64,
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    /// "mock" or "http"
    #[serde(default = "LlmConfig::default_backend")]
    pub backend: String,
    pub endpoint: Option<String>,
    #[serde(default = "LlmConfig::default_model")]
    pub model: String,
    /// name of the environment variable holding the key
    pub api_key_env: Option<String>,
    pub mock_script: Option<PathBuf>,
    #[serde(default = "default_gen_max_tokens")]
    pub gen_max_tokens: u32,
    #[serde(default = "default_answer_max_tokens")]
    pub answer_max_tokens: u32,
}

impl LlmConfig {
    fn default_backend() -> String {
        "mock".into()
    }

    fn default_model() -> String {
        "mock-model".into()
    }
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: Self::default_backend(),
            endpoint: None,
            model: Self::default_model(),
            api_key_env: None,
            mock_script: None,
            gen_max_tokens: default_gen_max_tokens(),
            answer_max_tokens: default_answer_max_tokens(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    /// "mock", "http", or "precomputed"
    #[serde(default = "EmbedderConfig::default_kind")]
    pub kind: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    /// query-vector file for kind = "precomputed"
    pub vectors_file: Option<PathBuf>,
    #[serde(default = "default_unit_norm")]
    pub unit_norm: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl EmbedderConfig {
    fn default_kind() -> String {
        "mock".into()
    }
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: Self::default_kind(),
            dim: default_dim(),
            model: None,
            endpoint: None,
            api_key_env: None,
            vectors_file: None,
            unit_norm: default_unit_norm(),
            batch_size: default_batch_size(),
        }
    }
}

/// Flag overrides shared by most subcommands.
#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML config file
    #[arg(long)]
    pub config: PathBuf,
    /// pipeline mode (overrides the config)
    #[arg(long)]
    pub mode: Option<String>,
    /// total passage budget (overrides the config)
    #[arg(long)]
    pub k: Option<usize>,
    /// completion cache directory (overrides the config)
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// mock backend script file (overrides the config)
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let text = std::fs::read_to_string(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", self.config.display()))?;
        if let Some(mode) = &self.mode {
            cfg.mode = Some(mode.clone());
        }
        if let Some(k) = self.k {
            cfg.k_total = k;
        }
        if let Some(dir) = &self.cache_dir {
            cfg.cache_dir = Some(dir.clone());
        }
        if let Some(script) = &self.mock_script {
            cfg.llm.mock_script = Some(script.clone());
        }
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn mode(&self) -> Result<PipelineMode> {
        let name = self
            .mode
            .as_deref()
            .context("mode not set (config `mode` or --mode)")?;
        name.parse().map_err(|e: String| anyhow::anyhow!(e))
    }

    pub fn corpus_dir(&self) -> Result<&Path> {
        self.corpus_dir
            .as_deref()
            .context("corpus_dir not set in config")
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset_path
            .as_deref()
            .context("dataset_path not set in config")
    }

    pub fn index_dir(&self) -> Result<PathBuf> {
        match &self.index_dir {
            Some(dir) => Ok(dir.clone()),
            None => Ok(self.corpus_dir()?.join("index")),
        }
    }

    pub fn passages_path(&self) -> Result<PathBuf> {
        Ok(self.corpus_dir()?.join("passages.jsonl"))
    }

    pub fn embeddings_path(&self) -> Result<PathBuf> {
        Ok(self.corpus_dir()?.join("embeddings.qpve"))
    }

    pub fn prompts(&self) -> Result<Prompts> {
        match &self.template_dir {
            Some(dir) => Ok(Prompts::from_dir(dir)?),
            None => Ok(Prompts::default()),
        }
    }

    pub fn llm_backend(&self) -> Result<Arc<dyn LlmBackend>> {
        match self.llm.backend.as_str() {
            "mock" => {
                let script = self.llm.mock_script.as_deref().context(
                    "mock backend needs llm.mock_script or --mock-script",
                )?;
                Ok(Arc::new(MockLlm::from_script_file(script)?))
            }
            "http" => {
                let endpoint = self
                    .llm
                    .endpoint
                    .as_deref()
                    .context("llm.endpoint required for the http backend")?;
                let key = self.read_key(self.llm.api_key_env.as_deref())?;
                Ok(Arc::new(HttpBackend::new(endpoint, key)))
            }
            other => bail!("unknown llm.backend `{other}` (expected mock or http)"),
        }
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        match self.embedder.kind.as_str() {
            "mock" => Ok(Arc::new(MockEmbedder::new(
                self.embedder.dim,
                self.seed,
                self.embedder.unit_norm,
            ))),
            "http" => {
                let endpoint = self
                    .embedder
                    .endpoint
                    .as_deref()
                    .context("embedder.endpoint required for the http embedder")?;
                let model = self
                    .embedder
                    .model
                    .as_deref()
                    .context("embedder.model required for the http embedder")?;
                let key = self.read_key(self.embedder.api_key_env.as_deref())?;
                Ok(Arc::new(HttpEmbedder::new(
                    endpoint,
                    model,
                    self.embedder.dim,
                    self.embedder.batch_size,
                    key,
                )))
            }
            "precomputed" => {
                let file = self.embedder.vectors_file.as_deref().context(
                    "embedder.vectors_file required for the precomputed embedder",
                )?;
                Ok(Arc::new(PrecomputedEmbedder::from_qpve(file)?))
            }
            other => bail!(
                "unknown embedder.kind `{other}` (expected mock, http, or precomputed)"
            ),
        }
    }

    fn read_key(&self, var: Option<&str>) -> Result<Option<String>> {
        match var {
            None => Ok(None),
            Some(name) => match std::env::var(name) {
                Ok(v) => Ok(Some(v)),
                Err(_) => bail!("api key variable {name} is not set"),
            },
        }
    }
}
