use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use kgqa::agent::AgentConfig;
use kgqa::eval::{config_digest, content_digest, EvalConfig};
use kgqa::llm::{HttpConfig, PromptSet, TemplateName, DEFAULT_CONTEXT_BUDGET};

pub const DEFAULT_SEED: u64 = 42;

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub graph: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub drop_probs: Vec<f64>,
    pub seed: u64,
    pub limit: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            graph: None,
            dataset: None,
            drop_probs: vec![0.2, 0.4, 0.6, 0.8],
            seed: DEFAULT_SEED,
            limit: None,
            out_dir: PathBuf::from("ikg"),
        }
    }
}

impl BuildConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), read_toml)
    }

    pub fn validate(&self) -> Result<()> {
        if self.drop_probs.is_empty() {
            bail!("no drop probabilities given");
        }
        if let Some(p) = self.drop_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            bail!("drop probability {p} is outside [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Scripted { script: Option<PathBuf> },
    Http(HttpConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted { script: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Row name in report tables.
    pub label: String,
    pub graph: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub droplist: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub prompts_dir: Option<PathBuf>,
    pub seed: u64,
    /// Run only a seeded subset of this many samples.
    pub limit: Option<usize>,
    pub parallelism: usize,
    pub context_budget: usize,
    pub backend: BackendConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "GoG".into(),
            graph: None,
            dataset: None,
            droplist: None,
            out_dir: PathBuf::from("run"),
            prompts_dir: None,
            seed: DEFAULT_SEED,
            limit: None,
            parallelism: 4,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            backend: BackendConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_digest(&bytes))
}

pub fn prompts_digest(prompts: &PromptSet) -> String {
    let mut text = String::new();
    for name in TemplateName::ALL {
        let t = prompts.get(name);
        text.push_str(&t.instruction);
        for s in &t.shots {
            text.push('\u{0}');
            text.push_str(s);
        }
        text.push('\u{0}');
        text.push_str(&t.live);
        text.push('\u{1}');
    }
    content_digest(text.as_bytes())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), read_toml)
    }

    pub fn graph(&self) -> Result<&Path> {
        self.graph.as_deref().context("no graph given (--graph or `graph` in the config)")
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset.as_deref().context("no dataset given (--dataset or `dataset` in the config)")
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.decoding.validate()?;
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.agent.max_steps == 0 {
            bail!("max_steps must be at least 1");
        }
        if let BackendConfig::Scripted { script: None } = self.backend {
            bail!("the scripted backend needs a script (--script or `backend.script`)");
        }
        self.graph()?;
        self.dataset()?;
        Ok(())
    }

    /// Digest of everything that can change run output: agent and scoring
    /// settings, the seed, the backend identity, the prompts, and the bytes
    /// of every input file. Paths, parallelism and output location are left
    /// out.
    pub fn digest(&self, prompts: &PromptSet) -> Result<String> {
        let backend = match &self.backend {
            BackendConfig::Scripted { script } => {
                let script = script.as_deref().context("scripted backend without a script")?;
                json!({"kind": "scripted", "script": file_digest(script)?})
            }
            BackendConfig::Http(h) => json!({"kind": "http", "endpoint": h.endpoint, "model": h.model}),
        };
        let droplist = self.droplist.as_deref().map(file_digest).transpose()?;
        Ok(config_digest(&json!({
            "agent": self.agent,
            "eval": self.eval,
            "seed": self.seed,
            "limit": self.limit,
            "context_budget": self.context_budget,
            "backend": backend,
            "prompts": prompts_digest(prompts),
            "graph": file_digest(self.graph()?)?,
            "dataset": file_digest(self.dataset()?)?,
            "droplist": droplist,
        })))
    }
}
