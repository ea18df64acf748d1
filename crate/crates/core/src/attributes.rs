//! Attribute prompts: the LLM instruction, reply parsing, a fixture cache, and
//! assembly of the foreground/background text embedding set.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{LdagError, Result};
use crate::providers::{TextEmbedding, TextRole, ToyEncoders};

pub const ENV_URL: &str = "LDAG_LLM_URL";
pub const ENV_MODEL: &str = "LDAG_LLM_MODEL";
pub const ENV_KEY: &str = "LDAG_LLM_KEY";
pub const DEFAULT_RETRIES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub dataset_name: String,
    pub classes: Vec<String>,
}

impl ClassCatalog {
    pub fn new(dataset_name: impl Into<String>, classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(LdagError::Contract(format!(
                "a catalog needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(LdagError::Contract(format!("class {i} has an empty name")));
            }
            if classes[..i].contains(c) {
                return Err(LdagError::Contract(format!("duplicate class name {c:?}")));
            }
        }
        Ok(Self {
            dataset_name: dataset_name.into(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| LdagError::NotFound(format!("class {class:?} is not in {}", self.dataset_name)))
    }
}

/// The mandated opening of every attribute description.
pub fn attribute_prefix(class: &str) -> String {
    format!("a clean origami {class}. It ")
}

pub fn template_prompt(class: &str) -> String {
    format!("a photo of {class}")
}

pub fn background_prompt(class: &str) -> String {
    format!("a photo without {class}")
}

/// The question posed to the language model for `target`.
pub fn build_llm_instruction(catalog: &ClassCatalog, target: &str, n: usize) -> Result<String> {
    catalog.index_of(target)?;
    if n == 0 {
        return Err(LdagError::Contract("cannot request zero descriptions".into()));
    }
    let noun = if n == 1 { "description" } else { "descriptions" };
    Ok(format!(
        "There are {m} classes in a dataset: {list}, List {n} {noun} with key properties to \
         describe the {c} in terms of appearance, color, shape, size, or material, etc. These \
         descriptions will help visually distinguish the {c} from other classes in the dataset. \
         Each description should follow the format: 'a clean origami {c}. It + descriptive \
         contexts'. Do not have any content output other than the given format. And try not to \
         include any other class names in the description.",
        m = catalog.len(),
        list = catalog.classes.join(", "),
        c = target,
    ))
}

fn strip_list_marker(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        for marker in ["-", "*", "•", "–"] {
            if let Some(rest) = s.strip_prefix(marker) {
                s = rest.trim_start();
            }
        }
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                s = rest.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

const QUOTES: &[char] = &['"', '\'', '`', '“', '”', '‘', '’'];

/// Keep the reply lines that carry the mandated prefix, in order, with list
/// markers and wrapping quotes removed.
pub fn parse_reply(reply: &str, class: &str) -> Vec<String> {
    let prefix = attribute_prefix(class).to_lowercase();
    reply
        .lines()
        .filter_map(|line| {
            let cleaned = strip_list_marker(line.trim())
                .trim_matches(QUOTES)
                .trim();
            let lower = cleaned.to_lowercase();
            // the prefix ends in a space, so a description must follow it
            (lower.starts_with(&prefix) && lower.len() > prefix.len()).then(|| cleaned.to_owned())
        })
        .collect()
}

/// Where an attribute list came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "id")]
pub enum Provenance {
    LlmEndpoint(String),
    FixtureFile(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::LlmEndpoint(m) => write!(f, "llm:{m}"),
            Provenance::FixtureFile(p) => write!(f, "fixture:{p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatEndpointConfig {
    pub url: String,
    pub model: String,
    pub key: Option<String>,
    pub retries: usize,
}

impl ChatEndpointConfig {
    /// Reads `LDAG_LLM_URL`, `LDAG_LLM_MODEL` and (optionally) `LDAG_LLM_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|s| !s.is_empty())?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into());
        Some(Self {
            url,
            model,
            key: std::env::var(ENV_KEY).ok().filter(|s| !s.is_empty()),
            retries: DEFAULT_RETRIES,
        })
    }
}

/// A chat-completion service that answers a single user message.
pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, instruction: &str) -> Result<String>;
}

/// JSON-over-HTTP chat completion: `{model, messages: [{role, content}]}` in,
/// `{choices: [{message: {content}}]}` out.
pub struct HttpChat {
    config: ChatEndpointConfig,
    agent: ureq::Agent,
}

impl HttpChat {
    pub fn new(config: ChatEndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self { config, agent }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

impl ChatBackend for HttpChat {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, instruction: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: instruction,
            }],
        };
        let mut req = self
            .agent
            .post(&self.config.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| LdagError::Transport(format!("{}: {e}", self.config.url)))?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| LdagError::Transport(format!("unreadable chat response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LdagError::Transport("chat response has no choices".into()))
    }
}

/// Ask `backend` for `n` descriptions of `class`, re-asking when the reply has
/// too few conforming lines.
pub fn fetch_attributes(
    instruction: &str,
    class: &str,
    n: usize,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<Vec<String>> {
    let attempts = retries.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        last = backend.complete(instruction)?;
        let mut lines = parse_reply(&last, class);
        if lines.len() >= n {
            lines.truncate(n);
            return Ok(lines);
        }
    }
    Err(LdagError::Protocol {
        attempts,
        message: format!("reply never contained {n} lines starting with {:?}", attribute_prefix(class)),
        raw_reply: last,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeFixture {
    pub dataset: String,
    pub class: String,
    pub n: usize,
    pub model: String,
    pub prompts: Vec<String>,
}

/// On-disk fixture store keyed by `(dataset, class, n, model)`.
#[derive(Clone, Debug)]
pub struct FixtureCache {
    dir: PathBuf,
}

fn sanitize(part: &str) -> String {
    part.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

impl FixtureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, dataset: &str, class: &str, n: usize, model: &str) -> PathBuf {
        self.dir.join(format!(
            "{}__{}__n{n}__{}.json",
            sanitize(dataset),
            sanitize(class),
            sanitize(model)
        ))
    }

    pub fn load(&self, dataset: &str, class: &str, n: usize, model: &str) -> Result<Option<AttributeFixture>> {
        let path = self.path_for(dataset, class, n, model);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LdagError::io(path, e)),
        }
    }

    /// Write-then-rename so concurrent readers never observe a partial file.
    pub fn store(&self, fixture: &AttributeFixture) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| LdagError::io(&self.dir, e))?;
        let path = self.path_for(&fixture.dataset, &fixture.class, fixture.n, &fixture.model);
        let tmp = path.with_extension(format!("json.tmp{}", std::process::id()));
        let bytes = serde_json::to_vec_pretty(fixture)?;
        fs::write(&tmp, bytes).map_err(|e| LdagError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| LdagError::io(&path, e))?;
        Ok(path)
    }
}

/// Resolves attribute lists from the fixture cache, falling back to a live
/// endpoint unless offline.
pub struct AttributeSource {
    pub cache: FixtureCache,
    pub model: String,
    pub backend: Option<Box<dyn ChatBackend>>,
    pub offline: bool,
    pub retries: usize,
}

impl AttributeSource {
    pub fn offline(cache: FixtureCache, model: impl Into<String>) -> Self {
        Self {
            cache,
            model: model.into(),
            backend: None,
            offline: true,
            retries: DEFAULT_RETRIES,
        }
    }

    pub fn fetch(&self, catalog: &ClassCatalog, class: &str, n: usize) -> Result<(Vec<String>, Provenance)> {
        catalog.index_of(class)?;
        if n == 0 {
            return Ok((Vec::new(), Provenance::FixtureFile("none".into())));
        }
        let dataset = &catalog.dataset_name;
        if let Some(fixture) = self.cache.load(dataset, class, n, &self.model)? {
            if fixture.prompts.len() != n {
                return Err(LdagError::Contract(format!(
                    "fixture for {class} promises n={n} but holds {} prompts",
                    fixture.prompts.len()
                )));
            }
            let path = self.cache.path_for(dataset, class, n, &self.model);
            return Ok((fixture.prompts, Provenance::FixtureFile(path.display().to_string())));
        }
        let backend = match (&self.backend, self.offline) {
            (Some(b), false) => b,
            _ => {
                return Err(LdagError::Transport(format!(
                    "no fixture for ({dataset}, {class}, n={n}, {}) and no live endpoint",
                    self.model
                )))
            }
        };
        let instruction = build_llm_instruction(catalog, class, n)?;
        let prompts = fetch_attributes(&instruction, class, n, backend.as_ref(), self.retries)?;
        self.cache.store(&AttributeFixture {
            dataset: dataset.clone(),
            class: class.to_owned(),
            n,
            model: backend.model_id().to_owned(),
            prompts: prompts.clone(),
        })?;
        Ok((prompts, Provenance::LlmEndpoint(backend.model_id().to_owned())))
    }
}

/// Anything that turns a prompt into an embedding.
pub trait TextEncoder {
    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding>;
}

impl TextEncoder for ToyEncoders {
    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.encode_text(prompt)
    }
}

/// n attribute prompts plus the template, and the background prompt, with embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSet {
    pub class_name: String,
    pub attribute_prompts: Vec<String>,
    pub template_prompt: String,
    pub background_prompt: String,
    /// `[attr_1, ..., attr_n, template]`.
    pub foreground: Vec<TextEmbedding>,
    pub background: TextEmbedding,
    pub provenance: Provenance,
}

impl AttributeSet {
    /// Number of attribute descriptions (excluding the template).
    pub fn n(&self) -> usize {
        self.attribute_prompts.len()
    }

    pub fn text_dim(&self) -> usize {
        self.background.dim()
    }

    /// Build from precomputed embeddings, e.g. imported text features.
    pub fn from_embeddings(
        class: &str,
        attributes: Vec<TextEmbedding>,
        template: TextEmbedding,
        background: TextEmbedding,
        provenance: Provenance,
    ) -> Result<Self> {
        let dim = background.dim();
        if attributes.iter().chain([&template]).any(|e| e.dim() != dim) {
            return Err(LdagError::Dimension("text embeddings disagree in width".into()));
        }
        let attribute_prompts = attributes.iter().map(|e| e.prompt.clone()).collect();
        let mut foreground: Vec<TextEmbedding> = attributes
            .into_iter()
            .map(|e| e.with_role(TextRole::ForegroundAttribute))
            .collect();
        let template_prompt = template.prompt.clone();
        foreground.push(template.with_role(TextRole::ForegroundTemplate));
        Ok(Self {
            class_name: class.to_owned(),
            attribute_prompts,
            template_prompt,
            background_prompt: background.prompt.clone(),
            foreground,
            background: background.with_role(TextRole::Background),
            provenance,
        })
    }
}

/// Encode attribute prompts, the fixed template and the background prompt.
pub fn assemble(
    attribute_prompts: &[String],
    class: &str,
    encoder: &dyn TextEncoder,
    provenance: Provenance,
) -> Result<AttributeSet> {
    let prefix = attribute_prefix(class).to_lowercase();
    if let Some(bad) = attribute_prompts
        .iter()
        .find(|p| !p.to_lowercase().starts_with(&prefix))
    {
        return Err(LdagError::Contract(format!(
            "attribute prompt {bad:?} does not start with {prefix:?}"
        )));
    }
    let attributes = attribute_prompts
        .iter()
        .map(|p| encoder.encode_text(p))
        .collect::<Result<Vec<_>>>()?;
    let template = encoder.encode_text(&template_prompt(class))?;
    let background = encoder.encode_text(&background_prompt(class))?;
    AttributeSet::from_embeddings(class, attributes, template, background, provenance)
}
