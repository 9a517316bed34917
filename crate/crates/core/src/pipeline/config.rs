//! Flat `section.key = value` configuration with environment overrides.
//!
//! Every key has a default listed in [`KEYS`]. Relative paths resolve
//! against the directory of the config file. Any key can be overridden by
//! the environment variable `KGSTORY_<SECTION>__<KEY>` in upper case, for
//! example `KGSTORY_DECODE__BEAM_WIDTH=5` or `KGSTORY_SEED=3`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decode::DecodeConfig;
use crate::enrich::EnrichConfig;
use crate::error::{Error, Result};
use crate::neural::ModelConfig;

pub const ENV_PREFIX: &str = "KGSTORY_";

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "seed for initialization and example shuffling"),
    ("paths.lexicon", "lexicon.tsv", "noun / frame / pronoun lexicon (TSV)"),
    (
        "paths.stories",
        "stories.jsonl",
        "image-aligned five-sentence stories (JSONL)",
    ),
    ("paths.mentions", "", "coreference annotations (JSONL); empty for none"),
    ("paths.text_stories", "", "text-only stories (JSONL); empty for none"),
    (
        "paths.features",
        "features.jsonl",
        "object features of the training images (JSONL)",
    ),
    (
        "paths.input_features",
        "",
        "object features to distill at inference; empty reuses paths.features",
    ),
    (
        "paths.kg_visual_genome",
        "",
        "comma-separated scene-graph tuple files (TSV)",
    ),
    ("paths.kg_openie", "", "comma-separated OpenIE tuple files (TSV)"),
    (
        "paths.kg_other",
        "",
        "comma-separated tuple files of other origin (TSV)",
    ),
    ("paths.graph", "graph.json", "knowledge-graph snapshot"),
    ("paths.lm", "lm.json", "term-path language model"),
    ("paths.term_model", "term_model.json", "image-to-term model checkpoint"),
    (
        "paths.story_model",
        "story_model.json",
        "term-to-story model checkpoint",
    ),
    (
        "paths.output_dir",
        "out",
        "directory for stories, term sets and audit files",
    ),
    ("model.d_model", "64", "hidden size of both models"),
    ("model.heads", "2", "attention heads"),
    ("model.layers", "4", "encoder and decoder layers"),
    ("model.d_in", "32", "object feature width"),
    ("model.top_k", "8", "most confident objects kept per image"),
    ("model.ff_dim", "128", "feed-forward width"),
    ("model.learning_rate", "0.001", "Adam learning rate"),
    (
        "model.warmup_steps",
        "100",
        "steps at the full rate before inverse square root decay",
    ),
    ("model.max_len", "128", "longest source or target sequence"),
    ("train.term_epochs", "30", "epochs for the image-to-term model"),
    ("train.story_epochs", "30", "epochs for the story model"),
    (
        "train.text_weight",
        "1",
        "copies of each text-only story in LM and story-model training",
    ),
    ("lm.order", "3", "n-gram order"),
    ("lm.discount", "0.75", "absolute discount"),
    ("decode.beam_width", "3", "beam width for both decoders"),
    (
        "decode.alpha",
        "20",
        "penalty for repeating a word of the current sentence",
    ),
    (
        "decode.gamma",
        "5",
        "penalty scale for words of earlier sentences, divided by story length",
    ),
    (
        "decode.term_penalty",
        "1e19",
        "penalty for repeating a term of the same image",
    ),
    ("decode.max_len", "100", "story decoding step limit"),
    ("decode.max_terms", "8", "term decoding step limit per image"),
    ("decode.sentence_end", ".", "token that closes a sentence"),
    (
        "enrich.enabled",
        "true",
        "false skips the knowledge graph and keeps the baseline path",
    ),
    (
        "enrich.allow_two_hop",
        "auto",
        "true, false, or auto (on unless every tuple is from OpenIE)",
    ),
    (
        "enrich.max_insertions",
        "1",
        "most inserted segments per candidate path",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub lexicon: PathBuf,
    pub stories: PathBuf,
    pub mentions: Option<PathBuf>,
    pub text_stories: Option<PathBuf>,
    pub features: PathBuf,
    pub input_features: Option<PathBuf>,
    pub kg_visual_genome: Vec<PathBuf>,
    pub kg_openie: Vec<PathBuf>,
    pub kg_other: Vec<PathBuf>,
    pub graph: PathBuf,
    pub lm: PathBuf,
    pub term_model: PathBuf,
    pub story_model: PathBuf,
    pub output_dir: PathBuf,
}

impl Paths {
    /// Features used at inference.
    pub fn inference_features(&self) -> &Path {
        self.input_features.as_deref().unwrap_or(&self.features)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub term_epochs: usize,
    pub story_epochs: usize,
    pub text_weight: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSettings {
    pub order: usize,
    pub discount: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub lm: LmSettings,
    pub decode: DecodeConfig,
    pub max_terms: usize,
    pub enrich: EnrichConfig,
    pub enrich_enabled: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Environment variable that overrides `key`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "__").to_ascii_uppercase())
}

impl PipelineConfig {
    fn placeholder() -> Self {
        let empty = PathBuf::new;
        PipelineConfig {
            seed: 0,
            paths: Paths {
                lexicon: empty(),
                stories: empty(),
                mentions: None,
                text_stories: None,
                features: empty(),
                input_features: None,
                kg_visual_genome: Vec::new(),
                kg_openie: Vec::new(),
                kg_other: Vec::new(),
                graph: empty(),
                lm: empty(),
                term_model: empty(),
                story_model: empty(),
                output_dir: empty(),
            },
            model: ModelConfig::default(),
            train: TrainSettings {
                term_epochs: 0,
                story_epochs: 0,
                text_weight: 0,
            },
            lm: LmSettings {
                order: 0,
                discount: 0.0,
            },
            decode: DecodeConfig::default(),
            max_terms: 0,
            enrich: EnrichConfig::default(),
            enrich_enabled: true,
        }
    }

    /// Defaults with relative paths resolved against `base`.
    pub fn defaults(base: &Path) -> Self {
        let mut cfg = Self::placeholder();
        for (key, value, _) in KEYS {
            cfg.set(key, value, base).expect("built-in defaults parse");
        }
        cfg
    }

    /// Parses `text` over the defaults, then applies overrides found by
    /// `env` (called with each key's variable name).
    pub fn from_sources(text: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let cfg = Self::parse(text, base, env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`Self::from_sources`] without the final validation, for callers
    /// that layer further overrides on top.
    pub fn parse(text: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = Self::defaults(base);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", idx + 1)))?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::config(format!("line {}: {e}", idx + 1)))?;
        }
        for (key, _, _) in KEYS {
            let name = env_name(key);
            if let Some(value) = env(&name) {
                cfg.set(key, value.trim(), base)
                    .map_err(|e| Error::config(format!("{name}: {e}")))?;
            }
        }
        Ok(cfg)
    }

    /// Reads a config file and the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_sources(&text, base, |name| std::env::var(name).ok())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = |v: &str| -> PathBuf { base.join(v) };
        let opt_path = |v: &str| -> Option<PathBuf> { (!v.is_empty()).then(|| base.join(v)) };
        let path_list = |v: &str| -> Vec<PathBuf> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| base.join(s))
                .collect()
        };
        let p = &mut self.paths;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "paths.lexicon" => p.lexicon = path(value),
            "paths.stories" => p.stories = path(value),
            "paths.mentions" => p.mentions = opt_path(value),
            "paths.text_stories" => p.text_stories = opt_path(value),
            "paths.features" => p.features = path(value),
            "paths.input_features" => p.input_features = opt_path(value),
            "paths.kg_visual_genome" => p.kg_visual_genome = path_list(value),
            "paths.kg_openie" => p.kg_openie = path_list(value),
            "paths.kg_other" => p.kg_other = path_list(value),
            "paths.graph" => p.graph = path(value),
            "paths.lm" => p.lm = path(value),
            "paths.term_model" => p.term_model = path(value),
            "paths.story_model" => p.story_model = path(value),
            "paths.output_dir" => p.output_dir = path(value),
            "model.d_model" => self.model.d_model = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.d_in" => self.model.d_in = parse(key, value)?,
            "model.top_k" => self.model.top_k = parse(key, value)?,
            "model.ff_dim" => self.model.ff_dim = parse(key, value)?,
            "model.learning_rate" => self.model.learning_rate = parse(key, value)?,
            "model.warmup_steps" => self.model.warmup_steps = parse(key, value)?,
            "model.max_len" => self.model.max_len = parse(key, value)?,
            "train.term_epochs" => self.train.term_epochs = parse(key, value)?,
            "train.story_epochs" => self.train.story_epochs = parse(key, value)?,
            "train.text_weight" => self.train.text_weight = parse(key, value)?,
            "lm.order" => self.lm.order = parse(key, value)?,
            "lm.discount" => self.lm.discount = parse(key, value)?,
            "decode.beam_width" => self.decode.beam_width = parse(key, value)?,
            "decode.alpha" => self.decode.alpha = parse(key, value)?,
            "decode.gamma" => self.decode.gamma = parse(key, value)?,
            "decode.term_penalty" => self.decode.term_penalty = parse(key, value)?,
            "decode.max_len" => self.decode.max_len = parse(key, value)?,
            "decode.max_terms" => self.max_terms = parse(key, value)?,
            "decode.sentence_end" => self.decode.sentence_end = value.to_string(),
            "enrich.enabled" => self.enrich_enabled = parse_bool(key, value)?,
            "enrich.allow_two_hop" => {
                self.enrich.allow_two_hop = match value.to_ascii_lowercase().as_str() {
                    "auto" => None,
                    _ => Some(parse_bool(key, value)?),
                }
            }
            "enrich.max_insertions" => self.enrich.max_insertions = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        self.model.seed = self.seed;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decode.validate()?;
        if self.max_terms == 0 {
            return Err(Error::config("decode.max_terms must be at least 1"));
        }
        if self.lm.order < 2 {
            return Err(Error::config("lm.order must be at least 2"));
        }
        if !(self.lm.discount > 0.0 && self.lm.discount < 1.0) {
            return Err(Error::config("lm.discount must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Fails with the first of `paths` that does not exist.
    pub fn require(paths: &[&Path]) -> Result<()> {
        match paths.iter().find(|p| !p.exists()) {
            Some(missing) => Err(Error::MissingPath(missing.to_path_buf())),
            None => Ok(()),
        }
    }

    /// A config file listing every key at its default, with descriptions.
    pub fn default_file_text() -> String {
        let mut out = String::new();
        for (key, value, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_documented_and_valid() {
        let cfg = PipelineConfig::from_sources("", Path::new("/base"), no_env).unwrap();
        assert_eq!(cfg.decode.beam_width, 3);
        assert_eq!(cfg.decode.alpha, 20.0);
        assert_eq!(cfg.decode.gamma, 5.0);
        assert_eq!(cfg.decode.term_penalty, 1e19);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.paths.graph, PathBuf::from("/base/graph.json"));
        assert_eq!(cfg.paths.mentions, None);
        assert_eq!(cfg.enrich.allow_two_hop, None);
        let text = PipelineConfig::default_file_text();
        let again = PipelineConfig::from_sources(&text, Path::new("/base"), no_env).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn file_values_and_env_overrides() {
        let text =
            "# comment\nseed = 3\ndecode.beam_width=5\npaths.kg_openie = a.tsv, b.tsv\nenrich.allow_two_hop = false\n";
        let env = |name: &str| (name == "KGSTORY_DECODE__BEAM_WIDTH").then(|| "7".to_string());
        let cfg = PipelineConfig::from_sources(text, Path::new("d"), env).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.seed, 3);
        assert_eq!(cfg.decode.beam_width, 7);
        assert_eq!(
            cfg.paths.kg_openie,
            vec![PathBuf::from("d/a.tsv"), PathBuf::from("d/b.tsv")]
        );
        assert_eq!(cfg.enrich.allow_two_hop, Some(false));
        assert_eq!(env_name("decode.beam_width"), "KGSTORY_DECODE__BEAM_WIDTH");
    }

    #[test]
    fn errors_are_config_errors() {
        for text in [
            "nonsense",
            "bogus.key = 1",
            "decode.beam_width = x",
            "decode.beam_width = 0",
            "model.heads = 3",
        ] {
            let err = PipelineConfig::from_sources(text, Path::new("."), no_env).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        let err = PipelineConfig::require(&[Path::new("/definitely/not/here")]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
