//! Experiment configuration: a TOML file with a `[paths]` table and optional `[train]`,
//! `[base]`, `[model]` and `[evaluation]` tables. Relative paths resolve against the
//! directory holding the file.

use std::fmt;
use std::path::{Path, PathBuf};

use graphguide::attribution::AttentionSource;
use graphguide::dataset::Task;
use graphguide::gnn::{Activation, GnnVariant};
use graphguide::graphbuild::ExplanationKind;
use graphguide::model::{GnnConfig, ModelConfig};
use graphguide::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub evaluation: EvalConfig,
    pub paths: PathsConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// The label-only model whose attention drives graph construction. When
/// `checkpoint` is set it is loaded instead of trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub attention_source: AttentionSource,
    pub checkpoint: Option<PathBuf>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
            attention_source: AttentionSource::EncoderSelf,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub vocab_limit: usize,
    pub gnn_activation: Activation,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            ff_dim: 128,
            encoder_layers: 4,
            decoder_layers: 2,
            max_positions: 512,
            vocab_limit: 8000,
            gnn_activation: Activation::Relu,
        }
    }
}

impl ModelDims {
    pub fn model_config(
        &self,
        vocab_size: usize,
        variant: Option<GnnVariant>,
    ) -> graphguide::Result<ModelConfig> {
        let mut cfg = ModelConfig {
            vocab_size,
            hidden: self.hidden,
            heads: self.heads,
            ff_dim: self.ff_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_positions: self.max_positions,
            gnn: None,
        };
        if let Some(v) = variant {
            cfg = cfg.with_gnn(v)?;
            if let Some(g) = cfg.gnn.as_mut() {
                *g = GnnConfig {
                    activation: self.gnn_activation,
                    ..*g
                };
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Score generated explanations with the hashed-trigram embedder.
    pub semantic: bool,
    /// Number of test instances put through the counterfactual test (all when unset).
    pub faithfulness_limit: Option<usize>,
    pub perturbation_seed: u64,
    pub adjectives: Option<PathBuf>,
    pub nouns: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            semantic: true,
            faithfulness_limit: None,
            perturbation_seed: 0,
            adjectives: None,
            nouns: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub snapshots: PathBuf,
    pub graphs: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Defaults to `manifest.json` next to the config file.
    pub manifest: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn manifest_path(&self) -> &Path {
        self.paths
            .manifest
            .as_deref()
            .expect("resolved by validate_config")
    }
}

/// Every problem found in a configuration file, one per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Violations(pub Vec<String>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for v in &self.0 {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Violations {}

const TASKS: &str = "nli, comve, ecqa";
const VARIANTS: &str = "none, gcn, gat, sage";
const SOURCES: &str = "encoder_self, decoder_cross";
const ACTIVATIONS: &str = "relu, identity";

fn explanation_options() -> String {
    ExplanationKind::ALL.map(|k| k.as_str()).join(", ")
}

/// Check a closed-enum string at `table.key`. A bad value is recorded and removed so
/// the remaining fields can still be checked.
fn check_enum(
    root: &mut toml::Table,
    table: Option<&str>,
    key: &str,
    valid: &str,
    problems: &mut Vec<String>,
) {
    let t = match table {
        Some(name) => match root.get_mut(name).and_then(toml::Value::as_table_mut) {
            Some(t) => t,
            None => return,
        },
        None => root,
    };
    let dotted = table.map_or(key.to_string(), |t| format!("{t}.{key}"));
    let Some(value) = t.get(key) else { return };
    let ok = value.as_str().is_some_and(|s| {
        valid
            .split(", ")
            .any(|v| v == s.trim().to_ascii_lowercase())
    });
    if !ok {
        problems.push(format!(
            "{dotted}: unknown value {value} (valid options: {valid})"
        ));
        t.remove(key);
    } else if let Some(s) = value.as_str() {
        let norm = s.trim().to_ascii_lowercase();
        t.insert(key.to_string(), toml::Value::String(norm));
    }
}

fn strip_negatives(table: &mut toml::Table, prefix: &str, problems: &mut Vec<String>) {
    let mut bad = Vec::new();
    for (k, v) in table.iter_mut() {
        let name = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Integer(i) if *i < 0 => bad.push((k.clone(), name)),
            toml::Value::Float(x) if *x < 0.0 => bad.push((k.clone(), name)),
            toml::Value::Table(t) => strip_negatives(t, &name, problems),
            toml::Value::Array(items)
                if items
                    .iter()
                    .any(|i| matches!(i, toml::Value::Integer(n) if *n < 0)) =>
            {
                bad.push((k.clone(), name))
            }
            _ => {}
        }
    }
    for (k, name) in bad {
        problems.push(format!("{name}: must not be negative"));
        table.remove(&k);
    }
}

/// Keys present in the file that the parsed config has no field for.
fn unknown_keys(raw: &toml::Table, known: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in raw {
        let name = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match known.get(k) {
            None => out.push(format!("{name}: unknown key")),
            Some(inner @ serde_json::Value::Object(_)) => {
                if let toml::Value::Table(t) = v {
                    unknown_keys(t, inner, &name, out);
                }
            }
            Some(_) => {}
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, Violations> {
    let mut raw: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        Violations(vec![format!("not valid TOML: {}", e.message())])
    })?;
    let original = raw.clone();
    let mut problems = Vec::new();

    check_enum(&mut raw, None, "task", TASKS, &mut problems);
    check_enum(
        &mut raw,
        Some("train"),
        "explanation",
        &explanation_options(),
        &mut problems,
    );
    check_enum(&mut raw, Some("train"), "variant", VARIANTS, &mut problems);
    check_enum(
        &mut raw,
        Some("base"),
        "attention_source",
        SOURCES,
        &mut problems,
    );
    check_enum(
        &mut raw,
        Some("model"),
        "gnn_activation",
        ACTIVATIONS,
        &mut problems,
    );
    if let Some(train) = raw.get_mut("train").and_then(toml::Value::as_table_mut) {
        if train.get("variant").and_then(toml::Value::as_str) == Some("none") {
            train.remove("variant");
        }
    }
    strip_negatives(&mut raw, "", &mut problems);

    let mut cfg = match ExperimentConfig::deserialize(toml::Value::Table(raw)) {
        Ok(cfg) => cfg,
        Err(e) => {
            if !problems
                .iter()
                .any(|p| e.message().contains(p.split(':').next().unwrap_or("")))
            {
                problems.push(e.message().trim().to_string());
            }
            return Err(Violations(problems));
        }
    };

    let known = serde_json::to_value(&cfg).expect("config serializes");
    unknown_keys(&original, &known, "", &mut problems);

    if let Err(e) = cfg.train.validate() {
        let msg = e.to_string();
        let msg = msg.strip_prefix("invalid argument: ").unwrap_or(&msg);
        problems.extend(msg.split("; ").map(|p| format!("train.{p}")));
    }
    if cfg.seeds.is_empty() {
        problems.push("seeds: at least one seed is required".into());
    }
    if cfg.base.epochs == 0 && cfg.base.checkpoint.is_none() {
        problems.push("base.epochs: must be >= 1 unless base.checkpoint is given".into());
    }
    if cfg.base.batch_size == 0 {
        problems.push("base.batch_size: must be >= 1".into());
    }
    if cfg.base.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        problems.push("base.learning_rate: must be > 0".into());
    }
    if let Err(e) = cfg
        .model
        .model_config(cfg.model.vocab_limit, cfg.train.variant)
    {
        problems.push(format!("model: {e}"));
    }

    let p = &mut cfg.paths;
    for path in [
        &mut p.train,
        &mut p.dev,
        &mut p.test,
        &mut p.snapshots,
        &mut p.graphs,
        &mut p.checkpoints,
        &mut p.reports,
    ] {
        resolve(base_dir, path);
    }
    let mut manifest = p
        .manifest
        .take()
        .unwrap_or_else(|| PathBuf::from("manifest.json"));
    resolve(base_dir, &mut manifest);
    p.manifest = Some(manifest);
    for opt in [
        &mut cfg.base.checkpoint,
        &mut cfg.evaluation.adjectives,
        &mut cfg.evaluation.nouns,
    ]
    .into_iter()
    .flatten()
    {
        resolve(base_dir, opt);
    }

    for (name, path) in [
        ("paths.train", &p.train),
        ("paths.dev", &p.dev),
        ("paths.test", &p.test),
    ] {
        if !path.is_file() {
            problems.push(format!("{name}: {} does not exist", path.display()));
        }
    }
    for (name, path) in [
        ("base.checkpoint", &cfg.base.checkpoint),
        ("evaluation.adjectives", &cfg.evaluation.adjectives),
        ("evaluation.nouns", &cfg.evaluation.nouns),
    ] {
        if let Some(path) = path {
            if !path.is_file() {
                problems.push(format!("{name}: {} does not exist", path.display()));
            }
        }
    }

    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Violations(problems))
    }
}

/// Read, default and check an experiment configuration.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, Violations> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Violations(vec![format!("cannot read {}: {e}", path.display())]))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATHS: &str = r#"
[paths]
train = "train.jsonl"
dev = "dev.jsonl"
test = "test.jsonl"
snapshots = "out/snapshots"
graphs = "out/graphs"
checkpoints = "out/ckpt"
reports = "out/reports"
"#;

    fn dir_with_data() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
            std::fs::write(d.path().join(f), "").unwrap();
        }
        d
    }

    fn parse(extra: &str) -> Result<ExperimentConfig, Violations> {
        let d = dir_with_data();
        parse_config(&format!("task = \"nli\"\n{extra}\n{PATHS}"), d.path())
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.train.k_percent, 30.0);
        assert_eq!(cfg.train.beam_width, 3);
        assert_eq!(cfg.train.learning_rate, 3e-4);
        assert_eq!(cfg.train.explanation, ExplanationKind::TokenInteraction);
        assert_eq!(cfg.train.variant, None);
        assert_eq!(cfg.seeds, vec![0]);
        assert!(cfg.paths.train.is_absolute());
        assert!(cfg.manifest_path().ends_with("manifest.json"));
    }

    #[test]
    fn out_of_range_k_is_rejected() {
        let err = parse("[train]\nk_percent = 150").unwrap_err();
        assert!(err.0.iter().any(|v| v.contains("k_percent")), "{err}");
    }

    #[test]
    fn unknown_explanation_lists_options() {
        let err = parse("[train]\nexplanation = \"saliency\"").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.explanation"));
        for opt in ["highlight_token", "token_interaction", "span_interaction"] {
            assert!(msg.contains(opt), "{msg}");
        }
    }

    #[test]
    fn violations_are_collected_together() {
        let err = parse("seeds = [-1]\n[train]\nvariant = \"gin\"\nbeam_width = -2\nk_percent = 0\nlerning_rate = 1").unwrap_err();
        let joined = err.to_string();
        for needle in [
            "train.variant",
            "train.beam_width",
            "seeds",
            "k_percent",
            "train.lerning_rate",
        ] {
            assert!(joined.contains(needle), "missing {needle} in {joined}");
        }
    }

    #[test]
    fn variant_none_means_baseline_and_names_are_case_insensitive() {
        assert_eq!(
            parse("[train]\nvariant = \"none\"").unwrap().train.variant,
            None
        );
        assert_eq!(
            parse("[train]\nvariant = \"SAGE\"").unwrap().train.variant,
            Some(GnnVariant::Sage)
        );
    }

    #[test]
    fn missing_dataset_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let err = parse_config(&format!("task = \"ecqa\"\n{PATHS}"), d.path()).unwrap_err();
        assert_eq!(
            err.0
                .iter()
                .filter(|v| v.contains("does not exist"))
                .count(),
            3
        );
    }

    #[test]
    fn unknown_task_lists_options() {
        let d = dir_with_data();
        let err = parse_config(&format!("task = \"qa\"\n{PATHS}"), d.path()).unwrap_err();
        assert!(err.to_string().contains("nli, comve, ecqa"), "{err}");
    }
}
