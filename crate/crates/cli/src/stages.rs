use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use candle_core::{DType, Device};
use graphguide::attribution::AttentionSnapshot;
use graphguide::dataset::{
    load_dataset, read_instance_cache, reformulate, tokenize_instance, write_instance_cache,
    RawRecord, Segmenter, Task, TokenizedInstance, WordPieceTokenizer,
};
use graphguide::evaluate::{
    compute_unfaithfulness, label_accuracy, records_from_log, run_counterfactual_test,
    similarity_report, write_prediction_log, AdjectiveLexicon, FaithfulnessReport,
    HashedTrigramEmbedder, LexiconTagger, PerturberConfig, SimilarityReport, TokenEmbedder,
};
use graphguide::extract::{capture_snapshot, graph_from_snapshot};
use graphguide::graphbuild::{file_stem, read_graph_dir, write_graph, ExplanationGraph};
use graphguide::model::{load_checkpoint, save_checkpoint, Seq2Seq};
use graphguide::pipeline::{GraphSource, ModelRationalizer};
use graphguide::trainer::{
    fit, generate, select_checkpoint, GenerationOutput, TrainConfig, TrainingData,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::{InputHasher, RunManifest};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Device named by `GRAPHGUIDE_DEVICE`; only the CPU is compiled in.
pub fn device() -> Result<Device> {
    match std::env::var("GRAPHGUIDE_DEVICE")
        .ok()
        .as_deref()
        .map(str::trim)
    {
        None | Some("") | Some("cpu") => Ok(Device::Cpu),
        Some(other) => {
            bail!("GRAPHGUIDE_DEVICE={other} is not available in this build (supported: cpu)")
        }
    }
}

pub struct StageContext<'a> {
    pub config: &'a ExperimentConfig,
    pub manifest: RunManifest,
    pub force: bool,
    pub device: Device,
}

impl StageContext<'_> {
    /// Run `body` unless the stage is current. Records timing and metrics and saves the manifest.
    fn run_stage(
        &mut self,
        key: &str,
        hash: String,
        body: impl FnOnce(&Self) -> Result<(Vec<PathBuf>, serde_json::Value)>,
    ) -> Result<bool> {
        if !self.force && self.manifest.is_current(key, &hash) {
            log::info!("{key}: inputs unchanged, skipping (use --force to rerun)");
            return Ok(false);
        }
        let start = Instant::now();
        let (outputs, metrics) = body(self).with_context(|| format!("stage {key} failed"))?;
        self.manifest.config = serde_json::to_value(self.config)?;
        self.manifest
            .record(key, hash, start.elapsed().as_secs_f64(), outputs, metrics);
        self.manifest.save(self.config.manifest_path())?;
        log::info!("{key}: done in {:.1}s", start.elapsed().as_secs_f64());
        Ok(true)
    }
}

fn snapshots(cfg: &ExperimentConfig) -> &Path {
    &cfg.paths.snapshots
}

fn tokenizer_path(cfg: &ExperimentConfig) -> PathBuf {
    snapshots(cfg).join("tokenizer.txt")
}

fn instances_path(cfg: &ExperimentConfig, split: &str) -> PathBuf {
    snapshots(cfg)
        .join("instances")
        .join(format!("{split}.json"))
}

fn base_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.base
        .checkpoint
        .clone()
        .unwrap_or_else(|| snapshots(cfg).join("base").join("base.safetensors"))
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn split_path<'a>(cfg: &'a ExperimentConfig, split: &str) -> &'a Path {
    match split {
        "train" => &cfg.paths.train,
        "dev" => &cfg.paths.dev,
        _ => &cfg.paths.test,
    }
}

fn reformulated(cfg: &ExperimentConfig, split: &str) -> Result<Vec<RawRecord>> {
    let path = split_path(cfg, split);
    let raw = load_dataset(path, cfg.task)?;
    ensure!(!raw.is_empty(), "{split} set {} is empty", path.display());
    Ok(raw
        .iter()
        .map(|r| reformulate(r, cfg.task))
        .collect::<graphguide::Result<Vec<_>>>()?)
}

fn load_instances(cfg: &ExperimentConfig, split: &str) -> Result<Vec<TokenizedInstance>> {
    let path = instances_path(cfg, split);
    ensure!(
        path.exists(),
        "missing {}: run the extract stage first",
        path.display()
    );
    Ok(read_instance_cache(&path)?)
}

fn load_tokenizer(cfg: &ExperimentConfig) -> Result<WordPieceTokenizer> {
    let path = tokenizer_path(cfg);
    ensure!(
        path.exists(),
        "missing {}: run the extract stage first",
        path.display()
    );
    Ok(WordPieceTokenizer::load(&path)?)
}

/// Label tokens the base model's first decoding step is restricted to. Answer
/// choices vary per question, so multiple-choice tasks leave the step unrestricted.
fn label_candidates(task: Task, tokenizer: &dyn Segmenter, labels: &[String]) -> Vec<u32> {
    match task {
        Task::Ecqa => Vec::new(),
        _ => labels.iter().map(|l| tokenizer.token_id(l)).collect(),
    }
}

fn label_set(cfg: &ExperimentConfig, records: &[RawRecord]) -> Vec<String> {
    let mut labels: Vec<String> = records.iter().map(|r| r.gold_label.clone()).collect();
    labels.sort();
    labels.dedup();
    if cfg.task == Task::Ecqa {
        labels.retain(|l| !l.contains(char::is_whitespace));
    }
    labels
}

fn snapshot_path(cfg: &ExperimentConfig, split: &str, id: &str) -> PathBuf {
    snapshots(cfg)
        .join(split)
        .join(format!("{}.json", file_stem(id)))
}

fn check_lengths(
    cfg: &ExperimentConfig,
    split: &str,
    instances: &[TokenizedInstance],
) -> Result<()> {
    let limit = cfg.model.max_positions;
    let long: Vec<&str> = instances
        .iter()
        .filter(|i| i.len() > limit || i.target_ids.len() + 1 > limit)
        .map(|i| i.id.as_str())
        .collect();
    ensure!(
        long.is_empty(),
        "{} {split} instances exceed model.max_positions = {limit} (first: {})",
        long.len(),
        long.first().unwrap_or(&"")
    );
    Ok(())
}

pub fn extract(ctx: &mut StageContext) -> Result<bool> {
    let cfg = ctx.config;
    let mut h = InputHasher::new();
    h.json("task", &cfg.task)
        .json("base", &cfg.base)
        .json("model", &cfg.model);
    for split in SPLITS {
        h.file(split, split_path(cfg, split))?;
    }
    if let Some(p) = &cfg.base.checkpoint {
        h.file("base-checkpoint", p)?;
    }
    ctx.run_stage("extract", h.finish(), |ctx| {
        let cfg = ctx.config;
        let mut records = BTreeMap::new();
        for split in SPLITS {
            records.insert(split, reformulated(cfg, split)?);
        }
        let train = &records["train"];
        let labels = label_set(cfg, train);
        let texts: Vec<&str> = train
            .iter()
            .flat_map(|r| {
                [r.part_a.as_str(), r.part_b.as_str()]
                    .into_iter()
                    .chain(r.gold_nle.iter().map(String::as_str))
            })
            .collect();
        let tokenizer = WordPieceTokenizer::build(texts, &labels, cfg.model.vocab_limit);
        fs::create_dir_all(snapshots(cfg))?;
        tokenizer.save(tokenizer_path(cfg))?;

        let mut instances = BTreeMap::new();
        for split in SPLITS {
            let inst = records[split]
                .iter()
                .map(|r| tokenize_instance(r, &tokenizer))
                .collect::<graphguide::Result<Vec<_>>>()?;
            check_lengths(cfg, split, &inst)?;
            let path = instances_path(cfg, split);
            fs::create_dir_all(path.parent().expect("nested path"))?;
            write_instance_cache(&path, &inst)?;
            instances.insert(split, inst);
        }

        let vocab = tokenizer.vocab_size();
        let base_path = base_checkpoint(cfg);
        let (base, base_losses) = if cfg.base.checkpoint.is_some() {
            let (m, _) = load_checkpoint(&base_path, DType::F32, &ctx.device)?;
            ensure!(
                !m.is_graph_augmented() && m.config().vocab_size == vocab,
                "base.checkpoint must be a label-only model over the extracted vocabulary ({vocab} tokens)"
            );
            (m, Vec::new())
        } else {
            let mcfg = cfg.model.model_config(vocab, None)?;
            let (m, vars) = Seq2Seq::init_seeded(mcfg, cfg.base.seed, DType::F32, &ctx.device)?;
            let tc = TrainConfig {
                learning_rate: cfg.base.learning_rate,
                epochs: Some(cfg.base.epochs),
                batch_size: Some(cfg.base.batch_size),
                seed: cfg.base.seed,
                label_only: true,
                beam_width: 1,
                max_new_tokens: 2,
                dev_limit: Some(64),
                ..cfg.train.clone()
            };
            let dir = base_path.parent().expect("nested path");
            let series = fit(
                &m,
                &vars,
                TrainingData::new(&instances["train"]),
                TrainingData::new(&instances["dev"]),
                &tokenizer,
                &tc,
                dir,
            )?;
            save_checkpoint(&vars, m.config(), &base_path)?;
            for c in &series {
                let _ = fs::remove_file(&c.path);
                let _ = fs::remove_file(c.path.with_extension("json"));
            }
            (m, series.iter().map(|c| c.train_loss).collect())
        };

        let candidates = label_candidates(cfg.task, &tokenizer, &labels);
        let start = Instant::now();
        let mut counts = BTreeMap::new();
        let mut outputs = vec![tokenizer_path(cfg), base_path.clone()];
        for split in SPLITS {
            let dir = snapshots(cfg).join(split);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            fs::create_dir_all(&dir)?;
            for inst in &instances[split] {
                let cap = capture_snapshot(&base, inst, cfg.base.attention_source, &candidates)?;
                fs::write(snapshot_path(cfg, split, &inst.id), serde_json::to_vec(&cap.snapshot)?)?;
            }
            counts.insert(split, instances[split].len());
            outputs.push(instances_path(cfg, split));
            outputs.push(dir);
        }
        let total: usize = counts.values().sum();
        Ok((
            outputs,
            serde_json::json!({
                "instances": counts,
                "vocab_size": vocab,
                "base_train_loss": base_losses,
                "ms_per_instance": 1e3 * start.elapsed().as_secs_f64() / total as f64,
            }),
        ))
    })
}

fn graph_dir(cfg: &ExperimentConfig, split: &str) -> PathBuf {
    cfg.paths.graphs.join(split)
}

pub fn build_graphs(ctx: &mut StageContext) -> Result<bool> {
    let cfg = ctx.config;
    let mut h = InputHasher::new();
    h.json("explanation", &cfg.train.explanation)
        .json("k_percent", &cfg.train.k_percent);
    for split in SPLITS {
        let dir = snapshots(cfg).join(split);
        ensure!(
            dir.is_dir(),
            "no snapshots at {}: run the extract stage first",
            dir.display()
        );
        h.dir(split, &dir)?;
        h.file(&format!("{split}-instances"), &instances_path(cfg, split))?;
    }
    ctx.run_stage("build-graphs", h.finish(), |ctx| {
        let cfg = ctx.config;
        let mut edges = 0usize;
        let mut edgeless = 0usize;
        let mut n = 0usize;
        let mut degenerate_heads = 0usize;
        let mut outputs = Vec::new();
        for split in SPLITS {
            let out_dir = graph_dir(cfg, split);
            if out_dir.exists() {
                fs::remove_dir_all(&out_dir)?;
            }
            for inst in load_instances(cfg, split)? {
                let path = snapshot_path(cfg, split, &inst.id);
                let bytes =
                    fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let snap: AttentionSnapshot = serde_json::from_slice(&bytes)?;
                let out =
                    graph_from_snapshot(&snap, &inst, cfg.train.explanation, cfg.train.k_percent)?;
                edges += out.graph.edge_count();
                edgeless += usize::from(out.graph.edge_count() == 0);
                degenerate_heads += usize::from(out.head.degenerate);
                n += 1;
                write_graph(&out_dir, &out.graph)?;
            }
            fs::create_dir_all(&out_dir)?;
            outputs.push(out_dir);
        }
        Ok((
            outputs,
            serde_json::json!({
                "graphs": n,
                "mean_edges": edges as f64 / n.max(1) as f64,
                "edgeless": edgeless,
                "degenerate_heads": degenerate_heads,
            }),
        ))
    })
}

/// The split's graph directory, or an error pointing at the stage that produces it.
fn require_graph_dir(cfg: &ExperimentConfig, split: &str) -> Result<PathBuf> {
    let dir = graph_dir(cfg, split);
    if !dir.is_dir() {
        bail!(
            "GNN variant {} needs explanation graphs but {} does not exist: run the build-graphs stage first",
            cfg.train.variant.map_or("none".to_string(), |v| v.to_string()),
            dir.display()
        );
    }
    Ok(dir)
}

fn load_graphs(cfg: &ExperimentConfig, split: &str) -> Result<HashMap<String, ExplanationGraph>> {
    Ok(read_graph_dir(&require_graph_dir(cfg, split)?)?)
}

fn best_checkpoint(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(&cfg.paths.checkpoints, seed).join("best.safetensors")
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochSummary {
    epoch: usize,
    train_loss: f64,
    dev_bleu: f64,
}

pub fn train(ctx: &mut StageContext, seed: u64) -> Result<bool> {
    let cfg = ctx.config;
    ensure!(
        cfg.train.epochs.is_some() && cfg.train.batch_size.is_some(),
        "train.epochs and train.batch_size must be set in the configuration"
    );
    let mut h = InputHasher::new();
    h.json("train", &cfg.train)
        .json("model", &cfg.model)
        .json("seed", &seed);
    h.file("tokenizer", &tokenizer_path(cfg))
        .context("run the extract stage first")?;
    for split in ["train", "dev"] {
        h.file(split, &instances_path(cfg, split))
            .context("run the extract stage first")?;
        if cfg.train.variant.is_some() {
            h.dir(&format!("{split}-graphs"), &require_graph_dir(cfg, split)?)?;
        }
    }
    ctx.run_stage(&format!("train/seed-{seed}"), h.finish(), |ctx| {
        let cfg = ctx.config;
        let tokenizer = load_tokenizer(cfg)?;
        let train = load_instances(cfg, "train")?;
        let dev = load_instances(cfg, "dev")?;
        let graphs = match cfg.train.variant {
            Some(_) => Some((load_graphs(cfg, "train")?, load_graphs(cfg, "dev")?)),
            None => None,
        };
        let mcfg = cfg
            .model
            .model_config(tokenizer.vocab_size(), cfg.train.variant)?;
        let (model, vars) = Seq2Seq::init_seeded(mcfg, seed, DType::F32, &ctx.device)?;
        let (mut train_data, mut dev_data) = (TrainingData::new(&train), TrainingData::new(&dev));
        if let Some((tg, dg)) = &graphs {
            train_data = train_data.with_graphs(tg);
            dev_data = dev_data.with_graphs(dg);
        }
        let tc = TrainConfig {
            seed,
            label_only: false,
            ..cfg.train.clone()
        };
        let dir = seed_dir(&cfg.paths.checkpoints, seed);
        let series = fit(&model, &vars, train_data, dev_data, &tokenizer, &tc, &dir)?;
        let best = select_checkpoint(&series)?;
        let dest = best_checkpoint(cfg, seed);
        fs::copy(&best.path, &dest)?;
        fs::copy(
            best.path.with_extension("json"),
            dest.with_extension("json"),
        )?;
        let epochs: Vec<EpochSummary> = series
            .iter()
            .map(|c| EpochSummary {
                epoch: c.epoch,
                train_loss: c.train_loss,
                dev_bleu: c.dev_bleu,
            })
            .collect();
        Ok((
            vec![dest],
            serde_json::json!({ "best_epoch": best.epoch, "epochs": epochs }),
        ))
    })
}

/// Per-seed evaluation output, read back by the report stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub similarity: SimilarityReport,
    pub faithfulness: Option<FaithfulnessReport>,
    pub test_instances: usize,
    pub unparsed_outputs: usize,
}

pub fn metrics_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(&cfg.paths.reports, seed).join("metrics.json")
}

pub fn evaluate(ctx: &mut StageContext, seed: u64) -> Result<bool> {
    let cfg = ctx.config;
    let ckpt = best_checkpoint(cfg, seed);
    ensure!(
        ckpt.exists(),
        "no trained model at {}: run the train stage first",
        ckpt.display()
    );
    let mut h = InputHasher::new();
    h.json("evaluation", &cfg.evaluation)
        .json("train", &cfg.train)
        .file("checkpoint", &ckpt)?
        .file("test", &cfg.paths.test)?
        .file("instances", &instances_path(cfg, "test"))?;
    if cfg.train.variant.is_some() {
        h.dir("graphs", &require_graph_dir(cfg, "test")?)?
            .file("base", &base_checkpoint(cfg))?;
    }
    ctx.run_stage(&format!("evaluate/seed-{seed}"), h.finish(), |ctx| {
        let cfg = ctx.config;
        let tokenizer = load_tokenizer(cfg)?;
        let test = load_instances(cfg, "test")?;
        let refs: HashMap<String, Vec<String>> = reformulated(cfg, "test")?
            .into_iter()
            .map(|r| (r.id, r.gold_nle))
            .collect();
        let (model, _) = load_checkpoint(&ckpt, DType::F32, &ctx.device)?;
        let graphs = match model.is_graph_augmented() {
            true => Some(load_graphs(cfg, "test")?),
            false => None,
        };

        let mut outputs: Vec<GenerationOutput> = Vec::with_capacity(test.len());
        for inst in &test {
            let graph = match &graphs {
                Some(g) => Some(
                    g.get(&inst.id)
                        .ok_or_else(|| graphguide::Error::MissingGraph(inst.id.clone()))?,
                ),
                None => None,
            };
            outputs.push(generate(
                &model,
                inst,
                graph,
                &tokenizer,
                cfg.train.beam_width,
                cfg.train.max_new_tokens,
            )?);
        }
        let out_dir = seed_dir(&cfg.paths.reports, seed);
        fs::create_dir_all(&out_dir)?;
        let mut lines = String::new();
        for o in &outputs {
            lines.push_str(&serde_json::to_string(o)?);
            lines.push('\n');
        }
        let predictions = out_dir.join("predictions.jsonl");
        fs::write(&predictions, lines)?;

        let predicted: Vec<&str> = outputs.iter().map(|o| o.label.as_str()).collect();
        let golds: Vec<&str> = test.iter().map(|i| i.label.as_str()).collect();
        let accuracy = label_accuracy(&predicted, &golds)?;
        let generated: Vec<String> = outputs.iter().map(|o| o.nle.clone()).collect();
        let references: Vec<Vec<String>> = test
            .iter()
            .map(|i| refs.get(&i.id).cloned().unwrap_or_default())
            .collect();
        let embedder = HashedTrigramEmbedder::default();
        let embedder: Option<&dyn TokenEmbedder> =
            cfg.evaluation.semantic.then_some(&embedder as _);
        let similarity = similarity_report(&generated, &references, embedder)?;

        let base = match model.is_graph_augmented() {
            true => Some(load_checkpoint(&base_checkpoint(cfg), DType::F32, &ctx.device)?.0),
            false => None,
        };
        let train_records = reformulated(cfg, "train")?;
        let labels = label_set(cfg, &train_records);
        let mut rationalizer = ModelRationalizer {
            model: &model,
            tokenizer: &tokenizer,
            task: cfg.task,
            graphs: base.as_ref().map(|b| GraphSource {
                base: b,
                source: cfg.base.attention_source,
                kind: cfg.train.explanation,
                k_percent: cfg.train.k_percent,
                candidates: label_candidates(cfg.task, &tokenizer, &labels),
            }),
            beam: cfg.train.beam_width,
            max_new_tokens: cfg.train.max_new_tokens,
        };
        let tagger = match &cfg.evaluation.nouns {
            Some(p) => LexiconTagger::load(p)?,
            None => LexiconTagger::default(),
        };
        let lexicon = match &cfg.evaluation.adjectives {
            Some(p) => AdjectiveLexicon::load(p)?,
            None => AdjectiveLexicon::default(),
        };
        let mut raw_test = load_dataset(&cfg.paths.test, cfg.task)?;
        if let Some(limit) = cfg.evaluation.faithfulness_limit {
            raw_test.truncate(limit);
        }
        let log = run_counterfactual_test(
            &mut rationalizer,
            &raw_test,
            &PerturberConfig {
                tagger: &tagger,
                lexicon: &lexicon,
                seed: cfg.evaluation.perturbation_seed,
            },
        )?;
        let log_path = out_dir.join("perturbations.jsonl");
        write_prediction_log(&log_path, &log)?;
        let records = records_from_log(&log);
        let faithfulness = if records.is_empty() {
            log::warn!("no test instance contained a known noun; faithfulness not measured");
            None
        } else {
            Some(compute_unfaithfulness(&records)?)
        };

        let metrics = SeedMetrics {
            seed,
            accuracy,
            similarity,
            faithfulness,
            test_instances: test.len(),
            unparsed_outputs: outputs.iter().filter(|o| o.flagged).count(),
        };
        let path = metrics_path(cfg, seed);
        fs::write(&path, serde_json::to_vec_pretty(&metrics)?)?;
        Ok((
            vec![predictions, log_path, path],
            serde_json::to_value(&metrics)?,
        ))
    })
}

pub fn report(ctx: &mut StageContext, seeds: &[u64], plots: bool) -> Result<bool> {
    let cfg = ctx.config;
    let mut h = InputHasher::new();
    h.json("plots", &plots);
    for &s in seeds {
        let p = metrics_path(cfg, s);
        ensure!(
            p.exists(),
            "no evaluation metrics for seed {s} at {}: run the evaluate stage first",
            p.display()
        );
        h.file(&format!("seed-{s}"), &p)?;
    }
    ctx.run_stage("report", h.finish(), |ctx| {
        let cfg = ctx.config;
        let metrics = seeds
            .iter()
            .map(|&s| {
                let bytes = fs::read(metrics_path(cfg, s))?;
                Ok(serde_json::from_slice::<SeedMetrics>(&bytes)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let table = crate::report::MetricTable::from_seeds(&metrics);
        let path = cfg.paths.reports.join("report.txt");
        fs::write(&path, crate::report::render(cfg, &table))?;
        let mut outputs = vec![path];
        if plots {
            outputs.extend(crate::report::plot(
                &table,
                &cfg.paths.reports.join("plots"),
            )?);
        }
        Ok((outputs, serde_json::to_value(table.means())?))
    })
}
