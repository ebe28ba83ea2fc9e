//! Config-driven pipeline behind the `uq` binary: pretrain a base model,
//! fine-tune a LoRA ensemble on it, evaluate every epoch on every dataset and
//! summarise. Each stage reads the previous stage's directory, so the costly
//! stages run once.
//!
//! Every file is written exactly once through a temp file and a rename. No
//! artifact holds a timestamp or timing, so two runs of one config produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::{self, sha256_hex};
use crate::data::{
    format_prompt, generate_synthetic, load_jsonl, load_jsonl_dataset, pretraining_corpus,
    ClassReduction, DataSource, DatasetManifest, McqSample, SyntheticSpec, Tokenizer, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::metrics::{self, default_edges, histogram2d, PredictiveSet, UncertaintyRecord};
use crate::model::{BaseWeights, LoraAdapter, ModelConfig};
use crate::train::{
    early_stop_select, encode_samples, fine_tune_ensemble, perplexity, predict, pretrain,
    Checkpoint, EncodedSet, FineTuneData, LoraConfig, PretrainConfig, TrainConfig, TrainLog,
};

/// The λ_half grid run by the sweep flag.
pub const LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

const BASE_FILE: &str = "base.ckpt";
const RUN_FILE: &str = "run.json";
const CONFIG_FILE: &str = "config.json";
const TRAIN_LOG_FILE: &str = "train_log.csv";
const CHECKPOINT_MANIFEST: &str = "checkpoints.csv";
const METRICS_FILE: &str = "metrics.csv";
const AUROC_FILE: &str = "auroc.csv";
const REPORT_FILE: &str = "report.csv";

/// Where the fine-tuning data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
    Jsonl {
        name: String,
        train: PathBuf,
        validation: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            spec: SyntheticSpec::default(),
            seed: 0,
        }
    }
}

/// A dataset evaluated next to the in-domain validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalDatasetConfig {
    /// The held-out split of the synthetic fine-tuning dataset.
    SyntheticOod,
    Jsonl { name: String, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub dataset: DatasetConfig,
    pub eval_datasets: Vec<EvalDatasetConfig>,
    pub output_dir: PathBuf,
    pub ece_bins: usize,
    pub hist_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            dataset: DatasetConfig::default(),
            eval_datasets: vec![EvalDatasetConfig::SyntheticOod],
            output_dir: PathBuf::from("runs"),
            ece_bins: metrics::DEFAULT_ECE_BINS,
            hist_bins: metrics::DEFAULT_HIST_BINS,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.ece_bins == 0 || self.hist_bins == 0 {
            return Err(Error::Config("ece_bins and hist_bins must be at least 1".into()));
        }
        if self.pretrain.heldout_size == 0 || self.pretrain.corpus_size == 0 {
            return Err(Error::Config("pretraining corpus and held-out set must be nonempty".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { spec, .. } => spec.validate()?,
            DatasetConfig::Jsonl { train, validation, .. } => {
                for p in [train, validation] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("dataset file {} not found", p.display())));
                    }
                }
            }
        }
        for e in &self.eval_datasets {
            match e {
                EvalDatasetConfig::SyntheticOod => {
                    if !matches!(self.dataset, DatasetConfig::Synthetic { .. }) {
                        return Err(Error::Config(
                            "synthetic_ood needs a synthetic fine-tuning dataset".into(),
                        ));
                    }
                }
                EvalDatasetConfig::Jsonl { path, .. } => {
                    if !path.is_file() {
                        return Err(Error::Config(format!("dataset file {} not found", path.display())));
                    }
                }
            }
        }
        let mut names = vec![self.in_domain_name()];
        names.extend(self.eval_datasets.iter().map(|e| self.eval_name(e)));
        let mut seen = std::collections::BTreeSet::new();
        for n in names {
            if !seen.insert(n.clone()) {
                return Err(Error::Config(format!("dataset name {n} used twice")));
            }
        }
        Ok(())
    }

    pub fn in_domain_name(&self) -> String {
        match &self.dataset {
            DatasetConfig::Synthetic { spec, .. } => spec.name.clone(),
            DatasetConfig::Jsonl { name, .. } => name.clone(),
        }
    }

    fn eval_name(&self, e: &EvalDatasetConfig) -> String {
        match (e, &self.dataset) {
            (EvalDatasetConfig::SyntheticOod, DatasetConfig::Synthetic { spec, .. }) => spec.ood_name(),
            (EvalDatasetConfig::SyntheticOod, _) => "ood".into(),
            (EvalDatasetConfig::Jsonl { name, .. }, _) => name.clone(),
        }
    }

    /// What the base model depends on.
    fn pretrain_key(&self) -> Value {
        serde_json::json!({
            "model": self.model,
            "pretrain": self.pretrain,
            "dataset": self.dataset,
        })
    }
}

/// Key-sorted compact JSON. `serde_json` maps are ordered, so going through
/// `Value` sorts every object.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// First 12 hex digits of the SHA-256 of the canonical serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes())[..12].to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    archive::write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// Samples of the fine-tuning dataset plus every evaluation dataset, in
/// evaluation order. The in-domain entry holds the validation split.
struct ResolvedData {
    train: Vec<McqSample>,
    eval: Vec<(String, Vec<McqSample>)>,
    manifests: Vec<DatasetManifest>,
}

fn resolve_data(cfg: &ExperimentConfig) -> Result<ResolvedData> {
    let in_name = cfg.in_domain_name();
    let (train, validation, ood, manifest) = match &cfg.dataset {
        DatasetConfig::Synthetic { spec, seed } => {
            let d = generate_synthetic(spec, *seed)?;
            (d.train, d.validation, Some(d.ood), d.manifest)
        }
        DatasetConfig::Jsonl { name, train, validation } => {
            let d = load_jsonl_dataset(name, train, validation)?;
            (d.train, d.validation, None, d.manifest)
        }
    };
    let mut manifests = vec![manifest];
    let mut eval = vec![(in_name, validation)];
    for e in &cfg.eval_datasets {
        let name = cfg.eval_name(e);
        let samples = match e {
            EvalDatasetConfig::SyntheticOod => ood
                .clone()
                .ok_or_else(|| Error::Config("synthetic_ood needs a synthetic dataset".into()))?,
            EvalDatasetConfig::Jsonl { path, .. } => {
                let s = load_jsonl(path)?;
                manifests.push(DatasetManifest {
                    name: name.clone(),
                    train: 0,
                    validation: s.len(),
                    ood: None,
                    num_classes: NUM_CLASSES,
                    source: DataSource::File,
                });
                s
            }
        };
        eval.push((name, samples));
    }
    Ok(ResolvedData {
        train,
        eval,
        manifests,
    })
}

fn encode_lm(samples: &[McqSample], tok: &Tokenizer, max_len: usize) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| {
            let mut t = tok.encode_lossy(&format_prompt(s, true)?);
            if t.len() > max_len {
                t.drain(..t.len() - max_len);
            }
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub digest: String,
    pub perplexity_init: f64,
    pub perplexity_final: f64,
}

/// Next-token training of a fresh base model. The corpus comes from the
/// synthetic world of the fine-tuning dataset, or from the JSONL training
/// file with its answers.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let n = p.corpus_size + p.heldout_size;
    let samples = match &cfg.dataset {
        DatasetConfig::Synthetic { spec, seed } => pretraining_corpus(spec, n, *seed, p.knowledge)?,
        DatasetConfig::Jsonl { train, .. } => load_jsonl(train)?,
    };
    let tok = Tokenizer::default();
    let seqs = encode_lm(&samples, &tok, cfg.model.max_seq_len)?;
    let split = p.heldout_size.min(seqs.len().saturating_sub(1));
    let (heldout, corpus) = seqs.split_at(split);
    if heldout.is_empty() || corpus.is_empty() {
        return Err(Error::Input("pretraining corpus too small to hold out a split".into()));
    }
    let mut base = BaseWeights::init(&cfg.model, p.seed)?;
    let perplexity_init = perplexity(&base, heldout)?;
    let losses = pretrain(&mut base, corpus, p)?;
    let perplexity_final = perplexity(&base, heldout)?;
    log::info!("perplexity {perplexity_init:.3} -> {perplexity_final:.3}");

    let key = cfg.pretrain_key();
    let dir = cfg.output_dir.join(format!("base-{}", config_hash(&key)?));
    base.save(&dir.join(BASE_FILE))?;
    write_text(&dir.join(CONFIG_FILE), &(canonical_json(&key)? + "\n"))?;
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(loss_csv, "{},{l:?}", i + 1).expect("string write");
    }
    write_text(&dir.join("pretrain_loss.csv"), &loss_csv)?;
    write_text(
        &dir.join("perplexity.csv"),
        &format!("stage,perplexity\ninit,{perplexity_init:?}\nfinal,{perplexity_final:?}\n"),
    )?;
    Ok(PretrainOutcome {
        dir,
        digest: base.digest(),
        perplexity_init,
        perplexity_final,
    })
}

/// Links a run directory to the base model it was fine-tuned from. A base
/// under the same output root is stored relative to it, so whole roots can
/// be moved or compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    base_dir: PathBuf,
    base_digest: String,
}

impl RunInfo {
    fn new(base_dir: &Path, output_root: &Path, base_digest: String) -> Self {
        let base_dir = base_dir
            .strip_prefix(output_root)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| base_dir.to_path_buf());
        Self {
            base_dir,
            base_digest,
        }
    }

    fn resolve(&self, run_dir: &Path) -> PathBuf {
        if self.base_dir.is_absolute() {
            return self.base_dir.clone();
        }
        run_dir.parent().unwrap_or(Path::new(".")).join(&self.base_dir)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub train_log: PathBuf,
    pub checkpoint_manifest: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub auroc: Option<PathBuf>,
    pub histograms: Vec<PathBuf>,
}

impl RunArtifacts {
    fn training(dir: &Path, checkpoints: Vec<PathBuf>) -> Self {
        Self {
            dir: dir.to_path_buf(),
            train_log: dir.join(TRAIN_LOG_FILE),
            checkpoint_manifest: dir.join(CHECKPOINT_MANIFEST),
            checkpoints,
            records: Vec::new(),
            metrics: None,
            auroc: None,
            histograms: Vec::new(),
        }
    }

    /// Every path the run claims to have written.
    pub fn paths(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.train_log, &self.checkpoint_manifest];
        v.extend(self.checkpoints.iter().map(PathBuf::as_path));
        v.extend(self.records.iter().map(PathBuf::as_path));
        v.extend(self.metrics.iter().map(PathBuf::as_path));
        v.extend(self.auroc.iter().map(PathBuf::as_path));
        v.extend(self.histograms.iter().map(PathBuf::as_path));
        v
    }
}

fn load_base_dir(dir: &Path) -> Result<BaseWeights> {
    let path = dir.join(BASE_FILE);
    if !path.is_file() {
        return Err(Error::Input(format!("no base checkpoint at {}", path.display())));
    }
    BaseWeights::load(&path)
}

/// Hash of `cfg` fine-tuned from the base with `base_digest`. The output
/// directory itself does not enter it.
pub fn run_hash(cfg: &ExperimentConfig, base_digest: &str) -> Result<String> {
    config_hash(&serde_json::json!({ "config": rootless(cfg), "base": base_digest }))
}

fn rootless(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    }
}

pub fn run_dir(cfg: &ExperimentConfig, base_digest: &str) -> Result<PathBuf> {
    Ok(cfg.output_dir.join(format!("run-{}", run_hash(cfg, base_digest)?)))
}

/// Fine-tunes the ensemble and writes the train log, one checkpoint per
/// member and epoch, and their manifest. An existing finished run is only
/// replaced with `force`.
pub fn cmd_finetune(cfg: &ExperimentConfig, base_dir: &Path, force: bool) -> Result<RunArtifacts> {
    cfg.validate()?;
    let base = load_base_dir(base_dir)?;
    if base.config != cfg.model {
        return Err(Error::Config(
            "base checkpoint was trained with a different model config".into(),
        ));
    }
    let digest = base.digest();
    let hash = run_hash(cfg, &digest)?;
    let dir = cfg.output_dir.join(format!("run-{hash}"));
    if dir.join(TRAIN_LOG_FILE).exists() {
        if !force {
            return Err(Error::Input(format!(
                "run {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("removing {}", dir.display()), e))?;
    }

    let data = resolve_data(cfg)?;
    let tok = Tokenizer::default();
    let reduction = ClassReduction::for_tokenizer(&tok);
    let max_len = cfg.model.max_seq_len;
    let train = encode_samples("train", &data.train, &tok, max_len)?;
    let (in_name, val_samples) = &data.eval[0];
    let validation = encode_samples(in_name, val_samples, &tok, max_len)?;
    let ft = FineTuneData {
        train: &train,
        validation: &validation,
        reduction: &reduction,
        choice_tokens: tok.choice_tokens(),
        ece_bins: cfg.ece_bins,
    };
    let run = fine_tune_ensemble(Arc::new(base), &ft, &cfg.train, &cfg.lora)?;
    for (k, e, s) in &run.log.wall_clock {
        log::info!("member {k} epoch {e}: {s:.2}s");
    }

    write_text(&dir.join(CONFIG_FILE), &(canonical_json(&rootless(cfg))? + "\n"))?;
    let info = RunInfo::new(base_dir, &cfg.output_dir, digest);
    write_text(&dir.join(RUN_FILE), &(canonical_json(&info)? + "\n"))?;
    for m in &data.manifests {
        write_text(
            &dir.join("datasets").join(format!("{}.manifest.json", m.name)),
            &(canonical_json(m)? + "\n"),
        )?;
    }
    let mut manifest = String::from("member,epoch,file,sha256\n");
    let mut paths = Vec::new();
    for member in &run.checkpoints {
        for ck in member {
            let name = Checkpoint::file_name(ck.member, ck.epoch);
            let path = dir.join("checkpoints").join(&name);
            ck.save(&path, &hash)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            writeln!(manifest, "{},{},checkpoints/{name},{}", ck.member, ck.epoch, sha256_hex(&bytes))
                .expect("string write");
            paths.push(path);
        }
    }
    write_text(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
    // Written last: its presence marks a finished run.
    write_text(&dir.join(TRAIN_LOG_FILE), &run.log.to_csv())?;
    Ok(RunArtifacts::training(&dir, paths))
}

/// One run per λ_half of [`LAMBDA_GRID`], each in its own directory.
pub fn cmd_finetune_sweep(cfg: &ExperimentConfig, base_dir: &Path, force: bool) -> Result<Vec<RunArtifacts>> {
    LAMBDA_GRID
        .iter()
        .map(|&lambda_half| {
            let mut c = cfg.clone();
            c.train.lambda_half = lambda_half;
            cmd_finetune(&c, base_dir, force)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct CheckpointEntry {
    member: usize,
    epoch: usize,
    file: String,
}

fn read_checkpoint_manifest(dir: &Path) -> Result<Vec<CheckpointEntry>> {
    let text = read_text(&dir.join(CHECKPOINT_MANIFEST))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("checkpoint manifest line {}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(CheckpointEntry {
                member: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                file: f[2].to_string(),
            })
        })
        .collect()
}

/// Loaded run: config, base and `adapters[e][k]` for epoch `e + 1`.
struct LoadedRun {
    cfg: ExperimentConfig,
    base: BaseWeights,
    adapters: Vec<Vec<Vec<LoraAdapter>>>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg: ExperimentConfig = serde_json::from_str(&read_text(&dir.join(CONFIG_FILE))?)?;
    let info: RunInfo = serde_json::from_str(&read_text(&dir.join(RUN_FILE))?)?;
    let base_dir = info.resolve(dir);
    let base = load_base_dir(&base_dir)?;
    if base.digest() != info.base_digest {
        return Err(Error::Checkpoint(format!(
            "base at {} changed since fine-tuning",
            base_dir.display()
        )));
    }
    let entries = read_checkpoint_manifest(dir)?;
    let members = cfg.train.members;
    let epochs = entries.iter().map(|e| e.epoch).max().unwrap_or(0);
    if epochs == 0 {
        return Err(Error::Input(format!("run {} has no checkpoints", dir.display())));
    }
    let mut adapters = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut per_member = Vec::with_capacity(members);
        for member in 0..members {
            let missing = || {
                Error::Input(format!("missing checkpoint for epoch {epoch} (member {member})"))
            };
            let entry = entries
                .iter()
                .find(|e| e.member == member && e.epoch == epoch)
                .ok_or_else(missing)?;
            let path = dir.join(&entry.file);
            if !path.is_file() {
                return Err(missing());
            }
            per_member.push(Checkpoint::load(&path)?.adapters);
        }
        adapters.push(per_member);
    }
    Ok(LoadedRun { cfg, base, adapters })
}

/// One evaluation record line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub id: String,
    pub epoch: usize,
    pub dataset: String,
    pub entropy: f64,
    pub mi: f64,
    pub probs: Vec<f64>,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
}

struct Cell {
    accuracy: f64,
    nll: f64,
    ece: f64,
    mean_member_nll: f64,
    records: Vec<UncertaintyRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores every epoch of a run on the in-domain validation split and on the
/// selected datasets (all configured ones when `datasets` is `None`).
pub fn cmd_evaluate(dir: &Path, datasets: Option<&[String]>) -> Result<RunArtifacts> {
    let run = load_run(dir)?;
    let cfg = &run.cfg;
    let data = resolve_data(cfg)?;
    let in_name = data.eval[0].0.clone();
    if let Some(names) = datasets {
        for n in names {
            if !data.eval.iter().any(|(name, _)| name == n) {
                return Err(Error::Input(format!("unknown dataset {n}")));
            }
        }
    }
    // The in-domain split is always scored: AUROC pairs are built against it.
    let chosen: Vec<&(String, Vec<McqSample>)> = data
        .eval
        .iter()
        .filter(|(n, _)| *n == in_name || datasets.is_none_or(|d| d.contains(n)))
        .collect();

    let tok = Tokenizer::default();
    let reduction = ClassReduction::for_tokenizer(&tok);
    let sets: Vec<EncodedSet> = chosen
        .iter()
        .map(|(n, s)| encode_samples(n, s, &tok, cfg.model.max_seq_len))
        .collect::<Result<_>>()?;
    let epochs = run.adapters.len();
    let cells: Vec<(usize, usize)> = (0..epochs)
        .flat_map(|e| (0..sets.len()).map(move |d| (e, d)))
        .collect();
    let results: Vec<Cell> = cells
        .par_iter()
        .map(|&(e, d)| {
            let set = &sets[d];
            let per_member = run.adapters[e]
                .iter()
                .map(|ad| predict(&run.base, ad, set, &reduction))
                .collect::<Result<Vec<_>>>()?;
            let ps = PredictiveSet::from_members(&per_member, set.labels())?;
            let records = ps.records(&set.ids())?;
            Ok(Cell {
                accuracy: metrics::accuracy(&records)?,
                nll: metrics::nll(&records)?,
                ece: metrics::ece(&records, cfg.ece_bins)?,
                mean_member_nll: ps.mean_member_nll()?,
                records,
            })
        })
        .collect::<Result<_>>()?;

    let eval_dir = dir.join("eval");
    let mut out = RunArtifacts::training(dir, Vec::new());
    let (h_edges, mi_edges) = default_edges(NUM_CLASSES, cfg.train.members, cfg.hist_bins);
    let mut metrics_csv = String::from(
        "epoch,dataset,accuracy,nll,ece,mean_member_nll,mean_entropy,mean_mi\n",
    );
    let mut hist: BTreeMap<usize, (String, String)> = BTreeMap::new();
    for (&(e, d), cell) in cells.iter().zip(&results) {
        let epoch = e + 1;
        let name = &sets[d].name;
        writeln!(
            metrics_csv,
            "{epoch},{name},{:?},{:?},{:?},{:?},{:?},{:?}",
            cell.accuracy,
            cell.nll,
            cell.ece,
            cell.mean_member_nll,
            mean(cell.records.iter().map(|r| r.entropy)),
            mean(cell.records.iter().map(|r| r.mutual_information)),
        )
        .expect("string write");

        let mut jsonl = String::new();
        for r in &cell.records {
            let line = RecordLine {
                id: r.id.clone(),
                epoch,
                dataset: name.clone(),
                entropy: r.entropy,
                mi: r.mutual_information,
                probs: r.probs.clone(),
                label: r.label,
                predicted: r.predicted,
                correct: r.correct,
            };
            jsonl.push_str(&serde_json::to_string(&line)?);
            jsonl.push('\n');
        }
        let path = eval_dir.join("records").join(format!("{name}_epoch{epoch:03}.jsonl"));
        write_text(&path, &jsonl)?;
        out.records.push(path);

        let h = histogram2d(&cell.records, &h_edges, &mi_edges)?;
        let (counts, summary) = hist.entry(d).or_insert_with(|| {
            (
                "epoch,bin_entropy_lo,bin_mi_lo,group,count\n".to_string(),
                "epoch,group,total,mean_entropy,median_entropy,mean_mi,median_mi\n".to_string(),
            )
        });
        for g in &h.groups {
            for (i, row) in g.counts.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    writeln!(
                        counts,
                        "{epoch},{:?},{:?},{},{c}",
                        h.entropy_edges[i],
                        h.mi_edges[j],
                        g.group.name()
                    )
                    .expect("string write");
                }
            }
            writeln!(
                summary,
                "{epoch},{},{},{},{},{},{}",
                g.group.name(),
                g.total,
                fmt_opt(g.mean_entropy),
                fmt_opt(g.median_entropy),
                fmt_opt(g.mean_mi),
                fmt_opt(g.median_mi)
            )
            .expect("string write");
        }
    }
    for (d, (counts, summary)) in hist {
        let name = &sets[d].name;
        for (file, text) in [
            (format!("histogram_{name}.csv"), counts),
            (format!("histogram_summary_{name}.csv"), summary),
        ] {
            let path = eval_dir.join(file);
            write_text(&path, &text)?;
            out.histograms.push(path);
        }
    }

    let mut auroc_csv = String::from("epoch,in_domain,other,auroc_entropy,auroc_mi,status\n");
    let in_idx = sets.iter().position(|s| s.name == in_name).expect("in-domain set is scored");
    for e in 0..epochs {
        let inside = &results[e * sets.len() + in_idx].records;
        for (d, set) in sets.iter().enumerate() {
            let epoch = e + 1;
            if d == in_idx {
                writeln!(auroc_csv, "{epoch},{in_name},{},,,skipped", set.name).expect("string write");
                continue;
            }
            let other = &results[e * sets.len() + d].records;
            let h = |r: &[UncertaintyRecord]| r.iter().map(|x| x.entropy).collect::<Vec<_>>();
            let m = |r: &[UncertaintyRecord]| {
                r.iter().map(|x| x.mutual_information).collect::<Vec<_>>()
            };
            writeln!(
                auroc_csv,
                "{epoch},{in_name},{},{:?},{:?},ok",
                set.name,
                metrics::auroc(&h(inside), &h(other))?,
                metrics::auroc(&m(inside), &m(other))?
            )
            .expect("string write");
        }
    }
    let metrics_path = eval_dir.join(METRICS_FILE);
    write_text(&metrics_path, &metrics_csv)?;
    let auroc_path = eval_dir.join(AUROC_FILE);
    write_text(&auroc_path, &auroc_csv)?;
    out.metrics = Some(metrics_path);
    out.auroc = Some(auroc_path);
    Ok(out)
}

/// One line of the report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub dataset: String,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_entropy: f64,
    pub mean_mi: f64,
    pub auroc_entropy: Option<f64>,
    pub auroc_mi: Option<f64>,
    pub best: bool,
}

fn parse_csv(text: &str, what: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{what} is empty")))?
        .split(',')
        .collect();
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(Error::Format(format!("{what} line {}: wrong field count", i + 2)));
            }
            Ok(header.iter().map(|h| h.to_string()).zip(f.iter().map(|v| v.to_string())).collect())
        })
        .collect()
}

fn field<T: std::str::FromStr>(row: &BTreeMap<String, String>, key: &str, what: &str) -> Result<T> {
    row.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("{what}: bad or missing {key}")))
}

/// Rows of `report.csv` from the evaluation artifacts of `dir`.
pub fn report_rows(dir: &Path) -> Result<Vec<ReportRow>> {
    let eval_dir = dir.join("eval");
    let metrics = parse_csv(&read_text(&eval_dir.join(METRICS_FILE))?, METRICS_FILE)?;
    let aurocs = parse_csv(&read_text(&eval_dir.join(AUROC_FILE))?, AUROC_FILE)?;
    let cfg: ExperimentConfig = serde_json::from_str(&read_text(&dir.join(CONFIG_FILE))?)?;
    let in_name = cfg.in_domain_name();

    let mut in_nll: Vec<(usize, f64)> = Vec::new();
    let mut rows = Vec::with_capacity(metrics.len());
    for m in &metrics {
        let epoch: usize = field(m, "epoch", METRICS_FILE)?;
        let dataset = m.get("dataset").cloned().unwrap_or_default();
        let nll: f64 = field(m, "nll", METRICS_FILE)?;
        if dataset == in_name {
            in_nll.push((epoch, nll));
        }
        let pair = aurocs.iter().find(|a| {
            a.get("other") == Some(&dataset)
                && a.get("epoch").and_then(|e| e.parse::<usize>().ok()) == Some(epoch)
                && a.get("status").map(String::as_str) == Some("ok")
        });
        let auroc = |key: &str| pair.and_then(|a| a.get(key)).and_then(|v| v.parse::<f64>().ok());
        rows.push(ReportRow {
            epoch,
            dataset,
            accuracy: field(m, "accuracy", METRICS_FILE)?,
            nll,
            ece: field(m, "ece", METRICS_FILE)?,
            mean_entropy: field(m, "mean_entropy", METRICS_FILE)?,
            mean_mi: field(m, "mean_mi", METRICS_FILE)?,
            auroc_entropy: auroc("auroc_entropy"),
            auroc_mi: auroc("auroc_mi"),
            best: false,
        });
    }
    in_nll.sort_by_key(|&(e, _)| e);
    let nlls: Vec<f64> = in_nll.iter().map(|&(_, v)| v).collect();
    let best = in_nll[early_stop_select(&nlls)?].0;
    for r in &mut rows {
        r.best = r.epoch == best;
    }
    Ok(rows)
}

/// Writes `report.csv` and returns the same table as aligned text.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let rows = report_rows(dir)?;
    let mut csv = String::from(
        "epoch,dataset,accuracy,nll,ece,mean_entropy,mean_mi,auroc_entropy,auroc_mi,best\n",
    );
    let mut text = format!(
        "{:>5}  {:<20} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "epoch", "dataset", "acc", "nll", "ece", "H", "MI", "auc_H", "auc_MI"
    );
    let short = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:?},{:?},{:?},{:?},{:?},{},{},{}",
            r.epoch,
            r.dataset,
            r.accuracy,
            r.nll,
            r.ece,
            r.mean_entropy,
            r.mean_mi,
            fmt_opt(r.auroc_entropy),
            fmt_opt(r.auroc_mi),
            u8::from(r.best)
        )
        .expect("string write");
        writeln!(
            text,
            "{:>5}  {:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8}{}",
            r.epoch,
            r.dataset,
            r.accuracy,
            r.nll,
            r.ece,
            r.mean_entropy,
            r.mean_mi,
            short(r.auroc_entropy),
            short(r.auroc_mi),
            if r.best { "  *" } else { "" }
        )
        .expect("string write");
    }
    write_text(&dir.join(REPORT_FILE), &csv)?;
    Ok(text)
}

/// The train log of a finished run.
pub fn read_train_log(dir: &Path) -> Result<TrainLog> {
    TrainLog::from_csv(&read_text(&dir.join(TRAIN_LOG_FILE))?)
}
