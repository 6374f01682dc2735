//! Command implementations: dataset generation, scheduled pretraining,
//! evaluation, and the three batching studies.
//!
//! Output layout per run directory:
//!
//! ```text
//! <out>/
//!   manifest.json        materialized config (all defaults filled in)
//!   run_meta.json        command name and timestamps (the only file with
//!                        non-deterministic content)
//!   datasets/            ds_NNN.bin + ds_NNN.manifest.json
//!   plans/epoch_NNNN.json
//!   train_log.tsv        one row per step: step, epoch, batch, loss, pad ratio
//!   diversity.json       per-epoch diversity reports
//!   checkpoint.bin
//!   hashes.json          dataset content hashes the run was trained on
//!   eval_results.tsv / eval_summary.json / study_*.tsv / study_*.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use csi_pretrain::datagen::{add_noise, fnv1a64, generate_dataset, DatasetManifest, DatasetSpec};
use csi_pretrain::masking::{build_attn_bias, mae_mask, MaeMask, MaskSpec};
use csi_pretrain::metrics::{
    compute_cost, conflict_experiment, db_to_string, nmse, ConflictConfig, ConflictStats,
};
use csi_pretrain::model::{
    load_checkpoint, save_checkpoint, task_mask, ModelBatch, TaskSpec, ToyMaeModel, TrainState,
};
use csi_pretrain::rng::{derive_stream, CounterRng};
use csi_pretrain::scheduler::{
    build_plan, diversity_report, pool_id, BatchPlan, DiversityReport, PoolEntry, SamplePool,
    Strategy,
};
use csi_pretrain::tensor::{
    encode_dataset, patchify, read_dataset_file, CsiSample, PatchSpec, TokenBank, TokenSequence,
};

use crate::config::{split_ranges, ExperimentConfig};
use crate::CliError;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serialize {}: {e}", path.display())))?;
    write_text(path, &text)
}

/// Result-file wrapper so every emitted table carries a format version.
#[derive(Serialize)]
struct VersionedRows<T: Serialize> {
    version: u32,
    rows: T,
}

fn write_rows<T: Serialize>(path: &Path, rows: &T) -> Result<(), CliError> {
    write_json(path, &VersionedRows { version: 1, rows })
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes the materialized manifest and the (timestamped) run metadata.
fn write_run_header(out: &Path, cfg: &ExperimentConfig, command: &str) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        #[serde(flatten)]
        config: &'a ExperimentConfig,
        gradient_block_order: Vec<String>,
        split_rule: &'a str,
    }
    let block_order = cfg
        .model_config()
        .map(|m| {
            let (layout, _) = csi_pretrain_layout(&m);
            layout
        })
        .unwrap_or_default();
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command,
            config: cfg,
            gradient_block_order: block_order,
            split_rule: "train 3/4, val 1/8, test remainder, by sample index",
        },
    )?;
    #[derive(Serialize)]
    struct RunMeta<'a> {
        command: &'a str,
        started_unix: u64,
    }
    write_json(
        &out.join("run_meta.json"),
        &RunMeta {
            command,
            started_unix: unix_now(),
        },
    )?;
    Ok(())
}

fn csi_pretrain_layout(cfg: &csi_pretrain::model::ModelConfig) -> (Vec<String>, ()) {
    let model = ToyMaeModel::init(cfg.clone(), 0).expect("validated config");
    (model.layout().block_names(), ())
}

fn dataset_paths(out: &Path, id: u32) -> (PathBuf, PathBuf) {
    let dir = out.join("datasets");
    (
        dir.join(format!("ds_{id:03}.bin")),
        dir.join(format!("ds_{id:03}.manifest.json")),
    )
}

/// Generates every configured dataset (training and zero-shot extras).
///
/// Regeneration is idempotent: existing files must match the bytes the
/// config produces, otherwise the command fails rather than overwrite.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(u32, String)>, CliError> {
    cfg.validate()?;
    write_run_header(out, cfg, "generate")?;
    let mut hashes = Vec::new();
    for spec in cfg.all_dataset_specs()? {
        let samples: Vec<CsiSample> = generate_dataset(&spec)?
            .iter()
            .map(|s| add_noise(s, cfg.noise.snr_db, cfg.noise.seed))
            .collect();
        let bytes = encode_dataset(&samples)?;
        let (bin_path, manifest_path) = dataset_paths(out, spec.dataset_id);
        if bin_path.exists() {
            let existing = fs::read(&bin_path)?;
            if existing != bytes {
                return Err(CliError::Data(format!(
                    "existing {} does not match this config (hash {:016x} vs {:016x}); refusing to overwrite",
                    bin_path.display(),
                    fnv1a64(&existing),
                    fnv1a64(&bytes),
                )));
            }
        } else {
            if let Some(parent) = bin_path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&bin_path, &bytes)?;
        }
        let manifest = DatasetManifest::new(&spec, cfg.noise.snr_db, cfg.noise.seed, &bytes);
        write_json(&manifest_path, &manifest)?;
        hashes.push((spec.dataset_id, manifest.content_hash));
    }
    Ok(hashes)
}

/// Loads a dataset file, checking its content hash against the sidecar
/// manifest.
fn load_verified_dataset(out: &Path, spec: &DatasetSpec) -> Result<Vec<CsiSample>, CliError> {
    let (bin_path, manifest_path) = dataset_paths(out, spec.dataset_id);
    if !bin_path.exists() {
        return Err(CliError::Data(format!(
            "dataset file {} missing; run the generate command first",
            bin_path.display()
        )));
    }
    let bytes = fs::read(&bin_path)?;
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Data(format!("manifest {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| CliError::Data(format!("manifest {}: {e}", manifest_path.display())))?;
    let actual = format!("{:016x}", fnv1a64(&bytes));
    if actual != manifest.content_hash {
        return Err(CliError::Data(format!(
            "content hash mismatch for {}: file {actual}, manifest {}",
            bin_path.display(),
            manifest.content_hash
        )));
    }
    if manifest.spec != *spec {
        return Err(CliError::Data(format!(
            "dataset {} manifest was generated from a different spec",
            spec.dataset_id
        )));
    }
    let samples = read_dataset_file(&bin_path)?;
    if samples.len() != spec.n_samples {
        return Err(CliError::Data(format!(
            "dataset {} holds {} samples, config says {}",
            spec.dataset_id,
            samples.len(),
            spec.n_samples
        )));
    }
    Ok(samples)
}

/// In-memory training corpus: token bank plus schedulable pool.
pub struct Corpus {
    pub pool: SamplePool,
    pub bank: TokenBank,
}

/// Patchifies one split of the given datasets into a pool and bank.
pub fn build_corpus(
    datasets: &BTreeMap<u32, Vec<CsiSample>>,
    patch: &PatchSpec,
    split: SplitKind,
) -> Result<Corpus, CliError> {
    let mut bank = TokenBank::new();
    let mut entries = Vec::new();
    for (&dataset_id, samples) in datasets {
        let (train, val, test) = split_ranges(samples.len());
        let range = match split {
            SplitKind::Train => train,
            SplitKind::Val => val,
            SplitKind::Test => test,
            SplitKind::All => 0..samples.len(),
        };
        for sample in &samples[range] {
            let seq = patchify(sample, patch)?;
            let id = pool_id(dataset_id, sample.sample_id);
            entries.push(PoolEntry {
                sample_id: id,
                dataset_id,
                token_len: seq.valid_len,
            });
            bank.insert(id, seq);
        }
    }
    let pool = SamplePool::new(entries)?;
    Ok(Corpus { pool, bank })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
    All,
}

impl SplitKind {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(CliError::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Per-batch mask policy: pick a family by weight, falling back to random
/// masking when a structural cut is impossible for some member's grid.
fn batch_masks(
    cfg: &ExperimentConfig,
    seqs: &[(u64, &TokenSequence)],
    epoch: u64,
    batch_index: u64,
) -> Result<Vec<MaeMask>, CliError> {
    let mut rng = CounterRng::new(cfg.mask.seed, derive_stream(&[epoch, batch_index]));
    let weights = [
        cfg.mask.weight_random,
        cfg.mask.weight_time,
        cfg.mask.weight_frequency,
    ];
    let total: f64 = weights.iter().sum();
    let draw = rng.next_f64() * total;
    let mut kind = 0usize;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc {
            kind = i;
            break;
        }
    }
    // Structural masks need at least two patches along the cut axis for
    // every member.
    let kind = match kind {
        1 if seqs.iter().any(|(_, s)| s.grid.time < 2) => 0,
        2 if seqs.iter().any(|(_, s)| s.grid.freq < 2) => 0,
        k => k,
    };
    let mut masks = Vec::with_capacity(seqs.len());
    for &(id, seq) in seqs {
        let spec = match kind {
            0 => MaskSpec::Random { ratio: cfg.mask.random_ratio },
            1 => {
                let visible = ((cfg.mask.time_visible_fraction * seq.grid.time as f64).round()
                    as usize)
                    .clamp(1, seq.grid.time - 1);
                MaskSpec::Time { visible_time_patches: visible }
            }
            _ => {
                let visible = ((cfg.mask.freq_visible_fraction * seq.grid.freq as f64).round()
                    as usize)
                    .clamp(1, seq.grid.freq - 1);
                MaskSpec::Frequency { visible_freq_patches: visible }
            }
        };
        masks.push(mae_mask(
            seq,
            &spec,
            derive_stream(&[cfg.mask.seed, epoch, batch_index, id]),
        )?);
    }
    Ok(masks)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub batch_index: usize,
    pub loss: f64,
    pub padding_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochDiversity {
    pub epoch: u64,
    pub threshold: f64,
    pub violations: usize,
    pub per_batch_entropy: Vec<f64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<LogRow>,
    pub diversity: Vec<EpochDiversity>,
    pub plans: Vec<BatchPlan>,
}

/// The epoch-scheduled training loop shared by the train command and the
/// studies. Rebuilds the plan each epoch with a seed derived from
/// `(schedule.seed, epoch)` and stops exactly at `total_steps`.
pub fn train_loop(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    strategy: Strategy,
    buckets: usize,
    total_steps: u64,
    model: ToyMaeModel,
) -> Result<TrainOutcome, CliError> {
    let epsilon = cfg.schedule.epsilon_fraction * (cfg.datasets.len().max(1) as f64).ln();
    let mut state = TrainState::new(model);
    let mut logs = Vec::new();
    let mut diversity = Vec::new();
    let mut plans = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < total_steps {
        let plan = build_plan(
            &corpus.pool,
            strategy,
            buckets,
            cfg.schedule.batch_size,
            derive_stream(&[cfg.schedule.seed, epoch]),
        )?;
        let report: DiversityReport = diversity_report(&plan, &corpus.pool, epsilon)?;
        if cfg.schedule.enforce_diversity && report.violations > 0 {
            return Err(CliError::Data(format!(
                "epoch {epoch}: {} batches fall below the diversity threshold {epsilon}",
                report.violations
            )));
        }
        diversity.push(EpochDiversity {
            epoch,
            threshold: report.threshold,
            violations: report.violations,
            per_batch_entropy: report.per_batch_entropy,
        });
        for (batch_index, mini) in plan.batches.iter().enumerate() {
            if step >= total_steps {
                break;
            }
            let seqs: Vec<(u64, &TokenSequence)> = mini
                .members
                .iter()
                .map(|&id| {
                    corpus
                        .bank
                        .get(id)
                        .map(|s| (id, s))
                        .ok_or_else(|| CliError::Data(format!("sample {id} missing from bank")))
                })
                .collect::<Result<_, _>>()?;
            let masks = batch_masks(cfg, &seqs, epoch, batch_index as u64)?;
            let items: Vec<_> = seqs
                .iter()
                .zip(masks.iter())
                .map(|((_, s), m)| (*s, m))
                .collect();
            let batch = ModelBatch::assemble(&items, Some(mini.padded_len))?;
            let bias = build_attn_bias(&batch.valid_lens, batch.len)?;
            let loss = state
                .train_step(&batch, &bias, cfg.train.learning_rate)
                .map_err(|e| CliError::Numeric(format!("step {step}: {e}")))?;
            let ops = (mini.members.len() * mini.padded_len) as f64;
            let valid: usize = seqs.iter().map(|(_, s)| s.valid_len).sum();
            logs.push(LogRow {
                step,
                epoch,
                batch_index,
                loss,
                padding_ratio: if ops > 0.0 { (ops - valid as f64) / ops } else { 0.0 },
            });
            step += 1;
        }
        plans.push(plan);
        epoch += 1;
    }
    Ok(TrainOutcome {
        state,
        logs,
        diversity,
        plans,
    })
}

fn render_log(logs: &[LogRow]) -> String {
    let mut out = String::new();
    for row in logs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.step, row.epoch, row.batch_index, row.loss, row.padding_ratio
        ));
    }
    out
}

/// Pretrains on the configured datasets and writes checkpoint, per-step log,
/// per-epoch plans, and diversity reports.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    write_run_header(out, cfg, "train")?;
    let patch = cfg.patch_spec()?;
    let mut datasets = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for spec in cfg.train_dataset_specs()? {
        let samples = load_verified_dataset(out, &spec)?;
        let bytes = encode_dataset(&samples)?;
        hashes.insert(spec.dataset_id, format!("{:016x}", fnv1a64(&bytes)));
        datasets.insert(spec.dataset_id, samples);
    }
    let corpus = build_corpus(&datasets, &patch, SplitKind::Train)?;
    let model = ToyMaeModel::init(cfg.model_config()?, cfg.model.init_seed)?;
    let outcome = train_loop(
        cfg,
        &corpus,
        cfg.strategy()?,
        cfg.schedule.buckets,
        cfg.train.total_steps,
        model,
    )?;

    save_checkpoint(&out.join("checkpoint.bin"), &outcome.state.model, outcome.state.step)?;
    write_text(&out.join("train_log.tsv"), &render_log(&outcome.logs))?;
    write_rows(&out.join("diversity.json"), &outcome.diversity)?;
    write_json(&out.join("hashes.json"), &hashes)?;
    for (i, plan) in outcome.plans.iter().enumerate() {
        write_text(
            &out.join(format!("plans/epoch_{i:04}.json")),
            &plan.to_json(),
        )?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub dataset_id: u32,
    pub preset: String,
    pub scale: String,
    pub task: String,
    pub split: String,
    pub in_training: bool,
    pub n_samples: usize,
    pub nmse_linear_mean: f64,
    pub nmse_db: String,
    /// Token-space NMSE over observed positions (exact splice check).
    pub observed_db: String,
    /// Token-space NMSE over predicted positions; "n/a" when the task hides
    /// nothing.
    pub predicted_db: String,
}

fn eval_task_spec(cfg: &ExperimentConfig, task: &str, sample: &CsiSample) -> TaskSpec {
    let scale = &sample.data.scale;
    match task {
        "time" => TaskSpec::Time {
            visible_blocks: ((cfg.eval.time_visible_fraction * scale.time_blocks as f64).round()
                as usize)
                .clamp(1, scale.time_blocks),
        },
        "frequency" => TaskSpec::Frequency {
            visible_subcarriers: ((cfg.eval.freq_visible_fraction * scale.subcarriers as f64)
                .round() as usize)
                .clamp(1, scale.subcarriers),
        },
        _ => TaskSpec::Reconstruction {
            ratio: cfg.eval.recon_ratio,
            seed: derive_stream(&[
                cfg.eval.recon_seed,
                sample.dataset_id as u64,
                sample.sample_id as u64,
            ]),
        },
    }
}

/// Evaluates a model on the chosen split of the given datasets, one row per
/// (dataset, task).
pub fn eval_model(
    cfg: &ExperimentConfig,
    model: &ToyMaeModel,
    specs: &[DatasetSpec],
    datasets: &BTreeMap<u32, Vec<CsiSample>>,
    tasks: &[String],
    split: SplitKind,
    split_label: &str,
) -> Result<Vec<EvalRow>, CliError> {
    let patch = cfg.patch_spec()?;
    let training_ids: std::collections::BTreeSet<u32> =
        cfg.datasets.iter().map(|d| d.id).collect();
    let mut rows = Vec::new();
    for spec in specs {
        let samples = datasets
            .get(&spec.dataset_id)
            .ok_or_else(|| CliError::Data(format!("dataset {} not loaded", spec.dataset_id)))?;
        let (train, val, test) = split_ranges(samples.len());
        let range = match split {
            SplitKind::Train => train,
            SplitKind::Val => val,
            SplitKind::Test => test,
            SplitKind::All => 0..samples.len(),
        };
        let subset = &samples[range];
        if subset.is_empty() {
            return Err(CliError::Data(format!(
                "dataset {} has an empty {split_label} split",
                spec.dataset_id
            )));
        }
        for task in tasks {
            let mut linear_sum = 0.0;
            let mut obs_num = 0.0;
            let mut obs_den = 0.0;
            let mut pred_num = 0.0;
            let mut pred_den = 0.0;
            for sample in subset {
                let task_spec = eval_task_spec(cfg, task, sample);
                let seq = patchify(sample, &patch)?;
                let mask = task_mask(&seq, &patch, &task_spec)?;
                let spliced = model.predict_tokens(&seq, &mask)?;
                let pred =
                    csi_pretrain::tensor::depatchify(&spliced, &sample.data.scale, &patch)?;
                let score = nmse(&sample.data, &pred)?;
                linear_sum += score.linear;
                for (p, &hidden) in mask.hidden.iter().enumerate() {
                    let truth_row = seq.row(p);
                    let pred_row = spliced.row(p);
                    for (t, q) in truth_row.iter().zip(pred_row.iter()) {
                        let err = (t - q) * (t - q);
                        if hidden {
                            pred_num += err;
                            pred_den += t * t;
                        } else {
                            obs_num += err;
                            obs_den += t * t;
                        }
                    }
                }
            }
            let mean_linear = linear_sum / subset.len() as f64;
            let ratio_db = |num: f64, den: f64| {
                if den == 0.0 {
                    "n/a".to_string()
                } else if num == 0.0 {
                    "-inf".to_string()
                } else {
                    db_to_string(10.0 * (num / den).log10())
                }
            };
            rows.push(EvalRow {
                dataset_id: spec.dataset_id,
                preset: spec.scenario.name.clone(),
                scale: format!(
                    "{}x{}x{}",
                    spec.scale.time_blocks, spec.scale.subcarriers, spec.scale.antenna_ports
                ),
                task: task.clone(),
                split: split_label.to_string(),
                in_training: training_ids.contains(&spec.dataset_id),
                n_samples: subset.len(),
                nmse_linear_mean: mean_linear,
                nmse_db: if mean_linear == 0.0 {
                    "-inf".to_string()
                } else {
                    db_to_string(10.0 * mean_linear.log10())
                },
                observed_db: ratio_db(obs_num, obs_den),
                predicted_db: ratio_db(pred_num, pred_den),
            });
        }
    }
    Ok(rows)
}

fn render_eval_rows(rows: &[EvalRow]) -> String {
    let mut out = String::from(
        "dataset_id\tpreset\tscale\ttask\tsplit\tin_training\tn_samples\tnmse_linear_mean\tnmse_db\tobserved_db\tpredicted_db\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.dataset_id,
            r.preset,
            r.scale,
            r.task,
            r.split,
            r.in_training,
            r.n_samples,
            r.nmse_linear_mean,
            r.nmse_db,
            r.observed_db,
            r.predicted_db
        ));
    }
    out
}

/// Evaluates a checkpoint on every configured dataset (training datasets and
/// zero-shot extras), writing a TSV table and JSON summary.
pub fn run_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<Vec<EvalRow>, CliError> {
    cfg.validate()?;
    let ckpt_path = checkpoint
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join("checkpoint.bin"));
    let (model, _step) = load_checkpoint(&ckpt_path)?;
    if *model.config() != cfg.model_config()? {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with a different model config",
            ckpt_path.display()
        )));
    }
    write_run_header(out, cfg, "eval")?;
    let specs = cfg.all_dataset_specs()?;
    let mut datasets = BTreeMap::new();
    for spec in &specs {
        datasets.insert(spec.dataset_id, load_verified_dataset(out, spec)?);
    }
    let split = SplitKind::parse(&cfg.eval.split)?;
    let rows = eval_model(
        cfg,
        &model,
        &specs,
        &datasets,
        &cfg.eval.tasks,
        split,
        &cfg.eval.split,
    )?;
    write_text(&out.join("eval_results.tsv"), &render_eval_rows(&rows))?;
    write_rows(&out.join("eval_summary.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyCompareRow {
    pub strategy: String,
    pub j_pad: u64,
    pub padding_ratio: f64,
    pub token_ops: u64,
    /// Mean reconstruction NMSE (dB) over the training datasets' test split
    /// after the study's training budget; "n/a" when steps = 0.
    pub final_nmse_db: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConflictRow {
    pub seed: u64,
    pub n_pairs: usize,
    pub fraction_negative_mixed: f64,
    pub fraction_negative_bucketed: f64,
    pub mixed: ConflictStats,
    pub bucketed: ConflictStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketSweepRow {
    pub buckets: usize,
    pub j_pad: u64,
    pub padding_ratio: f64,
    pub token_ops: u64,
    pub final_nmse_db: String,
}

fn mean_recon_db(
    cfg: &ExperimentConfig,
    model: &ToyMaeModel,
    specs: &[DatasetSpec],
    datasets: &BTreeMap<u32, Vec<CsiSample>>,
) -> Result<f64, CliError> {
    let rows = eval_model(
        cfg,
        model,
        specs,
        datasets,
        &["reconstruction".to_string()],
        SplitKind::Test,
        "test",
    )?;
    let mut acc = 0.0;
    for r in &rows {
        if r.nmse_linear_mean <= 0.0 {
            return Err(CliError::Numeric("degenerate zero NMSE in study".into()));
        }
        acc += 10.0 * r.nmse_linear_mean.log10();
    }
    Ok(acc / rows.len() as f64)
}

/// Study dispatcher: `strategy-compare`, `conflict`, or `bucket-sweep`.
pub fn run_study(cfg: &ExperimentConfig, out: &Path, name: &str) -> Result<(), CliError> {
    cfg.validate()?;
    write_run_header(out, cfg, &format!("study {name}"))?;
    let patch = cfg.patch_spec()?;
    let specs = cfg.train_dataset_specs()?;
    let mut datasets = BTreeMap::new();
    for spec in &specs {
        datasets.insert(spec.dataset_id, load_verified_dataset(out, spec)?);
    }
    let corpus = build_corpus(&datasets, &patch, SplitKind::Train)?;

    match name {
        "strategy-compare" => {
            let mut rows = Vec::new();
            for strat_name in &cfg.compare.strategies {
                let strategy: Strategy = strat_name.parse().map_err(CliError::Config)?;
                let plan = build_plan(
                    &corpus.pool,
                    strategy,
                    cfg.schedule.buckets,
                    cfg.schedule.batch_size,
                    derive_stream(&[cfg.schedule.seed, 0]),
                )?;
                let cost = compute_cost(&plan, &corpus.pool)?;
                let final_nmse_db = if cfg.compare.steps > 0 {
                    let model = ToyMaeModel::init(cfg.model_config()?, cfg.model.init_seed)?;
                    let outcome = train_loop(
                        cfg,
                        &corpus,
                        strategy,
                        cfg.schedule.buckets,
                        cfg.compare.steps,
                        model,
                    )?;
                    db_to_string(mean_recon_db(cfg, &outcome.state.model, &specs, &datasets)?)
                } else {
                    "n/a".to_string()
                };
                rows.push(StrategyCompareRow {
                    strategy: strat_name.clone(),
                    j_pad: cost.j_pad,
                    padding_ratio: cost.padding_ratio,
                    token_ops: cost.token_ops,
                    final_nmse_db,
                });
            }
            let mut tsv =
                String::from("strategy\tj_pad\tpadding_ratio\ttoken_ops\tfinal_nmse_db\n");
            for r in &rows {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    r.strategy, r.j_pad, r.padding_ratio, r.token_ops, r.final_nmse_db
                ));
            }
            write_text(&out.join("study_strategy_compare.tsv"), &tsv)?;
            write_rows(&out.join("study_strategy_compare.json"), &rows)?;
            Ok(())
        }
        "conflict" => {
            // Early-training snapshot under the proposed strategy, then
            // gradient-pair statistics for mixed-scale vs scale-bucketed
            // batching over the same pool.
            let model = ToyMaeModel::init(cfg.model_config()?, cfg.model.init_seed)?;
            let outcome = train_loop(
                cfg,
                &corpus,
                Strategy::Proposed,
                cfg.schedule.buckets,
                cfg.conflict.snapshot_steps,
                model,
            )?;
            let snapshot = outcome.state.model;
            let homogeneous_buckets = corpus.pool.distinct_lengths();
            let mut rows = Vec::new();
            for &seed in &cfg.conflict.seeds {
                let mixed = build_plan(
                    &corpus.pool,
                    Strategy::Global,
                    1,
                    cfg.schedule.batch_size,
                    seed,
                )?;
                let bucketed = build_plan(
                    &corpus.pool,
                    Strategy::Proposed,
                    homogeneous_buckets,
                    cfg.schedule.batch_size,
                    seed,
                )?;
                let (stats_mixed, stats_bucketed) = conflict_experiment(
                    &snapshot,
                    &corpus.bank,
                    &mixed,
                    &bucketed,
                    &ConflictConfig {
                        n_pairs: cfg.conflict.n_pairs,
                        seed,
                        mask_ratio: cfg.conflict.mask_ratio,
                        isolate_padding: cfg.conflict.isolate_padding,
                    },
                )?;
                rows.push(ConflictRow {
                    seed,
                    n_pairs: cfg.conflict.n_pairs,
                    fraction_negative_mixed: stats_mixed.fraction_negative,
                    fraction_negative_bucketed: stats_bucketed.fraction_negative,
                    mixed: stats_mixed,
                    bucketed: stats_bucketed,
                });
            }
            let mut tsv =
                String::from("seed\tn_pairs\tfraction_negative_mixed\tfraction_negative_bucketed\n");
            for r in &rows {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    r.seed, r.n_pairs, r.fraction_negative_mixed, r.fraction_negative_bucketed
                ));
            }
            write_text(&out.join("study_conflict.tsv"), &tsv)?;
            write_rows(&out.join("study_conflict.json"), &rows)?;
            Ok(())
        }
        "bucket-sweep" => {
            let mut rows = Vec::new();
            for &buckets in &cfg.sweep.buckets {
                let plan = build_plan(
                    &corpus.pool,
                    Strategy::Proposed,
                    buckets,
                    cfg.schedule.batch_size,
                    derive_stream(&[cfg.schedule.seed, 0]),
                )?;
                let cost = compute_cost(&plan, &corpus.pool)?;
                let final_nmse_db = if cfg.sweep.steps > 0 {
                    let model = ToyMaeModel::init(cfg.model_config()?, cfg.model.init_seed)?;
                    let outcome = train_loop(
                        cfg,
                        &corpus,
                        Strategy::Proposed,
                        buckets,
                        cfg.sweep.steps,
                        model,
                    )?;
                    db_to_string(mean_recon_db(cfg, &outcome.state.model, &specs, &datasets)?)
                } else {
                    "n/a".to_string()
                };
                rows.push(BucketSweepRow {
                    buckets,
                    j_pad: cost.j_pad,
                    padding_ratio: cost.padding_ratio,
                    token_ops: cost.token_ops,
                    final_nmse_db,
                });
            }
            let mut tsv = String::from("buckets\tj_pad\tpadding_ratio\ttoken_ops\tfinal_nmse_db\n");
            for r in &rows {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    r.buckets, r.j_pad, r.padding_ratio, r.token_ops, r.final_nmse_db
                ));
            }
            write_text(&out.join("study_bucket_sweep.tsv"), &tsv)?;
            write_rows(&out.join("study_bucket_sweep.json"), &rows)?;
            Ok(())
        }
        other => Err(CliError::Config(format!(
            "unknown study '{other}' (expected strategy-compare, conflict, or bucket-sweep)"
        ))),
    }
}
