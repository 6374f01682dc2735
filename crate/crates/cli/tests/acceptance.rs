//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values (run with `--nocapture` to see them).
//!
//! Fixtures are fully seeded, so every number here is reproducible bit for
//! bit; the tolerances below are the frozen release thresholds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use csi_pretrain::datagen::{add_noise, generate_dataset, preset_by_name, DatasetSpec};
use csi_pretrain::masking::{build_attn_bias, mae_mask, MaskSpec};
use csi_pretrain::metrics::{
    compute_cost, conflict_experiment, grad_cosine, nmse, ConflictConfig,
};
use csi_pretrain::model::{
    ModelBatch, ModelConfig, ToyMaeModel, TrainState,
};
use csi_pretrain::rng::CounterRng;
use csi_pretrain::scheduler::{
    build_baseline_plan, build_plan, compute_jpad, diversity_report, oracle_min_padding,
    partition_buckets, pool_id, schedule_epoch, PoolEntry, SamplePool, Strategy,
};
use csi_pretrain::tensor::{patchify, ComplexTensor, PatchSpec, ScaleSpec, TokenBank};
use csi_pretrain_cli::commands::{
    build_corpus, eval_model, run_generate, run_train, train_loop, Corpus, SplitKind,
};
use csi_pretrain_cli::config::{DatasetConfig, ExperimentConfig, ScaleConfig};

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("csi-pretrain-acceptance")
        .join(format!("{}-{name}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Criterion 1: on 200 random instances (8 samples, batch size 2, integer
/// lengths in [1, 20]) sorted-contiguous grouping matches the brute-force
/// minimum of the summed batch maxima in every instance.
#[test]
fn c1_sorted_grouping_is_exactly_optimal() {
    let started = Instant::now();
    let mut matches = 0;
    for trial in 0..200u64 {
        let mut rng = CounterRng::new(0xACCE_0001, trial);
        let lengths: Vec<usize> = (0..8).map(|_| 1 + rng.next_below(20) as usize).collect();

        let entries: Vec<PoolEntry> = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| PoolEntry {
                sample_id: i as u64,
                dataset_id: 0,
                token_len: len,
            })
            .collect();
        let pool = SamplePool::new(entries).unwrap();
        // Four buckets of capacity two: each bucket is one batch.
        let buckets = partition_buckets(&pool, 4).unwrap();
        let greedy: u64 = buckets
            .iter()
            .map(|b| b.members.iter().map(|e| e.token_len).max().unwrap() as u64)
            .sum();

        let (optimum, witness) = oracle_min_padding(&lengths, 2).unwrap();
        assert_eq!(witness.len(), 4);
        assert_eq!(
            greedy, optimum,
            "trial {trial}: lengths {lengths:?} greedy {greedy} oracle {optimum}"
        );
        matches += 1;
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "oracle sweep took {elapsed:?}");
    println!(
        "[PASS] criterion 1: sorted-contiguous == oracle in {matches}/200 instances ({elapsed:?})"
    );
}

/// The standard heterogeneous scheduling fixture: 4 scales x 4 scenarios,
/// 512 samples each, as a pool of token lengths.
fn heterogeneous_pool() -> SamplePool {
    let patch = PatchSpec::new(2, 2, 2).unwrap();
    let scales = [
        ScaleSpec::new(8, 8, 2).unwrap(),   // 16 tokens
        ScaleSpec::new(8, 16, 2).unwrap(),  // 32 tokens
        ScaleSpec::new(16, 16, 2).unwrap(), // 64 tokens
        ScaleSpec::new(16, 16, 4).unwrap(), // 128 tokens
    ];
    let mut entries = Vec::new();
    let mut dataset_id = 0u32;
    for scale in &scales {
        for _scenario in 0..4 {
            let len = csi_pretrain::tensor::token_length(scale, &patch);
            for i in 0..512u32 {
                entries.push(PoolEntry {
                    sample_id: pool_id(dataset_id, i),
                    dataset_id,
                    token_len: len,
                });
            }
            dataset_id += 1;
        }
    }
    SamplePool::new(entries).unwrap()
}

/// Criterion 2: on the heterogeneous fixture with batch size 16, global
/// shuffling pads at least twice as much as 4-bucket scheduling, and
/// 16 buckets with aligned capacities pad exactly zero.
#[test]
fn c2_padding_ratio_ordering() {
    let pool = heterogeneous_pool();
    let n_bs = 16;
    let global = build_baseline_plan(&pool, Strategy::Global, n_bs, 2024).unwrap();
    let coarse = build_plan(&pool, Strategy::Proposed, 4, n_bs, 2024).unwrap();
    let aligned = build_plan(&pool, Strategy::Proposed, 16, n_bs, 2024).unwrap();

    let r_global = compute_cost(&global, &pool).unwrap().padding_ratio;
    let r_coarse = compute_cost(&coarse, &pool).unwrap().padding_ratio;
    let aligned_cost = compute_cost(&aligned, &pool).unwrap();

    assert!(r_global > 0.0, "global shuffle must pad on this fixture");
    assert!(
        r_global >= 2.0 * r_coarse,
        "global {r_global} < 2x coarse {r_coarse}"
    );
    assert_eq!(aligned_cost.j_pad, 0, "aligned bucketing must be padding-free");
    assert_eq!(aligned_cost.padding_ratio, 0.0);
    println!(
        "[PASS] criterion 2: padding ratio global {r_global:.4} >= 2x B=4 {r_coarse:.4}; B=16 exactly 0"
    );
}

/// Criterion 3: over 1000 scheduled epochs on a four-dataset bucket the mean
/// per-batch source distribution matches the bucket distribution within
/// 0.02 per component, and the alternating baseline has zero batch entropy.
#[test]
fn c3_diversity_unbiasedness() {
    let mut entries = Vec::new();
    for d in 0..4u32 {
        for i in 0..64u32 {
            entries.push(PoolEntry {
                sample_id: pool_id(d, i),
                dataset_id: d,
                token_len: 32,
            });
        }
    }
    let pool = SamplePool::new(entries).unwrap();
    let buckets = partition_buckets(&pool, 1).unwrap();

    let mut share_sums = [0.0f64; 4];
    let mut batches_seen = 0usize;
    for epoch in 0..1000u64 {
        let plan = schedule_epoch(&buckets, 16, 31_000 + epoch).unwrap();
        for batch in &plan.batches {
            batches_seen += 1;
            let mut counts = [0.0f64; 4];
            for &id in &batch.members {
                counts[(id >> 32) as usize] += 1.0;
            }
            for (sum, c) in share_sums.iter_mut().zip(counts.iter()) {
                *sum += c / batch.members.len() as f64;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (d, sum) in share_sums.iter().enumerate() {
        let mean = sum / batches_seen as f64;
        let dev = (mean - 0.25).abs();
        worst = worst.max(dev);
        assert!(dev <= 0.02, "dataset {d}: mean share {mean} off by {dev}");
    }

    let alternating = build_baseline_plan(&pool, Strategy::Alternating, 16, 9).unwrap();
    let report = diversity_report(&alternating, &pool, 0.1).unwrap();
    assert!(
        report.per_batch_entropy.iter().all(|&h| h == 0.0),
        "alternating batches must be single-source"
    );
    println!(
        "[PASS] criterion 3: mean batch shares within {worst:.5} of bucket distribution over 1000 epochs; alternating entropy exactly 0"
    );
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        token_dim: 16,
        embed_dim: 32,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 1,
        mlp_ratio: 2,
        max_time_patches: 8,
        max_freq_patches: 8,
        max_antenna_patches: 2,
    }
}

fn synthetic_sequence(scale: ScaleSpec, seed: u64) -> csi_pretrain::tensor::TokenSequence {
    let spec = DatasetSpec {
        dataset_id: 0,
        scenario: preset_by_name("uma").unwrap(),
        scale,
        carrier_spacing_hz: 15_000.0,
        time_step_s: 1e-3,
        n_samples: 1,
        seed,
    };
    let sample = csi_pretrain::datagen::generate_sample(&spec, 0);
    patchify(&sample, &PatchSpec::new(2, 2, 2).unwrap()).unwrap()
}

/// Criterion 4: with the double mask active, the contents of padded rows
/// cannot move valid outputs, the loss, or any parameter gradient by more
/// than 1e-10.
#[test]
fn c4_attention_isolation() {
    let model = ToyMaeModel::init(toy_model_config(), 0xA4).unwrap();
    let seqs = [
        synthetic_sequence(ScaleSpec::new(4, 4, 2).unwrap(), 1), // 4 tokens
        synthetic_sequence(ScaleSpec::new(8, 8, 2).unwrap(), 2), // 16 tokens
        synthetic_sequence(ScaleSpec::new(16, 16, 2).unwrap(), 3), // 64 tokens
    ];
    let masks: Vec<_> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| mae_mask(s, &MaskSpec::Random { ratio: 0.5 }, 100 + i as u64).unwrap())
        .collect();
    let items: Vec<_> = seqs.iter().zip(masks.iter()).collect();
    let batch = ModelBatch::assemble(&items, None).unwrap();
    let bias = build_attn_bias(&batch.valid_lens, batch.len).unwrap();

    let clean_out = model.forward(&batch, &bias).unwrap();
    let (clean_loss, clean_grad) = model.loss_and_grad(&batch, &bias).unwrap();

    let mut poisoned = batch.clone();
    let mut rng = CounterRng::new(0xBAD, 0);
    for b in 0..poisoned.batch {
        for l in poisoned.valid_lens[b]..poisoned.len {
            for c in 0..poisoned.token_dim {
                poisoned.tokens[(b * poisoned.len + l) * poisoned.token_dim + c] =
                    10.0 * rng.next_gaussian();
            }
        }
    }
    let poisoned_out = model.forward(&poisoned, &bias).unwrap();
    let (poisoned_loss, poisoned_grad) = model.loss_and_grad(&poisoned, &bias).unwrap();

    let mut max_dev: f64 = (clean_loss - poisoned_loss).abs();
    for (a, b) in clean_grad.iter().zip(poisoned_grad.iter()) {
        max_dev = max_dev.max((a - b).abs());
    }
    for b in 0..batch.batch {
        for l in 0..batch.valid_lens[b] {
            for c in 0..batch.token_dim {
                let i = (b * batch.len + l) * batch.token_dim + c;
                max_dev = max_dev.max((clean_out.recon[i] - poisoned_out.recon[i]).abs());
            }
        }
    }
    assert!(max_dev < 1e-10, "padding leaked: max deviation {max_dev}");
    println!("[PASS] criterion 4: padded-content isolation, max deviation {max_dev:e}");
}

/// Criterion 5: analytic gradients match central finite differences to a
/// relative error below 1e-4 for 50 probed parameters in every block, on a
/// d=8 model with two encoder layers, in under five minutes.
#[test]
fn c5_gradient_correctness() {
    let started = Instant::now();
    let cfg = ModelConfig {
        token_dim: 16,
        embed_dim: 8,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 1,
        mlp_ratio: 2,
        max_time_patches: 4,
        max_freq_patches: 4,
        max_antenna_patches: 2,
    };
    let model = ToyMaeModel::init(cfg, 0xA5).unwrap();

    // Mixed-scale batch with padding plus both mask families in play.
    let seqs = [
        synthetic_sequence(ScaleSpec::new(8, 8, 2).unwrap(), 4), // 16 tokens
        synthetic_sequence(ScaleSpec::new(4, 8, 2).unwrap(), 5), // 8 tokens
    ];
    let masks = [
        mae_mask(&seqs[0], &MaskSpec::Random { ratio: 0.5 }, 7).unwrap(),
        mae_mask(&seqs[1], &MaskSpec::Time { visible_time_patches: 1 }, 8).unwrap(),
    ];
    let items: Vec<_> = seqs.iter().zip(masks.iter()).collect();
    let batch = ModelBatch::assemble(&items, None).unwrap();
    let bias = build_attn_bias(&batch.valid_lens, batch.len).unwrap();

    let (_, grad) = model.loss_and_grad(&batch, &bias).unwrap();
    let mut probe = model.clone();
    let mut worst_rel: f64 = 0.0;
    let mut probed = 0usize;
    let n_blocks = model.layout().blocks().len();
    for bi in 0..n_blocks {
        let range = model.layout().range(bi);
        let block_len = range.len();
        let mut rng = CounterRng::new(0xF0, bi as u64);
        for p in 0..50usize {
            // Small blocks get every parameter probed instead of 50 draws.
            let i = if block_len <= 50 {
                if p >= block_len {
                    break;
                }
                range.start + p
            } else {
                range.start + rng.next_below(block_len as u64) as usize
            };
            let eps = 1e-5;
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let up = probe.forward(&batch, &bias).unwrap().loss;
            probe.params_mut()[i] = orig - eps;
            let down = probe.forward(&batch, &bias).unwrap().loss;
            probe.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-5);
            worst_rel = worst_rel.max(rel);
            probed += 1;
            assert!(
                rel < 1e-4,
                "block '{}' param {i}: analytic {} vs fd {fd} (rel {rel})",
                model.layout().blocks()[bi].name,
                grad[i]
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 300, "gradient check took {elapsed:?}");
    println!(
        "[PASS] criterion 5: {probed} probes across {n_blocks} blocks, worst relative error {worst_rel:.2e} ({elapsed:?})"
    );
}

/// In-memory heterogeneous data fixture for the conflict study: 4 scales x 4
/// scenarios, 64 samples each.
fn conflict_fixture() -> (SamplePool, TokenBank) {
    let patch = PatchSpec::new(2, 2, 2).unwrap();
    let scales = [
        ScaleSpec::new(4, 8, 2).unwrap(),   // 8 tokens
        ScaleSpec::new(8, 8, 2).unwrap(),   // 16 tokens
        ScaleSpec::new(8, 16, 2).unwrap(),  // 32 tokens
        ScaleSpec::new(16, 16, 2).unwrap(), // 64 tokens
    ];
    let presets = ["indoor", "umi", "uma", "rma"];
    let mut bank = TokenBank::new();
    let mut entries = Vec::new();
    let mut dataset_id = 0u32;
    for scale in &scales {
        for preset in presets {
            let spec = DatasetSpec {
                dataset_id,
                scenario: preset_by_name(preset).unwrap(),
                scale: *scale,
                carrier_spacing_hz: 15_000.0,
                time_step_s: 1e-3,
                n_samples: 64,
                seed: 40_000 + dataset_id as u64,
            };
            for sample in generate_dataset(&spec).unwrap() {
                let noisy = add_noise(&sample, 20.0, 50_000);
                let seq = patchify(&noisy, &patch).unwrap();
                let id = pool_id(dataset_id, sample.sample_id);
                entries.push(PoolEntry {
                    sample_id: id,
                    dataset_id,
                    token_len: seq.valid_len,
                });
                bank.insert(id, seq);
            }
            dataset_id += 1;
        }
    }
    (SamplePool::new(entries).unwrap(), bank)
}

/// Criterion 6: at a fixed early-training snapshot on the heterogeneous
/// fixture, mixed-scale batching yields a strictly larger fraction of
/// negative gradient-pair cosines than scale-homogeneous batching, for each
/// of three seeds.
#[test]
fn c6_conflict_direction() {
    let cfg = ModelConfig {
        token_dim: 16,
        embed_dim: 32,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 1,
        mlp_ratio: 2,
        max_time_patches: 8,
        max_freq_patches: 8,
        max_antenna_patches: 1,
    };
    let (pool, bank) = conflict_fixture();

    // Fixed early-training snapshot: ten optimizer steps of the bucketed
    // schedule. Much later snapshots let per-scale gradients specialize,
    // which inverts the contrast this criterion measures.
    let mut state = TrainState::new(ToyMaeModel::init(cfg, 0xA6).unwrap());
    let buckets = partition_buckets(&pool, 4).unwrap();
    let mut steps = 0;
    'outer: for epoch in 0..10u64 {
        let plan = schedule_epoch(&buckets, 16, 60_000 + epoch).unwrap();
        for mini in &plan.batches {
            let seqs: Vec<_> = mini.members.iter().map(|id| bank.get(*id).unwrap()).collect();
            let masks: Vec<_> = seqs
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    mae_mask(s, &MaskSpec::Random { ratio: 0.5 }, steps as u64 * 31 + i as u64)
                        .unwrap()
                })
                .collect();
            let items: Vec<_> = seqs.iter().map(|s| *s).zip(masks.iter()).collect();
            let batch = ModelBatch::assemble(&items, Some(mini.padded_len)).unwrap();
            let bias = build_attn_bias(&batch.valid_lens, batch.len).unwrap();
            state.train_step(&batch, &bias, 1e-3).unwrap();
            steps += 1;
            if steps >= 10 {
                break 'outer;
            }
        }
    }
    let snapshot = state.model;

    let mut summary = Vec::new();
    for seed in [11u64, 12, 13] {
        let mixed = build_baseline_plan(&pool, Strategy::Global, 16, seed).unwrap();
        let homogeneous = build_plan(&pool, Strategy::Proposed, 4, 16, seed).unwrap();
        assert_eq!(
            compute_jpad(&homogeneous, &pool).unwrap(),
            0,
            "per-scale buckets must be padding-free"
        );
        let (stats_mixed, stats_homog) = conflict_experiment(
            &snapshot,
            &bank,
            &mixed,
            &homogeneous,
            &ConflictConfig {
                n_pairs: 150,
                seed,
                mask_ratio: 0.5,
                isolate_padding: false,
            },
        )
        .unwrap();
        assert!(
            stats_mixed.fraction_negative > stats_homog.fraction_negative,
            "seed {seed}: mixed {} vs homogeneous {}",
            stats_mixed.fraction_negative,
            stats_homog.fraction_negative
        );
        summary.push(format!(
            "seed {seed}: {:.3} > {:.3}",
            stats_mixed.fraction_negative, stats_homog.fraction_negative
        ));
    }
    println!(
        "[PASS] criterion 6: negative-cosine fraction mixed > homogeneous ({})",
        summary.join("; ")
    );
}

/// The learning fixture: two scenario families at two scales each.
fn learning_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = out.display().to_string();
    cfg.datasets = vec![
        DatasetConfig {
            id: 0,
            preset: "indoor".into(),
            scale: ScaleConfig { time_blocks: 8, subcarriers: 8, antenna_ports: 2 },
            carrier_spacing_hz: 15_000.0,
            time_step_s: 1e-3,
            n_samples: 256,
            seed: 201,
        },
        DatasetConfig {
            id: 1,
            preset: "indoor".into(),
            scale: ScaleConfig { time_blocks: 8, subcarriers: 16, antenna_ports: 2 },
            carrier_spacing_hz: 15_000.0,
            time_step_s: 1e-3,
            n_samples: 256,
            seed: 202,
        },
        DatasetConfig {
            id: 2,
            preset: "uma".into(),
            scale: ScaleConfig { time_blocks: 8, subcarriers: 8, antenna_ports: 2 },
            carrier_spacing_hz: 15_000.0,
            time_step_s: 1e-3,
            n_samples: 256,
            seed: 203,
        },
        DatasetConfig {
            id: 3,
            preset: "uma".into(),
            scale: ScaleConfig { time_blocks: 8, subcarriers: 16, antenna_ports: 2 },
            carrier_spacing_hz: 15_000.0,
            time_step_s: 1e-3,
            n_samples: 256,
            seed: 204,
        },
    ];
    cfg.schedule.buckets = 2;
    cfg.schedule.batch_size = 16;
    cfg.model.embed_dim = 32;
    cfg.model.encoder_depth = 2;
    cfg.model.max_time_patches = 4;
    cfg.model.max_freq_patches = 8;
    cfg.model.max_antenna_patches = 1;
    cfg.train.total_steps = 2000;
    cfg.train.learning_rate = 2e-3;
    cfg.eval.tasks = vec!["reconstruction".into()];
    cfg
}

fn in_memory_datasets(
    cfg: &ExperimentConfig,
) -> (Vec<DatasetSpec>, BTreeMap<u32, Vec<csi_pretrain::tensor::CsiSample>>) {
    let specs = cfg.train_dataset_specs().unwrap();
    let mut datasets = BTreeMap::new();
    for spec in &specs {
        let samples: Vec<_> = generate_dataset(spec)
            .unwrap()
            .iter()
            .map(|s| add_noise(s, cfg.noise.snr_db, cfg.noise.seed))
            .collect();
        datasets.insert(spec.dataset_id, samples);
    }
    (specs, datasets)
}

fn mean_db(rows: &[csi_pretrain_cli::commands::EvalRow]) -> f64 {
    let sum: f64 = rows
        .iter()
        .map(|r| 10.0 * r.nmse_linear_mean.log10())
        .sum();
    sum / rows.len() as f64
}

/// Criterion 7: the configured toy pretraining improves in-distribution
/// reconstruction NMSE by at least 10 dB over the untrained model, and the
/// bucketed strategy ends at least as good on average as sequential
/// training (catastrophic-forgetting direction).
#[test]
fn c7_learning_sanity() {
    let started = Instant::now();
    let cfg = learning_config(Path::new("unused"));
    let (specs, datasets) = in_memory_datasets(&cfg);
    let patch = cfg.patch_spec().unwrap();
    let corpus: Corpus = build_corpus(&datasets, &patch, SplitKind::Train).unwrap();
    let tasks = vec!["reconstruction".to_string()];

    let untrained = ToyMaeModel::init(cfg.model_config().unwrap(), cfg.model.init_seed).unwrap();
    let rows_untrained = eval_model(
        &cfg, &untrained, &specs, &datasets, &tasks, SplitKind::Test, "test",
    )
    .unwrap();
    let db_untrained = mean_db(&rows_untrained);

    let proposed = train_loop(
        &cfg,
        &corpus,
        Strategy::Proposed,
        cfg.schedule.buckets,
        cfg.train.total_steps,
        untrained.clone(),
    )
    .unwrap();
    let rows_proposed = eval_model(
        &cfg, &proposed.state.model, &specs, &datasets, &tasks, SplitKind::Test, "test",
    )
    .unwrap();
    let db_proposed = mean_db(&rows_proposed);

    let sequential = train_loop(
        &cfg,
        &corpus,
        Strategy::Sequential,
        cfg.schedule.buckets,
        cfg.train.total_steps,
        untrained.clone(),
    )
    .unwrap();
    let rows_sequential = eval_model(
        &cfg, &sequential.state.model, &specs, &datasets, &tasks, SplitKind::Test, "test",
    )
    .unwrap();
    let db_sequential = mean_db(&rows_sequential);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 600, "learning fixture took {elapsed:?}");
    assert!(
        db_proposed <= db_untrained - 10.0,
        "trained {db_proposed:.2} dB vs untrained {db_untrained:.2} dB: less than 10 dB better"
    );
    assert!(
        db_proposed <= db_sequential,
        "proposed {db_proposed:.2} dB worse than sequential {db_sequential:.2} dB"
    );
    println!(
        "[PASS] criterion 7: untrained {db_untrained:.2} dB, proposed {db_proposed:.2} dB, sequential {db_sequential:.2} dB ({elapsed:?})"
    );
}

/// Criterion 8: the metric identities hold exactly.
#[test]
fn c8_metric_identities() {
    let scale = ScaleSpec::new(4, 8, 2).unwrap();
    let mut rng = CounterRng::new(0xA8, 0);
    let n = scale.elems();
    let truth = ComplexTensor::new(
        scale,
        (0..n).map(|_| rng.next_gaussian()).collect(),
        (0..n).map(|_| rng.next_gaussian()).collect(),
    )
    .unwrap();
    let pred = ComplexTensor::new(
        scale,
        (0..n).map(|_| rng.next_gaussian()).collect(),
        (0..n).map(|_| rng.next_gaussian()).collect(),
    )
    .unwrap();

    // Exact prediction: linear 0, dB sentinel.
    let exact = nmse(&truth, &truth).unwrap();
    assert_eq!(exact.linear, 0.0);
    assert_eq!(exact.db, f64::NEG_INFINITY);
    // Zero prediction: linear 1, 0 dB.
    let zero = nmse(&truth, &ComplexTensor::zeros(scale)).unwrap();
    assert!((zero.linear - 1.0).abs() < 1e-12);
    assert!(zero.db.abs() < 1e-9);
    // Complex scale covariance.
    let (cr, ci) = (-0.8, 2.3);
    let scaled = |t: &ComplexTensor| {
        let mut out = t.clone();
        for i in 0..t.re.len() {
            out.re[i] = cr * t.re[i] - ci * t.im[i];
            out.im[i] = cr * t.im[i] + ci * t.re[i];
        }
        out
    };
    let base = nmse(&truth, &pred).unwrap();
    let cov = nmse(&scaled(&truth), &scaled(&pred)).unwrap();
    assert!((base.linear - cov.linear).abs() < 1e-12);

    // Cost decomposition on a padded plan.
    let pool = heterogeneous_pool();
    let plan = build_baseline_plan(&pool, Strategy::Global, 16, 1).unwrap();
    let cost = compute_cost(&plan, &pool).unwrap();
    assert_eq!(cost.token_ops, cost.valid_tokens + cost.j_pad);
    assert_eq!(cost.j_pad, compute_jpad(&plan, &pool).unwrap());

    // Cosine symmetry and signed-scaling identities.
    let g1: Vec<f64> = (0..64).map(|_| rng.next_gaussian()).collect();
    let g2: Vec<f64> = (0..64).map(|_| rng.next_gaussian()).collect();
    assert_eq!(
        grad_cosine(&g1, &g2).unwrap(),
        grad_cosine(&g2, &g1).unwrap()
    );
    let pos: Vec<f64> = g1.iter().map(|v| 2.5 * v).collect();
    let neg: Vec<f64> = g1.iter().map(|v| -0.5 * v).collect();
    assert!((grad_cosine(&g1, &pos).unwrap() - 1.0).abs() < 1e-12);
    assert!((grad_cosine(&g1, &neg).unwrap() + 1.0).abs() < 1e-12);
    println!("[PASS] criterion 8: metric identities exact");
}

/// Criterion 9: two identical training commands produce byte-identical
/// artifacts (timestamps are confined to run_meta.json, which is excluded).
#[test]
fn c9_full_run_determinism() {
    let out_a = tmp_dir("det-a");
    let out_b = tmp_dir("det-b");
    let mut cfg_a = learning_config(&out_a);
    for d in cfg_a.datasets.iter_mut() {
        d.n_samples = 32;
    }
    cfg_a.train.total_steps = 25;
    let mut cfg_b = cfg_a.clone();
    cfg_b.out_dir = out_b.display().to_string();

    run_generate(&cfg_a, &out_a).unwrap();
    run_train(&cfg_a, &out_a).unwrap();
    run_generate(&cfg_b, &out_b).unwrap();
    run_train(&cfg_b, &out_b).unwrap();

    let mut compared = 0usize;
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(out_a.join(&rel)).unwrap() {
            let entry = entry.unwrap();
            let rel_path = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                stack.push(rel_path);
                continue;
            }
            if rel_path.file_name().is_some_and(|n| n == "run_meta.json") {
                continue;
            }
            // Manifests embed the run directory path, which legitimately
            // differs between the two runs.
            if rel_path.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            let a = fs::read(out_a.join(&rel_path)).unwrap();
            let b = fs::read(out_b.join(&rel_path)).unwrap();
            assert_eq!(a, b, "artifact {} differs between runs", rel_path.display());
            compared += 1;
        }
    }
    assert!(compared >= 10, "expected to compare many artifacts, saw {compared}");
    println!("[PASS] criterion 9: {compared} artifacts byte-identical across runs");
}
