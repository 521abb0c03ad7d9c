//! The experiment round loop.
//!
//! Composes the modules into one run: build and partition the data, then
//! per round refine the server reference on the labeled set, train the
//! selected clients in parallel from immutable broadcast snapshots, gate
//! and average their uploads, and record telemetry. Baseline modes reuse
//! the same loop: `fedavg` forces the gate open and disables the KL pull
//! and credibility machinery; `server-only` skips clients entirely.
//!
//! Runs are bitwise deterministic for a fixed config: every random draw is
//! derived from the experiment seed, and all float accumulation happens in
//! a fixed order regardless of the `parallel` feature.

use crate::augment::AugmentParams;
use crate::client::{client_round, ClientState, TrainSettings};
use crate::config::{DatasetKind, ExperimentConfig, Mode};
use crate::data::{build_partition, gen_synthetic, load_mnist_idx, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::model::{
    export_checkpoint_json, forward, init_params, save_checkpoint, ModelArch, ParamVector,
};
use crate::monitor::{contraction_verdict, ConvergenceTrace, Verdict};
use crate::rng;
use crate::server::{
    aggregate, select_clients, server_supervised_update, ClientUpload, GateRecord,
};
use crate::{par, server};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

const CLIENT_SEED_TAG: u64 = 0x434c_4e54; // "CLNT"

/// Moving-average window for the convergence trace.
pub const MONITOR_WINDOW: usize = 20;

// ---------------------------------------------------------------------------
// Telemetry
// ---------------------------------------------------------------------------

/// Everything recorded about one round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<usize>,
    pub included_count: usize,
    pub delta_norm: f64,
    /// Pseudo-label set size per client (all clients, index = client id).
    pub pseudo_sizes: Vec<usize>,
    pub pseudo_total: usize,
    /// Test accuracy of the global weights; carried forward between
    /// evaluation rounds.
    pub accuracy: f64,
    /// Not written to metrics.csv, which must be byte-identical across
    /// repeat runs.
    pub wall_clock_ms: u64,
    pub gates: Vec<GateRecord>,
}

/// Result bundle of a full run.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub arch: ModelArch,
    pub records: Vec<RoundRecord>,
    pub trace: ConvergenceTrace,
    pub final_params: ParamVector,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

impl RunOutcome {
    /// Contraction verdict over the recorded trace at the default window.
    pub fn verdict(&self) -> Option<Verdict> {
        contraction_verdict(&self.trace, MONITOR_WINDOW)
    }
}

// ---------------------------------------------------------------------------
// Mode resolution
// ---------------------------------------------------------------------------

/// Knobs after applying the mode's forced settings.
#[derive(Debug, Clone, Copy)]
struct EffectiveKnobs {
    gate_threshold: f64,
    coef_kl: f64,
    promote_t: u32,
    credibility_enabled: bool,
}

fn resolve_mode(config: &ExperimentConfig) -> EffectiveKnobs {
    match config.mode {
        Mode::Fedil => EffectiveKnobs {
            gate_threshold: config.gate_threshold,
            coef_kl: config.coef_kl,
            promote_t: config.promote_t,
            credibility_enabled: true,
        },
        // Plain averaging with naive pseudo-labels: gate forced open, no
        // server-consistency pull, no promotion machinery.
        Mode::Fedavg => EffectiveKnobs {
            gate_threshold: -1.0,
            coef_kl: 0.0,
            promote_t: 0,
            credibility_enabled: false,
        },
        Mode::ServerOnly => EffectiveKnobs {
            gate_threshold: config.gate_threshold,
            coef_kl: 0.0,
            promote_t: 0,
            credibility_enabled: false,
        },
    }
}

// ---------------------------------------------------------------------------
// Data assembly
// ---------------------------------------------------------------------------

/// Train and test corpora for the configured dataset. Synthetic data is one
/// generation split class-wise into train and held-out test, so ids are
/// globally unique and provably disjoint.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match config.dataset {
        DatasetKind::Synthetic => {
            let per_class = config.synth_per_class + config.synth_test_per_class;
            let full = gen_synthetic(
                config.synth_classes,
                per_class,
                config.synth_dim,
                config.synth_separation,
                config.seed,
            )?;
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, ex) in full.examples().iter().enumerate() {
                if i % per_class < config.synth_per_class {
                    train.push(ex.clone());
                } else {
                    test.push(ex.clone());
                }
            }
            Ok((
                Dataset::new(config.synth_classes, config.synth_dim, train)?,
                Dataset::new(config.synth_classes, config.synth_dim, test)?,
            ))
        }
        DatasetKind::Mnist => {
            let train = load_mnist_idx(
                config.mnist_train_images.as_ref().expect("validated"),
                config.mnist_train_labels.as_ref().expect("validated"),
            )?;
            let test = load_mnist_idx(
                config.mnist_test_images.as_ref().expect("validated"),
                config.mnist_test_labels.as_ref().expect("validated"),
            )?;
            Ok((train, test))
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Fraction of test examples whose argmax prediction matches the ground
/// truth.
pub fn evaluate(params: &ParamVector, arch: &ModelArch, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    if test.input_dim != arch.input_dim || params.len() != arch.param_count() {
        return Err(Error::Config(format!(
            "evaluation dimensions disagree: test dim {}, arch dim {}, params {}",
            test.input_dim,
            arch.input_dim,
            params.len()
        )));
    }
    let correct = par::count_matching(test.examples(), |ex| {
        let pred = forward(params, arch, ex.features()).expect("dims pre-checked");
        usize::from(pred.argmax() == ex.true_label())
    });
    Ok(correct as f64 / test.len() as f64)
}

// ---------------------------------------------------------------------------
// The round loop
// ---------------------------------------------------------------------------

fn augment_params(config: &ExperimentConfig) -> AugmentParams {
    let image_side = match config.dataset {
        DatasetKind::Mnist => Some(28),
        DatasetKind::Synthetic => None,
    };
    AugmentParams {
        weak_noise: config.weak_noise,
        strong_noise: config.strong_noise,
        mask_fraction: config.mask_fraction,
        shift_pixels: config.shift_pixels,
        image_side,
    }
}

/// Runs the full experiment described by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let knobs = resolve_mode(config);
    let (train, test) = build_datasets(config)?;
    let arch = ModelArch::new(
        train.input_dim,
        config.hidden_dims.clone(),
        train.num_classes,
    )?;

    let plan = PartitionPlan::new(
        config.gamma,
        config.clients,
        config.regime,
        config.class_fraction,
        config.seed,
    )?;
    let (labeled, shards) = build_partition(&train, &plan)?;

    let mut states: Vec<Option<ClientState>> = shards
        .into_iter()
        .map(|shard| {
            let seed = rng::derive_seed(config.seed, &[CLIENT_SEED_TAG, shard.client_id() as u64]);
            Some(ClientState::new(shard, seed))
        })
        .collect();

    let settings = TrainSettings {
        local_epochs: config.local_epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        tau: config.tau,
        promote_t: knobs.promote_t,
        agree_t: config.agree_t,
        coef_unsup_ce: config.coef_unsup_ce,
        coef_kl: knobs.coef_kl,
        coef_pseudo: config.coef_pseudo,
        credibility_enabled: knobs.credibility_enabled,
        augment: augment_params(config),
    };

    let mut global = init_params(&arch, config.seed);
    let mut trace = ConvergenceTrace::new(MONITOR_WINDOW);
    let mut records = Vec::with_capacity(config.rounds);
    let initial_accuracy = evaluate(&global, &arch, &test)?;
    let mut accuracy = initial_accuracy;

    for round in 1..=config.rounds as u64 {
        let started = Instant::now();

        // The reference weights depend only on the current global weights,
        // never on this round's uploads.
        let reference = server_supervised_update(
            &global,
            &arch,
            &labeled,
            config.server_epochs,
            config.batch_size,
            config.lr,
            config.seed,
            round,
        )
        .map_err(|e| Error::Training(format!("round {round}: {e}")))?;

        let (next_global, gates, included_count, delta_norm, selected) =
            if config.mode == Mode::ServerOnly {
                let delta = reference.delta(&global);
                let delta_norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                (reference.clone(), Vec::new(), 0, delta_norm, Vec::new())
            } else {
                let selected =
                    select_clients(config.clients, config.clients_per_round, config.seed, round)?;

                // Move the selected states out, train in parallel against
                // immutable broadcast snapshots, then put them back in
                // selection order.
                let jobs: Vec<(usize, ClientState)> = selected
                    .iter()
                    .map(|&id| {
                        let state = states[id].take().expect("client state present");
                        (id, state)
                    })
                    .collect();
                let results = par::map_vec(jobs, |(id, mut state)| {
                    let outcome =
                        client_round(&mut state, &arch, &global, &reference, round, &settings);
                    (id, state, outcome)
                });

                let mut uploads = Vec::with_capacity(results.len());
                for (id, state, outcome) in results {
                    states[id] = Some(state);
                    let outcome = outcome.map_err(|e| {
                        Error::Training(format!("round {round}, client {id}: {e}"))
                    })?;
                    uploads.push(ClientUpload {
                        client_id: id,
                        params: outcome.params,
                    });
                }

                let (next, report) =
                    aggregate(&global, &reference, &uploads, knobs.gate_threshold)?;
                (
                    next,
                    report.gates,
                    report.included_count,
                    report.delta_norm,
                    selected,
                )
            };

        trace.record_norm(delta_norm);
        global = next_global;

        if round % config.eval_every as u64 == 0 || round == config.rounds as u64 {
            accuracy = evaluate(&global, &arch, &test)?;
        }

        let pseudo_sizes: Vec<usize> = states
            .iter()
            .map(|s| s.as_ref().map_or(0, |st| st.pseudo_set.len()))
            .collect();
        let pseudo_total = pseudo_sizes.iter().sum();
        records.push(RoundRecord {
            round,
            selected,
            included_count,
            delta_norm,
            pseudo_sizes,
            pseudo_total,
            accuracy,
            wall_clock_ms: started.elapsed().as_millis() as u64,
            gates,
        });
    }

    Ok(RunOutcome {
        config: config.clone(),
        arch,
        records,
        trace,
        final_params: global,
        initial_accuracy,
        final_accuracy: accuracy,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// One persisted file.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
}

/// Paths and sizes of everything a run wrote.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Serializes the run: `metrics.csv` (one row per round),
/// `aggregation.csv` (one row per gated upload), `convergence.csv`,
/// `config.json` with the config hash, binary + JSON checkpoints,
/// `summary.json`, and `manifest.json` listing it all. Every text artifact
/// carries the config hash.
pub fn persist(outcome: &RunOutcome, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = outcome.config.hash();
    let mut written: Vec<PathBuf> = Vec::new();

    let mut metrics = format!("# config_hash={hash}\n");
    metrics.push_str("round,selected,included,delta_norm,pseudo_total,pseudo_sizes,accuracy\n");
    for r in &outcome.records {
        let selected: Vec<String> = r.selected.iter().map(|id| id.to_string()).collect();
        let sizes: Vec<String> = r.pseudo_sizes.iter().map(|s| s.to_string()).collect();
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            selected.join(";"),
            r.included_count,
            r.delta_norm,
            r.pseudo_total,
            sizes.join(";"),
            r.accuracy
        ));
    }
    written.push(write_file(out_dir, "metrics.csv", &metrics)?);

    let mut agg = format!("# config_hash={hash}\n");
    agg.push_str("round,client_id,similarity,gate,delta_norm\n");
    for r in &outcome.records {
        for g in &r.gates {
            agg.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round,
                g.client_id,
                g.similarity,
                u8::from(g.included),
                r.delta_norm
            ));
        }
    }
    written.push(write_file(out_dir, "aggregation.csv", &agg)?);

    let convergence = format!("# config_hash={hash}\n{}", outcome.trace.to_csv());
    written.push(write_file(out_dir, "convergence.csv", &convergence)?);

    #[derive(Serialize)]
    struct ConfigDoc<'a> {
        config: &'a ExperimentConfig,
        config_hash: &'a str,
    }
    let config_json = serde_json::to_string_pretty(&ConfigDoc {
        config: &outcome.config,
        config_hash: &hash,
    })
    .expect("config serializes");
    written.push(write_file(out_dir, "config.json", &config_json)?);

    let ckpt_path = out_dir.join("checkpoint.fdil");
    save_checkpoint(&ckpt_path, &outcome.final_params)?;
    written.push(ckpt_path);
    let ckpt_json = out_dir.join("checkpoint.json");
    export_checkpoint_json(&ckpt_json, &outcome.final_params)?;
    written.push(ckpt_json);

    #[derive(Serialize)]
    struct Summary<'a> {
        config_hash: &'a str,
        mode: String,
        rounds: usize,
        initial_accuracy: f64,
        final_accuracy: f64,
        final_pseudo_total: usize,
        contracting: Option<bool>,
        q_max: Option<f64>,
    }
    let verdict = outcome.verdict();
    let summary = serde_json::to_string_pretty(&Summary {
        config_hash: &hash,
        mode: outcome.config.mode.to_string(),
        rounds: outcome.config.rounds,
        initial_accuracy: outcome.initial_accuracy,
        final_accuracy: outcome.final_accuracy,
        final_pseudo_total: outcome
            .records
            .last()
            .map_or(0, |r| r.pseudo_total),
        contracting: verdict.map(|v| v.contracting),
        q_max: verdict.and_then(|v| v.q_max),
    })
    .expect("summary serializes");
    written.push(write_file(out_dir, "summary.json", &summary)?);

    let mut entries = Vec::with_capacity(written.len() + 1);
    for path in &written {
        let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        entries.push(ManifestEntry {
            file: path
                .file_name()
                .expect("named file")
                .to_string_lossy()
                .into_owned(),
            bytes: meta.len(),
        });
    }
    let manifest = Manifest {
        config_hash: hash,
        entries,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(out_dir, "manifest.json", &manifest_json)?;
    Ok(manifest)
}

/// `run_experiment` followed by `persist`.
pub fn run_and_persist(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let outcome = run_experiment(config)?;
    persist(&outcome, out_dir)?;
    Ok(outcome)
}

/// Re-export for downstream callers that only need the gate default.
pub use server::DEFAULT_GATE_THRESHOLD;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.rounds = 6;
        config.clients = 4;
        config.clients_per_round = 2;
        config.synth_per_class = 40;
        config.synth_test_per_class = 30;
        config.synth_dim = 4;
        config.hidden_dims = vec![8];
        config.local_epochs = 2;
        config.eval_every = 3;
        config.seed = 7;
        config
    }

    #[test]
    fn run_produces_one_record_per_round() {
        let config = tiny_config();
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.records.len(), 6);
        for (i, r) in outcome.records.iter().enumerate() {
            assert_eq!(r.round, i as u64 + 1);
            assert_eq!(r.selected.len(), 2);
            assert!(r.accuracy >= 0.0 && r.accuracy <= 1.0);
        }
        assert_eq!(outcome.trace.len(), 6);
    }

    #[test]
    fn zero_rounds_outputs_initialization_only() {
        let mut config = tiny_config();
        config.rounds = 0;
        let outcome = run_experiment(&config).unwrap();
        assert!(outcome.records.is_empty());
        assert_eq!(outcome.final_accuracy, outcome.initial_accuracy);

        let dir = tempfile::tempdir().unwrap();
        let manifest = persist(&outcome, dir.path()).unwrap();
        assert!(manifest.entries.iter().any(|e| e.file == "metrics.csv"));
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 2, "hash comment + header only");
    }

    #[test]
    fn identical_configs_are_bitwise_identical() {
        let config = tiny_config();
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.final_params.values(), b.final_params.values());

        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        persist(&a, dir_a.path()).unwrap();
        persist(&b, dir_b.path()).unwrap();
        for file in ["metrics.csv", "aggregation.csv", "convergence.csv"] {
            let x = std::fs::read(dir_a.path().join(file)).unwrap();
            let y = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(x, y, "{file} differs between identical runs");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let config = tiny_config();
        let mut other = tiny_config();
        other.seed = 8;
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&other).unwrap();
        assert_ne!(a.final_params.values(), b.final_params.values());
    }

    #[test]
    fn server_only_matches_standalone_supervised_loop() {
        let mut config = tiny_config();
        config.mode = Mode::ServerOnly;
        config.rounds = 5;
        let outcome = run_experiment(&config).unwrap();

        // Replay the same schedule directly against the module API.
        let (train, test) = build_datasets(&config).unwrap();
        let arch = ModelArch::new(
            train.input_dim,
            config.hidden_dims.clone(),
            train.num_classes,
        )
        .unwrap();
        let plan = PartitionPlan::new(
            config.gamma,
            config.clients,
            config.regime,
            config.class_fraction,
            config.seed,
        )
        .unwrap();
        let (labeled, _) = build_partition(&train, &plan).unwrap();
        let mut params = init_params(&arch, config.seed);
        for round in 1..=5u64 {
            params = server_supervised_update(
                &params,
                &arch,
                &labeled,
                config.server_epochs,
                config.batch_size,
                config.lr,
                config.seed,
                round,
            )
            .unwrap();
        }
        assert_eq!(outcome.final_params.values(), params.values());
        let acc = evaluate(&params, &arch, &test).unwrap();
        assert_eq!(outcome.final_accuracy, acc);
    }

    #[test]
    fn evaluate_agrees_with_confusion_matrix_tally() {
        let config = tiny_config();
        let (train, test) = build_datasets(&config).unwrap();
        let arch = ModelArch::new(train.input_dim, vec![6], train.num_classes).unwrap();
        let params = init_params(&arch, 3);
        let acc = evaluate(&params, &arch, &test).unwrap();

        // Independent tally through an explicit confusion matrix.
        let c = test.num_classes;
        let mut confusion = vec![vec![0usize; c]; c];
        for ex in test.examples() {
            let pred = forward(&params, &arch, ex.features()).unwrap().argmax();
            confusion[ex.true_label()][pred] += 1;
        }
        let diag: usize = (0..c).map(|i| confusion[i][i]).sum();
        let total: usize = confusion.iter().flatten().sum();
        assert_eq!(acc, diag as f64 / total as f64);
    }

    #[test]
    fn evaluate_chance_level_for_uniform_predictions() {
        // Zero weights predict uniformly; argmax ties break to class 0, so
        // accuracy equals class 0's share of a balanced test set.
        let config = tiny_config();
        let (train, test) = build_datasets(&config).unwrap();
        let arch = ModelArch::new(train.input_dim, vec![], train.num_classes).unwrap();
        let zeros = ParamVector::zeros(&arch);
        let acc = evaluate(&zeros, &arch, &test).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.05, "chance accuracy {acc}");
    }

    #[test]
    fn evaluate_memorized_set_scores_one() {
        // A saturated linear model on two point masses: every prediction
        // matches its label exactly.
        let arch = ModelArch::new(2, vec![], 2).unwrap();
        let params =
            ParamVector::new(vec![60.0, -60.0, -60.0, 60.0, 0.0, 0.0], &arch).unwrap();
        let examples: Vec<crate::data::Example> = (0..10)
            .map(|i| {
                let class = i % 2;
                let features = if class == 0 {
                    vec![1.0 + i as f64 * 0.01, 0.0]
                } else {
                    vec![0.0, 1.0 + i as f64 * 0.01]
                };
                crate::data::Example::new(crate::data::ExampleId(i as u64), features, class)
            })
            .collect();
        let memorized = Dataset::new(2, 2, examples).unwrap();
        assert_eq!(evaluate(&params, &arch, &memorized).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_rejects_empty_test_set() {
        let arch = ModelArch::new(2, vec![], 2).unwrap();
        let params = ParamVector::zeros(&arch);
        let empty = Dataset::new(2, 2, vec![]).unwrap();
        assert!(matches!(
            evaluate(&params, &arch, &empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_and_test_ids_are_disjoint() {
        let config = tiny_config();
        let (train, test) = build_datasets(&config).unwrap();
        let train_ids: std::collections::HashSet<_> =
            train.examples().iter().map(|e| e.id()).collect();
        for ex in test.examples() {
            assert!(!train_ids.contains(&ex.id()));
        }
        assert_eq!(train.len(), 3 * 40);
        assert_eq!(test.len(), 3 * 30);
    }

    #[test]
    fn training_structures_never_include_test_ids() {
        // The access audit: everything a round can read (labeled set and
        // client shards) is built from train ids only.
        let config = tiny_config();
        let (train, test) = build_datasets(&config).unwrap();
        let plan = PartitionPlan::new(
            config.gamma,
            config.clients,
            config.regime,
            config.class_fraction,
            config.seed,
        )
        .unwrap();
        let (labeled, shards) = build_partition(&train, &plan).unwrap();
        let test_ids: std::collections::HashSet<_> =
            test.examples().iter().map(|e| e.id()).collect();
        for id in labeled.ids() {
            assert!(!test_ids.contains(&id));
        }
        for shard in &shards {
            for id in shard.ids() {
                assert!(!test_ids.contains(&id));
            }
        }
    }

    #[test]
    fn persist_writes_consistent_hashes() {
        let mut config = tiny_config();
        config.rounds = 3;
        let outcome = run_experiment(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = persist(&outcome, dir.path()).unwrap();

        // Recompute the hash from config.json and compare everywhere.
        let config_text = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&config_text).unwrap();
        let loaded: ExperimentConfig =
            serde_json::from_value(doc["config"].clone()).unwrap();
        let recomputed = loaded.hash();
        assert_eq!(doc["config_hash"], recomputed.as_str());
        assert_eq!(manifest.config_hash, recomputed);
        for file in ["metrics.csv", "aggregation.csv", "convergence.csv"] {
            let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
            let first = text.lines().next().unwrap();
            assert_eq!(first, format!("# config_hash={recomputed}"), "{file}");
        }
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary["config_hash"], recomputed.as_str());

        // metrics.csv has one data row per round.
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 2 + 3);
    }

    #[test]
    fn checkpoint_round_trip_preserves_accuracy() {
        let config = tiny_config();
        let outcome = run_experiment(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist(&outcome, dir.path()).unwrap();

        let loaded = crate::model::load_checkpoint(&dir.path().join("checkpoint.fdil")).unwrap();
        assert_eq!(loaded.values(), outcome.final_params.values());
        let (_, test) = build_datasets(&config).unwrap();
        let acc = evaluate(&loaded, &outcome.arch, &test).unwrap();
        assert_eq!(acc, outcome.final_accuracy);
    }

    #[test]
    fn fedavg_mode_runs_and_reports_all_gates_open() {
        let mut config = tiny_config();
        config.mode = Mode::Fedavg;
        let outcome = run_experiment(&config).unwrap();
        for r in &outcome.records {
            assert_eq!(r.included_count, r.selected.len());
            assert!(r.gates.iter().all(|g| g.included));
            assert_eq!(r.pseudo_total, 0, "no promotion in fedavg mode");
        }
    }
}
