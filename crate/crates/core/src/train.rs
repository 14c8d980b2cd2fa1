//! Deterministic single-worker training loop: mini-batch transducer loss,
//! Adam updates with an optional frontend freeze, per-epoch dev loss and
//! greedy dev PER, best-checkpoint tracking and early stopping.
//!
//! Feature extraction is a pure per-utterance function and runs as a
//! parallel prefetch; gradient computation and parameter updates stay on one
//! worker so runs are bit-reproducible under a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamParams, ParamBinder, Tape, Tensor};
use crate::eval;
use crate::lexicon::{encode, Inventory, LexiconError, Vocabulary};
use crate::model::{Model, ModelConfig, ModelError, PitchInput, PitchVariant};
use crate::signal::{corpus_pitch_stats, estimate_f0, wav, PitchTrack, SignalError};
use crate::synth::{audio_path, load_manifest, ManifestRecord, SynthError};
use crate::util::par_map;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("signal: {0}")]
    Signal(#[from] SignalError),
    #[error("manifest: {0}")]
    Manifest(#[from] SynthError),
    #[error("lexicon: {0}")]
    Lexicon(#[from] LexiconError),
    #[error("optimizer: {0}")]
    Optim(#[from] crate::autodiff::OptimError),
    #[error("evaluation: {0}")]
    Eval(#[from] eval::EvalError),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("empty manifest {0}")]
    EmptyManifest(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}; batch dumped to {dump}")]
    Diverged { epoch: usize, step: u64, loss: f64, dump: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn code(&self) -> &'static str {
        match self {
            TrainError::Model(e) => e.code(),
            TrainError::Signal(e) => e.code(),
            TrainError::Manifest(e) => e.code(),
            TrainError::Lexicon(e) => e.code(),
            TrainError::Optim(_) => "optimizer",
            TrainError::Eval(e) => e.code(),
            TrainError::ConfigMismatch(_) => "config_mismatch",
            TrainError::EmptyManifest(_) => "empty_manifest",
            TrainError::Diverged { .. } => "diverged",
            TrainError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cosine-decay floor: the learning rate anneals from `lr` to
    /// `lr * lr_final_fraction` over `max_epochs`.
    pub lr_final_fraction: f64,
    /// Linear warmup epochs before the cosine decay starts.
    pub warmup_epochs: usize,
    /// Global L2 gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Optimizer steps during which `frontend.*` parameters stay fixed.
    pub freeze_frontend_steps: u64,
    /// Epochs without dev-loss improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Stop as soon as the dev PER reaches zero (overfitting smoke tests).
    pub stop_at_zero_dev_per: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_final_fraction: 0.1,
            warmup_epochs: 5,
            grad_clip: 5.0,
            batch_size: 8,
            max_epochs: 100,
            seed: 0,
            freeze_frontend_steps: 0,
            early_stop_patience: 10,
            stop_at_zero_dev_per: false,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let total = self.max_epochs.saturating_sub(self.warmup_epochs).max(2);
        let progress = (epoch - self.warmup_epochs) as f64 / (total - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.lr * (self.lr_final_fraction + (1.0 - self.lr_final_fraction) * cos)
    }
}

/// Cached features and targets of one utterance.
pub struct PreparedUtterance {
    pub utt_id: String,
    pub feats: Tensor,
    pub pitch: PitchInput,
    pub labels: Vec<usize>,
    /// Annotated phoneme token strings (dev PER reference).
    pub annotated_tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_per: f64,
    pub dev_tone_sub_per: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
    pub model: Model,
}

/// Extracts F0 tracks and log-mel features for a manifest, in parallel.
fn extract_features(
    manifest_path: &Path,
    records: &[ManifestRecord],
    cfg: &ModelConfig,
) -> Result<Vec<(Tensor, PitchTrack)>, TrainError> {
    let results = par_map(records, |r| -> Result<(Tensor, PitchTrack), TrainError> {
        let wave = wav::read_wav(&audio_path(manifest_path, r))?;
        let feats = crate::model::log_mel(&wave, cfg.n_mels)?;
        let track = estimate_f0(&wave, cfg.pitch_hop_ms, cfg.f0_floor, cfg.f0_ceil)?;
        Ok((feats, track))
    });
    results.into_iter().collect()
}

fn prepare(
    records: &[ManifestRecord],
    features: Vec<(Tensor, PitchTrack)>,
    model: &Model,
    inventory: &Inventory,
    vocab: &Vocabulary,
) -> Result<Vec<PreparedUtterance>, TrainError> {
    records
        .iter()
        .zip(features)
        .map(|(r, (feats, track))| {
            let phonemes = inventory.parse_transcript(&r.annotated.join(" "))?;
            let labels = encode(&phonemes, vocab)?;
            Ok(PreparedUtterance {
                utt_id: r.utt_id.clone(),
                feats,
                pitch: model.pitch_input(&track)?,
                labels: labels.ids().to_vec(),
                annotated_tokens: phonemes.iter().map(|p| p.to_string()).collect(),
            })
        })
        .collect()
}

/// Decoded ids as phoneme token strings.
pub fn ids_to_tokens(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter_map(|&id| vocab.token(id).map(String::from))
        .collect()
}

/// Mean loss, PER and tone-substitution PER of a frozen model on a prepared
/// set (utterances in parallel, reductions in input order).
pub fn evaluate_prepared(
    model: &Model,
    vocab: &Vocabulary,
    set: &[PreparedUtterance],
) -> Result<(f64, f64, f64), TrainError> {
    let losses = par_map(set, |u| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let mut ps = ParamBinder::new();
        let loss = model.utterance_loss(&mut tape, &mut ps, &u.feats, &u.pitch, &u.labels)?;
        Ok(tape.value(loss)[0])
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let mean_loss = total / set.len() as f64;

    let hyps = par_map(set, |u| model.greedy_decode(&u.feats, &u.pitch));
    let mut edits = eval::EditCounts::default();
    for (u, ids) in set.iter().zip(hyps) {
        let tokens = ids_to_tokens(&ids?, vocab);
        edits = edits.merge(&eval::edit_stats(&u.utt_id, &u.annotated_tokens, &tokens)?);
    }
    let per = edits.total_edits() as f64 / edits.ref_len as f64;
    let tone_sub = edits.tone_substitutions as f64 / edits.ref_len as f64;
    Ok((mean_loss, per, tone_sub))
}

/// Trains a model on the given manifests, writing `best/` and `last/`
/// checkpoints (parameters, config and vocabulary) under `out_dir`.
pub fn train(
    mut model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    inventory: &Inventory,
    train_manifest: &Path,
    dev_manifest: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate().map_err(TrainError::Model)?;
    let vocab = Vocabulary::from_inventory(inventory);
    if vocab.size() != model_cfg.vocab_size {
        return Err(TrainError::ConfigMismatch(format!(
            "vocab_size: config says {}, inventory yields {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    let train_records = load_manifest(train_manifest)?;
    let dev_records = load_manifest(dev_manifest)?;
    if train_records.is_empty() {
        return Err(TrainError::EmptyManifest(train_manifest.display().to_string()));
    }
    if dev_records.is_empty() {
        return Err(TrainError::EmptyManifest(dev_manifest.display().to_string()));
    }
    fs::create_dir_all(out_dir)?;

    let train_features = extract_features(train_manifest, &train_records, &model_cfg)?;
    let dev_features = extract_features(dev_manifest, &dev_records, &model_cfg)?;

    // Coarse quantization normalizes by train-corpus statistics, persisted
    // in the config so decoding reuses the same range.
    if model_cfg.pitch_variant == PitchVariant::Coarse && model_cfg.pitch_stats.is_none() {
        let tracks: Vec<PitchTrack> = train_features.iter().map(|(_, t)| t.clone()).collect();
        let stats = corpus_pitch_stats(&tracks, model_cfg.f0_floor, model_cfg.f0_ceil)?;
        model_cfg.pitch_stats = Some(crate::model::PitchStatsConfig {
            min_hz: stats.min_hz,
            max_hz: stats.max_hz,
        });
    }

    let mut model = Model::init(model_cfg, train_cfg.seed)?;
    let train_set = prepare(&train_records, train_features, &model, inventory, &vocab)?;
    let dev_set = prepare(&dev_records, dev_features, &model, inventory, &vocab)?;

    let mut optimizer = Adam::new(AdamParams { lr: train_cfg.lr, ..AdamParams::default() });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    let best_dir = out_dir.join("best");
    let last_dir = out_dir.join("last");

    let mut history = Vec::new();
    let mut best_dev_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;
    let mut global_step: u64 = 0;

    for epoch in 0..train_cfg.max_epochs {
        optimizer.hp.lr = train_cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut ps = ParamBinder::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let u = &train_set[idx];
                losses.push(model.utterance_loss(&mut tape, &mut ps, &u.feats, &u.pitch, &u.labels)?);
            }
            let stacked = tape.concat(0, &losses);
            let batch_loss = tape.mean(stacked);
            let loss_value = tape.value(batch_loss)[0];
            if !loss_value.is_finite() {
                let dump = out_dir.join("diverged_batch.json");
                let detail: Vec<_> = chunk
                    .iter()
                    .zip(&losses)
                    .map(|(&idx, &l)| {
                        serde_json::json!({
                            "utt_id": train_set[idx].utt_id,
                            "loss": tape.value(l)[0],
                        })
                    })
                    .collect();
                fs::write(
                    &dump,
                    serde_json::to_string_pretty(&serde_json::json!({
                        "epoch": epoch,
                        "step": global_step,
                        "batch": detail,
                    }))
                    .expect("dump json"),
                )?;
                return Err(TrainError::Diverged {
                    epoch,
                    step: global_step,
                    loss: loss_value,
                    dump: dump.display().to_string(),
                });
            }
            epoch_loss += loss_value;
            batches += 1;

            let grads = tape.backward(batch_loss);
            model.zero_grads();
            model.apply_grads(&ps, &grads);
            if train_cfg.grad_clip > 0.0 {
                clip_global_norm(&mut model, train_cfg.grad_clip);
            }
            let frozen = global_step < train_cfg.freeze_frontend_steps;
            let updates = model
                .named_params_mut()
                .into_iter()
                .filter(|(name, _)| !(frozen && name.starts_with("frontend.")))
                .filter(|(_, t)| t.grad.is_some());
            optimizer.step(updates)?;
            global_step += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let (dev_loss, dev_per, dev_tone_sub_per) = evaluate_prepared(&model, &vocab, &dev_set)?;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} dev_loss {dev_loss:.4} dev_per {dev_per:.4} dev_tone_sub {dev_tone_sub_per:.4}"
        );
        history.push(EpochStats { epoch, train_loss, dev_loss, dev_per, dev_tone_sub_per });

        if train_cfg.stop_at_zero_dev_per && dev_per == 0.0 {
            best_dev_loss = dev_loss;
            best_epoch = epoch;
            save_checkpoint_with_vocab(&model, &vocab, &best_dir)?;
            log::info!("dev PER reached zero at epoch {epoch}; stopping");
            break;
        }
        if dev_loss < best_dev_loss {
            best_dev_loss = dev_loss;
            best_epoch = epoch;
            since_best = 0;
            save_checkpoint_with_vocab(&model, &vocab, &best_dir)?;
        } else {
            since_best += 1;
            if train_cfg.early_stop_patience > 0 && since_best >= train_cfg.early_stop_patience {
                log::info!("early stop at epoch {epoch} (best {best_epoch})");
                break;
            }
        }
    }
    save_checkpoint_with_vocab(&model, &vocab, &last_dir)?;
    fs::write(
        out_dir.join("history.json"),
        serde_json::to_string_pretty(&history).expect("history json"),
    )?;
    Ok(TrainOutcome { history, best_epoch, best_dev_loss, best_dir, last_dir, model })
}

/// Rescales all gradients when the global L2 norm exceeds `cap`.
fn clip_global_norm(model: &mut Model, cap: f64) {
    let mut sq = 0.0;
    for (_, t) in model.named_params() {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > cap {
        let scale = cap / norm;
        for (_, t) in model.named_params_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

/// Writes a checkpoint directory including the vocabulary token list.
pub fn save_checkpoint_with_vocab(
    model: &Model,
    vocab: &Vocabulary,
    dir: &Path,
) -> Result<(), TrainError> {
    model.save_checkpoint(dir)?;
    fs::write(dir.join("vocab.txt"), vocab.tokens().join("\n") + "\n")?;
    Ok(())
}

/// Loads a checkpoint directory back into a model plus its vocabulary.
pub fn load_checkpoint_with_vocab(dir: &Path) -> Result<(Model, Vocabulary), TrainError> {
    let model = Model::load_checkpoint(dir)?;
    let text = fs::read_to_string(dir.join("vocab.txt"))?;
    let tokens: Vec<String> = text.lines().map(String::from).collect();
    let vocab = Vocabulary::from_tokens(tokens)?;
    if vocab.size() != model.config.vocab_size {
        return Err(TrainError::ConfigMismatch(format!(
            "vocab_size: checkpoint config says {}, vocab.txt has {}",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    Ok((model, vocab))
}
