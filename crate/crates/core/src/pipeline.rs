//! End-to-end wiring: decoding a manifest with a frozen checkpoint,
//! evaluating predictions against a manifest, and the full
//! generate-train-decode-evaluate pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalRecord, MddReport, UtteranceEval};
use crate::lexicon::{Inventory, LexiconError, Vocabulary};
use crate::model::{Model, ModelConfig, ModelError};
use crate::signal::{estimate_f0, wav, SignalError};
use crate::synth::{
    audio_path, datagen, load_manifest, DatagenConfig, ManifestRecord, SynthError,
};
use crate::train::{ids_to_tokens, load_checkpoint_with_vocab, train, TrainConfig, TrainError};
use crate::util::par_map;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("signal: {0}")]
    Signal(#[from] SignalError),
    #[error("manifest: {0}")]
    Manifest(#[from] SynthError),
    #[error("lexicon: {0}")]
    Lexicon(#[from] LexiconError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("eval: {0}")]
    Eval(#[from] eval::EvalError),
    #[error("predictions line {0}: {1}")]
    BadPredictionLine(usize, String),
    #[error("predictions cover {predictions} utterances, manifest has {manifest}; first unmatched: {first:?}")]
    PredictionMismatch { predictions: usize, manifest: usize, first: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Model(e) => e.code(),
            PipelineError::Signal(e) => e.code(),
            PipelineError::Manifest(e) => e.code(),
            PipelineError::Lexicon(e) => e.code(),
            PipelineError::Train(e) => e.code(),
            PipelineError::Eval(e) => e.code(),
            PipelineError::BadPredictionLine(..) => "bad_prediction_line",
            PipelineError::PredictionMismatch { .. } => "prediction_mismatch",
            PipelineError::Io(_) => "io",
        }
    }
}

/// One decoded hypothesis as a JSON-lines record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub utt_id: String,
    pub phonemes: Vec<String>,
}

/// Greedy-decodes every utterance of a manifest with a frozen model,
/// utterances in parallel, output in manifest order.
pub fn decode_corpus(
    model: &Model,
    vocab: &Vocabulary,
    manifest_path: &Path,
    records: &[ManifestRecord],
) -> Result<Vec<Prediction>, PipelineError> {
    let results = par_map(records, |r| -> Result<Prediction, PipelineError> {
        let wave = wav::read_wav(&audio_path(manifest_path, r))?;
        let feats = model.features(&wave)?;
        let track = estimate_f0(
            &wave,
            model.config.pitch_hop_ms,
            model.config.f0_floor,
            model.config.f0_ceil,
        )?;
        let pitch = model.pitch_input(&track)?;
        let ids = model.greedy_decode(&feats, &pitch)?;
        Ok(Prediction { utt_id: r.utt_id.clone(), phonemes: ids_to_tokens(&ids, vocab) })
    });
    results.into_iter().collect()
}

pub fn save_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), PipelineError> {
    let mut lines = String::new();
    for p in predictions {
        lines.push_str(&serde_json::to_string(p).expect("prediction record"));
        lines.push('\n');
    }
    fs::write(path, lines)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::BadPredictionLine(i + 1, e.to_string()))
        })
        .collect()
}

/// Joins manifest truth with predictions into evaluation records, parsing
/// syllables into phoneme token strings against `inventory`.
pub fn eval_records(
    inventory: &Inventory,
    records: &[ManifestRecord],
    predictions: &[Prediction],
) -> Result<Vec<EvalRecord>, PipelineError> {
    use std::collections::HashMap;
    let by_id: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.utt_id.as_str(), p)).collect();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let Some(pred) = by_id.get(r.utt_id.as_str()) else {
            return Err(PipelineError::PredictionMismatch {
                predictions: predictions.len(),
                manifest: records.len(),
                first: r.utt_id.clone(),
            });
        };
        let to_tokens = |syllables: &[String]| -> Result<Vec<String>, PipelineError> {
            Ok(inventory
                .parse_transcript(&syllables.join(" "))?
                .iter()
                .map(|p| p.to_string())
                .collect())
        };
        out.push(EvalRecord {
            utt_id: r.utt_id.clone(),
            canonical: to_tokens(&r.canonical)?,
            annotated: to_tokens(&r.annotated)?,
            predicted: pred.phonemes.clone(),
        });
    }
    Ok(out)
}

/// Decode + evaluate with a checkpoint directory against a manifest.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    inventory: &Inventory,
    manifest_path: &Path,
) -> Result<(Vec<Prediction>, Vec<UtteranceEval>, MddReport), PipelineError> {
    let (model, vocab) = load_checkpoint_with_vocab(checkpoint)?;
    let records = load_manifest(manifest_path)?;
    let predictions = decode_corpus(&model, &vocab, manifest_path, &records)?;
    let evals_in = eval_records(inventory, &records, &predictions)?;
    let (per_utt, report) = eval::evaluate_corpus(&evals_in)?;
    Ok((predictions, per_utt, report))
}

/// Everything a full pipeline run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub datagen: DatagenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let datagen = DatagenConfig::default();
        let vocab = Vocabulary::from_inventory(&datagen.spec.inventory());
        let model = ModelConfig { vocab_size: vocab.size(), ..ModelConfig::default() };
        Self { datagen, model, train: TrainConfig::default() }
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: MddReport,
    pub predictions_path: PathBuf,
    pub report_path: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Generate, train, decode the eval split with the best checkpoint, and
/// evaluate. Everything lands under `out_dir`.
pub fn run_full_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome, PipelineError> {
    let data_dir = out_dir.join("data");
    let corpus = datagen(&cfg.datagen, &data_dir)?;
    let inventory = cfg.datagen.spec.inventory();
    let outcome = train(
        cfg.model.clone(),
        &cfg.train,
        &inventory,
        &corpus.train,
        &corpus.dev,
        &out_dir.join("train"),
    )?;
    let (predictions, per_utt, report) =
        evaluate_checkpoint(&outcome.best_dir, &inventory, &corpus.eval)?;
    let predictions_path = out_dir.join("predictions.jsonl");
    save_predictions(&predictions_path, &predictions)?;
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report json"))?;
    let per_utt_path = out_dir.join("per_utterance.jsonl");
    let mut lines = String::new();
    for u in &per_utt {
        lines.push_str(&serde_json::to_string(u).expect("per-utterance json"));
        lines.push('\n');
    }
    fs::write(per_utt_path, lines)?;
    Ok(PipelineOutcome {
        report,
        predictions_path,
        report_path,
        best_checkpoint: outcome.best_dir,
    })
}
