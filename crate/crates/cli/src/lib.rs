//! Command implementations behind the `tonemdd` binary. Kept in a library so
//! integration tests can drive them without spawning processes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use tonemdd::eval::MddReport;
use tonemdd::lexicon::Inventory;
use tonemdd::model::check::check_all_blocks;
use tonemdd::pipeline::{
    decode_corpus, eval_records, load_predictions, save_predictions, PipelineConfig,
};
use tonemdd::signal::{estimate_f0, wav, PitchRecord};
use tonemdd::synth::{audio_path, datagen, load_manifest};
use tonemdd::train::{load_checkpoint_with_vocab, train};
use tonemdd::util::par_map;

/// Error with a stable machine-parsable code; printed as
/// `error: <code>: <message>` on a single line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

fn err(code: &'static str, message: impl fmt::Display) -> CliError {
    CliError { code, message: message.to_string() }
}

macro_rules! from_core_error {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError { code: e.code(), message: e.to_string() }
            }
        }
    };
}

from_core_error!(tonemdd::signal::SignalError);
from_core_error!(tonemdd::lexicon::LexiconError);
from_core_error!(tonemdd::model::ModelError);
from_core_error!(tonemdd::synth::SynthError);
from_core_error!(tonemdd::train::TrainError);
from_core_error!(tonemdd::eval::EvalError);
from_core_error!(tonemdd::pipeline::PipelineError);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        err("io", e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tonemdd",
    about = "Pitch-aware stateless transducer MDD on a synthetic tonal language",
    after_help = "Environment: TONEMDD_LOG controls the log level (error|warn|info|debug)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Shared config handling: a JSON file with every field overridable through
/// repeated `--set dotted.path=value` flags.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Pipeline config JSON (defaults are used when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. --set model.d_enc=64 or
    /// --set datagen.spec.p_err=0.2. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<PipelineConfig, CliError> {
        let mut value: serde_json::Value = match &self.config {
            Some(path) => serde_json::from_str(
                &fs::read_to_string(path).map_err(|e| err("io", format!("{}: {e}", path.display())))?,
            )
            .map_err(|e| err("bad_config", format!("{}: {e}", path.display())))?,
            None => serde_json::to_value(PipelineConfig::default()).expect("default config"),
        };
        for set in &self.sets {
            let Some((key, raw)) = set.split_once('=') else {
                return Err(err("bad_override", format!("expected KEY=VALUE, got {set:?}")));
            };
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(*part))
                    .ok_or_else(|| err("bad_override", format!("unknown config path {key:?}")))?;
            }
            let map = node
                .as_object_mut()
                .ok_or_else(|| err("bad_override", format!("{key:?} does not address a field")))?;
            let leaf = parts.last().unwrap().to_string();
            if !map.contains_key(&leaf) {
                return Err(err("bad_override", format!("unknown config field {key:?}")));
            }
            map.insert(leaf, parsed);
        }
        serde_json::from_value(value).map_err(|e| err("bad_config", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InventoryKind {
    /// Toy inventory sized by the config's datagen.spec.
    Toy,
    /// The bundled full Mandarin inventory (215-token vocabulary).
    Mandarin,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic tonal corpus: WAVs plus train/dev/eval manifests.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate F0 for every utterance of a manifest and dump JSON-lines
    /// pitch records.
    ExtractPitch {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSON-lines file (one record per utterance).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best/ and last/ checkpoints under --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        dev_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a manifest with a trained checkpoint.
    Decode {
        /// Checkpoint directory (config.json + params.bin + vocab.txt).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output predictions JSON-lines: {utt_id, phonemes: [...]}.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a manifest: detection taxonomy, diagnosis
    /// split and derived rates.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Report JSON output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-utterance TSV dump.
        #[arg(long)]
        per_utt: Option<PathBuf>,
        /// Which inventory parses the manifest syllables.
        #[arg(long, value_enum, default_value_t = InventoryKind::Toy)]
        inventory: InventoryKind,
    },
    /// Finite-difference gradient checks over every model block of the
    /// configured architecture (run at reduced widths).
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = tonemdd::model::check::DEFAULT_CHECK_SEED)]
        seed: u64,
    },
}

fn inventory_for(kind: InventoryKind, cfg: &PipelineConfig) -> Inventory {
    match kind {
        InventoryKind::Toy => cfg.datagen.spec.inventory(),
        InventoryKind::Mandarin => Inventory::mandarin(),
    }
}

/// Runs one parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Datagen { config, out } => {
            let cfg = config.load()?;
            let corpus = datagen(&cfg.datagen, &out)?;
            println!("wrote {}", corpus.train.display());
            println!("wrote {}", corpus.dev.display());
            println!("wrote {}", corpus.eval.display());
            Ok(())
        }
        Command::ExtractPitch { config, manifest, out } => {
            let cfg = config.load()?;
            let records = load_manifest(&manifest)?;
            let model_cfg = &cfg.model;
            let tracks = par_map(&records, |r| -> Result<PitchRecord, CliError> {
                let wave = wav::read_wav(&audio_path(&manifest, r))?;
                let track = estimate_f0(
                    &wave,
                    model_cfg.pitch_hop_ms,
                    model_cfg.f0_floor,
                    model_cfg.f0_ceil,
                )?;
                Ok(PitchRecord::new(&r.utt_id, &track))
            });
            let mut lines = String::new();
            for t in tracks {
                lines.push_str(&serde_json::to_string(&t?).expect("pitch record"));
                lines.push('\n');
            }
            fs::write(&out, lines)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train { config, train_manifest, dev_manifest, out } => {
            let cfg = config.load()?;
            let inventory = cfg.datagen.spec.inventory();
            let outcome =
                train(cfg.model, &cfg.train, &inventory, &train_manifest, &dev_manifest, &out)?;
            let last = outcome.history.last().expect("at least one epoch");
            println!(
                "best epoch {} (dev loss {:.4}); final dev PER {:.4}; checkpoints in {}",
                outcome.best_epoch,
                outcome.best_dev_loss,
                last.dev_per,
                out.display()
            );
            Ok(())
        }
        Command::Decode { checkpoint, manifest, out } => {
            let (model, vocab) = load_checkpoint_with_vocab(&checkpoint)?;
            let records = load_manifest(&manifest)?;
            let predictions = decode_corpus(&model, &vocab, &manifest, &records)?;
            save_predictions(&out, &predictions)?;
            println!("wrote {} predictions to {}", predictions.len(), out.display());
            Ok(())
        }
        Command::Evaluate { config, manifest, predictions, out, per_utt, inventory } => {
            let cfg = config.load()?;
            let inv = inventory_for(inventory, &cfg);
            let records = load_manifest(&manifest)?;
            let preds = load_predictions(&predictions)?;
            let eval_in = eval_records(&inv, &records, &preds)?;
            let (per_utterance, report) = tonemdd::eval::evaluate_corpus(&eval_in)?;
            write_report(&report, out.as_deref())?;
            if let Some(path) = per_utt {
                write_per_utterance_tsv(&per_utterance, &path)?;
            }
            Ok(())
        }
        Command::Gradcheck { config, seed } => {
            let cfg = config.load()?;
            let reports = check_all_blocks(&cfg.model, seed)?;
            let mut all_pass = true;
            for (block, report) in &reports {
                println!(
                    "{}: {} (max rel err {:.3e}, tol {:.0e}, {} entries)",
                    block,
                    if report.pass { "PASS" } else { "FAIL" },
                    report.max_rel_err,
                    report.tol,
                    report.checked
                );
                all_pass &= report.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(err("gradcheck_failed", "one or more blocks failed the gradient check"))
            }
        }
    }
}

fn write_report(report: &MddReport, out: Option<&Path>) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(report).expect("report json");
    match out {
        Some(path) => {
            fs::write(path, body)?;
            println!("wrote {}", path.display());
        }
        None => println!("{body}"),
    }
    Ok(())
}

fn write_per_utterance_tsv(
    evals: &[tonemdd::eval::UtteranceEval],
    path: &Path,
) -> Result<(), CliError> {
    let mut tsv = String::from("utt_id\tta\tfr\tfa\ttr\tcd\tde\tsub\tdel\tins\tref_len\n");
    for e in evals {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.utt_id,
            e.counts.ta,
            e.counts.fr,
            e.counts.fa,
            e.counts.tr,
            e.counts.cd,
            e.counts.de,
            e.edits.substitutions,
            e.edits.deletions,
            e.edits.insertions,
            e.edits.ref_len,
        ));
    }
    fs::write(path, tsv)?;
    Ok(())
}
