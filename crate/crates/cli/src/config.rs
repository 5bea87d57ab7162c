//! Command-line flags and the serializable experiment config they fill in.

use std::fs;
use std::path::PathBuf;

use amnesic::seed::{self, stream};
use amnesic::{InlpConfig, ProbeConfig, SelectivityConfig};
use amnesic_encoder::{EncoderConfig, GrammarConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "amnesic", version, about = "Amnesic probing: remove a property, measure what breaks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a linear probe for a property and report its accuracy.
    Probe(Flags),
    /// Remove a property with iterative nullspace projection.
    Inlp(Flags),
    /// Draw a random projection removing `--rank` directions.
    Rand(Flags),
    /// Word-prediction accuracy and KL before and after a projection.
    Eval(Flags),
    /// Restore gold property information to projected representations.
    Selectivity(Flags),
    /// Remove one label's distinction from the rest, per label.
    LabelVsRest(Flags),
    /// Per-layer removal on a toy encoder: recoverability and LM impact.
    Layerwise(Flags),
    /// Train the toy encoder on a synthetic corpus and export its layers.
    ToyTrain(Flags),
    /// Merge the reports of earlier runs into one table.
    Report(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Probe(_) => "probe",
            Command::Inlp(_) => "inlp",
            Command::Rand(_) => "rand",
            Command::Eval(_) => "eval",
            Command::Selectivity(_) => "selectivity",
            Command::LabelVsRest(_) => "label-vs-rest",
            Command::Layerwise(_) => "layerwise",
            Command::ToyTrain(_) => "toy-train",
            Command::Report(_) => "report",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::Probe(f)
            | Command::Inlp(f)
            | Command::Rand(f)
            | Command::Eval(f)
            | Command::Selectivity(f)
            | Command::LabelVsRest(f)
            | Command::Layerwise(f)
            | Command::ToyTrain(f)
            | Command::Report(f) => f,
        }
    }
}

/// Flags shared by every command; each overrides the matching config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON experiment config; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Representation matrix (REPD).
    #[arg(long)]
    pub reps: Option<PathBuf>,
    /// Label TSV; defaults to the reps path with a .tsv extension.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Metadata JSON; defaults to the reps path with a .json extension.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Dev representations; without it the reps are split by sentence.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Evaluation representations.
    #[arg(long = "eval")]
    pub eval_reps: Option<PathBuf>,
    /// Projection written by `inlp` or `rand`.
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// Random control projection; drawn rank-matched when absent.
    #[arg(long)]
    pub rand_projection: Option<PathBuf>,
    /// Encoder checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tagged corpus file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory of an earlier run (repeatable).
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub property: Option<String>,
    /// Single label for `label-vs-rest`.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use masked-input representations.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub masked: Option<bool>,
    #[arg(long)]
    pub layer: Option<usize>,
    /// INLP iteration budget.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Directions removed by `rand`.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Subsample the training rows to this many tokens.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Probe control-task labels instead of the property.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub control: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: String,
    pub reps: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub projection: Option<PathBuf>,
    pub rand_projection: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub property: Option<String>,
    pub label: Option<String>,
    /// Every other seed is derived from this one.
    pub seed: u64,
    pub masked: bool,
    pub layer: Option<usize>,
    pub iterations: Option<usize>,
    pub rank: Option<usize>,
    pub sample: Option<usize>,
    pub control: bool,
    /// Share of sentences used as dev when no dev file is given.
    pub dev_fraction: f64,
    /// Share of corpus sentences held out for evaluation in `toy-train`
    /// and `layerwise`.
    pub eval_fraction: f64,
    /// Cap on the training sentences `layerwise` feeds to INLP and probes.
    pub max_train_sentences: Option<usize>,
    pub probe: ProbeConfig,
    pub inlp: InlpConfig,
    pub selectivity: SelectivityConfig,
    /// Full grammar; overrides `grammar_preset`.
    pub grammar: Option<GrammarConfig>,
    /// `default`, `small-inventories` or `det-noun-verb`.
    pub grammar_preset: Option<String>,
    /// Corpus size for `toy-train`, overriding the grammar's own.
    pub sentences: Option<usize>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: String::new(),
            reps: None,
            labels: None,
            meta: None,
            dev: None,
            eval: None,
            projection: None,
            rand_projection: None,
            checkpoint: None,
            corpus: None,
            inputs: Vec::new(),
            out: None,
            property: None,
            label: None,
            seed: 0,
            masked: false,
            layer: None,
            iterations: None,
            rank: None,
            sample: None,
            control: false,
            dev_fraction: 0.2,
            eval_fraction: 0.2,
            max_train_sentences: None,
            probe: ProbeConfig::default(),
            inlp: InlpConfig::default(),
            selectivity: SelectivityConfig::default(),
            grammar: None,
            grammar_preset: None,
            sentences: None,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

impl ExperimentConfig {
    /// The `--config` file (if any) overridden by the explicit flags.
    pub fn resolve(command: &str, flags: &Flags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| CliError::config_at(format!("bad config: {e}"), path))?
            }
            None => ExperimentConfig::default(),
        };
        if !cfg.command.is_empty() && cfg.command != command {
            return Err(CliError::config(format!(
                "config is for command '{}', not '{command}'",
                cfg.command
            )));
        }
        cfg.command = command.to_string();
        set_opt(&mut cfg.reps, &flags.reps);
        set_opt(&mut cfg.labels, &flags.labels);
        set_opt(&mut cfg.meta, &flags.meta);
        set_opt(&mut cfg.dev, &flags.dev);
        set_opt(&mut cfg.eval, &flags.eval_reps);
        set_opt(&mut cfg.projection, &flags.projection);
        set_opt(&mut cfg.rand_projection, &flags.rand_projection);
        set_opt(&mut cfg.checkpoint, &flags.checkpoint);
        set_opt(&mut cfg.corpus, &flags.corpus);
        if !flags.inputs.is_empty() {
            cfg.inputs = flags.inputs.clone();
        }
        set_opt(&mut cfg.out, &flags.out);
        set_opt(&mut cfg.property, &flags.property);
        set_opt(&mut cfg.label, &flags.label);
        set(&mut cfg.seed, &flags.seed);
        set(&mut cfg.masked, &flags.masked);
        set_opt(&mut cfg.layer, &flags.layer);
        set_opt(&mut cfg.iterations, &flags.iterations);
        set_opt(&mut cfg.rank, &flags.rank);
        set_opt(&mut cfg.sample, &flags.sample);
        set(&mut cfg.control, &flags.control);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dev_fraction", self.dev_fraction), ("eval_fraction", self.eval_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CliError::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.out.is_none() {
            return Err(CliError::config("--out is required"));
        }
        Ok(())
    }

    pub fn out(&self) -> &PathBuf {
        self.out.as_ref().expect("validated")
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, flag: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| CliError::config(format!("{} needs --{flag}", self.command)))
    }

    pub fn property(&self) -> Result<&str> {
        self.require(&self.property, "property").map(String::as_str)
    }

    /// Seed for one consumer of randomness.
    pub fn derived(&self, stream_id: u64) -> u64 {
        seed::derive(self.seed, stream_id, 0)
    }

    pub fn split_seed(&self) -> u64 {
        self.derived(stream::SPLIT)
    }

    pub fn rand_seed(&self) -> u64 {
        self.derived(stream::RANDOM_PROJECTION)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.derived(stream::PROBE),
            ..self.probe
        }
    }

    pub fn inlp_config(&self) -> InlpConfig {
        InlpConfig {
            seed: self.derived(stream::INLP),
            max_iterations: self.iterations.or(self.inlp.max_iterations),
            ..self.inlp
        }
    }

    pub fn selectivity_config(&self) -> SelectivityConfig {
        SelectivityConfig {
            seed: self.derived(stream::SELECTIVITY),
            ..self.selectivity
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.derived(stream::ENCODER_INIT),
            ..self.train
        }
    }

    pub fn grammar(&self) -> Result<GrammarConfig> {
        let mut g = match (&self.grammar, self.grammar_preset.as_deref()) {
            (Some(g), _) => g.clone(),
            (None, None | Some("default")) => GrammarConfig::default(),
            (None, Some("small-inventories")) => GrammarConfig::small_inventories(4000),
            (None, Some("det-noun-verb")) => GrammarConfig::det_noun_verb(4000),
            (None, Some(other)) => {
                return Err(CliError::config(format!("unknown grammar preset '{other}'")))
            }
        };
        if let Some(n) = self.sentences {
            g.sentences = n;
        }
        Ok(g)
    }

    pub fn corpus_seed(&self) -> u64 {
        self.derived(stream::CORPUS)
    }

    /// The config exactly as it will be echoed into the output directory.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "property": "a", "out": "x", "inlp": {"stop_margin": 0.02}}"#).unwrap();
        let flags = Flags {
            config: Some(path),
            property: Some("b".into()),
            masked: Some(true),
            ..Default::default()
        };
        let cfg = ExperimentConfig::resolve("inlp", &flags).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.property.as_deref(), Some("b"));
        assert!(cfg.masked);
        assert_eq!(cfg.inlp.stop_margin, 0.02);
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_wrong_command_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"sede": 4}"#).unwrap();
        let flags = Flags {
            config: Some(path.clone()),
            out: Some("o".into()),
            ..Default::default()
        };
        let err = ExperimentConfig::resolve("inlp", &flags).unwrap_err();
        assert_eq!(err.kind(), "ConfigError");
        assert_eq!(err.path(), Some(path.as_path()));

        fs::write(&path, r#"{"command": "eval"}"#).unwrap();
        assert!(ExperimentConfig::resolve("inlp", &flags).is_err());
    }

    #[test]
    fn grammar_presets() {
        let mut cfg = ExperimentConfig {
            grammar_preset: Some("small-inventories".into()),
            sentences: Some(10),
            ..Default::default()
        };
        let g = cfg.grammar().unwrap();
        assert_eq!(g.sentences, 10);
        assert_eq!(g.topics, 1);
        cfg.grammar_preset = Some("nope".into());
        assert!(cfg.grammar().is_err());
    }

    #[test]
    fn out_is_required() {
        let err = ExperimentConfig::resolve("probe", &Flags::default()).unwrap_err();
        assert!(err.to_string().contains("--out"));
    }

    #[test]
    fn derived_seeds_differ_by_consumer() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.probe_config().seed, cfg.inlp_config().seed);
        assert_ne!(cfg.split_seed(), cfg.rand_seed());
    }
}
