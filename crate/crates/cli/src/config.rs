//! Declarative experiment configuration, read from TOML.
//!
//! Windows are written as `"Y1:Y2"` strings. The global `seed` overwrites
//! every component seed so one number fixes a whole run.

use std::path::{Path, PathBuf};

use forge_core::evaluation::{BacktestConfig, TaskConfig};
use forge_core::model::ClsText;
use forge_core::{CSConfig, CsMethod, ModelConfig, SyntheticSpec, TechCode, TimeWindow, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub(crate) mod window_str {
    use forge_core::TimeWindow;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &TimeWindow, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(w)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TimeWindow, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

pub(crate) mod windows_str {
    use forge_core::TimeWindow;
    use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ws: &[TimeWindow], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(ws.len()))?;
        for w in ws {
            seq.serialize_element(&w.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<TimeWindow>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(D::Error::custom))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    /// Text behind the `[CLS]` vectors used by `mean_cls` and the tasks.
    pub cls_text: ClsText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    /// Words seen fewer times map to `[UNK]`.
    pub min_freq: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings { min_freq: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSettings {
    #[serde(with = "window_str")]
    pub train_window: TimeWindow,
    #[serde(with = "windows_str")]
    pub test_windows: Vec<TimeWindow>,
    pub ci: f64,
    pub min_support: usize,
    pub n_permutations: usize,
    /// Every method is backtested on the same candidates.
    pub methods: Vec<CsMethod>,
}

impl Default for BacktestSettings {
    /// Fits the default synthetic corpus (2000 to 2011).
    fn default() -> Self {
        BacktestSettings {
            train_window: TimeWindow { start_year: 2002, end_year: 2006 },
            test_windows: vec![
                TimeWindow { start_year: 2007, end_year: 2009 },
                TimeWindow { start_year: 2008, end_year: 2010 },
                TimeWindow { start_year: 2009, end_year: 2011 },
            ],
            ci: 0.007,
            min_support: 1,
            n_permutations: 100,
            methods: CsMethod::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesSettings {
    /// Pairs to follow year by year. Empty means the planted pairs of a
    /// synthetic corpus, or else the `top_n` best-scored candidates.
    pub pairs: Vec<(TechCode, TechCode)>,
    pub top_n: usize,
    /// Random never-combined pairs forming the baseline band.
    pub baseline_samples: usize,
}

impl Default for SeriesSettings {
    fn default() -> Self {
        SeriesSettings {
            pairs: vec![],
            top_n: 5,
            baseline_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Line-delimited JSON corpus. Ignored when `synthetic` is present.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default)]
    pub cs: CSConfig,
    #[serde(default)]
    pub backtest: BacktestSettings,
    #[serde(default)]
    pub series: SeriesSettings,
    #[serde(default)]
    pub tasks: TaskConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("forge-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output_dir(),
            corpus: None,
            synthetic: None,
            tokenizer: TokenizerSettings::default(),
            embed: EmbedSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cs: CSConfig::default(),
            backtest: BacktestSettings::default(),
            series: SeriesSettings::default(),
            tasks: TaskConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Copies the global seed into every component and checks all sections.
    pub fn effective(mut self) -> Result<Self, CliError> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.tasks.seed = self.seed;
        if let Some(spec) = &mut self.synthetic {
            spec.seed = self.seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        // vocab_size is taken from the tokenizer when zero
        ModelConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model
        }
        .validate()?;
        self.cs.validate()?;
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        if self.synthetic.is_none() && self.corpus.is_none() {
            return Err(CliError::Config("either `corpus` or a [synthetic] section is required".into()));
        }
        if self.backtest.methods.is_empty() {
            return Err(CliError::Config("backtest.methods is empty".into()));
        }
        for m in &self.backtest.methods {
            self.backtest_config(*m).validate()?;
        }
        if self.series.baseline_samples == 0 {
            return Err(CliError::Config("series.baseline_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn backtest_config(&self, method: CsMethod) -> BacktestConfig {
        BacktestConfig {
            train_window: self.backtest.train_window,
            test_windows: self.backtest.test_windows.clone(),
            ci: self.backtest.ci,
            cs_config: CSConfig { method, ..self.cs },
            min_support: self.backtest.min_support,
            seed: self.seed,
            n_permutations: self.backtest.n_permutations,
        }
    }

    /// Corpus file the pipeline reads: generated into the output directory
    /// for synthetic runs.
    pub fn corpus_path(&self) -> PathBuf {
        match (&self.synthetic, &self.corpus) {
            (None, Some(p)) => p.clone(),
            _ => self.output_dir.join("corpus.jsonl"),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ttk")
    }
}
