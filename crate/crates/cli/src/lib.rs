//! `lrmr` command line: argument parsing, settings resolution and exit codes.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod files;
pub mod settings;

use commands::Context;
use settings::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_JUDGE_LIMIT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lrmr", version, about = "Lymph-node report ranking pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each overrides the matching key of
/// the `--config` file.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Opponents sampled per patient
    #[arg(long, global = true)]
    pub opponents: Option<usize>,
    /// http, mock or oracle
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Chat-completions URL for the http backend
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub max_retries: Option<u32>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Output root; files go to OUT/RUN_ID/
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Response cache directory (default OUT/cache)
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub no_cache: bool,
    #[arg(long, global = true)]
    pub train_frac: Option<f64>,
    /// structured or freeform
    #[arg(long, global = true)]
    pub prompt_mode: Option<String>,
    /// Count each comparison for the opponent as well as the initiator
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub credit_opponent: Option<String>,
    /// Largest tolerated fraction of failed judge calls
    #[arg(long, global = true)]
    pub invalid_limit: Option<f64>,
    /// f1 or youden
    #[arg(long, global = true)]
    pub threshold_objective: Option<String>,
    /// `feature = weight` file for the rule-based scorer
    #[arg(long, global = true)]
    pub rule_weights: Option<PathBuf>,
    /// Directory holding replacement prompt templates
    #[arg(long, global = true)]
    pub prompts_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tile_px: Option<u32>,
    /// Bradley–Terry slope for the oracle judge and simulation
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Comparable band for the oracle judge and simulation
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
}

impl GlobalArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("seed", self.seed.map(|v| v.to_string()));
        push("opponents", self.opponents.map(|v| v.to_string()));
        push("backend", self.backend.clone());
        push("model", self.model.clone());
        push("endpoint", self.endpoint.clone());
        push("temperature", self.temperature.map(|v| v.to_string()));
        push("max_retries", self.max_retries.map(|v| v.to_string()));
        push("max_in_flight", self.max_in_flight.map(|v| v.to_string()));
        push("out", path(&self.out));
        push("run_id", self.run_id.clone());
        push("cache_dir", path(&self.cache_dir));
        push("no_cache", self.no_cache.then(|| "true".to_string()));
        push("train_frac", self.train_frac.map(|v| v.to_string()));
        push("prompt_mode", self.prompt_mode.clone());
        push("credit_opponent", self.credit_opponent.clone());
        push("invalid_limit", self.invalid_limit.map(|v| v.to_string()));
        push("threshold_objective", self.threshold_objective.clone());
        push("rule_weights", path(&self.rule_weights));
        push("prompts_dir", path(&self.prompts_dir));
        push("tile_px", self.tile_px.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("epsilon", self.epsilon.map(|v| v.to_string()));
        o
    }

    pub fn settings(&self) -> lrmr_core::Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            s.apply(k, &v)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compose one labelled montage per patient
    Montage {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Montages plus stage-one judge reports
    Report {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Pairwise tournament over report files; writes comparisons and scores
    Rank {
        /// Report directory (default OUT/RUN_ID/reports)
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Score reports with the weighted feature count instead of the tournament
    AblateRuleScore {
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Also evaluate the rule scores against these labels
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Stratified train/test split of a labels file
    Split {
        #[arg(long)]
        labels: PathBuf,
    },
    /// Calibrate a threshold on the training patients and score the test set
    Evaluate {
        /// Scores CSV (default OUT/RUN_ID/scores.csv)
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        /// Split JSON (default OUT/RUN_ID/split.json)
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Ranking recovery on a synthetic Bradley–Terry cohort
    Simulate {
        #[arg(long, default_value_t = 100)]
        patients: usize,
        /// Deterministic sign judge with no comparable band
        #[arg(long)]
        noiseless: bool,
        /// Also write the cohort as a dataset directory
        #[arg(long)]
        emit_dataset: Option<PathBuf>,
    },
    /// Montage, report, rank, split, evaluate and the rule-score ablation
    RunAll {
        #[arg(long)]
        dataset: PathBuf,
        /// Labels CSV (default DATASET/labels.csv)
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Montage { .. } => "montage",
            Command::Report { .. } => "report",
            Command::Rank { .. } => "rank",
            Command::AblateRuleScore { .. } => "ablate-rule-score",
            Command::Split { .. } => "split",
            Command::Evaluate { .. } => "evaluate",
            Command::Simulate { .. } => "simulate",
            Command::RunAll { .. } => "run-all",
        }
    }
}

fn dispatch(cli: &Cli) -> lrmr_core::Result<commands::Finished> {
    let ctx = Context::new(cli.global.settings()?)?;
    let mut art = ctx.artifacts();
    let run_dir = ctx.settings.run_dir();
    let finished = match &cli.command {
        Command::Montage { dataset } => commands::montage(&ctx, dataset, &mut art)?,
        Command::Report { dataset } => commands::report(&ctx, dataset, &mut art)?,
        Command::Rank { reports } => {
            let dir = reports.clone().unwrap_or_else(|| run_dir.join("reports"));
            commands::rank(&ctx, &dir, &mut art)?
        }
        Command::AblateRuleScore { reports, labels, split } => {
            let dir = reports.clone().unwrap_or_else(|| run_dir.join("reports"));
            commands::ablate_rule_score(&ctx, &dir, labels.as_deref(), split.as_deref(), &mut art)?
        }
        Command::Split { labels } => commands::split(&ctx, labels, &mut art)?,
        Command::Evaluate { scores, labels, split } => {
            let scores = scores.clone().unwrap_or_else(|| run_dir.join("scores.csv"));
            let split = split.clone().unwrap_or_else(|| run_dir.join("split.json"));
            commands::evaluate(&ctx, &scores, labels, &split, &mut art)?
        }
        Command::Simulate {
            patients,
            noiseless,
            emit_dataset,
        } => commands::simulate(&ctx, *patients, *noiseless, emit_dataset.as_deref(), &mut art)?,
        Command::RunAll { dataset, labels } => commands::run_all(&ctx, dataset, labels.as_deref(), &mut art)?,
    };
    art.write_manifest(cli.command.name(), finished.manifest.clone())?;
    Ok(finished)
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(finished) => {
            println!("{}", finished.summary);
            match finished.limit_exceeded {
                Some(reason) => {
                    eprintln!("error: judge failures over the invalid limit: {reason}");
                    EXIT_JUDGE_LIMIT
                }
                None => EXIT_OK,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}
