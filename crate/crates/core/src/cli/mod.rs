//! Command-line experiment harness.
//!
//! Every subcommand merges defaults, an optional JSON config file and flags
//! (flags win), echoes the merged config into each artifact, and writes a
//! JSON summary plus CSV series under the output directory.

mod bound;
mod generate;
mod persistence;
mod plan;
mod quant_eval;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{ensure, Result};
use crate::numerics::{Rng, Vector};
use crate::toymodel::{synthetic_prompt, PromptKind, ToyModelWeights, WeightInit};

pub use bound::{summarize as bound_summary, BoundConfig, BoundRow, BoundSummary};
pub use generate::{summarize as generate_summary, GenerateConfig, GenerateSummary, Runs, StepRow};
pub use persistence::{summarize as persistence_summary, PersistenceConfig, PersistenceSummary};
pub use plan::{summarize as plan_summary, PlanConfig, PlanSummary};
pub use quant_eval::{
    summarize as quant_eval_summary, QuantEvalConfig, QuantEvalSummary, SeedQuantStats, WeightsKind,
};

/// Version of the JSON and CSV artifact layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "BUDGET_KV_OUT";

#[derive(Debug, Parser)]
#[command(name = "budget-kv", version, about = "Budgeted KV cache experiments")]
pub struct Cli {
    /// JSON file with the subcommand's config; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Skip CSV series and write only the JSON summary.
    #[arg(long, global = true)]
    pub json_only: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reference vs budgeted generation on a toy model.
    Generate(generate::GenerateFlags),
    /// Persistence ratios of a toy run or an ingested trace.
    Persistence(persistence::PersistenceFlags),
    /// Closed-form tail bound against Monte Carlo dropped mass.
    Bound(bound::BoundFlags),
    /// Budgeted cache with and without 4-bit storage.
    QuantEval(quant_eval::QuantEvalFlags),
    /// Memory breakdown, maximum batch and budget allocation.
    Plan(plan::PlanFlags),
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let v: Value = serde_json::from_reader(File::open(path)?)?;
            ensure!(v.is_object(), "config file must hold a JSON object");
            Some(v)
        }
        None => None,
    };
    let file = file.as_ref();
    let out =
        |name, config: &dyn erased::Config| Output::new(&cli.out, name, config, cli.json_only);
    match &cli.command {
        Command::Generate(f) => {
            let cfg: GenerateConfig = merge(file, f)?;
            generate::run(&cfg, out("generate", &cfg)?)
        }
        Command::Persistence(f) => {
            let cfg: PersistenceConfig = merge(file, f)?;
            persistence::run(&cfg, out("persistence", &cfg)?)
        }
        Command::Bound(f) => {
            let cfg: BoundConfig = merge(file, f)?;
            bound::run(&cfg, out("bound", &cfg)?)
        }
        Command::QuantEval(f) => {
            let cfg: QuantEvalConfig = merge(file, f)?;
            quant_eval::run(&cfg, out("quant_eval", &cfg)?)
        }
        Command::Plan(f) => {
            let cfg: PlanConfig = merge(file, f)?;
            plan::run(&cfg, out("plan", &cfg)?)
        }
    }
}

mod erased {
    /// Object-safe view of a serializable config.
    pub trait Config {
        fn to_json(&self) -> serde_json::Result<String>;
    }

    impl<T: serde::Serialize> Config for T {
        fn to_json(&self) -> serde_json::Result<String> {
            serde_json::to_string(self)
        }
    }
}

/// Defaults, then file keys, then every flag that was given.
pub fn merge<C, F>(file: Option<&Value>, flags: &F) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = serde_json::to_value(C::default())?;
    let target = merged
        .as_object_mut()
        .expect("configs serialize to objects");
    if let Some(Value::Object(map)) = file {
        for (k, v) in map {
            target.insert(k.clone(), v.clone());
        }
    }
    if let Value::Object(map) = serde_json::to_value(flags)? {
        for (k, v) in map {
            if !v.is_null() {
                target.insert(k, v);
            }
        }
    }
    Ok(serde_json::from_value(merged)?)
}

/// Parses a flag through the type's serde representation, so flag values
/// match config-file spelling (`inverse_sqrt_dim`, `replay`, ...).
pub(crate) fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Envelope<'a, R> {
    schema: u32,
    command: &'a str,
    config: &'a Value,
    result: &'a R,
}

/// Collects the artifacts of one subcommand run.
pub(crate) struct Output {
    dir: PathBuf,
    command: &'static str,
    config_json: String,
    json_only: bool,
    written: Vec<String>,
}

impl Output {
    fn new(
        dir: &Path,
        command: &'static str,
        config: &dyn erased::Config,
        json_only: bool,
    ) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            config_json: config.to_json()?,
            json_only,
            written: Vec::new(),
        })
    }

    pub(crate) fn wants_csv(&self) -> bool {
        !self.json_only
    }

    /// Comment lines placed at the top of every CSV file.
    pub(crate) fn header_comments(&self) -> Vec<String> {
        vec![
            format!("schema={SCHEMA_VERSION} command={}", self.command),
            format!("config={}", self.config_json),
        ]
    }

    /// Opens a CSV file with the provenance header already written.
    pub(crate) fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        let mut w = self.raw(name)?;
        for c in self.header_comments() {
            writeln!(w, "# {c}")?;
        }
        Ok(csv::Writer::from_writer(w))
    }

    pub(crate) fn raw(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.written.push(name.to_owned());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    /// Writes `<command>.json` and reports every artifact on stdout.
    pub(crate) fn finish<R: Serialize>(mut self, result: &R) -> Result<()> {
        let name = format!("{}.json", self.command);
        let config: Value = serde_json::from_str(&self.config_json)?;
        let envelope = Envelope {
            schema: SCHEMA_VERSION,
            command: self.command,
            config: &config,
            result,
        };
        let mut w = self.raw(&name)?;
        serde_json::to_writer_pretty(&mut w, &envelope)?;
        writeln!(w)?;
        w.flush()?;
        for f in &self.written {
            println!("{}", self.dir.join(f).display());
        }
        Ok(())
    }
}

/// Gaussian toy weights followed by a prompt, both from `Rng::new(seed)`.
pub(crate) fn toy_setup(
    seed: u64,
    d: usize,
    hidden: usize,
    init: &WeightInit,
    prompt_len: usize,
    kind: PromptKind,
) -> Result<(ToyModelWeights, Vec<Vector>)> {
    ensure!(d >= 1 && hidden >= 1, "model dimensions must be positive");
    let mut rng = Rng::new(seed);
    let weights = ToyModelWeights::gaussian(d, d, hidden, init, &mut rng);
    let prompt = synthetic_prompt(d, prompt_len, kind, None, &mut rng)?;
    Ok((weights, prompt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Cfg {
        a: u32,
        b: String,
    }

    impl Default for Cfg {
        fn default() -> Self {
            Self {
                a: 1,
                b: "x".into(),
            }
        }
    }

    #[derive(Serialize)]
    struct Flags {
        a: Option<u32>,
        b: Option<String>,
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = serde_json::json!({"a": 5, "b": "file"});
        let none = Flags { a: None, b: None };
        let c: Cfg = merge(None, &none).unwrap();
        assert_eq!(c, Cfg::default());
        let c: Cfg = merge(Some(&file), &none).unwrap();
        assert_eq!((c.a, c.b.as_str()), (5, "file"));
        let c: Cfg = merge(
            Some(&file),
            &Flags {
                a: Some(9),
                b: None,
            },
        )
        .unwrap();
        assert_eq!((c.a, c.b.as_str()), (9, "file"));
    }

    #[test]
    fn unknown_file_keys_rejected() {
        let file = serde_json::json!({"zzz": 1});
        assert!(merge::<Cfg, _>(Some(&file), &Flags { a: None, b: None }).is_err());
    }

    #[test]
    fn enum_flags_use_serde_names() {
        use crate::toymodel::ScaleMode;
        assert_eq!(
            parse_serde::<ScaleMode>("inverse_sqrt_dim"),
            Ok(ScaleMode::InverseSqrtDim)
        );
        assert!(parse_serde::<ScaleMode>("nope").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
