//! Command-line front end: each command runs one stage of the pipeline on
//! the artifacts of an output directory and refreshes its manifest.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{build_rollout_episodes, build_training_episodes, read_episodes, write_episodes, Episode, Split};
use crate::error::{Error, Result};
use crate::eval::{
    correct_crop, correct_return, evaluate_episodes, read_predictions, summarize, write_predictions, GapReport, Prediction,
};
use crate::model::{infer, EpisodeInput, Model};
use crate::recipe::{run_recipe, ExperimentRecipe};
use crate::render::write_trajectory_svg;
use crate::synthworld::{generate_world, World};
use crate::trainer::{train, TrainSetup};

/// Artifact file names inside the output directory.
pub mod artifact {
    pub const CONFIG: &str = "config.json";
    pub const WORLD: &str = "world.json";
    pub const TRAIN: &str = "train.jsonl";
    pub const VAL: &str = "val.jsonl";
    pub const EVAL: &str = "eval.jsonl";
    pub const MODEL: &str = "model.ckpt";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const CORRECTED: &str = "corrected.jsonl";
    pub const OUTCOMES: &str = "outcomes.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const RENDER_DIR: &str = "render";
    pub const MANIFEST: &str = "manifest.json";

    pub const ALL: [&str; 12] = [
        CONFIG,
        WORLD,
        TRAIN,
        VAL,
        EVAL,
        MODEL,
        TRAIN_LOG,
        PREDICTIONS,
        CORRECTED,
        OUTCOMES,
        REPORT_JSON,
        REPORT_TXT,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic world.
    GenWorld,
    /// Build training, validation and evaluation episodes.
    BuildData,
    /// Train the grounding model.
    Train,
    /// Predict the destination step of every evaluation episode.
    Eval,
    /// Write return- and crop-corrected trajectories.
    Correct,
    /// Write the before/after gap report.
    Report,
    /// Draw evaluation trajectories as SVG.
    Render,
    /// Run every stage from gen-world to render.
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::BuildData => "build-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Correct => "correct",
            Command::Report => "report",
            Command::Render => "render",
            Command::Pipeline => "pipeline",
        }
    }

    fn inputs(self) -> &'static [&'static str] {
        use artifact::*;
        match self {
            Command::GenWorld | Command::Pipeline => &[],
            Command::BuildData => &[WORLD],
            Command::Train => &[WORLD, TRAIN, VAL],
            Command::Eval => &[WORLD, EVAL, MODEL],
            Command::Correct | Command::Report | Command::Render => &[WORLD, EVAL, PREDICTIONS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Action {
    #[command(flatten)]
    Stage(Command),
    /// Run an experiment recipe through the pipeline and check its assertions.
    Recipe {
        /// Recipe JSON file.
        file: PathBuf,
    },
}

#[derive(Debug, Parser)]
#[command(name = "trajground", version, about = "Trajectory grounding and SR/OSR gap correction")]
#[command(disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    pub action: Action,
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.iterations=5000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed; also used as the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

impl Cli {
    /// Loads the config file and applies `--set`, `--seed` and `--out-dir`.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// SHA-256 of every artifact present in the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub created_unix: u64,
}

/// Per-episode corrected trajectories as written by `correct`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedRecord {
    pub episode_id: String,
    pub predicted_step: usize,
    pub return_path: Vec<String>,
    pub crop_path: Vec<String>,
}

/// Execution context of one command.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub quiet: bool,
}

impl Run {
    pub fn new(config: RunConfig, quiet: bool) -> Self {
        let dir = PathBuf::from(&config.out_dir);
        Run { config, dir, quiet }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn world(&self) -> Result<World> {
        World::load(&self.path(artifact::WORLD))
    }

    fn episodes(&self, world: &World, name: &str) -> Result<Vec<Episode>> {
        let data = &self.config.data;
        read_episodes(&self.path(name), Some((&world.graph, data.radius, data.metric)))
    }

    /// Runs `command`, then rewrites the manifest.
    pub fn dispatch(&self, command: Command) -> Result<()> {
        for name in command.inputs() {
            let p = self.path(name);
            if !p.is_file() {
                return Err(Error::config(
                    "out_dir",
                    format!("`{}` needs {}, which does not exist", command.name(), p.display()),
                ));
            }
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let snapshot = self.config.to_pretty_json()?;
        let p = self.path(artifact::CONFIG);
        std::fs::write(&p, snapshot + "\n").map_err(|e| Error::io(&p, e))?;
        match command {
            Command::GenWorld => self.gen_world()?,
            Command::BuildData => self.build_data()?,
            Command::Train => self.train()?,
            Command::Eval => self.eval()?,
            Command::Correct => self.correct()?,
            Command::Report => {
                self.report()?;
            }
            Command::Render => self.render()?,
            Command::Pipeline => {
                self.gen_world()?;
                self.build_data()?;
                self.train()?;
                self.eval()?;
                self.correct()?;
                self.report()?;
                self.render()?;
            }
        }
        self.write_manifest(command)
    }

    pub fn gen_world(&self) -> Result<()> {
        let world = generate_world(&self.config.world, self.config.seed)?;
        world.save(&self.path(artifact::WORLD))?;
        self.say(format!(
            "gen-world: {} nodes, {} edges",
            world.graph.node_count(),
            world.graph.edge_count()
        ));
        Ok(())
    }

    pub fn build_data(&self) -> Result<()> {
        let world = self.world()?;
        let (data, seed) = (&self.config.data, self.config.seed);
        let train = build_training_episodes(&world, data.train_count, seed, data)?;
        let mut seen: HashSet<(String, String)> = pairs(&train);
        let val = build_rollout_episodes(&world, data.val_count, seed, Split::ValSeenLike, data, &seen)?;
        seen.extend(pairs(&val));
        let eval = build_rollout_episodes(&world, data.eval_count, seed, Split::ValUnseenLike, data, &seen)?;
        write_episodes(&self.path(artifact::TRAIN), &train)?;
        write_episodes(&self.path(artifact::VAL), &val)?;
        write_episodes(&self.path(artifact::EVAL), &eval)?;
        self.say(format!(
            "build-data: {} train, {} val, {} eval episodes",
            train.len(),
            val.len(),
            eval.len()
        ));
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let world = self.world()?;
        let train_eps = self.episodes(&world, artifact::TRAIN)?;
        let val_eps = self.episodes(&world, artifact::VAL)?;
        let cfg = &self.config;
        let setup = TrainSetup {
            world: &world,
            train: &train_eps,
            val: &val_eps,
            model: &cfg.model,
            loss: &cfg.loss,
            train_cfg: &cfg.train,
            radius: cfg.eval.radius,
        };
        let log_path = self.path(artifact::TRAIN_LOG);
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut sink = BufWriter::new(file);
        let out = train(&setup, Some(&mut sink))?;
        sink.flush().map_err(|e| Error::io(&log_path, e))?;
        out.best.save(&self.path(artifact::MODEL))?;
        for e in out.log.iter().filter(|e| e.val_metric.is_some()) {
            self.say(format!(
                "train: iteration {} loss {:.4} val corrected SR {:.3}",
                e.iteration,
                e.loss,
                e.val_metric.unwrap_or(f64::NAN)
            ));
        }
        self.say(format!("train: kept iteration {}", out.best_iteration));
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let world = self.world()?;
        let episodes = self.episodes(&world, artifact::EVAL)?;
        let model = Model::load(&self.path(artifact::MODEL))?;
        let predictions = predict(&model, &world, &episodes)?;
        write_predictions(&self.path(artifact::PREDICTIONS), &predictions)?;
        self.say(format!("eval: {} predictions", predictions.len()));
        Ok(())
    }

    fn predictions(&self, world: &World) -> Result<(Vec<Episode>, Vec<Prediction>)> {
        let episodes = self.episodes(world, artifact::EVAL)?;
        let predictions = read_predictions(&self.path(artifact::PREDICTIONS))?;
        if predictions.len() != episodes.len() {
            return Err(Error::LengthMismatch {
                left: episodes.len(),
                right: predictions.len(),
            });
        }
        Ok((episodes, predictions))
    }

    pub fn correct(&self) -> Result<()> {
        let world = self.world()?;
        let g = &world.graph;
        let (episodes, predictions) = self.predictions(&world)?;
        let mut out = String::new();
        for (ep, pred) in episodes.iter().zip(&predictions) {
            if ep.episode_id != pred.episode_id {
                return Err(Error::InvariantViolation(format!(
                    "prediction `{}` does not match episode `{}`",
                    pred.episode_id, ep.episode_id
                )));
            }
            let traj = g.path_from_ids(&ep.path)?;
            let record = CorrectedRecord {
                episode_id: ep.episode_id.clone(),
                predicted_step: pred.predicted_step,
                return_path: g.path_ids(&correct_return(g, &traj, pred.predicted_step)?),
                crop_path: g.path_ids(&correct_crop(g, &traj, pred.predicted_step)?),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        let p = self.path(artifact::CORRECTED);
        std::fs::write(&p, out).map_err(|e| Error::io(&p, e))?;
        self.say(format!("correct: {} trajectories", episodes.len()));
        Ok(())
    }

    pub fn report(&self) -> Result<GapReport> {
        let world = self.world()?;
        let (episodes, predictions) = self.predictions(&world)?;
        let outcomes = evaluate_episodes(&world.graph, &episodes, &predictions, self.config.eval.radius)?;
        let report = summarize(&outcomes, self.config.eval.radius);
        let mut lines = String::new();
        for o in &outcomes {
            lines.push_str(&serde_json::to_string(o)?);
            lines.push('\n');
        }
        let write = |name: &str, text: String| -> Result<()> {
            let p = self.path(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(artifact::OUTCOMES, lines)?;
        write(artifact::REPORT_JSON, serde_json::to_string_pretty(&report)? + "\n")?;
        let table = report.to_table();
        write(artifact::REPORT_TXT, table.clone())?;
        self.say(table);
        Ok(report)
    }

    pub fn render(&self) -> Result<()> {
        let world = self.world()?;
        let g = &world.graph;
        let (episodes, predictions) = self.predictions(&world)?;
        let dir = self.path(artifact::RENDER_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = self.config.eval.render_count.min(episodes.len());
        for (ep, pred) in episodes.iter().zip(&predictions).take(n) {
            let traj = g.path_from_ids(&ep.path)?;
            let fixed = correct_return(g, &traj, pred.predicted_step)?;
            let out = dir.join(format!("{}.svg", ep.episode_id));
            write_trajectory_svg(g, &traj, &fixed, g.node(&ep.target)?, &out)?;
        }
        self.say(format!("render: {n} trajectories in {}", dir.display()));
        Ok(())
    }

    fn write_manifest(&self, command: Command) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        for name in artifact::ALL {
            let p = self.path(name);
            if p.is_file() {
                artifacts.insert(name.to_string(), sha256_file(&p)?);
            }
        }
        let render_dir = self.path(artifact::RENDER_DIR);
        if render_dir.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&render_dir)
                .map_err(|e| Error::io(&render_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for p in files {
                let name = format!("{}/{}", artifact::RENDER_DIR, p.file_name().unwrap_or_default().to_string_lossy());
                artifacts.insert(name, sha256_file(&p)?);
            }
        }
        let manifest = Manifest {
            command: command.name().to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            artifacts,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let p = self.path(artifact::MANIFEST);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn pairs(episodes: &[Episode]) -> HashSet<(String, String)> {
    episodes.iter().map(|e| (e.start.clone(), e.target.clone())).collect()
}

/// Model predictions for `episodes`, in order.
pub fn predict(model: &Model, world: &World, episodes: &[Episode]) -> Result<Vec<Prediction>> {
    let bank = world.feature_bank();
    let mut out = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(32) {
        let inputs = chunk
            .iter()
            .map(|e| EpisodeInput::from_episode(world, &bank, e))
            .collect::<Result<Vec<_>>>()?;
        for (ep, p) in chunk.iter().zip(model.forward(&inputs)?) {
            out.push(Prediction {
                episode_id: ep.episode_id.clone(),
                predicted_step: infer(&p)?,
                probabilities: p,
            });
        }
    }
    Ok(out)
}

pub fn sha256_file(path: &FsPath) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::error::ErrorKind;
    use clap::CommandFactory;

    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    eprintln!("\n{}", Cli::command().render_long_help());
                    2
                }
                _ => {
                    let _ = e.print();
                    2
                }
            };
        }
    };
    let result = match &cli.action {
        Action::Stage(command) => cli
            .resolve_config()
            .and_then(|cfg| Run::new(cfg, cli.quiet).dispatch(*command)),
        Action::Recipe { file } => ExperimentRecipe::load(file).and_then(|r| {
            let out = run_recipe(&r, cli.out_dir.as_deref(), cli.quiet)?;
            for v in &out.verdicts {
                println!("pass {} = {:.4}", v.metric, v.value);
            }
            println!("recipe {} passed in {:.1} s", out.name, out.elapsed_secs);
            Ok(())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
