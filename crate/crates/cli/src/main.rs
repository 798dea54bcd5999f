use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occnav::gridmap::save_grid;
use occnav::simharness::{
    collect_training_pairs, emit_plots, run_episode_from, run_experiment, EnvironmentSource,
    EpisodeLog, PredictionMode, ScenarioConfig, ScenarioError, Suite,
};

#[derive(Parser)]
#[command(
    name = "occnav",
    version,
    about = "Closed-loop navigation with occupancy-map prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its log.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a suite and print the results table.
    Bench {
        /// Suite file; the default comparison suite is used when omitted.
        suite: Option<PathBuf>,
        /// Repetitions of the default suite.
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// First corridor world of the default suite.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write every episode log.
        #[arg(long)]
        logs: bool,
    },
    /// Plot one or more episode logs of the same world.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run episodes and write training pairs in the grid format.
    Collect {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Episodes to run; each uses the next world and seed.
        #[arg(long, default_value_t = 1)]
        episodes: u64,
        /// Keep every n-th map update.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Baseline,
    Learned,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file; a generated corridor world is used when omitted.
    scenario: Option<PathBuf>,
    /// Corridor world seed when no scenario file is given.
    #[arg(long, default_value_t = 0)]
    corridor: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    v_max: Option<f64>,
    #[arg(long, value_enum)]
    prediction: Option<Mode>,
    /// Weight file for the learned predictor.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<(ScenarioConfig, Option<PathBuf>), ScenarioError> {
        let (mut sc, base) = match &self.scenario {
            Some(p) => (
                ScenarioConfig::from_json(&std::fs::read_to_string(p)?)?,
                p.parent().map(Path::to_path_buf),
            ),
            None => (
                ScenarioConfig::corridor(
                    "corridor",
                    self.corridor,
                    3.0,
                    PredictionMode::None,
                    self.corridor,
                ),
                None,
            ),
        };
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if let Some(v) = self.v_max {
            sc.v_max = v;
        }
        match (self.prediction, &self.weights) {
            (Some(Mode::None), _) => sc.prediction = PredictionMode::None,
            (Some(Mode::Baseline), _) => sc.prediction = PredictionMode::Baseline,
            (Some(Mode::Learned), Some(w)) => {
                sc.prediction = PredictionMode::Learned { weights: w.clone() }
            }
            (Some(Mode::Learned), None) => {
                return Err(ScenarioError::Invalid(
                    "--prediction learned needs --weights".into(),
                ))
            }
            (None, Some(w)) => sc.prediction = PredictionMode::Learned { weights: w.clone() },
            (None, None) => {}
        }
        Ok((sc, base))
    }
}

fn write(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn summary(log: &EpisodeLog) -> String {
    let m = &log.metrics;
    let outcome = if m.success {
        "success"
    } else if m.collision {
        "collision"
    } else {
        "timeout"
    };
    format!(
        "{} [{} @ {} m/s]: {outcome}, time {}, peak {:.2} m/s, clearance {:.3} m, {} plans ({} failed), {:.2} m",
        log.scenario,
        log.mode,
        log.v_max,
        m.time_to_goal.map_or("-".into(), |t| format!("{t:.2} s")),
        m.peak_speed,
        m.min_clearance,
        m.replan_count,
        m.failed_plans,
        m.distance_traveled
    )
}

fn execute(cmd: Command) -> Result<(), ScenarioError> {
    match cmd {
        Command::Run { scenario, out } => {
            let (sc, base) = scenario.load()?;
            let log = run_episode_from(&sc, base.as_deref())?;
            write(&out.join("log.json"), &log.to_json())?;
            println!("{}", summary(&log));
        }
        Command::Bench {
            suite,
            reps,
            seed,
            out,
            logs,
        } => {
            let (suite, base) = match suite {
                Some(p) => (
                    Suite::from_json(&std::fs::read_to_string(&p)?)?,
                    p.parent().map(Path::to_path_buf),
                ),
                None => (Suite::comparison(reps, seed), None),
            };
            let result = run_experiment(&suite, base.as_deref())?;
            write(&out.join("results.csv"), &result.to_csv())?;
            write(&out.join("results.txt"), &result.to_table())?;
            if logs {
                for (r, row) in result.logs.iter().enumerate() {
                    for (k, log) in row.iter().enumerate() {
                        if let Some(log) = log {
                            write(
                                &out.join(format!("logs/row{r}_rep{k:03}.json")),
                                &log.to_json(),
                            )?;
                        }
                    }
                }
            }
            for row in &result.rows {
                for e in &row.errors {
                    eprintln!("{}: {e}", row.algorithm);
                }
            }
            print!("{}", result.to_table());
        }
        Command::Plot { logs, out } => {
            let logs = logs
                .iter()
                .map(|p| Ok(EpisodeLog::from_json(&std::fs::read_to_string(p)?)?))
                .collect::<Result<Vec<_>, ScenarioError>>()?;
            let env = logs[0].environment()?;
            let (svg, csv) = emit_plots(&logs, &env);
            write(&out.join("trajectories.svg"), &svg)?;
            write(&out.join("trajectories.csv"), &csv)?;
        }
        Command::Collect {
            scenario,
            episodes,
            stride,
            out,
        } => {
            let (base_sc, base) = scenario.load()?;
            std::fs::create_dir_all(&out)?;
            let mut count = 0;
            for e in 0..episodes {
                let mut sc = base_sc.clone();
                sc.seed = sc.seed.wrapping_add(e);
                if let EnvironmentSource::Corridor { seed, .. } = &mut sc.environment {
                    *seed = seed.wrapping_add(e);
                }
                let log = run_episode_from(&sc, base.as_deref())?;
                let env = log.environment()?;
                for (k, pair) in collect_training_pairs(&log, &env, stride, sc.sensor_noise)
                    .iter()
                    .enumerate()
                {
                    save_grid(
                        &pair.input,
                        &out.join(format!("pair_{e:04}_{k:04}_input.grid")),
                    )?;
                    save_grid(
                        &pair.target,
                        &out.join(format!("pair_{e:04}_{k:04}_target.grid")),
                    )?;
                    count += 1;
                }
            }
            println!("{count} pairs written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ ScenarioError::Invalid(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
