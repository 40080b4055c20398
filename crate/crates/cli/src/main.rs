use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use toml::Value;
use v2v_traffic::experiment::{self, Command, ExperimentConfig, MANIFEST_FILE};
use v2v_traffic::parallel;

#[derive(Parser)]
#[command(name = "v2v-traffic", version, about = "Follow-the-leader traffic with V2V route choice")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte Carlo repetitions of one configuration.
    Run(Common),
    /// Repetitions at every value of a sweep axis, with common seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// range | comm-pause | memory | cars
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values; `inf` is accepted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Knowledge indicator over time.
    Spread(Common),
    /// Test every simple path of one car against its V2V-RUE preferences.
    EquilibriumCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tracked: Option<usize>,
        #[arg(long)]
        max_paths: Option<usize>,
    },
    /// Re-run a manifest and compare output checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// test0..test5 or custom; selects the preset.
    #[arg(long)]
    test: Option<String>,
    /// manhattan, simple-eleven, or a network JSON file.
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    road_length: Option<f64>,
    #[arg(long)]
    cars: Option<usize>,
    /// bb | rue | due | v2v-rue | v2v-due
    #[arg(long)]
    behavior: Option<String>,
    /// Communication range in meters; `inf` for unlimited.
    #[arg(long)]
    range: Option<f64>,
    /// Seconds between communication checks.
    #[arg(long)]
    comm_pause: Option<f64>,
    /// Seconds a record is kept; `inf` to never forget.
    #[arg(long)]
    memory: Option<f64>,
    #[arg(long)]
    cascade: Option<bool>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Also write trajectories and route logs.
    #[arg(long)]
    trace: bool,
}

impl Common {
    fn overrides(&self) -> toml::Table {
        let mut t = toml::Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.into(), v);
            }
        };
        put("test", self.test.clone().map(Value::String));
        match self.network.as_deref() {
            Some(k @ ("manhattan" | "simple-eleven")) => put("network", Some(Value::String(k.into()))),
            Some(path) => {
                put("network", Some(Value::String("file".into())));
                put("network-file", Some(Value::String(path.into())));
            }
            None => {}
        }
        put("side", self.side.map(|v| Value::Integer(v as i64)));
        put("road-length", self.road_length.map(Value::Float));
        put("cars", self.cars.map(|v| Value::Integer(v as i64)));
        put("behavior", self.behavior.clone().map(Value::String));
        put("range", self.range.map(Value::Float));
        put("comm-pause", self.comm_pause.map(Value::Float));
        put("memory", self.memory.map(Value::Float));
        put("cascade", self.cascade.map(Value::Boolean));
        put("runs", self.runs.map(|v| Value::Integer(v as i64)));
        put("seed", self.seed.map(|v| Value::Integer(v as i64)));
        if self.trace {
            put("trace", Some(Value::Boolean(true)));
        }
        t
    }

    fn resolve(&self, extra: toml::Table) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut o = self.overrides();
        o.extend(extra);
        Ok(ExperimentConfig::resolve(file.as_deref(), o)?)
    }
}

fn execute(cmd: Command, common: &Common, extra: toml::Table) -> Result<()> {
    let cfg = common.resolve(extra)?;
    let m = parallel::with_workers(common.workers, || experiment::execute(cmd, &cfg, &common.out_dir))?;
    for o in &m.outputs {
        println!("{}  {}", o.sha256, common.out_dir.join(&o.file).display());
    }
    println!("manifest: {}", common.out_dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(c) => execute(Command::Run, &c, toml::Table::new()),
        Cmd::Spread(c) => execute(Command::Spread, &c, toml::Table::new()),
        Cmd::Sweep { common, axis, values } => {
            let mut extra = toml::Table::new();
            if axis.is_some() || !values.is_empty() {
                let (Some(axis), false) = (axis, values.is_empty()) else {
                    bail!("--axis and --values go together");
                };
                let mut s = toml::Table::new();
                s.insert("axis".into(), Value::String(axis));
                s.insert("values".into(), Value::Array(values.into_iter().map(Value::String).collect()));
                extra.insert("sweep".into(), Value::Table(s));
            }
            execute(Command::Sweep, &common, extra)
        }
        Cmd::EquilibriumCheck { common, tracked, max_paths } => {
            let mut extra = toml::Table::new();
            if let Some(t) = tracked {
                extra.insert("tracked".into(), Value::Integer(t as i64));
            }
            if let Some(m) = max_paths {
                extra.insert("max-paths".into(), Value::Integer(m as i64));
            }
            execute(Command::EquilibriumCheck, &common, extra)
        }
        Cmd::Replay { manifest, out_dir, workers } => {
            let out = out_dir.unwrap_or_else(|| manifest.parent().unwrap_or(std::path::Path::new(".")).join("replay"));
            let m = parallel::with_workers(workers, || experiment::replay(&manifest, &out))?;
            println!("replay of {} matches: {} files in {}", manifest.display(), m.outputs.len(), out.display());
            Ok(())
        }
    }
}
