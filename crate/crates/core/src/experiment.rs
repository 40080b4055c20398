//! Experiment harness: configuration, seeded scenario generation, Monte
//! Carlo batches, sweeps, knowledge spreading, equilibrium-path search,
//! CSV emission and manifest replay.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{CarId, SimParams};
use crate::equilibrium::{
    run_bb, run_bb_traced, run_due_traced, run_rue_traced, write_history, DueOptions, RunResult, Scenario,
};
use crate::error::{Error, Result};
use crate::metrics::{confidence_halfwidth, cumulative_average, mean, sample_std, KnowledgeSeries};
use crate::network::{build_manhattan, build_simple_eleven, JunctionId, Network, RoadId, ELEVEN_DESTINATION, ELEVEN_FEEDERS};
use crate::parallel;
use crate::routing::WeightMethod;
use crate::v2v::{equilibrium_path_check, run_spread_traced, run_v2v_due_traced, run_v2v_rue_traced, V2VParams};

/// Version of the output file layout; replay refuses other versions.
pub const SCHEMA_VERSION: u32 = 1;

/// Floats that may be infinite, written as `"inf"` in JSON.
mod inf_float {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                other => other.parse().map_err(|_| E::custom(format!("not a number: {s:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            struct One(f64);
            impl serde::Serialize for One {
                fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                    super::serialize(&self.0, s)
                }
            }
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&One(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestId {
    Test0,
    Test1,
    Test2,
    Test3,
    Test4,
    Test5,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Manhattan,
    SimpleEleven,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Bb,
    Rue,
    Due,
    V2vRue,
    V2vDue,
}

impl Behavior {
    pub fn uses_v2v(self) -> bool {
        matches!(self, Behavior::V2vRue | Behavior::V2vDue)
    }
}

/// How origins and destinations are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdMode {
    /// Origin uniform over junctions, destination uniform over the other
    /// junctions reachable from it.
    Random,
    /// Origin uniform, destination fixed by `destination`.
    FixedDestination,
    /// Start road uniform over the feeders of the eleven-road network.
    Eleven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Range,
    CommPause,
    Memory,
    Cars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    #[serde(with = "inf_float::vec")]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub test: TestId,
    pub network: NetworkKind,
    pub network_file: Option<PathBuf>,
    pub side: usize,
    pub road_length: f64,
    pub behavior: Behavior,
    pub cars: usize,
    pub od: OdMode,
    pub destination: Option<usize>,
    pub dt: f64,
    pub v_max_kmh: f64,
    pub car_length: f64,
    /// Final time; derived from a free-flow run of each scenario when absent.
    pub t_fin: Option<f64>,
    pub weights: String,
    #[serde(with = "inf_float")]
    pub range: f64,
    pub comm_pause: f64,
    #[serde(with = "inf_float")]
    pub memory: f64,
    pub cascade: bool,
    pub due_max_iter: usize,
    pub due_tol: f64,
    pub sweep: Option<SweepSpec>,
    pub runs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub trace: bool,
    pub tracked: usize,
    pub max_paths: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let v2v = V2VParams::default();
        Self {
            test: TestId::Custom,
            network: NetworkKind::Manhattan,
            network_file: None,
            side: 5,
            road_length: 50.0,
            behavior: Behavior::Rue,
            cars: 100,
            od: OdMode::Random,
            destination: None,
            dt: 0.6,
            v_max_kmh: 50.0,
            car_length: 10.0,
            t_fin: None,
            weights: "m3".into(),
            range: v2v.range,
            comm_pause: v2v.comm_pause,
            memory: v2v.memory,
            cascade: v2v.cascade,
            due_max_iter: DueOptions::default().max_iter,
            due_tol: DueOptions::default().tol,
            sweep: None,
            runs: 1,
            seed: 1,
            alpha: 0.05,
            trace: false,
            tracked: 0,
            max_paths: 2000,
        }
    }
}

/// Communication ranges swept in the range experiments.
pub const RANGE_SWEEP: [f64; 7] = [0.0, 25.0, 50.0, 100.0, 150.0, 300.0, f64::INFINITY];

/// Seconds above which a free-flow makespan is not trusted.
const T_FIN_CAP: f64 = 36_000.0;
/// Smallest automatic final time.
const T_FIN_FLOOR: f64 = 300.0;

impl ExperimentConfig {
    /// Reference configuration of each numbered test.
    pub fn preset(test: TestId) -> Self {
        let base = Self {
            test,
            ..Self::default()
        };
        match test {
            TestId::Test0 => Self {
                runs: 500,
                ..base
            },
            TestId::Test1 => Self {
                network: NetworkKind::SimpleEleven,
                od: OdMode::Eleven,
                cars: 50,
                runs: 300,
                sweep: Some(SweepSpec {
                    axis: SweepAxis::Cars,
                    values: vec![25.0, 50.0, 75.0, 100.0],
                }),
                ..base
            },
            TestId::Test2 => Self {
                road_length: 300.0,
                behavior: Behavior::Bb,
                runs: 30,
                ..base
            },
            TestId::Test3 => Self {
                behavior: Behavior::V2vRue,
                cascade: false,
                runs: 300,
                sweep: Some(SweepSpec {
                    axis: SweepAxis::Range,
                    values: RANGE_SWEEP.to_vec(),
                }),
                ..base
            },
            TestId::Test4 => Self {
                behavior: Behavior::V2vRue,
                cars: 50,
                ..base
            },
            TestId::Test5 => Self {
                behavior: Behavior::V2vDue,
                runs: 300,
                sweep: Some(SweepSpec {
                    axis: SweepAxis::Range,
                    values: RANGE_SWEEP.to_vec(),
                }),
                ..base
            },
            TestId::Custom => base,
        }
    }

    /// Preset of the selected test, overlaid by `file` (TOML text) and then
    /// by `overrides`. Keys use the kebab-case field names.
    pub fn resolve(file: Option<&str>, overrides: toml::Table) -> Result<Self> {
        let file_table: toml::Table = match file {
            Some(s) => s.parse().map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let test_of = |t: &toml::Table| -> Result<Option<TestId>> {
            t.get("test")
                .map(|v| {
                    v.clone()
                        .try_into::<TestId>()
                        .map_err(|e| Error::Config(format!("test: {e}")))
                })
                .transpose()
        };
        let test = test_of(&overrides)?.or(test_of(&file_table)?).unwrap_or(TestId::Custom);
        let mut merged = toml::Table::try_from(Self::preset(test)).map_err(|e| Error::Config(e.to_string()))?;
        merged.extend(file_table);
        merged.extend(overrides);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if self.cars == 0 {
            return bad("cars must be positive".into());
        }
        if self.network == NetworkKind::File && self.network_file.is_none() {
            return bad("network = \"file\" needs network-file".into());
        }
        if self.od == OdMode::Eleven && self.network != NetworkKind::SimpleEleven {
            return bad("od = \"eleven\" needs the simple-eleven network".into());
        }
        if self.od == OdMode::FixedDestination && self.destination.is_none() {
            return bad("od = \"fixed-destination\" needs destination".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        WeightMethod::parse(&self.weights)?;
        self.v2v().validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return bad("sweep needs at least one value".into());
            }
            if s.axis != SweepAxis::Cars && !self.behavior.uses_v2v() {
                return bad(format!(
                    "sweeping {} has no effect with behavior {}; use v2v-rue or v2v-due",
                    kebab(&s.axis),
                    kebab(&self.behavior)
                ));
            }
            if s.axis == SweepAxis::Cars && s.values.iter().any(|v| !(*v >= 1.0 && v.fract() == 0.0)) {
                return bad("car counts must be positive integers".into());
            }
        }
        Ok(())
    }

    pub fn v2v(&self) -> V2VParams {
        V2VParams {
            range: self.range,
            comm_pause: self.comm_pause,
            memory: self.memory,
            cascade: self.cascade,
        }
    }

    pub fn due_options(&self) -> DueOptions {
        DueOptions {
            max_iter: self.due_max_iter,
            tol: self.due_tol,
        }
    }

    /// Copy with the sweep axis set to `v`.
    pub fn at(&self, axis: SweepAxis, v: f64) -> Self {
        let mut c = self.clone();
        match axis {
            SweepAxis::Range => c.range = v,
            SweepAxis::CommPause => c.comm_pause = v,
            SweepAxis::Memory => c.memory = v,
            SweepAxis::Cars => c.cars = v as usize,
        }
        c
    }

    /// Seeds of the repetitions, shared by every sweep point.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn build_network(&self) -> Result<Network> {
        match self.network {
            NetworkKind::Manhattan => build_manhattan(self.side, self.road_length),
            NetworkKind::SimpleEleven => Ok(build_simple_eleven()),
            NetworkKind::File => {
                let p = self.network_file.as_ref().expect("validated");
                Network::from_json(&std::fs::read_to_string(p)?)
            }
        }
    }

    fn sim_params(&self, t_fin: f64) -> SimParams {
        SimParams::new(self.dt, self.v_max_kmh / 3.6, self.car_length, t_fin)
    }
}

pub type OdPair = (JunctionId, JunctionId);

/// Origin-destination pairs (and start roads, when fixed by the mode) of
/// one repetition.
pub fn draw_od(net: &Network, cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<OdPair>, Option<Vec<RoadId>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nj = net.num_junctions();
    let mut od = Vec::with_capacity(cfg.cars);
    match cfg.od {
        OdMode::Eleven => {
            let mut starts = Vec::with_capacity(cfg.cars);
            for _ in 0..cfg.cars {
                let r = ELEVEN_FEEDERS[rng.random_range(0..ELEVEN_FEEDERS.len())];
                starts.push(r);
                od.push((net.road(r).start, ELEVEN_DESTINATION));
            }
            return Ok((od, Some(starts)));
        }
        OdMode::Random => {
            let reach: Vec<Vec<JunctionId>> = (0..nj)
                .map(|o| {
                    let r = net.reachable_from(JunctionId(o));
                    (0..nj).filter(|&d| d != o && r[d]).map(JunctionId).collect()
                })
                .collect();
            if reach.iter().all(|r| r.is_empty()) {
                return Err(Error::InvalidScenario("no junction reaches another".into()));
            }
            while od.len() < cfg.cars {
                let o = rng.random_range(0..nj);
                if reach[o].is_empty() {
                    continue;
                }
                let d = reach[o][rng.random_range(0..reach[o].len())];
                od.push((JunctionId(o), d));
            }
        }
        OdMode::FixedDestination => {
            let d = JunctionId(cfg.destination.expect("validated"));
            if d.0 >= nj {
                return Err(Error::InvalidScenario(format!("unknown destination {d}")));
            }
            let origins: Vec<JunctionId> = (0..nj)
                .map(JunctionId)
                .filter(|&o| o != d && net.reachable_from(o)[d.0])
                .collect();
            if origins.is_empty() {
                return Err(Error::InvalidScenario(format!("no junction reaches {d}")));
            }
            for _ in 0..cfg.cars {
                od.push((origins[rng.random_range(0..origins.len())], d));
            }
        }
    }
    Ok((od, None))
}

/// Scenario of one repetition. Without a configured final time, the final
/// time is three times the free-flow-routing makespan of the same cars
/// (at least `T_FIN_FLOOR`).
pub fn scenario(cfg: &ExperimentConfig, net: Arc<Network>, seed: u64) -> Result<Scenario> {
    let (od, starts) = draw_od(&net, cfg, seed)?;
    let method = WeightMethod::parse(&cfg.weights)?;
    let mk = |t_fin: f64| {
        let mut s = Scenario::new(Arc::clone(&net), od.clone(), cfg.sim_params(t_fin));
        s.start_roads = starts.clone();
        s.weight_method = method;
        s.seed = seed;
        s
    };
    let t_fin = match cfg.t_fin {
        Some(t) => t,
        None => {
            let probe = run_bb(&mk(T_FIN_CAP))?;
            let makespan = probe.per_car_tt.iter().copied().fold(0.0, f64::max);
            (3.0 * makespan).max(T_FIN_FLOOR).ceil()
        }
    };
    let s = mk(t_fin);
    s.validate()?;
    Ok(s)
}

/// Result of one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub run: RunResult,
    pub knowledge: Option<KnowledgeSeries>,
}

pub fn simulate(cfg: &ExperimentConfig, scn: &Scenario, trace: Option<&mut dyn Write>) -> Result<Outcome> {
    let v2v = cfg.v2v();
    Ok(match cfg.behavior {
        Behavior::Bb => Outcome { run: run_bb_traced(scn, trace)?, knowledge: None },
        Behavior::Rue => Outcome { run: run_rue_traced(scn, trace)?, knowledge: None },
        Behavior::Due => Outcome { run: run_due_traced(scn, cfg.due_options(), trace)?, knowledge: None },
        Behavior::V2vRue => {
            let r = run_v2v_rue_traced(scn, &v2v, trace)?;
            Outcome { run: r.run, knowledge: Some(r.knowledge) }
        }
        Behavior::V2vDue => {
            let r = run_v2v_due_traced(scn, &v2v, trace)?;
            Outcome { run: r.run, knowledge: Some(r.knowledge) }
        }
    })
}

/// One line of the runs file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub ttt: f64,
    pub converged: bool,
    pub outcome: Outcome,
}

/// All repetitions of `cfg`, in run order. Independent of the worker count.
pub fn run_batch(cfg: &ExperimentConfig, net: &Arc<Network>) -> Result<Vec<RunRecord>> {
    let seeds = cfg.seeds();
    parallel::map(&seeds, |&seed| -> Result<RunRecord> {
        let scn = scenario(cfg, Arc::clone(net), seed)?;
        let outcome = simulate(cfg, &scn, None)?;
        Ok(RunRecord {
            run: (seed.wrapping_sub(cfg.seed)) as usize,
            seed,
            ttt: outcome.run.ttt,
            converged: outcome.run.converged,
            outcome,
        })
    })
    .into_iter()
    .collect()
}

/// Mean TTT of a batch with its confidence half-width (zero for one run).
pub fn summarize(ttts: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let m = mean(ttts);
    let h = if ttts.len() < 2 { 0.0 } else { confidence_halfwidth(ttts, alpha)? };
    Ok((m, h))
}

/// Subcommands that produce outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Run,
    Sweep,
    Spread,
    EquilibriumCheck,
}

/// One output file held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Output {
    fn new(name: &str, text: String) -> Self {
        Self { name: name.into(), bytes: text.into_bytes() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub command: Command,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub network_sha256: String,
    pub outputs: Vec<OutputDigest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// The name an enum variant has in config files.
fn kebab<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        format!("{v}")
    }
}

fn runs_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("run,seed,ttt,converged\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.run, r.seed, f(r.ttt), r.converged);
    }
    s
}

fn routes_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("run,car,step,road\n");
    for r in records {
        for (c, log) in r.outcome.run.routes.iter().enumerate() {
            for (step, road) in log {
                let _ = writeln!(s, "{},{},{},{}", r.run, c, step, road.0);
            }
        }
    }
    s
}

fn traced_outputs(cfg: &ExperimentConfig, net: &Arc<Network>, out: &mut Vec<Output>) -> Result<()> {
    let scn = scenario(cfg, Arc::clone(net), cfg.seed)?;
    let mut buf = Vec::new();
    let o = simulate(cfg, &scn, Some(&mut buf))?;
    out.push(Output { name: "trajectory.csv".into(), bytes: buf });
    if cfg.behavior == Behavior::Due {
        let mut h = Vec::new();
        write_history(&mut h, &o.run.history)?;
        out.push(Output { name: "due_history.csv".into(), bytes: h });
    }
    Ok(())
}

fn do_run(cfg: &ExperimentConfig, net: &Arc<Network>) -> Result<Vec<Output>> {
    let records = run_batch(cfg, net)?;
    let ttts: Vec<f64> = records.iter().map(|r| r.ttt).collect();
    let mut out = vec![Output::new("runs.csv", runs_csv(&records))];
    let mut cum = String::from("run,cumulative_mean\n");
    for (i, m) in cumulative_average(&ttts)?.iter().enumerate() {
        let _ = writeln!(cum, "{},{}", i + 1, f(*m));
    }
    out.push(Output::new("cumulative.csv", cum));
    let (m, h) = summarize(&ttts, cfg.alpha)?;
    let sd = if ttts.len() < 2 { 0.0 } else { sample_std(&ttts) };
    out.push(Output::new(
        "summary.csv",
        format!("runs,mean_ttt,std_ttt,ci_halfwidth\n{},{},{},{}\n", ttts.len(), f(m), f(sd), f(h)),
    ));
    if cfg.trace {
        out.push(Output::new("routes.csv", routes_csv(&records)));
        traced_outputs(cfg, net, &mut out)?;
    }
    Ok(out)
}

fn do_sweep(cfg: &ExperimentConfig, net: &Arc<Network>) -> Result<Vec<Output>> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] table with axis and values".into()))?;
    let mut table = String::from("axis_value,mean_ttt,ci_halfwidth,runs\n");
    let mut all = String::from("axis_value,run,seed,ttt,converged\n");
    for &v in &spec.values {
        let c = cfg.at(spec.axis, v);
        let records = run_batch(&c, net)?;
        let ttts: Vec<f64> = records.iter().map(|r| r.ttt).collect();
        let (m, h) = summarize(&ttts, cfg.alpha)?;
        let _ = writeln!(table, "{},{},{},{}", f(v), f(m), f(h), ttts.len());
        for r in &records {
            let _ = writeln!(all, "{},{},{},{},{}", f(v), r.run, r.seed, f(r.ttt), r.converged);
        }
    }
    Ok(vec![Output::new("sweep.csv", table), Output::new("sweep_runs.csv", all)])
}

fn do_spread(cfg: &ExperimentConfig, net: &Arc<Network>) -> Result<Vec<Output>> {
    let v2v = cfg.v2v();
    let seeds = cfg.seeds();
    let series: Vec<KnowledgeSeries> = parallel::map(&seeds, |&seed| -> Result<KnowledgeSeries> {
        let scn = scenario(cfg, Arc::clone(net), seed)?;
        match cfg.behavior {
            Behavior::Bb => Ok(run_spread_traced(&scn, &v2v, None)?.knowledge),
            Behavior::V2vRue | Behavior::V2vDue => Ok(simulate(cfg, &scn, None)?.knowledge.expect("v2v")),
            b => Err(Error::Config(format!("spread needs bb, v2v-rue or v2v-due, not {b:?}"))),
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let len = series.iter().map(KnowledgeSeries::len).max().unwrap_or(0);
    let r = series.len() as f64;
    let mut avg = String::from("t,n_active,k_n\n");
    for k in 0..len {
        let (mut na, mut kn) = (0.0, 0.0);
        for s in &series {
            if k < s.len() {
                na += s.n_a[k] as f64;
                kn += s.k_n[k];
            }
        }
        let _ = writeln!(avg, "{:.3},{},{}", k as f64 * cfg.dt, f(na / r), f(kn / r));
    }
    let mut per = String::from("run,t,n_active,k_n\n");
    for (i, s) in series.iter().enumerate() {
        for k in 0..s.len() {
            let _ = writeln!(per, "{},{:.3},{},{}", i, s.times[k], s.n_a[k], f(s.k_n[k]));
        }
    }
    let mut out = vec![Output::new("spread.csv", avg), Output::new("spread_runs.csv", per)];
    if cfg.trace {
        traced_outputs(&ExperimentConfig { behavior: Behavior::Bb, ..cfg.clone() }, net, &mut out)?;
    }
    Ok(out)
}

/// Simple paths from `from` to `to`, shortest first (ties by road ids),
/// at most `limit` of them. Fails when the network has more than
/// `10 * limit + 100_000` such paths.
pub fn enumerate_simple_paths(net: &Network, from: JunctionId, to: JunctionId, limit: usize) -> Result<Vec<Vec<RoadId>>> {
    let budget = limit.saturating_mul(10).saturating_add(100_000);
    let mut found: Vec<(f64, Vec<RoadId>)> = Vec::new();
    let mut on_path = vec![false; net.num_junctions()];
    let mut path = Vec::new();
    fn dfs(
        net: &Network,
        j: JunctionId,
        to: JunctionId,
        len: f64,
        on_path: &mut [bool],
        path: &mut Vec<RoadId>,
        found: &mut Vec<(f64, Vec<RoadId>)>,
        budget: usize,
    ) -> bool {
        if j == to {
            found.push((len, path.clone()));
            return found.len() <= budget;
        }
        on_path[j.0] = true;
        for &r in net.outgoing(j) {
            let road = net.road(r);
            if on_path[road.end.0] {
                continue;
            }
            path.push(r);
            let ok = dfs(net, road.end, to, len + road.length, on_path, path, found, budget);
            path.pop();
            if !ok {
                return false;
            }
        }
        on_path[j.0] = false;
        true
    }
    if from == to {
        return Err(Error::InvalidScenario("origin equals destination".into()));
    }
    if !dfs(net, from, to, 0.0, &mut on_path, &mut path, &mut found, budget) {
        return Err(Error::InvalidScenario(format!("more than {budget} simple paths")));
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    found.truncate(limit);
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Route of a car under the free-flow shortest-path policy.
pub fn shortest_route(scn: &Scenario, car: usize) -> Vec<RoadId> {
    let pol = &scn.shortest_path_policies()[car];
    let (mut j, d) = scn.od_pairs[car];
    let mut route = Vec::new();
    if let Some(s) = &scn.start_roads {
        route.push(s[car]);
        j = scn.net.road(s[car]).end;
    }
    while j != d {
        match pol.next_road(0, j) {
            crate::routing::NextRoad::Road(r) => {
                route.push(r);
                j = scn.net.road(r).end;
            }
            _ => break,
        }
    }
    route
}

/// Agreement of one candidate path of the tracked car.
#[derive(Debug, Clone, PartialEq)]
pub struct PathVerdict {
    pub path: Vec<RoadId>,
    pub length: f64,
    pub passages: usize,
    pub agreements: usize,
    pub is_equilibrium: bool,
    pub travel_time: f64,
}

/// Forces every other car onto its free-flow shortest path and tries the
/// first `max_paths` simple paths of the tracked car.
pub fn search_equilibrium_paths(scn: &Scenario, v2v: &V2VParams, tracked: usize, max_paths: usize) -> Result<Vec<PathVerdict>> {
    if tracked >= scn.num_cars() {
        return Err(Error::InvalidScenario(format!("unknown tracked car {tracked}")));
    }
    let mut scn = scn.clone();
    scn.start_roads = None;
    let base: Vec<Vec<RoadId>> = (0..scn.num_cars()).map(|c| shortest_route(&scn, c)).collect();
    let (o, d) = scn.od_pairs[tracked];
    let candidates = enumerate_simple_paths(&scn.net, o, d, max_paths)?;
    parallel::map(&candidates, |p| -> Result<PathVerdict> {
        let mut paths = base.clone();
        paths[tracked] = p.clone();
        let rep = equilibrium_path_check(&scn, v2v, &paths, CarId(tracked))?;
        Ok(PathVerdict {
            length: p.iter().map(|r| scn.net.road(*r).length).sum(),
            path: p.clone(),
            passages: rep.choices.len(),
            agreements: rep.choices.iter().filter(|c| c.agrees()).count(),
            is_equilibrium: rep.is_equilibrium,
            travel_time: rep.run.per_car_tt[tracked],
        })
    })
    .into_iter()
    .collect()
}

fn do_equilibrium(cfg: &ExperimentConfig, net: &Arc<Network>) -> Result<Vec<Output>> {
    let scn = scenario(cfg, Arc::clone(net), cfg.seed)?;
    let verdicts = search_equilibrium_paths(&scn, &cfg.v2v(), cfg.tracked, cfg.max_paths)?;
    let mut s = String::from("path,length,roads,passages,agreements,is_equilibrium,travel_time\n");
    for (i, v) in verdicts.iter().enumerate() {
        let roads: Vec<String> = v.path.iter().map(|r| r.0.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            i,
            f(v.length),
            roads.join("-"),
            v.passages,
            v.agreements,
            v.is_equilibrium,
            f(v.travel_time)
        );
    }
    Ok(vec![Output::new("equilibrium.csv", s)])
}

/// Runs `cmd` and returns its outputs without touching the file system.
pub fn produce(cmd: Command, cfg: &ExperimentConfig) -> Result<(Vec<Output>, String)> {
    cfg.validate()?;
    let net = Arc::new(cfg.build_network()?);
    let net_sha = sha256_hex(net.to_json().as_bytes());
    let out = match cmd {
        Command::Run => do_run(cfg, &net)?,
        Command::Sweep => do_sweep(cfg, &net)?,
        Command::Spread => do_spread(cfg, &net)?,
        Command::EquilibriumCheck => do_equilibrium(cfg, &net)?,
    };
    Ok((out, net_sha))
}

/// Runs `cmd`, writes its outputs and the manifest into `out_dir`.
pub fn execute(cmd: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let (outputs, network_sha256) = produce(cmd, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let mut digests = Vec::with_capacity(outputs.len());
    for o in &outputs {
        std::fs::write(out_dir.join(&o.name), &o.bytes)?;
        digests.push(OutputDigest {
            file: o.name.clone(),
            sha256: sha256_hex(&o.bytes),
            bytes: o.bytes.len(),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        command: cmd,
        config: cfg.clone(),
        seeds: cfg.seeds(),
        network_sha256,
        outputs: digests,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Replay(format!("{}: {e}", path.display())))
}

/// Re-runs a manifest into `out_dir` and checks every output checksum.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<Manifest> {
    let m = read_manifest(manifest_path)?;
    let ours = env!("CARGO_PKG_VERSION");
    if m.schema_version != SCHEMA_VERSION || m.crate_version != ours {
        return Err(Error::Replay(format!(
            "manifest was written by version {} (schema {}), this is version {ours} (schema {SCHEMA_VERSION})",
            m.crate_version, m.schema_version
        )));
    }
    if let (Ok(a), Ok(b)) = (
        manifest_path.parent().unwrap_or(Path::new(".")).canonicalize(),
        out_dir.canonicalize(),
    ) {
        if a == b {
            return Err(Error::Replay("replay output directory must differ from the original".into()));
        }
    }
    let net_sha = sha256_hex(m.config.build_network()?.to_json().as_bytes());
    if net_sha != m.network_sha256 {
        return Err(Error::Replay("network differs from the recorded one".into()));
    }
    if m.seeds != m.config.seeds() {
        return Err(Error::Replay("recorded seeds do not follow from the configuration".into()));
    }
    let fresh = execute(m.command, &m.config, out_dir)?;
    let mut diffs = Vec::new();
    for (old, new) in m.outputs.iter().zip(&fresh.outputs) {
        if old != new {
            diffs.push(old.file.clone());
        }
    }
    if m.outputs.len() != fresh.outputs.len() {
        diffs.push("<file list>".into());
    }
    if !diffs.is_empty() {
        return Err(Error::Replay(format!("outputs differ: {}", diffs.join(", "))));
    }
    Ok(fresh)
}
