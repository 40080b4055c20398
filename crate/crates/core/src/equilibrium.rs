//! Full-information route choice: basic behaviour (static shortest paths),
//! reactive user equilibrium and dynamic user equilibrium.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, SimParams, SimState, StepEvents, TRACE_HEADER};
use crate::error::{Error, Result};
use crate::network::{JunctionId, Network, RoadId};
use crate::parallel;
use crate::routing::{
    extract_dynamic_policy, extract_static_policy, instantaneous_weights, shortest_path_policy,
    solve_dynamic_value, solve_reactive_value, static_weights, RoutingPolicy, StaticPolicy, WeightField,
    WeightMethod,
};

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: Arc<Network>,
    pub od_pairs: Vec<(JunctionId, JunctionId)>,
    /// First road of every car; by default the free-flow shortest-path
    /// choice at its origin.
    pub start_roads: Option<Vec<RoadId>>,
    pub params: SimParams,
    pub weight_method: WeightMethod,
    pub seed: u64,
}

impl Scenario {
    pub fn new(net: Arc<Network>, od_pairs: Vec<(JunctionId, JunctionId)>, params: SimParams) -> Self {
        Self {
            net,
            od_pairs,
            start_roads: None,
            params,
            weight_method: WeightMethod::M3,
            seed: 0,
        }
    }

    pub fn with_start_roads(mut self, roads: Vec<RoadId>) -> Self {
        self.start_roads = Some(roads);
        self
    }

    pub fn num_cars(&self) -> usize {
        self.od_pairs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate(&self.net)?;
        if self.od_pairs.is_empty() {
            return Err(Error::InvalidScenario("no cars".into()));
        }
        for (i, &(o, d)) in self.od_pairs.iter().enumerate() {
            if !self.net.contains_junction(o) || !self.net.contains_junction(d) {
                return Err(Error::InvalidScenario(format!("car {i} has an unknown OD junction")));
            }
            if o == d {
                return Err(Error::InvalidScenario(format!("car {i} has origin equal to destination")));
            }
            if !self.net.reachable_from(o)[d.0] {
                return Err(Error::InvalidScenario(format!("car {i}: {d} is unreachable from {o}")));
            }
        }
        if let Some(s) = &self.start_roads {
            if s.len() != self.od_pairs.len() {
                return Err(Error::InvalidScenario("one start road per car is required".into()));
            }
        }
        Ok(())
    }

    /// Free-flow shortest-path policy for every car, one solve per
    /// destination.
    pub fn shortest_path_policies(&self) -> Vec<RoutingPolicy> {
        let mut cache: BTreeMap<JunctionId, RoutingPolicy> = BTreeMap::new();
        self.od_pairs
            .iter()
            .map(|&(_, d)| {
                cache
                    .entry(d)
                    .or_insert_with(|| {
                        RoutingPolicy::from_static(shortest_path_policy(&self.net, self.params.v_max, d))
                    })
                    .clone()
            })
            .collect()
    }

    /// Free-flow shortest-path policy per destination.
    pub(crate) fn fallbacks(&self) -> BTreeMap<JunctionId, Arc<StaticPolicy>> {
        let mut out = BTreeMap::new();
        for &(_, d) in &self.od_pairs {
            out.entry(d)
                .or_insert_with(|| Arc::new(shortest_path_policy(&self.net, self.params.v_max, d)));
        }
        out
    }
}

/// Roads entered by one car, with the step at which each was entered.
pub type RouteLog = Vec<(usize, RoadId)>;

/// One forward/backward iteration of the equilibrium solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStat {
    pub iteration: usize,
    pub ttt: f64,
    pub max_weight_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub ttt: f64,
    /// Travel time of every car; cars still driving at `t_fin` count `t_fin`.
    pub per_car_tt: Vec<f64>,
    pub routes: Vec<RouteLog>,
    pub iterations: usize,
    pub converged: bool,
    /// Whether every car arrived before `t_fin`.
    pub terminated: bool,
    pub history: Vec<IterationStat>,
}

impl RunResult {
    /// Sequence of roads of car `c`.
    pub fn roads_of(&self, c: usize) -> Vec<RoadId> {
        self.routes[c].iter().map(|&(_, r)| r).collect()
    }
}

/// Owns the real simulation: spawning, stepping, route logs and tracing.
pub(crate) struct Driver<'a, 'w> {
    pub net: &'a Network,
    pub params: SimParams,
    pub state: SimState,
    routes: Vec<RouteLog>,
    trace: Option<&'w mut dyn Write>,
    horizon: usize,
}

impl<'a, 'w> Driver<'a, 'w> {
    pub fn start(
        scn: &'a Scenario,
        policies: &[RoutingPolicy],
        trace: Option<&'w mut dyn Write>,
    ) -> Result<Self> {
        let net: &Network = &scn.net;
        let mut state = match &scn.start_roads {
            Some(roads) => dynamics::spawn_on(net, &scn.od_pairs, roads, policies, &scn.params)?,
            None => dynamics::spawn(net, &scn.od_pairs, policies, &scn.params)?,
        };
        state.record_traversals = matches!(scn.weight_method, WeightMethod::M1 { .. });
        let routes = state.cars.iter().map(|c| vec![(0, c.road)]).collect();
        let mut d = Self {
            net,
            params: scn.params,
            state,
            routes,
            trace,
            horizon: scn.params.horizon_steps(),
        };
        if let Some(w) = d.trace.as_mut() {
            writeln!(w, "{TRACE_HEADER}")?;
            dynamics::write_trace_rows(w, &d.state)?;
        }
        Ok(d)
    }

    pub fn running(&self) -> bool {
        self.state.step < self.horizon && !self.state.all_arrived()
    }

    pub fn advance(&mut self, policies: &[RoutingPolicy]) -> Result<StepEvents> {
        let ev = dynamics::step(self.net, &mut self.state, policies, &self.params)?;
        for t in &ev.transitions {
            self.routes[t.car.0].push((self.state.step, t.to));
        }
        if let Some(w) = self.trace.as_mut() {
            dynamics::write_trace_rows(w, &self.state)?;
        }
        Ok(ev)
    }

    pub fn finish(self) -> RunResult {
        let t_fin = self.params.t_fin;
        let per_car_tt: Vec<f64> = self
            .state
            .cars
            .iter()
            .map(|c| c.arrival.unwrap_or(t_fin))
            .collect();
        RunResult {
            ttt: per_car_tt.iter().sum(),
            terminated: self.state.all_arrived(),
            per_car_tt,
            routes: self.routes,
            iterations: 1,
            converged: true,
            history: Vec::new(),
        }
    }
}

/// Basic behaviour: every car follows its free-flow shortest path.
pub fn run_bb(scn: &Scenario) -> Result<RunResult> {
    run_bb_traced(scn, None)
}

pub fn run_bb_traced(scn: &Scenario, trace: Option<&mut dyn Write>) -> Result<RunResult> {
    scn.validate()?;
    let policies = scn.shortest_path_policies();
    let mut d = Driver::start(scn, &policies, trace)?;
    while d.running() {
        d.advance(&policies)?;
    }
    Ok(d.finish())
}

/// Per-destination reactive policies for the given weights.
pub(crate) fn reactive_policies(
    net: &Network,
    w: &[f64],
    dests: impl IntoIterator<Item = JunctionId>,
) -> BTreeMap<JunctionId, RoutingPolicy> {
    dests
        .into_iter()
        .map(|d| {
            let v = solve_reactive_value(net, w, d);
            (d, RoutingPolicy::from_static(extract_static_policy(net, &v, w)))
        })
        .collect()
}

/// Reactive user equilibrium: at every step each car re-optimizes against
/// the current weights of all active cars.
pub fn run_rue(scn: &Scenario) -> Result<RunResult> {
    run_rue_traced(scn, None)
}

pub fn run_rue_traced(scn: &Scenario, trace: Option<&mut dyn Write>) -> Result<RunResult> {
    scn.validate()?;
    let mut policies = scn.shortest_path_policies();
    let mut d = Driver::start(scn, &policies, trace)?;
    while d.running() {
        let s = &d.state;
        let w = instantaneous_weights(d.net, &d.params, scn.weight_method, &s.cars, &s.traversals, s.time());
        let dests: std::collections::BTreeSet<_> =
            s.cars.iter().filter(|c| c.active).map(|c| c.destination).collect();
        let by_dest = reactive_policies(d.net, &w, dests);
        for (p, c) in policies.iter_mut().zip(&s.cars) {
            if c.active {
                *p = by_dest[&c.destination].clone();
            }
        }
        d.advance(&policies)?;
    }
    Ok(d.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DueOptions {
    pub max_iter: usize,
    /// Convergence threshold on successive total travel times, seconds.
    pub tol: f64,
}

impl Default for DueOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 0.5,
        }
    }
}

/// Forward load with frozen policies; also returns the weights observed on
/// every grid slice (free flow once the network is empty).
fn forward_load(
    scn: &Scenario,
    policies: &[RoutingPolicy],
    free: &[f64],
    trace: Option<&mut dyn Write>,
) -> Result<(RunResult, WeightField)> {
    let slices = scn.params.horizon_steps() + 1;
    let mut field = WeightField::filled(scn.params.dt, slices, free);
    let mut d = Driver::start(scn, policies, trace)?;
    while d.running() {
        let s = &d.state;
        let w = instantaneous_weights(d.net, &d.params, scn.weight_method, &s.cars, &s.traversals, s.time());
        field.slice_mut(s.step).copy_from_slice(&w);
        d.advance(policies)?;
    }
    Ok((d.finish(), field))
}

/// Per-destination time-dependent policies for `field`.
pub(crate) fn dynamic_policies(
    net: &Network,
    field: &WeightField,
    start_slice: usize,
    fallbacks: &BTreeMap<JunctionId, Arc<StaticPolicy>>,
) -> Result<BTreeMap<JunctionId, RoutingPolicy>> {
    let dests: Vec<(JunctionId, Arc<StaticPolicy>)> =
        fallbacks.iter().map(|(d, f)| (*d, Arc::clone(f))).collect();
    let solved = parallel::map(&dests, |(d, f)| -> Result<(JunctionId, RoutingPolicy)> {
        let v = solve_dynamic_value(net, field, *d, start_slice)?;
        let p = extract_dynamic_policy(net, &v, field).with_fallback(Arc::clone(f));
        Ok((*d, RoutingPolicy::Dynamic(Arc::new(p))))
    });
    solved.into_iter().collect()
}

/// Dynamic user equilibrium by forward/backward iteration with the method
/// of successive averages on the weights.
///
/// Stops once two successive total travel times differ by at most
/// `opts.tol`; otherwise returns the iterate with the lowest total travel
/// time after `opts.max_iter` loads, flagged as not converged.
pub fn run_due(scn: &Scenario, opts: DueOptions) -> Result<RunResult> {
    run_due_traced(scn, opts, None)
}

pub fn run_due_traced(scn: &Scenario, opts: DueOptions, trace: Option<&mut dyn Write>) -> Result<RunResult> {
    scn.validate()?;
    if opts.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let net: &Network = &scn.net;
    let free = static_weights(net, scn.params.v_max);
    let fallbacks = scn.fallbacks();
    let mut policies = scn.shortest_path_policies();
    let mut avg: Option<WeightField> = None;
    let mut history = Vec::new();
    let mut prev_ttt = f64::NAN;
    let mut best: Option<(RunResult, Vec<RoutingPolicy>)> = None;
    let mut converged = false;

    for k in 1..=opts.max_iter {
        let (result, measured) = forward_load(scn, &policies, &free, None)?;
        let ttt = result.ttt;
        let done = k >= 2 && (ttt - prev_ttt).abs() <= opts.tol;
        prev_ttt = ttt;
        if best.as_ref().is_none_or(|(b, _)| done || ttt < b.ttt) {
            best = Some((result, policies.clone()));
        }
        let mut change = 0.0_f64;
        if done || k == opts.max_iter {
            history.push(IterationStat {
                iteration: k,
                ttt,
                max_weight_change: change,
            });
            converged = done;
            break;
        }
        let next = match avg.take() {
            None => measured,
            Some(mut a) => {
                let kf = k as f64;
                for (x, &m) in a.values_mut().iter_mut().zip(measured.values()) {
                    let y = ((kf - 1.0) * *x + m) / kf;
                    change = change.max((y - *x).abs());
                    *x = y;
                }
                a
            }
        };
        history.push(IterationStat {
            iteration: k,
            ttt,
            max_weight_change: change,
        });
        let by_dest = dynamic_policies(net, &next, 0, &fallbacks)?;
        policies = scn.od_pairs.iter().map(|(_, d)| by_dest[d].clone()).collect();
        avg = Some(next);
    }

    let (mut result, final_policies) = best.expect("at least one iteration ran");
    if let Some(w) = trace {
        result = forward_load(scn, &final_policies, &free, Some(w))?.0;
    }
    result.iterations = history.len();
    result.converged = converged;
    result.history = history;
    Ok(result)
}

/// Writes the per-iteration diagnostics as CSV.
pub fn write_history<W: Write>(out: &mut W, history: &[IterationStat]) -> std::io::Result<()> {
    writeln!(out, "iteration,ttt,max_weight_change")?;
    for h in history {
        writeln!(out, "{},{},{}", h.iteration, h.ttt, h.max_weight_change)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_manhattan, build_simple_eleven, ELEVEN_DESTINATION};

    fn single(net: Network, o: usize, d: usize) -> Scenario {
        Scenario::new(Arc::new(net), vec![(JunctionId(o), JunctionId(d))], SimParams::reference(300.0))
    }

    #[test]
    fn single_car_free_flow() {
        let net = build_manhattan(3, 50.0).unwrap();
        let scn = single(net, 0, 2);
        let r = run_bb(&scn).unwrap();
        assert!(r.terminated);
        assert!((r.ttt - 7.2).abs() <= 0.6 + 1e-9);
        assert_eq!(r.per_car_tt.len(), 1);
        assert_eq!(r.roads_of(0), vec![RoadId(0), RoadId(1)]);
    }

    #[test]
    fn single_car_all_behaviours_agree() {
        let net = build_manhattan(4, 50.0).unwrap();
        let scn = single(net, 0, 15);
        let bb = run_bb(&scn).unwrap();
        let rue = run_rue(&scn).unwrap();
        let due = run_due(&scn, DueOptions::default()).unwrap();
        assert_eq!(bb.routes, rue.routes);
        assert_eq!(bb.routes, due.routes);
        assert_eq!(bb.ttt, due.ttt);
        assert!(due.converged);
        assert_eq!(due.iterations, 2);
    }

    #[test]
    fn ttt_is_sum_of_travel_times_and_deterministic() {
        let net = Arc::new(build_manhattan(3, 50.0).unwrap());
        let od = (0..20).map(|i| (JunctionId(i % 9), JunctionId((i * 4 + 1) % 9))).filter(|(a, b)| a != b).collect();
        let scn = Scenario::new(net, od, SimParams::reference(600.0));
        let a = run_rue(&scn).unwrap();
        let b = run_rue(&scn).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ttt, a.per_car_tt.iter().sum::<f64>());
    }

    #[test]
    fn unfinished_cars_count_t_fin() {
        let net = build_manhattan(3, 50.0).unwrap();
        let mut scn = single(net, 0, 8);
        scn.params.t_fin = 6.0;
        let r = run_bb(&scn).unwrap();
        assert!(!r.terminated);
        assert_eq!(r.ttt, 6.0);
    }

    #[test]
    fn eleven_bb_uses_short_route() {
        let net = Arc::new(build_simple_eleven());
        let n = 30;
        let starts: Vec<RoadId> = (0..n).map(|i| [RoadId(2), RoadId(6), RoadId(8)][i % 3]).collect();
        let od = starts.iter().map(|&r| (net.road(r).start, ELEVEN_DESTINATION)).collect();
        let scn = Scenario::new(Arc::clone(&net), od, SimParams::reference(900.0)).with_start_roads(starts.clone());
        let r = run_bb(&scn).unwrap();
        assert!(r.terminated);
        for (i, s) in starts.iter().enumerate() {
            if *s == RoadId(8) {
                assert_eq!(r.roads_of(i), vec![RoadId(8), RoadId(0), RoadId(7), RoadId(5)]);
            }
        }
    }

    #[test]
    fn msa_history_is_recorded() {
        let net = Arc::new(build_simple_eleven());
        let starts: Vec<RoadId> = (0..24).map(|i| [RoadId(2), RoadId(6), RoadId(8)][i % 3]).collect();
        let od = starts.iter().map(|&r| (net.road(r).start, ELEVEN_DESTINATION)).collect();
        let scn = Scenario::new(Arc::clone(&net), od, SimParams::reference(900.0)).with_start_roads(starts);
        let r = run_due(&scn, DueOptions { max_iter: 6, tol: 0.5 }).unwrap();
        assert_eq!(r.history.len(), r.iterations);
        assert!(r.iterations <= 6);
        if !r.converged {
            let best = r.history.iter().map(|h| h.ttt).fold(f64::INFINITY, f64::min);
            assert_eq!(r.ttt, best);
        }
        assert!(run_due(&scn, DueOptions { max_iter: 0, tol: 0.5 }).is_err());
    }
}
