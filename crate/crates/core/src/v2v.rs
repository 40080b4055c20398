//! Vehicle-to-vehicle communication: rendez-vous, knowledge bases with
//! memory and cascade, fictitious nowcast/forecast worlds, and the
//! V2V-RUE / V2V-DUE loops.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Car, CarId, SimParams, SimState};
use crate::equilibrium::{reactive_policies, Driver, RunResult, Scenario};
use crate::error::{Error, Result};
use crate::metrics::{knowledge_indicator, KnowledgeSeries};
use crate::network::{JunctionId, Network, RoadId};
use crate::parallel;
use crate::routing::{
    extract_dynamic_policy, instantaneous_weights, solve_dynamic_value, static_weights, NextRoad,
    RoutingPolicy, StaticPolicy, WeightField, WeightMethod,
};

/// Communication parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct V2VParams {
    /// Communication range, meters. Zero disables communication.
    pub range: f64,
    /// Minimal time between two communication checks of a car, seconds.
    pub comm_pause: f64,
    /// Records older than this are forgotten, seconds.
    pub memory: f64,
    /// Relay stored records about third cars.
    pub cascade: bool,
}

impl Default for V2VParams {
    fn default() -> Self {
        Self {
            range: 150.0,
            comm_pause: 0.0,
            memory: f64::INFINITY,
            cascade: true,
        }
    }
}

impl V2VParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.range >= 0.0) || !(self.comm_pause >= 0.0) || !(self.memory >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "range, comm_pause and memory must be non-negative: {self:?}"
            )));
        }
        if !self.comm_pause.is_finite() {
            return Err(Error::InvalidParameter("comm_pause must be finite".into()));
        }
        Ok(())
    }
}

/// What one car knows about another.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeRecord {
    pub subject: CarId,
    /// Grid step of the original observation.
    pub step: usize,
    /// Time of the original observation, seconds.
    pub timestamp: f64,
    pub road: RoadId,
    pub x: f64,
    pub speed: f64,
    pub destination: JunctionId,
    pub planned: Option<RoutingPolicy>,
}

impl KnowledgeRecord {
    pub fn observe(car: &Car, step: usize, dt: f64, planned: Option<RoutingPolicy>) -> Self {
        Self {
            subject: car.id,
            step,
            timestamp: step as f64 * dt,
            road: car.road,
            x: car.x,
            speed: car.speed,
            destination: car.destination,
            planned,
        }
    }

    fn to_car(&self, net: &Network) -> Car {
        Car {
            id: self.subject,
            origin: net.road(self.road).start,
            destination: self.destination,
            road: self.road,
            x: self.x,
            speed: self.speed,
            active: true,
            arrival: None,
            entered_road_at: self.timestamp,
        }
    }
}

/// Records held by one car, at most one per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    owner: CarId,
    records: BTreeMap<CarId, KnowledgeRecord>,
    last_comm: Option<usize>,
}

impl KnowledgeBase {
    pub fn new(owner: CarId) -> Self {
        Self {
            owner,
            records: BTreeMap::new(),
            last_comm: None,
        }
    }

    pub fn owner(&self) -> CarId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, subject: CarId) -> Option<&KnowledgeRecord> {
        self.records.get(&subject)
    }

    pub fn subjects(&self) -> impl Iterator<Item = CarId> + '_ {
        self.records.keys().copied()
    }

    pub fn records(&self) -> impl Iterator<Item = &KnowledgeRecord> {
        self.records.values()
    }

    /// Step of the last communication check.
    pub fn last_comm(&self) -> Option<usize> {
        self.last_comm
    }

    /// Whether `comm_pause` has elapsed since the last check.
    pub fn may_communicate(&self, step: usize, dt: f64, comm_pause: f64) -> bool {
        self.last_comm
            .is_none_or(|last| (step - last) as f64 * dt >= comm_pause - 1e-9)
    }

    /// Whether `rec` would replace what is stored about its subject.
    pub fn is_news(&self, rec: &KnowledgeRecord) -> bool {
        rec.subject != self.owner && self.records.get(&rec.subject).is_none_or(|old| rec.step > old.step)
    }

    /// Stores `rec` unless it is about the owner or not newer than the
    /// stored record. Returns whether it was stored.
    pub fn insert(&mut self, rec: KnowledgeRecord) -> bool {
        if !self.is_news(&rec) {
            return false;
        }
        self.records.insert(rec.subject, rec);
        true
    }

    /// Drops records older than `memory` at time `t`; returns their subjects.
    pub fn forget(&mut self, t: f64, memory: f64) -> Vec<CarId> {
        if memory == f64::INFINITY {
            return Vec::new();
        }
        let gone: Vec<CarId> = self
            .records
            .values()
            .filter(|r| t - r.timestamp > memory)
            .map(|r| r.subject)
            .collect();
        for s in &gone {
            self.records.remove(s);
        }
        gone
    }

    /// Appends `(t,owner,subject,timestamp,road,x)` rows.
    pub fn write_dump<W: Write>(&self, out: &mut W, t: f64) -> std::io::Result<()> {
        for r in self.records.values() {
            writeln!(
                out,
                "{t:.3},{},{},{:.3},{},{:.6}",
                self.owner.0, r.subject.0, r.timestamp, r.road.0, r.x
            )?;
        }
        Ok(())
    }
}

/// Pairs `(i, j)`, `i < j`, of active cars within `range` of each other in
/// the plane. A zero range yields no pairs.
pub fn detect_rendezvous(net: &Network, state: &SimState, range: f64) -> Vec<(usize, usize)> {
    if !(range > 0.0) {
        return Vec::new();
    }
    let pos: Vec<_> = state
        .cars
        .iter()
        .map(|c| c.active.then(|| net.embed(c.road, c.x)))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..pos.len() {
        let Some(a) = pos[i] else { continue };
        for (j, b) in pos.iter().enumerate().skip(i + 1) {
            if let Some(b) = b {
                if a.distance(*b) <= range {
                    pairs.push((i, j));
                }
            }
        }
    }
    pairs
}

/// Records each car receives in one synchronous communication round.
#[derive(Debug, Clone, Default)]
pub struct ExchangeRound {
    pub checking: Vec<bool>,
    pub incoming: Vec<Vec<KnowledgeRecord>>,
}

fn send(
    receiver: &KnowledgeBase,
    sender: &KnowledgeBase,
    sender_car: &Car,
    step: usize,
    dt: f64,
    cascade: bool,
    planned: Option<&RoutingPolicy>,
    out: &mut Vec<KnowledgeRecord>,
) {
    out.push(KnowledgeRecord::observe(sender_car, step, dt, planned.cloned()));
    if cascade {
        out.extend(sender.records().filter(|r| receiver.is_news(r)).cloned());
    }
}

/// Plans the exchanges at the current step from a snapshot of all bases:
/// relayed information never travels more than one hop per round.
/// `kbs[i]` belongs to `state.cars[i]`; `planned[i]` is shared along with
/// the position when given.
pub fn plan_exchanges(
    net: &Network,
    state: &SimState,
    kbs: &[KnowledgeBase],
    params: &V2VParams,
    planned: Option<&[RoutingPolicy]>,
) -> ExchangeRound {
    let n = state.cars.len();
    let step = state.step;
    let checking: Vec<bool> = state
        .cars
        .iter()
        .zip(kbs)
        .map(|(c, kb)| c.active && kb.may_communicate(step, state.dt, params.comm_pause))
        .collect();
    let mut incoming = vec![Vec::new(); n];
    if checking.iter().any(|&c| c) {
        for (i, j) in detect_rendezvous(net, state, params.range) {
            if !(checking[i] && checking[j]) {
                continue;
            }
            let pi = planned.map(|p| &p[i]);
            let pj = planned.map(|p| &p[j]);
            send(&kbs[i], &kbs[j], &state.cars[j], step, state.dt, params.cascade, pj, &mut incoming[i]);
            send(&kbs[j], &kbs[i], &state.cars[i], step, state.dt, params.cascade, pi, &mut incoming[j]);
        }
    }
    ExchangeRound { checking, incoming }
}

/// Applies one car's share of a round; returns the records that were new.
pub fn apply_incoming(
    kb: &mut KnowledgeBase,
    checking: bool,
    incoming: Vec<KnowledgeRecord>,
    step: usize,
) -> Vec<KnowledgeRecord> {
    if checking {
        kb.last_comm = Some(step);
    }
    let mut fresh: BTreeMap<CarId, KnowledgeRecord> = BTreeMap::new();
    for rec in incoming {
        if kb.insert(rec.clone()) {
            fresh.insert(rec.subject, rec);
        }
    }
    fresh.into_values().collect()
}

/// Exchange between the bases of two cars that met at the state's current
/// step. Both receive a fresh record about the other and, with cascade,
/// everything the other knew before the exchange.
pub fn exchange(
    a: &mut KnowledgeBase,
    b: &mut KnowledgeBase,
    state: &SimState,
    params: &V2VParams,
    planned: Option<(&RoutingPolicy, &RoutingPolicy)>,
) -> Result<()> {
    let car_a = state
        .car(a.owner)
        .ok_or_else(|| Error::InvalidScenario(format!("{} is not in the state", a.owner)))?;
    let car_b = state
        .car(b.owner)
        .ok_or_else(|| Error::InvalidScenario(format!("{} is not in the state", b.owner)))?;
    let (mut to_a, mut to_b) = (Vec::new(), Vec::new());
    let (pa, pb) = planned.map_or((None, None), |(x, y)| (Some(x), Some(y)));
    send(a, b, car_b, state.step, state.dt, params.cascade, pb, &mut to_a);
    send(b, a, car_a, state.step, state.dt, params.cascade, pa, &mut to_b);
    apply_incoming(a, true, to_a, state.step);
    apply_incoming(b, true, to_b, state.step);
    Ok(())
}

/// Advances a lone car with a fixed policy to `to_step`.
fn solo_advance(
    net: &Network,
    car: Car,
    from_step: usize,
    to_step: usize,
    policy: &RoutingPolicy,
    params: &SimParams,
) -> Result<Car> {
    let mut s = SimState::new(from_step, params.dt, vec![car]);
    let pols = std::slice::from_ref(policy);
    while s.step < to_step && s.cars[0].active {
        dynamics::step(net, &mut s, pols, params)?;
    }
    Ok(s.cars.pop().expect("one car"))
}

/// A car's private simulation of the cars it knows about.
#[derive(Debug, Clone)]
struct World {
    state: SimState,
    plans: Vec<Option<RoutingPolicy>>,
}

impl World {
    fn new(dt: f64) -> Self {
        Self {
            state: SimState::new(0, dt, Vec::new()),
            plans: Vec::new(),
        }
    }

    fn remove(&mut self, subjects: &[CarId]) {
        if subjects.is_empty() {
            return;
        }
        let gone: BTreeSet<CarId> = subjects.iter().copied().collect();
        let keep: Vec<bool> = self.state.cars.iter().map(|c| !gone.contains(&c.id)).collect();
        let mut it = keep.iter();
        self.plans.retain(|_| *it.next().expect("aligned"));
        self.state.cars.retain(|c| !gone.contains(&c.id));
    }

    fn upsert(&mut self, car: Car, plan: Option<RoutingPolicy>) {
        match self.state.position_of(car.id) {
            Some(i) => {
                self.state.cars[i] = car;
                self.plans[i] = plan;
            }
            None => {
                let i = self.state.cars.partition_point(|c| c.id < car.id);
                self.state.cars.insert(i, car);
                self.plans.insert(i, plan);
            }
        }
    }

    fn has_active(&self) -> bool {
        self.state.cars.iter().any(|c| c.active)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Rue,
    Due,
}

/// Shared read-only context of one V2V run.
struct Ctx<'a> {
    net: &'a Network,
    params: SimParams,
    v2v: V2VParams,
    method: WeightMethod,
    mode: Mode,
    free: Vec<f64>,
    fallbacks: BTreeMap<JunctionId, Arc<StaticPolicy>>,
}

impl Ctx<'_> {
    fn fallback(&self, d: JunctionId) -> RoutingPolicy {
        RoutingPolicy::Static(Arc::clone(&self.fallbacks[&d]))
    }

    fn weights<'c>(&self, cars: impl IntoIterator<Item = &'c Car>, t: f64) -> Vec<f64> {
        instantaneous_weights(self.net, &self.params, self.method, cars, &[], t)
    }

    /// One fictitious step; frozen cars stay put, everything else follows
    /// either a fresh reactive policy or its received plan.
    fn advance_world(&self, w: &mut World, frozen: &BTreeSet<CarId>) -> Result<()> {
        let moving: Vec<bool> = w
            .state
            .cars
            .iter()
            .map(|c| c.active && !frozen.contains(&c.id))
            .collect();
        if !moving.iter().any(|&m| m) {
            w.state.step += 1;
            return Ok(());
        }
        match self.mode {
            Mode::Rue => {
                let weights = self.weights(&w.state.cars, w.state.time());
                let dests: BTreeSet<JunctionId> = w
                    .state
                    .cars
                    .iter()
                    .zip(&moving)
                    .filter(|(_, &m)| m)
                    .map(|(c, _)| c.destination)
                    .collect();
                let by_dest = reactive_policies(self.net, &weights, dests);
                let pols: Vec<Option<&RoutingPolicy>> = w
                    .state
                    .cars
                    .iter()
                    .zip(&moving)
                    .map(|(c, &m)| m.then(|| &by_dest[&c.destination]))
                    .collect();
                dynamics::step_masked(self.net, &mut w.state, &pols, &self.params)?;
            }
            Mode::Due => {
                let fb: Vec<RoutingPolicy> = w.state.cars.iter().map(|c| self.fallback(c.destination)).collect();
                let pols: Vec<Option<&RoutingPolicy>> = w
                    .plans
                    .iter()
                    .zip(&moving)
                    .zip(&fb)
                    .map(|((p, &m), f)| m.then(|| p.as_ref().unwrap_or(f)))
                    .collect();
                dynamics::step_masked(self.net, &mut w.state, &pols, &self.params)?;
            }
        }
        Ok(())
    }

    /// Brings the world to `step` and merges newly received records.
    fn nowcast(&self, w: &mut World, step: usize, fresh: &[KnowledgeRecord]) -> Result<()> {
        let frozen: BTreeSet<CarId> = fresh.iter().map(|r| r.subject).collect();
        while w.state.step < step {
            self.advance_world(w, &frozen)?;
        }
        for rec in fresh {
            let plan = match self.mode {
                Mode::Rue => None,
                Mode::Due => rec.planned.clone(),
            };
            let mut car = rec.to_car(self.net);
            if rec.step < step {
                let p = plan.clone().unwrap_or_else(|| self.fallback(rec.destination));
                car = solo_advance(self.net, car, rec.step, step, &p, &self.params)?;
            }
            w.upsert(car, plan);
        }
        Ok(())
    }

    /// Reactive policy of `me` from its nowcast of the known cars plus its
    /// own exact state.
    fn rue_policy(&self, w: &World, me: &Car, t: f64) -> RoutingPolicy {
        let cars = &w.state.cars;
        let at = cars.partition_point(|c| c.id < me.id);
        let visible = cars[..at].iter().chain(std::iter::once(me)).chain(cars[at..].iter());
        let weights = self.weights(visible, t);
        reactive_policies(self.net, &weights, [me.destination])
            .remove(&me.destination)
            .expect("solved")
    }

    /// Time-dependent policy of `me` from a forecast of the known cars
    /// following their received plans and of itself following `own`. The
    /// forecast weights are averaged with the car's earlier forecasts, one
    /// successive-averages iteration per re-plan.
    fn due_policy(
        &self,
        w: &World,
        me: &Car,
        own: &RoutingPolicy,
        step: usize,
        avg: &mut Averaged,
    ) -> Result<RoutingPolicy> {
        if !w.has_active() {
            return Ok(self.fallback(me.destination));
        }
        let last = self.params.horizon_steps();
        let start = step.min(last);
        let mut field = WeightField::filled(self.params.dt, last + 1, &self.free);
        let mut f = w.clone();
        f.upsert(me.clone(), Some(own.clone()));
        let none = BTreeSet::new();
        while f.state.step <= last && f.has_active() {
            let wts = self.weights(&f.state.cars, f.state.time());
            field.slice_mut(f.state.step).copy_from_slice(&wts);
            if f.state.step == last {
                break;
            }
            self.advance_world(&mut f, &none)?;
        }
        avg.n += 1;
        let field = match avg.field.take() {
            None => field,
            Some(mut acc) => {
                let k = avg.n as f64;
                for s in start..=last {
                    for (a, x) in acc.slice_mut(s).iter_mut().zip(field.slice(s)) {
                        *a = ((k - 1.0) * *a + x) / k;
                    }
                }
                acc
            }
        };
        let v = solve_dynamic_value(self.net, &field, me.destination, start)?;
        let fb = Arc::clone(&self.fallbacks[&me.destination]);
        let policy = RoutingPolicy::Dynamic(Arc::new(
            extract_dynamic_policy(self.net, &v, &field).with_fallback(fb),
        ));
        avg.field = Some(field);
        Ok(policy)
    }
}

/// Running average of a car's forecast weights.
#[derive(Debug, Clone, Default)]
struct Averaged {
    field: Option<WeightField>,
    n: usize,
}

/// The road a tracked car took at a junction next to the one it would have
/// chosen itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathChoice {
    pub step: usize,
    pub junction: JunctionId,
    pub chosen: RoadId,
    pub preferred: NextRoad,
}

impl PathChoice {
    pub fn agrees(&self) -> bool {
        self.preferred == NextRoad::Road(self.chosen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct V2VRunResult {
    pub run: RunResult,
    pub knowledge: KnowledgeSeries,
    pub choices: Vec<PathChoice>,
}

struct Agent<'k> {
    kb: &'k mut KnowledgeBase,
    world: &'k mut World,
    plan: &'k mut RoutingPolicy,
    avg: &'k mut Averaged,
}

fn run_engine(
    scn: &Scenario,
    v2v: &V2VParams,
    mode: Mode,
    forced: Option<&[RoutingPolicy]>,
    tracked: Option<CarId>,
    trace: Option<&mut dyn Write>,
) -> Result<V2VRunResult> {
    scn.validate()?;
    v2v.validate()?;
    if matches!(scn.weight_method, WeightMethod::M1 { .. }) {
        return Err(Error::InvalidParameter(
            "traversal-history weights are not available inside fictitious worlds".into(),
        ));
    }
    let net: &Network = &scn.net;
    let ctx = Ctx {
        net,
        params: scn.params,
        v2v: *v2v,
        method: scn.weight_method,
        mode,
        free: static_weights(net, scn.params.v_max),
        fallbacks: scn.fallbacks(),
    };
    let n = scn.num_cars();
    let mut plans = scn.shortest_path_policies();
    if let Some(f) = forced {
        if f.len() != n {
            return Err(Error::InvalidScenario("one forced path per car is required".into()));
        }
    }
    let mut d = Driver::start(scn, forced.unwrap_or(&plans), trace)?;
    let mut kbs: Vec<KnowledgeBase> = (0..n).map(|i| KnowledgeBase::new(CarId(i))).collect();
    let mut worlds: Vec<World> = (0..n).map(|_| World::new(scn.params.dt)).collect();
    let mut avgs: Vec<Averaged> = vec![Averaged::default(); n];
    let mut knowledge = KnowledgeSeries::default();
    let mut choices = Vec::new();

    while d.running() {
        let state = &d.state;
        let step = state.step;
        let t = state.time();
        for (kb, w) in kbs.iter_mut().zip(worlds.iter_mut()) {
            if state.cars[kb.owner.0].active {
                let gone = kb.forget(t, ctx.v2v.memory);
                w.remove(&gone);
            }
        }
        let round = plan_exchanges(
            net,
            state,
            &kbs,
            &ctx.v2v,
            (mode == Mode::Due).then_some(plans.as_slice()),
        );
        let ExchangeRound { checking, incoming } = round;
        let mut agents: Vec<(Agent, bool, Vec<KnowledgeRecord>)> = kbs
            .iter_mut()
            .zip(worlds.iter_mut())
            .zip(plans.iter_mut().zip(avgs.iter_mut()))
            .zip(checking.into_iter().zip(incoming))
            .map(|(((kb, world), (plan, avg)), (chk, inc))| (Agent { kb, world, plan, avg }, chk, inc))
            .collect();
        let outcomes = parallel::map_mut(&mut agents, |i, (agent, chk, inc)| -> Result<()> {
            let me = &state.cars[i];
            if !me.active {
                return Ok(());
            }
            let fresh = apply_incoming(agent.kb, *chk, std::mem::take(inc), step);
            if tracked.is_some_and(|c| c.0 != i) {
                return Ok(());
            }
            ctx.nowcast(agent.world, step, &fresh)?;
            *agent.plan = match mode {
                Mode::Rue => ctx.rue_policy(agent.world, me, t),
                Mode::Due => ctx.due_policy(agent.world, me, agent.plan, step, agent.avg)?,
            };
            Ok(())
        });
        drop(agents);
        outcomes.into_iter().collect::<Result<Vec<()>>>()?;
        knowledge.push(t, knowledge_indicator(state, &kbs), state.active_count());

        let tracked_plan = tracked.map(|c| plans[c.0].clone());
        if step == 0 {
            if let (Some(c), Some(p)) = (tracked, &tracked_plan) {
                let car = &state.cars[c.0];
                choices.push(PathChoice {
                    step: 0,
                    junction: car.origin,
                    chosen: car.road,
                    preferred: p.next_road(0, car.origin),
                });
            }
        }
        let ev = d.advance(forced.unwrap_or(&plans))?;
        if let (Some(c), Some(p)) = (tracked, &tracked_plan) {
            for tr in ev.transitions.iter().filter(|tr| tr.car == c) {
                choices.push(PathChoice {
                    step,
                    junction: tr.junction,
                    chosen: tr.to,
                    preferred: p.next_road(step, tr.junction),
                });
            }
        }
    }
    Ok(V2VRunResult {
        run: d.finish(),
        knowledge,
        choices,
    })
}

/// Reactive route choice restricted to what each car learned by V2V
/// communication, with nowcasts of the known cars.
pub fn run_v2v_rue(scn: &Scenario, v2v: &V2VParams) -> Result<V2VRunResult> {
    run_engine(scn, v2v, Mode::Rue, None, None, None)
}

pub fn run_v2v_rue_traced(scn: &Scenario, v2v: &V2VParams, trace: Option<&mut dyn Write>) -> Result<V2VRunResult> {
    run_engine(scn, v2v, Mode::Rue, None, None, trace)
}

/// Predictive route choice: cars share planned paths, forecast the known
/// cars and solve the time-dependent problem on the remaining horizon.
pub fn run_v2v_due(scn: &Scenario, v2v: &V2VParams) -> Result<V2VRunResult> {
    run_engine(scn, v2v, Mode::Due, None, None, None)
}

pub fn run_v2v_due_traced(scn: &Scenario, v2v: &V2VParams, trace: Option<&mut dyn Write>) -> Result<V2VRunResult> {
    run_engine(scn, v2v, Mode::Due, None, None, trace)
}

/// Fictitious world of the cars known by `kb` at `to_step`, simulated from
/// scratch: every known car enters at its record's step and follows
/// reactive policies based on the fictitious population only.
pub fn nowcast_rue(
    net: &Network,
    kb: &KnowledgeBase,
    to_step: usize,
    params: &SimParams,
    method: WeightMethod,
) -> Result<SimState> {
    let ctx = Ctx {
        net,
        params: *params,
        v2v: V2VParams::default(),
        method,
        mode: Mode::Rue,
        free: static_weights(net, params.v_max),
        fallbacks: BTreeMap::new(),
    };
    let mut recs: Vec<&KnowledgeRecord> = kb.records().filter(|r| r.step <= to_step).collect();
    recs.sort_by_key(|r| (r.step, r.subject));
    let mut w = World::new(params.dt);
    if let Some(first) = recs.first() {
        w.state.step = first.step;
    }
    let none = BTreeSet::new();
    let mut i = 0;
    loop {
        while i < recs.len() && recs[i].step == w.state.step {
            w.upsert(recs[i].to_car(net), None);
            i += 1;
        }
        if w.state.step >= to_step {
            break;
        }
        ctx.advance_world(&mut w, &none)?;
    }
    Ok(w.state)
}

/// Knowledge spreading among cars following their free-flow shortest paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadResult {
    pub knowledge: KnowledgeSeries,
    /// Mean number of active cars within range per active car.
    pub contacts: Vec<f64>,
    pub run: RunResult,
}

pub fn run_spread(scn: &Scenario, v2v: &V2VParams) -> Result<SpreadResult> {
    run_spread_traced(scn, v2v, None)
}

pub fn run_spread_traced(scn: &Scenario, v2v: &V2VParams, trace: Option<&mut dyn Write>) -> Result<SpreadResult> {
    scn.validate()?;
    v2v.validate()?;
    let net: &Network = &scn.net;
    let policies = scn.shortest_path_policies();
    let mut d = Driver::start(scn, &policies, trace)?;
    let n = scn.num_cars();
    let mut kbs: Vec<KnowledgeBase> = (0..n).map(|i| KnowledgeBase::new(CarId(i))).collect();
    let mut knowledge = KnowledgeSeries::default();
    let mut contacts = Vec::new();
    while d.running() {
        let state = &d.state;
        let t = state.time();
        for kb in kbs.iter_mut() {
            if state.cars[kb.owner.0].active {
                kb.forget(t, v2v.memory);
            }
        }
        let ExchangeRound { checking, incoming } = plan_exchanges(net, state, &kbs, v2v, None);
        for ((kb, chk), inc) in kbs.iter_mut().zip(checking).zip(incoming) {
            apply_incoming(kb, chk, inc, state.step);
        }
        let n_a = state.active_count();
        knowledge.push(t, knowledge_indicator(state, &kbs), n_a);
        let pairs = detect_rendezvous(net, state, v2v.range).len();
        contacts.push(if n_a == 0 { 0.0 } else { (2 * pairs) as f64 / n_a as f64 });
        d.advance(&policies)?;
    }
    Ok(SpreadResult {
        knowledge,
        contacts,
        run: d.finish(),
    })
}

/// Outcome of locking every car to a given path while asking the tracked
/// car, at each junction it passes, which road V2V-RUE would pick.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub choices: Vec<PathChoice>,
    pub is_equilibrium: bool,
    pub run: RunResult,
}

pub fn equilibrium_path_check(
    scn: &Scenario,
    v2v: &V2VParams,
    forced_paths: &[Vec<RoadId>],
    tracked: CarId,
) -> Result<EquilibriumReport> {
    if forced_paths.len() != scn.num_cars() {
        return Err(Error::InvalidScenario("one forced path per car is required".into()));
    }
    if tracked.0 >= scn.num_cars() {
        return Err(Error::InvalidScenario(format!("unknown tracked car {tracked}")));
    }
    let mut starts = Vec::with_capacity(forced_paths.len());
    let mut policies = Vec::with_capacity(forced_paths.len());
    for (i, path) in forced_paths.iter().enumerate() {
        let p = StaticPolicy::from_route(&scn.net, path)?;
        let (o, dst) = scn.od_pairs[i];
        if scn.net.road(path[0]).start != o || p.destination() != dst {
            return Err(Error::InvalidScenario(format!(
                "forced path of car {i} does not join {o} to {dst}"
            )));
        }
        starts.push(path[0]);
        policies.push(RoutingPolicy::from_static(p));
    }
    let mut scn = scn.clone();
    scn.start_roads = Some(starts);
    let out = run_engine(&scn, v2v, Mode::Rue, Some(&policies), Some(tracked), None)?;
    let is_equilibrium = out.run.terminated && out.choices.iter().all(PathChoice::agrees);
    Ok(EquilibriumReport {
        choices: out.choices,
        is_equilibrium,
        run: out.run,
    })
}
