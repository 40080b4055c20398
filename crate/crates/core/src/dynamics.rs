//! Forward-in-time network loading: follow-the-leader velocities, explicit
//! Euler stepping, junction transitions and arrivals.

use std::cmp::Reverse;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{JunctionId, Network, RoadId};
use crate::routing::{NextRoad, RoutingPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CarId(pub usize);

impl CarId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for CarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Kinematic and numerical parameters shared by every simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Euler time step, seconds.
    pub dt: f64,
    /// Maximal velocity, m/s.
    pub v_max: f64,
    /// Vehicle length including the minimal gap, meters.
    pub car_length: f64,
    /// Final time, seconds.
    pub t_fin: f64,
}

impl SimParams {
    /// 50 km/h in m/s.
    pub const V_MAX_50_KMH: f64 = 50.0 / 3.6;

    pub fn new(dt: f64, v_max: f64, car_length: f64, t_fin: f64) -> Self {
        Self {
            dt,
            v_max,
            car_length,
            t_fin,
        }
    }

    /// Time step 0.6 s, 50 km/h, 10 m cars.
    pub fn reference(t_fin: f64) -> Self {
        Self::new(0.6, Self::V_MAX_50_KMH, 10.0, t_fin)
    }

    /// Index of the last point of the time grid, `ceil(t_fin / dt)`.
    pub fn horizon_steps(&self) -> usize {
        (self.t_fin / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    /// Stand-in for an infinite road weight.
    pub fn weight_cap(&self) -> f64 {
        10.0 * self.t_fin
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.dt) || !positive(self.v_max) || !positive(self.car_length) || !positive(self.t_fin) {
            return Err(Error::InvalidParameter(format!(
                "dt, v_max, car_length and t_fin must be positive: {self:?}"
            )));
        }
        let free_flow = net.min_road_length() / self.v_max;
        if self.dt >= free_flow {
            return Err(Error::Config(format!(
                "dt = {} must be smaller than the shortest free-flow road time {free_flow}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// State of one car.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Car {
    pub id: CarId,
    pub origin: JunctionId,
    pub destination: JunctionId,
    pub road: RoadId,
    /// Coordinate along `road`; negative while waiting in a spawn queue.
    pub x: f64,
    /// Velocity applied during the most recent step.
    pub speed: f64,
    pub active: bool,
    /// Arrival time, seconds.
    pub arrival: Option<f64>,
    pub entered_road_at: f64,
}

/// A completed road traversal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Traversal {
    pub car: CarId,
    pub road: RoadId,
    pub entered: f64,
    pub exited: f64,
}

/// Cars on a network at a grid time `step * dt`.
///
/// Cars are kept sorted by id. In the real world `cars[i].id == CarId(i)`;
/// fictitious worlds hold a sorted subset.
#[derive(Debug, Clone)]
pub struct SimState {
    pub step: usize,
    pub dt: f64,
    pub cars: Vec<Car>,
    pub traversals: Vec<Traversal>,
    pub record_traversals: bool,
    scratch: Occupancy,
}

impl PartialEq for SimState {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.dt == other.dt
            && self.cars == other.cars
            && self.traversals == other.traversals
    }
}

impl SimState {
    pub fn new(step: usize, dt: f64, cars: Vec<Car>) -> Self {
        debug_assert!(cars.windows(2).all(|w| w[0].id < w[1].id));
        Self {
            step,
            dt,
            cars,
            traversals: Vec::new(),
            record_traversals: false,
            scratch: Occupancy::default(),
        }
    }

    #[inline]
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn active_count(&self) -> usize {
        self.cars.iter().filter(|c| c.active).count()
    }

    pub fn all_arrived(&self) -> bool {
        self.cars.iter().all(|c| !c.active)
    }

    /// Position of car `id` in `cars`.
    pub fn position_of(&self, id: CarId) -> Option<usize> {
        self.cars.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn car(&self, id: CarId) -> Option<&Car> {
        self.position_of(id).map(|i| &self.cars[i])
    }
}

/// Active cars grouped by road, each group ascending in `x`. Equal
/// coordinates put the lower id ahead.
#[derive(Debug, Clone, Default)]
pub struct Occupancy {
    offsets: Vec<usize>,
    order: Vec<usize>,
    slot: Vec<usize>,
}

impl Occupancy {
    pub fn build(net: &Network, cars: &[Car]) -> Self {
        let mut occ = Self::default();
        occ.rebuild(net, cars);
        occ
    }

    fn rebuild(&mut self, net: &Network, cars: &[Car]) {
        self.order.clear();
        self.order
            .extend(cars.iter().enumerate().filter(|(_, c)| c.active).map(|(i, _)| i));
        self.order.sort_unstable_by(|&a, &b| {
            let (ca, cb) = (&cars[a], &cars[b]);
            ca.road
                .cmp(&cb.road)
                .then(ca.x.total_cmp(&cb.x))
                .then(Reverse(ca.id).cmp(&Reverse(cb.id)))
        });
        self.offsets.clear();
        self.offsets.resize(net.num_roads() + 1, 0);
        for &i in &self.order {
            self.offsets[cars[i].road.0 + 1] += 1;
        }
        for r in 0..net.num_roads() {
            self.offsets[r + 1] += self.offsets[r];
        }
        self.slot.clear();
        self.slot.resize(cars.len(), usize::MAX);
        for (p, &i) in self.order.iter().enumerate() {
            self.slot[i] = p;
        }
    }

    /// Indices of active cars on `road`, rearmost first.
    #[inline]
    pub fn on_road(&self, road: RoadId) -> &[usize] {
        &self.order[self.offsets[road.0]..self.offsets[road.0 + 1]]
    }
}

/// The car ahead along a route and the arc-length distance to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub index: usize,
    pub car: CarId,
    pub distance: f64,
}

/// Follow-the-leader velocity: zero below one car length, then
/// `v_max (1 - ℓ/δ)`, reaching `v_max` for leaders (`δ = +∞`).
#[inline]
pub fn velocity(delta: f64, car_length: f64, v_max: f64) -> f64 {
    if delta < car_length {
        0.0
    } else {
        v_max * (1.0 - car_length / delta)
    }
}

fn leader_of(
    net: &Network,
    cars: &[Car],
    occ: &Occupancy,
    policy: &RoutingPolicy,
    step: usize,
    i: usize,
) -> Result<Option<Leader>> {
    let me = &cars[i];
    let p = occ.slot[i];
    let road_end = occ.offsets[me.road.0 + 1];
    if p + 1 < road_end {
        let k = occ.order[p + 1];
        return Ok(Some(Leader {
            index: k,
            car: cars[k].id,
            distance: cars[k].x - me.x,
        }));
    }
    let mut road = me.road;
    let mut distance = net.road(road).length - me.x;
    for _ in 0..net.num_roads() {
        let j = net.road(road).end;
        if j == me.destination {
            return Ok(None);
        }
        road = match policy.next_road(step, j) {
            NextRoad::Road(r) => r,
            NextRoad::Terminal => return Ok(None),
            NextRoad::Undefined => {
                return Err(Error::PolicyUndefined {
                    car: me.id,
                    junction: j,
                })
            }
        };
        if let Some(&k) = occ.on_road(road).first() {
            if k == i {
                return Ok(None);
            }
            return Ok(Some(Leader {
                index: k,
                car: cars[k].id,
                distance: distance + cars[k].x,
            }));
        }
        distance += net.road(road).length;
    }
    Ok(None)
}

/// The nearest active car strictly ahead of `cars[index]` along its route,
/// following `policy` at the state's current step.
pub fn find_next_car(
    net: &Network,
    state: &SimState,
    index: usize,
    policy: &RoutingPolicy,
) -> Result<Option<Leader>> {
    let occ = Occupancy::build(net, &state.cars);
    leader_of(net, &state.cars, &occ, policy, state.step, index)
}

/// Arc-length distance along the route of `cars[index]` to `next`, or
/// `+∞` when there is none.
pub fn headway(
    net: &Network,
    state: &SimState,
    index: usize,
    policy: &RoutingPolicy,
    next: Option<CarId>,
) -> Result<f64> {
    let Some(next) = next else {
        return Ok(f64::INFINITY);
    };
    let me = &state.cars[index];
    let target = state
        .car(next)
        .ok_or_else(|| Error::InvalidScenario(format!("{next} is not in this state")))?;
    if target.road == me.road && target.x >= me.x {
        return Ok(target.x - me.x);
    }
    let mut road = me.road;
    let mut distance = net.road(road).length - me.x;
    for _ in 0..net.num_roads() {
        let j = net.road(road).end;
        road = match policy.next_road(state.step, j) {
            NextRoad::Road(r) => r,
            _ => break,
        };
        if road == target.road {
            return Ok(distance + target.x);
        }
        distance += net.road(road).length;
    }
    Err(Error::InvalidScenario(format!(
        "{next} is not on the route of {}",
        me.id
    )))
}

/// A car moving from one road onto the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub car: CarId,
    pub junction: JunctionId,
    pub from: RoadId,
    pub to: RoadId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub transitions: Vec<Transition>,
    pub arrivals: Vec<CarId>,
}

/// Advances every active car by one Euler step.
///
/// All headways come from the pre-step snapshot, so the update order does not
/// affect the physics. Overshoot at a junction carries onto the next road;
/// reaching the end of a road that ends at the destination deactivates the
/// car with travel time `t + dt`.
pub fn step(
    net: &Network,
    state: &mut SimState,
    policies: &[RoutingPolicy],
    params: &SimParams,
) -> Result<StepEvents> {
    debug_assert_eq!(policies.len(), state.cars.len());
    step_impl(net, state, |i| Some(&policies[i]), params)
}

/// [`step`] where cars with no policy are frozen: they keep their position
/// and still block the cars behind them.
pub fn step_masked(
    net: &Network,
    state: &mut SimState,
    policies: &[Option<&RoutingPolicy>],
    params: &SimParams,
) -> Result<StepEvents> {
    debug_assert_eq!(policies.len(), state.cars.len());
    step_impl(net, state, |i| policies[i], params)
}

fn step_impl<'p>(
    net: &Network,
    state: &mut SimState,
    policy: impl Fn(usize) -> Option<&'p RoutingPolicy>,
    params: &SimParams,
) -> Result<StepEvents> {
    let mut occ = std::mem::take(&mut state.scratch);
    occ.rebuild(net, &state.cars);

    let mut velocities = vec![0.0; state.cars.len()];
    for (i, car) in state.cars.iter().enumerate() {
        if !car.active {
            continue;
        }
        let Some(p) = policy(i) else { continue };
        let delta = match leader_of(net, &state.cars, &occ, p, state.step, i) {
            Ok(l) => l.map_or(f64::INFINITY, |l| l.distance),
            Err(e) => {
                state.scratch = occ;
                return Err(e);
            }
        };
        velocities[i] = velocity(delta, params.car_length, params.v_max);
    }
    state.scratch = occ;

    let t = state.time();
    let t_next = (state.step + 1) as f64 * state.dt;
    let mut events = StepEvents::default();
    for (i, car) in state.cars.iter_mut().enumerate() {
        if !car.active {
            continue;
        }
        let Some(p) = policy(i) else { continue };
        let v = velocities[i];
        car.speed = v;
        car.x += v * state.dt;
        loop {
            let road = net.road(car.road);
            if road.end == car.destination {
                if car.x >= road.length {
                    car.x = road.length;
                    car.active = false;
                    car.arrival = Some(t_next);
                    if state.record_traversals {
                        state.traversals.push(Traversal {
                            car: car.id,
                            road: car.road,
                            entered: car.entered_road_at,
                            exited: t_next,
                        });
                    }
                    events.arrivals.push(car.id);
                }
                break;
            }
            if car.x <= road.length {
                break;
            }
            let next = match p.next_road(state.step, road.end) {
                NextRoad::Road(r) => r,
                _ => {
                    return Err(Error::PolicyUndefined {
                        car: car.id,
                        junction: road.end,
                    })
                }
            };
            if net.road(next).start != road.end {
                return Err(Error::PolicyInconsistent {
                    car: car.id,
                    junction: road.end,
                    road: next,
                });
            }
            // crossing time within the step, for traversal bookkeeping
            let crossed = t + (road.length - (car.x - v * state.dt)).max(0.0) / v.max(f64::MIN_POSITIVE);
            let crossed = crossed.min(t_next);
            if state.record_traversals {
                state.traversals.push(Traversal {
                    car: car.id,
                    road: car.road,
                    entered: car.entered_road_at,
                    exited: crossed,
                });
            }
            events.transitions.push(Transition {
                car: car.id,
                junction: road.end,
                from: car.road,
                to: next,
            });
            car.x -= road.length;
            car.road = next;
            car.entered_road_at = crossed;
        }
    }
    state.step += 1;
    Ok(events)
}

/// Recomputes every active car's `speed` from its current headway, for
/// states that have not taken a step yet.
pub fn refresh_speeds(
    net: &Network,
    state: &mut SimState,
    policies: &[RoutingPolicy],
    params: &SimParams,
) -> Result<()> {
    let mut occ = std::mem::take(&mut state.scratch);
    occ.rebuild(net, &state.cars);
    for (i, policy) in policies.iter().enumerate() {
        if !state.cars[i].active {
            continue;
        }
        let delta = leader_of(net, &state.cars, &occ, policy, state.step, i)?
            .map_or(f64::INFINITY, |l| l.distance);
        state.cars[i].speed = velocity(delta, params.car_length, params.v_max);
    }
    state.scratch = occ;
    Ok(())
}

/// Places every car on its first road `policy(0, origin)`.
///
/// Cars sharing a first road queue upstream of its start junction: the k-th
/// of them (ascending id, from zero) starts at `x = -k·ℓ`.
pub fn spawn(
    net: &Network,
    od_pairs: &[(JunctionId, JunctionId)],
    policies: &[RoutingPolicy],
    params: &SimParams,
) -> Result<SimState> {
    if od_pairs.len() != policies.len() {
        return Err(Error::InvalidScenario(format!(
            "{} OD pairs but {} policies",
            od_pairs.len(),
            policies.len()
        )));
    }
    let mut starts = Vec::with_capacity(od_pairs.len());
    for (i, (&(origin, _), policy)) in od_pairs.iter().zip(policies).enumerate() {
        if !net.contains_junction(origin) {
            return Err(Error::InvalidScenario(format!("car {i} has an unknown origin {origin}")));
        }
        if net.outgoing(origin).is_empty() {
            return Err(Error::InvalidScenario(format!("origin {origin} has no outgoing road")));
        }
        match policy.next_road(0, origin) {
            NextRoad::Road(r) if net.road(r).start == origin => starts.push(r),
            other => {
                return Err(Error::InvalidScenario(format!(
                    "car {i} has no first road at {origin}: {other:?}"
                )))
            }
        }
    }
    spawn_on(net, od_pairs, &starts, policies, params)
}

/// [`spawn`] with the first road of every car given explicitly.
pub fn spawn_on(
    net: &Network,
    od_pairs: &[(JunctionId, JunctionId)],
    start_roads: &[RoadId],
    policies: &[RoutingPolicy],
    params: &SimParams,
) -> Result<SimState> {
    if od_pairs.len() != start_roads.len() || od_pairs.len() != policies.len() {
        return Err(Error::InvalidScenario(format!(
            "{} OD pairs, {} start roads and {} policies",
            od_pairs.len(),
            start_roads.len(),
            policies.len()
        )));
    }
    let mut queued = vec![0usize; net.num_roads()];
    let mut cars = Vec::with_capacity(od_pairs.len());
    for (i, (&(origin, destination), &road)) in od_pairs.iter().zip(start_roads).enumerate() {
        if !net.contains_junction(origin) || !net.contains_junction(destination) {
            return Err(Error::InvalidScenario(format!("car {i} has an unknown OD junction")));
        }
        if origin == destination {
            return Err(Error::InvalidScenario(format!(
                "car {i} has origin equal to destination {origin}"
            )));
        }
        if net.try_road(road)?.start != origin {
            return Err(Error::InvalidScenario(format!(
                "car {i} starts on {road}, which does not leave {origin}"
            )));
        }
        let k = queued[road.0];
        queued[road.0] += 1;
        cars.push(Car {
            id: CarId(i),
            origin,
            destination,
            road,
            x: -(k as f64) * params.car_length,
            speed: 0.0,
            active: true,
            arrival: None,
            entered_road_at: 0.0,
        });
    }
    let mut state = SimState::new(0, params.dt, cars);
    refresh_speeds(net, &mut state, policies, params)?;
    Ok(state)
}

/// Appends one `(t,car,road,x,active)` row per car.
pub fn write_trace_rows<W: Write>(out: &mut W, state: &SimState) -> std::io::Result<()> {
    let t = state.time();
    for c in &state.cars {
        writeln!(out, "{t:.3},{},{},{:.6},{}", c.id.0, c.road.0, c.x, c.active as u8)?;
    }
    Ok(())
}

pub const TRACE_HEADER: &str = "t,car,road,x,active";
