//! Backward-in-time machinery: road weights, the static/reactive and
//! time-dependent dynamic programming solvers, and policy extraction.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Car, SimParams, Traversal};
use crate::error::{Error, Result};
use crate::network::{JunctionId, Network, RoadId};

/// Outcome of a route-choice lookup at a junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NextRoad {
    Road(RoadId),
    /// The junction is the destination.
    Terminal,
    /// Destination unreachable from here (outside the reachable set).
    Undefined,
}

/// A time-independent route choice per junction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticPolicy {
    destination: JunctionId,
    next: Vec<NextRoad>,
}

impl StaticPolicy {
    pub fn new(destination: JunctionId, next: Vec<NextRoad>) -> Self {
        Self { destination, next }
    }

    /// Follows `route` (consecutive roads) and leaves every other junction
    /// undefined.
    pub fn from_route(net: &Network, route: &[RoadId]) -> Result<Self> {
        let first = route
            .first()
            .ok_or_else(|| Error::InvalidScenario("empty forced route".into()))?;
        let mut next = vec![NextRoad::Undefined; net.num_junctions()];
        let mut at = net.try_road(*first)?.start;
        for &r in route {
            let road = net.try_road(r)?;
            if road.start != at {
                return Err(Error::InvalidScenario(format!(
                    "forced route is disconnected at {r} (expected a road leaving {at})"
                )));
            }
            if next[at.0] != NextRoad::Undefined {
                return Err(Error::InvalidScenario(format!("forced route revisits {at}")));
            }
            next[at.0] = NextRoad::Road(r);
            at = road.end;
        }
        next[at.0] = NextRoad::Terminal;
        Ok(Self {
            destination: at,
            next,
        })
    }

    pub fn destination(&self) -> JunctionId {
        self.destination
    }

    #[inline]
    pub fn get(&self, j: JunctionId) -> NextRoad {
        self.next[j.0]
    }

    pub fn table(&self) -> &[NextRoad] {
        &self.next
    }
}

/// Route choice on the time grid `start_step..start_step + slices`; lookups
/// outside are clamped, undefined entries defer to `fallback`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicPolicy {
    destination: JunctionId,
    start_step: usize,
    n_junctions: usize,
    table: Vec<u32>,
    fallback: Option<Arc<StaticPolicy>>,
}

const TERMINAL: u32 = u32::MAX - 1;
const UNDEFINED: u32 = u32::MAX;

fn encode(n: NextRoad) -> u32 {
    match n {
        NextRoad::Road(r) => r.0 as u32,
        NextRoad::Terminal => TERMINAL,
        NextRoad::Undefined => UNDEFINED,
    }
}

#[inline]
fn decode(v: u32) -> NextRoad {
    match v {
        TERMINAL => NextRoad::Terminal,
        UNDEFINED => NextRoad::Undefined,
        r => NextRoad::Road(RoadId(r as usize)),
    }
}

impl DynamicPolicy {
    pub fn destination(&self) -> JunctionId {
        self.destination
    }

    pub fn start_step(&self) -> usize {
        self.start_step
    }

    pub fn slices(&self) -> usize {
        self.table.len() / self.n_junctions.max(1)
    }

    /// Raw lookup, without fallback.
    pub fn raw(&self, step: usize, j: JunctionId) -> NextRoad {
        let slice = step
            .saturating_sub(self.start_step)
            .min(self.slices().saturating_sub(1));
        decode(self.table[slice * self.n_junctions + j.0])
    }

    pub fn with_fallback(mut self, fallback: Arc<StaticPolicy>) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

/// The per-car `nextroad` function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingPolicy {
    Static(Arc<StaticPolicy>),
    Dynamic(Arc<DynamicPolicy>),
}

impl RoutingPolicy {
    pub fn from_static(p: StaticPolicy) -> Self {
        Self::Static(Arc::new(p))
    }

    #[inline]
    pub fn next_road(&self, step: usize, j: JunctionId) -> NextRoad {
        match self {
            RoutingPolicy::Static(p) => p.get(j),
            RoutingPolicy::Dynamic(p) => match p.raw(step, j) {
                NextRoad::Undefined => p
                    .fallback
                    .as_ref()
                    .map_or(NextRoad::Undefined, |f| f.get(j)),
                n => n,
            },
        }
    }

    pub fn destination(&self) -> JunctionId {
        match self {
            RoutingPolicy::Static(p) => p.destination(),
            RoutingPolicy::Dynamic(p) => p.destination(),
        }
    }
}

/// Road travel times on a time grid of spacing `dt`; a single slice is a
/// time-constant field. Lookups past the last slice reuse the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    dt: f64,
    n_roads: usize,
    values: Vec<f64>,
}

impl WeightField {
    pub fn constant(values: Vec<f64>) -> Self {
        Self {
            dt: f64::INFINITY,
            n_roads: values.len(),
            values,
        }
    }

    /// `slices` rows of per-road values, row-major.
    pub fn from_slices(dt: f64, n_roads: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len() % n_roads.max(1), 0);
        Self { dt, n_roads, values }
    }

    pub fn filled(dt: f64, slices: usize, per_road: &[f64]) -> Self {
        let mut values = Vec::with_capacity(slices * per_road.len());
        for _ in 0..slices {
            values.extend_from_slice(per_road);
        }
        Self::from_slices(dt, per_road.len(), values)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_roads(&self) -> usize {
        self.n_roads
    }

    pub fn slices(&self) -> usize {
        self.values.len() / self.n_roads.max(1)
    }

    #[inline]
    pub fn get(&self, slice: usize, road: RoadId) -> f64 {
        let s = slice.min(self.slices() - 1);
        self.values[s * self.n_roads + road.0]
    }

    pub fn slice(&self, slice: usize) -> &[f64] {
        let s = slice.min(self.slices() - 1);
        &self.values[s * self.n_roads..(s + 1) * self.n_roads]
    }

    pub fn slice_mut(&mut self, slice: usize) -> &mut [f64] {
        &mut self.values[slice * self.n_roads..(slice + 1) * self.n_roads]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `slice,t,r0,r1,...` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slice,t");
        for r in 0..self.n_roads {
            let _ = write!(s, ",r{r}");
        }
        s.push('\n');
        for k in 0..self.slices() {
            let t = if self.dt.is_finite() { k as f64 * self.dt } else { 0.0 };
            let _ = write!(s, "{k},{t:.3}");
            for v in self.slice(k) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Minimum time to destination per (time slice, junction).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    destination: JunctionId,
    start_slice: usize,
    n_junctions: usize,
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn destination(&self) -> JunctionId {
        self.destination
    }

    pub fn start_slice(&self) -> usize {
        self.start_slice
    }

    pub fn slices(&self) -> usize {
        self.values.len() / self.n_junctions
    }

    /// Value at an absolute slice index.
    #[inline]
    pub fn at(&self, slice: usize, j: JunctionId) -> f64 {
        self.values[(slice - self.start_slice) * self.n_junctions + j.0]
    }

    /// Time-constant value (first slice).
    pub fn get(&self, j: JunctionId) -> f64 {
        self.values[j.0]
    }

    pub fn slice(&self, slice: usize) -> &[f64] {
        let k = slice - self.start_slice;
        &self.values[k * self.n_junctions..(k + 1) * self.n_junctions]
    }

    pub fn to_csv(&self, dt: f64) -> String {
        let mut s = String::from("slice,t");
        for j in 0..self.n_junctions {
            let _ = write!(s, ",j{j}");
        }
        s.push('\n');
        for k in 0..self.slices() {
            let abs = k + self.start_slice;
            let _ = write!(s, "{abs},{:.3}", abs as f64 * dt);
            for v in &self.values[k * self.n_junctions..(k + 1) * self.n_junctions] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Free-flow weights `L_r / v_max`.
pub fn static_weights(net: &Network, v_max: f64) -> Vec<f64> {
    net.roads().iter().map(|r| r.length / v_max).collect()
}

/// How instantaneous road weights are estimated from observed cars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum WeightMethod {
    /// Exponentially time-discounted mean of completed traversal times.
    M1 { half_life: f64 },
    /// Free-flow time inflated by one car-length of delay per car present.
    M2,
    /// Road length over the mean velocity of the cars on it.
    #[default]
    M3,
}

impl WeightMethod {
    pub const M1_HALF_LIFE: f64 = 60.0;

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(WeightMethod::M1 {
                half_life: Self::M1_HALF_LIFE,
            }),
            "m2" => Ok(WeightMethod::M2),
            "m3" => Ok(WeightMethod::M3),
            other => Err(Error::InvalidParameter(format!("unknown weight method {other:?}"))),
        }
    }
}

/// Instantaneous per-road weights from the `visible` cars (only active ones
/// count). `history` feeds M1 and is ignored by the other methods.
pub fn instantaneous_weights<'a>(
    net: &Network,
    params: &SimParams,
    method: WeightMethod,
    visible: impl IntoIterator<Item = &'a Car>,
    history: &[Traversal],
    now: f64,
) -> Vec<f64> {
    let cap = params.weight_cap();
    let mut w = static_weights(net, params.v_max);
    match method {
        WeightMethod::M3 => {
            let mut sum = vec![0.0; net.num_roads()];
            let mut count = vec![0usize; net.num_roads()];
            for c in visible.into_iter().filter(|c| c.active) {
                sum[c.road.0] += c.speed;
                count[c.road.0] += 1;
            }
            for (r, road) in net.roads().iter().enumerate() {
                if count[r] > 0 {
                    let mean = sum[r] / count[r] as f64;
                    w[r] = if mean > 0.0 {
                        (road.length / mean).min(cap)
                    } else {
                        cap
                    };
                }
            }
        }
        WeightMethod::M2 => {
            let mut count = vec![0usize; net.num_roads()];
            for c in visible.into_iter().filter(|c| c.active) {
                count[c.road.0] += 1;
            }
            for (r, road) in net.roads().iter().enumerate() {
                let kappa = params.car_length / road.length;
                w[r] = (w[r] * (1.0 + kappa * count[r] as f64)).min(cap);
            }
        }
        WeightMethod::M1 { half_life } => {
            let mut seen = std::collections::BTreeSet::new();
            for c in visible {
                seen.insert(c.id);
            }
            let rate = std::f64::consts::LN_2 / half_life;
            let mut num = vec![0.0; net.num_roads()];
            let mut den = vec![0.0; net.num_roads()];
            for tr in history.iter().filter(|t| t.exited <= now && seen.contains(&t.car)) {
                let k = (-rate * (now - tr.exited)).exp();
                num[tr.road.0] += k * (tr.exited - tr.entered);
                den[tr.road.0] += k;
            }
            for r in 0..net.num_roads() {
                if den[r] > 0.0 {
                    w[r] = (num[r] / den[r]).max(w[r]).min(cap);
                }
            }
        }
    }
    w
}

/// Least fixed point of `V(j) = min_r {V(end(r)) + w(r)}`, `V(destination) = 0`,
/// starting from `V = +∞`.
///
/// Weights are positive, so junctions can be settled in increasing order of
/// value (label setting) and every value is evaluated with exactly the same
/// floating-point expression the plain fixed-point sweep would converge to.
fn bellman_fixed_point(net: &Network, weights: &[f64], destination: JunctionId) -> Vec<f64> {
    let n = net.num_junctions();
    let mut v = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    v[destination.0] = 0.0;
    heap.push(Reverse((Ord64(0.0), destination.0)));
    while let Some(Reverse((Ord64(d), j))) = heap.pop() {
        if done[j] || d > v[j] {
            continue;
        }
        done[j] = true;
        for &r in net.incoming(JunctionId(j)) {
            let i = net.road(r).start.0;
            let c = d + weights[r.0];
            if c < v[i] {
                v[i] = c;
                heap.push(Reverse((Ord64(c), i)));
            }
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ord64(f64);

impl Eq for Ord64 {}

impl PartialOrd for Ord64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ord64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Time-constant value function for static weights.
pub fn solve_static_value(net: &Network, weights: &[f64], destination: JunctionId) -> ValueFunction {
    ValueFunction {
        destination,
        start_slice: 0,
        n_junctions: net.num_junctions(),
        values: bellman_fixed_point(net, weights, destination),
    }
}

/// Value function at a frozen time, treating the current weights as
/// permanent.
pub fn solve_reactive_value(net: &Network, w_now: &[f64], destination: JunctionId) -> ValueFunction {
    solve_static_value(net, w_now, destination)
}

#[inline]
fn argmin_road(
    net: &Network,
    j: JunctionId,
    mut cost: impl FnMut(RoadId) -> f64,
) -> NextRoad {
    let mut best = f64::INFINITY;
    let mut choice = NextRoad::Undefined;
    for &r in net.outgoing(j) {
        let c = cost(r);
        if c < best {
            best = c;
            choice = NextRoad::Road(r);
        }
    }
    choice
}

/// Static (or frozen-time) policy: argmin of `V(end(r)) + w(r)`, ties to
/// the lowest road id.
pub fn extract_static_policy(net: &Network, value: &ValueFunction, weights: &[f64]) -> StaticPolicy {
    let dest = value.destination;
    let next = (0..net.num_junctions())
        .map(|j| {
            let j = JunctionId(j);
            if j == dest {
                NextRoad::Terminal
            } else {
                argmin_road(net, j, |r| value.get(net.road(r).end) + weights[r.0])
            }
        })
        .collect();
    StaticPolicy {
        destination: dest,
        next,
    }
}

/// Shortest-path policy on the empty network.
pub fn shortest_path_policy(net: &Network, v_max: f64, destination: JunctionId) -> StaticPolicy {
    let w = static_weights(net, v_max);
    let value = solve_static_value(net, &w, destination);
    extract_static_policy(net, &value, &w)
}

/// `V(s, j)` at fractional slice position `s` by linear interpolation
/// between neighbouring slices; `+∞` past the horizon or next to an
/// unreachable slice.
#[inline]
fn interpolate(v: &[f64], n: usize, start: usize, last: usize, s: f64, j: usize) -> f64 {
    let lo = s.floor();
    let lo_i = lo as usize;
    if lo_i > last {
        return f64::INFINITY;
    }
    let f = s - lo;
    let a = v[(lo_i - start) * n + j];
    if f == 0.0 || lo_i == last {
        return if f == 0.0 { a } else { f64::INFINITY };
    }
    let b = v[(lo_i + 1 - start) * n + j];
    if a.is_infinite() || b.is_infinite() {
        return f64::INFINITY;
    }
    a + f * (b - a)
}

/// Backward sweep of the time-dependent Bellman equation
/// `V(t,j) = min_r {V(t + w(t,r), end(r)) + w(t,r)}` from the terminal
/// slice `w.slices() - 1` (where `V = +∞` off the destination) down to
/// `start_slice`.
///
/// Weights shorter than the grid step would couple a slice to itself, so
/// they are rejected.
pub fn solve_dynamic_value(
    net: &Network,
    w: &WeightField,
    destination: JunctionId,
    start_slice: usize,
) -> Result<ValueFunction> {
    let last = w.slices() - 1;
    if start_slice > last {
        return Err(Error::InvalidParameter(format!(
            "start slice {start_slice} is past the horizon slice {last}"
        )));
    }
    let min_w = w.values()[start_slice * w.n_roads()..]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(min_w >= w.dt()) {
        return Err(Error::Config(format!(
            "grid step {} is not below the smallest road weight {min_w}",
            w.dt()
        )));
    }
    let n = net.num_junctions();
    let slices = last - start_slice + 1;
    let mut v = vec![f64::INFINITY; slices * n];
    v[(last - start_slice) * n + destination.0] = 0.0;
    let inv_dt = 1.0 / w.dt();
    for k in (start_slice..last).rev() {
        let row = (k - start_slice) * n;
        v[row + destination.0] = 0.0;
        for j in 0..n {
            if j == destination.0 {
                continue;
            }
            let mut best = f64::INFINITY;
            for &r in net.outgoing(JunctionId(j)) {
                let wr = w.get(k, r);
                let s = k as f64 + wr * inv_dt;
                let c = interpolate(&v, n, start_slice, last, s, net.road(r).end.0) + wr;
                if c < best {
                    best = c;
                }
            }
            v[row + j] = best;
        }
    }
    Ok(ValueFunction {
        destination,
        start_slice,
        n_junctions: n,
        values: v,
    })
}

/// Time-dependent policy from a dynamic value function; entries outside the
/// reachable set are [`NextRoad::Undefined`].
pub fn extract_dynamic_policy(net: &Network, value: &ValueFunction, w: &WeightField) -> DynamicPolicy {
    let n = net.num_junctions();
    let start = value.start_slice;
    let last = start + value.slices() - 1;
    let dest = value.destination;
    let inv_dt = 1.0 / w.dt();
    let mut table = Vec::with_capacity(value.slices() * n);
    for k in start..=last {
        for j in 0..n {
            let j = JunctionId(j);
            if j == dest {
                table.push(TERMINAL);
                continue;
            }
            table.push(encode(argmin_road(net, j, |r| {
                let wr = w.get(k, r);
                let s = k as f64 + wr * inv_dt;
                interpolate(&value.values, n, start, last, s, net.road(r).end.0) + wr
            })));
        }
    }
    DynamicPolicy {
        destination: dest,
        start_step: start,
        n_junctions: n,
        table,
        fallback: None,
    }
}

/// Which of the three optimisation problems a policy answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    Static,
    Reactive,
    Dynamic,
}

/// Argmin policy for `value`, solved in `mode` against `weights`.
pub fn extract_policy(
    net: &Network,
    value: &ValueFunction,
    weights: &WeightField,
    mode: PolicyMode,
) -> RoutingPolicy {
    match mode {
        PolicyMode::Static | PolicyMode::Reactive => {
            RoutingPolicy::from_static(extract_static_policy(net, value, weights.slice(0)))
        }
        PolicyMode::Dynamic => RoutingPolicy::Dynamic(Arc::new(extract_dynamic_policy(net, value, weights))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::CarId;
    use crate::network::{build_manhattan, build_simple_eleven, Junction, Point, Road, ELEVEN_DESTINATION};

    const V50: f64 = SimParams::V_MAX_50_KMH;

    fn car_on(road: usize, speed: f64) -> Car {
        Car {
            id: CarId(0),
            origin: JunctionId(0),
            destination: JunctionId(1),
            road: RoadId(road),
            x: 1.0,
            speed,
            active: true,
            arrival: None,
            entered_road_at: 0.0,
        }
    }

    fn line(lengths: &[f64]) -> Network {
        let mut x = 0.0;
        let mut junctions = vec![Junction { id: JunctionId(0), position: Point::new(0.0, 0.0) }];
        for (i, l) in lengths.iter().enumerate() {
            x += l;
            junctions.push(Junction { id: JunctionId(i + 1), position: Point::new(x, 0.0) });
        }
        let roads = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| Road { id: RoadId(i), start: JunctionId(i), end: JunctionId(i + 1), length: l })
            .collect();
        Network::new(junctions, roads).unwrap()
    }

    fn sweep(net: &Network, weights: &[f64], destination: JunctionId) -> Vec<f64> {
        let mut v = vec![f64::INFINITY; net.num_junctions()];
        v[destination.0] = 0.0;
        loop {
            let mut changed = false;
            for j in 0..net.num_junctions() {
                if j == destination.0 {
                    continue;
                }
                let best = net
                    .outgoing(JunctionId(j))
                    .iter()
                    .map(|&r| v[net.road(r).end.0] + weights[r.0])
                    .fold(f64::INFINITY, f64::min);
                if best < v[j] {
                    v[j] = best;
                    changed = true;
                }
            }
            if !changed {
                return v;
            }
        }
    }

    #[test]
    fn label_setting_matches_plain_sweep_bitwise() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for net in [build_manhattan(5, 50.0).unwrap(), build_simple_eleven()] {
            for _ in 0..50 {
                let w: Vec<f64> = (0..net.num_roads()).map(|_| rng.random_range(0.5..100.0)).collect();
                for d in 0..net.num_junctions() {
                    let a = solve_static_value(&net, &w, JunctionId(d));
                    let b = sweep(&net, &w, JunctionId(d));
                    for (j, bj) in b.iter().enumerate() {
                        assert_eq!(a.get(JunctionId(j)).to_bits(), bj.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn static_weight_values() {
        let net = line(&[50.0, 300.0]);
        let w = static_weights(&net, V50);
        assert!((w[0] - 3.6).abs() < 1e-12);
        assert!((w[1] - 21.6).abs() < 1e-12);
    }

    #[test]
    fn m3_weights() {
        let net = line(&[50.0, 50.0]);
        let p = SimParams::reference(100.0);
        let empty = instantaneous_weights(&net, &p, WeightMethod::M3, [], &[], 0.0);
        assert!((empty[0] - 3.6).abs() < 1e-12);
        let leader = car_on(0, p.v_max);
        let w = instantaneous_weights(&net, &p, WeightMethod::M3, [&leader], &[], 0.0);
        assert!((w[0] - 3.6).abs() < 1e-12);
        let jam = [car_on(1, 0.0), car_on(1, 0.0)];
        let w = instantaneous_weights(&net, &p, WeightMethod::M3, &jam, &[], 0.0);
        assert_eq!(w[1], p.weight_cap());
        let mut gone = car_on(0, 0.0);
        gone.active = false;
        let w = instantaneous_weights(&net, &p, WeightMethod::M3, [&gone], &[], 0.0);
        assert!((w[0] - 3.6).abs() < 1e-12);
    }

    #[test]
    fn m2_weights_grow_with_count() {
        let net = line(&[50.0]);
        let p = SimParams::reference(100.0);
        let one = instantaneous_weights(&net, &p, WeightMethod::M2, [&car_on(0, 1.0)], &[], 0.0);
        let two = instantaneous_weights(
            &net,
            &p,
            WeightMethod::M2,
            [&car_on(0, 1.0), &car_on(0, 1.0)],
            &[],
            0.0,
        );
        assert!((one[0] - (3.6 + 10.0 / V50)).abs() < 1e-9);
        assert!(two[0] > one[0]);
    }

    #[test]
    fn m1_weights_discount_old_traversals() {
        let net = line(&[50.0]);
        let p = SimParams::reference(1000.0);
        let c = car_on(0, 1.0);
        let hist = [
            Traversal { car: CarId(0), road: RoadId(0), entered: 0.0, exited: 10.0 },
            Traversal { car: CarId(0), road: RoadId(0), entered: 60.0, exited: 70.0 + 20.0 },
        ];
        let w = instantaneous_weights(&net, &p, WeightMethod::M1 { half_life: 60.0 }, [&c], &hist, 90.0);
        // recent 30 s traversal outweighs the old 10 s one
        assert!(w[0] > 20.0 && w[0] < 30.0);
        let none = instantaneous_weights(&net, &p, WeightMethod::M1 { half_life: 60.0 }, [], &hist, 90.0);
        assert!((none[0] - 3.6).abs() < 1e-12);
        assert!(WeightMethod::parse("m4").is_err());
    }

    #[test]
    fn destination_and_neighbour_values() {
        let net = build_manhattan(5, 50.0).unwrap();
        let w = static_weights(&net, V50);
        let v = solve_static_value(&net, &w, JunctionId(12));
        assert_eq!(v.get(JunctionId(12)), 0.0);
        for &r in net.incoming(JunctionId(12)) {
            assert!((v.get(net.road(r).start) - 3.6).abs() < 1e-12);
        }
    }

    #[test]
    fn eleven_bb_route_is_short_path() {
        let net = build_simple_eleven();
        let pol = shortest_path_policy(&net, V50, ELEVEN_DESTINATION);
        let fork = net.road(RoadId(8)).end;
        assert_eq!(pol.get(fork), NextRoad::Road(RoadId(0)));
        assert_eq!(pol.get(net.road(RoadId(0)).end), NextRoad::Road(RoadId(7)));
        assert_eq!(pol.get(net.road(RoadId(7)).end), NextRoad::Road(RoadId(5)));
        // feeder origins start on their feeder roads
        assert_eq!(pol.get(net.road(RoadId(2)).start), NextRoad::Road(RoadId(2)));
        assert_eq!(pol.get(net.road(RoadId(6)).start), NextRoad::Road(RoadId(6)));
        assert_eq!(pol.get(ELEVEN_DESTINATION), NextRoad::Terminal);
    }

    #[test]
    fn single_outgoing_and_tie_break() {
        let net = build_manhattan(3, 50.0).unwrap();
        let w = static_weights(&net, V50);
        // corner 0 to opposite corner 8: right (road 0) and up (road 12) tie
        let v = solve_static_value(&net, &w, JunctionId(8));
        let pol = extract_static_policy(&net, &v, &w);
        assert_eq!(pol.get(JunctionId(0)), NextRoad::Road(RoadId(0)));
        let net = line(&[50.0, 50.0]);
        let w = static_weights(&net, V50);
        let v = solve_static_value(&net, &w, JunctionId(2));
        let pol = extract_static_policy(&net, &v, &w);
        assert_eq!(pol.get(JunctionId(1)), NextRoad::Road(RoadId(1)));
    }

    #[test]
    fn unreachable_junctions_stay_infinite() {
        let net = line(&[50.0, 50.0]);
        let w = static_weights(&net, V50);
        let v = solve_static_value(&net, &w, JunctionId(0));
        assert!(v.get(JunctionId(1)).is_infinite());
        let pol = extract_static_policy(&net, &v, &w);
        assert_eq!(pol.get(JunctionId(1)), NextRoad::Undefined);
    }

    #[test]
    fn reactive_routes_around_jam() {
        let net = build_manhattan(3, 50.0).unwrap();
        let p = SimParams::reference(500.0);
        let free = static_weights(&net, V50);
        assert_eq!(
            solve_reactive_value(&net, &free, JunctionId(8)),
            solve_static_value(&net, &free, JunctionId(8))
        );
        let mut w = free.clone();
        w[0] = p.weight_cap(); // 0 -> 1 jammed
        let v = solve_reactive_value(&net, &w, JunctionId(8));
        let pol = extract_static_policy(&net, &v, &w);
        assert_eq!(pol.get(JunctionId(0)), NextRoad::Road(RoadId(12)));
        assert!((v.get(JunctionId(0)) - 4.0 * 3.6).abs() < 1e-9);
    }

    #[test]
    fn dynamic_with_constant_weights_matches_static() {
        let net = build_manhattan(4, 50.0).unwrap();
        let free = static_weights(&net, V50);
        let field = WeightField::filled(0.6, 400, &free);
        let dest = JunctionId(5);
        let dv = solve_dynamic_value(&net, &field, dest, 0).unwrap();
        let sv = solve_static_value(&net, &free, dest);
        let sp = extract_static_policy(&net, &sv, &free);
        let dp = extract_dynamic_policy(&net, &dv, &field);
        for j in 0..net.num_junctions() {
            for k in [0usize, 10, 100] {
                assert_eq!(dv.at(k, JunctionId(j)), sv.get(JunctionId(j)));
                assert_eq!(dp.raw(k, JunctionId(j)), sp.get(JunctionId(j)));
            }
        }
    }

    #[test]
    fn reachable_set_shrinks_near_horizon() {
        let net = line(&[50.0, 50.0]);
        let free = static_weights(&net, V50);
        // 20 slices of 0.6 s = 12 s horizon, two hops need 7.2 s
        let field = WeightField::filled(0.6, 21, &free);
        let v = solve_dynamic_value(&net, &field, JunctionId(2), 0).unwrap();
        assert!(v.at(0, JunctionId(0)).is_finite());
        assert!(v.at(14, JunctionId(0)).is_infinite());
        assert!(v.at(14, JunctionId(1)).is_finite());
        assert!(v.at(20, JunctionId(1)).is_infinite());
        assert_eq!(v.at(20, JunctionId(2)), 0.0);
    }

    #[test]
    fn two_hop_time_varying_weights() {
        // first road costs 6 s before t = 3 s and 12 s from then on; the
        // second road costs 4.8 s before t = 9 s and 9.6 s afterwards
        let net = line(&[50.0, 50.0]);
        let dt = 0.6;
        let slices = 101;
        let mut vals = Vec::new();
        for k in 0..slices {
            let t = k as f64 * dt;
            vals.push(if t < 3.0 - 1e-9 { 6.0 } else { 12.0 });
            vals.push(if t < 9.0 - 1e-9 { 4.8 } else { 9.6 });
        }
        let field = WeightField::from_slices(dt, 2, vals);
        let v = solve_dynamic_value(&net, &field, JunctionId(2), 0).unwrap();
        // leaving at 0: reach junction 1 at 6.0 (< 9) then 4.8 more
        assert!((v.at(0, JunctionId(0)) - 10.8).abs() < 1e-9);
        // leaving at 3.0: reach junction 1 at 15.0, then 9.6 more
        assert!((v.at(5, JunctionId(0)) - 21.6).abs() < 1e-9);
        // leaving at 1.8: reach junction 1 at 7.8, then 4.8 more
        assert!((v.at(3, JunctionId(0)) - 10.8).abs() < 1e-9);
    }

    #[test]
    fn dynamic_rejects_coarse_grid() {
        let net = line(&[50.0]);
        let field = WeightField::filled(5.0, 10, &[3.6]);
        assert!(matches!(solve_dynamic_value(&net, &field, JunctionId(1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn forced_routes() {
        let net = build_simple_eleven();
        let p = StaticPolicy::from_route(&net, &[RoadId(8), RoadId(1), RoadId(9), RoadId(3), RoadId(4)]).unwrap();
        assert_eq!(p.destination(), ELEVEN_DESTINATION);
        assert_eq!(p.get(net.road(RoadId(8)).end), NextRoad::Road(RoadId(1)));
        assert!(StaticPolicy::from_route(&net, &[RoadId(8), RoadId(7)]).is_err());
        assert!(StaticPolicy::from_route(&net, &[]).is_err());
    }

    #[test]
    fn csv_exports_have_one_row_per_slice() {
        let net = line(&[50.0, 50.0]);
        let free = static_weights(&net, V50);
        let field = WeightField::filled(0.6, 30, &free);
        assert_eq!(field.to_csv().lines().count(), 31);
        let v = solve_dynamic_value(&net, &field, JunctionId(2), 0).unwrap();
        let csv = v.to_csv(0.6);
        assert_eq!(csv.lines().count(), 31);
        assert!(csv.starts_with("slice,t,j0,j1,j2"));
    }
}
