//! Road networks: unidirectional roads with physical length between
//! 0-dimensional junctions embedded in the plane.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense junction index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JunctionId(pub usize);

/// Dense road index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoadId(pub usize);

impl JunctionId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl RoadId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for JunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{}", self.0)
    }
}

impl fmt::Display for RoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// A point in the plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point, f: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * f,
            self.y + (other.y - self.y) * f,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: JunctionId,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub id: RoadId,
    pub start: JunctionId,
    pub end: JunctionId,
    /// Length in meters.
    pub length: f64,
}

/// An immutable road network.
///
/// `incoming[j]` and `outgoing[j]` list road ids in ascending order, which
/// is what makes every lowest-id tie-break downstream deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    junctions: Vec<Junction>,
    roads: Vec<Road>,
    incoming: Vec<Vec<RoadId>>,
    outgoing: Vec<Vec<RoadId>>,
}

impl Network {
    /// Builds a network, checking ids, endpoints and lengths.
    pub fn new(junctions: Vec<Junction>, roads: Vec<Road>) -> Result<Self> {
        for (i, j) in junctions.iter().enumerate() {
            if j.id.0 != i {
                return Err(Error::InvalidNetwork(format!(
                    "junction ids must be dense and ordered; position {i} holds {}",
                    j.id
                )));
            }
            if !(j.position.x.is_finite() && j.position.y.is_finite()) {
                return Err(Error::InvalidNetwork(format!("{} has a non-finite position", j.id)));
            }
        }
        let n = junctions.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (i, r) in roads.iter().enumerate() {
            if r.id.0 != i {
                return Err(Error::InvalidNetwork(format!(
                    "road ids must be dense and ordered; position {i} holds {}",
                    r.id
                )));
            }
            if r.start.0 >= n || r.end.0 >= n {
                return Err(Error::InvalidNetwork(format!("{} references a missing junction", r.id)));
            }
            if r.start == r.end {
                return Err(Error::InvalidNetwork(format!("{} is a self-loop at {}", r.id, r.start)));
            }
            if !(r.length > 0.0 && r.length.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "{} has non-positive length {}",
                    r.id, r.length
                )));
            }
            outgoing[r.start.0].push(r.id);
            incoming[r.end.0].push(r.id);
        }
        Ok(Self {
            junctions,
            roads,
            incoming,
            outgoing,
        })
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn roads(&self) -> &[Road] {
        &self.roads
    }

    pub fn num_junctions(&self) -> usize {
        self.junctions.len()
    }

    pub fn num_roads(&self) -> usize {
        self.roads.len()
    }

    #[inline]
    pub fn road(&self, id: RoadId) -> &Road {
        &self.roads[id.0]
    }

    pub fn try_road(&self, id: RoadId) -> Result<&Road> {
        self.roads.get(id.0).ok_or(Error::UnknownRoad(id))
    }

    pub fn junction(&self, id: JunctionId) -> &Junction {
        &self.junctions[id.0]
    }

    pub fn contains_junction(&self, id: JunctionId) -> bool {
        id.0 < self.junctions.len()
    }

    #[inline]
    pub fn outgoing(&self, j: JunctionId) -> &[RoadId] {
        &self.outgoing[j.0]
    }

    #[inline]
    pub fn incoming(&self, j: JunctionId) -> &[RoadId] {
        &self.incoming[j.0]
    }

    /// Shortest road length, meters.
    pub fn min_road_length(&self) -> f64 {
        self.roads.iter().map(|r| r.length).fold(f64::INFINITY, f64::min)
    }

    /// Junctions reachable from `from` by following roads forward.
    pub fn reachable_from(&self, from: JunctionId) -> Vec<bool> {
        let mut seen = vec![false; self.num_junctions()];
        let mut queue = VecDeque::from([from]);
        seen[from.0] = true;
        while let Some(j) = queue.pop_front() {
            for &r in self.outgoing(j) {
                let next = self.road(r).end;
                if !seen[next.0] {
                    seen[next.0] = true;
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    pub fn is_strongly_connected(&self) -> bool {
        (0..self.num_junctions())
            .all(|j| self.reachable_from(JunctionId(j)).into_iter().all(|s| s))
    }

    /// Planar position of a car at coordinate `x` along `road`. Negative
    /// coordinates (cars waiting in a spawn queue) sit on the start junction.
    pub fn embed_position(&self, road: RoadId, x: f64) -> Result<Point> {
        let r = self.try_road(road)?;
        let f = (x / r.length).clamp(0.0, 1.0);
        Ok(self.junction(r.start).position.lerp(self.junction(r.end).position, f))
    }

    /// Same as [`Network::embed_position`] for a road id known to be valid.
    #[inline]
    pub(crate) fn embed(&self, road: RoadId, x: f64) -> Point {
        let r = &self.roads[road.0];
        let f = (x / r.length).clamp(0.0, 1.0);
        self.junctions[r.start.0]
            .position
            .lerp(self.junctions[r.end.0].position, f)
    }

    pub fn to_doc(&self) -> NetworkDoc {
        NetworkDoc {
            junctions: self
                .junctions
                .iter()
                .map(|j| JunctionDoc {
                    id: j.id.0,
                    x: j.position.x,
                    y: j.position.y,
                })
                .collect(),
            roads: self
                .roads
                .iter()
                .map(|r| RoadDoc {
                    id: r.id.0,
                    from: r.start.0,
                    to: r.end.0,
                    length: r.length,
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &NetworkDoc) -> Result<Self> {
        let mut junctions: Vec<_> = doc
            .junctions
            .iter()
            .map(|j| Junction {
                id: JunctionId(j.id),
                position: Point::new(j.x, j.y),
            })
            .collect();
        junctions.sort_by_key(|j| j.id);
        let mut roads: Vec<_> = doc
            .roads
            .iter()
            .map(|r| Road {
                id: RoadId(r.id),
                start: JunctionId(r.from),
                end: JunctionId(r.to),
                length: r.length,
            })
            .collect();
        roads.sort_by_key(|r| r.id);
        Network::new(junctions, roads)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("network document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: NetworkDoc =
            serde_json::from_str(s).map_err(|e| Error::InvalidNetwork(e.to_string()))?;
        Self::from_doc(&doc)
    }
}

/// Interchange form of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub junctions: Vec<JunctionDoc>,
    pub roads: Vec<RoadDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionDoc {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadDoc {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

/// A `side`×`side` grid of junctions at spacing `road_length`, each adjacent
/// pair joined by two superimposed one-way roads.
///
/// Junction `row * side + col` sits at `(col, row) * road_length`. Roads are
/// numbered rightward, leftward, upward, downward, each block row-major.
pub fn build_manhattan(side: usize, road_length: f64) -> Result<Network> {
    if side < 2 {
        return Err(Error::InvalidParameter(format!(
            "manhattan grid needs side >= 2, got {side}"
        )));
    }
    if !(road_length > 0.0 && road_length.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "road length must be positive, got {road_length}"
        )));
    }
    let jid = |row: usize, col: usize| JunctionId(row * side + col);
    let junctions = (0..side * side)
        .map(|i| Junction {
            id: JunctionId(i),
            position: Point::new((i % side) as f64 * road_length, (i / side) as f64 * road_length),
        })
        .collect();

    let mut pairs = Vec::with_capacity(4 * side * (side - 1));
    for row in 0..side {
        for col in 0..side - 1 {
            pairs.push((jid(row, col), jid(row, col + 1)));
        }
    }
    for row in 0..side {
        for col in 0..side - 1 {
            pairs.push((jid(row, col + 1), jid(row, col)));
        }
    }
    for row in 0..side - 1 {
        for col in 0..side {
            pairs.push((jid(row, col), jid(row + 1, col)));
        }
    }
    for row in 0..side - 1 {
        for col in 0..side {
            pairs.push((jid(row + 1, col), jid(row, col)));
        }
    }
    let roads = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| Road {
            id: RoadId(i),
            start,
            end,
            length: road_length,
        })
        .collect();
    Network::new(junctions, roads)
}

/// Destination junction of the eleven-road network.
pub const ELEVEN_DESTINATION: JunctionId = JunctionId(4);

/// Roads on which the eleven-road scenario spawns its cars.
pub const ELEVEN_FEEDERS: [RoadId; 3] = [RoadId(2), RoadId(6), RoadId(8)];

/// The eleven-road network with two competing routes from the fork at the
/// end of road 8 to junction 4: the short route 0, 7, 5 and the long route
/// 1, 9, 3, 4. Road 2 merges into road 7, road 6 into road 5, and road 10
/// closes the loop back to the start of road 8.
///
/// Coordinates are a reconstruction of the layout; lengths equal the
/// Euclidean distances between endpoints.
pub fn build_simple_eleven() -> Network {
    let pts = [
        Point::new(0.0, 0.0),      // 0: source of road 8
        Point::new(100.0, 0.0),    // 1: fork
        Point::new(200.0, 0.0),    // 2: merge of road 2 into road 7
        Point::new(300.0, 0.0),    // 3: merge of road 6 into road 5
        Point::new(400.0, 0.0),    // 4: destination
        Point::new(125.0, -100.0), // 5
        Point::new(250.0, -100.0), // 6
        Point::new(400.0, -100.0), // 7
    ];
    let ends: [(usize, usize); 11] = [
        (1, 2),
        (1, 5),
        (5, 2),
        (6, 7),
        (7, 4),
        (3, 4),
        (6, 3),
        (2, 3),
        (0, 1),
        (5, 6),
        (4, 0),
    ];
    let junctions = pts
        .iter()
        .enumerate()
        .map(|(i, &p)| Junction {
            id: JunctionId(i),
            position: p,
        })
        .collect();
    let roads = ends
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| Road {
            id: RoadId(i),
            start: JunctionId(a),
            end: JunctionId(b),
            length: pts[a].distance(pts[b]),
        })
        .collect();
    Network::new(junctions, roads).expect("eleven-road network is valid")
}
