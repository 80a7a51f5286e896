//! Distances between parcels and threshold peer networks.
//!
//! Two homes are peers when their distance is strictly below `tau_d`. On-road
//! distance runs from each parcel to its nearest road point (the connector),
//! along the road graph, and back out to the other parcel. Road edges are
//! never shorter than the straight line between their endpoints, so the
//! on-road distance dominates the Euclidean one and Euclidean candidates
//! within `tau_d` are a complete superset of on-road peers.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("road graph has no edges")]
    EmptyGraph,
    #[error("road edge `{id}`: {reason}")]
    BadEdge { id: String, reason: String },
    #[error("road node `{0}` is undefined or duplicated")]
    BadNode(String),
    #[error("distance threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("on-road metric requires a road graph")]
    MissingRoads,
    #[error("regression needs at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("regression abscissa is degenerate (all values equal)")]
    DegenerateAbscissa,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Planar coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

pub fn euclidean_distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    OnRoad,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::OnRoad => "on_road",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "on_road" | "on-road" => Ok(Metric::OnRoad),
            other => Err(GeoError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadEdge {
    pub id: String,
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Undirected road graph embedded in the plane.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    nodes: Vec<Point>,
    edges: Vec<RoadEdge>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl RoadGraph {
    /// `edges` are `(edge_id, node_a, node_b, length)`; a missing length
    /// defaults to the endpoint distance.
    pub fn new(
        nodes: Vec<(String, Point)>,
        edges: Vec<(String, String, String, Option<f64>)>,
    ) -> Result<Self, GeoError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, (id, _)) in nodes.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(GeoError::BadNode(id.clone()));
            }
        }
        let points: Vec<Point> = nodes.iter().map(|(_, p)| *p).collect();
        let mut adjacency = vec![Vec::new(); points.len()];
        let mut built = Vec::with_capacity(edges.len());
        for (id, a, b, length) in edges {
            let ia = *index.get(&a).ok_or_else(|| GeoError::BadNode(a.clone()))?;
            let ib = *index.get(&b).ok_or_else(|| GeoError::BadNode(b.clone()))?;
            let straight = euclidean_distance(points[ia], points[ib]);
            let length = length.unwrap_or(straight);
            if !(length > 0.0 && length.is_finite()) {
                return Err(GeoError::BadEdge {
                    id,
                    reason: format!("length {length} must be positive"),
                });
            }
            if length < straight * (1.0 - 1e-9) {
                return Err(GeoError::BadEdge {
                    id,
                    reason: format!("length {length} shorter than endpoint distance {straight}"),
                });
            }
            adjacency[ia].push((ib, length));
            adjacency[ib].push((ia, length));
            built.push(RoadEdge {
                id,
                a: ia,
                b: ib,
                length,
            });
        }
        Ok(Self {
            node_ids: nodes.into_iter().map(|(id, _)| id).collect(),
            nodes: points,
            edges: built,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[RoadEdge] {
        &self.edges
    }

    pub fn load(nodes_path: impl AsRef<Path>, edges_path: impl AsRef<Path>) -> Result<Self, GeoError> {
        let open = |p: &Path| {
            File::open(p).map_err(|source| GeoError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let nodes = read_road_nodes(open(nodes_path.as_ref())?, &nodes_path.as_ref().display().to_string())?;
        let edges = read_road_edges(open(edges_path.as_ref())?, &edges_path.as_ref().display().to_string())?;
        Self::new(nodes, edges)
    }

    pub fn write_nodes<W: Write>(&self, writer: W) -> Result<(), GeoError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node_id", "x", "y"])?;
        for (id, p) in self.node_ids.iter().zip(&self.nodes) {
            w.write_record([id.clone(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush().map_err(|source| GeoError::Io { path: "<writer>".into(), source })
    }

    pub fn write_edges<W: Write>(&self, writer: W) -> Result<(), GeoError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["edge_id", "node_a", "node_b", "length"])?;
        for e in &self.edges {
            w.write_record([
                e.id.clone(),
                self.node_ids[e.a].clone(),
                self.node_ids[e.b].clone(),
                e.length.to_string(),
            ])?;
        }
        w.flush().map_err(|source| GeoError::Io { path: "<writer>".into(), source })
    }
}

fn parse_num(path: &str, line: u64, raw: &str) -> Result<f64, GeoError> {
    raw.trim().parse().map_err(|_| GeoError::Parse {
        path: path.to_string(),
        message: format!("line {line}: bad number `{raw}`"),
    })
}

pub fn read_road_nodes<R: Read>(reader: R, path: &str) -> Result<Vec<(String, Point)>, GeoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["node_id", "x", "y"] {
        return Err(GeoError::Parse {
            path: path.into(),
            message: format!("expected header node_id,x,y, found {}", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((
            rec[0].to_string(),
            Point::new(parse_num(path, line, &rec[1])?, parse_num(path, line, &rec[2])?),
        ));
    }
    Ok(out)
}

pub fn read_road_edges<R: Read>(
    reader: R,
    path: &str,
) -> Result<Vec<(String, String, String, Option<f64>)>, GeoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["edge_id", "node_a", "node_b"] && header != ["edge_id", "node_a", "node_b", "length"] {
        return Err(GeoError::Parse {
            path: path.into(),
            message: format!("expected header edge_id,node_a,node_b[,length], found {}", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 3 {
            return Err(GeoError::Parse {
                path: path.into(),
                message: format!("line {line}: expected at least 3 fields"),
            });
        }
        let length = match rec.get(3) {
            Some(raw) if !raw.trim().is_empty() => Some(parse_num(path, line, raw)?),
            _ => None,
        };
        out.push((rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), length));
    }
    Ok(out)
}

/// Where a parcel joins the road graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccessPoint {
    pub edge: usize,
    /// Distance along the edge from its `a` endpoint, in edge-length units.
    pub offset: f64,
    pub connector: f64,
}

/// Nearest point on any road segment; ties go to the lowest edge index.
pub fn snap_to_road(graph: &RoadGraph, point: Point) -> Result<AccessPoint, GeoError> {
    let mut best: Option<(f64, AccessPoint)> = None;
    for (idx, e) in graph.edges.iter().enumerate() {
        let (pa, pb) = (graph.nodes[e.a], graph.nodes[e.b]);
        let (dx, dy) = (pb.x - pa.x, pb.y - pa.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((point.x - pa.x) * dx + (point.y - pa.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let foot = Point::new(pa.x + t * dx, pa.y + t * dy);
        let connector = euclidean_distance(point, foot);
        if best.as_ref().is_none_or(|(d, _)| connector < *d) {
            best = Some((
                connector,
                AccessPoint {
                    edge: idx,
                    offset: t * e.length,
                    connector,
                },
            ));
        }
    }
    best.map(|(_, a)| a).ok_or(GeoError::EmptyGraph)
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra. Nodes farther than `cutoff` stay at infinity.
pub fn shortest_paths(graph: &RoadGraph, sources: &[(usize, f64)], cutoff: f64) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; graph.nodes.len()];
    let mut heap = BinaryHeap::new();
    for &(node, d) in sources {
        if d <= cutoff && d < dist[node] {
            dist[node] = d;
            heap.push(Frontier { dist: d, node });
        }
    }
    while let Some(Frontier { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, len) in &graph.adjacency[node] {
            let nd = d + len;
            if nd <= cutoff && nd < dist[next] {
                dist[next] = nd;
                heap.push(Frontier { dist: nd, node: next });
            }
        }
    }
    dist
}

fn access_sources(graph: &RoadGraph, a: &AccessPoint) -> [(usize, f64); 2] {
    let e = &graph.edges[a.edge];
    [(e.a, a.offset), (e.b, e.length - a.offset)]
}

/// Road distance between two access points given node distances from `from`.
fn access_distance(graph: &RoadGraph, from: &AccessPoint, to: &AccessPoint, node_dist: &[f64]) -> f64 {
    let e = &graph.edges[to.edge];
    let mut d = (node_dist[e.a] + to.offset).min(node_dist[e.b] + e.length - to.offset);
    if from.edge == to.edge {
        d = d.min((from.offset - to.offset).abs());
    }
    d
}

/// Connector + road path + connector; infinite across disconnected components.
pub fn road_travel_distance(graph: &RoadGraph, a: Point, b: Point) -> Result<f64, GeoError> {
    if a == b {
        return Ok(0.0);
    }
    let pa = snap_to_road(graph, a)?;
    let pb = snap_to_road(graph, b)?;
    let dist = shortest_paths(graph, &access_sources(graph, &pa), f64::INFINITY);
    Ok(pa.connector + access_distance(graph, &pa, &pb, &dist) + pb.connector)
}

/// Uniform-cell bucket index over points.
struct CellIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl CellIndex {
    fn new(points: &[Point], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: &Point, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Indices `j > i` with Euclidean distance `< radius` (radius ≤ cell), ascending.
    fn later_within(&self, points: &[Point], i: usize, radius: f64) -> Vec<(usize, f64)> {
        let (cx, cy) = Self::key(&points[i], self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        if j > i {
                            let d = euclidean_distance(points[i], points[j]);
                            if d < radius {
                                out.push((j, d));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by_key(|&(j, _)| j);
        out
    }
}

/// Undirected, unweighted peer adjacency over a fixed node order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerNetwork {
    pub metric: Metric,
    pub tau_d_km: f64,
    neighbors: Vec<Vec<usize>>,
    /// `(i, j, distance_m)` with `i < j`, sorted.
    edges: Vec<(usize, usize, f64)>,
}

impl PeerNetwork {
    /// Network from an explicit edge list; duplicates and self-loops are dropped.
    pub fn from_edges(
        n: usize,
        metric: Metric,
        tau_d_km: f64,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut list: Vec<(usize, usize, f64)> = edges
            .into_iter()
            .filter(|&(i, j, _)| i != j)
            .map(|(i, j, d)| (i.min(j), i.max(j), d))
            .collect();
        list.sort_by_key(|e| (e.0, e.1));
        list.dedup_by_key(|e| (e.0, e.1));
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j, _) in &list {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Self {
            metric,
            tau_d_km,
            neighbors,
            edges: list,
        }
    }

    /// A network with no edges at all.
    pub fn empty(n: usize) -> Self {
        Self::from_edges(n, Metric::Euclidean, 0.0, std::iter::empty())
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Degree histogram: entry `d` counts nodes of degree `d`.
    pub fn degree_histogram(&self) -> Vec<usize> {
        let max = self.neighbors.iter().map(Vec::len).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for nb in &self.neighbors {
            hist[nb.len()] += 1;
        }
        hist
    }

    /// Short content hash of the edge set.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for &(i, j, _) in &self.edges {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn write_edges_csv<W: Write>(&self, ids: &[String], writer: W) -> Result<(), GeoError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id_a", "id_b", "distance_m", "metric"])?;
        for &(i, j, d) in &self.edges {
            w.write_record([ids[i].as_str(), ids[j].as_str(), &d.to_string(), self.metric.name()])?;
        }
        w.flush().map_err(|source| GeoError::Io { path: "<writer>".into(), source })
    }
}

/// Threshold network over `points`: edge iff distance `< tau_d_km` (strict).
pub fn build_network(
    points: &[Point],
    metric: Metric,
    tau_d_km: f64,
    roads: Option<&RoadGraph>,
) -> Result<PeerNetwork, GeoError> {
    if !(tau_d_km > 0.0 && tau_d_km.is_finite()) {
        return Err(GeoError::BadThreshold(tau_d_km));
    }
    let tau = tau_d_km * 1000.0;
    let index = CellIndex::new(points, tau);
    let edges: Vec<(usize, usize, f64)> = match metric {
        Metric::Euclidean => (0..points.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                index
                    .later_within(points, i, tau)
                    .into_iter()
                    .map(move |(j, d)| (i, j, d))
            })
            .collect(),
        Metric::OnRoad => {
            let graph = roads.ok_or(GeoError::MissingRoads)?;
            let access = points
                .par_iter()
                .map(|&p| snap_to_road(graph, p))
                .collect::<Result<Vec<_>, _>>()?;
            (0..points.len())
                .into_par_iter()
                .flat_map_iter(|i| {
                    let candidates = index.later_within(points, i, tau);
                    let mut found = Vec::new();
                    if !candidates.is_empty() {
                        let from = &access[i];
                        let budget = tau - from.connector;
                        let dist = shortest_paths(graph, &access_sources(graph, from), budget.max(0.0));
                        for (j, _) in candidates {
                            let d = if points[i] == points[j] {
                                0.0
                            } else {
                                let to = &access[j];
                                from.connector + access_distance(graph, from, to, &dist) + to.connector
                            };
                            if d < tau {
                                found.push((i, j, d));
                            }
                        }
                    }
                    found
                })
                .collect()
        }
    };
    Ok(PeerNetwork::from_edges(points.len(), metric, tau_d_km, edges))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<LineFit, GeoError> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return Err(GeoError::TooFewPairs(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * n as f64 {
        return Err(GeoError::DegenerateAbscissa);
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// On-road vs. Euclidean regression over all connected pairs, both orientations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRegression {
    pub pairs: usize,
    pub road_on_euclid: LineFit,
    pub euclid_on_road: LineFit,
}

pub fn pairwise_distances(points: &[Point], graph: &RoadGraph) -> Result<Vec<(f64, f64)>, GeoError> {
    let access = points
        .iter()
        .map(|&p| snap_to_road(graph, p))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<Vec<(f64, f64)>> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let dist = shortest_paths(graph, &access_sources(graph, &access[i]), f64::INFINITY);
            ((i + 1)..points.len())
                .filter_map(|j| {
                    let e = euclidean_distance(points[i], points[j]);
                    let r = if points[i] == points[j] {
                        0.0
                    } else {
                        access[i].connector + access_distance(graph, &access[i], &access[j], &dist) + access[j].connector
                    };
                    r.is_finite().then_some((e, r))
                })
                .collect()
        })
        .collect();
    Ok(pairs.into_iter().flatten().collect())
}

pub fn distance_regression(points: &[Point], graph: &RoadGraph) -> Result<DistanceRegression, GeoError> {
    let pairs = pairwise_distances(points, graph)?;
    let (e, r): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(DistanceRegression {
        pairs: pairs.len(),
        road_on_euclid: ols(&e, &r)?,
        euclid_on_road: ols(&r, &e)?,
    })
}
