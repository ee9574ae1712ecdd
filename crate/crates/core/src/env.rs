//! Graph environments: parsed grid maps, explicit graphs, finite paths and the
//! lazily materialized infinite path variants used for replay.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A vertex of an environment.
///
/// Finite environments number their vertices `1..=n`. Path variants use the
/// path position directly, so `VertexId(i)` is `v_i`; the `TasepB` variant also
/// has the non-positive positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub i64);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FiniteGeneral,
    FinitePath,
    /// `P(∞)`: `v_1 v_2 …` with source `v_1`.
    InfinitePathPlain,
    /// `P*(∞)`: `P(∞)` with an immortal settled dummy at every `v_i` marking `v_{i-1}`.
    InfinitePathPrefilled,
    /// The TASEP environment: all integer positions, prefilled with dummies,
    /// no source, robot `A_i` starting as a mobile robot at `v_{-i+1}`.
    TasepB,
}

impl Variant {
    pub fn is_finite(self) -> bool {
        matches!(self, Variant::FiniteGeneral | Variant::FinitePath)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfiniteVariant {
    Plain,
    Prefilled,
    TasepB,
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("empty map")]
    Empty,
    #[error("unknown character {ch:?} at line {line}, column {column}")]
    UnknownCharacter { ch: char, line: usize, column: usize },
    #[error("environment has no source vertex")]
    NoSource,
    #[error("environment is disconnected: {unreached} of {n} vertices unreachable from the first source")]
    Disconnected { n: usize, unreached: usize },
    #[error("edge ({0}, {1}) references a vertex outside 1..={2}")]
    EdgeOutOfRange(i64, i64, usize),
    #[error("source {0} is outside 1..={1}")]
    SourceOutOfRange(i64, usize),
    #[error("a path needs at least one vertex")]
    ZeroVertices,
    #[error("source position {0} is outside 1..={1}")]
    BadPathSource(usize, usize),
    #[error("malformed graph file: {0}")]
    Json(String),
}

/// What occupies a vertex before any event has happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitialOccupancy {
    /// Vertex marked by the settled dummy robot, if there is a dummy.
    pub dummy_marks: Option<VertexId>,
    /// Index of the mobile robot that starts here (`TasepB` only).
    pub mobile_robot: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentGraph {
    name: String,
    variant: Variant,
    /// `adjacency[v - 1]`, sorted ascending. Empty for infinite variants.
    adjacency: Vec<Vec<VertexId>>,
    sources: Vec<VertexId>,
    /// Grid cell (row, column) per vertex, for maps parsed from text.
    coords: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Deserialize)]
struct GraphFile {
    n: usize,
    edges: Vec<[i64; 2]>,
    sources: Vec<i64>,
}

impl EnvironmentGraph {
    /// Builds a finite environment from a 1-based undirected edge list.
    pub fn from_edges(
        name: impl Into<String>,
        n: usize,
        edges: &[(i64, i64)],
        sources: &[i64],
    ) -> Result<Self, EnvError> {
        if n == 0 {
            return Err(EnvError::ZeroVertices);
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            let ok = |v: i64| v >= 1 && v as usize <= n;
            if !ok(a) || !ok(b) {
                return Err(EnvError::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                continue;
            }
            adjacency[a as usize - 1].push(VertexId(b));
            adjacency[b as usize - 1].push(VertexId(a));
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        if sources.is_empty() {
            return Err(EnvError::NoSource);
        }
        let mut srcs = Vec::with_capacity(sources.len());
        for &s in sources {
            if s < 1 || s as usize > n {
                return Err(EnvError::SourceOutOfRange(s, n));
            }
            srcs.push(VertexId(s));
        }
        let graph = EnvironmentGraph {
            name: name.into(),
            variant: Variant::FiniteGeneral,
            adjacency,
            sources: srcs,
            coords: None,
        };
        graph.ensure_connected()?;
        Ok(graph)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn is_finite(&self) -> bool {
        self.variant.is_finite()
    }

    /// Number of vertices; `None` for infinite variants.
    pub fn vertex_count(&self) -> Option<usize> {
        self.is_finite().then_some(self.adjacency.len())
    }

    pub fn sources(&self) -> &[VertexId] {
        &self.sources
    }

    pub fn coords(&self) -> Option<&[(usize, usize)]> {
        self.coords.as_deref()
    }

    pub fn contains(&self, v: VertexId) -> bool {
        match self.variant {
            Variant::FiniteGeneral | Variant::FinitePath => v.0 >= 1 && v.0 as usize <= self.adjacency.len(),
            Variant::InfinitePathPlain | Variant::InfinitePathPrefilled => v.0 >= 1,
            Variant::TasepB => true,
        }
    }

    /// Neighbors of `v` in ascending id order.
    pub fn neighbors(&self, v: VertexId) -> Neighbors<'_> {
        match self.variant {
            Variant::FiniteGeneral | Variant::FinitePath => {
                Neighbors::Slice(self.adjacency[(v.0 - 1) as usize].iter())
            }
            Variant::InfinitePathPlain | Variant::InfinitePathPrefilled => {
                let left = (v.0 > 1).then_some(VertexId(v.0 - 1));
                Neighbors::Pair([left, Some(VertexId(v.0 + 1))], 0)
            }
            Variant::TasepB => Neighbors::Pair([Some(VertexId(v.0 - 1)), Some(VertexId(v.0 + 1))], 0),
        }
    }

    pub fn degree(&self, v: VertexId) -> usize {
        self.neighbors(v).count()
    }

    /// Undirected edge count of a finite environment.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Initial occupancy of a vertex (dummies and pre-placed robots).
    pub fn initial_occupancy(&self, v: VertexId) -> InitialOccupancy {
        match self.variant {
            Variant::InfinitePathPrefilled if v.0 >= 1 => InitialOccupancy {
                dummy_marks: Some(VertexId(v.0 - 1)),
                mobile_robot: None,
            },
            Variant::TasepB => InitialOccupancy {
                dummy_marks: Some(VertexId(v.0 - 1)),
                mobile_robot: (v.0 <= 0).then(|| (1 - v.0) as u32),
            },
            _ => InitialOccupancy { dummy_marks: None, mobile_robot: None },
        }
    }

    /// Vertices reachable from `start` by breadth-first traversal.
    pub fn reachable_from(&self, start: VertexId) -> usize {
        let n = self.adjacency.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([start]);
        seen[(start.0 - 1) as usize] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adjacency[(v.0 - 1) as usize] {
                let slot = &mut seen[(u.0 - 1) as usize];
                if !*slot {
                    *slot = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count
    }

    fn ensure_connected(&self) -> Result<(), EnvError> {
        let n = self.adjacency.len();
        let reached = self.reachable_from(self.sources[0]);
        if reached != n {
            return Err(EnvError::Disconnected { n, unreached: n - reached });
        }
        Ok(())
    }
}

pub enum Neighbors<'a> {
    Slice(std::slice::Iter<'a, VertexId>),
    Pair([Option<VertexId>; 2], usize),
}

impl Iterator for Neighbors<'_> {
    type Item = VertexId;

    fn next(&mut self) -> Option<VertexId> {
        match self {
            Neighbors::Slice(it) => it.next().copied(),
            Neighbors::Pair(pair, pos) => {
                while *pos < 2 {
                    let item = pair[*pos];
                    *pos += 1;
                    if item.is_some() {
                        return item;
                    }
                }
                None
            }
        }
    }
}

/// Parses an ASCII map: `#` obstacle, `.` free, `S` source, one row per line.
///
/// Free cells become vertices numbered in row-major order and are joined by
/// 4-neighbor edges. Sources keep row-major order.
pub fn parse_grid_map(text: &str) -> Result<EnvironmentGraph, EnvError> {
    let rows: Vec<&str> = text.lines().collect();
    let mut ids: Vec<Vec<Option<usize>>> = Vec::with_capacity(rows.len());
    let mut coords = Vec::new();
    let mut sources = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let mut line_ids = Vec::with_capacity(row.len());
        for (col, ch) in row.chars().enumerate() {
            let id = match ch {
                '#' => None,
                '.' | 'S' => {
                    coords.push((r, col));
                    let id = coords.len();
                    if ch == 'S' {
                        sources.push(id as i64);
                    }
                    Some(id)
                }
                _ => {
                    return Err(EnvError::UnknownCharacter { ch, line: r + 1, column: col + 1 });
                }
            };
            line_ids.push(id);
        }
        ids.push(line_ids);
    }
    if coords.is_empty() {
        return Err(EnvError::Empty);
    }
    if sources.is_empty() {
        return Err(EnvError::NoSource);
    }
    let mut edges = Vec::new();
    for (r, line) in ids.iter().enumerate() {
        for (col, id) in line.iter().enumerate() {
            let Some(a) = *id else { continue };
            if let Some(Some(b)) = line.get(col + 1) {
                edges.push((a as i64, *b as i64));
            }
            if let Some(Some(b)) = ids.get(r + 1).and_then(|next| next.get(col)) {
                edges.push((a as i64, *b as i64));
            }
        }
    }
    let mut graph = EnvironmentGraph::from_edges("map", coords.len(), &edges, &sources)?;
    graph.coords = Some(coords);
    Ok(graph)
}

/// Parses the JSON graph format `{"n": .., "edges": [[u, v], ..], "sources": [..]}`.
pub fn parse_graph_file(text: &str) -> Result<EnvironmentGraph, EnvError> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| EnvError::Json(e.to_string()))?;
    let edges: Vec<(i64, i64)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
    EnvironmentGraph::from_edges("graph", file.n, &edges, &file.sources)
}

/// `P(n)`: vertices `v_1 … v_n`, source `v_1`.
pub fn path_graph(n: usize) -> Result<EnvironmentGraph, EnvError> {
    if n == 0 {
        return Err(EnvError::ZeroVertices);
    }
    let edges: Vec<(i64, i64)> = (1..n as i64).map(|i| (i, i + 1)).collect();
    let mut graph = EnvironmentGraph::from_edges(format!("path:{n}"), n, &edges, &[1])?;
    graph.variant = Variant::FinitePath;
    Ok(graph)
}

/// A path on `n` vertices whose source sits at position `source`.
///
/// Vertices are relabelled so the branch `v_source … v_n` carries the lowest
/// ids (`v_source` is vertex 1) and `v_{source-1} … v_1` follow. With the
/// default lowest-id tie-break, robots leaving the source head toward `v_n`
/// first and only reach `v_1` once the right branch is full.
pub fn path_graph_with_source(n: usize, source: usize) -> Result<EnvironmentGraph, EnvError> {
    if n == 0 {
        return Err(EnvError::ZeroVertices);
    }
    if source == 0 || source > n {
        return Err(EnvError::BadPathSource(source, n));
    }
    if source == 1 {
        return path_graph(n);
    }
    let label = |pos: usize| -> i64 {
        if pos >= source {
            (pos - source + 1) as i64
        } else {
            (n - source + 1 + (source - pos)) as i64
        }
    };
    let edges: Vec<(i64, i64)> = (1..n).map(|p| (label(p), label(p + 1))).collect();
    EnvironmentGraph::from_edges(format!("path:{n}@{source}"), n, &edges, &[1])
}

/// Square or rectangular obstacle-free grid with the source at the center cell.
pub fn open_grid(width: usize, height: usize) -> Result<EnvironmentGraph, EnvError> {
    if width == 0 || height == 0 {
        return Err(EnvError::ZeroVertices);
    }
    let mut text = String::with_capacity((width + 1) * height);
    for r in 0..height {
        for c in 0..width {
            text.push(if r == height / 2 && c == width / 2 { 'S' } else { '.' });
        }
        text.push('\n');
    }
    Ok(parse_grid_map(&text)?.with_name(format!("grid:{width}x{height}")))
}

/// One of the lazily materialized infinite paths.
pub fn infinite_path(variant: InfiniteVariant) -> EnvironmentGraph {
    let (name, variant, sources) = match variant {
        InfiniteVariant::Plain => ("P(inf)", Variant::InfinitePathPlain, vec![VertexId(1)]),
        InfiniteVariant::Prefilled => ("P*(inf)", Variant::InfinitePathPrefilled, vec![VertexId(1)]),
        InfiniteVariant::TasepB => ("B", Variant::TasepB, Vec::new()),
    };
    EnvironmentGraph {
        name: name.to_string(),
        variant,
        adjacency: Vec::new(),
        sources,
        coords: None,
    }
}

/// Random topology families for the coupling and invariant suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Tree,
    HoleyGrid,
    Dense,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Tree, Family::HoleyGrid, Family::Dense];
}

/// A random connected environment with between 2 and `n_max` vertices and one
/// source, or `sources` distinct sources when more are requested.
pub fn random_graph(family: Family, n_max: usize, sources: usize, seed: u64) -> EnvironmentGraph {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_max = n_max.max(sources + 1).max(2);
    let (name, graph) = match family {
        Family::Tree => {
            let n = rng.random_range(2..=n_max);
            let edges: Vec<(i64, i64)> = (2..=n as i64).map(|i| (rng.random_range(1..i), i)).collect();
            ("tree", random_sources(n, sources, &mut rng, |n, s| EnvironmentGraph::from_edges("", n, &edges, s)))
        }
        Family::Dense => {
            let n = rng.random_range(3.min(n_max)..=n_max);
            let p = rng.random_range(0.3..0.7);
            let mut order: Vec<i64> = (1..=n as i64).collect();
            order.shuffle(&mut rng);
            let mut edges: Vec<(i64, i64)> = order.windows(2).map(|w| (w[0], w[1])).collect();
            for u in 1..=n as i64 {
                for v in u + 1..=n as i64 {
                    if rng.random_bool(p) {
                        edges.push((u, v));
                    }
                }
            }
            ("dense", random_sources(n, sources, &mut rng, |n, s| EnvironmentGraph::from_edges("", n, &edges, s)))
        }
        Family::HoleyGrid => loop {
            let w = rng.random_range(2..=6usize);
            let h = rng.random_range(2..=6usize);
            let mut free: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
            let start = rng.random_range(0..w * h);
            free[start] = true;
            let mut seen = vec![false; w * h];
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(x) = queue.pop_front() {
                let (r, c) = (x / w, x % w);
                let mut next = Vec::new();
                if r > 0 {
                    next.push(x - w);
                }
                if r + 1 < h {
                    next.push(x + w);
                }
                if c > 0 {
                    next.push(x - 1);
                }
                if c + 1 < w {
                    next.push(x + 1);
                }
                for y in next {
                    if free[y] && !seen[y] {
                        seen[y] = true;
                        queue.push_back(y);
                    }
                }
            }
            let cells: Vec<usize> = (0..w * h).filter(|&x| seen[x]).collect();
            if cells.len() < sources + 1 || cells.len() > n_max {
                continue;
            }
            let mut chosen = cells.clone();
            chosen.shuffle(&mut rng);
            chosen.truncate(sources.max(1));
            let mut text = String::new();
            for (x, &free) in seen.iter().enumerate() {
                text.push(match (free, chosen.contains(&x)) {
                    (false, _) => '#',
                    (true, true) => 'S',
                    (true, false) => '.',
                });
                if x % w == w - 1 {
                    text.push('\n');
                }
            }
            break ("grid-holes", parse_grid_map(&text).expect("connected by construction"));
        },
    };
    graph.with_name(format!("{name}#{seed}"))
}

fn random_sources(
    n: usize,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    build: impl Fn(usize, &[i64]) -> Result<EnvironmentGraph, EnvError>,
) -> EnvironmentGraph {
    use rand::seq::SliceRandom;
    let mut ids: Vec<i64> = (1..=n as i64).collect();
    ids.shuffle(rng);
    ids.truncate(count.max(1));
    build(n, &ids).expect("connected by construction")
}
