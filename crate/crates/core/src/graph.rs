//! The feature-extraction graph and inter-feature redundancy analysis.
//!
//! Every feature is a chain `RETRIEVE -> DECODE -> FILTER -> COMPUTE -> SINK`
//! hanging off a single `SOURCE` (the app log). Optimization passes live in
//! [`crate::optimizer`]; this module builds the naive graph, checks structural
//! invariants, and classifies overlap between feature conditions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::feature_spec::{CompFunc, ModelSpec};
use crate::optimizer::HierarchicalFilterPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Attribute selection performed by a FILTER node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterPlan {
    /// Single-feature filter: keep rows younger than the range, project attributes.
    Select {
        time_range_s: u64,
        attr_names: Vec<String>,
    },
    /// Fused filter routing rows to many features by age bucket.
    Hierarchical(HierarchicalFilterPlan),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Source,
    Retrieve {
        event_names: Vec<String>,
        time_range_s: u64,
    },
    Decode,
    Filter {
        plan: FilterPlan,
    },
    Compute {
        comp_func: CompFunc,
    },
    FeatureSink {
        feature_id: String,
    },
}

impl NodeKind {
    /// Position of the operator along a source-to-sink path.
    pub fn rank(&self) -> u8 {
        match self {
            NodeKind::Source => 0,
            NodeKind::Retrieve { .. } => 1,
            NodeKind::Decode => 2,
            NodeKind::Filter { .. } => 3,
            NodeKind::Compute { .. } => 4,
            NodeKind::FeatureSink { .. } => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Source => "SOURCE",
            NodeKind::Retrieve { .. } => "RETRIEVE",
            NodeKind::Decode => "DECODE",
            NodeKind::Filter { .. } => "FILTER",
            NodeKind::Compute { .. } => "COMPUTE",
            NodeKind::FeatureSink { .. } => "FEATURE_SINK",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("node at index {index} has id {id}")]
    NonDenseIds { index: usize, id: NodeId },
    #[error("expected exactly one SOURCE node, found {0}")]
    SourceCount(usize),
    #[error("edge {0} -> {1} references a missing node")]
    DanglingEdge(NodeId, NodeId),
    #[error("edge {from} -> {to} breaks operator order ({from_kind} -> {to_kind})")]
    KindOrder {
        from: NodeId,
        to: NodeId,
        from_kind: &'static str,
        to_kind: &'static str,
    },
    #[error("node {0} has no input")]
    NoInput(NodeId),
    #[error("node {0} has no output")]
    NoOutput(NodeId),
    #[error("node {node}: {reason}")]
    Shape { node: NodeId, reason: String },
    #[error("sink {0} is unreachable from the source")]
    Unreachable(NodeId),
    #[error("graph dump is not valid: {0}")]
    Load(String),
}

/// Directed acyclic graph of extraction operators.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeGraph {
    pub nodes: Vec<OpNode>,
    pub edges: Vec<(NodeId, NodeId)>,
}

impl FeGraph {
    pub fn add_node(&mut self, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(OpNode { id, kind });
        id
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.push((from, to));
    }

    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id.0 as usize]
    }

    pub fn predecessors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |e| e.1 == id).map(|e| e.0)
    }

    pub fn successors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |e| e.0 == id).map(|e| e.1)
    }

    pub fn count_kind(&self, rank: u8) -> usize {
        self.nodes.iter().filter(|n| n.kind.rank() == rank).count()
    }

    pub fn source(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Source)
            .map(|n| n.id)
    }

    /// All sinks as `(sink, feature_id)`, in node order.
    pub fn sinks(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::FeatureSink { feature_id } => Some((n.id, feature_id.as_str())),
            _ => None,
        })
    }

    /// Checks the structural invariants every extraction graph must hold:
    /// dense ids, one source, edges that advance exactly one operator stage,
    /// no dangling inputs or outputs, single-input stages where the chain
    /// shape demands it, and reachability of every sink.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (index, n) in self.nodes.iter().enumerate() {
            if n.id.0 as usize != index {
                return Err(GraphError::NonDenseIds { index, id: n.id });
            }
        }
        let sources = self.count_kind(0);
        if sources != 1 {
            return Err(GraphError::SourceCount(sources));
        }
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        let mut adj = vec![Vec::new(); n];
        for &(from, to) in &self.edges {
            if from.0 as usize >= n || to.0 as usize >= n {
                return Err(GraphError::DanglingEdge(from, to));
            }
            let (fk, tk) = (&self.node(from).kind, &self.node(to).kind);
            // Ranks strictly increase along edges, so the graph is acyclic.
            if tk.rank() != fk.rank() + 1 {
                return Err(GraphError::KindOrder {
                    from,
                    to,
                    from_kind: fk.name(),
                    to_kind: tk.name(),
                });
            }
            indeg[to.0 as usize] += 1;
            outdeg[from.0 as usize] += 1;
            adj[from.0 as usize].push(to);
        }
        for node in &self.nodes {
            let i = node.id.0 as usize;
            let shape = |reason: &str| GraphError::Shape {
                node: node.id,
                reason: reason.to_string(),
            };
            match node.kind {
                NodeKind::Source => {}
                NodeKind::Decode | NodeKind::Filter { .. } | NodeKind::FeatureSink { .. }
                    if indeg[i] != 1 =>
                {
                    return Err(shape("expected exactly one input"));
                }
                _ if indeg[i] == 0 => return Err(GraphError::NoInput(node.id)),
                _ => {}
            }
            match node.kind {
                NodeKind::FeatureSink { .. } => {}
                NodeKind::Retrieve { .. } | NodeKind::Decode | NodeKind::Compute { .. }
                    if outdeg[i] != 1 =>
                {
                    return Err(shape("expected exactly one output"));
                }
                _ if outdeg[i] == 0 => return Err(GraphError::NoOutput(node.id)),
                _ => {}
            }
            if let NodeKind::Retrieve { event_names, .. } = &node.kind {
                if event_names.is_empty() {
                    return Err(shape("RETRIEVE without event names"));
                }
            }
        }
        let source = self.source().expect("checked above");
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([source]);
        seen[source.0 as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u.0 as usize] {
                if !seen[v.0 as usize] {
                    seen[v.0 as usize] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some((sink, _)) = self.sinks().find(|(id, _)| !seen[id.0 as usize]) {
            return Err(GraphError::Unreachable(sink));
        }
        Ok(())
    }
}

/// One independent chain per feature, in spec order.
pub fn build_naive_graph(spec: &ModelSpec) -> FeGraph {
    let mut g = FeGraph::default();
    let source = g.add_node(NodeKind::Source);
    for f in &spec.features {
        let retrieve = g.add_node(NodeKind::Retrieve {
            event_names: f.event_names.clone(),
            time_range_s: f.time_range_s,
        });
        let decode = g.add_node(NodeKind::Decode);
        let filter = g.add_node(NodeKind::Filter {
            plan: FilterPlan::Select {
                time_range_s: f.time_range_s,
                attr_names: f.attr_names.clone(),
            },
        });
        let compute = g.add_node(NodeKind::Compute {
            comp_func: f.comp_func,
        });
        let sink = g.add_node(NodeKind::FeatureSink {
            feature_id: f.feature_id.clone(),
        });
        for (a, b) in [
            (source, retrieve),
            (retrieve, decode),
            (decode, filter),
            (filter, compute),
            (compute, sink),
        ] {
            g.add_edge(a, b);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RedundancyLevel {
    None,
    Partial,
    Full,
}

impl fmt::Display for RedundancyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RedundancyLevel::None => "NONE",
            RedundancyLevel::Partial => "PARTIAL",
            RedundancyLevel::Full => "FULL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRedundancy {
    pub feature_i: String,
    pub feature_j: String,
    pub level: RedundancyLevel,
    pub shared_event_names: Vec<String>,
    pub overlap_range_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RedundancySummary {
    pub pairs: usize,
    pub none: f64,
    pub partial: f64,
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RedundancyReport {
    /// Unordered pairs with `feature_i < feature_j`.
    pub pairs: Vec<PairRedundancy>,
    pub summary: RedundancySummary,
    /// Number of features reading each event type.
    pub features_per_event: BTreeMap<String, usize>,
}

impl RedundancyReport {
    /// Symmetric lookup.
    pub fn get(&self, a: &str, b: &str) -> Option<&PairRedundancy> {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        self.pairs
            .binary_search_by(|p| (p.feature_i.as_str(), p.feature_j.as_str()).cmp(&(i, j)))
            .ok()
            .map(|k| &self.pairs[k])
    }

    /// Rows `feature_i,feature_j,level,shared_events,overlap_s`; shared events
    /// are joined with `|`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "feature_i",
            "feature_j",
            "level",
            "shared_events",
            "overlap_s",
        ])?;
        for p in &self.pairs {
            w.write_record([
                p.feature_i.as_str(),
                p.feature_j.as_str(),
                &p.level.to_string(),
                &p.shared_event_names.join("|"),
                &p.overlap_range_s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        out.push_str(&format!("feature pairs: {}\n", s.pairs));
        out.push_str(&format!("  NONE     {:>6.2}%\n", s.none * 100.0));
        out.push_str(&format!("  PARTIAL  {:>6.2}%\n", s.partial * 100.0));
        out.push_str(&format!("  FULL     {:>6.2}%\n", s.full * 100.0));
        out.push_str(&format!("event types: {}\n", self.features_per_event.len()));
        for (e, n) in &self.features_per_event {
            out.push_str(&format!("  {e:<28} {n:>4} features\n"));
        }
        out
    }
}

/// Classifies every feature pair by the overlap of their
/// `(event_names, time_range)` conditions.
pub fn identify_redundancy(spec: &ModelSpec) -> RedundancyReport {
    let mut features: Vec<_> = spec.features.iter().collect();
    features.sort_by(|a, b| a.feature_id.cmp(&b.feature_id));
    let sets: Vec<BTreeSet<&String>> = features
        .iter()
        .map(|f| f.event_names.iter().collect())
        .collect();

    let mut pairs = Vec::with_capacity(features.len() * features.len().saturating_sub(1) / 2);
    let mut counts = [0usize; 3];
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let (a, b) = (features[i], features[j]);
            let shared: Vec<String> = sets[i]
                .intersection(&sets[j])
                .map(|s| s.to_string())
                .collect();
            let level = if shared.is_empty() {
                RedundancyLevel::None
            } else if sets[i] == sets[j] && a.time_range_s == b.time_range_s {
                RedundancyLevel::Full
            } else {
                RedundancyLevel::Partial
            };
            let overlap_range_s = if shared.is_empty() {
                0
            } else {
                a.time_range_s.min(b.time_range_s)
            };
            counts[level as usize] += 1;
            pairs.push(PairRedundancy {
                feature_i: a.feature_id.clone(),
                feature_j: b.feature_id.clone(),
                level,
                shared_event_names: shared,
                overlap_range_s,
            });
        }
    }
    let total = pairs.len();
    let frac = |c: usize| {
        if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        }
    };
    let mut features_per_event = BTreeMap::new();
    for set in &sets {
        for e in set {
            *features_per_event.entry(e.to_string()).or_insert(0) += 1;
        }
    }
    RedundancyReport {
        pairs,
        summary: RedundancySummary {
            pairs: total,
            none: frac(counts[0]),
            partial: frac(counts[1]),
            full: frac(counts[2]),
        },
        features_per_event,
    }
}
