//! Offline graph optimization.
//!
//! 1. [`partition_chains`] splits each feature chain into one sub-chain per
//!    event name, so fusing never widens a RETRIEVE's event condition.
//! 2. [`fuse_chains`] merges all sub-chains of one event name into a single
//!    RETRIEVE/DECODE/FILTER chain. The RETRIEVE takes the widest time range,
//!    and per-feature separation happens inside the fused FILTER through a
//!    [`HierarchicalFilterPlan`] instead of separate branch nodes.
//!
//! Graph dumps are deterministic JSON (loadable) or DOT (for viewing).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::feature_spec::CompFunc;
use crate::graph::{FeGraph, FilterPlan, GraphError, NodeId, NodeKind};

/// One feature served by a fused filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterTarget {
    pub feature_id: String,
    pub time_range_s: u64,
    pub attr_names: Vec<String>,
}

/// Reverse mapping from time ranges to the features (and attributes) that
/// accept a row of that age.
///
/// `targets` is ordered by decreasing range, so the cumulative entry for
/// `ranges_desc[k]` is the prefix `targets[..bucket_ends[k]]`: every feature
/// whose range is at least `ranges_desc[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalFilterPlan {
    pub event_name: String,
    pub ranges_desc: Vec<u64>,
    pub targets: Vec<FilterTarget>,
    pub bucket_ends: Vec<usize>,
    pub union_attrs: Vec<String>,
}

impl HierarchicalFilterPlan {
    /// Features accepting rows younger than `ranges_desc[k]`.
    pub fn cumulative_targets(&self, k: usize) -> &[FilterTarget] {
        &self.targets[..self.bucket_ends[k]]
    }

    pub fn max_range_s(&self) -> u64 {
        self.ranges_desc[0]
    }

    pub fn target_index(&self, feature_id: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.feature_id == feature_id)
    }

    fn check(&self) -> Result<(), String> {
        if self.ranges_desc.is_empty() || self.ranges_desc.len() != self.bucket_ends.len() {
            return Err("ranges and buckets misaligned".into());
        }
        if self.ranges_desc.windows(2).any(|w| w[0] <= w[1]) {
            return Err("ranges not strictly decreasing".into());
        }
        if self.bucket_ends.last() != Some(&self.targets.len()) {
            return Err("last bucket must cover every target".into());
        }
        let mut start = 0;
        for (k, (&range, &end)) in self.ranges_desc.iter().zip(&self.bucket_ends).enumerate() {
            if end <= start || end > self.targets.len() {
                return Err(format!("bucket {k} is empty or out of bounds"));
            }
            if self.targets[start..end]
                .iter()
                .any(|t| t.time_range_s != range)
            {
                return Err(format!("bucket {k} holds a target of another range"));
            }
            start = end;
        }
        let mut ids = BTreeSet::new();
        if !self.targets.iter().all(|t| ids.insert(&t.feature_id)) {
            return Err("feature listed twice".into());
        }
        let union: BTreeSet<&String> = self.targets.iter().flat_map(|t| &t.attr_names).collect();
        if !union.into_iter().eq(self.union_attrs.iter()) {
            return Err("union_attrs inconsistent with targets".into());
        }
        Ok(())
    }
}

/// Builds the reverse mapping for the features reading `event_name`.
pub fn build_filter_plan(
    event_name: &str,
    features: &[(String, u64, Vec<String>)],
) -> HierarchicalFilterPlan {
    let mut targets: Vec<FilterTarget> = features
        .iter()
        .map(|(id, range, attrs)| FilterTarget {
            feature_id: id.clone(),
            time_range_s: *range,
            attr_names: attrs.clone(),
        })
        .collect();
    targets.sort_by(|a, b| {
        b.time_range_s
            .cmp(&a.time_range_s)
            .then_with(|| a.feature_id.cmp(&b.feature_id))
    });

    let mut ranges_desc: Vec<u64> = Vec::new();
    let mut bucket_ends = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if ranges_desc.last() != Some(&t.time_range_s) {
            if !ranges_desc.is_empty() {
                bucket_ends.push(i);
            }
            ranges_desc.push(t.time_range_s);
        }
    }
    bucket_ends.push(targets.len());

    let union_attrs: BTreeSet<&String> = targets.iter().flat_map(|t| &t.attr_names).collect();
    let union_attrs = union_attrs.into_iter().cloned().collect();
    HierarchicalFilterPlan {
        event_name: event_name.to_string(),
        ranges_desc,
        targets,
        bucket_ends,
        union_attrs,
    }
}

/// A feature chain as seen from its sink: the compute function and every
/// `(event_name, time_range_s, attr_names)` input sub-chain.
struct ChainView {
    feature_id: String,
    comp_func: CompFunc,
    inputs: Vec<(String, u64, Vec<String>)>,
}

fn chains(graph: &FeGraph) -> Vec<ChainView> {
    let mut out = Vec::new();
    for (sink, feature_id) in graph.sinks() {
        let Some(compute) = graph.predecessors(sink).next() else {
            continue;
        };
        let NodeKind::Compute { comp_func } = graph.node(compute).kind else {
            continue;
        };
        let mut inputs = Vec::new();
        for filter in graph.predecessors(compute) {
            let attrs = match &graph.node(filter).kind {
                NodeKind::Filter {
                    plan: FilterPlan::Select { attr_names, .. },
                } => attr_names.clone(),
                NodeKind::Filter {
                    plan: FilterPlan::Hierarchical(p),
                } => match p.target_index(feature_id) {
                    Some(i) => p.targets[i].attr_names.clone(),
                    None => continue,
                },
                _ => continue,
            };
            let Some(decode) = graph.predecessors(filter).next() else {
                continue;
            };
            let Some(retrieve) = graph.predecessors(decode).next() else {
                continue;
            };
            let NodeKind::Retrieve {
                event_names,
                time_range_s,
            } = &graph.node(retrieve).kind
            else {
                continue;
            };
            // A fused retrieve carries the widest range; the feature's own
            // range lives in the filter plan.
            let range = match &graph.node(filter).kind {
                NodeKind::Filter {
                    plan: FilterPlan::Hierarchical(p),
                } => p.targets[p.target_index(feature_id).unwrap()].time_range_s,
                _ => *time_range_s,
            };
            for e in event_names {
                inputs.push((e.clone(), range, attrs.clone()));
            }
        }
        out.push(ChainView {
            feature_id: feature_id.to_string(),
            comp_func,
            inputs,
        });
    }
    out
}

/// Splits every multi-event chain into single-event sub-chains feeding the
/// feature's COMPUTE node.
pub fn partition_chains(graph: &FeGraph) -> FeGraph {
    let mut g = FeGraph::default();
    let source = g.add_node(NodeKind::Source);
    for chain in chains(graph) {
        let mut filters = Vec::with_capacity(chain.inputs.len());
        for (event_name, range, attrs) in chain.inputs {
            let retrieve = g.add_node(NodeKind::Retrieve {
                event_names: vec![event_name],
                time_range_s: range,
            });
            let decode = g.add_node(NodeKind::Decode);
            let filter = g.add_node(NodeKind::Filter {
                plan: FilterPlan::Select {
                    time_range_s: range,
                    attr_names: attrs,
                },
            });
            g.add_edge(source, retrieve);
            g.add_edge(retrieve, decode);
            g.add_edge(decode, filter);
            filters.push(filter);
        }
        let compute = g.add_node(NodeKind::Compute {
            comp_func: chain.comp_func,
        });
        let sink = g.add_node(NodeKind::FeatureSink {
            feature_id: chain.feature_id,
        });
        for f in filters {
            g.add_edge(f, compute);
        }
        g.add_edge(compute, sink);
    }
    g
}

/// Fuses sub-chains sharing an event name.
pub fn fuse_chains(graph: &FeGraph) -> OptimizedGraph {
    let mut by_event: BTreeMap<String, Vec<(String, u64, Vec<String>)>> = BTreeMap::new();
    let mut features: BTreeMap<String, (CompFunc, BTreeSet<String>)> = BTreeMap::new();
    for chain in chains(graph) {
        let events = &mut features
            .entry(chain.feature_id.clone())
            .or_insert_with(|| (chain.comp_func, BTreeSet::new()))
            .1;
        for (event_name, range, attrs) in chain.inputs {
            if events.insert(event_name.clone()) {
                by_event.entry(event_name).or_default().push((
                    chain.feature_id.clone(),
                    range,
                    attrs,
                ));
            }
        }
    }

    let mut g = FeGraph::default();
    let source = g.add_node(NodeKind::Source);
    let mut filter_of = HashMap::new();
    for (event_name, members) in &by_event {
        let plan = build_filter_plan(event_name, members);
        let retrieve = g.add_node(NodeKind::Retrieve {
            event_names: vec![event_name.clone()],
            time_range_s: plan.max_range_s(),
        });
        let decode = g.add_node(NodeKind::Decode);
        let filter = g.add_node(NodeKind::Filter {
            plan: FilterPlan::Hierarchical(plan),
        });
        g.add_edge(source, retrieve);
        g.add_edge(retrieve, decode);
        g.add_edge(decode, filter);
        filter_of.insert(event_name.as_str(), filter);
    }
    for (feature_id, (comp_func, events)) in &features {
        let compute = g.add_node(NodeKind::Compute {
            comp_func: *comp_func,
        });
        let sink = g.add_node(NodeKind::FeatureSink {
            feature_id: feature_id.clone(),
        });
        for e in events {
            g.add_edge(filter_of[e.as_str()], compute);
        }
        g.add_edge(compute, sink);
    }
    OptimizedGraph::try_from_graph(g).expect("fusion output satisfies optimized-graph invariants")
}

/// One fused RETRIEVE/DECODE/FILTER chain.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGroup {
    pub retrieve: NodeId,
    pub filter: NodeId,
    pub event_name: String,
    pub time_range_s: u64,
    pub plan: HierarchicalFilterPlan,
}

/// Where a feature's inputs come from: `(group index, target index)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRoute {
    pub feature_id: String,
    pub comp_func: CompFunc,
    pub inputs: Vec<(usize, usize)>,
}

/// A fused graph together with its execution index.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedGraph {
    graph: FeGraph,
    groups: Vec<FusedGroup>,
    features: Vec<FeatureRoute>,
}

impl OptimizedGraph {
    /// Checks the fused-graph invariants and derives the execution index.
    pub fn try_from_graph(graph: FeGraph) -> Result<Self, GraphError> {
        graph.validate()?;
        let shape = |node: NodeId, reason: String| GraphError::Shape { node, reason };

        let mut groups = Vec::new();
        let mut group_of_filter = HashMap::new();
        let mut seen_events = BTreeSet::new();
        for node in &graph.nodes {
            let NodeKind::Retrieve {
                event_names,
                time_range_s,
            } = &node.kind
            else {
                continue;
            };
            if event_names.len() != 1 {
                return Err(shape(
                    node.id,
                    "fused RETRIEVE must carry exactly one event name".into(),
                ));
            }
            let event_name = &event_names[0];
            if !seen_events.insert(event_name.clone()) {
                return Err(shape(
                    node.id,
                    format!("second RETRIEVE for `{event_name}`"),
                ));
            }
            let decode = graph.successors(node.id).next().expect("validated");
            let mut filters = graph.successors(decode);
            let filter = filters.next().expect("validated");
            if filters.next().is_some() {
                return Err(shape(decode, "DECODE feeds more than one FILTER".into()));
            }
            let NodeKind::Filter {
                plan: FilterPlan::Hierarchical(plan),
            } = &graph.node(filter).kind
            else {
                return Err(shape(
                    filter,
                    "fused FILTER needs a hierarchical plan".into(),
                ));
            };
            plan.check().map_err(|r| shape(filter, r))?;
            if &plan.event_name != event_name {
                return Err(shape(
                    filter,
                    "plan event name differs from RETRIEVE".into(),
                ));
            }
            if plan.max_range_s() != *time_range_s {
                return Err(shape(
                    node.id,
                    "RETRIEVE range must equal the widest fused range".into(),
                ));
            }
            group_of_filter.insert(filter, groups.len());
            groups.push(FusedGroup {
                retrieve: node.id,
                filter,
                event_name: event_name.clone(),
                time_range_s: *time_range_s,
                plan: plan.clone(),
            });
        }

        let mut features = Vec::new();
        let mut routed = vec![BTreeSet::new(); groups.len()];
        for (sink, feature_id) in graph.sinks() {
            let compute = graph.predecessors(sink).next().expect("validated");
            let NodeKind::Compute { comp_func } = graph.node(compute).kind else {
                unreachable!("validated kind order")
            };
            let mut inputs = Vec::new();
            for filter in graph.predecessors(compute) {
                let g = group_of_filter[&filter];
                let t = groups[g]
                    .plan
                    .target_index(feature_id)
                    .ok_or_else(|| shape(filter, format!("plan does not route `{feature_id}`")))?;
                routed[g].insert(t);
                inputs.push((g, t));
            }
            inputs.sort_unstable();
            features.push(FeatureRoute {
                feature_id: feature_id.to_string(),
                comp_func,
                inputs,
            });
        }
        for (g, group) in groups.iter().enumerate() {
            if routed[g].len() != group.plan.targets.len() {
                return Err(shape(
                    group.filter,
                    "plan routes to a feature without an edge".into(),
                ));
            }
        }
        Ok(Self {
            graph,
            groups,
            features,
        })
    }

    pub fn graph(&self) -> &FeGraph {
        &self.graph
    }

    pub fn groups(&self) -> &[FusedGroup] {
        &self.groups
    }

    pub fn features(&self) -> &[FeatureRoute] {
        &self.features
    }

    pub fn group(&self, event_name: &str) -> Option<&FusedGroup> {
        self.groups.iter().find(|g| g.event_name == event_name)
    }
}

/// Full offline pipeline: partition, then fuse.
pub fn optimize(naive: &FeGraph) -> OptimizedGraph {
    fuse_chains(&partition_chains(naive))
}

/// Structured JSON dump with nodes in id order and edges sorted.
pub fn dump_graph(graph: &FeGraph) -> String {
    let mut g = graph.clone();
    g.edges.sort_unstable();
    let mut s = serde_json::to_string_pretty(&g).expect("graphs always serialize");
    s.push('\n');
    s
}

/// Parses a JSON dump and checks graph invariants.
pub fn load_graph(text: &str) -> Result<FeGraph, GraphError> {
    let g: FeGraph = serde_json::from_str(text).map_err(|e| GraphError::Load(e.to_string()))?;
    g.validate()?;
    Ok(g)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering.
pub fn dump_dot(graph: &FeGraph) -> String {
    let mut out = String::from(
        "digraph fe_graph {\n  rankdir=LR;\n  node [shape=box, fontname=\"monospace\"];\n",
    );
    for n in &graph.nodes {
        let label = match &n.kind {
            NodeKind::Source => "SOURCE\\napp log".to_string(),
            NodeKind::Retrieve {
                event_names,
                time_range_s,
            } => {
                format!(
                    "RETRIEVE\\n{}\\n{}s",
                    dot_escape(&event_names.join(",")),
                    time_range_s
                )
            }
            NodeKind::Decode => "DECODE".to_string(),
            NodeKind::Filter {
                plan:
                    FilterPlan::Select {
                        time_range_s,
                        attr_names,
                    },
            } => format!(
                "FILTER\\n{}s [{}]",
                time_range_s,
                dot_escape(&attr_names.join(","))
            ),
            NodeKind::Filter {
                plan: FilterPlan::Hierarchical(p),
            } => {
                let ranges: Vec<String> = p.ranges_desc.iter().map(u64::to_string).collect();
                format!(
                    "FILTER (hierarchical)\\nranges {}\\n{} features",
                    ranges.join(">"),
                    p.targets.len()
                )
            }
            NodeKind::Compute { comp_func } => format!("COMPUTE\\n{comp_func}"),
            NodeKind::FeatureSink { feature_id } => dot_escape(feature_id),
        };
        let shape = match n.kind {
            NodeKind::Source => ", shape=cylinder",
            NodeKind::FeatureSink { .. } => ", shape=ellipse",
            _ => "",
        };
        let _ = writeln!(out, "  {} [label=\"{}\"{}];", n.id, label, shape);
    }
    let mut edges = graph.edges.clone();
    edges.sort_unstable();
    for (a, b) in edges {
        let _ = writeln!(out, "  {a} -> {b};");
    }
    out.push_str("}\n");
    out
}
