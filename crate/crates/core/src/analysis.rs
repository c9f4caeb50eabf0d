//! Aggregation inspection: exploitation scores over the concatenation
//! blocks of aggregation-node FFNs, and a machine-readable description of
//! each strategy's wiring DAG.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diversity::Side;
use crate::error::{Error, Result};
use crate::fusion::{AggParams, FusionKind, FusionParams, FusionStrategy};
use crate::model::Model;
use crate::tensor::Real;

/// Normalized absolute-weight mass of one aggregation input's block:
/// a rough estimate of that input's contribution to the node.
#[derive(Clone, Debug, PartialEq)]
pub struct ExploitationRow {
    pub side: Side,
    /// Node index: the subtree index for hierarchical aggregation, the
    /// produced layer for iterative aggregation.
    pub node: usize,
    /// Input name: backbone layers are `H<l>`, aggregation nodes `A<i>`.
    pub input: String,
    /// In [0, 1]; the scores of one node sum to 1.
    pub score: f64,
}

/// Names of an aggregation node's inputs, deepest first, matching the
/// block order of its concatenated FFN input.
fn node_inputs(kind: FusionKind, node: usize) -> Vec<String> {
    match kind {
        FusionKind::Iterative => {
            // Node l merges H^l with the running aggregate; the aggregate of
            // the first node is H^1 itself.
            let below = if node == 2 {
                "H1".into()
            } else {
                format!("A{}", node - 1)
            };
            vec![format!("H{node}"), below]
        }
        FusionKind::Hierarchical => {
            if node == 1 {
                vec!["H2".into(), "H1".into()]
            } else {
                vec![
                    format!("H{}", 2 * node),
                    format!("H{}", 2 * node - 1),
                    format!("A{}", node - 1),
                ]
            }
        }
        _ => vec![],
    }
}

fn score_node<T: Real>(
    side: Side,
    kind: FusionKind,
    node_idx: usize,
    params: &AggParams<T>,
    out: &mut Vec<ExploitationRow>,
) -> Result<()> {
    let sums = params.input_block_abs_sums().ok_or_else(|| {
        Error::Config(
            "exploitation scores need FFN aggregation nodes; the attention variant has no input blocks"
                .into(),
        )
    })?;
    let total: f64 = sums.iter().sum();
    if total == 0.0 {
        return Err(Error::Config(format!(
            "aggregation node {node_idx} has all-zero input blocks"
        )));
    }
    let names = node_inputs(kind, node_idx);
    for (name, s) in names.into_iter().zip(sums.iter()) {
        out.push(ExploitationRow {
            side,
            node: node_idx,
            input: name,
            score: s / total,
        });
    }
    Ok(())
}

/// Exploitation scores for every aggregation node of both stacks. Only
/// iterative and hierarchical models carry the aggregation nodes this
/// analysis reads.
pub fn exploitation_scores<T: Real>(model: &Model<T>) -> Result<Vec<ExploitationRow>> {
    let kind = model.config.strategy.kind;
    if !matches!(kind, FusionKind::Iterative | FusionKind::Hierarchical) {
        return Err(Error::Config(format!(
            "exploitation scores need an iterative or hierarchical checkpoint, got {}",
            kind.name()
        )));
    }
    let mut out = Vec::new();
    for (side, fusion) in [
        (Side::Encoder, &model.enc_fusion),
        (Side::Decoder, &model.dec_fusion),
    ] {
        let nodes = match fusion {
            FusionParams::Aggregation { nodes } => nodes,
            _ => {
                return Err(Error::Config(
                    "strategy/parameter mismatch: no aggregation nodes allocated".into(),
                ))
            }
        };
        for (i, node) in nodes.iter().enumerate() {
            let node_idx = match kind {
                FusionKind::Iterative => i + 2,
                _ => i + 1,
            };
            score_node(side, kind, node_idx, node, &mut out)?;
        }
    }
    Ok(out)
}

// ── DAG description ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// The embedding output feeding layer 1.
    Source,
    Backbone,
    Agg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Layer input along the backbone.
    Chain,
    /// Dense connection: an earlier layer output added into a later one.
    DenseSkip,
    /// Aggregation node input.
    AggInput,
    /// Aggregation node output fed back into the backbone.
    Feedback,
    /// Multi-layer attention reaching below the immediate predecessor.
    Attend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: String,
    pub kind: NodeKind,
    pub depth: usize,
    /// Inputs merged by an aggregation node; 0 elsewhere.
    pub arity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagDescription {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
    pub final_node: String,
}

impl DagDescription {
    pub fn edges_of_kind(&self, kind: EdgeKind) -> Vec<(&str, &str)> {
        self.edges
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| (e.from.as_str(), e.to.as_str()))
            .collect()
    }

    pub fn agg_nodes(&self) -> Vec<&DagNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Agg).collect()
    }
}

/// Describe the wiring of one stack of `l_count` layers under a strategy.
/// Validates the structural invariants (even depth for hierarchical
/// aggregation, at most one aggregation node per depth) before returning.
pub fn describe_dag(l_count: usize, strategy: &FusionStrategy) -> Result<DagDescription> {
    if l_count == 0 {
        return Err(Error::Config("describe_dag needs at least one layer".into()));
    }
    let mut nodes = vec![DagNode {
        id: "H0".into(),
        kind: NodeKind::Source,
        depth: 0,
        arity: 0,
    }];
    for l in 1..=l_count {
        nodes.push(DagNode {
            id: format!("H{l}"),
            kind: NodeKind::Backbone,
            depth: l,
            arity: 0,
        });
    }
    let mut edges = Vec::new();
    let chain = |from: usize, to: usize, edges: &mut Vec<DagEdge>| {
        edges.push(DagEdge {
            from: format!("H{from}"),
            to: format!("H{to}"),
            kind: EdgeKind::Chain,
        });
    };

    let final_node = match strategy.kind {
        FusionKind::Vanilla | FusionKind::Dense => {
            for l in 1..=l_count {
                chain(l - 1, l, &mut edges);
            }
            if strategy.kind == FusionKind::Dense {
                for l in 2..=l_count {
                    for i in 1..l {
                        edges.push(DagEdge {
                            from: format!("H{i}"),
                            to: format!("H{l}"),
                            kind: EdgeKind::DenseSkip,
                        });
                    }
                }
            }
            format!("H{l_count}")
        }
        FusionKind::Linear => {
            for l in 1..=l_count {
                chain(l - 1, l, &mut edges);
            }
            nodes.push(DagNode {
                id: "A1".into(),
                kind: NodeKind::Agg,
                depth: l_count + 1,
                arity: l_count,
            });
            for l in 1..=l_count {
                edges.push(DagEdge {
                    from: format!("H{l}"),
                    to: "A1".into(),
                    kind: EdgeKind::AggInput,
                });
            }
            "A1".into()
        }
        FusionKind::Iterative => {
            for l in 1..=l_count {
                chain(l - 1, l, &mut edges);
            }
            for l in 2..=l_count {
                nodes.push(DagNode {
                    id: format!("A{l}"),
                    kind: NodeKind::Agg,
                    depth: l,
                    arity: 2,
                });
                edges.push(DagEdge {
                    from: format!("H{l}"),
                    to: format!("A{l}"),
                    kind: EdgeKind::AggInput,
                });
                let below = if l == 2 {
                    "H1".to_string()
                } else {
                    format!("A{}", l - 1)
                };
                edges.push(DagEdge {
                    from: below,
                    to: format!("A{l}"),
                    kind: EdgeKind::AggInput,
                });
            }
            if l_count == 1 {
                "H1".into()
            } else {
                format!("A{l_count}")
            }
        }
        FusionKind::Hierarchical => {
            if l_count % 2 != 0 {
                return Err(Error::Config(format!(
                    "hierarchical aggregation needs an even layer count, got {l_count}"
                )));
            }
            chain(0, 1, &mut edges);
            for i in 1..=l_count / 2 {
                let (lo, hi) = (2 * i - 1, 2 * i);
                chain(lo, hi, &mut edges);
                nodes.push(DagNode {
                    id: format!("A{i}"),
                    kind: NodeKind::Agg,
                    depth: hi,
                    arity: if i == 1 { 2 } else { 3 },
                });
                for from in [format!("H{hi}"), format!("H{lo}")] {
                    edges.push(DagEdge {
                        from,
                        to: format!("A{i}"),
                        kind: EdgeKind::AggInput,
                    });
                }
                if i > 1 {
                    edges.push(DagEdge {
                        from: format!("A{}", i - 1),
                        to: format!("A{i}"),
                        kind: EdgeKind::AggInput,
                    });
                }
                if i < l_count / 2 {
                    edges.push(DagEdge {
                        from: format!("A{i}"),
                        to: format!("H{}", 2 * i + 1),
                        kind: EdgeKind::Feedback,
                    });
                }
            }
            format!("A{}", l_count / 2)
        }
        FusionKind::MultiLayerAttention => {
            if strategy.k < 1 {
                return Err(Error::Config("multi-layer attention requires k >= 1".into()));
            }
            for l in 1..=l_count {
                chain(l - 1, l, &mut edges);
                let m = strategy.k.min(l);
                for i in 2..=m {
                    edges.push(DagEdge {
                        from: format!("H{}", l - i),
                        to: format!("H{l}"),
                        kind: EdgeKind::Attend,
                    });
                }
            }
            format!("H{l_count}")
        }
    };

    let dag = DagDescription {
        nodes,
        edges,
        final_node,
    };
    validate_dag(&dag, l_count, strategy)?;
    Ok(dag)
}

fn validate_dag(dag: &DagDescription, l_count: usize, strategy: &FusionStrategy) -> Result<()> {
    let aggs = dag.agg_nodes();
    if aggs.len() != strategy.agg_node_count(l_count) {
        return Err(Error::Config("aggregation node count mismatch".into()));
    }
    if strategy.kind == FusionKind::Hierarchical {
        // At most one aggregation node per depth; arity 2 at the first
        // subtree and 3 afterwards.
        let mut depths: Vec<usize> = aggs.iter().map(|n| n.depth).collect();
        depths.sort_unstable();
        depths.dedup();
        if depths.len() != aggs.len() {
            return Err(Error::Config("hierarchical depth hosts two aggregation nodes".into()));
        }
        for (i, node) in aggs.iter().enumerate() {
            let want = if i == 0 { 2 } else { 3 };
            if node.arity != want {
                return Err(Error::Config(format!(
                    "hierarchical node {} has arity {}, expected {want}",
                    node.id, node.arity
                )));
            }
        }
    }
    Ok(())
}
