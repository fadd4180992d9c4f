//! Feature-forest export as JSON or Graphviz DOT.
//!
//! Levels are numbered from 1 in exported documents.

use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::RowSource;
use crate::error::{HsaeError, Result};
use crate::hierarchy::Hierarchy;
use crate::sae::SaeLevel;

pub const TREE_SCHEMA: &str = "hsae-tree/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeFormat {
    Json,
    Dot,
}

impl FromStr for TreeFormat {
    type Err = HsaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(TreeFormat::Json),
            "dot" => Ok(TreeFormat::Dot),
            other => Err(HsaeError::InvalidArgument(format!(
                "unknown tree format {other:?}, expected json or dot"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub level: usize,
    pub index: usize,
    /// Parent index on `level - 1`.
    pub parent: Option<usize>,
    /// Child indices on `level + 1`.
    pub children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_frequency: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRef {
    pub level: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDocument {
    pub schema: String,
    pub dict_sizes: Vec<usize>,
    pub nodes: Vec<TreeNode>,
    /// Features without a parent: every top-level feature plus unassigned
    /// lower-level features.
    pub roots_and_orphans: Vec<NodeRef>,
}

impl TreeDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TreeDocument = serde_json::from_str(s)?;
        if doc.schema != TREE_SCHEMA {
            return Err(HsaeError::Schema {
                expected: TREE_SCHEMA.into(),
                found: doc.schema,
            });
        }
        Ok(doc)
    }

    /// Rebuilds the hierarchy from the parent fields.
    pub fn to_hierarchy(&self) -> Result<Hierarchy> {
        let sizes = &self.dict_sizes;
        let mut parents: Vec<Vec<Option<usize>>> = sizes.iter().skip(1).map(|&n| vec![None; n]).collect();
        let mut seen: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n]).collect();
        for node in &self.nodes {
            if node.level == 0 || node.level > sizes.len() || node.index >= sizes[node.level - 1] {
                return Err(HsaeError::Data(format!(
                    "tree node L{}:{} lies outside dict sizes {sizes:?}",
                    node.level, node.index
                )));
            }
            let slot = &mut seen[node.level - 1][node.index];
            if *slot {
                return Err(HsaeError::Data(format!("tree node L{}:{} listed twice", node.level, node.index)));
            }
            *slot = true;
            match (node.level, node.parent) {
                (1, Some(_)) => {
                    return Err(HsaeError::Data(format!("top-level node L1:{} has a parent", node.index)));
                }
                (1, None) => {}
                (l, p) => parents[l - 2][node.index] = p,
            }
        }
        let h = Hierarchy::from_parents(sizes, parents)?;
        for node in &self.nodes {
            if node.level < sizes.len() {
                let actual = h.children_of(node.level - 1, node.index)?;
                if actual != node.children.as_slice() {
                    return Err(HsaeError::Data(format!(
                        "children of L{}:{} disagree with the parent fields",
                        node.level, node.index
                    )));
                }
            } else if !node.children.is_empty() {
                return Err(HsaeError::Data(format!("bottom-level node L{}:{} has children", node.level, node.index)));
            }
        }
        Ok(h)
    }
}

/// Builds the export document. `frequencies[k][i]` is the activation
/// frequency of feature `i` on (0-based) level `k`.
pub fn tree_document(h: &Hierarchy, dict_sizes: &[usize], frequencies: Option<&[Vec<f64>]>) -> Result<TreeDocument> {
    if h.pair_count() + 1 != dict_sizes.len().max(1) {
        return Err(HsaeError::dim("tree_document", dict_sizes.len(), h.pair_count() + 1));
    }
    if let Some(f) = frequencies {
        if f.len() != dict_sizes.len() || f.iter().zip(dict_sizes).any(|(v, &n)| v.len() != n) {
            return Err(HsaeError::dim("tree_document", format!("{dict_sizes:?}"), "frequency table"));
        }
    }
    let mut nodes = Vec::new();
    let mut loose = Vec::new();
    for (k, &n) in dict_sizes.iter().enumerate() {
        for i in 0..n {
            let parent = h.parent_of(k, i);
            let children = if k + 1 < dict_sizes.len() {
                h.children_of(k, i)?.to_vec()
            } else {
                Vec::new()
            };
            if parent.is_none() {
                loose.push(NodeRef { level: k + 1, index: i });
            }
            nodes.push(TreeNode {
                level: k + 1,
                index: i,
                parent,
                children,
                activation_frequency: frequencies.map(|f| f[k][i]),
            });
        }
    }
    Ok(TreeDocument {
        schema: TREE_SCHEMA.into(),
        dict_sizes: dict_sizes.to_vec(),
        nodes,
        roots_and_orphans: loose,
    })
}

/// One digraph with a node per feature and an edge per parent link.
pub fn tree_dot(doc: &TreeDocument) -> String {
    let mut s = String::from("digraph hsae {\n  rankdir=TB;\n");
    for n in &doc.nodes {
        let _ = match n.activation_frequency {
            Some(f) => writeln!(s, "  \"L{}:{}\" [freq={f}];", n.level, n.index),
            None => writeln!(s, "  \"L{}:{}\";", n.level, n.index),
        };
    }
    for n in &doc.nodes {
        for c in &n.children {
            let _ = writeln!(s, "  \"L{}:{}\" -> \"L{}:{c}\";", n.level, n.index, n.level + 1);
        }
    }
    s.push_str("}\n");
    s
}

/// Fraction of rows on which each feature fires, per level.
pub fn activation_frequencies<S: RowSource>(
    levels: &[SaeLevel],
    source: &S,
    max_rows: usize,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    if chunk == 0 {
        return Err(HsaeError::InvalidArgument("chunk must be >= 1".into()));
    }
    let mut counts: Vec<Vec<u64>> = levels.iter().map(|l| vec![0; l.dict_size()]).collect();
    let total = max_rows.min(source.len());
    let mut start = 0;
    while start < total {
        let n = chunk.min(total - start);
        let x = source.load(start, n)?;
        for (l, c) in levels.iter().zip(counts.iter_mut()) {
            let f = l.forward(&x)?;
            for b in 0..n {
                for &i in f.active.row(b) {
                    c[i as usize] += 1;
                }
            }
        }
        start += n;
    }
    let denom = total.max(1) as f64;
    Ok(counts
        .into_iter()
        .map(|c| c.into_iter().map(|v| v as f64 / denom).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::validate_tree;

    #[test]
    fn empty_hierarchy_has_nodes_but_no_edges() {
        let h = Hierarchy::empty(&[2, 3]);
        let doc = tree_document(&h, &[2, 3], None).unwrap();
        let dot = tree_dot(&doc);
        assert!(dot.contains("\"L1:0\";") && dot.contains("\"L2:2\";"));
        assert!(!dot.contains("->"));
        assert_eq!(doc.roots_and_orphans.len(), 5);
    }

    #[test]
    fn single_edge_appears_in_dot() {
        let h = Hierarchy::from_parents(&[1, 4], vec![vec![None, None, None, Some(0)]]).unwrap();
        let dot = tree_dot(&tree_document(&h, &[1, 4], None).unwrap());
        assert!(dot.contains("\"L1:0\" -> \"L2:3\""));
    }

    #[test]
    fn json_round_trip_validates() {
        let sizes = [2, 3, 4];
        let h = Hierarchy::from_parents(
            &sizes,
            vec![vec![Some(0), Some(1), None], vec![Some(2), Some(0), None, Some(0)]],
        )
        .unwrap();
        let freqs = vec![vec![0.5, 0.25], vec![0.1, 0.2, 0.3], vec![0.0; 4]];
        let doc = tree_document(&h, &sizes, Some(&freqs)).unwrap();
        let back = TreeDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
        let h2 = back.to_hierarchy().unwrap();
        assert!(validate_tree(&h2, &sizes).is_ok());
        assert_eq!(h2.raw_parents(), h.raw_parents());
        assert_eq!(
            doc.roots_and_orphans,
            vec![
                NodeRef { level: 1, index: 0 },
                NodeRef { level: 1, index: 1 },
                NodeRef { level: 2, index: 2 },
                NodeRef { level: 3, index: 2 }
            ]
        );
    }

    #[test]
    fn inconsistent_children_are_rejected() {
        let h = Hierarchy::from_parents(&[1, 2], vec![vec![Some(0), None]]).unwrap();
        let mut doc = tree_document(&h, &[1, 2], None).unwrap();
        doc.nodes[0].children.push(1);
        assert!(doc.to_hierarchy().is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!("dot".parse::<TreeFormat>().unwrap(), TreeFormat::Dot);
        assert!("svg".parse::<TreeFormat>().is_err());
    }
}
