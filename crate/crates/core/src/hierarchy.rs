//! Multi-level label hierarchy.
//!
//! Level 1 holds the leaf classes (ids `0..k`, matching dataset label
//! columns); level `M` holds the coarsest groups. Every node below the top
//! level points at one or more parents exactly one level up, so the structure
//! is a layered DAG.
//!
//! Parent logits are aggregated recursively from child logits. For a pure
//! tree this is the sum of descendant-leaf logits; when a leaf reaches an
//! ancestor along several paths it contributes once per path.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyNode {
    pub id: usize,
    pub name: String,
    pub level: usize,
    #[serde(default)]
    pub parents: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyFile {
    levels: usize,
    nodes: Vec<HierarchyNode>,
}

#[derive(Debug, Clone)]
pub struct HierarchyTree {
    levels: usize,
    leaf_count: usize,
    /// Nodes ordered by (level, id).
    nodes: Vec<HierarchyNode>,
    position: HashMap<usize, usize>,
    /// Node ids per level, ascending; index 0 is level 1.
    level_ids: Vec<Vec<usize>>,
    children: HashMap<usize, Vec<usize>>,
    ancestors: AncestorMap,
    /// Per level (index 0 is level 1): rows are nodes of that level, columns
    /// are leaves, entries count the distinct downward paths node -> leaf.
    aggregation: Vec<Array2<f64>>,
}

/// Descendant leaf sets for every node above level 1.
#[derive(Debug, Clone, Default)]
pub struct AncestorMap {
    descendants: HashMap<usize, BTreeSet<usize>>,
}

impl AncestorMap {
    pub fn get(&self, node_id: usize) -> Option<&BTreeSet<usize>> {
        self.descendants.get(&node_id)
    }

    pub fn len(&self) -> usize {
        self.descendants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descendants.is_empty()
    }
}

/// Parses the JSON hierarchy format `{"levels": M, "nodes": [...]}`.
pub fn parse_hierarchy(text: &str) -> Result<HierarchyTree> {
    let file: HierarchyFile =
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    HierarchyTree::from_nodes(file.levels, file.nodes)
}

impl HierarchyTree {
    pub fn from_nodes(levels: usize, nodes: Vec<HierarchyNode>) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Malformed("levels must be >= 1".into()));
        }
        let mut position = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if position.insert(node.id, i).is_some() {
                return Err(Error::DuplicateId(node.id as i64));
            }
        }
        for node in &nodes {
            for &p in &node.parents {
                if !position.contains_key(&p) {
                    return Err(Error::InvalidNode {
                        id: node.id as i64,
                        reason: format!("parent {p} does not exist"),
                    });
                }
            }
        }
        detect_cycle(&nodes, &position)?;

        for node in &nodes {
            if node.level == 0 || node.level > levels {
                return Err(Error::InvalidNode {
                    id: node.id as i64,
                    reason: format!("level {} outside 1..={levels}", node.level),
                });
            }
            for &p in &node.parents {
                let parent_level = nodes[position[&p]].level;
                if parent_level != node.level + 1 {
                    return Err(Error::InvalidNode {
                        id: node.id as i64,
                        reason: format!(
                            "parent {p} is at level {parent_level}, expected {}",
                            node.level + 1
                        ),
                    });
                }
            }
            if node.level == levels && !node.parents.is_empty() {
                return Err(Error::InvalidNode {
                    id: node.id as i64,
                    reason: "top-level node cannot have parents".into(),
                });
            }
            if node.level < levels && node.parents.is_empty() {
                if node.level == 1 {
                    return Err(Error::OrphanLeaf(node.id as i64));
                }
                return Err(Error::InvalidNode {
                    id: node.id as i64,
                    reason: "missing parent".into(),
                });
            }
        }

        let mut level_ids: Vec<Vec<usize>> = vec![Vec::new(); levels];
        for node in &nodes {
            level_ids[node.level - 1].push(node.id);
        }
        for ids in &mut level_ids {
            ids.sort_unstable();
        }
        let leaf_count = level_ids[0].len();
        if leaf_count < 1 {
            return Err(Error::Malformed("no level-1 nodes".into()));
        }
        if let Some((pos, &id)) = level_ids[0]
            .iter()
            .enumerate()
            .find(|(pos, &id)| *pos != id)
        {
            return Err(Error::InvalidNode {
                id: id as i64,
                reason: format!("leaf ids must be 0..{leaf_count}, found {id} at rank {pos}"),
            });
        }
        for (m, ids) in level_ids.iter().enumerate().skip(1) {
            if ids.is_empty() {
                return Err(Error::Malformed(format!("level {} has no nodes", m + 1)));
            }
        }

        let mut sorted = nodes;
        for node in &mut sorted {
            node.parents.sort_unstable();
            node.parents.dedup();
        }
        sorted.sort_by_key(|n| (n.level, n.id));
        let position: HashMap<usize, usize> =
            sorted.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
        for node in &sorted {
            for &p in &node.parents {
                children.entry(p).or_default().push(node.id);
            }
        }
        for list in children.values_mut() {
            list.sort_unstable();
        }

        // Build aggregation matrices bottom-up: level m+1 rows are sums of
        // their level-m children's rows.
        let mut aggregation = Vec::with_capacity(levels);
        aggregation.push(Array2::<f64>::eye(leaf_count));
        for m in 1..levels {
            let below = &level_ids[m - 1];
            let below_rank: HashMap<usize, usize> =
                below.iter().enumerate().map(|(r, &id)| (id, r)).collect();
            let mut mat = Array2::<f64>::zeros((level_ids[m].len(), leaf_count));
            for (row, id) in level_ids[m].iter().enumerate() {
                for child in children.get(id).map(Vec::as_slice).unwrap_or(&[]) {
                    let child_row = aggregation[m - 1].row(below_rank[child]).to_owned();
                    let mut target = mat.row_mut(row);
                    target += &child_row;
                }
            }
            aggregation.push(mat);
        }

        let mut descendants = HashMap::new();
        for (m, ids) in level_ids.iter().enumerate().skip(1) {
            for (row, &id) in ids.iter().enumerate() {
                let set: BTreeSet<usize> = aggregation[m]
                    .row(row)
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(leaf, _)| leaf)
                    .collect();
                descendants.insert(id, set);
            }
        }

        let tree = HierarchyTree {
            levels,
            leaf_count,
            nodes: sorted,
            position,
            level_ids,
            children,
            ancestors: AncestorMap { descendants },
            aggregation,
        };
        tree.check_coverage()?;
        Ok(tree)
    }

    fn check_coverage(&self) -> Result<()> {
        if self.levels == 1 {
            return Ok(());
        }
        let mut covered = vec![false; self.leaf_count];
        for &top in &self.level_ids[self.levels - 1] {
            for &leaf in &self.ancestors.descendants[&top] {
                covered[leaf] = true;
            }
        }
        match covered.iter().position(|c| !c) {
            Some(leaf) => Err(Error::OrphanLeaf(leaf as i64)),
            None => Ok(()),
        }
    }

    /// Builds a hierarchy whose level-`m+1` groups interleave level-`m`
    /// nodes: node at rank `r` joins group `r % groups[m]`. With leaves
    /// sorted by frequency this mixes head and tail classes under each parent.
    pub fn interleaved(leaf_count: usize, groups: &[usize]) -> Result<Self> {
        Self::grouped(leaf_count, groups, |rank, count, _| rank % count)
    }

    /// Builds a hierarchy of contiguous blocks: node at rank `r` out of `n`
    /// joins group `r * groups[m] / n`, so neighbours in frequency order
    /// share a parent.
    pub fn blocked(leaf_count: usize, groups: &[usize]) -> Result<Self> {
        Self::grouped(leaf_count, groups, |rank, count, n| rank * count / n)
    }

    fn grouped(leaf_count: usize, groups: &[usize], assign: impl Fn(usize, usize, usize) -> usize) -> Result<Self> {
        let levels = groups.len() + 1;
        let mut nodes = Vec::new();
        let mut below: Vec<usize> = (0..leaf_count).collect();
        let mut next_id = leaf_count;
        let mut pending: Vec<HierarchyNode> = (0..leaf_count)
            .map(|id| HierarchyNode {
                id,
                name: format!("class-{id}"),
                level: 1,
                parents: Vec::new(),
            })
            .collect();
        for (depth, &count) in groups.iter().enumerate() {
            if count == 0 || count > below.len() {
                return Err(Error::Config(format!(
                    "level {} group count {count} must be in 1..={}",
                    depth + 2,
                    below.len()
                )));
            }
            let ids: Vec<usize> = (next_id..next_id + count).collect();
            next_id += count;
            let n = pending.len();
            for (rank, node) in pending.iter_mut().enumerate() {
                node.parents = vec![ids[assign(rank, count, n)]];
            }
            nodes.append(&mut pending);
            pending = ids
                .iter()
                .enumerate()
                .map(|(g, &id)| HierarchyNode {
                    id,
                    name: format!("level{}-group-{g}", depth + 2),
                    level: depth + 2,
                    parents: Vec::new(),
                })
                .collect();
            below = ids;
        }
        nodes.append(&mut pending);
        HierarchyTree::from_nodes(levels, nodes)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn nodes(&self) -> &[HierarchyNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&HierarchyNode> {
        self.position
            .get(&id)
            .map(|&i| &self.nodes[i])
            .ok_or(Error::UnknownNode(id as i64))
    }

    /// Node ids at `level` (1-based), ascending.
    pub fn level_ids(&self, level: usize) -> &[usize] {
        &self.level_ids[level - 1]
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.level_ids[level - 1].len()
    }

    pub fn children(&self, id: usize) -> &[usize] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ancestor_map(&self) -> &AncestorMap {
        &self.ancestors
    }

    /// Path-count matrix for `level` (rows: nodes at that level, columns: leaves).
    pub fn aggregation(&self, level: usize) -> &Array2<f64> {
        &self.aggregation[level - 1]
    }

    pub fn descendant_leaves(&self, node_id: usize) -> Result<BTreeSet<usize>> {
        let node = self.node(node_id)?;
        if node.level == 1 {
            return Ok(BTreeSet::from([node_id]));
        }
        Ok(self.ancestors.descendants[&node_id].clone())
    }

    /// Level labels for levels `2..=M`; a parent is positive iff any of its
    /// descendant leaves is positive.
    pub fn derive_level_labels(&self, leaf_labels: &[u8]) -> Result<Vec<Vec<u8>>> {
        if leaf_labels.len() != self.leaf_count {
            return Err(Error::Shape(format!(
                "leaf label vector has length {}, hierarchy has {} leaves",
                leaf_labels.len(),
                self.leaf_count
            )));
        }
        Ok((2..=self.levels)
            .map(|level| {
                self.level_ids(level)
                    .iter()
                    .map(|id| {
                        let any = self.ancestors.descendants[id]
                            .iter()
                            .any(|&leaf| leaf_labels[leaf] != 0);
                        u8::from(any)
                    })
                    .collect()
            })
            .collect())
    }

    /// Batched form of [`derive_level_labels`](Self::derive_level_labels):
    /// returns one `batch x width(level)` matrix per level `2..=M`.
    pub fn derive_level_label_matrices(&self, labels: ArrayView2<'_, u8>) -> Result<Vec<Array2<u8>>> {
        if labels.ncols() != self.leaf_count {
            return Err(Error::Shape(format!(
                "label matrix has {} columns, hierarchy has {} leaves",
                labels.ncols(),
                self.leaf_count
            )));
        }
        Ok((2..=self.levels)
            .map(|level| {
                let agg = self.aggregation(level);
                let mut out = Array2::<u8>::zeros((labels.nrows(), agg.nrows()));
                for (i, row) in labels.rows().into_iter().enumerate() {
                    for (node, weights) in agg.rows().into_iter().enumerate() {
                        let any = row
                            .iter()
                            .zip(weights.iter())
                            .any(|(&y, &w)| y != 0 && w > 0.0);
                        out[[i, node]] = u8::from(any);
                    }
                }
                out
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        let file = HierarchyFile {
            levels: self.levels,
            nodes: self.nodes.clone(),
        };
        serde_json::to_string_pretty(&file).expect("hierarchy serializes")
    }
}

fn detect_cycle(nodes: &[HierarchyNode], position: &HashMap<usize, usize>) -> Result<()> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut marks = vec![Mark::New; nodes.len()];
    for start in 0..nodes.len() {
        if marks[start] != Mark::New {
            continue;
        }
        // Iterative DFS over parent edges.
        let mut stack = vec![(start, 0usize)];
        marks[start] = Mark::Active;
        while let Some(&mut (idx, ref mut next)) = stack.last_mut() {
            if let Some(&parent) = nodes[idx].parents.get(*next) {
                *next += 1;
                let p = position[&parent];
                match marks[p] {
                    Mark::Active => return Err(Error::Cycle(parent as i64)),
                    Mark::New => {
                        marks[p] = Mark::Active;
                        stack.push((p, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                marks[idx] = Mark::Done;
                stack.pop();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 8 leaves, 4 mid nodes (two leaves each), 2 top nodes (two mids each).
    pub(crate) const EIGHT_LEAF: &str = r#"{
        "levels": 3,
        "nodes": [
            {"id": 0, "name": "a", "level": 1, "parents": [8]},
            {"id": 1, "name": "b", "level": 1, "parents": [8]},
            {"id": 2, "name": "c", "level": 1, "parents": [9]},
            {"id": 3, "name": "d", "level": 1, "parents": [9]},
            {"id": 4, "name": "e", "level": 1, "parents": [10]},
            {"id": 5, "name": "f", "level": 1, "parents": [10]},
            {"id": 6, "name": "g", "level": 1, "parents": [11]},
            {"id": 7, "name": "h", "level": 1, "parents": [11]},
            {"id": 8, "name": "ab", "level": 2, "parents": [12]},
            {"id": 9, "name": "cd", "level": 2, "parents": [12]},
            {"id": 10, "name": "ef", "level": 2, "parents": [13]},
            {"id": 11, "name": "gh", "level": 2, "parents": [13]},
            {"id": 12, "name": "left", "level": 3, "parents": []},
            {"id": 13, "name": "right", "level": 3, "parents": []}
        ]
    }"#;

    fn tiny() -> HierarchyTree {
        parse_hierarchy(
            r#"{"levels": 2, "nodes": [
                {"id": 0, "name": "A", "level": 1, "parents": [2]},
                {"id": 1, "name": "B", "level": 1, "parents": [2]},
                {"id": 2, "name": "P", "level": 2, "parents": []}
            ]}"#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_two_level_tree() {
        let tree = tiny();
        assert_eq!(tree.levels(), 2);
        assert_eq!(tree.leaf_count(), 2);
        assert_eq!(tree.descendant_leaves(2).unwrap(), BTreeSet::from([0, 1]));
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let err = parse_hierarchy(
            r#"{"levels": 2, "nodes": [
                {"id": 0, "name": "A", "level": 1, "parents": [0]},
                {"id": 1, "name": "P", "level": 2, "parents": []}
            ]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Cycle(0)), "{err}");
    }

    #[test]
    fn eight_leaf_fixture_counts() {
        let tree = parse_hierarchy(EIGHT_LEAF).unwrap();
        assert_eq!(tree.levels(), 3);
        assert_eq!(tree.leaf_count(), 8);
        assert_eq!(tree.level_width(2), 4);
        assert_eq!(tree.level_width(3), 2);
        assert_eq!(tree.descendant_leaves(12).unwrap(), BTreeSet::from([0, 1, 2, 3]));
        assert_eq!(tree.descendant_leaves(13).unwrap(), BTreeSet::from([4, 5, 6, 7]));
        assert_eq!(tree.descendant_leaves(3).unwrap(), BTreeSet::from([3]));
    }

    #[test]
    fn rejects_structural_errors() {
        let dup = r#"{"levels": 2, "nodes": [
            {"id": 0, "name": "A", "level": 1, "parents": [1]},
            {"id": 0, "name": "B", "level": 1, "parents": [1]},
            {"id": 1, "name": "P", "level": 2}
        ]}"#;
        assert!(matches!(parse_hierarchy(dup), Err(Error::DuplicateId(0))));

        let wrong_level = r#"{"levels": 3, "nodes": [
            {"id": 0, "name": "A", "level": 1, "parents": [2]},
            {"id": 1, "name": "M", "level": 2, "parents": [2]},
            {"id": 2, "name": "T", "level": 3}
        ]}"#;
        assert!(matches!(
            parse_hierarchy(wrong_level),
            Err(Error::InvalidNode { id: 0, .. })
        ));

        let orphan = r#"{"levels": 2, "nodes": [
            {"id": 0, "name": "A", "level": 1, "parents": [2]},
            {"id": 1, "name": "B", "level": 1, "parents": []},
            {"id": 2, "name": "P", "level": 2}
        ]}"#;
        assert!(matches!(parse_hierarchy(orphan), Err(Error::OrphanLeaf(1))));

        let two_cycle = r#"{"levels": 2, "nodes": [
            {"id": 0, "name": "A", "level": 1, "parents": [1]},
            {"id": 1, "name": "P", "level": 2, "parents": [0]}
        ]}"#;
        assert!(matches!(parse_hierarchy(two_cycle), Err(Error::Cycle(_))));

        assert!(matches!(parse_hierarchy("{\"levels\": 2"), Err(Error::Malformed(_))));
        assert!(matches!(
            parse_hierarchy(r#"{"levels": 2, "nodes": [], "extra": 1}"#),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn unknown_node_query() {
        assert!(matches!(tiny().descendant_leaves(99), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn diamond_leaf_belongs_to_both_parents() {
        let tree = parse_hierarchy(
            r#"{"levels": 3, "nodes": [
                {"id": 0, "name": "X", "level": 1, "parents": [2, 3]},
                {"id": 1, "name": "Y", "level": 1, "parents": [3]},
                {"id": 2, "name": "P1", "level": 2, "parents": [4]},
                {"id": 3, "name": "P2", "level": 2, "parents": [4]},
                {"id": 4, "name": "R", "level": 3}
            ]}"#,
        )
        .unwrap();
        assert!(tree.descendant_leaves(2).unwrap().contains(&0));
        assert!(tree.descendant_leaves(3).unwrap().contains(&0));
        // X reaches R through two paths.
        assert_eq!(tree.aggregation(3).row(0).to_vec(), vec![2.0, 1.0]);
        let labels = tree.derive_level_labels(&[1, 0]).unwrap();
        assert_eq!(labels, vec![vec![1, 1], vec![1]]);
    }

    #[test]
    fn derived_labels() {
        let tree = parse_hierarchy(EIGHT_LEAF).unwrap();
        assert_eq!(
            tree.derive_level_labels(&[0; 8]).unwrap(),
            vec![vec![0; 4], vec![0; 2]]
        );
        assert_eq!(
            tree.derive_level_labels(&[1, 0, 0, 0, 0, 0, 0, 0]).unwrap(),
            vec![vec![1, 0, 0, 0], vec![1, 0]]
        );
        // Leaves under distinct mids that share the left top node.
        assert_eq!(
            tree.derive_level_labels(&[0, 1, 1, 0, 0, 0, 0, 0]).unwrap(),
            vec![vec![1, 1, 0, 0], vec![1, 0]]
        );
        assert!(matches!(tree.derive_level_labels(&[1, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn stable_under_node_reordering() {
        let mut file: HierarchyFile = serde_json::from_str(EIGHT_LEAF).unwrap();
        file.nodes.reverse();
        let reordered = HierarchyTree::from_nodes(file.levels, file.nodes).unwrap();
        let original = parse_hierarchy(EIGHT_LEAF).unwrap();
        for id in 0..14 {
            assert_eq!(
                original.descendant_leaves(id).unwrap(),
                reordered.descendant_leaves(id).unwrap()
            );
        }
        assert_eq!(original.to_json(), reordered.to_json());
    }

    #[test]
    fn interleaved_mixes_ranks() {
        let tree = HierarchyTree::interleaved(24, &[8, 4]).unwrap();
        assert_eq!(tree.levels(), 3);
        assert_eq!(tree.level_width(2), 8);
        assert_eq!(tree.level_width(3), 4);
        assert_eq!(tree.descendant_leaves(24).unwrap(), BTreeSet::from([0, 8, 16]));
        let back = parse_hierarchy(&tree.to_json()).unwrap();
        assert_eq!(back.to_json(), tree.to_json());
    }

    #[test]
    fn blocked_groups_neighbours() {
        let tree = HierarchyTree::blocked(24, &[8, 4]).unwrap();
        assert_eq!(tree.descendant_leaves(24).unwrap(), BTreeSet::from([0, 1, 2]));
        assert_eq!(tree.descendant_leaves(35).unwrap(), (18..24).collect::<BTreeSet<_>>());
        let uneven = HierarchyTree::blocked(5, &[2]).unwrap();
        assert_eq!(uneven.descendant_leaves(5).unwrap(), BTreeSet::from([0, 1, 2]));
        assert!(HierarchyTree::blocked(4, &[5]).is_err());
    }
}
