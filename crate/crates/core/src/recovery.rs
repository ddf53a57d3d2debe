//! Row and column recovery from a relation graph.
//!
//! Groups are extracted by repeated breadth-first search: seed at the
//! top-most (for rows) or left-most (for columns) unassigned cell, follow
//! edges of the matching orientation, remove the visited set, repeat. The
//! result is a partition, so a row-spanning cell joins only the first row
//! that reaches it, and whatever that cell connects to joins with it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{BBox, RelationLabel, RelationMap, Table};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationGraph {
    boxes: BTreeMap<u32, BBox>,
    horizontal: BTreeMap<u32, BTreeSet<u32>>,
    vertical: BTreeMap<u32, BTreeSet<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Rows,
    Columns,
}

impl RelationGraph {
    pub fn new(cells: impl IntoIterator<Item = (u32, BBox)>) -> Self {
        Self {
            boxes: cells.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Ground-truth graph of a table, seen through its operative boxes.
    pub fn from_table(table: &Table) -> Result<Self> {
        Self::from_relations(table, &table.relations)
    }

    pub fn from_relations(table: &Table, relations: &RelationMap) -> Result<Self> {
        let mut g = Self::new(table.cells.iter().map(|c| (c.id, table.operative_box(c))));
        for (&(a, b), &label) in relations {
            g.add_edge(a, b, label)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, a: u32, b: u32, label: RelationLabel) -> Result<()> {
        if !self.boxes.contains_key(&a) || !self.boxes.contains_key(&b) || a == b {
            return Err(Error::InvalidArgument(format!("edge ({a}, {b}) does not join two known cells")));
        }
        let adj = match label {
            RelationLabel::Horizontal => &mut self.horizontal,
            RelationLabel::Vertical => &mut self.vertical,
            RelationLabel::NoConnection => return Ok(()),
        };
        adj.entry(a).or_default().insert(b);
        adj.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn degree(&self, id: u32) -> usize {
        self.horizontal.get(&id).map_or(0, BTreeSet::len) + self.vertical.get(&id).map_or(0, BTreeSet::len)
    }

    fn seed_key(&self, axis: Axis, id: u32) -> (u32, u32, u32) {
        let b = self.boxes[&id];
        match axis {
            Axis::Rows => (b.y1, b.x1, id),
            Axis::Columns => (b.x1, b.y1, id),
        }
    }

    fn order_key(&self, axis: Axis, id: u32) -> (u32, u32, u32) {
        let b = self.boxes[&id];
        match axis {
            Axis::Rows => (b.x1, b.y1, id),
            Axis::Columns => (b.y1, b.x1, id),
        }
    }

    /// One extraction step over `remaining`, returning the visited group.
    fn extract(&self, axis: Axis, remaining: &BTreeSet<u32>) -> BTreeSet<u32> {
        let adj = match axis {
            Axis::Rows => &self.horizontal,
            Axis::Columns => &self.vertical,
        };
        let Some(&seed) = remaining.iter().min_by_key(|&&id| self.seed_key(axis, id)) else {
            return BTreeSet::new();
        };
        let mut seen = BTreeSet::from([seed]);
        let mut queue = VecDeque::from([seed]);
        while let Some(c) = queue.pop_front() {
            for &n in adj.get(&c).into_iter().flatten() {
                if remaining.contains(&n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    fn groups(&self, axis: Axis) -> Vec<Vec<u32>> {
        let mut remaining: BTreeSet<u32> = self.boxes.keys().copied().collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let group = self.extract(axis, &remaining);
            remaining.retain(|id| !group.contains(id));
            let mut ids: Vec<u32> = group.into_iter().collect();
            ids.sort_by_key(|&id| self.order_key(axis, id));
            out.push(ids);
        }
        out
    }
}

/// Cells of the first row: breadth-first search along horizontal edges from
/// the cell with minimum `y1` (ties by `x1`, then id).
pub fn first_row(graph: &RelationGraph) -> Result<BTreeSet<u32>> {
    if graph.is_empty() {
        return Err(Error::NoCells);
    }
    Ok(graph.extract(Axis::Rows, &graph.boxes.keys().copied().collect()))
}

/// Row groups top to bottom, each ordered left to right.
pub fn recover_rows(graph: &RelationGraph) -> Vec<Vec<u32>> {
    graph.groups(Axis::Rows)
}

/// Column groups left to right, each ordered top to bottom.
pub fn recover_columns(graph: &RelationGraph) -> Vec<Vec<u32>> {
    graph.groups(Axis::Columns)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureResult {
    pub rows: Vec<Vec<u32>>,
    pub columns: Vec<Vec<u32>>,
    /// Cells with no edge at all in a graph of two or more cells. They still
    /// appear as singleton rows and columns.
    pub unassigned: Vec<u32>,
}

pub fn recover_structure(graph: &RelationGraph) -> StructureResult {
    let unassigned = if graph.len() > 1 {
        graph.boxes.keys().copied().filter(|&id| graph.degree(id) == 0).collect()
    } else {
        Vec::new()
    };
    StructureResult {
        rows: recover_rows(graph),
        columns: recover_columns(graph),
        unassigned,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMatch {
    pub exact: bool,
    pub row_jaccard: f64,
    pub column_jaccard: f64,
}

impl StructureMatch {
    pub fn mean_jaccard(&self) -> f64 {
        (self.row_jaccard + self.column_jaccard) / 2.0
    }
}

fn universe(groups: &[Vec<u32>]) -> BTreeSet<u32> {
    groups.iter().flatten().copied().collect()
}

/// Greedy max-overlap alignment; unmatched groups score 0 and the mean runs
/// over the larger of the two group counts.
fn aligned_jaccard(pred: &[Vec<u32>], truth: &[Vec<u32>]) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let ps: Vec<BTreeSet<u32>> = pred.iter().map(|g| g.iter().copied().collect()).collect();
    let ts: Vec<BTreeSet<u32>> = truth.iter().map(|g| g.iter().copied().collect()).collect();
    let mut cands = Vec::new();
    for (i, p) in ps.iter().enumerate() {
        for (j, t) in ts.iter().enumerate() {
            let inter = p.intersection(t).count();
            if inter > 0 {
                cands.push((std::cmp::Reverse(inter), i, j));
            }
        }
    }
    cands.sort();
    let (mut used_p, mut used_t) = (vec![false; ps.len()], vec![false; ts.len()]);
    let mut total = 0.0;
    for (std::cmp::Reverse(inter), i, j) in cands {
        if used_p[i] || used_t[j] {
            continue;
        }
        used_p[i] = true;
        used_t[j] = true;
        let union = ps[i].union(&ts[j]).count();
        total += inter as f64 / union as f64;
    }
    total / ps.len().max(ts.len()) as f64
}

pub fn structure_match(predicted: &StructureResult, truth: &StructureResult) -> Result<StructureMatch> {
    let u = universe(&truth.rows);
    if universe(&predicted.rows) != u || universe(&predicted.columns) != u || universe(&truth.columns) != u {
        return Err(Error::UniverseMismatch);
    }
    Ok(StructureMatch {
        exact: predicted.rows == truth.rows && predicted.columns == truth.columns,
        row_jaccard: aligned_jaccard(&predicted.rows, &truth.rows),
        column_jaccard: aligned_jaccard(&predicted.columns, &truth.columns),
    })
}
