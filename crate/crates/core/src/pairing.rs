//! Candidate pair generation by exact k-nearest-neighbour search.
//!
//! Centers are kept in doubled integer coordinates `(x1 + x2, y1 + y2)`, so
//! every distance comparison is exact and ties resolve by cell id alone.

use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{BoxMode, Cell, RelationLabel, Table};

pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub cell_id_a: u32,
    pub cell_id_b: u32,
    pub label: RelationLabel,
    /// Center-to-center distance in pixels.
    pub distance: f64,
}

#[derive(Clone, Copy, Debug)]
struct Point {
    id: u32,
    at: [i64; 2],
}

#[derive(Clone, Debug)]
struct Node {
    point: Point,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Immutable 2-d tree over cell centers.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    nodes: Vec<Node>,
    root: Option<usize>,
}

/// One neighbour, with its squared distance in doubled coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Neighbor {
    pub dist2: i64,
    pub id: u32,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        (self.dist2 as f64).sqrt() / 2.0
    }
}

fn dist2(a: [i64; 2], b: [i64; 2]) -> i64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

pub fn build_spatial_index(cells: &[Cell], mode: BoxMode) -> Result<SpatialIndex> {
    if cells.is_empty() {
        return Err(Error::NoCells);
    }
    let points = cells
        .iter()
        .map(|c| {
            let (x, y) = c.operative_box(mode).center2();
            Point { id: c.id, at: [x, y] }
        })
        .collect();
    Ok(SpatialIndex::from_points(points))
}

impl SpatialIndex {
    fn from_points(mut points: Vec<Point>) -> Self {
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build(&mut points, 0, &mut nodes);
        Self { nodes, root }
    }

    fn build(points: &mut [Point], depth: usize, nodes: &mut Vec<Node>) -> Option<usize> {
        if points.is_empty() {
            return None;
        }
        let axis = depth % 2;
        points.sort_by_key(|p| (p.at[axis], p.id));
        let mid = points.len() / 2;
        let point = points[mid];
        let slot = nodes.len();
        nodes.push(Node {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = points.split_at_mut(mid);
        let left = Self::build(lo, depth + 1, nodes);
        let right = Self::build(&mut rest[1..], depth + 1, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        Some(slot)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The `k` points nearest to `center2` (doubled coordinates), ordered by
    /// `(distance, id)`, skipping `exclude`.
    pub fn knn(&self, center2: (i64, i64), k: usize, exclude: Option<u32>) -> Vec<Neighbor> {
        let q = [center2.0, center2.1];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.knn_visit(self.root, q, k, exclude, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn knn_visit(
        &self,
        node: Option<usize>,
        q: [i64; 2],
        k: usize,
        exclude: Option<u32>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        let Some(i) = node else { return };
        let n = &self.nodes[i];
        if Some(n.point.id) != exclude {
            let cand = Neighbor {
                dist2: dist2(q, n.point.at),
                id: n.point.id,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        let delta = q[n.axis] - n.point.at[n.axis];
        let (near, far) = if delta < 0 { (n.left, n.right) } else { (n.right, n.left) };
        self.knn_visit(near, q, k, exclude, heap);
        // Equal-distance points on the far side may still win on id.
        if heap.len() < k || delta * delta <= heap.peek().unwrap().dist2 {
            self.knn_visit(far, q, k, exclude, heap);
        }
    }

    /// Every point within `radius` pixels of the pixel-space `center`,
    /// inclusive, ordered by `(distance, id)`.
    pub fn within_radius(&self, center: (f64, f64), radius: f64) -> Vec<Neighbor> {
        let q = [center.0 * 2.0, center.1 * 2.0];
        let r2 = (radius * 2.0) * (radius * 2.0);
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.root.into_iter().collect();
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            let dx = q[0] - n.point.at[0] as f64;
            let dy = q[1] - n.point.at[1] as f64;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                out.push(Neighbor {
                    dist2: d2.round() as i64,
                    id: n.point.id,
                });
            }
            let delta = q[n.axis] - n.point.at[n.axis] as f64;
            let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
            stack.extend(near);
            if delta * delta <= r2 {
                stack.extend(far);
            }
        }
        out.sort();
        out
    }
}

/// Union of every cell's `k` nearest neighbours, as unordered pairs sorted by
/// `(a, b)`, labelled from the table's relations.
pub fn generate_pairs(table: &Table, k: usize) -> Result<Vec<PairCandidate>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let index = build_spatial_index(&table.cells, table.mode)?;
    let mut pairs = BTreeSet::new();
    for c in &table.cells {
        let center = table.operative_box(c).center2();
        for n in index.knn(center, k, Some(c.id)) {
            pairs.insert(((c.id.min(n.id), c.id.max(n.id)), n.dist2));
        }
    }
    Ok(pairs
        .into_iter()
        .map(|((a, b), d2)| PairCandidate {
            cell_id_a: a,
            cell_id_b: b,
            label: table.relation(a, b),
            distance: (d2 as f64).sqrt() / 2.0,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::tests::{cell, grid_table};
    use crate::table::{derive_relations, BBox, GridSpan, RelationMap};
    use proptest::prelude::*;

    fn table_of(centers: &[(u32, u32)]) -> Table {
        let cells = centers
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| cell(i as u32, GridSpan::single(0, i as u32), BBox::new(x, y, x, y)))
            .collect();
        Table {
            id: "t".into(),
            image_path: String::new(),
            width: 1000,
            height: 1000,
            cells,
            relations: RelationMap::new(),
            mode: BoxMode::Aligned,
        }
    }

    fn brute_force(table: &Table, k: usize) -> Vec<(u32, u32)> {
        let mut out = BTreeSet::new();
        for a in &table.cells {
            let (ax, ay) = a.aligned_box.center();
            let mut others: Vec<(f64, u32)> = table
                .cells
                .iter()
                .filter(|b| b.id != a.id)
                .map(|b| {
                    let (bx, by) = b.aligned_box.center();
                    ((ax - bx).powi(2) + (ay - by).powi(2), b.id)
                })
                .collect();
            others.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for &(_, b) in others.iter().take(k) {
                out.insert((a.id.min(b), a.id.max(b)));
            }
        }
        out.into_iter().collect()
    }

    #[test]
    fn single_cell_has_no_neighbours() {
        let t = table_of(&[(5, 5)]);
        let index = build_spatial_index(&t.cells, BoxMode::Aligned).unwrap();
        assert_eq!(index.len(), 1);
        assert!(index.knn((10, 10), 3, Some(0)).is_empty());
        assert!(generate_pairs(&t, 20).unwrap().is_empty());
    }

    #[test]
    fn empty_cell_list_is_rejected() {
        assert!(matches!(build_spatial_index(&[], BoxMode::Aligned), Err(Error::NoCells)));
    }

    #[test]
    fn radius_query_on_collinear_centers() {
        let t = table_of(&[(0, 0), (10, 0), (20, 0)]);
        let index = build_spatial_index(&t.cells, BoxMode::Aligned).unwrap();
        let ids: Vec<u32> = index.within_radius((10.0, 0.0), 10.0).iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![1, 0, 2]);
        let ids: Vec<u32> = index.within_radius((10.0, 0.0), 9.5).iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn duplicate_centers_tie_to_lower_id() {
        let t = table_of(&[(7, 7), (7, 7), (7, 7), (0, 0)]);
        let index = build_spatial_index(&t.cells, BoxMode::Aligned).unwrap();
        assert_eq!(index.len(), 4);
        let n = index.knn((14, 14), 2, None);
        assert_eq!(n.iter().map(|n| n.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn k_one_on_a_line_unions_directed_lists() {
        let t = table_of(&[(0, 0), (10, 0), (20, 0)]);
        let pairs: Vec<_> = generate_pairs(&t, 1)
            .unwrap()
            .iter()
            .map(|p| (p.cell_id_a, p.cell_id_b))
            .collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn large_k_gives_complete_graph_with_labels() {
        let t = derive_relations(&grid_table(1, 3)).unwrap();
        let pairs = generate_pairs(&t, DEFAULT_K).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].label, RelationLabel::Horizontal);
        assert_eq!(pairs[1].label, RelationLabel::NoConnection);
        assert!((pairs[1].distance - 20.0).abs() < 1e-12);
        assert!(matches!(generate_pairs(&t, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn text_focused_tables_use_text_box_centers() {
        let mut t = table_of(&[(0, 0), (100, 0)]);
        t.cells[0].aligned_box = BBox::new(0, 0, 100, 0);
        t.cells[0].text_box = Some(BBox::new(0, 0, 0, 0));
        t.mode = BoxMode::TextFocused;
        assert!((generate_pairs(&t, 1).unwrap()[0].distance - 100.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            centers in prop::collection::vec((0u32..30, 0u32..30), 1..40),
            k in 1usize..8,
        ) {
            let t = table_of(&centers);
            let got: Vec<_> = generate_pairs(&t, k).unwrap().iter().map(|p| (p.cell_id_a, p.cell_id_b)).collect();
            let m = centers.len();
            prop_assert!(got.len() <= m * k && got.len() <= m * (m - 1) / 2);
            prop_assert_eq!(got, brute_force(&t, k));
        }
    }
}
