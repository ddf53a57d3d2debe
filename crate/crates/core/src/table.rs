//! Tables, cells, boxes and the relation graph between cells.
//!
//! Relations are derived from grid annotations, never read from files. A pair
//! of cells is connected only when the cells are grid-adjacent; label 0 is
//! implicit for every pair absent from [`Table::relations`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive pixel box, origin top-left, `y` growing downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [u32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_degenerate(&self) -> bool {
        self.x2 < self.x1 || self.y2 < self.y1
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1 + 1
    }

    /// Center with doubled coordinates, `(x1 + x2, y1 + y2)`, exact in integers.
    pub fn center2(&self) -> (i64, i64) {
        (
            i64::from(self.x1) + i64::from(self.x2),
            i64::from(self.y1) + i64::from(self.y2),
        )
    }

    pub fn center(&self) -> (f64, f64) {
        let (x, y) = self.center2();
        (x as f64 / 2.0, y as f64 / 2.0)
    }

    /// Tightest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x2 < width && self.y2 < height
    }
}

/// Inclusive grid rectangle `(row_start, row_end, col_start, col_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct GridSpan {
    pub row_start: u32,
    pub row_end: u32,
    pub col_start: u32,
    pub col_end: u32,
}

impl From<[u32; 4]> for GridSpan {
    fn from([row_start, row_end, col_start, col_end]: [u32; 4]) -> Self {
        Self {
            row_start,
            row_end,
            col_start,
            col_end,
        }
    }
}

impl From<GridSpan> for [u32; 4] {
    fn from(g: GridSpan) -> Self {
        [g.row_start, g.row_end, g.col_start, g.col_end]
    }
}

impl GridSpan {
    pub const fn new(row_start: u32, row_end: u32, col_start: u32, col_end: u32) -> Self {
        Self {
            row_start,
            row_end,
            col_start,
            col_end,
        }
    }

    pub const fn single(row: u32, col: u32) -> Self {
        Self::new(row, row, col, col)
    }

    pub fn is_inverted(&self) -> bool {
        self.row_start > self.row_end || self.col_start > self.col_end
    }

    pub fn rows_intersect(&self, other: &GridSpan) -> bool {
        self.row_start <= other.row_end && other.row_start <= self.row_end
    }

    pub fn cols_intersect(&self, other: &GridSpan) -> bool {
        self.col_start <= other.col_end && other.col_start <= self.col_end
    }

    pub fn overlaps(&self, other: &GridSpan) -> bool {
        self.rows_intersect(other) && self.cols_intersect(other)
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        (self.row_start..=self.row_end).contains(&row) && (self.col_start..=self.col_end).contains(&col)
    }

    pub fn is_spanning(&self) -> bool {
        self.row_start != self.row_end || self.col_start != self.col_end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub id: u32,
    pub aligned_box: BBox,
    #[serde(default)]
    pub text_box: Option<BBox>,
    pub grid: GridSpan,
    #[serde(rename = "empty", default)]
    pub is_empty: bool,
}

impl Cell {
    pub fn operative_box(&self, mode: BoxMode) -> BBox {
        match mode {
            BoxMode::Aligned => self.aligned_box,
            BoxMode::TextFocused => self.text_box.unwrap_or(self.aligned_box),
        }
    }
}

/// Cell-pair relation. The discriminants are the class indices the model
/// predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum RelationLabel {
    NoConnection = 0,
    Vertical = 1,
    Horizontal = 2,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 3] = [
        RelationLabel::NoConnection,
        RelationLabel::Vertical,
        RelationLabel::Horizontal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl TryFrom<u8> for RelationLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Self::from_index(v as usize).ok_or_else(|| format!("relation label {v} not in {{0, 1, 2}}"))
    }
}

impl From<RelationLabel> for u8 {
    fn from(l: RelationLabel) -> u8 {
        l as u8
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationLabel::NoConnection => "none",
            RelationLabel::Vertical => "vertical",
            RelationLabel::Horizontal => "horizontal",
        })
    }
}

/// Which box a cell is seen through downstream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    #[default]
    Aligned,
    TextFocused,
}

impl std::str::FromStr for BoxMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aligned" => Ok(Self::Aligned),
            "text_focused" | "text-focused" => Ok(Self::TextFocused),
            other => Err(format!("unknown bbox mode `{other}` (aligned | text_focused)")),
        }
    }
}

impl fmt::Display for BoxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxMode::Aligned => "aligned",
            BoxMode::TextFocused => "text_focused",
        })
    }
}

/// Unordered cell-pair key, smaller id first.
pub fn pair_key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

pub type RelationMap = BTreeMap<(u32, u32), RelationLabel>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    #[serde(rename = "image")]
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub cells: Vec<Cell>,
    #[serde(skip)]
    pub relations: RelationMap,
    #[serde(skip)]
    pub mode: BoxMode,
}

impl Table {
    /// Relation of an unordered pair; absent pairs are `NoConnection`.
    pub fn relation(&self, a: u32, b: u32) -> RelationLabel {
        self.relations
            .get(&pair_key(a, b))
            .copied()
            .unwrap_or(RelationLabel::NoConnection)
    }

    pub fn cell(&self, id: u32) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn operative_box(&self, cell: &Cell) -> BBox {
        cell.operative_box(self.mode)
    }

    pub fn count_label(&self, label: RelationLabel) -> usize {
        self.relations.values().filter(|l| **l == label).count()
    }

    /// Parses an annotation and derives its relations.
    pub fn from_annotation_json(text: &str) -> Result<Self> {
        let table: Table = serde_json::from_str(text)?;
        derive_relations(&table)
    }

    pub fn to_annotation_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_annotation_json(&text)
            .map_err(|e| Error::Annotation(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_annotation_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Adjacency label of two grid rectangles, with every cell opaque.
fn adjacency(a: &GridSpan, b: &GridSpan) -> RelationLabel {
    if a.rows_intersect(b) && (a.col_end + 1 == b.col_start || b.col_end + 1 == a.col_start) {
        RelationLabel::Horizontal
    } else if a.cols_intersect(b) && (a.row_end + 1 == b.row_start || b.row_end + 1 == a.row_start) {
        RelationLabel::Vertical
    } else {
        RelationLabel::NoConnection
    }
}

fn check_overlaps(cells: &[Cell]) -> Result<()> {
    for (i, a) in cells.iter().enumerate() {
        if a.grid.is_inverted() {
            return Err(Error::Annotation(format!("cell {} has an inverted grid span", a.id)));
        }
        for b in &cells[i + 1..] {
            if a.grid.overlaps(&b.grid) {
                return Err(Error::GridOverlap {
                    a: a.id.min(b.id),
                    b: a.id.max(b.id),
                });
            }
        }
    }
    Ok(())
}

/// Labels every grid-adjacent pair: horizontal when the row ranges intersect
/// and the column ranges abut, vertical symmetrically.
pub fn derive_relations(table: &Table) -> Result<Table> {
    check_overlaps(&table.cells)?;
    let mut relations = RelationMap::new();
    for (i, a) in table.cells.iter().enumerate() {
        for b in &table.cells[i + 1..] {
            let label = adjacency(&a.grid, &b.grid);
            if label != RelationLabel::NoConnection {
                relations.insert(pair_key(a.id, b.id), label);
            }
        }
    }
    Ok(Table {
        relations,
        ..table.clone()
    })
}

/// Grid positions owned by removed empty cells, which text-focused relations
/// see through.
struct Transparency {
    cells: Vec<GridSpan>,
}

impl Transparency {
    fn covers(&self, row: u32, col: u32) -> bool {
        self.cells.iter().any(|g| g.contains(row, col))
    }

    /// Whether `a` and `b` become neighbours once empties are removed.
    fn bridged(&self, a: &GridSpan, b: &GridSpan) -> RelationLabel {
        if a.rows_intersect(b) && !a.cols_intersect(b) {
            let (left, right) = if a.col_end < b.col_start { (a, b) } else { (b, a) };
            let rows = left.row_start.max(right.row_start)..=left.row_end.min(right.row_end);
            for r in rows {
                if (left.col_end + 1..right.col_start).all(|c| self.covers(r, c)) {
                    return RelationLabel::Horizontal;
                }
            }
        }
        if a.cols_intersect(b) && !a.rows_intersect(b) {
            let (top, bottom) = if a.row_end < b.row_start { (a, b) } else { (b, a) };
            let cols = top.col_start.max(bottom.col_start)..=top.col_end.min(bottom.col_end);
            for c in cols {
                if (top.row_end + 1..bottom.row_start).all(|r| self.covers(r, c)) {
                    return RelationLabel::Vertical;
                }
            }
        }
        RelationLabel::NoConnection
    }
}

/// Aligned mode keeps the table as is. Text-focused mode drops empty cells,
/// connects cells that face each other across chains of removed empties, and
/// switches every surviving cell to its text box.
pub fn apply_empty_cell_policy(table: &Table, mode: BoxMode) -> Result<Table> {
    match mode {
        BoxMode::Aligned => Ok(table.clone()),
        BoxMode::TextFocused => {
            if let Some(c) = table.cells.iter().find(|c| !c.is_empty && c.text_box.is_none()) {
                return Err(Error::MissingTextBox(c.id));
            }
            check_overlaps(&table.cells)?;
            let transparency = Transparency {
                cells: table.cells.iter().filter(|c| c.is_empty).map(|c| c.grid).collect(),
            };
            let cells: Vec<Cell> = table.cells.iter().filter(|c| !c.is_empty).cloned().collect();
            let kept = |id: &u32| cells.iter().any(|c| c.id == *id);
            // Existing edges among survivors are kept, so a second pass is a no-op.
            let mut relations: RelationMap = table
                .relations
                .iter()
                .filter(|((a, b), _)| kept(a) && kept(b))
                .map(|(k, v)| (*k, *v))
                .collect();
            for (i, a) in cells.iter().enumerate() {
                for b in &cells[i + 1..] {
                    let label = transparency.bridged(&a.grid, &b.grid);
                    if label != RelationLabel::NoConnection {
                        relations.insert(pair_key(a.id, b.id), label);
                    }
                }
            }
            Ok(Table {
                id: table.id.clone(),
                image_path: table.image_path.clone(),
                width: table.width,
                height: table.height,
                cells,
                relations,
                mode: BoxMode::TextFocused,
            })
        }
    }
}

/// A single invariant violation found by [`validate_table`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    DuplicateId { id: u32 },
    DegenerateBox { cell: u32 },
    BoxOutOfImage { cell: u32 },
    TextBoxOutsideAligned { cell: u32 },
    InvertedGrid { cell: u32 },
    GridOverlap { a: u32, b: u32 },
    DanglingRelation { a: u32, b: u32 },
    AsymmetricKey { a: u32, b: u32 },
    SelfRelation { id: u32 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DuplicateId { id } => write!(f, "duplicate cell id {id}"),
            Diagnostic::DegenerateBox { cell } => write!(f, "cell {cell}: degenerate box"),
            Diagnostic::BoxOutOfImage { cell } => write!(f, "cell {cell}: box outside image"),
            Diagnostic::TextBoxOutsideAligned { cell } => {
                write!(f, "cell {cell}: text box not inside aligned box")
            }
            Diagnostic::InvertedGrid { cell } => write!(f, "cell {cell}: inverted grid span"),
            Diagnostic::GridOverlap { a, b } => write!(f, "cells {a} and {b}: grid overlap"),
            Diagnostic::DanglingRelation { a, b } => {
                write!(f, "relation ({a}, {b}) references a missing cell")
            }
            Diagnostic::AsymmetricKey { a, b } => {
                write!(f, "relation key ({a}, {b}) not stored smaller id first")
            }
            Diagnostic::SelfRelation { id } => write!(f, "cell {id} related to itself"),
        }
    }
}

/// Every invariant violation in `table`; empty iff the table is well formed.
pub fn validate_table(table: &Table) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for c in &table.cells {
        if !seen.insert(c.id) {
            out.push(Diagnostic::DuplicateId { id: c.id });
        }
        let boxes = std::iter::once(c.aligned_box).chain(c.text_box);
        let mut degenerate = false;
        for b in boxes.clone() {
            degenerate |= b.is_degenerate();
        }
        if degenerate {
            out.push(Diagnostic::DegenerateBox { cell: c.id });
        }
        if boxes.clone().any(|b| !b.fits_in(table.width, table.height)) {
            out.push(Diagnostic::BoxOutOfImage { cell: c.id });
        }
        if let Some(t) = c.text_box {
            if !c.aligned_box.contains(&t) {
                out.push(Diagnostic::TextBoxOutsideAligned { cell: c.id });
            }
        }
        if c.grid.is_inverted() {
            out.push(Diagnostic::InvertedGrid { cell: c.id });
        }
    }
    for (i, a) in table.cells.iter().enumerate() {
        for b in &table.cells[i + 1..] {
            if !a.grid.is_inverted() && !b.grid.is_inverted() && a.grid.overlaps(&b.grid) {
                out.push(Diagnostic::GridOverlap {
                    a: a.id.min(b.id),
                    b: a.id.max(b.id),
                });
            }
        }
    }
    for &(a, b) in table.relations.keys() {
        if a == b {
            out.push(Diagnostic::SelfRelation { id: a });
        } else if a > b {
            out.push(Diagnostic::AsymmetricKey { a, b });
        }
        if !seen.contains(&a) || !seen.contains(&b) {
            out.push(Diagnostic::DanglingRelation { a, b });
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn cell(id: u32, grid: GridSpan, bbox: BBox) -> Cell {
        Cell {
            id,
            aligned_box: bbox,
            text_box: None,
            grid,
            is_empty: false,
        }
    }

    /// `rows x cols` unit grid with 10-pixel cells, ids row-major.
    pub fn grid_table(rows: u32, cols: u32) -> Table {
        let mut cells = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                let b = BBox::new(c * 10, r * 10, c * 10 + 9, r * 10 + 9);
                let mut cl = cell(id, GridSpan::single(r, c), b);
                cl.text_box = Some(BBox::new(b.x1 + 2, b.y1 + 2, b.x2 - 2, b.y2 - 3));
                cells.push(cl);
            }
        }
        Table {
            id: format!("grid{rows}x{cols}"),
            image_path: String::new(),
            width: cols * 10,
            height: rows * 10,
            cells,
            relations: RelationMap::new(),
            mode: BoxMode::Aligned,
        }
    }

    #[test]
    fn one_by_two_is_horizontal() {
        let t = derive_relations(&grid_table(1, 2)).unwrap();
        assert_eq!(t.relations.len(), 1);
        assert_eq!(t.relation(0, 1), RelationLabel::Horizontal);
        assert_eq!(t.relation(1, 0), RelationLabel::Horizontal);
    }

    #[test]
    fn two_by_one_is_vertical() {
        let t = derive_relations(&grid_table(2, 1)).unwrap();
        assert_eq!(t.relations.len(), 1);
        assert_eq!(t.relation(0, 1), RelationLabel::Vertical);
    }

    #[test]
    fn spanning_header_connects_down_to_both_columns() {
        let mut t = grid_table(2, 2);
        t.cells.retain(|c| c.id >= 2);
        t.cells.push(cell(9, GridSpan::new(0, 0, 0, 1), BBox::new(0, 0, 19, 9)));
        let t = derive_relations(&t).unwrap();
        let expected: RelationMap = [
            ((2, 3), RelationLabel::Horizontal),
            ((2, 9), RelationLabel::Vertical),
            ((3, 9), RelationLabel::Vertical),
        ]
        .into_iter()
        .collect();
        assert_eq!(t.relations, expected);
    }

    #[test]
    fn full_grid_counts_match_closed_form() {
        for (n, m) in [(1, 1), (2, 3), (4, 4), (5, 2)] {
            let t = derive_relations(&grid_table(n, m)).unwrap();
            assert_eq!(t.count_label(RelationLabel::Horizontal), (n * (m - 1)) as usize);
            assert_eq!(t.count_label(RelationLabel::Vertical), (m * (n - 1)) as usize);
        }
    }

    #[test]
    fn overlapping_grids_are_rejected_with_ids() {
        let mut t = grid_table(1, 2);
        t.cells[1].grid = GridSpan::new(0, 0, 0, 1);
        match derive_relations(&t) {
            Err(Error::GridOverlap { a: 0, b: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Mirrors the empty-cell example: row 23 | (24 empty) | 25 and a column
    /// 19 / (empty) / 29.
    fn empty_cell_scenario() -> Table {
        let mut cells = vec![];
        let mut add = |id, r, c, empty| {
            let b = BBox::new(c * 10, r * 10, c * 10 + 9, r * 10 + 9);
            cells.push(Cell {
                id,
                aligned_box: b,
                text_box: if empty { None } else { Some(BBox::new(b.x1 + 1, b.y1 + 1, b.x2 - 1, b.y2 - 1)) },
                grid: GridSpan::single(r, c),
                is_empty: empty,
            });
        };
        add(19, 0, 3, false);
        add(24, 1, 3, true);
        add(29, 2, 3, false);
        add(23, 1, 2, false);
        add(25, 1, 4, false);
        let t = Table {
            id: "fig".into(),
            image_path: String::new(),
            width: 60,
            height: 40,
            cells,
            relations: RelationMap::new(),
            mode: BoxMode::Aligned,
        };
        derive_relations(&t).unwrap()
    }

    #[test]
    fn text_focused_bridges_across_empty_cells() {
        let aligned = empty_cell_scenario();
        assert_eq!(aligned.relation(23, 24), RelationLabel::Horizontal);
        assert_eq!(aligned.relation(23, 25), RelationLabel::NoConnection);
        let t = apply_empty_cell_policy(&aligned, BoxMode::TextFocused).unwrap();
        assert!(t.cell(24).is_none());
        assert_eq!(t.relation(23, 25), RelationLabel::Horizontal);
        assert_eq!(t.relation(19, 29), RelationLabel::Vertical);
        assert_eq!(t.relation(19, 23), RelationLabel::NoConnection);
        assert_eq!(t.relations.len(), 2);
        assert_eq!(t.mode, BoxMode::TextFocused);
    }

    #[test]
    fn bridging_follows_chains_of_empties() {
        let mut t = grid_table(1, 5);
        for c in &mut t.cells[1..4] {
            c.is_empty = true;
            c.text_box = None;
        }
        let t = derive_relations(&t).unwrap();
        let tf = apply_empty_cell_policy(&t, BoxMode::TextFocused).unwrap();
        assert_eq!(tf.cells.len(), 2);
        assert_eq!(tf.relation(0, 4), RelationLabel::Horizontal);
    }

    #[test]
    fn text_focused_without_empties_only_swaps_boxes() {
        let t = derive_relations(&grid_table(3, 3)).unwrap();
        let tf = apply_empty_cell_policy(&t, BoxMode::TextFocused).unwrap();
        assert_eq!(tf.relations, t.relations);
        for (a, b) in t.cells.iter().zip(&tf.cells) {
            assert_eq!(tf.operative_box(b), a.text_box.unwrap());
        }
    }

    #[test]
    fn aligned_policy_is_identity_and_text_policy_idempotent() {
        let t = empty_cell_scenario();
        assert_eq!(apply_empty_cell_policy(&t, BoxMode::Aligned).unwrap(), t);
        let once = apply_empty_cell_policy(&t, BoxMode::TextFocused).unwrap();
        let twice = apply_empty_cell_policy(&once, BoxMode::TextFocused).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn text_focused_requires_text_boxes() {
        let mut t = derive_relations(&grid_table(1, 2)).unwrap();
        t.cells[1].text_box = None;
        assert!(matches!(
            apply_empty_cell_policy(&t, BoxMode::TextFocused),
            Err(Error::MissingTextBox(1))
        ));
    }

    #[test]
    fn validation_diagnostics() {
        let t = derive_relations(&grid_table(2, 2)).unwrap();
        assert!(validate_table(&t).is_empty());

        let mut dangling = t.clone();
        dangling.relations.insert((0, 99), RelationLabel::Vertical);
        assert_eq!(
            validate_table(&dangling),
            vec![Diagnostic::DanglingRelation { a: 0, b: 99 }]
        );

        let mut degenerate = t.clone();
        degenerate.cells[0].aligned_box = BBox::new(5, 0, 3, 9);
        degenerate.cells[0].text_box = None;
        assert_eq!(validate_table(&degenerate), vec![Diagnostic::DegenerateBox { cell: 0 }]);

        let mut asym = t.clone();
        asym.relations.insert((3, 2), RelationLabel::Horizontal);
        assert!(validate_table(&asym).contains(&Diagnostic::AsymmetricKey { a: 3, b: 2 }));

        let mut outside = t;
        outside.cells[3].aligned_box.x2 = 400;
        assert!(validate_table(&outside).contains(&Diagnostic::BoxOutOfImage { cell: 3 }));
    }

    #[test]
    fn annotation_json_shape() {
        let t = derive_relations(&grid_table(1, 2)).unwrap();
        let json: serde_json::Value = serde_json::from_str(&t.to_annotation_json().unwrap()).unwrap();
        assert_eq!(json["cells"][0]["aligned_box"], serde_json::json!([0, 0, 9, 9]));
        assert_eq!(json["cells"][1]["grid"], serde_json::json!([0, 0, 1, 1]));
        assert_eq!(json["cells"][0]["empty"], serde_json::json!(false));
        assert!(json.get("relations").is_none());
        let back = Table::from_annotation_json(&t.to_annotation_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
