//! Seeded synthetic tables: grid layout, spans, empties, borders and
//! rectangular glyph blobs standing in for text.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, BACKGROUND};
use crate::table::{derive_relations, BBox, BoxMode, Cell, GridSpan, RelationMap, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderStyle {
    /// Every cell outlined.
    Full,
    /// Top and bottom rules plus a rule under the first row.
    Partial,
    None,
}

/// Visual style knobs shared by every table of a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    pub id: String,
    pub border: BorderStyle,
    /// Border line thickness range in pixels.
    pub line_thickness: (u32, u32),
    /// Space between the box edge and the text, in pixels.
    pub padding: (u32, u32),
    /// Height of a text line.
    pub glyph_height: (u32, u32),
    /// Width of a single glyph.
    pub glyph_width: (u32, u32),
    /// Darkest and lightest glyph intensity.
    pub ink_range: (u8, u8),
    pub line_ink: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub rows: (u32, u32),
    pub cols: (u32, u32),
    pub span_prob: f64,
    pub empty_prob: f64,
    pub cell_width: (u32, u32),
    pub cell_height: (u32, u32),
    /// Fraction of a cell's inner width that text tends to fill.
    pub ink_density: (f64, f64),
    pub margin: u32,
    pub max_retries: usize,
    pub style: StyleProfile,
}

impl GenParams {
    /// Profile A: dense, fully bordered tables.
    pub fn profile_a(seed: u64) -> Self {
        Self {
            seed,
            rows: (3, 8),
            cols: (2, 6),
            span_prob: 0.12,
            empty_prob: 0.1,
            cell_width: (36, 90),
            cell_height: (18, 30),
            ink_density: (0.3, 0.85),
            margin: 6,
            max_retries: 16,
            style: StyleProfile {
                id: "A".into(),
                border: BorderStyle::Full,
                line_thickness: (1, 2),
                padding: (2, 5),
                glyph_height: (6, 9),
                glyph_width: (3, 6),
                ink_range: (0, 70),
                line_ink: 20,
            },
        }
    }

    /// Profile B: sparse tables with only horizontal rules, or none.
    pub fn profile_b(seed: u64) -> Self {
        Self {
            seed,
            rows: (3, 9),
            cols: (2, 5),
            span_prob: 0.08,
            empty_prob: 0.15,
            cell_width: (44, 110),
            cell_height: (16, 26),
            ink_density: (0.2, 0.6),
            margin: 10,
            max_retries: 16,
            style: StyleProfile {
                id: "B".into(),
                border: BorderStyle::Partial,
                line_thickness: (1, 1),
                padding: (4, 10),
                glyph_height: (5, 8),
                glyph_width: (2, 5),
                ink_range: (30, 110),
                line_ink: 60,
            },
        }
    }

    pub fn profile(name: &str, seed: u64) -> Result<Self> {
        match name {
            "A" | "a" => Ok(Self::profile_a(seed)),
            "B" | "b" => Ok(Self::profile_b(seed)),
            other => Err(Error::InvalidArgument(format!("unknown style profile `{other}` (A | B)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rows", self.rows),
            ("cols", self.cols),
            ("cell_width", self.cell_width),
            ("cell_height", self.cell_height),
            ("line_thickness", self.style.line_thickness),
            ("padding", self.style.padding),
            ("glyph_height", self.style.glyph_height),
            ("glyph_width", self.style.glyph_width),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("{name}: empty range {lo}..={hi}")));
            }
        }
        if self.rows.0 == 0 || self.cols.0 == 0 {
            return Err(Error::InvalidArgument("rows and cols must be at least 1".into()));
        }
        if self.style.glyph_height.0 == 0 || self.style.glyph_width.0 == 0 {
            return Err(Error::InvalidArgument("glyph sizes must be at least 1".into()));
        }
        for (name, p) in [("span_prob", self.span_prob), ("empty_prob", self.empty_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.ink_density;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("ink_density ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if self.style.ink_range.0 > self.style.ink_range.1 || self.style.ink_range.1 >= BACKGROUND {
            return Err(Error::InvalidArgument("ink_range must be ordered and darker than paper".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.gen_range(lo..=hi)
}

/// Grid rectangles with spans, row-major by top-left corner.
fn sample_spans(rng: &mut ChaCha8Rng, rows: u32, cols: u32, span_prob: f64) -> Vec<GridSpan> {
    let mut taken = vec![false; (rows * cols) as usize];
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if taken[(r * cols + c) as usize] {
                continue;
            }
            let mut span = GridSpan::single(r, c);
            if span_prob > 0.0 && rng.gen_bool(span_prob) {
                let len = rng.gen_range(2..=3u32);
                let candidate = if rng.gen_bool(0.5) {
                    GridSpan::new(r, r, c, (c + len - 1).min(cols - 1))
                } else {
                    GridSpan::new(r, (r + len - 1).min(rows - 1), c, c)
                };
                let free = (candidate.row_start..=candidate.row_end)
                    .all(|rr| (candidate.col_start..=candidate.col_end).all(|cc| !taken[(rr * cols + cc) as usize]));
                if free {
                    span = candidate;
                }
            }
            for rr in span.row_start..=span.row_end {
                for cc in span.col_start..=span.col_end {
                    taken[(rr * cols + cc) as usize] = true;
                }
            }
            out.push(span);
        }
    }
    out
}

struct Layout {
    /// Left edge of each grid column line, plus the closing line.
    xs: Vec<u32>,
    ys: Vec<u32>,
    thickness: u32,
    width: u32,
    height: u32,
}

impl Layout {
    /// Aligned box: from the leading grid line through the closing one.
    fn aligned(&self, g: &GridSpan) -> BBox {
        BBox::new(
            self.xs[g.col_start as usize],
            self.ys[g.row_start as usize],
            self.xs[g.col_end as usize + 1] + self.thickness - 1,
            self.ys[g.row_end as usize + 1] + self.thickness - 1,
        )
    }
}

/// Draws a cell's text as lines of glyph rectangles inside `area`, returning
/// the tight box of the ink.
fn draw_text(
    rng: &mut ChaCha8Rng,
    image: &mut GrayImage,
    area: BBox,
    params: &GenParams,
    align_right: bool,
) -> Option<BBox> {
    let style = &params.style;
    let gh = sample(rng, style.glyph_height).min(area.height());
    let line_gap = 2;
    let max_lines = ((area.height() + line_gap) / (gh + line_gap)).max(1);
    let lines = if max_lines > 1 && rng.gen_bool(0.25) { 2 } else { 1 };
    let density = rng.gen_range(params.ink_density.0..=params.ink_density.1);
    let mut text: Option<BBox> = None;
    for line in 0..lines {
        let target = ((area.width() as f64 * density).round() as u32).clamp(1, area.width());
        let mut glyphs = Vec::new();
        let mut used = 0;
        while used < target {
            let w = sample(rng, style.glyph_width).min(target - used);
            glyphs.push((used, w));
            used += w;
            // Glyph gap, occasionally a word gap.
            used += if rng.gen_bool(0.2) { 3 } else { 1 };
        }
        let run = glyphs.last().map_or(0, |&(x, w)| x + w);
        let x0 = if align_right { area.x2 + 1 - run } else { area.x1 };
        let y0 = area.y1 + line * (gh + line_gap);
        for (x, w) in glyphs {
            let top = y0 + if gh > 3 { rng.gen_range(0..=1) } else { 0 };
            let b = BBox::new(x0 + x, top, x0 + x + w - 1, (y0 + gh - 1).min(area.y2));
            let ink = rng.gen_range(style.ink_range.0..=style.ink_range.1);
            image.fill_rect(b, ink);
            text = Some(text.map_or(b, |t| t.union(&b)));
        }
    }
    text
}

fn draw_borders(image: &mut GrayImage, layout: &Layout, spans: &[GridSpan], style: &StyleProfile) {
    let t = layout.thickness;
    let hline = |img: &mut GrayImage, y: u32, x1: u32, x2: u32| img.fill_rect(BBox::new(x1, y, x2, y + t - 1), style.line_ink);
    let vline = |img: &mut GrayImage, x: u32, y1: u32, y2: u32| img.fill_rect(BBox::new(x, y1, x + t - 1, y2), style.line_ink);
    match style.border {
        BorderStyle::Full => {
            for g in spans {
                let b = layout.aligned(g);
                hline(image, b.y1, b.x1, b.x2);
                hline(image, b.y2 + 1 - t, b.x1, b.x2);
                vline(image, b.x1, b.y1, b.y2);
                vline(image, b.x2 + 1 - t, b.y1, b.y2);
            }
        }
        BorderStyle::Partial => {
            let x1 = layout.xs[0];
            let x2 = *layout.xs.last().unwrap() + t - 1;
            hline(image, layout.ys[0], x1, x2);
            hline(image, *layout.ys.last().unwrap(), x1, x2);
            if layout.ys.len() > 2 {
                hline(image, layout.ys[1], x1, x2);
            }
        }
        BorderStyle::None => {}
    }
}

fn attempt(rng: &mut ChaCha8Rng, params: &GenParams, id: &str) -> std::result::Result<(Table, GrayImage), String> {
    let style = &params.style;
    let rows = sample(rng, params.rows);
    let cols = sample(rng, params.cols);
    let thickness = if style.border == BorderStyle::None { 1 } else { sample(rng, style.line_thickness) };
    let mut xs = vec![params.margin];
    for _ in 0..cols {
        let w = sample(rng, params.cell_width);
        xs.push(xs.last().unwrap() + w);
    }
    let mut ys = vec![params.margin];
    for _ in 0..rows {
        let h = sample(rng, params.cell_height);
        ys.push(ys.last().unwrap() + h);
    }
    let layout = Layout {
        width: xs.last().unwrap() + thickness + params.margin,
        height: ys.last().unwrap() + thickness + params.margin,
        xs,
        ys,
        thickness,
    };
    let spans = sample_spans(rng, rows, cols, params.span_prob);
    let mut image = GrayImage::filled(layout.width, layout.height, BACKGROUND);
    draw_borders(&mut image, &layout, &spans, style);

    let right_aligned: Vec<bool> = (0..cols).map(|c| c > 0 && rng.gen_bool(0.4)).collect();
    let mut cells = Vec::with_capacity(spans.len());
    for (i, g) in spans.iter().enumerate() {
        let aligned = layout.aligned(g);
        let inset_x = thickness + sample(rng, style.padding);
        // Vertical padding gives way first on short rows.
        let inset_y = inset_x.min(aligned.height().saturating_sub(style.glyph_height.0) / 2);
        if aligned.width() <= 2 * inset_x + style.glyph_width.0 || inset_y <= thickness {
            return Err(format!("cell {i} too small for its padding"));
        }
        let area = BBox::new(aligned.x1 + inset_x, aligned.y1 + inset_y, aligned.x2 - inset_x, aligned.y2 - inset_y);
        let is_empty = params.empty_prob > 0.0 && rng.gen_bool(params.empty_prob);
        let text_box = if is_empty {
            None
        } else {
            let right = right_aligned[g.col_start as usize];
            Some(draw_text(rng, &mut image, area, params, right).ok_or("no glyphs placed")?)
        };
        cells.push(Cell {
            id: i as u32,
            aligned_box: aligned,
            text_box,
            grid: *g,
            is_empty,
        });
    }
    if cells.iter().all(|c| c.is_empty) {
        return Err("every cell came out empty".into());
    }
    let table = Table {
        id: id.to_string(),
        image_path: format!("images/{id}.png"),
        width: layout.width,
        height: layout.height,
        cells,
        relations: RelationMap::new(),
        mode: BoxMode::Aligned,
    };
    let table = derive_relations(&table).map_err(|e| e.to_string())?;
    Ok((table, image))
}

pub fn table_id(params: &GenParams, index: usize) -> String {
    format!("{}-{}-{index:05}", params.style.id, params.seed)
}

/// The `index`-th table of the stream defined by `params`; independent of
/// how many other tables are generated.
pub fn generate_one(params: &GenParams, index: usize) -> Result<(Table, GrayImage)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let id = table_id(params, index);
    let mut reason = String::new();
    for _ in 0..params.max_retries.max(1) {
        match attempt(&mut rng, params, &id) {
            Ok(out) => return Ok(out),
            Err(r) => reason = r,
        }
    }
    Err(Error::InfeasibleLayout {
        retries: params.max_retries.max(1),
        reason,
    })
}

pub fn generate(params: &GenParams, count: usize) -> Result<Vec<(Table, GrayImage)>> {
    generate_range(params, 0, count)
}

pub fn generate_range(params: &GenParams, start: usize, count: usize) -> Result<Vec<(Table, GrayImage)>> {
    (start..start + count).into_par_iter().map(|i| generate_one(params, i)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: GenParams,
    pub splits: Splits,
}

/// Table and image of one annotation, with the image resolved relative to
/// the dataset root.
pub fn load_example(root: &Path, id: &str) -> Result<(Table, GrayImage)> {
    let table = Table::load(&root.join("annotations").join(format!("{id}.json")))?;
    let image = GrayImage::load(&root.join(&table.image_path))?;
    if image.width() != table.width || image.height() != table.height {
        return Err(Error::Annotation(format!(
            "{id}: annotation says {}x{}, image is {}x{}",
            table.width,
            table.height,
            image.width(),
            image.height()
        )));
    }
    Ok((table, image))
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_split(root: &Path, ids: &[String]) -> Result<Vec<(Table, GrayImage)>> {
        ids.par_iter().map(|id| load_example(root, id)).collect()
    }
}

/// Writes `images/`, `annotations/` and `manifest.json` under `root`, the
/// first `train` tables to the training split, then validation, then test.
pub fn write_dataset(root: &Path, params: &GenParams, train: usize, val: usize, test: usize) -> Result<Manifest> {
    let tables = generate(params, train + val + test)?;
    for dir in ["images", "annotations"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    tables.par_iter().try_for_each(|(t, img)| -> Result<()> {
        img.save(&root.join(&t.image_path))?;
        t.save(&root.join("annotations").join(format!("{}.json", t.id)))
    })?;
    let ids: Vec<String> = tables.iter().map(|(t, _)| t.id.clone()).collect();
    let manifest = Manifest {
        params: params.clone(),
        splits: Splits {
            train: ids[..train].to_vec(),
            val: ids[train..train + val].to_vec(),
            test: ids[train + val..].to_vec(),
        },
    };
    let path = root.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Ground-truth rows of a span-free table, for checking recovery.
pub fn grid_rows(table: &Table) -> Vec<Vec<u32>> {
    grid_groups(table, |g| g.row_start, |c| c.aligned_box.x1)
}

pub fn grid_columns(table: &Table) -> Vec<Vec<u32>> {
    grid_groups(table, |g| g.col_start, |c| c.aligned_box.y1)
}

fn grid_groups(table: &Table, key: impl Fn(&GridSpan) -> u32, order: impl Fn(&Cell) -> u32) -> Vec<Vec<u32>> {
    let mut groups: BTreeMap<u32, Vec<&Cell>> = BTreeMap::new();
    for c in &table.cells {
        groups.entry(key(&c.grid)).or_default().push(c);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|c| (order(c), c.id));
            g.into_iter().map(|c| c.id).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{validate_table, RelationLabel};

    fn plain_2x2() -> GenParams {
        GenParams {
            rows: (2, 2),
            cols: (2, 2),
            span_prob: 0.0,
            empty_prob: 0.0,
            ..GenParams::profile_a(3)
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        for p in [GenParams::profile_a(11), GenParams::profile_b(11)] {
            let a = generate(&p, 4).unwrap();
            let b = generate(&p, 4).unwrap();
            for ((ta, ia), (tb, ib)) in a.iter().zip(&b) {
                assert_eq!(ta.to_annotation_json().unwrap(), tb.to_annotation_json().unwrap());
                assert_eq!(ia.to_png().unwrap(), ib.to_png().unwrap());
            }
            assert_ne!(a[0].1, a[1].1);
        }
    }

    #[test]
    fn index_stream_is_independent_of_count() {
        let p = GenParams::profile_b(5);
        assert_eq!(generate(&p, 3).unwrap()[2], generate_one(&p, 2).unwrap());
    }

    #[test]
    fn forced_two_by_two() {
        let (t, _) = generate_one(&plain_2x2(), 0).unwrap();
        assert_eq!(t.cells.len(), 4);
        assert_eq!(t.count_label(RelationLabel::Horizontal), 2);
        assert_eq!(t.count_label(RelationLabel::Vertical), 2);
    }

    #[test]
    fn borderless_ink_only_in_text() {
        let p = GenParams {
            style: StyleProfile {
                border: BorderStyle::None,
                ..GenParams::profile_b(0).style
            },
            ..GenParams::profile_b(9)
        };
        for (t, img) in generate(&p, 5).unwrap() {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if img.get(x, y) < BACKGROUND {
                        let inside = t.cells.iter().filter_map(|c| c.text_box).any(|b| {
                            (b.x1..=b.x2).contains(&x) && (b.y1..=b.y2).contains(&y)
                        });
                        assert!(inside, "stray ink at ({x}, {y})");
                    }
                }
            }
        }
    }

    #[test]
    fn generated_tables_are_well_formed() {
        for p in [GenParams::profile_a(1), GenParams::profile_b(2)] {
            for (t, img) in generate(&p, 30).unwrap() {
                assert!(validate_table(&t).is_empty(), "{:?}", validate_table(&t));
                assert_eq!((img.width(), img.height()), (t.width, t.height));
                for c in &t.cells {
                    assert_eq!(c.is_empty, c.text_box.is_none());
                    if let Some(tb) = c.text_box {
                        assert!(c.aligned_box.contains(&tb) && tb != c.aligned_box);
                    }
                }
            }
        }
    }

    #[test]
    fn span_free_counts_match_closed_form() {
        let p = GenParams {
            span_prob: 0.0,
            ..GenParams::profile_a(4)
        };
        for (t, _) in generate(&p, 20).unwrap() {
            let n = grid_rows(&t).len();
            let m = grid_columns(&t).len();
            assert_eq!(t.count_label(RelationLabel::Horizontal), n * (m - 1));
            assert_eq!(t.count_label(RelationLabel::Vertical), m * (n - 1));
        }
    }

    #[test]
    fn infeasible_layouts_give_up() {
        let p = GenParams {
            cell_width: (4, 4),
            max_retries: 3,
            ..GenParams::profile_a(0)
        };
        assert!(matches!(generate_one(&p, 0), Err(Error::InfeasibleLayout { retries: 3, .. })));
        let bad = GenParams {
            span_prob: 1.5,
            ..GenParams::profile_a(0)
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = GenParams::profile_a(21);
        let m = write_dataset(dir.path(), &p, 3, 1, 1).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
        let loaded = Manifest::load_split(dir.path(), &m.splits.train).unwrap();
        assert_eq!(loaded, generate(&p, 3).unwrap());
    }
}
