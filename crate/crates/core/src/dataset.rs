//! Turning tables into model-ready pair samples.

use std::collections::HashMap;
use std::sync::Arc;

use catt_tensor::{Real, Tensor};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{crop, resize_pad, union_crop, GrayImage};
use crate::model::{PairBatch, POSITION_FEATURES};
use crate::pairing::generate_pairs;
use crate::table::{apply_empty_cell_policy, BBox, BoxMode, RelationLabel, Table};

/// One candidate pair with its letterboxed crops, stored as 8-bit pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub table_id: Arc<str>,
    pub cell_a: u32,
    pub cell_b: u32,
    pub label: RelationLabel,
    pub image_a: Arc<[u8]>,
    pub image_b: Arc<[u8]>,
    pub union: Arc<[u8]>,
    pub position: [f32; POSITION_FEATURES],
}

/// Both boxes' corners scaled by the table size, then the center offset
/// from `a` to `b`.
pub fn position_features(a: BBox, b: BBox, width: u32, height: u32) -> [f32; POSITION_FEATURES] {
    let (w, h) = (f64::from(width.max(1)), f64::from(height.max(1)));
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let v = [
        f64::from(a.x1) / w,
        f64::from(a.y1) / h,
        f64::from(a.x2) / w,
        f64::from(a.y2) / h,
        f64::from(b.x1) / w,
        f64::from(b.y1) / h,
        f64::from(b.x2) / w,
        f64::from(b.y2) / h,
        (bx - ax) / w,
        (by - ay) / h,
    ];
    v.map(|x| x as f32)
}

/// Samples for every candidate pair of a table whose empty-cell policy has
/// already been applied.
pub fn prepare_table(table: &Table, image: &GrayImage, k: usize, input_size: u32) -> Result<Vec<PairSample>> {
    if image.width() != table.width || image.height() != table.height {
        return Err(Error::Annotation(format!(
            "{}: image is {}x{}, annotation says {}x{}",
            table.id,
            image.width(),
            image.height(),
            table.width,
            table.height
        )));
    }
    let pairs = generate_pairs(table, k)?;
    let id: Arc<str> = Arc::from(table.id.as_str());
    let mut cells: HashMap<u32, Arc<[u8]>> = HashMap::new();
    let mut cell_image = |cid: u32| -> Result<Arc<[u8]>> {
        if let Some(img) = cells.get(&cid) {
            return Ok(img.clone());
        }
        let c = table.cell(cid).ok_or_else(|| Error::Annotation(format!("missing cell {cid}")))?;
        let img: Arc<[u8]> = resize_pad(&crop(image, table.operative_box(c))?, input_size, input_size)?
            .into_pixels()
            .into();
        cells.insert(cid, img.clone());
        Ok(img)
    };
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a = table.operative_box(table.cell(p.cell_id_a).unwrap());
        let b = table.operative_box(table.cell(p.cell_id_b).unwrap());
        let union = resize_pad(&union_crop(image, a, b)?, input_size, input_size)?;
        out.push(PairSample {
            table_id: id.clone(),
            cell_a: p.cell_id_a,
            cell_b: p.cell_id_b,
            label: p.label,
            image_a: cell_image(p.cell_id_a)?,
            image_b: cell_image(p.cell_id_b)?,
            union: union.into_pixels().into(),
            position: position_features(a, b, table.width, table.height),
        });
    }
    Ok(out)
}

/// Applies the box-mode policy to each table and prepares all pairs, tables
/// in input order.
pub fn prepare_tables(
    tables: &[(Table, GrayImage)],
    mode: BoxMode,
    k: usize,
    input_size: u32,
) -> Result<Vec<PairSample>> {
    let per_table: Vec<Vec<PairSample>> = tables
        .par_iter()
        .map(|(t, img)| {
            let t = apply_empty_cell_policy(t, mode)?;
            prepare_table(&t, img, k, input_size)
        })
        .collect::<Result<_>>()?;
    Ok(per_table.into_iter().flatten().collect())
}

fn image_tensor<E: Real>(images: impl ExactSizeIterator<Item = Arc<[u8]>>, side: usize) -> Tensor<E> {
    let n = images.len();
    let scale = E::from_f64_lossy(1.0 / 255.0);
    let mut data = Vec::with_capacity(n * side * side);
    for img in images {
        data.extend(img.iter().map(|&p| E::from_f64_lossy(f64::from(255 - p)) * scale));
    }
    Tensor::new(vec![n, 1, side, side], data).expect("sample images have the configured size")
}

/// Stacks samples into one batch with ink scaled to 1 and paper to 0.
pub fn make_batch<E: Real>(samples: &[&PairSample], input_size: usize) -> PairBatch<E> {
    let n = samples.len();
    let positions = samples
        .iter()
        .flat_map(|s| s.position.iter().map(|&v| E::from_f64_lossy(f64::from(v))))
        .collect();
    PairBatch {
        cell_a: image_tensor(samples.iter().map(|s| s.image_a.clone()), input_size),
        cell_b: image_tensor(samples.iter().map(|s| s.image_b.clone()), input_size),
        union: image_tensor(samples.iter().map(|s| s.union.clone()), input_size),
        positions: Tensor::new(vec![n, POSITION_FEATURES], positions).expect("fixed feature width"),
        labels: samples.iter().map(|s| s.label.index()).collect(),
    }
}

/// Pair counts per label.
pub fn label_counts(samples: &[PairSample]) -> [usize; 3] {
    let mut c = [0; 3];
    for s in samples {
        c[s.label.index()] += 1;
    }
    c
}
