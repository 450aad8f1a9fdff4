//! Dice similarity and Hausdorff distance on label maps, aggregated into
//! per-class and mean reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub type Point = (usize, usize);

fn check_same(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// `2 |X & Y| / (|X| + |Y|)` for class `c`; 1 when both masks are empty.
pub fn dsc(pred: &[u8], gt: &[u8], c: u8) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == c, g == c);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

fn dist(a: Point, b: Point) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    (dy * dy + dx * dx).sqrt()
}

/// For every point of `a`, the distance to its nearest point of `b`.
pub fn directed_distances(a: &[Point], b: &[Point]) -> Vec<f64> {
    a.iter().map(|&p| b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect()
}

/// Symmetric Hausdorff distance between two non-empty point sets.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let h = |x: &[Point], y: &[Point]| directed_distances(x, y).into_iter().fold(0.0, f64::max);
    Ok(h(a, b).max(h(b, a)))
}

/// `p`-th percentile (0..=100) with linear interpolation between ranks.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Pixels of class `c` with a 4-neighbour outside the class (the image
/// exterior counts as outside).
pub fn boundary(mask: &[u8], h: usize, w: usize, c: u8) -> Vec<Point> {
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask[y as usize * w + x as usize] == c;
    let mut pts = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                pts.push((y as usize, x as usize));
            }
        }
    }
    pts
}

/// Hausdorff distance between the class-`c` boundaries of two label maps.
/// `None` when either mask is empty. With a percentile, each directed
/// maximum is replaced by that percentile.
pub fn hd_on_masks(pred: &[u8], gt: &[u8], h: usize, w: usize, c: u8, pct: Option<f64>) -> Result<Option<f64>> {
    check_same(pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::Dimension(format!("{} pixels for a {h}x{w} map", pred.len())));
    }
    let a = boundary(pred, h, w, c);
    let b = boundary(gt, h, w, c);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    Ok(Some(match pct {
        None => hausdorff(&a, &b)?,
        Some(p) => percentile(&directed_distances(&a, &b), p).max(percentile(&directed_distances(&b, &a), p)),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub case_id: String,
    pub class: usize,
    pub dsc: f64,
    /// Absent when either mask is empty.
    pub hd: Option<f64>,
    pub gt_empty: bool,
    pub pred_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Foreground classes `1..C`; NaN for a class absent from every case.
    pub per_class_dsc: Vec<f64>,
    pub mean_dsc: f64,
    pub per_class_hd: Vec<f64>,
    pub mean_hd: f64,
    /// `None` for the exact distance.
    pub hd_percentile: Option<f64>,
    pub case_ids: Vec<String>,
    pub records: Vec<ClassRecord>,
}

/// Anything that maps a batch of `[H, W]` images to label maps.
pub trait Segmenter {
    fn image_size(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict(&self, images: &[&[f32]]) -> Result<Vec<Vec<u8>>>;
}

fn nan_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Builds a report from `(case id, prediction, ground truth)` triples. Class
/// means include only cases whose ground truth contains the class.
pub fn report_from_predictions(
    items: &[(String, Vec<u8>, Vec<u8>)],
    size: usize,
    classes: usize,
    pct: Option<f64>,
) -> Result<EvalReport> {
    let mut sorted: Vec<&(String, Vec<u8>, Vec<u8>)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut records = Vec::new();
    for (id, pred, gt) in sorted.iter().map(|t| (&t.0, &t.1, &t.2)) {
        for c in 1..classes {
            let cb = c as u8;
            records.push(ClassRecord {
                case_id: id.clone(),
                class: c,
                dsc: dsc(pred, gt, cb)?,
                hd: hd_on_masks(pred, gt, size, size, cb, pct)?,
                gt_empty: !gt.contains(&cb),
                pred_empty: !pred.contains(&cb),
            });
        }
    }
    let per_class_dsc: Vec<f64> =
        (1..classes).map(|c| nan_mean(records.iter().filter(|r| r.class == c && !r.gt_empty).map(|r| r.dsc))).collect();
    let per_class_hd: Vec<f64> = (1..classes)
        .map(|c| nan_mean(records.iter().filter(|r| r.class == c && !r.gt_empty).filter_map(|r| r.hd)))
        .collect();
    Ok(EvalReport {
        mean_dsc: nan_mean(per_class_dsc.iter().copied()),
        mean_hd: nan_mean(per_class_hd.iter().copied()),
        per_class_dsc,
        per_class_hd,
        hd_percentile: pct,
        case_ids: sorted.iter().map(|t| t.0.clone()).collect(),
        records,
    })
}

/// Runs `model` over `(id, image, label)` cases in batches and scores it.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    cases: &[(String, Vec<f32>, Vec<u8>)],
    batch: usize,
    pct: Option<f64>,
) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch.max(1)) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|c| c.1.as_slice()).collect();
        let preds = model.predict(&imgs)?;
        for (c, p) in chunk.iter().zip(preds) {
            items.push((c.0.clone(), p, c.2.clone()));
        }
    }
    report_from_predictions(&items, model.image_size(), model.num_classes(), pct)
}

/// Writes `report.json` and a per-case, per-class `metrics.csv`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n").at(&json)?;
    let csv_path = dir.join("metrics.csv");
    let mut wr = csv::Writer::from_path(&csv_path).map_err(|e| Error::Other(format!("{}: {e}", csv_path.display())))?;
    let csv_err = |e: csv::Error| Error::Other(format!("{}: {e}", csv_path.display()));
    wr.write_record(["case_id", "class", "dsc", "hd", "gt_empty", "pred_empty"]).map_err(csv_err)?;
    for r in &report.records {
        let hd = r.hd.map(|v| v.to_string()).unwrap_or_default();
        wr.write_record([r.case_id.clone(), r.class.to_string(), r.dsc.to_string(), hd, r.gt_empty.to_string(), r.pred_empty.to_string()])
            .map_err(csv_err)?;
    }
    wr.flush().at(&csv_path)
}
