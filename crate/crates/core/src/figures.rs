//! PNG output: segmentation overlays and sweep curves.
//!
//! Overlays are three panels side by side (input, ground truth, prediction).
//! Class colours are blended at half opacity over the grayscale input; class
//! 0 is left transparent.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use plotters::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::train::SweepRow;

/// Colours of classes 1..=8.
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [245, 130, 48],
];
const ALPHA: f32 = 0.5;

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Input pixel with the class colour blended on top.
pub fn blend(v: f32, class: u8) -> [u8; 3] {
    let g = gray(v);
    if class == 0 {
        return [g, g, g];
    }
    let c = CLASS_COLORS[(class as usize - 1) % CLASS_COLORS.len()];
    c.map(|ch| ((1.0 - ALPHA) * g as f32 + ALPHA * ch as f32).round() as u8)
}

pub fn overlay(image: &[f32], gt: &[u8], pred: &[u8], size: usize) -> Result<RgbImage> {
    let n = size * size;
    if image.len() != n || gt.len() != n || pred.len() != n {
        return Err(Error::Dimension(format!("overlay inputs must all have {n} pixels")));
    }
    let mut img = RgbImage::new(3 * size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let k = y * size + x;
            let g = gray(image[k]);
            img.put_pixel(x as u32, y as u32, image::Rgb([g, g, g]));
            img.put_pixel((x + size) as u32, y as u32, image::Rgb(blend(image[k], gt[k])));
            img.put_pixel((x + 2 * size) as u32, y as u32, image::Rgb(blend(image[k], pred[k])));
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let w = BufWriter::new(File::create(path).at(path)?);
    PngEncoder::new(w)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Other(format!("{}: {e}", path.display())))
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Other(format!("{}: {e}", path.display()))
}

/// Two panels over the grid value: test DSC (left) and test HD (right).
/// Failed runs are skipped.
pub fn plot_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let e = plot_err(path);
    let mut pts: Vec<(f64, f64, Option<f64>)> =
        rows.iter().filter_map(|r| r.test_mean_dsc.map(|d| (r.value, d, r.test_mean_hd))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x0, x1) = rows.iter().map(|r| r.value).filter(|v| v.is_finite()).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let (x0, x1) = if x0 < x1 { (x0, x1) } else { (x0.min(0.0) - 0.5, x0.max(0.0) + 0.5) };
    let pad = (x1 - x0) * 0.05;
    let hd_max = pts.iter().filter_map(|p| p.2).fold(1.0f64, f64::max) * 1.1;

    let root = BitMapBackend::new(path, (800, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let panels = root.split_evenly((1, 2));
    let series: [(Vec<(f64, f64)>, f64, RGBColor); 2] = [
        (pts.iter().map(|p| (p.0, p.1)).collect(), 1.0, BLUE),
        (pts.iter().filter_map(|p| p.2.map(|h| (p.0, h))).collect(), hd_max, RED),
    ];
    for (area, (data, ymax, colour)) in panels.iter().zip(series) {
        let mut chart = ChartBuilder::on(area)
            .margin(20)
            .build_cartesian_2d(x0 - pad..x1 + pad, 0.0..ymax)
            .map_err(&e)?;
        chart.configure_mesh().x_labels(0).y_labels(0).draw().map_err(&e)?;
        chart.draw_series(LineSeries::new(data.clone(), colour.stroke_width(2))).map_err(&e)?;
        chart.draw_series(data.iter().map(|&p| Circle::new(p, 4, colour.filled()))).map_err(&e)?;
    }
    root.present().map_err(&e)?;
    Ok(())
}
