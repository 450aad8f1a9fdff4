//! Edge ground truth from label maps: per class, binarise, take the
//! normalised Sobel magnitude, threshold, and keep only pixels that carry
//! that class in the original label.

use std::path::Path;

use msunet_autograd::sobel_plane;

use crate::data::{list_cases, read_array, write_array, Array, Split};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// Zero-padded Sobel magnitude divided by its maximum (all zeros when the
/// input is flat).
pub fn sobel_magnitude(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (gx, gy) = sobel_plane(img, h, w);
    let mut mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    mag
}

/// Edge labels for classes `1..=classes`; earlier classes win overlaps.
pub fn generate_edge_labels(label: &[u8], h: usize, w: usize, classes: usize, threshold: f64) -> Result<Vec<u8>> {
    if label.len() != h * w {
        return Err(Error::Dimension(format!("{} labels for a {h}x{w} map", label.len())));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    if let Some(&v) = label.iter().find(|&&v| v as usize > classes) {
        return Err(Error::LabelOutOfRange { value: v as usize, classes: classes + 1 });
    }
    let mut out = vec![0u8; h * w];
    for c in 1..=classes as u8 {
        if !label.contains(&c) {
            continue;
        }
        let bin: Vec<f64> = label.iter().map(|&v| (v == c) as u8 as f64).collect();
        let mag = sobel_magnitude(&bin, h, w);
        for k in 0..h * w {
            if mag[k] >= threshold && label[k] == c && out[k] == 0 {
                out[k] = c;
            }
        }
    }
    Ok(out)
}

fn convert_file(src: &Path, dst: &Path, classes: usize, threshold: f64) -> Result<()> {
    let a = read_array(src)?;
    if a.dims.len() != 2 {
        return Err(Error::Dimension(format!("{}: label map must be rank 2, got {:?}", src.display(), a.dims)));
    }
    let (h, w) = (a.dims[0], a.dims[1]);
    let label = a.into_u8().map_err(|e| Error::Other(format!("{}: {e}", src.display())))?;
    let edges = generate_edge_labels(&label, h, w, classes, threshold).map_err(|e| Error::Other(format!("{}: {e}", src.display())))?;
    write_array(dst, &Array::u8(&[h, w], edges)?)
}

/// Converts every label file under `input` and returns the file count.
///
/// `input` is either a flat directory of label files (mirrored into `out`)
/// or a dataset root, in which case `<split>/labels` goes to
/// `<split>/edges` under `out`.
pub fn batch_generate(input: &Path, out: &Path, classes: usize, threshold: f64) -> Result<usize> {
    let mut count = 0;
    for id in list_cases(input)? {
        convert_file(&input.join(format!("{id}.msua")), &out.join(format!("{id}.msua")), classes, threshold)?;
        count += 1;
    }
    for split in Split::ALL {
        let dir = input.join(split.as_str()).join("labels");
        for id in list_cases(&dir)? {
            let dst = out.join(split.as_str()).join("edges").join(format!("{id}.msua"));
            convert_file(&dir.join(format!("{id}.msua")), &dst, classes, threshold)?;
            count += 1;
        }
    }
    Ok(count)
}
