use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{HardLabelMap, Image};

use super::contour;

/// Contour colours for foreground classes 1, 2, 3 (RV blue, Myo green, LV
/// red); further classes cycle through the tail.
pub const CONTOUR_PALETTE: [[u8; 3]; 6] =
    [[0, 0, 255], [0, 255, 0], [255, 0, 0], [255, 0, 255], [0, 255, 255], [255, 128, 0]];
/// Ground-truth contours.
pub const GT_COLOR: [u8; 3] = [255, 255, 0];

fn class_color(class: usize) -> [u8; 3] {
    CONTOUR_PALETTE[(class - 1) % CONTOUR_PALETTE.len()]
}

/// Writes an RGB PNG: the image in grayscale (min-max scaled), ground-truth
/// contours in yellow, predicted contours in the class palette on top.
pub fn render_overlay(image: &Image, pred: &HardLabelMap, gt: Option<&HardLabelMap>, out_path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    if pred.dims() != (h, w) || gt.is_some_and(|g| g.dims() != (h, w)) {
        return Err(Error::ShapeMismatch(format!("overlay image is {h}x{w}, label maps differ")));
    }
    let px = image.pixels();
    let lo = px.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = px.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = vec![0u8; h * w * 3];
    for ((r, c), &v) in px.indexed_iter() {
        let g = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        rgb[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&[g, g, g]);
    }
    let mut paint = |labels: &HardLabelMap, color: &dyn Fn(usize) -> [u8; 3]| {
        for class in 1..labels.num_classes() {
            let edge = contour(labels.labels().view(), class as i32);
            for ((r, c), &on) in edge.indexed_iter() {
                if on {
                    rgb[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&color(class));
                }
            }
        }
    };
    if let Some(g) = gt {
        paint(g, &|_| GT_COLOR);
    }
    paint(pred, &class_color);

    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(out_path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&rgb)?;
    writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn decode(path: &Path) -> Vec<u8> {
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(path).unwrap()));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        buf
    }

    #[test]
    fn empty_prediction_is_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(Array2::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) as f32)).unwrap();
        let pred = HardLabelMap::new(Array2::zeros((8, 8)), 4).unwrap();
        let path = dir.path().join("o.png");
        render_overlay(&img, &pred, None, &path).unwrap();
        let px = decode(&path);
        assert!(px.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(&px[..3], &[0, 0, 0]);
        assert_eq!(&px[px.len() - 3..], &[255, 255, 255]);
    }

    #[test]
    fn three_classes_three_colors_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::zeros(12, 12);
        let labels = Array2::from_shape_fn((12, 12), |(r, c)| match (r, c) {
            (1..=3, 1..=3) => 1,
            (5..=7, 5..=7) => 2,
            (8..=10, 1..=3) => 3,
            _ => 0,
        });
        let pred = HardLabelMap::new(labels, 4).unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_overlay(&img, &pred, Some(&pred), &a).unwrap();
        render_overlay(&img, &pred, Some(&pred), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let px = decode(&a);
        for color in &CONTOUR_PALETTE[..3] {
            assert!(px.chunks(3).any(|p| p == color), "{color:?} missing");
        }
    }
}
