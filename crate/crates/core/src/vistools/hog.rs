//! Histogram of oriented gradients: 8x8 cells, 9 unsigned bins centred on
//! multiples of 20 degrees, 2x2-cell blocks at stride one, L2-Hys.

use crate::imaging::{Raster, RealField, Result};

pub const HOG_CELL: u32 = 8;
pub const HOG_BINS: usize = 9;
const BIN_WIDTH_DEG: f64 = 180.0 / HOG_BINS as f64;
const HYS_CLIP: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct HogDescriptor {
    pub cells_x: u32,
    pub cells_y: u32,
    /// Unnormalized per-cell histograms, row-major over cells.
    pub cell_hists: Vec<[f64; HOG_BINS]>,
    /// Concatenated L2-Hys normalized block vectors.
    pub features: Vec<f64>,
}

/// Feature length for an image with the given number of cells per side.
pub fn feature_len(cells_x: u32, cells_y: u32) -> usize {
    (cells_x.saturating_sub(1) * cells_y.saturating_sub(1)) as usize * 4 * HOG_BINS
}

pub fn hog_descriptor(img: &Raster) -> Result<HogDescriptor> {
    let f = RealField::from_raster(img);
    let cells_x = f.width() / HOG_CELL;
    let cells_y = f.height() / HOG_CELL;
    let mut cell_hists = vec![[0.0; HOG_BINS]; (cells_x * cells_y) as usize];

    for y in 0..cells_y * HOG_CELL {
        for x in 0..cells_x * HOG_CELL {
            let (xi, yi) = (x as i64, y as i64);
            let gx = f.at_clamped(xi + 1, yi) - f.at_clamped(xi - 1, yi);
            let gy = f.at_clamped(xi, yi + 1) - f.at_clamped(xi, yi - 1);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let pos = angle / BIN_WIDTH_DEG;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = lo as usize % HOG_BINS;
            let hist = &mut cell_hists[((y / HOG_CELL) * cells_x + x / HOG_CELL) as usize];
            hist[lo] += (1.0 - frac) * mag;
            hist[(lo + 1) % HOG_BINS] += frac * mag;
        }
    }

    let mut features = Vec::with_capacity(feature_len(cells_x, cells_y));
    for by in 0..cells_y.saturating_sub(1) {
        for bx in 0..cells_x.saturating_sub(1) {
            let mut block = Vec::with_capacity(4 * HOG_BINS);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                block.extend_from_slice(&cell_hists[((by + dy) * cells_x + bx + dx) as usize]);
            }
            l2_hys(&mut block);
            features.extend_from_slice(&block);
        }
    }

    Ok(HogDescriptor {
        cells_x,
        cells_y,
        cell_hists,
        features,
    })
}

fn l2_hys(v: &mut [f64]) {
    let scale = |v: &mut [f64]| {
        let norm = (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    };
    scale(v);
    v.iter_mut().for_each(|x| *x = x.min(HYS_CLIP));
    scale(v);
}

impl HogDescriptor {
    /// Star-glyph canvas: for every cell and bin, a line through the cell
    /// centre perpendicular to the bin's gradient direction, weighted by the
    /// cell's raw bin value. Unquantized.
    pub fn render(&self, width: u32, height: u32) -> Result<RealField> {
        let mut canvas = RealField::zeros(width, height)?;
        let half = (HOG_CELL as f64 - 1.0) / 2.0;
        for cy in 0..self.cells_y {
            for cx in 0..self.cells_x {
                let hist = &self.cell_hists[(cy * self.cells_x + cx) as usize];
                let (x0, y0) = (cx * HOG_CELL, cy * HOG_CELL);
                let (mx, my) = (x0 as f64 + half, y0 as f64 + half);
                for (bin, &weight) in hist.iter().enumerate() {
                    if weight == 0.0 {
                        continue;
                    }
                    let theta = (bin as f64 * BIN_WIDTH_DEG).to_radians();
                    // perpendicular to the gradient direction (cos, sin)
                    let (dx, dy) = (-theta.sin(), theta.cos());
                    let mut pixels = Vec::with_capacity(32);
                    let steps = (2.0 * half / 0.25) as i32;
                    for s in 0..=steps {
                        let t = -half + s as f64 * 0.25;
                        let px = (mx + t * dx + 0.5).floor() as i64;
                        let py = (my + t * dy + 0.5).floor() as i64;
                        let px = px.clamp(x0 as i64, (x0 + HOG_CELL - 1) as i64) as u32;
                        let py = py.clamp(y0 as i64, (y0 + HOG_CELL - 1) as i64) as u32;
                        if !pixels.contains(&(px, py)) {
                            pixels.push((px, py));
                        }
                    }
                    for (px, py) in pixels {
                        canvas.set(px, py, canvas.at(px, py) + weight);
                    }
                }
            }
        }
        Ok(canvas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_length_for_face_crop() {
        // 28x28 cells -> 27x27 blocks of 36 values
        assert_eq!(feature_len(28, 28), 26244);
        let img = Raster::from_fn(224, 224, |x, y| ((x * 3 + y * 5) % 256) as u8).unwrap();
        assert_eq!(hog_descriptor(&img).unwrap().features.len(), 26244);
    }

    #[test]
    fn constant_image_has_no_gradients() {
        let img = Raster::filled(32, 24, 1, 140).unwrap();
        let d = hog_descriptor(&img).unwrap();
        assert!(d.features.iter().all(|&v| v == 0.0));
        assert!(d.render(32, 24).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn horizontal_gradient_votes_bin_zero() {
        // period-4 vertical stripes: interior gradients are purely horizontal
        let img = Raster::from_fn(32, 32, |x, _| if (x / 2) % 2 == 0 { 0 } else { 255 }).unwrap();
        let d = hog_descriptor(&img).unwrap();
        let first = d.cell_hists[0];
        for hist in &d.cell_hists {
            assert!(hist[0] > 0.0);
            assert!(hist[1..].iter().all(|&v| v == 0.0), "{hist:?}");
        }
        // interior cells are identical
        assert_eq!(d.cell_hists[5], d.cell_hists[6]);
        assert!(first[0] > 0.0);
    }

    #[test]
    fn period_two_stripes_only_border_energy() {
        let img = Raster::from_fn(32, 16, |x, _| if x % 2 == 0 { 0 } else { 255 }).unwrap();
        let d = hog_descriptor(&img).unwrap();
        // central differences cancel on the interior; the clamped border
        // columns carry a purely horizontal gradient
        for (i, hist) in d.cell_hists.iter().enumerate() {
            let cx = i as u32 % d.cells_x;
            assert!(hist[1..].iter().all(|&v| v == 0.0));
            if cx == 0 || cx == d.cells_x - 1 {
                assert!(hist[0] > 0.0);
            } else {
                assert_eq!(hist[0], 0.0);
            }
        }
    }

    #[test]
    fn l2_hys_clips() {
        let mut v = vec![1.0, 0.0, 0.0, 0.0];
        l2_hys(&mut v);
        assert!((v[0] - 1.0).abs() < 1e-6);
        let mut v = vec![10.0, 1.0, 1.0, 1.0];
        l2_hys(&mut v);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}
