//! Highlighted-region refinement.
//!
//! Channel sums of a feature map give one score per location. Every location
//! proposes a fixed-size square box centred on it; greedy non-maximum
//! suppression keeps the top non-overlapping boxes, which are then mapped back
//! to image crops.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionConfig {
    /// Box side in feature cells.
    pub size: usize,
    /// Number of regions kept after suppression.
    pub top_k: usize,
    /// Boxes overlapping a kept box by more than this IoU are dropped.
    pub iou_threshold: f64,
    /// Pixels per feature cell.
    pub stride: usize,
    /// Crop side in pixels.
    pub crop: usize,
    /// Side the crop is resized to before feature extraction.
    pub resize: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RegionConfig {
    /// Geometry for 448-pixel inputs with a 16× feature stride.
    pub fn full_scale() -> Self {
        Self {
            size: 6,
            top_k: 3,
            iou_threshold: 0.5,
            stride: 16,
            crop: 96,
            resize: 224,
        }
    }

    /// Geometry for the 64-pixel, 8× stride desk backbone.
    pub fn desk() -> Self {
        Self {
            size: 3,
            top_k: 3,
            iou_threshold: 0.5,
            stride: 8,
            crop: 24,
            resize: 64,
        }
    }
}

/// Axis-aligned box in feature cells, half-open: rows `[top, bottom)`, cols `[left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl CellBox {
    /// `size × size` box centred on `(row, col)`, clipped to a `rows × cols` map.
    pub fn centered(row: usize, col: usize, size: usize, rows: usize, cols: usize) -> Self {
        let before = size / 2;
        let after = size - before;
        Self {
            top: row.saturating_sub(before),
            left: col.saturating_sub(before),
            bottom: (row + after).min(rows),
            right: (col + after).min(cols),
        }
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    pub fn iou(&self, other: &CellBox) -> f64 {
        let h = self.bottom.min(other.bottom).saturating_sub(self.top.max(other.top));
        let w = self.right.min(other.right).saturating_sub(self.left.max(other.left));
        let inter = (h * w) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    /// `(row, col)` in feature-map coordinates.
    pub center: (usize, usize),
    pub size: usize,
    pub score: f64,
    pub cells: CellBox,
}

/// Channel sum at every location.
pub fn location_scores(fmap: &Array3<f64>) -> Array2<f64> {
    fmap.sum_axis(Axis(2))
}

/// Min–max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_unit(scores: &Array2<f64>) -> Array2<f64> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(scores.dim());
    }
    scores.mapv(|v| (v - lo) / (hi - lo))
}

/// Greedy suppression over every location's box. Candidates are visited by
/// descending score with row-major order breaking ties.
pub fn propose_regions(scores: &Array2<f64>, cfg: &RegionConfig) -> Vec<Region> {
    let (rows, cols) = scores.dim();
    let mut candidates: Vec<Region> = scores
        .indexed_iter()
        .map(|((r, c), &score)| Region {
            center: (r, c),
            size: cfg.size,
            score,
            cells: CellBox::centered(r, c, cfg.size, rows, cols),
        })
        .collect();
    // stable sort keeps row-major order among equal scores
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut kept: Vec<Region> = Vec::with_capacity(cfg.top_k);
    for cand in candidates {
        if kept.len() == cfg.top_k {
            break;
        }
        if kept.iter().all(|k| k.cells.iou(&cand.cells) <= cfg.iou_threshold) {
            kept.push(cand);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Side length the crop is resized to.
    pub resize: usize,
}

/// Maps a region centre to a `crop × crop` pixel box, clipped to the image.
/// The cell centre `(i + 0.5) · stride` is used as the image-space centre.
pub fn crop_and_map(region: &Region, image_w: usize, image_h: usize, cfg: &RegionConfig) -> Result<CropSpec> {
    if image_w == 0 || image_h == 0 {
        return Err(KerlError::Invalid("cannot crop from an empty image".into()));
    }
    let cy = (region.center.0 as f64 + 0.5) * cfg.stride as f64;
    let cx = (region.center.1 as f64 + 0.5) * cfg.stride as f64;
    let half = cfg.crop as f64 / 2.0;
    let clip = |lo: f64, hi: f64, limit: usize| -> (usize, usize) {
        let lo = lo.max(0.0).min(limit as f64);
        let hi = hi.max(0.0).min(limit as f64);
        let start = lo.round() as usize;
        let end = (hi.round() as usize).max(start + 1).min(limit);
        (start.min(limit - 1), end)
    };
    let (x0, x1) = clip(cx - half, cx + half, image_w);
    let (y0, y1) = clip(cy - half, cy + half, image_h);
    Ok(CropSpec {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
        resize: cfg.resize,
    })
}

/// Elementwise mean of two probability vectors.
pub fn fuse_scores(kerl: &Array1<f64>, region: &Array1<f64>) -> Result<Array1<f64>> {
    if kerl.len() != region.len() {
        return Err(KerlError::Shape(format!(
            "cannot average {} and {} class scores",
            kerl.len(),
            region.len()
        )));
    }
    Ok((kerl + region) * 0.5)
}

/// One text record per region: `image_id top left bottom right score`.
pub fn format_region_records(image_id: u64, regions: &[Region], crops: &[CropSpec]) -> String {
    let mut out = String::new();
    for (r, c) in regions.iter().zip(crops) {
        let _ = writeln!(
            out,
            "{image_id} {} {} {} {} {} {} {} {} {:?}",
            r.center.0, r.center.1, r.cells.top, r.cells.left, c.x, c.y, c.w, c.h, r.score
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(size: usize, k: usize) -> RegionConfig {
        RegionConfig {
            size,
            top_k: k,
            ..RegionConfig::desk()
        }
    }

    #[test]
    fn location_scores_examples() {
        let ones = Array3::from_elem((2, 2, 3), 1.0);
        assert!(location_scores(&ones).iter().all(|&v| v == 3.0));

        let zero = Array3::<f64>::zeros((2, 2, 3));
        assert!(location_scores(&zero).iter().all(|&v| v == 0.0));
        assert!(normalize_unit(&location_scores(&zero)).iter().all(|&v| v == 0.0));

        let mut hot = Array3::<f64>::zeros((3, 3, 4));
        hot[[1, 2, 3]] = 0.7;
        let s = location_scores(&hot);
        for ((r, c), &v) in s.indexed_iter() {
            if (r, c) != (1, 2) {
                assert!(v < s[[1, 2]]);
            }
        }
        assert_eq!(normalize_unit(&s)[[1, 2]], 1.0);
    }

    #[test]
    fn offset_by_one_boxes_overlap_30_of_42() {
        let a = CellBox::centered(6, 6, 6, 20, 20);
        let b = CellBox::centered(6, 7, 6, 20, 20);
        assert!((a.iou(&b) - 30.0 / 42.0).abs() < 1e-15);

        let mut scores = Array2::<f64>::zeros((20, 20));
        scores[[6, 6]] = 2.0;
        scores[[6, 7]] = 1.0;
        let kept = propose_regions(&scores, &RegionConfig { iou_threshold: 0.5, ..cfg(6, 2) });
        assert_eq!(kept[0].center, (6, 6));
        assert!(kept.iter().all(|r| r.center != (6, 7)));
    }

    #[test]
    fn uniform_scores_pick_row_major_non_overlapping_boxes() {
        let scores = Array2::<f64>::ones((6, 6));
        let kept = propose_regions(&scores, &RegionConfig { iou_threshold: 0.0, ..cfg(2, 3) });
        let centers: Vec<_> = kept.iter().map(|r| r.center).collect();
        // (0,0) keeps rows 0..1/cols 0..1; the first box with zero overlap is (0,2)
        assert_eq!(centers, vec![(0, 0), (0, 2), (0, 4)]);
    }

    #[test]
    fn fewer_survivors_than_requested_is_fine() {
        let scores = array![[1.0, 0.5], [0.2, 0.1]];
        let kept = propose_regions(&scores, &RegionConfig { iou_threshold: 0.1, ..cfg(6, 3) });
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn crop_mapping_examples() {
        let region = Region {
            center: (3, 3),
            size: 6,
            score: 1.0,
            cells: CellBox::centered(3, 3, 6, 28, 28),
        };
        let full = RegionConfig::full_scale();
        let crop = crop_and_map(&region, 448, 448, &full).unwrap();
        assert_eq!((crop.x, crop.y, crop.w, crop.h), (8, 8, 96, 96));
        assert_eq!((full.crop, full.resize, full.stride), (96, 224, 16));

        let corner = Region { center: (0, 0), ..region };
        let crop = crop_and_map(&corner, 448, 448, &full).unwrap();
        assert_eq!((crop.x, crop.y), (0, 0));
        assert_eq!((crop.w, crop.h), (56, 56));
    }

    #[test]
    fn crops_stay_inside_small_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let w = rng.random_range(1..100);
            let h = rng.random_range(1..100);
            let r = Region {
                center: (rng.random_range(0..20), rng.random_range(0..20)),
                size: 3,
                score: 0.0,
                cells: CellBox::centered(0, 0, 1, 1, 1),
            };
            let c = crop_and_map(&r, w, h, &RegionConfig::desk()).unwrap();
            assert!(c.w >= 1 && c.h >= 1);
            assert!(c.x + c.w <= w && c.y + c.h <= h);
        }
    }

    #[test]
    fn fuse_scores_examples() {
        let p = array![0.2, 0.3, 0.5];
        assert_eq!(fuse_scores(&p, &p).unwrap(), p);
        let one_hot = array![1.0, 0.0, 0.0, 0.0];
        let uniform = array![0.25, 0.25, 0.25, 0.25];
        assert_eq!(fuse_scores(&one_hot, &uniform).unwrap(), array![0.625, 0.125, 0.125, 0.125]);
        assert!(fuse_scores(&p, &uniform).is_err());
    }

    #[test]
    fn averaging_can_change_the_winner() {
        // small search for a pair whose mean argmax differs from both inputs
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let mut found = None;
        'outer: for &a0 in &grid {
            for &a1 in &grid {
                let a2 = 1.0 - a0 - a1;
                if a2 < -1e-12 {
                    continue;
                }
                for &b0 in &grid {
                    for &b1 in &grid {
                        let b2 = 1.0 - b0 - b1;
                        if b2 < -1e-12 {
                            continue;
                        }
                        let a = array![a0, a1, a2.max(0.0)];
                        let b = array![b0, b1, b2.max(0.0)];
                        let m = fuse_scores(&a, &b).unwrap();
                        let am = crate::nn::argmax(a.view());
                        let bm = crate::nn::argmax(b.view());
                        let mm = crate::nn::argmax(m.view());
                        let strict = m.iter().filter(|&&v| v == m[mm]).count() == 1;
                        if strict && mm != am && mm != bm {
                            found = Some((a, b, mm));
                            break 'outer;
                        }
                    }
                }
            }
        }
        let (a, b, winner) = found.expect("a disagreeing pair exists");
        assert_ne!(crate::nn::argmax(a.view()), winner);
        assert_ne!(crate::nn::argmax(b.view()), winner);
    }

    #[test]
    fn region_records_have_one_line_per_region() {
        let scores = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        let cfg = RegionConfig { iou_threshold: 0.0, ..cfg(1, 3) };
        let regions = propose_regions(&scores, &cfg);
        let crops: Vec<_> = regions.iter().map(|r| crop_and_map(r, 24, 24, &cfg).unwrap()).collect();
        let text = format_region_records(7, &regions, &crops);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("7 2 2 "));
    }

    // Repeatedly scans every cell for the best one compatible with the picks
    // so far; overlap is counted cell by cell.
    fn brute_force(scores: &Array2<f64>, size: usize, k: usize, thr: f64) -> Vec<(usize, usize)> {
        let (rows, cols) = scores.dim();
        let span = |center: usize, limit: usize| {
            let lo = center as i64 - (size / 2) as i64;
            (lo.max(0) as usize)..((lo + size as i64).min(limit as i64) as usize)
        };
        let inside = |(r, c): (usize, usize), (y, x): (usize, usize)| span(r, rows).contains(&y) && span(c, cols).contains(&x);
        let iou = |a: (usize, usize), b: (usize, usize)| {
            let (mut inter, mut union) = (0, 0);
            for y in 0..rows {
                for x in 0..cols {
                    let (ia, ib) = (inside(a, (y, x)), inside(b, (y, x)));
                    inter += usize::from(ia && ib);
                    union += usize::from(ia || ib);
                }
            }
            inter as f64 / union as f64
        };
        let mut picked: Vec<(usize, usize)> = Vec::new();
        while picked.len() < k {
            let mut best: Option<(usize, usize)> = None;
            for r in 0..rows {
                for c in 0..cols {
                    if picked.contains(&(r, c)) || picked.iter().any(|&p| iou(p, (r, c)) > thr) {
                        continue;
                    }
                    if best.is_none_or(|b| scores[[r, c]] > scores[b]) {
                        best = Some((r, c));
                    }
                }
            }
            match best {
                Some(b) => picked.push(b),
                None => break,
            }
        }
        picked
    }

    proptest::proptest! {
        #[test]
        fn greedy_matches_brute_force(
            rows in 1usize..=8,
            cols in 1usize..=8,
            size in 1usize..=5,
            k in 1usize..=4,
            levels in 0u32..4,
            seed in 0u64..1_000_000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // few distinct levels force ties
            let scores = Array2::from_shape_fn((rows, cols), |_| {
                let v: f64 = rng.random();
                if levels == 0 { v } else { (v * levels as f64).floor() }
            });
            let got: Vec<(usize, usize)> = propose_regions(&scores, &cfg(size, k)).iter().map(|r| r.center).collect();
            proptest::prop_assert_eq!(got, brute_force(&scores, size, k, 0.5));
        }
    }
}
