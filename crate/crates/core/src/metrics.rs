//! Overlap metrics on binary masks and the boundary band they can be
//! restricted to.

use serde::{Deserialize, Serialize};

use crate::error::{LsrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Chebyshev,
}

fn check_binary(mask: &[u8]) -> Result<()> {
    match mask.iter().find(|&&m| m > 1) {
        Some(&bad) => Err(LsrError::NonBinaryMask(bad)),
        None => Ok(()),
    }
}

fn check_same(op: &'static str, a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LsrError::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Positive-class pixel counts, summable across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl OverlapCounts {
    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.intersection
    }

    /// 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }

    pub fn dice(&self) -> f64 {
        match self.pred + self.gt {
            0 => 1.0,
            s => 2.0 * self.intersection as f64 / s as f64,
        }
    }

    pub fn add(&mut self, other: OverlapCounts) {
        self.intersection += other.intersection;
        self.pred += other.pred;
        self.gt += other.gt;
    }
}

/// Counts over all pixels, or only those where `band` is 1.
pub fn overlap_counts(pred: &[u8], gt: &[u8], band: Option<&[u8]>) -> Result<OverlapCounts> {
    check_same("overlap", pred, gt)?;
    check_binary(pred)?;
    check_binary(gt)?;
    if let Some(b) = band {
        check_same("overlap", pred, b)?;
        check_binary(b)?;
    }
    let mut c = OverlapCounts::default();
    for i in 0..pred.len() {
        if band.is_some_and(|b| b[i] == 0) {
            continue;
        }
        let (p, g) = (pred[i] as u64, gt[i] as u64);
        c.intersection += p & g;
        c.pred += p;
        c.gt += g;
    }
    Ok(c)
}

pub fn iou_dice(pred: &[u8], gt: &[u8]) -> Result<(f64, f64)> {
    let c = overlap_counts(pred, gt, None)?;
    Ok((c.iou(), c.dice()))
}

pub fn masked_iou_dice(pred: &[u8], gt: &[u8], band: &[u8]) -> Result<(f64, f64)> {
    if !band.contains(&1) {
        return Err(LsrError::EmptyBand);
    }
    let c = overlap_counts(pred, gt, Some(band))?;
    Ok((c.iou(), c.dice()))
}

/// Pixels with at least one 4-neighbour of the other class.
pub fn boundary_pixels(gt: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if gt.len() != height * width {
        return Err(LsrError::ShapeMismatch {
            op: "boundary",
            lhs: vec![gt.len()],
            rhs: vec![height, width],
        });
    }
    check_binary(gt)?;
    let mut out = vec![0u8; gt.len()];
    for y in 0..height {
        for x in 0..width {
            let v = gt[y * width + x];
            let differs = (x > 0 && gt[y * width + x - 1] != v)
                || (x + 1 < width && gt[y * width + x + 1] != v)
                || (y > 0 && gt[(y - 1) * width + x] != v)
                || (y + 1 < height && gt[(y + 1) * width + x] != v);
            out[y * width + x] = differs as u8;
        }
    }
    Ok(out)
}

fn intersect(f: &[f64], q: usize, p: usize) -> f64 {
    ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
}

/// Lower envelope of parabolas: squared distance along one line, given
/// per-position costs `f` (infinite where there is no seed).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let mut s = intersect(f, q, v[k]);
        // z[0] is -inf, so this stops at k == 0.
        while s <= z[k] {
            k -= 1;
            s = intersect(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_distance_transform(seeds: &[u8], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s == 1 { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        edt_1d(&grid[y * width..(y + 1) * width], &mut row_out);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

fn dilate_line(src: &[u8], radius: usize, out: &mut [u8]) {
    let n = src.len();
    let mut last_seed: Option<usize> = None;
    let mut next_seed = vec![usize::MAX; n + 1];
    for i in (0..n).rev() {
        next_seed[i] = if src[i] == 1 { i } else { next_seed[i + 1] };
    }
    for i in 0..n {
        if src[i] == 1 {
            last_seed = Some(i);
        }
        let back = last_seed.is_some_and(|s| i - s <= radius);
        let fwd = next_seed[i] != usize::MAX && next_seed[i] - i <= radius;
        out[i] = (back || fwd) as u8;
    }
}

/// Pixels within `radius` (inclusive) of a ground-truth class boundary.
/// Uniform masks have no boundary and yield [`LsrError::EmptyBand`].
pub fn boundary_band(gt: &[u8], height: usize, width: usize, radius: usize, metric: DistanceMetric) -> Result<Vec<u8>> {
    let boundary = boundary_pixels(gt, height, width)?;
    if !boundary.contains(&1) {
        return Err(LsrError::EmptyBand);
    }
    match metric {
        DistanceMetric::Euclidean => {
            let r2 = (radius * radius) as f64;
            Ok(squared_distance_transform(&boundary, height, width)
                .into_iter()
                .map(|d| (d <= r2) as u8)
                .collect())
        }
        DistanceMetric::Chebyshev => {
            let mut rows = vec![0u8; boundary.len()];
            for y in 0..height {
                dilate_line(&boundary[y * width..(y + 1) * width], radius, &mut rows[y * width..(y + 1) * width]);
            }
            let mut out = vec![0u8; boundary.len()];
            let mut col = vec![0u8; height];
            let mut col_out = vec![0u8; height];
            for x in 0..width {
                for y in 0..height {
                    col[y] = rows[y * width + x];
                }
                dilate_line(&col, radius, &mut col_out);
                for y in 0..height {
                    out[y * width + x] = col_out[y];
                }
            }
            Ok(out)
        }
    }
}

/// Pooled scores over a set of blocks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub masked_iou: f64,
    pub masked_dice: f64,
    pub iou: f64,
    pub dice: f64,
    pub n_blocks: usize,
    /// Blocks contributing to the masked scores (those with a boundary).
    pub n_masked_blocks: usize,
}

/// Accumulates intersections and unions over blocks before dividing. Blocks
/// without a ground-truth boundary count towards the plain scores only.
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    radius: usize,
    metric: DistanceMetric,
    masked: OverlapCounts,
    plain: OverlapCounts,
    n_blocks: usize,
    n_masked: usize,
}

impl Evaluator {
    pub fn new(radius: usize, metric: DistanceMetric) -> Self {
        Evaluator {
            radius,
            metric,
            ..Evaluator::default()
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], height: usize, width: usize) -> Result<()> {
        self.plain.add(overlap_counts(pred, gt, None)?);
        self.n_blocks += 1;
        match boundary_band(gt, height, width, self.radius, self.metric) {
            Ok(band) => {
                self.masked.add(overlap_counts(pred, gt, Some(&band))?);
                self.n_masked += 1;
                Ok(())
            }
            Err(LsrError::EmptyBand) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            masked_iou: self.masked.iou(),
            masked_dice: self.masked.dice(),
            iou: self.plain.iou(),
            dice: self.plain.dice(),
            n_blocks: self.n_blocks,
            n_masked_blocks: self.n_masked,
        }
    }
}

pub fn threshold(positive: &[f64], at: f64) -> Vec<u8> {
    positive.iter().map(|&p| (p >= at) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        assert_eq!(iou_dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(iou_dice(&[1, 0], &[0, 1]).unwrap(), (0.0, 0.0));
        assert_eq!(iou_dice(&[0, 0], &[0, 0]).unwrap(), (1.0, 1.0));
        let (iou, dice) = iou_dice(&[1, 1, 0], &[0, 1, 1]).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15 && dice == 0.5);
    }

    #[test]
    fn input_checks() {
        assert!(matches!(iou_dice(&[2], &[1]), Err(LsrError::NonBinaryMask(2))));
        assert!(matches!(iou_dice(&[1], &[1, 0]), Err(LsrError::ShapeMismatch { .. })));
        assert!(matches!(masked_iou_dice(&[1], &[1], &[0]), Err(LsrError::EmptyBand)));
    }

    #[test]
    fn column_boundary_band() {
        let mut gt = vec![0u8; 100];
        for y in 0..10 {
            for x in 5..10 {
                gt[y * 10 + x] = 1;
            }
        }
        let band = boundary_band(&gt, 10, 10, 2, DistanceMetric::Euclidean).unwrap();
        for y in 0..10 {
            let row: Vec<u8> = band[y * 10..][..10].to_vec();
            assert_eq!(row, vec![0, 0, 1, 1, 1, 1, 1, 1, 0, 0]);
        }
        let zero = boundary_band(&gt, 10, 10, 0, DistanceMetric::Euclidean).unwrap();
        assert_eq!(zero, boundary_pixels(&gt, 10, 10).unwrap());
        let all = boundary_band(&gt, 10, 10, 15, DistanceMetric::Euclidean).unwrap();
        assert!(all.iter().all(|&b| b == 1));
        assert!(matches!(
            boundary_band(&[1; 16], 4, 4, 3, DistanceMetric::Euclidean),
            Err(LsrError::EmptyBand)
        ));
    }

    #[test]
    fn chebyshev_band_is_square_dilation() {
        let mut gt = vec![0u8; 49];
        gt[24] = 1;
        let band = boundary_band(&gt, 7, 7, 1, DistanceMetric::Chebyshev).unwrap();
        // Boundary is the centre plus its four neighbours.
        for y in 0..7i64 {
            for x in 0..7i64 {
                let near = [(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)]
                    .iter()
                    .any(|&(by, bx)| (y - by).abs().max((x - bx).abs()) <= 1);
                assert_eq!(band[(y * 7 + x) as usize], near as u8, "{y},{x}");
            }
        }
    }

    #[test]
    fn pooled_evaluator_skips_uniform_blocks_for_masked() {
        let mut e = Evaluator::new(2, DistanceMetric::Euclidean);
        e.add(&[1, 1, 0, 0], &[1, 1, 0, 0], 2, 2).unwrap();
        e.add(&[1, 1, 1, 1], &[0, 0, 0, 0], 2, 2).unwrap();
        let s = e.summary();
        assert_eq!(s.masked_iou, 1.0);
        assert_eq!(s.n_masked_blocks, 1);
        assert!((s.iou - 2.0 / 6.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn band_matches_all_pairs(
            h in 1usize..9,
            w in 1usize..9,
            bits in proptest::collection::vec(0u8..2, 64),
            radius in 0usize..6,
            cheb in proptest::bool::ANY,
        ) {
            let gt = &bits[..h * w];
            let metric = if cheb { DistanceMetric::Chebyshev } else { DistanceMetric::Euclidean };
            let boundary = boundary_pixels(gt, h, w).unwrap();
            let seeds: Vec<(i64, i64)> = (0..h * w)
                .filter(|&i| boundary[i] == 1)
                .map(|i| ((i / w) as i64, (i % w) as i64))
                .collect();
            match boundary_band(gt, h, w, radius, metric) {
                Err(LsrError::EmptyBand) => proptest::prop_assert!(seeds.is_empty()),
                Err(e) => panic!("{e}"),
                Ok(band) => {
                    for i in 0..h * w {
                        let (y, x) = ((i / w) as i64, (i % w) as i64);
                        let near = seeds.iter().any(|&(sy, sx)| {
                            let (dy, dx) = ((y - sy).abs(), (x - sx).abs());
                            if cheb { dy.max(dx) <= radius as i64 } else { dy * dy + dx * dx <= (radius * radius) as i64 }
                        });
                        proptest::prop_assert_eq!(band[i], near as u8);
                    }
                }
            }
        }

        #[test]
        fn dice_iou_identity(
            pred in proptest::collection::vec(0u8..2, 1..50),
            salt in proptest::collection::vec(0u8..2, 50),
        ) {
            let gt = &salt[..pred.len()];
            let (iou, dice) = iou_dice(&pred, gt).unwrap();
            proptest::prop_assert!(dice >= iou);
            proptest::prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }
    }
}
