//! Gaussian moments of label counts.
//!
//! A block's predicted count fraction `c_l` is modelled as the mean of
//! independent per-pixel Bernoulli draws. Across a group of blocks sharing one
//! low-resolution label the moments aggregate either from per-block means
//! alone (inter-instance) or by the law of total variance (intra + inter).

pub mod tape;

use crate::error::{LsrError, Result};

/// Floor added to every variance inside the log and the denominator of
/// [`gaussian_match_loss`].
pub const VAR_FLOOR: f64 = 1e-8;

/// Per-pixel class probabilities for one block, laid out `(L, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(LsrError::ShapeMismatch {
                op: "probability map",
                lhs: vec![classes, height, width],
                rhs: vec![data.len()],
            });
        }
        if let Some(&bad) = data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(LsrError::OutOfRange {
                what: "probability",
                value: bad,
            });
        }
        Ok(ProbabilityMap {
            classes,
            height,
            width,
            data,
        })
    }

    /// Binary map from the positive-class plane; class 0 is the complement.
    pub fn from_positive(height: usize, width: usize, positive: &[f64]) -> Result<Self> {
        let mut data: Vec<f64> = positive.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(positive);
        Self::new(2, height, width, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn class_plane(&self, class: usize) -> &[f64] {
        &self.data[class * self.pixels()..][..self.pixels()]
    }
}

/// How the summed Bernoulli variances are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceNormalization {
    /// `Σ p(1-p) / |X|²`, the variance of a mean of independent indicators.
    #[default]
    PixelsSquared,
    /// `Σ p(1-p) / |X|`, kept for comparison runs.
    Pixels,
}

impl VarianceNormalization {
    pub fn divisor(self, pixels: usize) -> f64 {
        let n = pixels as f64;
        match self {
            VarianceNormalization::PixelsSquared => n * n,
            VarianceNormalization::Pixels => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCountStats {
    pub mu: f64,
    pub var: f64,
    pub block_size: usize,
    pub class_id: usize,
    pub low_res_label: Option<usize>,
}

impl BlockCountStats {
    pub fn with_label(mut self, z: usize) -> Self {
        self.low_res_label = Some(z);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    InterOnly,
    TotalVariance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchCountStats {
    pub mu: f64,
    pub var: f64,
    pub n_blocks: usize,
    pub mode: StatsMode,
    /// Set when the moments came from a single block, where the across-block
    /// variance is identically zero.
    pub single_block: bool,
}

/// Target count moments for one (class, low-resolution label) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountTarget {
    pub eta: f64,
    pub rho: f64,
    pub alpha: f64,
}

impl CountTarget {
    pub fn new(eta: f64, rho: f64, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(LsrError::OutOfRange { what: "eta", value: eta });
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(LsrError::OutOfRange { what: "rho", value: rho });
        }
        check_alpha(alpha)?;
        Ok(CountTarget { eta, rho, alpha })
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(LsrError::InvalidAlpha(alpha))
    }
}

pub fn block_count_stats(map: &ProbabilityMap, class: usize) -> Result<BlockCountStats> {
    block_count_stats_with(map, class, VarianceNormalization::default())
}

pub fn block_count_stats_with(
    map: &ProbabilityMap,
    class: usize,
    norm: VarianceNormalization,
) -> Result<BlockCountStats> {
    if map.pixels() == 0 {
        return Err(LsrError::Empty("block_count_stats"));
    }
    if class >= map.classes() {
        return Err(LsrError::OutOfRange {
            what: "class",
            value: class as f64,
        });
    }
    let plane = map.class_plane(class);
    let n = plane.len();
    let mu = plane.iter().sum::<f64>() / n as f64;
    let var = plane.iter().map(|p| p * (1.0 - p)).sum::<f64>() / norm.divisor(n);
    Ok(BlockCountStats {
        mu,
        var,
        block_size: n,
        class_id: class,
        low_res_label: None,
    })
}

fn mean_and_popvar(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Across-block moments treating each block's count as the constant `mu_k`.
/// The variance divides by `N`.
pub fn inter_instance_stats(mus: &[f64]) -> Result<BatchCountStats> {
    if mus.is_empty() {
        return Err(LsrError::Empty("inter_instance_stats"));
    }
    if let Some(&bad) = mus.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(LsrError::OutOfRange { what: "mu", value: bad });
    }
    let (mu, var) = mean_and_popvar(mus);
    Ok(BatchCountStats {
        mu,
        var,
        n_blocks: mus.len(),
        mode: StatsMode::InterOnly,
        single_block: mus.len() == 1,
    })
}

/// Across-block moments of a count drawn by picking a block uniformly and then
/// sampling its pixels: `E_k[σ²_k] + Var_k[μ_k]`.
pub fn total_variance_stats(stats: &[BlockCountStats]) -> Result<BatchCountStats> {
    let first = stats.first().ok_or(LsrError::Empty("total_variance_stats"))?;
    if let Some(other) = stats
        .iter()
        .find(|s| s.class_id != first.class_id || s.low_res_label != first.low_res_label)
    {
        return Err(LsrError::MixedGroup(format!(
            "class {} label {:?} vs class {} label {:?}",
            first.class_id, first.low_res_label, other.class_id, other.low_res_label
        )));
    }
    let mus: Vec<f64> = stats.iter().map(|s| s.mu).collect();
    let inter = inter_instance_stats(&mus)?;
    let mean_var = stats.iter().map(|s| s.var).sum::<f64>() / stats.len() as f64;
    Ok(BatchCountStats {
        mu: inter.mu,
        var: mean_var + inter.var,
        n_blocks: stats.len(),
        mode: StatsMode::TotalVariance,
        single_block: stats.len() == 1,
    })
}

/// Replaces `rho` by `alpha * rho`; `eta` is untouched.
pub fn scale_target(target: CountTarget) -> Result<CountTarget> {
    check_alpha(target.alpha)?;
    Ok(CountTarget {
        rho: target.alpha * target.rho,
        ..target
    })
}

/// `½·σ²(η−μ)²/(ρ²+σ²)² + ½·log(2πσ²)` with [`VAR_FLOOR`] added to `σ²`
/// inside the log and the denominator.
pub fn gaussian_match_loss(mu: f64, var: f64, eta: f64, rho: f64) -> Result<f64> {
    for (what, value) in [("mu", mu), ("var", var), ("eta", eta), ("rho", rho)] {
        if !value.is_finite() {
            return Err(LsrError::OutOfRange { what, value });
        }
    }
    if var < 0.0 {
        return Err(LsrError::OutOfRange { what: "var", value: var });
    }
    if rho < 0.0 {
        return Err(LsrError::OutOfRange { what: "rho", value: rho });
    }
    let v = var + VAR_FLOOR;
    let d = eta - mu;
    let denom = rho * rho + v;
    Ok(0.5 * var * d * d / (denom * denom) + 0.5 * (2.0 * std::f64::consts::PI * v).ln())
}

/// Analytic partials of [`gaussian_match_loss`] with respect to `(mu, var)`.
pub fn gaussian_match_loss_grad(mu: f64, var: f64, eta: f64, rho: f64) -> (f64, f64) {
    let v = var + VAR_FLOOR;
    let d = eta - mu;
    let denom = rho * rho + v;
    let d_mu = -var * d / (denom * denom);
    let d_var = 0.5 * d * d / (denom * denom) - var * d * d / (denom * denom * denom) + 0.5 / v;
    (d_mu, d_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary(p: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(1, 1, p.len(), p.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_and_symmetric_blocks() {
        let s = block_count_stats(&binary(&[1.0; 4]), 0).unwrap();
        assert_eq!((s.mu, s.var), (1.0, 0.0));
        let s = block_count_stats(&binary(&[0.5; 4]), 0).unwrap();
        assert_eq!((s.mu, s.var), (0.5, 0.0625));
    }

    #[test]
    fn per_pixel_normalisation_flag() {
        let s = block_count_stats_with(&binary(&[0.5; 4]), 0, VarianceNormalization::Pixels).unwrap();
        assert_eq!(s.var, 0.25);
    }

    #[test]
    fn empty_map_is_rejected() {
        let m = ProbabilityMap::new(1, 0, 0, vec![]).unwrap();
        assert!(matches!(block_count_stats(&m, 0), Err(LsrError::Empty(_))));
    }

    #[test]
    fn probability_out_of_range_is_rejected() {
        assert!(ProbabilityMap::new(1, 1, 2, vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn inter_examples() {
        let s = inter_instance_stats(&[0.3, 0.3, 0.3]).unwrap();
        assert!((s.mu - 0.3).abs() < 1e-15 && s.var.abs() < 1e-30);
        let s = inter_instance_stats(&[0.2, 0.4]).unwrap();
        assert!((s.mu - 0.3).abs() < 1e-15);
        assert!((s.var - 0.01).abs() < 1e-15);
        assert!(inter_instance_stats(&[]).is_err());
        let one = inter_instance_stats(&[0.4]).unwrap();
        assert!(one.single_block && one.var == 0.0);
    }

    #[test]
    fn inter_matches_pairwise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let n = xs.len() as f64;
        // Var = 1/(2N²) Σ_i Σ_j (x_i - x_j)², independent of the mean.
        let pairwise: f64 = xs
            .iter()
            .flat_map(|a| xs.iter().map(move |b| (a - b) * (a - b)))
            .sum::<f64>()
            / (2.0 * n * n);
        let s = inter_instance_stats(&xs).unwrap();
        assert!((s.var - pairwise).abs() < 1e-12);
    }

    fn stat(mu: f64, var: f64) -> BlockCountStats {
        BlockCountStats {
            mu,
            var,
            block_size: 16,
            class_id: 1,
            low_res_label: Some(3),
        }
    }

    #[test]
    fn total_variance_identical_and_single() {
        let s = total_variance_stats(&[stat(0.4, 0.01); 4]).unwrap();
        assert!((s.mu - 0.4).abs() < 1e-15 && (s.var - 0.01).abs() < 1e-15);
        let s = total_variance_stats(&[stat(0.7, 0.002)]).unwrap();
        assert_eq!((s.mu, s.var), (0.7, 0.002));
    }

    #[test]
    fn total_variance_rejects_mixed_labels() {
        let mut b = stat(0.2, 0.0);
        b.low_res_label = Some(4);
        assert!(matches!(total_variance_stats(&[stat(0.2, 0.0), b]), Err(LsrError::MixedGroup(_))));
    }

    #[test]
    fn scale_target_examples() {
        let t = CountTarget::new(0.7, 0.05, 1.0).unwrap();
        assert_eq!(scale_target(t).unwrap(), t);
        let s = scale_target(CountTarget::new(0.70, 0.05, 0.8).unwrap()).unwrap();
        assert!((s.rho - 0.04).abs() < 1e-15);
        assert_eq!(s.eta, 0.70);
        assert_eq!(s.alpha, 0.8);
        let z = scale_target(CountTarget::new(0.1, 0.0, 0.5).unwrap()).unwrap();
        assert_eq!(z.rho, 0.0);
        assert!(CountTarget::new(0.1, 0.1, 1.5).is_err());
        assert!(CountTarget::new(0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn match_loss_at_eta_is_log_term() {
        let v = 0.003;
        let l = gaussian_match_loss(0.4, v, 0.4, 0.1).unwrap();
        let expected = 0.5 * (2.0 * std::f64::consts::PI * (v + VAR_FLOOR)).ln();
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn match_loss_golden_value() {
        // 40-digit evaluation of the same expression, floor included.
        let golden = -0.103_648_107_787_165_344_692_432_6;
        let l = gaussian_match_loss(0.5, 0.01, 0.7, 0.05).unwrap();
        assert!((l - golden).abs() < 1e-14, "{l}");
    }

    #[test]
    fn match_loss_symmetric_in_offset() {
        let a = gaussian_match_loss(0.6, 0.01, 0.7, 0.05).unwrap();
        let b = gaussian_match_loss(0.8, 0.01, 0.7, 0.05).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn match_loss_rejects_bad_inputs() {
        assert!(gaussian_match_loss(f64::NAN, 0.1, 0.1, 0.1).is_err());
        assert!(gaussian_match_loss(0.1, -0.1, 0.1, 0.1).is_err());
        assert!(gaussian_match_loss(0.1, 0.1, 0.1, -0.1).is_err());
    }

    #[test]
    fn match_loss_gradient_matches_differences() {
        let (mu, var, eta, rho) = (0.35, 0.004, 0.6, 0.05);
        let (gm, gv) = gaussian_match_loss_grad(mu, var, eta, rho);
        let h = 1e-7;
        let f = |m: f64, v: f64| gaussian_match_loss(m, v, eta, rho).unwrap();
        let nm = (f(mu + h, var) - f(mu - h, var)) / (2.0 * h);
        let nv = (f(mu, var + h * 1e-2) - f(mu, var - h * 1e-2)) / (2.0 * h * 1e-2);
        assert!((gm - nm).abs() / nm.abs().max(1.0) < 1e-6);
        assert!((gv - nv).abs() / nv.abs().max(1.0) < 1e-6);
    }

    proptest! {
        #[test]
        fn block_variance_bounded(ps in proptest::collection::vec(0.0f64..=1.0, 1..64)) {
            let s = block_count_stats(&binary(&ps), 0).unwrap();
            let bound = 1.0 / (4.0 * ps.len() as f64);
            prop_assert!(s.var <= bound + 1e-15);
            prop_assert!((0.0..=1.0).contains(&s.mu));
        }

        #[test]
        fn total_variance_decomposes(
            blocks in proptest::collection::vec((0.0f64..=1.0, 0.0f64..0.01), 1..20)
        ) {
            let stats: Vec<_> = blocks.iter().map(|&(m, v)| stat(m, v)).collect();
            let tv = total_variance_stats(&stats).unwrap();
            let mus: Vec<f64> = blocks.iter().map(|b| b.0).collect();
            let inter = inter_instance_stats(&mus).unwrap();
            let mean_var = blocks.iter().map(|b| b.1).sum::<f64>() / blocks.len() as f64;
            prop_assert!((tv.var - (mean_var + inter.var)).abs() < 1e-12);
            prop_assert!(tv.var >= inter.var);
        }

        #[test]
        fn match_loss_minimised_at_eta(eta in 0.05f64..0.95, var in 1e-4f64..0.05, rho in 0.0f64..0.3) {
            let at_eta = gaussian_match_loss(eta, var, eta, rho).unwrap();
            for step in 0..=100 {
                let mu = step as f64 / 100.0;
                prop_assert!(gaussian_match_loss(mu, var, eta, rho).unwrap() >= at_eta);
            }
        }
    }

    #[test]
    fn equality_of_bound_only_at_half() {
        let s = block_count_stats(&binary(&[0.5, 0.5, 0.5, 0.49]), 0).unwrap();
        assert!(s.var < 1.0 / 16.0);
    }
}
