//! The three count-matching objectives. Each exists twice: a plain version
//! over [`ProbabilityMap`]s and a graph version over a `(N, L, H, W)`
//! probability tensor that training differentiates.

use serde::{Deserialize, Serialize};

use crate::countstats::{
    block_count_stats_with, check_alpha, gaussian_match_loss, inter_instance_stats, scale_target, tape,
    total_variance_stats, CountTarget, ProbabilityMap, VarianceNormalization,
};
use crate::diff::{Graph, Var};
use crate::error::{LsrError, Result};
use crate::synth::CountDistributionTable;

pub const MIN_GROUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Intra,
    Inter,
    IntraInter,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Intra => "intra",
            LossKind::Inter => "inter",
            LossKind::IntraInter => "intra_inter",
        }
    }

    pub fn grouped(self) -> bool {
        self != LossKind::Intra
    }
}

impl std::str::FromStr for LossKind {
    type Err = LsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(LossKind::Intra),
            "inter" => Ok(LossKind::Inter),
            "intra_inter" | "intra+inter" => Ok(LossKind::IntraInter),
            other => Err(LsrError::config("mode", format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMode {
    pub kind: LossKind,
    pub alpha: f64,
}

impl LossMode {
    pub fn new(kind: LossKind, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(LossMode { kind, alpha })
    }

    /// Scale actually applied to the target std.
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            LossKind::Inter => 1.0,
            _ => self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Match only the last (positive) class instead of averaging all classes.
    pub positive_only: bool,
    pub normalization: VarianceNormalization,
}

impl LossOptions {
    fn classes(&self, total: usize) -> std::ops::Range<usize> {
        if self.positive_only {
            total - 1..total
        } else {
            0..total
        }
    }
}

/// Target for `(class, z)` with its std multiplied by `alpha`.
pub fn scaled_target(table: &CountDistributionTable, class: usize, z: usize, alpha: f64) -> Result<CountTarget> {
    let row = table.row(z)?;
    if class >= table.classes {
        return Err(LsrError::OutOfRange {
            what: "class",
            value: class as f64,
        });
    }
    scale_target(CountTarget::new(row.eta[class], row.rho[class], alpha)?)
}

/// Blocks that share one low-resolution label.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub z: usize,
    pub maps: Vec<ProbabilityMap>,
}

impl Group {
    pub fn new(z: usize, maps: Vec<ProbabilityMap>) -> Result<Self> {
        if maps.len() < MIN_GROUP {
            return Err(LsrError::GroupTooSmall {
                size: maps.len(),
                min: MIN_GROUP,
            });
        }
        let l = maps[0].classes();
        if maps.iter().any(|m| m.classes() != l) {
            return Err(LsrError::MixedGroup("members disagree on class count".into()));
        }
        Ok(Group { z, maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn check_classes(table: &CountDistributionTable, maps: &[&ProbabilityMap]) -> Result<usize> {
    let l = maps.first().ok_or(LsrError::Empty("loss batch"))?.classes();
    if maps.iter().any(|m| m.classes() != l) || l != table.classes {
        return Err(LsrError::MixedGroup(format!(
            "predictions have {l} classes, table has {}",
            table.classes
        )));
    }
    Ok(l)
}

/// Mean over blocks and classes of the per-block matching loss.
pub fn intra_loss(
    batch: &[(ProbabilityMap, usize)],
    table: &CountDistributionTable,
    alpha: f64,
    opts: LossOptions,
) -> Result<f64> {
    let maps: Vec<&ProbabilityMap> = batch.iter().map(|(m, _)| m).collect();
    let l = check_classes(table, &maps)?;
    let classes = opts.classes(l);
    let mut total = 0.0;
    for (map, z) in batch {
        for c in classes.clone() {
            let s = block_count_stats_with(map, c, opts.normalization)?;
            let t = scaled_target(table, c, *z, alpha)?;
            total += gaussian_match_loss(s.mu, s.var, t.eta, t.rho)?;
        }
    }
    Ok(total / (batch.len() * classes.len()) as f64)
}

/// Matches the spread of block means against the unscaled target.
pub fn inter_loss(group: &Group, table: &CountDistributionTable, opts: LossOptions) -> Result<f64> {
    let maps: Vec<&ProbabilityMap> = group.maps.iter().collect();
    let l = check_classes(table, &maps)?;
    let classes = opts.classes(l);
    let mut total = 0.0;
    for c in classes.clone() {
        let mus = group
            .maps
            .iter()
            .map(|m| Ok(block_count_stats_with(m, c, opts.normalization)?.mu))
            .collect::<Result<Vec<f64>>>()?;
        let stats = inter_instance_stats(&mus)?;
        let t = scaled_target(table, c, group.z, 1.0)?;
        total += gaussian_match_loss(stats.mu, stats.var, t.eta, t.rho)?;
    }
    Ok(total / classes.len() as f64)
}

/// Matches the group's total count variance against the alpha-scaled target.
pub fn intra_inter_loss(group: &Group, table: &CountDistributionTable, alpha: f64, opts: LossOptions) -> Result<f64> {
    check_alpha(alpha)?;
    let maps: Vec<&ProbabilityMap> = group.maps.iter().collect();
    let l = check_classes(table, &maps)?;
    let classes = opts.classes(l);
    let mut total = 0.0;
    for c in classes.clone() {
        let stats = group
            .maps
            .iter()
            .map(|m| Ok(block_count_stats_with(m, c, opts.normalization)?.with_label(group.z)))
            .collect::<Result<Vec<_>>>()?;
        let tv = total_variance_stats(&stats)?;
        let t = scaled_target(table, c, group.z, alpha)?;
        total += gaussian_match_loss(tv.mu, tv.var, t.eta, t.rho)?;
    }
    Ok(total / classes.len() as f64)
}

/// Mean of per-group losses. Intra mode pools every block of every group.
pub fn batch_loss(groups: &[Group], mode: LossMode, table: &CountDistributionTable, opts: LossOptions) -> Result<f64> {
    check_alpha(mode.alpha)?;
    if groups.is_empty() {
        return Err(LsrError::Empty("batch_loss"));
    }
    if mode.kind == LossKind::Intra {
        let pool: Vec<(ProbabilityMap, usize)> = groups
            .iter()
            .flat_map(|g| g.maps.iter().map(move |m| (m.clone(), g.z)))
            .collect();
        return intra_loss(&pool, table, mode.alpha, opts);
    }
    let mut total = 0.0;
    for g in groups {
        total += match mode.kind {
            LossKind::Inter => inter_loss(g, table, opts)?,
            _ => intra_inter_loss(g, table, mode.alpha, opts)?,
        };
    }
    Ok(total / groups.len() as f64)
}

/// Layout of a batch tensor: consecutive runs of blocks, each run sharing a
/// label. Intra mode may use runs of length one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub labels: Vec<usize>,
    pub group_sizes: Vec<usize>,
}

impl BatchLayout {
    pub fn n_blocks(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// One `(start, len, z)` triple per run.
    pub fn runs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut start = 0;
        self.group_sizes.iter().zip(&self.labels).map(move |(&len, &z)| {
            let s = start;
            start += len;
            (s, len, z)
        })
    }
}

/// Graph version of [`batch_loss`] over the `(N, L, H, W)` tensor `probs`.
pub fn batch_loss_graph(
    g: &mut Graph,
    probs: Var,
    layout: &BatchLayout,
    mode: LossMode,
    table: &CountDistributionTable,
    opts: LossOptions,
) -> Result<Var> {
    check_alpha(mode.alpha)?;
    let shape = g.shape(probs).to_vec();
    if layout.labels.len() != layout.group_sizes.len() || shape.first() != Some(&layout.n_blocks()) {
        return Err(LsrError::ShapeMismatch {
            op: "batch_loss",
            lhs: shape,
            rhs: vec![layout.n_blocks()],
        });
    }
    if layout.labels.is_empty() {
        return Err(LsrError::Empty("batch_loss"));
    }
    let l = shape[1];
    if l != table.classes {
        return Err(LsrError::MixedGroup(format!("predictions have {l} classes, table has {}", table.classes)));
    }
    if mode.kind.grouped() {
        if let Some(&size) = layout.group_sizes.iter().find(|&&s| s < MIN_GROUP) {
            return Err(LsrError::GroupTooSmall { size, min: MIN_GROUP });
        }
    }
    let alpha = mode.effective_alpha();
    let classes = opts.classes(l);
    let mut per_class = Vec::with_capacity(classes.len());
    for c in classes {
        let (mus, vars) = tape::block_moments(g, probs, c, opts.normalization)?;
        let loss = if mode.kind == LossKind::Intra {
            let mut eta = Vec::new();
            let mut rho = Vec::new();
            for (_, len, z) in layout.runs() {
                let t = scaled_target(table, c, z, alpha)?;
                eta.extend(std::iter::repeat_n(t.eta, len));
                rho.extend(std::iter::repeat_n(t.rho, len));
            }
            let each = tape::match_loss(g, mus, vars, &eta, &rho)?;
            g.mean(each)?
        } else {
            let mut groups = Vec::with_capacity(layout.labels.len());
            for (start, len, z) in layout.runs() {
                let m = g.narrow(mus, 0, start, len)?;
                let (mu, var) = if mode.kind == LossKind::Inter {
                    tape::inter_moments(g, m)?
                } else {
                    let v = g.narrow(vars, 0, start, len)?;
                    tape::total_moments(g, m, v)?
                };
                let t = scaled_target(table, c, z, alpha)?;
                let gl = tape::match_loss(g, mu, var, &[t.eta], &[t.rho])?;
                groups.push(gl);
            }
            mean_of(g, &groups)?
        };
        per_class.push(loss);
    }
    mean_of(g, &per_class)
}

fn mean_of(g: &mut Graph, scalars: &[Var]) -> Result<Var> {
    let mut acc = scalars[0];
    for &s in &scalars[1..] {
        acc = g.add(acc, s)?;
    }
    g.affine(acc, 1.0 / scalars.len() as f64, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn table() -> CountDistributionTable {
        CountDistributionTable::reference_cancer_table()
    }

    fn map(seed: u64, pixels: usize) -> ProbabilityMap {
        let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        let p: Vec<f64> = (0..pixels)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                (x >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        ProbabilityMap::from_positive(4, pixels / 4, &p).unwrap()
    }

    /// Straight double loop with the loss formula written out inline.
    fn reference_intra(batch: &[(ProbabilityMap, usize)], t: &CountDistributionTable, alpha: f64) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (m, z) in batch {
            for c in 0..2 {
                let p = m.class_plane(c);
                let n = p.len() as f64;
                let mu: f64 = p.iter().sum::<f64>() / n;
                let var: f64 = p.iter().map(|q| q * (1.0 - q)).sum::<f64>() / (n * n);
                let row = t.row(*z).unwrap();
                let rho = alpha * row.rho[c];
                let v = var + 1e-8;
                acc += 0.5 * var * (row.eta[c] - mu).powi(2) / (rho * rho + v).powi(2)
                    + 0.5 * (2.0 * std::f64::consts::PI * v).ln();
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn uniform_eta_block_leaves_only_log_term() {
        let t = table();
        let eta = t.row(5).unwrap().eta[1];
        let m = ProbabilityMap::from_positive(4, 4, &[eta; 16]).unwrap();
        let var = eta * (1.0 - eta) / 16.0;
        let want = 0.5 * (2.0 * std::f64::consts::PI * (var + 1e-8)).ln();
        let got = intra_loss(&[(m.clone(), 5)], &t, 1.0, LossOptions::default()).unwrap();
        assert!((got - want).abs() < 1e-12);
        let twice = intra_loss(&[(m.clone(), 5), (m, 5)], &t, 1.0, LossOptions::default()).unwrap();
        assert!((twice - got).abs() < 1e-15);
    }

    #[test]
    fn intra_matches_double_loop() {
        let t = table();
        let batch: Vec<_> = (0..4).map(|i| (map(i, 16), (i as usize * 3) % 10)).collect();
        let got = intra_loss(&batch, &t, 0.6, LossOptions::default()).unwrap();
        assert!((got - reference_intra(&batch, &t, 0.6)).abs() < 1e-12);
    }

    #[test]
    fn constant_group_hits_floor() {
        let t = table();
        let eta = t.row(3).unwrap().eta[1];
        let m = ProbabilityMap::from_positive(2, 2, &[eta; 4]).unwrap();
        let g = Group::new(3, vec![m.clone(), m.clone(), m]).unwrap();
        let got = inter_loss(&g, &t, LossOptions::default()).unwrap();
        let want = 0.5 * (2.0 * std::f64::consts::PI * 1e-8).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn inter_matches_manual_formula_and_is_order_free() {
        let t = table();
        let maps: Vec<_> = (0..5).map(|i| map(10 + i, 16)).collect();
        let g = Group::new(7, maps.clone()).unwrap();
        let got = inter_loss(&g, &t, LossOptions::default()).unwrap();
        let mut want = 0.0;
        for c in 0..2 {
            let mus: Vec<f64> = maps.iter().map(|m| m.class_plane(c).iter().sum::<f64>() / 16.0).collect();
            let mu = mus.iter().sum::<f64>() / 5.0;
            let var = mus.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 5.0;
            let row = t.row(7).unwrap();
            want += gaussian_match_loss(mu, var, row.eta[c], row.rho[c]).unwrap() / 2.0;
        }
        assert!((got - want).abs() < 1e-12);
        let mut rev = maps;
        rev.reverse();
        let flipped = inter_loss(&Group::new(7, rev).unwrap(), &t, LossOptions::default()).unwrap();
        assert!((flipped - got).abs() < 1e-12);
    }

    #[test]
    fn identical_group_reduces_to_intra() {
        let t = table();
        let m = map(4, 16);
        let g = Group::new(2, vec![m.clone(); 4]).unwrap();
        let ii = intra_inter_loss(&g, &t, 1.0, LossOptions::default()).unwrap();
        let intra = intra_loss(&[(m, 2)], &t, 1.0, LossOptions::default()).unwrap();
        assert!((ii - intra).abs() < 1e-12);
    }

    #[test]
    fn intra_inter_matches_independent_total_variance() {
        let t = table();
        let maps: Vec<_> = (0..15).map(|i| map(100 + i, 16)).collect();
        let g = Group::new(8, maps.clone()).unwrap();
        let alpha = 0.8;
        let got = intra_inter_loss(&g, &t, alpha, LossOptions::default()).unwrap();
        let mut want = 0.0;
        for c in 0..2 {
            // Pool every pixel-Bernoulli second moment, then subtract the squared mean.
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for m in &maps {
                let p = m.class_plane(c);
                let mu_k = p.iter().sum::<f64>() / 16.0;
                let var_k = p.iter().map(|q| q * (1.0 - q)).sum::<f64>() / 256.0;
                m1 += mu_k / 15.0;
                m2 += (var_k + mu_k * mu_k) / 15.0;
            }
            let row = t.row(8).unwrap();
            want += gaussian_match_loss(m1, m2 - m1 * m1, row.eta[c], alpha * row.rho[c]).unwrap() / 2.0;
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_groups() {
        let t = table();
        let a = Group::new(1, (0..3).map(|i| map(i, 16)).collect()).unwrap();
        let b = Group::new(9, (3..6).map(|i| map(i, 16)).collect()).unwrap();
        let mode = LossMode::new(LossKind::IntraInter, 0.8).unwrap();
        let o = LossOptions::default();
        let la = batch_loss(std::slice::from_ref(&a), mode, &t, o).unwrap();
        let lb = intra_inter_loss(&b, &t, 0.8, o).unwrap();
        assert_eq!(la, intra_inter_loss(&a, &t, 0.8, o).unwrap());
        assert!((batch_loss(&[a.clone(), a.clone()], mode, &t, o).unwrap() - la).abs() < 1e-15);
        assert!((batch_loss(&[a, b], mode, &t, o).unwrap() - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let t = table();
        assert!(matches!(
            Group::new(0, vec![map(0, 16)]),
            Err(LsrError::GroupTooSmall { size: 1, min: 2 })
        ));
        assert!(matches!(
            intra_loss(&[(map(0, 16), 11)], &t, 1.0, LossOptions::default()),
            Err(LsrError::UnknownLabel(11))
        ));
        let g = Group::new(0, vec![map(0, 16), map(1, 16)]).unwrap();
        assert!(matches!(
            intra_inter_loss(&g, &t, 1.5, LossOptions::default()),
            Err(LsrError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn graph_loss_agrees_with_plain_path() {
        let t = table();
        let groups = [
            Group::new(2, (0..3).map(|i| map(20 + i, 16)).collect()).unwrap(),
            Group::new(6, (3..6).map(|i| map(20 + i, 16)).collect()).unwrap(),
        ];
        let data: Vec<f64> = groups.iter().flat_map(|g| g.maps.iter().flat_map(|m| m.data().to_vec())).collect();
        let layout = BatchLayout {
            labels: vec![2, 6],
            group_sizes: vec![3, 3],
        };
        for kind in [LossKind::Intra, LossKind::Inter, LossKind::IntraInter] {
            for positive_only in [false, true] {
                let opts = LossOptions {
                    positive_only,
                    ..LossOptions::default()
                };
                let mode = LossMode::new(kind, 0.6).unwrap();
                let mut g = Graph::new();
                let probs = g.constant(Tensor::new(vec![6, 2, 4, 4], data.clone()).unwrap()).unwrap();
                let v = batch_loss_graph(&mut g, probs, &layout, mode, &t, opts).unwrap();
                let plain = batch_loss(&groups, mode, &t, opts).unwrap();
                assert!((g.value(v).item().unwrap() - plain).abs() < 1e-12, "{kind:?}");
            }
        }
    }
}
