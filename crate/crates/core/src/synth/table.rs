use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BinScheme, DatasetBlock};
use crate::countstats::CountTarget;
use crate::error::{LsrError, Result};
use crate::seed;

const TABLE_MAGIC: &str = "# lsr count-distribution table v1";
const STREAM_ANNOTATOR: u64 = 0x414e_4e4f_5400_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MaskEstimated,
    VisualApprox,
    Reference,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::MaskEstimated => "mask_estimated",
            Provenance::VisualApprox => "visual_approx",
            Provenance::Reference => "reference",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "mask_estimated" => Ok(Provenance::MaskEstimated),
            "visual_approx" => Ok(Provenance::VisualApprox),
            "reference" => Ok(Provenance::Reference),
            other => Err(LsrError::format("table", format!("unknown provenance `{other}`"))),
        }
    }
}

/// Target moments of every class for one low-resolution bin.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    /// Indexed by class; for binary tables class 1 is the positive class.
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountDistributionTable {
    pub classes: usize,
    pub provenance: Provenance,
    pub alpha: f64,
    pub rows: Vec<TableRow>,
}

impl CountDistributionTable {
    pub fn row(&self, z: usize) -> Result<&TableRow> {
        self.rows.iter().find(|r| r.bin == z).ok_or(LsrError::UnknownLabel(z))
    }

    /// Unscaled target, stamped with the table's default `alpha`.
    pub fn target(&self, class: usize, z: usize) -> Result<CountTarget> {
        let row = self.row(z)?;
        if class >= self.classes {
            return Err(LsrError::OutOfRange {
                what: "class",
                value: class as f64,
            });
        }
        CountTarget::new(row.eta[class], row.rho[class], self.alpha)
    }

    pub fn positive_eta(&self, z: usize) -> Result<f64> {
        Ok(self.row(z)?.eta[self.classes - 1])
    }

    /// The count table used to label the pathology blocks this lab imitates,
    /// in fractions rather than percent.
    pub fn reference_cancer_table() -> Self {
        let cancer = [
            (0.0, 0.001),
            (0.01, 0.004),
            (0.02, 0.004),
            (0.05, 0.008),
            (0.06, 0.01),
            (0.08, 0.01),
            (0.10, 0.01),
            (0.10, 0.01),
            (0.20, 0.02),
            (0.70, 0.05),
        ];
        let bins = BinScheme::default();
        let rows = cancer
            .iter()
            .enumerate()
            .map(|(z, &(eta, rho))| {
                let (lo, hi) = bins.bounds(z);
                TableRow {
                    bin: z,
                    lo,
                    hi,
                    eta: vec![1.0 - eta, eta],
                    rho: vec![rho, rho],
                    n_samples: 0,
                }
            })
            .collect();
        CountDistributionTable {
            classes: 2,
            provenance: Provenance::Reference,
            alpha: 1.0,
            rows,
        }
    }

    /// Plain-text rendering, one row per bin. `meta` pairs are written into the
    /// header as `key=value`.
    pub fn to_text(&self, meta: &[(String, String)]) -> String {
        let mut s = String::new();
        writeln!(s, "{TABLE_MAGIC}").unwrap();
        for (k, v) in meta {
            writeln!(s, "# {k}={v}").unwrap();
        }
        writeln!(
            s,
            "# provenance={} classes={} alpha={}",
            self.provenance.as_str(),
            self.classes,
            self.alpha
        )
        .unwrap();
        let mut header = String::from("# z\tbin%");
        for c in 0..self.classes {
            write!(header, "\teta_{c}\trho_{c}").unwrap();
        }
        header.push_str("\tn\tlo\thi");
        writeln!(s, "{header}").unwrap();
        for r in &self.rows {
            write!(s, "{}\t{}-{}", r.bin, percent(r.lo), percent(r.hi)).unwrap();
            for c in 0..self.classes {
                write!(s, "\t{}\t{}", r.eta[c], r.rho[c]).unwrap();
            }
            writeln!(s, "\t{}\t{}\t{}", r.n_samples, r.lo, r.hi).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TABLE_MAGIC) {
            return Err(LsrError::format("table", "missing version header"));
        }
        let mut classes = None;
        let mut provenance = None;
        let mut alpha = None;
        let mut rows = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("provenance", v)) => provenance = Some(Provenance::parse(v)?),
                        Some(("classes", v)) => classes = Some(parse_num::<usize>(v)?),
                        Some(("alpha", v)) => alpha = Some(parse_num::<f64>(v)?),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let l = classes.ok_or_else(|| LsrError::format("table", "row before classes header"))?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 + 2 * l + 3 {
                return Err(LsrError::format("table", format!("row has {} columns", cols.len())));
            }
            let mut eta = Vec::with_capacity(l);
            let mut rho = Vec::with_capacity(l);
            for c in 0..l {
                eta.push(parse_num::<f64>(cols[2 + 2 * c])?);
                rho.push(parse_num::<f64>(cols[3 + 2 * c])?);
            }
            rows.push(TableRow {
                bin: parse_num(cols[0])?,
                eta,
                rho,
                n_samples: parse_num(cols[2 + 2 * l])?,
                lo: parse_num(cols[3 + 2 * l])?,
                hi: parse_num(cols[4 + 2 * l])?,
            });
        }
        Ok(CountDistributionTable {
            classes: classes.ok_or_else(|| LsrError::format("table", "missing classes"))?,
            provenance: provenance.ok_or_else(|| LsrError::format("table", "missing provenance"))?,
            alpha: alpha.ok_or_else(|| LsrError::format("table", "missing alpha"))?,
            rows,
        })
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| LsrError::format("table", format!("bad number `{s}`")))
}

fn percent(x: f64) -> String {
    let p = x * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// How many blocks per bin an annotator examines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPlan {
    pub total: usize,
    pub min_per_bin: usize,
    pub max_per_bin: usize,
}

impl Default for AnnotationPlan {
    fn default() -> Self {
        AnnotationPlan {
            total: 167,
            min_per_bin: 12,
            max_per_bin: 20,
        }
    }
}

/// Draws an annotation subset: every bin first receives up to `min_per_bin`
/// blocks, then bins are topped up round-robin (capped at `max_per_bin`) until
/// `total` is reached. Returned in block-id order.
pub fn annotation_sample<'a>(
    blocks: &[&'a DatasetBlock],
    n_bins: usize,
    plan: AnnotationPlan,
    seed: u64,
) -> Vec<&'a DatasetBlock> {
    let mut per_bin: Vec<Vec<&DatasetBlock>> = vec![Vec::new(); n_bins];
    let mut sorted = blocks.to_vec();
    sorted.sort_by_key(|b| b.block_id);
    for b in sorted {
        if b.low_res_label < n_bins {
            per_bin[b.low_res_label].push(b);
        }
    }
    for (z, cands) in per_bin.iter_mut().enumerate() {
        cands.shuffle(&mut seed::rng(seed::derive(seed, z as u64)));
    }
    let mut take: Vec<usize> = per_bin.iter().map(|c| c.len().min(plan.min_per_bin)).collect();
    let mut taken: usize = take.iter().sum();
    loop {
        let mut grew = false;
        for z in 0..n_bins {
            if taken >= plan.total {
                break;
            }
            if take[z] < per_bin[z].len() && take[z] < plan.max_per_bin {
                take[z] += 1;
                taken += 1;
                grew = true;
            }
        }
        if !grew || taken >= plan.total {
            break;
        }
    }
    let mut out: Vec<&DatasetBlock> = per_bin.iter().zip(&take).flat_map(|(c, &k)| c[..k].iter().copied()).collect();
    out.sort_by_key(|b| b.block_id);
    out
}

/// Annotator error applied to each examined fraction before aggregation:
/// `clamp(f * (1 + mult * e1) + add * e2, 0, 1)` with standard normal `e1, e2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorNoise {
    pub additive_std: f64,
    pub multiplicative_std: f64,
}

impl Default for AnnotatorNoise {
    fn default() -> Self {
        AnnotatorNoise {
            additive_std: 0.05,
            multiplicative_std: 0.0,
        }
    }
}

impl AnnotatorNoise {
    pub fn none() -> Self {
        AnnotatorNoise {
            additive_std: 0.0,
            multiplicative_std: 0.0,
        }
    }
}

/// Exact fractions read off the ground-truth masks.
pub fn build_table_mask_estimation(
    blocks: &[&DatasetBlock],
    bins: &BinScheme,
    per_z_cap: usize,
) -> Result<CountDistributionTable> {
    build_table(blocks, bins, per_z_cap, Provenance::MaskEstimated, |b| b.true_fraction())
}

/// Fractions as an annotator would eyeball them; noise is keyed per block so
/// the result does not depend on block order.
pub fn build_table_visual_approx(
    blocks: &[&DatasetBlock],
    bins: &BinScheme,
    per_z_cap: usize,
    noise: AnnotatorNoise,
    seed: u64,
) -> Result<CountDistributionTable> {
    if !(noise.additive_std >= 0.0 && noise.multiplicative_std >= 0.0) {
        return Err(LsrError::config("annotator noise", "std must be non-negative"));
    }
    build_table(blocks, bins, per_z_cap, Provenance::VisualApprox, |b| {
        let mut rng = seed::rng(seed::derive(seed::derive(seed, STREAM_ANNOTATOR), b.block_id as u64));
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let f = b.true_fraction();
        (f * (1.0 + noise.multiplicative_std * e1) + noise.additive_std * e2).clamp(0.0, 1.0)
    })
}

fn build_table(
    blocks: &[&DatasetBlock],
    bins: &BinScheme,
    per_z_cap: usize,
    provenance: Provenance,
    observe: impl Fn(&DatasetBlock) -> f64,
) -> Result<CountDistributionTable> {
    if per_z_cap < 2 {
        return Err(LsrError::config("cap", "must be at least 2"));
    }
    let mut sorted = blocks.to_vec();
    sorted.sort_by_key(|b| b.block_id);
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    for b in sorted {
        let slot = per_bin
            .get_mut(b.low_res_label)
            .ok_or(LsrError::UnknownLabel(b.low_res_label))?;
        if slot.len() < per_z_cap {
            slot.push(observe(b));
        }
    }
    let under: Vec<usize> = (0..bins.len()).filter(|&z| per_bin[z].len() < 2).collect();
    if !under.is_empty() {
        return Err(LsrError::UnderSampledBins { bins: under, min: 2 });
    }
    let rows = per_bin
        .iter()
        .enumerate()
        .map(|(z, fr)| {
            let n = fr.len() as f64;
            let eta = fr.iter().sum::<f64>() / n;
            let rho = (fr.iter().map(|f| (f - eta) * (f - eta)).sum::<f64>() / n).sqrt();
            let (lo, hi) = bins.bounds(z);
            TableRow {
                bin: z,
                lo,
                hi,
                eta: vec![1.0 - eta, eta],
                rho: vec![rho, rho],
                n_samples: fr.len(),
            }
        })
        .collect();
    Ok(CountDistributionTable {
        classes: 2,
        provenance,
        alpha: 1.0,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{GeneratedBlock, Split};

    fn block(id: u32, z: usize, fraction: f64) -> DatasetBlock {
        DatasetBlock {
            block_id: id,
            split: Split::Train,
            block: GeneratedBlock {
                seed: id as u64,
                side: 1,
                channels: 1,
                image: vec![0.0],
                gt_mask: vec![0],
                true_fraction: fraction,
                quadrant_fractions: [fraction; 4],
            },
            low_res_label: z,
        }
    }

    fn two_bins() -> BinScheme {
        BinScheme {
            edges: vec![0.0, 0.5, 1.0],
        }
    }

    #[test]
    fn constant_bin_has_zero_rho_and_pair_has_popstd() {
        let bs = [block(0, 0, 0.3), block(1, 0, 0.3), block(2, 1, 0.2), block(3, 1, 0.4)];
        let refs: Vec<&DatasetBlock> = bs.iter().collect();
        let t = build_table_mask_estimation(&refs, &two_bins(), 20).unwrap();
        let r0 = t.row(0).unwrap();
        assert!((r0.eta[1] - 0.3).abs() < 1e-15 && r0.rho[1] == 0.0);
        let r1 = t.row(1).unwrap();
        assert!((r1.eta[1] - 0.3).abs() < 1e-15);
        assert!((r1.rho[1] - 0.1).abs() < 1e-15);
        assert_eq!(r1.eta[0], 1.0 - r1.eta[1]);
        assert_eq!(r1.rho[0], r1.rho[1]);
    }

    #[test]
    fn under_sampled_bins_are_listed() {
        let bs = [block(0, 0, 0.3), block(1, 0, 0.3), block(2, 1, 0.2)];
        let refs: Vec<&DatasetBlock> = bs.iter().collect();
        match build_table_mask_estimation(&refs, &two_bins(), 20) {
            Err(LsrError::UnderSampledBins { bins, .. }) => assert_eq!(bins, vec![1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_noise_visual_equals_mask() {
        let bs: Vec<DatasetBlock> = (0..8).map(|i| block(i, (i % 2) as usize, i as f64 / 10.0)).collect();
        let refs: Vec<&DatasetBlock> = bs.iter().collect();
        let m = build_table_mask_estimation(&refs, &two_bins(), 20).unwrap();
        let v = build_table_visual_approx(&refs, &two_bins(), 20, AnnotatorNoise::none(), 3).unwrap();
        assert_eq!(m.rows, v.rows);
        assert_eq!(v.provenance, Provenance::VisualApprox);
    }

    #[test]
    fn text_round_trip() {
        let t = CountDistributionTable::reference_cancer_table();
        let text = t.to_text(&[("seed".into(), "7".into())]);
        assert!(text.contains("9\t95-100\t"));
        let back = CountDistributionTable::from_text(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.positive_eta(9).unwrap(), 0.70);
    }

    #[test]
    fn unknown_label_lookup() {
        let t = CountDistributionTable::reference_cancer_table();
        assert!(matches!(t.target(1, 10), Err(LsrError::UnknownLabel(10))));
    }

    #[test]
    fn annotation_sample_respects_plan() {
        let bs: Vec<DatasetBlock> = (0..400).map(|i| block(i, (i % 10) as usize, 0.1)).collect();
        let refs: Vec<&DatasetBlock> = bs.iter().collect();
        let s = annotation_sample(&refs, 10, AnnotationPlan::default(), 1);
        assert_eq!(s.len(), 167);
        let mut counts = [0; 10];
        for b in &s {
            counts[b.low_res_label] += 1;
        }
        assert!(counts.iter().all(|&c| (12..=20).contains(&c)), "{counts:?}");
        assert!(s.windows(2).all(|w| w[0].block_id < w[1].block_id));
    }
}
