use proptest::prelude::*;
use statrs::distribution::{Beta, ContinuousCDF};

use lsr_core::synth::{
    annotation_sample, block_seed, build_table_mask_estimation, build_table_visual_approx, generate_block,
    generate_dataset, AnnotationPlan, AnnotatorNoise, DatasetBlock, GeneratorConfig, Split,
};

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < xs.len() {
        // Ties (fractions are multiples of 1/pixels) form one step.
        let mut j = i;
        while j < xs.len() && xs[j] == xs[i] {
            j += 1;
        }
        let f = cdf(xs[i]);
        d = d.max((i as f64 / n - f).abs()).max((j as f64 / n - f).abs());
        i = j;
    }
    d
}

#[test]
fn true_fractions_follow_configured_beta() {
    let cfg = GeneratorConfig::default();
    let fractions: Vec<f64> = (0..10_000u32)
        .map(|i| generate_block(block_seed(99, i), &cfg).unwrap().true_fraction)
        .collect();
    let beta = Beta::new(cfg.fraction_beta_a, cfg.fraction_beta_b).unwrap();
    let d = ks_statistic(fractions, |x| beta.cdf(x));
    assert!(d < 0.02, "KS statistic {d}");
}

fn default_data(seed: u64) -> lsr_core::synth::Dataset {
    generate_dataset(&GeneratorConfig::default(), seed).unwrap()
}

#[test]
fn capped_tables_track_exhaustive_table_and_rise_with_label() {
    let ds = default_data(5);
    let train = ds.split(Split::Train);
    let bins = &ds.config.bins;
    let full = build_table_mask_estimation(&train, bins, usize::MAX).unwrap();
    let capped = build_table_mask_estimation(&train, bins, 20).unwrap();
    for (c, f) in capped.rows.iter().zip(&full.rows) {
        let n = c.n_samples as f64;
        assert!((c.eta[1] - f.eta[1]).abs() < 3.0 * f.rho[1] / n.sqrt(), "bin {}", c.bin);
    }
    for w in full.rows.windows(2) {
        let slack = 2.0 * w[0].rho[1].max(w[1].rho[1]) / (w[0].n_samples.min(w[1].n_samples) as f64).sqrt();
        assert!(w[1].eta[1] >= w[0].eta[1] - slack, "inversion at bin {}", w[1].bin);
    }
}

#[test]
fn visual_tables_are_reproducible_and_differ_from_mask_tables() {
    let ds = default_data(6);
    let train = ds.split(Split::Train);
    let sample: Vec<&DatasetBlock> = annotation_sample(&train, ds.config.bins.len(), AnnotationPlan::default(), 1);
    let bins = &ds.config.bins;
    let noise = AnnotatorNoise::default();
    let a = build_table_visual_approx(&sample, bins, 20, noise, 4).unwrap();
    let b = build_table_visual_approx(&sample, bins, 20, noise, 4).unwrap();
    assert_eq!(a, b);
    let mask = build_table_mask_estimation(&sample, bins, 20).unwrap();
    assert!(a.rows.iter().zip(&mask.rows).any(|(v, m)| v.eta[1] != m.eta[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tables_satisfy_binary_complement(seed in 0u64..1_000, additive in 0.0f64..0.2, mult in 0.0f64..0.3) {
        let cfg = GeneratorConfig { block_side: 8, n_train: 400, n_val: 0, n_test: 0, ..GeneratorConfig::default() };
        let ds = generate_dataset(&cfg, seed).unwrap();
        let train = ds.split(Split::Train);
        let noise = AnnotatorNoise { additive_std: additive, multiplicative_std: mult };
        let tables = [
            build_table_mask_estimation(&train, &cfg.bins, 20).unwrap(),
            build_table_visual_approx(&train, &cfg.bins, 20, noise, seed).unwrap(),
        ];
        for t in &tables {
            for r in &t.rows {
                prop_assert_eq!(r.eta[0].to_bits(), (1.0 - r.eta[1]).to_bits());
                prop_assert_eq!(r.rho[0].to_bits(), r.rho[1].to_bits());
                prop_assert!(r.rho[1] >= 0.0 && (0.0..=1.0).contains(&r.eta[1]));
            }
        }
    }
}
