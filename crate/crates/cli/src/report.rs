//! Comparison tables and the boundary overlay image.

use lsr_core::metrics::{boundary_pixels, DistanceMetric, EvalSummary};
use lsr_core::model::ModelParams;
use lsr_core::synth::{CountDistributionTable, Dataset, DatasetBlock, Split};
use lsr_core::train::{evaluate_masks, low_res_masks, predict_masks, AlphaSweep};
use lsr_core::Result;

const LOW_RES: [u8; 3] = [0, 200, 0];
const GT: [u8; 3] = [230, 20, 20];
const INTRA: [u8; 3] = [0, 220, 220];
const INTRA_INTER: [u8; 3] = [30, 60, 255];
const GAP: usize = 2;

pub struct ReportInputs {
    pub intra: ModelParams,
    pub intra_inter: ModelParams,
    pub supervised: Option<ModelParams>,
    pub intra_visual: Option<ModelParams>,
    pub intra_inter_visual: Option<ModelParams>,
    pub alpha_sweep: Option<String>,
}

pub struct ReportOutput {
    /// File name and body, in emission order.
    pub tables: Vec<(String, String)>,
    pub overlay: Vec<u8>,
    pub overlay_size: (usize, usize),
}

fn score_row(name: &str, s: &EvalSummary) -> String {
    format!("{name}\t{:.4}\t{:.4}\n", s.masked_iou, s.masked_dice)
}

/// Columns are the swept alphas, one row per score plus one per bin for the
/// matched positive-class std.
pub fn alpha_table(sweep: &AlphaSweep) -> String {
    let mut out = String::from("alpha");
    for r in &sweep.rows {
        out.push_str(&format!("\t{}", r.alpha));
    }
    out.push('\n');
    type Score = fn(&EvalSummary) -> f64;
    let score_lines: [(&str, Score); 4] = [
        ("masked_iou", |s| s.masked_iou),
        ("masked_dice", |s| s.masked_dice),
        ("iou", |s| s.iou),
        ("dice", |s| s.dice),
    ];
    for (name, get) in score_lines {
        out.push_str(name);
        for r in &sweep.rows {
            out.push_str(&format!("\t{}", get(&r.test)));
        }
        out.push('\n');
    }
    let bins = sweep.rows.first().map_or(0, |r| r.target_std.len());
    for z in 0..bins {
        out.push_str(&format!("target_std_z{z}"));
        for r in &sweep.rows {
            out.push_str(&format!("\t{}", r.target_std[z]));
        }
        out.push('\n');
    }
    if let Some(best) = sweep.best() {
        out.push_str(&format!("# best_alpha={}\n", best.alpha));
    }
    out
}

fn edges(mask: &[u8], side: usize) -> Result<Vec<u8>> {
    boundary_pixels(mask, side, side)
}

fn figure_blocks<'a>(blocks: &[&'a DatasetBlock], n: usize) -> Vec<&'a DatasetBlock> {
    blocks
        .iter()
        .filter(|b| {
            let m = &b.block.gt_mask;
            m.contains(&1) && m.contains(&0)
        })
        .take(n)
        .copied()
        .collect()
}

/// Binary PPM mosaic. Each tile shows the block image with ground-truth and
/// predicted boundaries drawn on top; tiles the low-resolution model calls
/// positive get a frame.
fn overlay(
    blocks: &[&DatasetBlock],
    low_res: &[Vec<u8>],
    intra: &[Vec<u8>],
    intra_inter: &[Vec<u8>],
) -> Result<(Vec<u8>, (usize, usize))> {
    let n = blocks.len().max(1);
    let side = blocks.first().map_or(1, |b| b.side());
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let width = cols * side + (cols + 1) * GAP;
    let height = rows * side + (rows + 1) * GAP;
    let mut px = vec![255u8; width * height * 3];
    for (k, b) in blocks.iter().enumerate() {
        let x0 = GAP + (k % cols) * (side + GAP);
        let y0 = GAP + (k / cols) * (side + GAP);
        let c = b.block.channels;
        let plane = side * side;
        let layers = [
            (edges(&b.block.gt_mask, side)?, GT),
            (edges(&intra[k], side)?, INTRA),
            (edges(&intra_inter[k], side)?, INTRA_INTER),
        ];
        let framed = low_res[k].first() == Some(&1);
        for y in 0..side {
            for x in 0..side {
                let i = y * side + x;
                let mut rgb = [0u8; 3];
                for (ch, v) in rgb.iter_mut().enumerate() {
                    let src = if c >= 3 { ch } else { 0 };
                    *v = (b.block.image[src * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
                for (layer, colour) in &layers {
                    if layer[i] == 1 {
                        rgb = *colour;
                    }
                }
                if framed && (x == 0 || y == 0 || x + 1 == side || y + 1 == side) {
                    rgb = LOW_RES;
                }
                let o = ((y0 + y) * width + x0 + x) * 3;
                px[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok((out, (width, height)))
}

pub fn build(
    ds: &Dataset,
    table: &CountDistributionTable,
    inputs: &ReportInputs,
    radius: usize,
    n_figure: usize,
) -> Result<ReportOutput> {
    let test = ds.split(Split::Test);
    let metric = DistanceMetric::Euclidean;
    let low_res = low_res_masks(&test, table)?;
    let intra = predict_masks(&inputs.intra, &test)?;
    let intra_inter = predict_masks(&inputs.intra_inter, &test)?;
    let s_low = evaluate_masks(&low_res, &test, radius, metric)?;
    let s_intra = evaluate_masks(&intra, &test, radius, metric)?;
    let s_both = evaluate_masks(&intra_inter, &test, radius, metric)?;

    let head = "method\tmasked_iou\tmasked_dice\n";
    let table3 = format!(
        "{head}{}{}{}",
        score_row("Low resolution model", &s_low),
        score_row("Intra-instance", &s_intra),
        score_row("Intra+inter-instance", &s_both)
    );
    let mut tables = vec![("table3.tsv".to_string(), table3)];

    let mut table4 = format!("{head}{}", score_row("Low resolution model", &s_low));
    if let Some(p) = &inputs.supervised {
        let s = evaluate_masks(&predict_masks(p, &test)?, &test, radius, metric)?;
        table4.push_str(&score_row("Limited high-res supervision", &s));
    }
    let variants = [
        ("Intra-instance, visual approximation", inputs.intra_visual.as_ref()),
        ("Intra+inter-instance, visual approximation", inputs.intra_inter_visual.as_ref()),
    ];
    for (name, p) in variants {
        if let Some(p) = p {
            let s = evaluate_masks(&predict_masks(p, &test)?, &test, radius, metric)?;
            table4.push_str(&score_row(name, &s));
        }
    }
    table4.push_str(&score_row("Intra-instance, mask estimation", &s_intra));
    table4.push_str(&score_row("Intra+inter-instance, mask estimation", &s_both));
    tables.push(("table4.tsv".to_string(), table4));

    if let Some(text) = &inputs.alpha_sweep {
        let body: String = text
            .lines()
            .filter(|l| !l.starts_with("# tool=") && !l.starts_with("# config_hash=") && !l.starts_with("# seed="))
            .map(|l| format!("{l}\n"))
            .collect();
        tables.push(("alpha.tsv".to_string(), body));
    }

    let picked = figure_blocks(&test, n_figure);
    let ids: Vec<usize> = picked
        .iter()
        .map(|p| test.iter().position(|t| t.block_id == p.block_id).unwrap_or(0))
        .collect();
    let pick = |v: &[Vec<u8>]| ids.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let (overlay, overlay_size) = overlay(&picked, &pick(&low_res), &pick(&intra), &pick(&intra_inter))?;
    Ok(ReportOutput {
        tables,
        overlay,
        overlay_size,
    })
}
