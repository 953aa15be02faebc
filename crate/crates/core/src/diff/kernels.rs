//! Raw loops behind the spatial primitives. Layout is always `(N, C, H, W)`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel_w
    }

    /// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = (self.width + self.padding).saturating_sub(kx).min(self.out_w());
        (lo, hi)
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(ky);
        let hi = (self.height + self.padding).saturating_sub(ky).min(self.out_h());
        (lo, hi)
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0; g.batch * g.out_channels * ho * wo];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let plane = &mut out[(n * g.out_channels + o) * ho * wo..][..ho * wo];
            if let Some(b) = bias {
                plane.fill(b[o]);
            }
            for c in 0..g.in_channels {
                let x = &input[(n * g.in_channels + c) * h * w..][..h * w];
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..g.kernel_w {
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = kernel[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                        let ix_lo = ox_lo + kx - g.padding;
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.padding;
                            let orow = &mut plane[oy * wo + ox_lo..][..len];
                            let irow = &x[iy * w + ix_lo..][..len];
                            for (dst, src) in orow.iter_mut().zip(irow) {
                                *dst += wv * src;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`; entries are computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (h, w) = (g.height, g.width);
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut gb = want_bias.then(|| vec![0.0; g.out_channels]);

    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + o) * ho * wo..][..ho * wo];
            if let Some(gb) = gb.as_mut() {
                gb[o] += go.iter().sum::<f64>();
            }
            if gin.is_none() && gk.is_none() {
                continue;
            }
            for c in 0..g.in_channels {
                let base = (n * g.in_channels + c) * h * w;
                let x = &input[base..][..h * w];
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..g.kernel_w {
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let kidx = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                        let wv = kernel[kidx];
                        let ix_lo = ox_lo + kx - g.padding;
                        let len = ox_hi - ox_lo;
                        let mut dot = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.padding;
                            let grow = &go[oy * wo + ox_lo..][..len];
                            if gk.is_some() {
                                let irow = &x[iy * w + ix_lo..][..len];
                                dot += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gin) = gin.as_mut() {
                                let dst = &mut gin[base + iy * w + ix_lo..][..len];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += dot;
                        }
                    }
                }
            }
        }
    }
    (gin, gk, gb)
}

/// 2x2 stride-2 max pooling. The second return value holds, per output, the
/// flat input index of the winner; ties resolve to the first in row-major scan.
pub(crate) fn maxpool2_forward(shape: &[usize], input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(shape: &[usize], input: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / 2) * w..][..w];
            let drow = &mut dst[oy * wo..][..wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(in_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gin = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &grad_out[p * ho * wo..][..ho * wo];
        let dst = &mut gin[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a padded cross-correlation, one output at a time.
    fn conv_reference(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_channels * ho * wo];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = oy as isize + ky as isize - g.padding as isize;
                                    let ix = ox as isize + kx as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                    let kv = k[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 3,
            height: 5,
            width: 6,
            out_channels: 2,
            kernel_h: 3,
            kernel_w: 3,
            padding: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
        let fast = conv2d_forward(&g, &x, &k, None);
        let slow = conv_reference(&g, &x, &k);
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (out, arg) = maxpool2_forward(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
