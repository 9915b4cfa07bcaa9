//! Direct 2-D convolution kernels on `[C, H, W]` maps.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let span_h = self.in_h + 2 * self.pad;
        let span_w = self.in_w + 2 * self.pad;
        if self.stride == 0 || span_h < self.kernel || span_w < self.kernel {
            return None;
        }
        Some((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn valid_cols(&self, kx: usize, out_w: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= in_w - 1
        let hi = (self.in_w as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, (hi.max(0) as usize).min(out_w))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

pub fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = g.out_hw().expect("validated geometry");
    let k = g.kernel;
    let mut out = vec![0.0; g.out_ch * oh * ow];
    for o in 0..g.out_ch {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b[o]);
        }
        for c in 0..g.in_ch {
            let xin = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * g.in_ch + c) * k + ky) * k + kx];
                    let (lo, hi) = g.valid_cols(kx, ow);
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &xin[iy * g.in_w..(iy + 1) * g.in_w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            dst[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for upstream gradient `gout`.
pub fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = g.out_hw().expect("validated geometry");
    let k = g.kernel;
    if let Some(gb) = gb {
        for o in 0..g.out_ch {
            gb[o] += gout[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    for o in 0..g.out_ch {
        let gplane = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_ch {
            let base = c * g.in_h * g.in_w;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * g.in_ch + c) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (lo, hi) = g.valid_cols(kx, ow);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let start = base + iy * g.in_w;
                        if let Some(gx) = gx.as_deref_mut() {
                            let dst = &mut gx[start..start + g.in_w];
                            for ox in lo..hi {
                                dst[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                        if gw.is_some() {
                            let row = &x[start..start + g.in_w];
                            for ox in lo..hi {
                                acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}
