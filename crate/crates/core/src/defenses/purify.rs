//! Input purification: pure image-to-image transforms on `[3, H, W]`
//! tensors in [0, 1].

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalDomain {
    Frequency,
    SpatialLinear,
    SpatialNonlinear,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PurifyMethod {
    /// Zero every 8x8 DCT coefficient with `u >= keep` or `v >= keep`.
    DctLowPass { keep: usize },
    /// Baseline-JPEG quantisation of 8x8 YCbCr blocks (no subsampling).
    Jpeg { quality: u8 },
    GaussianBlur { sigma: f64 },
    MeanFilter { size: usize },
    Median { size: usize },
    BitDepth { bits: u32 },
}

impl PurifyMethod {
    pub fn domain(&self) -> SignalDomain {
        match self {
            PurifyMethod::DctLowPass { .. } | PurifyMethod::Jpeg { .. } => SignalDomain::Frequency,
            PurifyMethod::GaussianBlur { .. } | PurifyMethod::MeanFilter { .. } => SignalDomain::SpatialLinear,
            PurifyMethod::Median { .. } => SignalDomain::SpatialNonlinear,
            PurifyMethod::BitDepth { .. } => SignalDomain::Value,
        }
    }

    /// Parses names produced by `Display`, e.g. `jpeg50` or `median3`.
    pub fn from_name(name: &str) -> Result<Self> {
        catalog()
            .into_iter()
            .chain([PurifyMethod::BitDepth { bits: 8 }])
            .find(|m| m.to_string() == name)
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PurifyMethod::DctLowPass { keep } => (1..=8).contains(&keep),
            PurifyMethod::Jpeg { quality } => (1..=100).contains(&quality),
            PurifyMethod::GaussianBlur { sigma } => sigma > 0.0 && sigma.is_finite(),
            PurifyMethod::MeanFilter { size } | PurifyMethod::Median { size } => size % 2 == 1,
            PurifyMethod::BitDepth { bits } => (1..=16).contains(&bits),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad purification parameters: {self:?}")))
        }
    }
}

impl fmt::Display for PurifyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PurifyMethod::DctLowPass { keep } => write!(f, "dct_lowpass{keep}"),
            PurifyMethod::Jpeg { quality } => write!(f, "jpeg{quality}"),
            PurifyMethod::GaussianBlur { sigma } => write!(f, "gaussian{sigma}"),
            PurifyMethod::MeanFilter { size } => write!(f, "mean{size}"),
            PurifyMethod::Median { size } => write!(f, "median{size}"),
            PurifyMethod::BitDepth { bits } => write!(f, "bitdepth{bits}"),
        }
    }
}

/// The ten-method battery, at least two per signal domain.
pub fn catalog() -> Vec<PurifyMethod> {
    vec![
        PurifyMethod::DctLowPass { keep: 4 },
        PurifyMethod::DctLowPass { keep: 2 },
        PurifyMethod::Jpeg { quality: 50 },
        PurifyMethod::GaussianBlur { sigma: 0.5 },
        PurifyMethod::GaussianBlur { sigma: 1.0 },
        PurifyMethod::MeanFilter { size: 3 },
        PurifyMethod::Median { size: 3 },
        PurifyMethod::Median { size: 5 },
        PurifyMethod::BitDepth { bits: 4 },
        PurifyMethod::BitDepth { bits: 6 },
    ]
}

pub fn purify(image: &Tensor, method: &PurifyMethod) -> Result<Tensor> {
    method.validate()?;
    let &[c, h, w] = image.shape() else {
        return Err(Error::ShapeMismatch {
            op: "purify",
            expected: vec![3, 0, 0],
            got: image.shape().to_vec(),
        });
    };
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidConfig("purify expects pixel values in [0, 1]".into()));
    }
    let mut out = match *method {
        PurifyMethod::DctLowPass { keep } => {
            let mut out = image.clone();
            for plane in out.data_mut().chunks_mut(h * w) {
                for_each_block(plane, h, w, |block, n| {
                    let mut coef = dct2(block, n);
                    for u in 0..n {
                        for v in 0..n {
                            if u >= keep || v >= keep {
                                coef[u * n + v] = 0.0;
                            }
                        }
                    }
                    block.copy_from_slice(&idct2(&coef, n));
                });
            }
            out
        }
        PurifyMethod::Jpeg { quality } => jpeg(image, h, w, quality),
        PurifyMethod::GaussianBlur { sigma } => {
            let r = (3.0 * sigma).ceil() as isize;
            let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
            let s: f64 = k.iter().sum();
            let k: Vec<f64> = k.iter().map(|v| v / s).collect();
            separable(image, c, h, w, &k)
        }
        PurifyMethod::MeanFilter { size } => separable(image, c, h, w, &vec![1.0 / size as f64; size]),
        PurifyMethod::Median { size } => median(image, c, h, w, size),
        PurifyMethod::BitDepth { bits } => {
            let levels = ((1u32 << bits) - 1) as f64;
            image.map(|v| (v * levels).round() / levels)
        }
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Replicate-padded pixel lookup.
fn at(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    let r = r.clamp(0, h as isize - 1) as usize;
    let c = c.clamp(0, w as isize - 1) as usize;
    plane[r * w + c]
}

fn separable(image: &Tensor, c: usize, h: usize, w: usize, k: &[f64]) -> Tensor {
    let r = (k.len() / 2) as isize;
    let mut out = image.clone();
    for ch in 0..c {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                tmp[i * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * at(src, h, w, i as isize, j as isize + t as isize - r))
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * at(&tmp, h, w, i as isize + t as isize - r, j as isize))
                    .sum();
            }
        }
    }
    out
}

fn median(image: &Tensor, c: usize, h: usize, w: usize, size: usize) -> Tensor {
    let r = (size / 2) as isize;
    let mut out = image.clone();
    let mut window = Vec::with_capacity(size * size);
    for ch in 0..c {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                window.clear();
                for di in -r..=r {
                    for dj in -r..=r {
                        window.push(at(src, h, w, i + di, j + dj));
                    }
                }
                window.sort_by(f64::total_cmp);
                out.data_mut()[ch * h * w + i as usize * w + j as usize] = window[window.len() / 2];
            }
        }
    }
    out
}

/// Calls `f` on every 8x8 block (smaller at ragged edges) of a plane.
fn for_each_block(plane: &mut [f64], h: usize, w: usize, mut f: impl FnMut(&mut [f64], usize)) {
    let mut block = Vec::with_capacity(64);
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            // Ragged edges use the largest square that fits.
            let n = 8.min(h - bi).min(w - bj);
            block.clear();
            for i in 0..n {
                block.extend_from_slice(&plane[(bi + i) * w + bj..(bi + i) * w + bj + n]);
            }
            f(&mut block, n);
            for i in 0..n {
                plane[(bi + i) * w + bj..(bi + i) * w + bj + n].copy_from_slice(&block[i * n..(i + 1) * n]);
            }
        }
    }
}

fn dct_basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for u in 0..n {
        let a = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            b[u * n + x] = a * ((2 * x + 1) as f64 * u as f64 * PI / (2 * n) as f64).cos();
        }
    }
    b
}

/// Orthonormal 2-D DCT-II of an `n x n` block.
fn dct2(block: &[f64], n: usize) -> Vec<f64> {
    let b = dct_basis(n);
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut s = 0.0;
            for x in 0..n {
                for y in 0..n {
                    s += b[u * n + x] * b[v * n + y] * block[x * n + y];
                }
            }
            out[u * n + v] = s;
        }
    }
    out
}

fn idct2(coef: &[f64], n: usize) -> Vec<f64> {
    let b = dct_basis(n);
    let mut out = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            let mut s = 0.0;
            for u in 0..n {
                for v in 0..n {
                    s += b[u * n + x] * b[v * n + y] * coef[u * n + v];
                }
            }
            out[x * n + y] = s;
        }
    }
    out
}

const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56.,
    14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113.,
    92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_Q: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99., 99.,
    47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

/// Quality-scaled quantisation table (IJG convention).
fn quant_table(base: &[f64; 64], quality: u8) -> Vec<f64> {
    let q = quality as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    base.iter().map(|b| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0)).collect()
}

fn jpeg(image: &Tensor, h: usize, w: usize, quality: u8) -> Tensor {
    let hw = h * w;
    let d = image.data();
    let mut ycc = vec![0.0; 3 * hw];
    for i in 0..hw {
        let (r, g, b) = (d[i] * 255.0, d[hw + i] * 255.0, d[2 * hw + i] * 255.0);
        ycc[i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        ycc[hw + i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
        ycc[2 * hw + i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    let tables = [quant_table(&LUMA_Q, quality), quant_table(&CHROMA_Q, quality)];
    for (ch, plane) in ycc.chunks_mut(hw).enumerate() {
        let table = &tables[(ch > 0) as usize];
        for_each_block(plane, h, w, |block, n| {
            let mut coef = dct2(block, n);
            for u in 0..n {
                for v in 0..n {
                    let q = table[u * 8 + v];
                    coef[u * n + v] = (coef[u * n + v] / q).round() * q;
                }
            }
            block.copy_from_slice(&idct2(&coef, n));
        });
    }
    let mut out = Tensor::zeros(image.shape());
    let o = out.data_mut();
    for i in 0..hw {
        let (y, cb, cr) = (ycc[i] + 128.0, ycc[hw + i], ycc[2 * hw + i]);
        let rgb = [y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb];
        for (k, v) in rgb.iter().enumerate() {
            o[k * hw + i] = v.round().clamp(0.0, 255.0) / 255.0;
        }
    }
    out
}
