//! Reference 2D convolution (cross-correlation, zero padding) over dense
//! kernels and over series-represented kernels.
//!
//! Kernels follow the grouped convention: a `(c_out, c_in / groups, k_h, k_w)`
//! tensor applied to a `c_in`-channel input. This is a direct loop; it exists
//! to check equivalences, not for speed.

use rayon::prelude::*;

use crate::basis;
use crate::error::{Error, Result};
use crate::model::{self, CompressedLayer};
use crate::tensor::{Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    /// Zero padding on every side.
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, "same" padding `floor(k / 2)`, one group.
    pub fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn valid() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputError {
    pub rel_l2: f64,
    pub max_abs: f64,
}

struct Geometry {
    c_out: usize,
    c_in_per_group: usize,
    out_per_group: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
}

fn geometry(input: &Tensor3, shape: [usize; 4], spec: &ConvSpec) -> Result<Geometry> {
    let [c_out, c_in_per_group, k_h, k_w] = shape;
    if spec.stride == 0 || spec.groups == 0 {
        return Err(Error::argument("stride and groups must be positive"));
    }
    if !input.channels().is_multiple_of(spec.groups) || !c_out.is_multiple_of(spec.groups) {
        return Err(Error::argument(format!(
            "groups = {} must divide input channels {} and output channels {c_out}",
            spec.groups,
            input.channels()
        )));
    }
    if c_in_per_group * spec.groups != input.channels() {
        return Err(Error::argument(format!(
            "kernels take {c_in_per_group} channels per group x {} groups, input has {}",
            spec.groups,
            input.channels()
        )));
    }
    let padded_h = input.height() + 2 * spec.padding;
    let padded_w = input.width() + 2 * spec.padding;
    if k_h > padded_h || k_w > padded_w {
        return Err(Error::argument(format!(
            "{k_h}x{k_w} kernel does not fit the {padded_h}x{padded_w} padded input"
        )));
    }
    Ok(Geometry {
        c_out,
        c_in_per_group,
        out_per_group: c_out / spec.groups,
        k_h,
        k_w,
        out_h: (padded_h - k_h) / spec.stride + 1,
        out_w: (padded_w - k_w) / spec.stride + 1,
    })
}

/// Accumulates each output element in a fixed order (input channel, kernel
/// row, kernel column), so results do not depend on the worker count.
fn correlate(input: &Tensor3, weights: &[f64], g: &Geometry, spec: &ConvSpec) -> Tensor3 {
    let plane = g.out_h * g.out_w;
    let filter_len = g.k_h * g.k_w;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let pad = spec.padding as isize;
    let mut out = vec![0.0; g.c_out * plane];
    out.par_chunks_exact_mut(plane).enumerate().for_each(|(o, dst)| {
        let first_in = (o / g.out_per_group) * g.c_in_per_group;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ci in 0..g.c_in_per_group {
                    let kernel = &weights[(o * g.c_in_per_group + ci) * filter_len..][..filter_len];
                    for a in 0..g.k_h {
                        let y = (oy * spec.stride + a) as isize - pad;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for b in 0..g.k_w {
                            let x = (ox * spec.stride + b) as isize - pad;
                            if x < 0 || x >= w {
                                continue;
                            }
                            acc += input.get(first_in + ci, y as usize, x as usize) * kernel[a * g.k_w + b];
                        }
                    }
                }
                dst[oy * g.out_w + ox] = acc;
            }
        }
    });
    Tensor3::new(g.c_out, g.out_h, g.out_w, out).expect("finite inputs give finite outputs")
}

pub fn conv2d(input: &Tensor3, kernels: &Tensor4, spec: &ConvSpec) -> Result<Tensor3> {
    let g = geometry(input, kernels.shape(), spec)?;
    Ok(correlate(input, kernels.data(), &g, spec))
}

/// Convolution with kernel values obtained by evaluating each filter's series
/// at the layer's grid points.
pub fn conv2d_continuous(input: &Tensor3, layer: &CompressedLayer, spec: &ConvSpec) -> Result<Tensor3> {
    let k = layer.k();
    let g = geometry(input, [layer.c_out(), layer.c_in(), k, k], spec)?;
    let grid = layer.grid();
    let points: Vec<(f64, f64)> = grid.points().collect();
    let weights: Vec<f64> = layer
        .coeffs()
        .filters()
        .flat_map(|coeffs| points.iter().map(move |&p| basis::eval_series(layer.kind(), coeffs, p)))
        .collect();
    Ok(correlate(input, &weights, &g, spec))
}

/// Compares the layer's output against the original kernels' output on the
/// same input.
pub fn layer_output_error(
    input: &Tensor3,
    original: &Tensor4,
    layer: &CompressedLayer,
    spec: &ConvSpec,
) -> Result<OutputError> {
    let want = [layer.c_out(), layer.c_in(), layer.k(), layer.k()];
    if original.shape() != want {
        return Err(Error::argument(format!(
            "original kernels {:?} do not match layer {:?}",
            original.shape(),
            want
        )));
    }
    let reference = conv2d(input, original, spec)?;
    let approx = conv2d(input, &model::reconstruct(layer), spec)?;
    Ok(output_error(reference.data(), approx.data()))
}

pub fn output_error(reference: &[f64], approx: &[f64]) -> OutputError {
    let (diff_sq, ref_sq, max_abs) = reference
        .iter()
        .zip(approx)
        .fold((0.0, 0.0, 0.0f64), |(d, r, m), (a, b)| {
            (d + (a - b) * (a - b), r + a * a, m.max((a - b).abs()))
        });
    OutputError {
        rel_l2: diff_sq.sqrt() / ref_sq.sqrt().max(1e-30),
        max_abs,
    }
}
