//! The compressed layer: series coefficients plus the metadata needed to
//! rebuild dense kernels, and its `FKC1` container.
//!
//! ```text
//! "FKC1" | kind u8 | c_out c_in k n: u64 LE | bias flag u8
//!        | coeffs f64 LE x (c_out c_in n^2) | [bias f64 LE x c_out]
//!        | filter count u64 LE | per-filter MSE f64 LE
//! ```
//!
//! Grid coordinates are not stored; they follow from `kind` and `k`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::basis::{self, BasisKind, SampleGrid};
use crate::bytes::{self, Reader};
use crate::error::{Error, Result};
use crate::fit::{self, CoeffTensor, FitConfig, FitReport};
use crate::tensor::Tensor4;

pub const LAYER_MAGIC: &[u8; 4] = b"FKC1";

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    kind: BasisKind,
    k: usize,
    coeffs: CoeffTensor,
    fit: FitReport,
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub original: u64,
    pub compressed: u64,
    pub reduction_pct: f64,
}

impl ParamCounts {
    pub fn new(original: u64, compressed: u64) -> Self {
        let reduction_pct = if original == 0 {
            0.0
        } else {
            100.0 * (1.0 - compressed as f64 / original as f64)
        };
        ParamCounts {
            original,
            compressed,
            reduction_pct,
        }
    }

    /// Per-filter counts for a `k x k` kernel held as `n x n` coefficients.
    pub fn per_filter(k: usize, n: usize) -> Self {
        Self::new((k * k) as u64, (n * n) as u64)
    }
}

/// Grid-sample error of one filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterError {
    pub mse: f64,
    pub l2: f64,
    pub max_abs: f64,
}

impl FilterError {
    pub fn between(original: &[f64], approx: &[f64]) -> Self {
        let (sum_sq, max_abs) = original.iter().zip(approx).fold((0.0, 0.0f64), |(s, m), (a, b)| {
            let r = a - b;
            (s + r * r, m.max(r.abs()))
        });
        FilterError {
            mse: sum_sq / original.len() as f64,
            l2: sum_sq.sqrt(),
            max_abs,
        }
    }
}

impl CompressedLayer {
    pub fn new(kind: BasisKind, k: usize, coeffs: CoeffTensor, fit: FitReport, bias: Option<Vec<f64>>) -> Result<Self> {
        basis::check_harmonics(k, coeffs.n())?;
        if !fit.mse.is_empty() && fit.mse.len() != coeffs.filter_count() {
            return Err(Error::argument(format!(
                "fit report covers {} filters, layer has {}",
                fit.mse.len(),
                coeffs.filter_count()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != coeffs.c_out() {
                return Err(Error::argument(format!(
                    "bias has {} entries, layer has {} output channels",
                    b.len(),
                    coeffs.c_out()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite bias value".into()));
            }
        }
        Ok(CompressedLayer {
            kind,
            k,
            coeffs,
            fit,
            bias,
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn c_out(&self) -> usize {
        self.coeffs.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.coeffs.c_in()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.coeffs.n()
    }

    pub fn coeffs(&self) -> &CoeffTensor {
        &self.coeffs
    }

    pub fn fit_report(&self) -> &FitReport {
        &self.fit
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn grid(&self) -> SampleGrid {
        SampleGrid::new(self.kind, self.k).expect("k >= n >= 1")
    }

    /// Dense `K x K` kernel of one filter, sampled on the layer's grid.
    pub fn sample_filter(&self, o: usize, i: usize) -> Vec<f64> {
        sample(self.kind, &self.grid(), self.coeffs.filter(o, i))
    }

    pub fn param_counts(&self) -> ParamCounts {
        layer_param_counts(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LAYER_MAGIC);
        out.push(self.kind.code());
        for e in [self.c_out(), self.c_in(), self.k, self.n()] {
            bytes::put_u64(&mut out, e);
        }
        out.push(self.bias.is_some() as u8);
        bytes::put_f64s(&mut out, self.coeffs.data());
        if let Some(b) = &self.bias {
            bytes::put_f64s(&mut out, b);
        }
        bytes::put_u64(&mut out, self.fit.mse.len());
        bytes::put_f64s(&mut out, &self.fit.mse);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "FKC1");
        if r.take(4)? != LAYER_MAGIC {
            return Err(Error::format("missing FKC1 magic"));
        }
        let header = read_layer_header(&mut r, "FKC1")?;
        let count = header.coeff_count()?;
        let coeffs = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = if header.has_bias {
            Some((0..header.c_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let mse = read_mse_trailer(&mut r, header.c_out * header.c_in, "FKC1")?;
        r.finish()?;
        header.into_layer(coeffs, bias, mse)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf =
            fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&buf)
    }
}

/// Fields shared by the `FKC1` and `FKQ1` headers after the magic.
pub(crate) struct LayerHeader {
    pub kind: BasisKind,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub n: usize,
    pub has_bias: bool,
}

impl LayerHeader {
    pub(crate) fn coeff_count(&self) -> Result<usize> {
        bytes::volume(&[self.c_out, self.c_in, self.n, self.n])
    }

    pub(crate) fn into_layer(self, coeffs: Vec<f64>, bias: Option<Vec<f64>>, mse: Vec<f64>) -> Result<CompressedLayer> {
        let coeffs = CoeffTensor::new(self.c_out, self.c_in, self.n, coeffs).map_err(|e| match e {
            Error::Argument(m) => Error::Format(m),
            other => other,
        })?;
        CompressedLayer::new(self.kind, self.k, coeffs, FitReport::from_mse(mse), bias)
    }
}

/// Reads `kind | c_out c_in k n | bias flag`.
pub(crate) fn read_layer_header(r: &mut Reader<'_>, what: &str) -> Result<LayerHeader> {
    let kind = BasisKind::from_code(r.u8()?)?;
    read_layer_extents(r, kind, what)
}

pub(crate) fn read_layer_extents(r: &mut Reader<'_>, kind: BasisKind, what: &str) -> Result<LayerHeader> {
    let c_out = r.extent("c_out")?;
    let c_in = r.extent("c_in")?;
    let k = r.extent("k")?;
    let n = r.extent("n")?;
    if n > k {
        return Err(Error::format(format!("{what}: n = {n} exceeds k = {k}")));
    }
    let has_bias = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::format(format!("{what}: bias flag must be 0 or 1, got {f}"))),
    };
    Ok(LayerHeader {
        kind,
        c_out,
        c_in,
        k,
        n,
        has_bias,
    })
}

pub(crate) fn read_mse_trailer(r: &mut Reader<'_>, filters: usize, what: &str) -> Result<Vec<f64>> {
    let count = r.u64()?;
    if count != 0 && count != filters as u64 {
        return Err(Error::format(format!(
            "{what}: trailer lists {count} filter errors, layer has {filters} filters"
        )));
    }
    (0..count).map(|_| r.f64()).collect()
}

fn sample(kind: BasisKind, grid: &SampleGrid, coeffs: &[f64]) -> Vec<f64> {
    grid.points().map(|p| basis::eval_series(kind, coeffs, p)).collect()
}

/// Fits `kernels` and packages the result as a layer.
pub fn compress_layer(kernels: &Tensor4, kind: BasisKind, n: usize, config: &FitConfig) -> Result<CompressedLayer> {
    let k = kernels.square_side()?;
    let (coeffs, report) = fit::fit(kernels, kind, n, config)?;
    CompressedLayer::new(kind, k, coeffs, report, None)
}

/// Dense kernels obtained by sampling each filter's series on the grid.
pub fn reconstruct(layer: &CompressedLayer) -> Tensor4 {
    let grid = layer.grid();
    let kk = layer.k * layer.k;
    let mut data = vec![0.0; layer.coeffs.filter_count() * kk];
    data.par_chunks_exact_mut(kk)
        .zip(layer.coeffs.data().par_chunks_exact(layer.n() * layer.n()))
        .for_each(|(out, coeffs)| {
            for (o, p) in out.iter_mut().zip(grid.points()) {
                *o = basis::eval_series(layer.kind, coeffs, p);
            }
        });
    Tensor4::new(layer.c_out(), layer.c_in(), layer.k, layer.k, data).expect("sampled series values are finite")
}

/// Per-filter error between `original` and the layer's reconstruction.
pub fn reconstruction_error(original: &Tensor4, layer: &CompressedLayer) -> Result<Vec<FilterError>> {
    let want = [layer.c_out(), layer.c_in(), layer.k, layer.k];
    if original.shape() != want {
        return Err(Error::argument(format!(
            "original kernels {:?} do not match layer {:?}",
            original.shape(),
            want
        )));
    }
    let approx = reconstruct(layer);
    Ok(original
        .filters()
        .zip(approx.filters())
        .map(|(a, b)| FilterError::between(a, b))
        .collect())
}

pub fn layer_param_counts(layer: &CompressedLayer) -> ParamCounts {
    let filters = layer.coeffs.filter_count() as u64;
    let bias = layer.bias.as_ref().map_or(0, |b| b.len() as u64);
    let (k, n) = (layer.k as u64, layer.n() as u64);
    ParamCounts::new(filters * k * k + bias, filters * n * n + bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::FitMethod;

    fn sample_kernels(c_out: usize, c_in: usize, k: usize) -> Tensor4 {
        Tensor4::from_fn(c_out, c_in, k, k, |o, i, a, b| {
            ((o * 31 + i * 17 + a * 7 + b * 3) % 11) as f64 / 5.0 - 1.0
        })
        .unwrap()
    }

    fn layer_from(kind: BasisKind, k: usize, coeffs: CoeffTensor) -> CompressedLayer {
        CompressedLayer::new(kind, k, coeffs, FitReport::default(), None).unwrap()
    }

    #[test]
    fn exact_case_keeps_parameters() {
        let kernels = sample_kernels(2, 3, 3);
        let cfg = FitConfig::default().with_method(FitMethod::ClosedFormDct);
        let layer = compress_layer(&kernels, BasisKind::Cosine, 3, &cfg).unwrap();
        assert!(layer.fit_report().mse.iter().all(|&m| m <= 1e-18));
        let counts = layer.param_counts();
        assert_eq!((counts.original, counts.compressed), (54, 54));
        assert_eq!(counts.reduction_pct, 0.0);
    }

    #[test]
    fn per_filter_reductions() {
        let p = ParamCounts::per_filter(3, 2);
        assert_eq!((p.original, p.compressed), (9, 4));
        assert!((p.reduction_pct - 55.555_555_555_555_55).abs() < 1e-9);
        assert!(p.reduction_pct > 50.0);

        let p = ParamCounts::per_filter(7, 4);
        assert_eq!((p.original, p.compressed), (49, 16));
        assert_eq!(format!("{:.1}", p.reduction_pct), "67.3");

        let p = ParamCounts::per_filter(7, 6);
        assert!((p.reduction_pct - 100.0 * (1.0 - 36.0 / 49.0)).abs() < 1e-12);
        assert_eq!(format!("{:.2}", p.reduction_pct), "26.53");
    }

    #[test]
    fn reduction_above_half_below_ratio() {
        for k in 1..=11usize {
            for n in 1..=k {
                let p = ParamCounts::per_filter(k, n);
                if (n as f64) / (k as f64) < std::f64::consts::FRAC_1_SQRT_2 {
                    assert!(p.reduction_pct > 50.0, "k={k} n={n}");
                }
            }
        }
    }

    #[test]
    fn bias_counted_on_both_sides() {
        let coeffs = CoeffTensor::zeros(4, 2, 2).unwrap();
        let layer =
            CompressedLayer::new(BasisKind::Cosine, 3, coeffs, FitReport::default(), Some(vec![0.5; 4])).unwrap();
        let p = layer.param_counts();
        assert_eq!((p.original, p.compressed), (4 * 2 * 9 + 4, 4 * 2 * 4 + 4));
    }

    #[test]
    fn reconstruct_trivial_layers() {
        let zero = layer_from(BasisKind::Chebyshev, 3, CoeffTensor::zeros(2, 2, 2).unwrap());
        assert!(reconstruct(&zero).data().iter().all(|&v| v == 0.0));

        let mut data = vec![0.0; 2 * 2 * 4];
        for (f, chunk) in data.chunks_exact_mut(4).enumerate() {
            chunk[0] = f as f64 - 1.5;
        }
        for kind in BasisKind::ALL {
            let layer = layer_from(kind, 3, CoeffTensor::new(2, 2, 2, data.clone()).unwrap());
            let dense = reconstruct(&layer);
            for (f, filter) in dense.filters().enumerate() {
                assert!(filter.iter().all(|&v| v == f as f64 - 1.5));
            }
        }
    }

    #[test]
    fn error_metrics() {
        let ones = Tensor4::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let zero = layer_from(BasisKind::Cosine, 3, CoeffTensor::zeros(1, 1, 2).unwrap());
        let e = reconstruction_error(&ones, &zero).unwrap()[0];
        assert_eq!((e.mse, e.l2, e.max_abs), (1.0, 3.0, 1.0));

        let kernels = sample_kernels(1, 2, 3);
        let cfg = FitConfig::default().with_method(FitMethod::ClosedFormDct);
        let layer = compress_layer(&kernels, BasisKind::Cosine, 3, &cfg).unwrap();
        let same = Tensor4::new(1, 2, 3, 3, reconstruct(&layer).into_data()).unwrap();
        for e in reconstruction_error(&same, &layer).unwrap() {
            assert_eq!((e.mse, e.l2, e.max_abs), (0.0, 0.0, 0.0));
        }

        let wrong = Tensor4::zeros(1, 1, 3, 3).unwrap();
        assert!(matches!(reconstruction_error(&wrong, &layer), Err(Error::Argument(_))));
    }

    #[test]
    fn reported_mse_matches_reconstruction() {
        let kernels = sample_kernels(3, 2, 3);
        let layer = compress_layer(&kernels, BasisKind::Chebyshev, 2, &FitConfig::default()).unwrap();
        let errors = reconstruction_error(&kernels, &layer).unwrap();
        for (e, m) in errors.iter().zip(&layer.fit_report().mse) {
            assert!((e.mse - m).abs() <= 1e-12);
        }
    }

    #[test]
    fn bytes_round_trip() {
        let kernels = sample_kernels(2, 3, 5);
        let mut layer = compress_layer(&kernels, BasisKind::Chebyshev, 3, &FitConfig::default()).unwrap();
        layer.bias = Some(vec![0.25, -3.5]);
        let back = CompressedLayer::from_bytes(&layer.to_bytes()).unwrap();
        assert_eq!(back.kind(), layer.kind());
        assert_eq!(back.coeffs(), layer.coeffs());
        assert_eq!(back.bias(), layer.bias());
        assert_eq!(back.fit_report().mse, layer.fit_report().mse);
        assert_eq!(back.to_bytes(), layer.to_bytes());
    }

    #[test]
    fn byte_layout() {
        let coeffs = CoeffTensor::new(1, 1, 1, vec![2.0]).unwrap();
        let layer =
            CompressedLayer::new(BasisKind::Chebyshev, 1, coeffs, FitReport::from_mse(vec![0.0]), None).unwrap();
        let mut want = b"FKC1".to_vec();
        want.push(1);
        for e in [1u64, 1, 1, 1] {
            want.extend_from_slice(&e.to_le_bytes());
        }
        want.push(0);
        want.extend_from_slice(&2.0f64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&0.0f64.to_le_bytes());
        assert_eq!(layer.to_bytes(), want);
    }

    #[test]
    fn malformed_layers() {
        let layer = compress_layer(&sample_kernels(1, 1, 3), BasisKind::Cosine, 2, &FitConfig::default()).unwrap();
        let buf = layer.to_bytes();
        for cut in [0, 3, 10, 40, buf.len() - 1] {
            assert!(
                matches!(CompressedLayer::from_bytes(&buf[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(CompressedLayer::from_bytes(&extra).is_err());
        let mut kind = buf.clone();
        kind[4] = 9;
        assert!(CompressedLayer::from_bytes(&kind).is_err());
        let mut n_gt_k = buf.clone();
        n_gt_k[29..37].copy_from_slice(&4u64.to_le_bytes());
        assert!(CompressedLayer::from_bytes(&n_gt_k).is_err());
    }

    #[test]
    fn layer_validation() {
        let coeffs = CoeffTensor::zeros(2, 1, 3).unwrap();
        assert!(CompressedLayer::new(BasisKind::Cosine, 2, coeffs.clone(), FitReport::default(), None).is_err());
        assert!(CompressedLayer::new(
            BasisKind::Cosine,
            3,
            coeffs.clone(),
            FitReport::from_mse(vec![0.0]),
            None
        )
        .is_err());
        assert!(CompressedLayer::new(BasisKind::Cosine, 3, coeffs, FitReport::default(), Some(vec![1.0])).is_err());
    }
}
