use std::path::Path;

use anyhow::anyhow;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use sconv_core::arch::{parse_config, total_params};
use sconv_core::conv::{conv2d, conv2d_continuous, layer_output_error, output_error};
use sconv_core::model::{self, compress_layer, layer_param_counts, reconstruction_error};
use sconv_core::quant::{model_size_bytes, quantize_bfp, QUANT_MAGIC};
use sconv_core::{
    AnyTensor, ArchDescriptor, BasisKind, BfpConfig, CompressedLayer, ConvSpec, ElementWidth, FitConfig, FitMethod,
    HarmonicConfig, Init, ParamCounts, Precision, QuantizedLayer, ReductionBase, Tensor3, Tensor4,
};

use crate::report::{emit, Run};
use crate::{
    AccountArgs, CompressArgs, EvaluateArgs, Failure, FitArgs, ImportArgs, InitArg, QuantizeArgs, RandomArgs,
    ReconstructArgs, SweepArgs, WidthArg,
};

type CmdResult = Result<(), Failure>;

impl From<WidthArg> for ElementWidth {
    fn from(w: WidthArg) -> Self {
        match w {
            WidthArg::F32 => ElementWidth::F32,
            WidthArg::F64 => ElementWidth::F64,
        }
    }
}

fn fit_config(a: &FitArgs) -> Result<FitConfig, Failure> {
    let kind = BasisKind::from(a.basis);
    let mut cfg = FitConfig::for_basis(kind, a.seed).with_method(FitMethod::from(a.method));
    cfg.init = match a.init {
        InitArg::Auto => cfg.init,
        InitArg::Mean => Init::ChebyshevMeanDc,
        InitArg::Gaussian => Init::GaussianRandom { seed: a.seed },
    };
    cfg.learning_rate = a.lr;
    cfg.max_iters = a.max_iters;
    cfg.grad_tol = a.grad_tol;
    cfg.validate()?;
    Ok(cfg)
}

fn method_name(m: FitMethod) -> &'static str {
    match m {
        FitMethod::GradientDescent => "gd",
        FitMethod::LeastSquares => "lstsq",
        FitMethod::ClosedFormDct => "dct",
    }
}

fn init_name(i: Init) -> &'static str {
    match i {
        Init::ChebyshevMeanDc => "mean",
        Init::GaussianRandom { .. } => "gaussian",
    }
}

pub(crate) fn load_kernels(run: &mut Run, path: &Path) -> Result<Tensor4, Failure> {
    match AnyTensor::from_bytes(&run.read_input(path)?)? {
        AnyTensor::T4(t) => Ok(t),
        AnyTensor::T3(_) => Err(Failure::usage(anyhow!(
            "{}: expected rank-4 kernels, found rank 3",
            path.display()
        ))),
    }
}

fn load_activations(run: &mut Run, path: &Path) -> Result<Tensor3, Failure> {
    match AnyTensor::from_bytes(&run.read_input(path)?)? {
        AnyTensor::T3(t) => Ok(t),
        AnyTensor::T4(_) => Err(Failure::usage(anyhow!(
            "{}: expected rank-3 activations, found rank 4",
            path.display()
        ))),
    }
}

/// Loads a compressed layer from either container; also returns the mantissa
/// width when the file was quantized.
pub(crate) fn load_layer(run: &mut Run, path: &Path) -> Result<(CompressedLayer, Option<u32>), Failure> {
    let bytes = run.read_input(path)?;
    if bytes.starts_with(QUANT_MAGIC) {
        let q = QuantizedLayer::from_bytes(&bytes)?;
        let m = q.config().mantissa_bits();
        Ok((q.into_layer(), Some(m)))
    } else {
        Ok((CompressedLayer::from_bytes(&bytes)?, None))
    }
}

fn warn_small_kernel(k: usize) {
    if k <= 2 {
        eprintln!("sconv: warning: {k}x{k} kernels leave little to compress; n < {k} discards most of each filter");
    }
}

#[derive(Serialize)]
struct LayerInfo {
    basis: String,
    c_out: usize,
    c_in: usize,
    k: usize,
    n: usize,
}

impl LayerInfo {
    fn of(layer: &CompressedLayer) -> Self {
        LayerInfo {
            basis: layer.kind().to_string(),
            c_out: layer.c_out(),
            c_in: layer.c_in(),
            k: layer.k(),
            n: layer.n(),
        }
    }
}

#[derive(Serialize)]
struct Params {
    original: u64,
    compressed: u64,
    reduction_pct: f64,
}

impl From<ParamCounts> for Params {
    fn from(p: ParamCounts) -> Self {
        Params {
            original: p.original,
            compressed: p.compressed,
            reduction_pct: p.reduction_pct,
        }
    }
}

#[derive(Serialize)]
struct FitStats {
    method: &'static str,
    init: &'static str,
    mean_mse: f64,
    max_mse: f64,
    max_iterations: usize,
    fallback_filters: Vec<usize>,
    mse: Vec<f64>,
    max_abs_residual: Vec<f64>,
}

#[derive(Serialize)]
struct CompressResult {
    output: String,
    layer: LayerInfo,
    fit: FitStats,
    params: Params,
}

pub fn compress(a: CompressArgs) -> CmdResult {
    let mut run = Run::start();
    let kernels = load_kernels(&mut run, &a.input)?;
    let cfg = fit_config(&a.fit)?;
    warn_small_kernel(kernels.k_h());
    let layer = compress_layer(&kernels, a.fit.basis.into(), a.n, &cfg)?;
    layer.save(&a.out)?;
    let fit = layer.fit_report();
    let result = CompressResult {
        output: a.out.display().to_string(),
        layer: LayerInfo::of(&layer),
        fit: FitStats {
            method: method_name(cfg.method),
            init: init_name(cfg.init),
            mean_mse: fit.mean_mse(),
            max_mse: fit.max_mse(),
            max_iterations: fit.max_iterations(),
            fallback_filters: fit.fallback.clone(),
            mse: fit.mse.clone(),
            max_abs_residual: fit.max_abs_residual.clone(),
        },
        params: layer_param_counts(&layer).into(),
    };
    emit(&run.finish(result), a.report.as_ref()).map_err(Failure::internal)
}

#[derive(Serialize)]
struct ReconstructResult {
    output: String,
    layer: LayerInfo,
    quantized_bits: Option<u32>,
}

pub fn reconstruct(a: ReconstructArgs) -> CmdResult {
    let mut run = Run::start();
    let (layer, bits) = load_layer(&mut run, &a.input)?;
    model::reconstruct(&layer).save(&a.out, a.width.into())?;
    let result = ReconstructResult {
        output: a.out.display().to_string(),
        layer: LayerInfo::of(&layer),
        quantized_bits: bits,
    };
    emit(&run.finish(result), a.report.as_ref()).map_err(Failure::internal)
}

#[derive(Serialize)]
struct ErrorPair {
    rel_l2: f64,
    max_abs: f64,
}

#[derive(Serialize)]
struct ActivationQuant {
    bits: u32,
    bits_per_value: u32,
    output: ErrorPair,
}

#[derive(Serialize)]
struct EvaluateResult {
    layer: LayerInfo,
    quantized_bits: Option<u32>,
    stride: usize,
    padding: usize,
    groups: usize,
    output: ErrorPair,
    /// Largest gap between evaluating the series inside the convolution and
    /// convolving with the sampled kernels.
    continuous_vs_discrete_max_abs: f64,
    kernel_mean_mse: f64,
    kernel_max_mse: f64,
    activation_quant: Option<ActivationQuant>,
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let mut run = Run::start();
    let kernels = load_kernels(&mut run, &a.kernels)?;
    let (layer, bits) = load_layer(&mut run, &a.compressed)?;
    let input = load_activations(&mut run, &a.input)?;
    let spec = ConvSpec {
        stride: a.conv.stride,
        padding: a.conv.padding.unwrap_or(layer.k() / 2),
        groups: a.conv.groups,
    };

    let out_err = layer_output_error(&input, &kernels, &layer, &spec)?;
    let continuous = conv2d_continuous(&input, &layer, &spec)?;
    let discrete = conv2d(&input, &model::reconstruct(&layer), &spec)?;
    let gap = output_error(continuous.data(), discrete.data()).max_abs;

    let per_filter = reconstruction_error(&kernels, &layer)?;
    let count = per_filter.len().max(1) as f64;
    let kernel_mean_mse = per_filter.iter().map(|e| e.mse).sum::<f64>() / count;
    let kernel_max_mse = per_filter.iter().map(|e| e.mse).fold(0.0, f64::max);

    let activation_quant = match a.bits {
        None => None,
        Some(m) => {
            let cfg = BfpConfig::new(m)?;
            let (q, _) = quantize_bfp(input.data(), &cfg)?;
            let qin = Tensor3::new(input.channels(), input.height(), input.width(), q)?;
            let reference = conv2d(&input, &kernels, &spec)?;
            let approx = conv2d_continuous(&qin, &layer, &spec)?;
            let e = output_error(reference.data(), approx.data());
            Some(ActivationQuant {
                bits: m,
                bits_per_value: cfg.bits_per_value(),
                output: ErrorPair {
                    rel_l2: e.rel_l2,
                    max_abs: e.max_abs,
                },
            })
        }
    };

    let result = EvaluateResult {
        layer: LayerInfo::of(&layer),
        quantized_bits: bits,
        stride: spec.stride,
        padding: spec.padding,
        groups: spec.groups,
        output: ErrorPair {
            rel_l2: out_err.rel_l2,
            max_abs: out_err.max_abs,
        },
        continuous_vs_discrete_max_abs: gap,
        kernel_mean_mse,
        kernel_max_mse,
        activation_quant,
    };
    emit(&run.finish(result), a.report.as_ref()).map_err(Failure::internal)
}

/// Parses `lo:hi`, `lo:` or `n`; the open end defaults to `k`.
pub(crate) fn parse_n_range(text: &str, k: usize) -> Result<(usize, usize), Failure> {
    let bad = || {
        Failure::usage(anyhow!(
            "bad --n-range {text:?}; expected lo:hi with 1 <= lo <= hi <= {k}"
        ))
    };
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let (lo, hi) = match text.split_once(':') {
        Some((lo, hi)) => {
            let lo = if lo.trim().is_empty() { 1 } else { num(lo)? };
            let hi = if hi.trim().is_empty() { k } else { num(hi)? };
            (lo, hi)
        }
        None => {
            let n = num(text)?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi || hi > k {
        return Err(bad());
    }
    Ok((lo, hi))
}

#[derive(Serialize)]
struct SweepRow {
    n: usize,
    params: Params,
    mean_mse: f64,
    max_mse: f64,
}

#[derive(Serialize)]
struct SweepResult {
    basis: String,
    method: &'static str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rows: Vec<SweepRow>,
    /// Whether mean MSE never increases with n.
    monotone: bool,
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let mut run = Run::start();
    let kernels = load_kernels(&mut run, &a.input)?;
    let k = kernels.square_side()?;
    warn_small_kernel(k);
    let (lo, hi) = parse_n_range(&a.n_range, k)?;
    let cfg = fit_config(&a.fit)?;
    let kind = BasisKind::from(a.fit.basis);
    let mut rows = Vec::with_capacity(hi - lo + 1);
    for n in lo..=hi {
        let layer = compress_layer(&kernels, kind, n, &cfg)?;
        rows.push(SweepRow {
            n,
            params: layer_param_counts(&layer).into(),
            mean_mse: layer.fit_report().mean_mse(),
            max_mse: layer.fit_report().max_mse(),
        });
    }
    let monotone = rows
        .windows(2)
        .all(|w| w[1].mean_mse <= w[0].mean_mse * (1.0 + 1e-9) + 1e-15);
    let result = SweepResult {
        basis: kind.to_string(),
        method: method_name(cfg.method),
        c_out: kernels.c_out(),
        c_in: kernels.c_in(),
        k,
        rows,
        monotone,
    };
    emit(&run.finish(result), a.report.as_ref()).map_err(Failure::internal)
}

#[derive(Serialize)]
struct QuantizeResult {
    output: String,
    layer: LayerInfo,
    mantissa_bits: u32,
    bits_per_value: u32,
    param_count: u64,
    model_size_bytes: f64,
    full32_size_bytes: f64,
    file_bytes: usize,
    max_abs_error: f64,
    /// Over nonzero values.
    max_rel_error: f64,
}

pub fn quantize(a: QuantizeArgs) -> CmdResult {
    let mut run = Run::start();
    let bytes = run.read_input(&a.input)?;
    let layer = CompressedLayer::from_bytes(&bytes)?;
    let cfg = BfpConfig::new(a.bits)?;
    let q = QuantizedLayer::new(&layer, cfg)?;
    let encoded = q.to_bytes();
    std::fs::write(&a.out, &encoded).map_err(|e| Failure::usage(anyhow!("{}: {e}", a.out.display())))?;

    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    let pairs = layer.coeffs().data().iter().zip(q.layer().coeffs().data());
    let bias_pairs = layer.bias().unwrap_or(&[]).iter().zip(q.layer().bias().unwrap_or(&[]));
    for (&v, &w) in pairs.chain(bias_pairs) {
        let d = (v - w).abs();
        max_abs = max_abs.max(d);
        if v != 0.0 {
            max_rel = max_rel.max(d / v.abs());
        }
    }
    let params = q.param_count();
    let result = QuantizeResult {
        output: a.out.display().to_string(),
        layer: LayerInfo::of(&layer),
        mantissa_bits: a.bits,
        bits_per_value: cfg.bits_per_value(),
        param_count: params,
        model_size_bytes: model_size_bytes(params, Precision::Bfp(cfg)),
        full32_size_bytes: model_size_bytes(params, Precision::Full32),
        file_bytes: encoded.len(),
        max_abs_error: max_abs,
        max_rel_error: max_rel,
    };
    emit(&run.finish(result), a.report.as_ref()).map_err(Failure::internal)
}

#[derive(Serialize)]
struct LayerRow {
    id: String,
    block: String,
    k: usize,
    n: Option<usize>,
    original: u64,
    compressed: u64,
}

#[derive(Serialize)]
struct ModelSize {
    mantissa_bits: u32,
    bits_per_value: u32,
    baseline_mb: f64,
    compressed_mb: f64,
    baseline_full32_mb: f64,
    compressed_full32_mb: f64,
}

#[derive(Serialize)]
struct AccountResult {
    arch: String,
    config: Option<String>,
    reduction_base: &'static str,
    baseline_total: u64,
    total: u64,
    baseline_compressible: u64,
    compressible: u64,
    reduction_pct: f64,
    retained_pct: f64,
    model_size: Option<ModelSize>,
    layers: Vec<LayerRow>,
}

fn load_arch(run: &mut Run, spec: &str) -> Result<ArchDescriptor, Failure> {
    if let Some(a) = ArchDescriptor::builtin(spec) {
        return Ok(a);
    }
    let path = Path::new(spec);
    if !path.exists() {
        let names: Vec<_> = ArchDescriptor::builtin_names().collect();
        return Err(Failure::usage(anyhow!(
            "{spec}: no such descriptor file or built-in architecture ({})",
            names.join(", ")
        )));
    }
    let text = String::from_utf8(run.read_input(path)?)
        .map_err(|_| Failure::usage(anyhow!("{spec}: descriptor is not UTF-8")))?;
    Ok(ArchDescriptor::parse(&text)?)
}

pub fn account(a: AccountArgs) -> CmdResult {
    let mut run = Run::start();
    let mut arch = load_arch(&mut run, &a.arch)?;
    if a.compressible_only {
        arch = arch.with_reduction_base(ReductionBase::Compressible);
    }
    let config = match &a.config {
        Some(text) => parse_config(text, &arch)?,
        None => HarmonicConfig::identity(&arch),
    };
    let totals = total_params(&arch, Some(&config))?;
    let model_size = match a.bits {
        None => None,
        Some(m) => {
            let cfg = BfpConfig::new(m)?;
            let mb = |p: u64, prec| model_size_bytes(p, prec) / 1e6;
            Some(ModelSize {
                mantissa_bits: m,
                bits_per_value: cfg.bits_per_value(),
                baseline_mb: mb(totals.baseline_total, Precision::Bfp(cfg)),
                compressed_mb: mb(totals.total, Precision::Bfp(cfg)),
                baseline_full32_mb: mb(totals.baseline_total, Precision::Full32),
                compressed_full32_mb: mb(totals.total, Precision::Full32),
            })
        }
    };
    let layers = arch
        .layers
        .iter()
        .zip(config.per_layer())
        .map(|(l, &n)| {
            let p = l.param_counts(n);
            LayerRow {
                id: l.id.clone(),
                block: l.block_tag.clone(),
                k: l.k,
                n,
                original: p.original,
                compressed: p.compressed,
            }
        })
        .collect();
    let result = AccountResult {
        arch: arch.name.clone(),
        config: a.config.clone(),
        reduction_base: totals.base.as_str(),
        baseline_total: totals.baseline_total,
        total: totals.total,
        baseline_compressible: totals.baseline_compressible,
        compressible: totals.compressible,
        reduction_pct: totals.reduction_pct,
        retained_pct: totals.retained_pct,
        model_size,
        layers,
    };
    emit(&run.finish(result), a.report.as_ref()).map_err(Failure::internal)
}

fn parse_shape(text: &str) -> Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Failure::usage(anyhow!(
                "bad --shape {text:?}; expected positive comma separated extents"
            ))),
        })
        .collect()
}

pub fn import(a: ImportArgs) -> CmdResult {
    let shape = parse_shape(&a.shape)?;
    let extents: [usize; 4] = shape
        .try_into()
        .map_err(|_| Failure::usage(anyhow!("--shape needs four extents (c_out,c_in,k,k)")))?;
    let raw = std::fs::read(&a.input).map_err(|e| Failure::usage(anyhow!("{}: {e}", a.input.display())))?;
    let t = Tensor4::from_raw_f32_le(extents, &raw)?;
    warn_small_kernel(t.k_h());
    t.save(&a.out, a.width.into())?;
    Ok(())
}

pub fn random(a: RandomArgs) -> CmdResult {
    let shape = parse_shape(&a.shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    let t = match shape[..] {
        [c, h, w] => AnyTensor::T3(Tensor3::new(c, h, w, data)?),
        [o, i, kh, kw] => AnyTensor::T4(Tensor4::new(o, i, kh, kw, data)?),
        _ => return Err(Failure::usage(anyhow!("--shape needs three or four extents"))),
    };
    t.save(&a.out, a.width.into())?;
    Ok(())
}
