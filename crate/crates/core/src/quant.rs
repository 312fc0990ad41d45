//! Block floating-point quantization with a block size of one, i.e. a
//! per-scalar sign / 7-bit exponent / `m`-bit mantissa format.
//!
//! For nonzero `v`:
//!
//! ```text
//! e    = clamp(floor(log2 |v|), -64, 63)
//! step = 2^(e - (m - 1))
//! q    = round(|v| / step)            (ties away from zero)
//! v'   = sign(v) * q * step
//! ```
//!
//! If rounding carries `q` up to `2^m` the exponent is bumped and `q` halved,
//! which keeps the value and keeps `q` in `m` bits. Magnitudes past the top
//! exponent clamp to the largest representable value and are reported as
//! saturated; those are the elements whose straight-through gradient is
//! zeroed.

use std::fs;
use std::path::Path;

use crate::basis::BasisKind;
use crate::bytes::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{self, CompressedLayer};

pub const EXPONENT_BITS: u32 = 7;
pub const BLOCK_SIZE: usize = 1;
pub const EXP_MIN: i32 = -64;
pub const EXP_MAX: i32 = 63;
pub const QUANT_MAGIC: &[u8; 4] = b"FKQ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BfpConfig {
    mantissa_bits: u32,
}

impl BfpConfig {
    pub fn new(mantissa_bits: u32) -> Result<Self> {
        if !(1..=23).contains(&mantissa_bits) {
            return Err(Error::argument(format!(
                "mantissa bits must be in 1..=23, got {mantissa_bits}"
            )));
        }
        Ok(BfpConfig { mantissa_bits })
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.mantissa_bits
    }

    /// Sign + exponent + mantissa.
    pub fn bits_per_value(&self) -> u32 {
        self.mantissa_bits + EXPONENT_BITS + 1
    }

    /// Bytes per element in the packed `FKQ1` payload.
    pub fn packed_bytes(&self) -> usize {
        (self.bits_per_value() as usize).div_ceil(8)
    }

    fn max_mantissa(&self) -> u32 {
        (1 << self.mantissa_bits) - 1
    }
}

/// Storage precision for model-size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full32,
    Bfp(BfpConfig),
}

impl Precision {
    pub fn bits_per_value(&self) -> u32 {
        match self {
            Precision::Full32 => 32,
            Precision::Bfp(cfg) => cfg.bits_per_value(),
        }
    }
}

/// One encoded scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub negative: bool,
    pub exponent: i32,
    /// Mantissa magnitude, `< 2^m`.
    pub mantissa: u32,
    pub saturated: bool,
}

fn unbiased_exponent(v: f64) -> i32 {
    let field = ((v.to_bits() >> 52) & 0x7ff) as i32;
    if field == 0 {
        // Subnormal: far below EXP_MIN either way.
        -1023
    } else {
        field - 1023
    }
}

#[inline]
fn step(exponent: i32, cfg: &BfpConfig) -> f64 {
    2f64.powi(exponent - (cfg.mantissa_bits as i32 - 1))
}

pub fn encode(v: f64, cfg: &BfpConfig) -> Encoded {
    let negative = v.is_sign_negative() && v != 0.0;
    let mag = v.abs();
    if mag == 0.0 {
        return Encoded {
            negative: false,
            exponent: 0,
            mantissa: 0,
            saturated: false,
        };
    }
    let raw = unbiased_exponent(mag);
    if raw > EXP_MAX {
        return Encoded {
            negative,
            exponent: EXP_MAX,
            mantissa: cfg.max_mantissa(),
            saturated: true,
        };
    }
    let mut exponent = raw.max(EXP_MIN);
    let mut q = (mag / step(exponent, cfg)).round();
    if q > cfg.max_mantissa() as f64 {
        if exponent == EXP_MAX {
            return Encoded {
                negative,
                exponent,
                mantissa: cfg.max_mantissa(),
                saturated: true,
            };
        }
        exponent += 1;
        q = (1u32 << (cfg.mantissa_bits - 1)) as f64;
    }
    Encoded {
        negative,
        exponent,
        mantissa: q as u32,
        saturated: false,
    }
}

pub fn decode(e: Encoded, cfg: &BfpConfig) -> f64 {
    let mag = e.mantissa as f64 * step(e.exponent, cfg);
    if e.negative {
        -mag
    } else {
        mag
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Data(format!(
            "cannot quantize non-finite value {} at index {i}",
            values[i]
        ))),
    }
}

/// Quantizes and immediately dequantizes `values`. Returns the dequantized
/// values and the encoded size in bits.
pub fn quantize_bfp(values: &[f64], cfg: &BfpConfig) -> Result<(Vec<f64>, u64)> {
    check_finite(values)?;
    let deq = values.iter().map(|&v| decode(encode(v, cfg), cfg)).collect();
    Ok((deq, values.len() as u64 * cfg.bits_per_value() as u64))
}

/// Straight-through gradient: identity where the quantizer did not saturate,
/// zero where it clamped.
pub fn ste_passthrough(upstream_grad: &[f64], values: &[f64], cfg: &BfpConfig) -> Result<Vec<f64>> {
    if upstream_grad.len() != values.len() {
        return Err(Error::argument(format!(
            "gradient has {} elements, values have {}",
            upstream_grad.len(),
            values.len()
        )));
    }
    Ok(upstream_grad
        .iter()
        .zip(values)
        .map(|(&g, &v)| if encode(v, cfg).saturated { 0.0 } else { g })
        .collect())
}

/// Encoded model size in bytes.
pub fn model_size_bytes(param_count: u64, precision: Precision) -> f64 {
    param_count as f64 * precision.bits_per_value() as f64 / 8.0
}

fn pack(e: Encoded, cfg: &BfpConfig) -> u32 {
    let m = cfg.mantissa_bits;
    e.mantissa | (((e.exponent - EXP_MIN) as u32) << m) | ((e.negative as u32) << (m + EXPONENT_BITS))
}

fn unpack(word: u32, cfg: &BfpConfig) -> Encoded {
    let m = cfg.mantissa_bits;
    Encoded {
        negative: (word >> (m + EXPONENT_BITS)) & 1 == 1,
        exponent: ((word >> m) & 0x7f) as i32 + EXP_MIN,
        mantissa: word & cfg.max_mantissa(),
        saturated: false,
    }
}

fn put_packed(out: &mut Vec<u8>, values: &[f64], cfg: &BfpConfig) {
    let width = cfg.packed_bytes();
    for &v in values {
        out.extend_from_slice(&pack(encode(v, cfg), cfg).to_le_bytes()[..width]);
    }
}

fn read_packed(r: &mut Reader<'_>, count: usize, cfg: &BfpConfig) -> Result<Vec<f64>> {
    let width = cfg.packed_bytes();
    let bytes = r.take(
        count
            .checked_mul(width)
            .ok_or_else(|| Error::format("FKQ1: payload overflows"))?,
    )?;
    Ok(bytes
        .chunks_exact(width)
        .map(|chunk| {
            let mut word = [0u8; 4];
            word[..width].copy_from_slice(chunk);
            decode(unpack(u32::from_le_bytes(word), cfg), cfg)
        })
        .collect())
}

/// A layer whose coefficients and bias have been through the quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    config: BfpConfig,
    /// Dequantized layer; its values are exactly representable under `config`.
    layer: CompressedLayer,
}

impl QuantizedLayer {
    pub fn new(layer: &CompressedLayer, config: BfpConfig) -> Result<Self> {
        let (coeffs, _) = quantize_bfp(layer.coeffs().data(), &config)?;
        let bias = match layer.bias() {
            Some(b) => Some(quantize_bfp(b, &config)?.0),
            None => None,
        };
        let layer = CompressedLayer::new(
            layer.kind(),
            layer.k(),
            layer.coeffs().with_data(coeffs)?,
            layer.fit_report().clone(),
            bias,
        )?;
        Ok(QuantizedLayer { config, layer })
    }

    pub fn config(&self) -> BfpConfig {
        self.config
    }

    pub fn layer(&self) -> &CompressedLayer {
        &self.layer
    }

    pub fn into_layer(self) -> CompressedLayer {
        self.layer
    }

    pub fn param_count(&self) -> u64 {
        (self.layer.coeffs().data().len() + self.layer.bias().map_or(0, <[f64]>::len)) as u64
    }

    /// `FKQ1`: the `FKC1` layout with the mantissa width after the kind byte
    /// and each coefficient / bias value packed into `ceil((m + 8) / 8)` bytes
    /// (mantissa in the low `m` bits, then exponent + 64, then sign).
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.layer;
        let mut out = Vec::new();
        out.extend_from_slice(QUANT_MAGIC);
        out.push(l.kind().code());
        out.push(self.config.mantissa_bits as u8);
        for e in [l.c_out(), l.c_in(), l.k(), l.n()] {
            bytes::put_u64(&mut out, e);
        }
        out.push(l.bias().is_some() as u8);
        put_packed(&mut out, l.coeffs().data(), &self.config);
        if let Some(b) = l.bias() {
            put_packed(&mut out, b, &self.config);
        }
        let mse = &l.fit_report().mse;
        bytes::put_u64(&mut out, mse.len());
        bytes::put_f64s(&mut out, mse);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "FKQ1");
        if r.take(4)? != QUANT_MAGIC {
            return Err(Error::format("missing FKQ1 magic"));
        }
        let kind = BasisKind::from_code(r.u8()?)?;
        let config = BfpConfig::new(r.u8()? as u32).map_err(|e| Error::Format(e.to_string()))?;
        let header = model::read_layer_extents(&mut r, kind, "FKQ1")?;
        let coeffs = read_packed(&mut r, header.coeff_count()?, &config)?;
        let bias = if header.has_bias {
            Some(read_packed(&mut r, header.c_out, &config)?)
        } else {
            None
        };
        let mse = model::read_mse_trailer(&mut r, header.c_out * header.c_in, "FKQ1")?;
        r.finish()?;
        Ok(QuantizedLayer {
            config,
            layer: header.into_layer(coeffs, bias, mse)?,
        })
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{CoeffTensor, FitReport};

    fn m(bits: u32) -> BfpConfig {
        BfpConfig::new(bits).unwrap()
    }

    #[test]
    fn config_range() {
        assert!(BfpConfig::new(0).is_err());
        assert!(BfpConfig::new(24).is_err());
        assert_eq!(m(8).bits_per_value(), 16);
        assert_eq!(m(8).packed_bytes(), 2);
        assert_eq!(m(4).packed_bytes(), 2);
        assert_eq!(m(23).packed_bytes(), 4);
        assert_eq!(m(1).packed_bytes(), 2);
    }

    #[test]
    fn exact_values() {
        let (deq, bits) = quantize_bfp(&[1.0, 0.0, -0.0, -0.5, 3.0], &m(8)).unwrap();
        assert_eq!(deq, vec![1.0, 0.0, 0.0, -0.5, 3.0]);
        assert_eq!(bits, 5 * 16);
    }

    #[test]
    fn hand_computed_rounding() {
        // m = 2, v = 1.4: e = 0, step = 0.5, q = round(2.8) = 3 -> 1.5
        assert_eq!(decode(encode(1.4, &m(2)), &m(2)), 1.5);
        // m = 2, v = 1.9: q = round(3.8) = 4 = 2^m -> carried to e = 1, q = 2 -> 2.0
        let e = encode(1.9, &m(2));
        assert_eq!((e.exponent, e.mantissa), (1, 2));
        assert_eq!(decode(e, &m(2)), 2.0);
        // m = 1, v = -0.3: e = -2, step = 0.25, q = round(1.2) = 1 -> -0.25
        assert_eq!(decode(encode(-0.3, &m(1)), &m(1)), -0.25);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(quantize_bfp(&[1.0, f64::NAN], &m(8)), Err(Error::Data(_))));
        assert!(matches!(quantize_bfp(&[f64::NEG_INFINITY], &m(8)), Err(Error::Data(_))));
    }

    #[test]
    fn saturation() {
        let cfg = m(8);
        let big = 2f64.powi(64);
        let e = encode(big, &cfg);
        assert!(e.saturated);
        assert_eq!(decode(e, &cfg), 255.0 * 2f64.powi(63 - 7));
        assert!(encode(-big * 3.0, &cfg).saturated);
        // Just below 2^64 rounds past the top mantissa.
        assert!(encode(2f64.powi(64) * (1.0 - 1e-6), &cfg).saturated);
        assert!(!encode(2f64.powi(63), &cfg).saturated);
        // Underflow rounds toward zero without saturating.
        let tiny = encode(1e-40, &cfg);
        assert!(!tiny.saturated);
        assert_eq!(decode(tiny, &cfg), 0.0);
    }

    #[test]
    fn ste_examples() {
        let cfg = m(8);
        let values = [0.5, -3.0, 2f64.powi(64), 1e-30];
        let grad = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ste_passthrough(&grad, &values, &cfg).unwrap(), vec![1.0, 2.0, 0.0, 4.0]);
        assert_eq!(ste_passthrough(&[0.0; 4], &values, &cfg).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            ste_passthrough(&grad[..3], &values, &cfg),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn table_sizes() {
        let mb = |p: f64, prec| model_size_bytes((p * 1e6).round() as u64, prec) / 1e6;
        assert!((mb(11.68, Precision::Full32) - 46.72).abs() < 1e-9);
        assert!((mb(11.68, Precision::Bfp(m(8))) - 23.36).abs() < 1e-9);
        assert!((mb(7.09, Precision::Bfp(m(8))) - 14.18).abs() < 1e-9);
        assert!((mb(11.68, Precision::Bfp(m(4))) - 17.52).abs() < 1e-9);
    }

    #[test]
    fn pack_round_trip_all_fields() {
        for bits in [1, 4, 8, 16, 23] {
            let cfg = m(bits);
            for v in [0.0, 1.0, -1.0, 0.3, -7.25e10, 1e-19, 2f64.powi(63), -2f64.powi(-64)] {
                let e = encode(v, &cfg);
                let back = unpack(pack(e, &cfg), &cfg);
                assert_eq!(decode(back, &cfg), decode(e, &cfg), "m={bits} v={v}");
            }
        }
    }

    fn layer() -> CompressedLayer {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 - 11.0) * 0.173).collect();
        let coeffs = CoeffTensor::new(2, 3, 2, data).unwrap();
        CompressedLayer::new(
            BasisKind::Chebyshev,
            3,
            coeffs,
            FitReport::from_mse(vec![0.5; 6]),
            Some(vec![0.1, -2.0]),
        )
        .unwrap()
    }

    #[test]
    fn fkq_round_trip() {
        for bits in [1, 3, 8, 12, 23] {
            let q = QuantizedLayer::new(&layer(), m(bits)).unwrap();
            let buf = q.to_bytes();
            let header = 4 + 1 + 1 + 32 + 1;
            let payload = (24 + 2) * m(bits).packed_bytes();
            assert_eq!(buf.len(), header + payload + 8 + 6 * 8);
            let back = QuantizedLayer::from_bytes(&buf).unwrap();
            assert_eq!(back, q);
        }
    }

    #[test]
    fn fkq_rejects_bad_input() {
        let buf = QuantizedLayer::new(&layer(), m(8)).unwrap().to_bytes();
        assert!(QuantizedLayer::from_bytes(&buf[..buf.len() - 2]).is_err());
        let mut bad_m = buf.clone();
        bad_m[5] = 0;
        assert!(matches!(QuantizedLayer::from_bytes(&bad_m), Err(Error::Format(_))));
        assert!(QuantizedLayer::from_bytes(b"FKC1").is_err());
    }
}
