//! Dense real tensors and the `FKT1` container.
//!
//! Layout on disk:
//!
//! ```text
//! 0..4    magic "FKT1"
//! 4       rank (3 or 4)
//! 5       element width in bytes (4 or 8)
//! 6..8    reserved, zero
//! 8..     rank x u64 LE extents
//! ..      payload, row-major LE IEEE-754
//! ```
//!
//! Values are always held as `f64`; 32-bit is a storage option only.

use std::fs;
use std::path::Path;

use crate::bytes::{self, Reader};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FKT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementWidth {
    F32,
    F64,
}

impl ElementWidth {
    fn bytes(self) -> u8 {
        match self {
            ElementWidth::F32 => 4,
            ElementWidth::F64 => 8,
        }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Data(format!("non-finite value {} at flat index {i}", data[i]))),
    }
}

fn check_extents(extents: &[usize], len: usize) -> Result<()> {
    if let Some(pos) = extents.iter().position(|&e| e == 0) {
        return Err(Error::argument(format!("extent {pos} of {extents:?} is zero")));
    }
    let volume = bytes::volume(extents).map_err(|e| Error::argument(e.to_string()))?;
    if volume != len {
        return Err(Error::argument(format!(
            "extents {extents:?} need {volume} values, got {len}"
        )));
    }
    Ok(())
}

/// Kernel weights with axis order `(c_out, c_in, k_h, k_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    c_out: usize,
    c_in: usize,
    k_h: usize,
    k_w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(c_out: usize, c_in: usize, k_h: usize, k_w: usize, data: Vec<f64>) -> Result<Self> {
        check_extents(&[c_out, c_in, k_h, k_w], data.len())?;
        check_finite(&data)?;
        Ok(Tensor4 {
            c_out,
            c_in,
            k_h,
            k_w,
            data,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Result<Self> {
        let len = bytes::volume(&[c_out, c_in, k_h, k_w]).map_err(|e| Error::argument(e.to_string()))?;
        Self::new(c_out, c_in, k_h, k_w, vec![0.0; len])
    }

    pub fn from_fn(
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(c_out * c_in * k_h * k_w);
        for o in 0..c_out {
            for i in 0..c_in {
                for a in 0..k_h {
                    for b in 0..k_w {
                        data.push(f(o, i, a, b));
                    }
                }
            }
        }
        Self::new(c_out, c_in, k_h, k_w, data)
    }

    /// Builds a tensor from bare little-endian `f32` values, as exported by
    /// most training frameworks.
    pub fn from_raw_f32_le(extents: [usize; 4], raw: &[u8]) -> Result<Self> {
        if !raw.len().is_multiple_of(4) {
            return Err(Error::format(format!(
                "raw payload of {} bytes is not a multiple of 4",
                raw.len()
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let want = bytes::volume(&extents)?;
        if want != data.len() {
            return Err(Error::format(format!(
                "extents {extents:?} need {want} values, raw payload holds {}",
                data.len()
            )));
        }
        let [c_out, c_in, k_h, k_w] = extents;
        Self::new(c_out, c_in, k_h, k_w, data)
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn k_h(&self) -> usize {
        self.k_h
    }

    pub fn k_w(&self) -> usize {
        self.k_w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k_h, self.k_w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Side length of square kernels.
    pub fn square_side(&self) -> Result<usize> {
        if self.k_h != self.k_w {
            return Err(Error::argument(format!(
                "kernel is {}x{}, only square kernels can be expressed as a series",
                self.k_h, self.k_w
            )));
        }
        Ok(self.k_h)
    }

    pub fn filter_count(&self) -> usize {
        self.c_out * self.c_in
    }

    /// The `k_h * k_w` weights of filter `(o, i)`, row-major.
    pub fn filter(&self, o: usize, i: usize) -> &[f64] {
        let len = self.k_h * self.k_w;
        let start = (o * self.c_in + i) * len;
        &self.data[start..start + len]
    }

    /// Iterates filters in `(o, i)` row-major order.
    pub fn filters(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.k_h * self.k_w)
    }

    pub fn get(&self, o: usize, i: usize, a: usize, b: usize) -> f64 {
        self.data[((o * self.c_in + i) * self.k_h + a) * self.k_w + b]
    }

    pub fn save(&self, path: impl AsRef<Path>, width: ElementWidth) -> Result<()> {
        AnyTensor::T4(self.clone()).save(path, width)
    }

    /// Loads a file that must hold a rank-4 tensor.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match AnyTensor::load(path.as_ref())? {
            AnyTensor::T4(t) => Ok(t),
            AnyTensor::T3(_) => Err(Error::format(format!(
                "{}: expected a rank-4 kernel tensor, found rank 3",
                path.as_ref().display()
            ))),
        }
    }
}

/// Feature map with axis order `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_extents(&[channels, height, width], data.len())?;
        check_finite(&data)?;
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn save(&self, path: impl AsRef<Path>, width: ElementWidth) -> Result<()> {
        AnyTensor::T3(self.clone()).save(path, width)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match AnyTensor::load(path.as_ref())? {
            AnyTensor::T3(t) => Ok(t),
            AnyTensor::T4(_) => Err(Error::format(format!(
                "{}: expected a rank-3 feature map, found rank 4",
                path.as_ref().display()
            ))),
        }
    }
}

/// Either tensor rank an `FKT1` file may hold.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    T3(Tensor3),
    T4(Tensor4),
}

impl AnyTensor {
    fn extents(&self) -> Vec<usize> {
        match self {
            AnyTensor::T3(t) => t.shape().to_vec(),
            AnyTensor::T4(t) => t.shape().to_vec(),
        }
    }

    fn data(&self) -> &[f64] {
        match self {
            AnyTensor::T3(t) => t.data(),
            AnyTensor::T4(t) => t.data(),
        }
    }

    pub fn to_bytes(&self, width: ElementWidth) -> Vec<u8> {
        let extents = self.extents();
        let data = self.data();
        let mut out = Vec::with_capacity(8 + 8 * extents.len() + data.len() * width.bytes() as usize);
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(extents.len() as u8);
        out.push(width.bytes());
        out.extend_from_slice(&[0, 0]);
        for &e in &extents {
            bytes::put_u64(&mut out, e);
        }
        match width {
            ElementWidth::F64 => bytes::put_f64s(&mut out, data),
            ElementWidth::F32 => {
                for &v in data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "FKT1");
        if r.take(4)? != TENSOR_MAGIC {
            return Err(Error::format("missing FKT1 magic"));
        }
        let rank = r.u8()?;
        if rank != 3 && rank != 4 {
            return Err(Error::format(format!("FKT1: unsupported rank {rank}")));
        }
        let width = match r.u8()? {
            4 => ElementWidth::F32,
            8 => ElementWidth::F64,
            w => return Err(Error::format(format!("FKT1: unsupported element width {w}"))),
        };
        if r.take(2)? != [0, 0] {
            return Err(Error::format("FKT1: reserved bytes are not zero"));
        }
        let extents = (0..rank)
            .map(|axis| r.extent(&format!("axis {axis}")))
            .collect::<Result<Vec<_>>>()?;
        let count = bytes::volume(&extents)?;
        let elem = width.bytes() as usize;
        let expected = count
            .checked_mul(elem)
            .ok_or_else(|| Error::format("FKT1: payload size overflows"))?;
        if r.remaining() != expected {
            return Err(Error::format(format!(
                "FKT1: extents {extents:?} declare {count} values ({expected} bytes), payload has {} bytes",
                r.remaining()
            )));
        }
        let data: Vec<f64> = match width {
            ElementWidth::F64 => (0..count).map(|_| r.f64()).collect::<Result<_>>()?,
            ElementWidth::F32 => (0..count).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?,
        };
        r.finish()?;
        check_finite(&data)?;
        Ok(match extents[..] {
            [c, h, w] => AnyTensor::T3(Tensor3 {
                channels: c,
                height: h,
                width: w,
                data,
            }),
            [o, i, h, w] => AnyTensor::T4(Tensor4 {
                c_out: o,
                c_in: i,
                k_h: h,
                k_w: w,
                data,
            }),
            _ => unreachable!(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, width: ElementWidth) -> Result<()> {
        fs::write(path, self.to_bytes(width))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf =
            fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&buf)
    }
}
