use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use sconv_core::model::{reconstruct, reconstruction_error};

use crate::commands::{load_kernels, load_layer};
use crate::report::Run;
use crate::{Failure, VisualizeArgs};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Selector {
    o: Option<usize>,
    i: Option<usize>,
}

pub(crate) fn parse_selector(text: &str) -> Result<Selector, Failure> {
    let bad = || Failure::usage(anyhow!("bad --filter {text:?}; expected `all` or `o=N,i=M`"));
    let mut sel = Selector::default();
    if text.trim() == "all" {
        return Ok(sel);
    }
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, val) = part.split_once('=').ok_or_else(bad)?;
        let val = val.trim().parse::<usize>().map_err(|_| bad())?;
        let slot = match key.trim() {
            "o" => &mut sel.o,
            "i" => &mut sel.i,
            _ => return Err(bad()),
        };
        if slot.replace(val).is_some() {
            return Err(bad());
        }
    }
    Ok(sel)
}

/// Binary greymap; every tap becomes a `scale x scale` square.
fn pgm(values: &[f64], k: usize, lo: f64, hi: f64, scale: usize) -> Vec<u8> {
    let side = k * scale;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    let span = hi - lo;
    for y in 0..side {
        for x in 0..side {
            let v = values[(y / scale) * k + x / scale];
            let g = if span > 0.0 {
                ((v - lo) / span * 255.0).round()
            } else {
                128.0
            };
            out.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::usage)
}

pub fn run(a: VisualizeArgs) -> Result<(), Failure> {
    let mut run = Run::start();
    let kernels = load_kernels(&mut run, &a.kernels)?;
    let (layer, _) = load_layer(&mut run, &a.compressed)?;
    let sel = parse_selector(&a.filter)?;
    if a.scale == 0 {
        return Err(Failure::usage(anyhow!("--scale must be at least 1")));
    }
    let (c_out, c_in, k) = (layer.c_out(), layer.c_in(), layer.k());
    for (name, idx, max) in [("o", sel.o, c_out), ("i", sel.i, c_in)] {
        if let Some(v) = idx.filter(|&v| v >= max) {
            return Err(Failure::usage(anyhow!("--filter {name}={v} out of range (0..{max})")));
        }
    }

    let errors = reconstruction_error(&kernels, &layer)?;
    let approx = reconstruct(&layer);
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))
        .map_err(Failure::usage)?;

    let mut summary = String::from("o,i,mse,l2,max_abs\n");
    for o in (0..c_out).filter(|&o| sel.o.is_none_or(|s| s == o)) {
        for i in (0..c_in).filter(|&i| sel.i.is_none_or(|s| s == i)) {
            let orig = kernels.filter(o, i);
            let recon = approx.filter(o, i);
            let e = errors[o * c_in + i];
            let _ = writeln!(summary, "{o},{i},{:e},{:e},{:e}", e.mse, e.l2, e.max_abs);

            let mut csv = String::from("a,b,original,reconstructed,residual\n");
            for (idx, (&w, &r)) in orig.iter().zip(recon).enumerate() {
                let _ = writeln!(csv, "{},{},{w:e},{r:e},{:e}", idx / k, idx % k, w - r);
            }
            let stem = format!("filter_o{o}_i{i}");
            write(&a.out_dir.join(format!("{stem}.csv")), csv)?;

            let (lo, hi) = orig
                .iter()
                .chain(recon)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            write(
                &a.out_dir.join(format!("{stem}_original.pgm")),
                pgm(orig, k, lo, hi, a.scale),
            )?;
            write(
                &a.out_dir.join(format!("{stem}_reconstructed.pgm")),
                pgm(recon, k, lo, hi, a.scale),
            )?;
        }
    }
    write(&a.out_dir.join("summary.csv"), summary)
}
