//! Whole-network parameter accounting from a layer-shape descriptor and a
//! per-block harmonic configuration.
//!
//! Descriptor files are plain text:
//!
//! ```text
//! # comment
//! name = resnet20
//! reduction_base = total          # or: compressible
//!
//! [layers]
//! # id          block   c_out c_in k groups bias compressible
//! conv1         stem    16    3    3 1      no   yes
//! ```
//!
//! A layer holds `c_out * (c_in / groups) * k^2` weights plus `c_out` if it has
//! a bias. Under a harmonic count `n`, a compressible layer holds
//! `c_out * (c_in / groups) * n^2` weights instead; biases are unchanged.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamCounts;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub block_tag: String,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub groups: usize,
    pub bias: bool,
    pub compressible: bool,
}

impl LayerSpec {
    fn weights(&self, side: usize) -> u64 {
        (self.c_out * (self.c_in / self.groups) * side * side) as u64
    }

    fn bias_params(&self) -> u64 {
        if self.bias {
            self.c_out as u64
        } else {
            0
        }
    }

    pub fn params(&self) -> u64 {
        self.weights(self.k) + self.bias_params()
    }

    /// Counts with `n` harmonics per axis; `None` keeps the layer dense.
    pub fn param_counts(&self, n: Option<usize>) -> ParamCounts {
        let compressed = match n {
            Some(n) => self.weights(n) + self.bias_params(),
            None => self.params(),
        };
        ParamCounts::new(self.params(), compressed)
    }
}

/// What a reduction percentage is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionBase {
    /// Every parameter in the network.
    Total,
    /// Only the parameters of compressible layers.
    Compressible,
}

impl FromStr for ReductionBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(ReductionBase::Total),
            "compressible" => Ok(ReductionBase::Compressible),
            _ => Err(Error::config(format!(
                "reduction_base must be total or compressible, got {s:?}"
            ))),
        }
    }
}

impl ReductionBase {
    pub fn as_str(self) -> &'static str {
        match self {
            ReductionBase::Total => "total",
            ReductionBase::Compressible => "compressible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub name: String,
    pub reduction_base: ReductionBase,
    pub layers: Vec<LayerSpec>,
}

const BUILTINS: &[(&str, &str)] = &[
    ("resnet18", include_str!("../data/resnet18.arch")),
    ("resnet20", include_str!("../data/resnet20.arch")),
    ("resnet32", include_str!("../data/resnet32.arch")),
    ("convnext_t", include_str!("../data/convnext_t.arch")),
];

fn parse_flag(s: &str, line: usize) -> Result<bool> {
    match s {
        "yes" | "true" | "1" => Ok(true),
        "no" | "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("line {line}: expected yes/no, got {s:?}"))),
    }
}

fn parse_count(s: &str, what: &str, line: usize) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::config(format!(
            "line {line}: {what} must be a positive integer, got {s:?}"
        ))),
    }
}

impl ArchDescriptor {
    pub fn new(name: impl Into<String>, reduction_base: ReductionBase, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = ArchDescriptor {
            name: name.into(),
            reduction_base,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config(format!("{}: no layers", self.name)));
        }
        let mut ids = HashSet::new();
        for l in &self.layers {
            if !ids.insert(l.id.as_str()) {
                return Err(Error::config(format!("duplicate layer id {:?}", l.id)));
            }
            if [l.c_out, l.c_in, l.k, l.groups].contains(&0) {
                return Err(Error::config(format!("layer {:?}: counts must be positive", l.id)));
            }
            if l.c_in % l.groups != 0 || l.c_out % l.groups != 0 {
                return Err(Error::config(format!(
                    "layer {:?}: groups {} must divide c_in {} and c_out {}",
                    l.id, l.groups, l.c_in, l.c_out
                )));
            }
            if l.compressible && l.k < 2 {
                return Err(Error::config(format!(
                    "layer {:?}: a {}x{} kernel cannot be compressible",
                    l.id, l.k, l.k
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut base = ReductionBase::Total;
        let mut layers = Vec::new();
        let mut in_layers = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if line == "[layers]" {
                in_layers = true;
                continue;
            }
            if !in_layers {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("line {line_no}: expected key = value")))?;
                match key.trim() {
                    "name" => name = Some(value.trim().to_string()),
                    "reduction_base" => base = value.trim().parse()?,
                    k => return Err(Error::config(format!("line {line_no}: unknown key {k:?}"))),
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 8 {
                return Err(Error::config(format!(
                    "line {line_no}: expected 8 columns (id block c_out c_in k groups bias compressible), got {}",
                    f.len()
                )));
            }
            layers.push(LayerSpec {
                id: f[0].to_string(),
                block_tag: f[1].to_string(),
                c_out: parse_count(f[2], "c_out", line_no)?,
                c_in: parse_count(f[3], "c_in", line_no)?,
                k: parse_count(f[4], "k", line_no)?,
                groups: parse_count(f[5], "groups", line_no)?,
                bias: parse_flag(f[6], line_no)?,
                compressible: parse_flag(f[7], line_no)?,
            });
        }
        let name = name.ok_or_else(|| Error::config("descriptor has no name"))?;
        Self::new(name, base, layers)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "reduction_base = {}", self.reduction_base.as_str());
        let _ = writeln!(out, "\n[layers]\n# id block c_out c_in k groups bias compressible");
        let flag = |b: bool| if b { "yes" } else { "no" };
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                l.id,
                l.block_tag,
                l.c_out,
                l.c_in,
                l.k,
                l.groups,
                flag(l.bias),
                flag(l.compressible)
            );
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    /// Descriptors shipped with the crate: `resnet18`, `resnet20`, `resnet32`,
    /// `convnext_t`.
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("bundled descriptor parses"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|(n, _)| *n)
    }

    pub fn with_reduction_base(mut self, base: ReductionBase) -> Self {
        self.reduction_base = base;
        self
    }

    pub fn compressible_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.compressible)
    }

    /// Distinct block tags of compressible layers, in first-appearance order.
    pub fn blocks(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (_, l) in self.compressible_layers() {
            if !seen.contains(&l.block_tag.as_str()) {
                seen.push(l.block_tag.as_str());
            }
        }
        seen
    }
}

/// Harmonic count for every compressible layer of one architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarmonicConfig {
    /// Aligned with `ArchDescriptor::layers`; `None` for dense layers.
    per_layer: Vec<Option<usize>>,
}

impl HarmonicConfig {
    pub fn from_per_layer(arch: &ArchDescriptor, per_layer: Vec<Option<usize>>) -> Result<Self> {
        if per_layer.len() != arch.layers.len() {
            return Err(Error::argument(format!(
                "{} assignments for {} layers",
                per_layer.len(),
                arch.layers.len()
            )));
        }
        Ok(HarmonicConfig { per_layer })
    }

    /// Every compressible layer at its full kernel size.
    pub fn identity(arch: &ArchDescriptor) -> Self {
        HarmonicConfig {
            per_layer: arch.layers.iter().map(|l| l.compressible.then_some(l.k)).collect(),
        }
    }

    pub fn per_layer(&self) -> &[Option<usize>] {
        &self.per_layer
    }
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    n: usize,
    repeat: Option<usize>,
}

fn parse_token(text: &str) -> Result<Token<'_>> {
    let bad = || Error::config(format!("bad harmonic token {text:?}"));
    let positive = |s: &str| s.trim().parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
    let split = text.split_once(['x', 'X', '×']);
    match split {
        Some((n, r)) => Ok(Token {
            text,
            n: positive(n)?,
            repeat: Some(positive(r)?),
        }),
        None => Ok(Token {
            text,
            n: positive(text)?,
            repeat: None,
        }),
    }
}

/// Parses either a per-block list (`"6,3,3,3,2"`, one entry per block tag of
/// the compressible layers) or repeat notation (`"7x3,7x3,7x9,6x3"`, expanded
/// over compressible layers in order; a bare entry counts once).
pub fn parse_config(text: &str, arch: &ArchDescriptor) -> Result<HarmonicConfig> {
    let tokens = text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(parse_token)
        .collect::<Result<Vec<_>>>()?;
    if tokens.is_empty() {
        return Err(Error::config("empty harmonic configuration"));
    }
    let compressible: Vec<(usize, &LayerSpec)> = arch.compressible_layers().collect();
    let mut per_layer = vec![None; arch.layers.len()];

    if tokens.iter().any(|t| t.repeat.is_some()) {
        let expanded: Vec<Token> = tokens
            .iter()
            .flat_map(|t| std::iter::repeat_n(*t, t.repeat.unwrap_or(1)))
            .collect();
        if expanded.len() != compressible.len() {
            return Err(Error::config(format!(
                "{text:?} expands to {} layers, {} has {} compressible layers",
                expanded.len(),
                arch.name,
                compressible.len()
            )));
        }
        for (tok, (idx, layer)) in expanded.iter().zip(&compressible) {
            assign(&mut per_layer, *idx, layer, tok)?;
        }
    } else {
        let blocks = arch.blocks();
        if tokens.len() != blocks.len() {
            return Err(Error::config(format!(
                "{text:?} gives {} entries, {} has {} blocks ({})",
                tokens.len(),
                arch.name,
                blocks.len(),
                blocks.join(", ")
            )));
        }
        for (idx, layer) in &compressible {
            let b = blocks.iter().position(|&b| b == layer.block_tag).unwrap();
            assign(&mut per_layer, *idx, layer, &tokens[b])?;
        }
    }
    Ok(HarmonicConfig { per_layer })
}

fn assign(per_layer: &mut [Option<usize>], idx: usize, layer: &LayerSpec, tok: &Token<'_>) -> Result<()> {
    if tok.n > layer.k {
        return Err(Error::config(format!(
            "token {:?}: n = {} exceeds k = {} of layer {:?}",
            tok.text, tok.n, layer.k, layer.id
        )));
    }
    per_layer[idx] = Some(tok.n);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamTotals {
    pub baseline_total: u64,
    pub total: u64,
    /// Parameters (weights and biases) of compressible layers.
    pub baseline_compressible: u64,
    pub compressible: u64,
    pub base: ReductionBase,
    /// `100 * (1 - after / before)` over the chosen base.
    pub reduction_pct: f64,
    /// `100 * after / before` over the chosen base.
    pub retained_pct: f64,
}

pub fn total_params(arch: &ArchDescriptor, config: Option<&HarmonicConfig>) -> Result<ParamTotals> {
    if let Some(c) = config {
        if c.per_layer.len() != arch.layers.len() {
            return Err(Error::argument(
                "harmonic configuration belongs to a different architecture",
            ));
        }
    }
    let (mut baseline_total, mut total, mut baseline_comp, mut comp) = (0u64, 0u64, 0u64, 0u64);
    for (idx, layer) in arch.layers.iter().enumerate() {
        let n = config.and_then(|c| c.per_layer[idx]);
        if let Some(n) = n {
            if !layer.compressible {
                return Err(Error::argument(format!("layer {:?} is not compressible", layer.id)));
            }
            if n == 0 || n > layer.k {
                return Err(Error::argument(format!(
                    "n = {n} invalid for layer {:?} with k = {}",
                    layer.id, layer.k
                )));
            }
        }
        let counts = layer.param_counts(n);
        baseline_total += counts.original;
        total += counts.compressed;
        if layer.compressible {
            baseline_comp += counts.original;
            comp += counts.compressed;
        }
    }
    let (before, after) = match arch.reduction_base {
        ReductionBase::Total => (baseline_total, total),
        ReductionBase::Compressible => (baseline_comp, comp),
    };
    let retained_pct = if before == 0 {
        100.0
    } else {
        100.0 * after as f64 / before as f64
    };
    Ok(ParamTotals {
        baseline_total,
        total,
        baseline_compressible: baseline_comp,
        compressible: comp,
        base: arch.reduction_base,
        reduction_pct: 100.0 - retained_pct,
        retained_pct,
    })
}
