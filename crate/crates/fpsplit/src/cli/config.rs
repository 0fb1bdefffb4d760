//! Run configuration: a sectioned TOML file resolved into typed settings.
//!
//! Every key is checked before any compute starts; messages carry the line of
//! the offending key so they can be fixed in place.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use toml::{Table, Value};

use crate::entropic_ot::{JkoOptions, ScalingInit};
use crate::error::{Error, Result};
use crate::grid::{Axis, Density, Grid};
use crate::interp::Interpolation;
use crate::model::{
    preset_generalized_langevin, preset_kolmogorov_chain, preset_vlasov_fpe, preset_vpfp_regularized, preset_wigner_fpe, linear_force, BlockPotential,
    DiffusionMatrix, InteractionKernel, Model,
};
use crate::scheme::{EpsilonRule, SchemeConfig};
use crate::transport::FlowConfig;

/// Environment variable that replaces `[output] directory`.
pub const OUTPUT_DIR_ENV: &str = "FPSPLIT_OUTPUT_DIR";

/// Name of the resolved-config echo written next to the outputs.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

const SECTIONS: [&str; 8] = ["model", "grid", "initial", "time", "solver", "output", "oracle", "validate"];

/// Raw text plus section/key lookup for line-precise messages.
struct Source<'a> {
    path: &'a str,
    text: &'a str,
}

impl Source<'_> {
    /// 1-based line of `key` inside `[section]`, or of the section header.
    fn line_of(&self, section: &str, key: Option<&str>) -> Option<usize> {
        let mut current = String::new();
        let mut header = None;
        for (i, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix('[') {
                current = rest.trim_end_matches(']').trim().to_string();
                if current == section {
                    header = Some(i + 1);
                }
                continue;
            }
            if current != section {
                continue;
            }
            if let Some(k) = key {
                if let Some(after) = line.strip_prefix(k) {
                    if after.trim_start().starts_with('=') {
                        return Some(i + 1);
                    }
                }
            }
        }
        header
    }

    fn err(&self, section: &str, key: Option<&str>, msg: impl std::fmt::Display) -> Error {
        let what = match key {
            Some(k) => format!("[{section}] {k}"),
            None => format!("[{section}]"),
        };
        match self.line_of(section, key) {
            Some(l) => Error::Config(format!("{}:{l}: {what}: {msg}", self.path)),
            None => Error::Config(format!("{}: {what}: {msg}", self.path)),
        }
    }
}

/// Typed view of one section with unknown-key detection.
struct Section<'a> {
    name: &'static str,
    table: Table,
    src: &'a Source<'a>,
    used: Vec<String>,
}

impl<'a> Section<'a> {
    fn new(root: &Table, name: &'static str, src: &'a Source<'a>, required: bool) -> Result<Self> {
        let table = match root.get(name) {
            Some(Value::Table(t)) => t.clone(),
            Some(_) => return Err(src.err(name, None, "must be a table")),
            None if required => return Err(Error::Config(format!("{}: missing section [{name}]", src.path))),
            None => Table::new(),
        };
        Ok(Self { name, table, src, used: Vec::new() })
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        self.src.err(self.name, Some(key), msg)
    }

    fn raw(&mut self, key: &str) -> Option<Value> {
        self.used.push(key.to_string());
        self.table.get(key).cloned()
    }

    fn f64_opt(&mut self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(v)),
            Some(Value::Integer(v)) => Ok(Some(v as f64)),
            Some(_) => Err(self.err(key, "expected a number")),
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    fn f64_req(&mut self, key: &str) -> Result<f64> {
        self.f64_opt(key)?.ok_or_else(|| self.err(key, "is required"))
    }

    fn usize_opt(&mut self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(v)) if v >= 0 => Ok(Some(v as usize)),
            Some(Value::Integer(v)) => Err(self.err(key, format!("must be >= 0, got {v}"))),
            Some(_) => Err(self.err(key, "expected an integer")),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize_opt(key)?.unwrap_or(default))
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(_) => Err(self.err(key, "expected true or false")),
        }
    }

    fn str_opt(&mut self, key: &str) -> Result<Option<String>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.err(key, "expected a string")),
        }
    }

    fn str(&mut self, key: &str, default: &str) -> Result<String> {
        Ok(self.str_opt(key)?.unwrap_or_else(|| default.to_string()))
    }

    fn floats_opt(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(x) => Ok(*x as f64),
                    _ => Err(self.err(key, "expected an array of numbers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(Value::Float(x)) => Ok(Some(vec![x])),
            Some(Value::Integer(x)) => Ok(Some(vec![x as f64])),
            Some(_) => Err(self.err(key, "expected an array of numbers")),
        }
    }

    fn floats_req(&mut self, key: &str) -> Result<Vec<f64>> {
        self.floats_opt(key)?.ok_or_else(|| self.err(key, "is required"))
    }

    fn matrices(&mut self, key: &str) -> Result<Vec<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(Vec::new()),
            Some(Value::Array(a)) => a
                .iter()
                .map(|row| match row {
                    Value::Array(r) => r
                        .iter()
                        .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).ok_or_else(|| self.err(key, "expected arrays of numbers")))
                        .collect(),
                    _ => Err(self.err(key, "expected an array of arrays")),
                })
                .collect(),
            Some(_) => Err(self.err(key, "expected an array of arrays")),
        }
    }

    /// Rejects keys that were never read.
    fn finish(self) -> Result<()> {
        for k in self.table.keys() {
            if !self.used.iter().any(|u| u == k) {
                return Err(self.err(k, "unknown key"));
            }
        }
        Ok(())
    }
}

/// Named scalar potential for one coordinate block.
#[derive(Clone, Debug, PartialEq)]
pub enum PotentialSpec {
    Zero,
    Quadratic(f64),
}

impl PotentialSpec {
    fn parse(s: &mut Section, kind_key: &str, k_key: &str, default: PotentialSpec) -> Result<Self> {
        let kind = s.str_opt(kind_key)?;
        let k = s.f64_opt(k_key)?;
        let spec = match kind.as_deref() {
            None => match (default, k) {
                (PotentialSpec::Quadratic(d), k) => PotentialSpec::Quadratic(k.unwrap_or(d)),
                (PotentialSpec::Zero, Some(k)) => PotentialSpec::Quadratic(k),
                (PotentialSpec::Zero, None) => PotentialSpec::Zero,
            },
            Some("zero") => PotentialSpec::Zero,
            Some("quadratic") => PotentialSpec::Quadratic(k.unwrap_or(1.0)),
            Some(other) => return Err(s.err(kind_key, format!("unknown potential '{other}' (expected zero or quadratic)"))),
        };
        if let PotentialSpec::Quadratic(k) = spec {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(s.err(k_key, "stiffness must be >= 0"));
            }
        }
        Ok(spec)
    }

    fn build(&self) -> BlockPotential {
        match *self {
            PotentialSpec::Zero => BlockPotential::zero(),
            PotentialSpec::Quadratic(k) => BlockPotential::quadratic(k),
        }
    }

    fn write(&self, t: &mut Table, kind_key: &str, k_key: &str) {
        match *self {
            PotentialSpec::Zero => {
                t.insert(kind_key.into(), "zero".into());
            }
            PotentialSpec::Quadratic(k) => {
                t.insert(kind_key.into(), "quadratic".into());
                t.insert(k_key.into(), k.into());
            }
        }
    }
}

/// Named interaction kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    None,
    Linear(f64),
    Gaussian { strength: f64, width: f64 },
}

impl KernelSpec {
    fn parse(s: &mut Section) -> Result<Self> {
        let kind = s.str("kernel", "none")?;
        let strength = s.f64_opt("kernel_strength")?;
        let width = s.f64_opt("kernel_width")?;
        match kind.as_str() {
            "none" => Ok(KernelSpec::None),
            "linear" => Ok(KernelSpec::Linear(strength.unwrap_or(1.0))),
            "gaussian" => {
                let width = width.unwrap_or(1.0);
                if !(width > 0.0) {
                    return Err(s.err("kernel_width", "must be > 0"));
                }
                Ok(KernelSpec::Gaussian { strength: strength.unwrap_or(1.0), width })
            }
            other => Err(s.err("kernel", format!("unknown kernel '{other}' (expected none, linear or gaussian)"))),
        }
    }

    fn build(&self, dim: usize) -> Option<InteractionKernel> {
        match *self {
            KernelSpec::None => None,
            KernelSpec::Linear(c) => Some(InteractionKernel::linear(dim, c)),
            KernelSpec::Gaussian { strength, width } => Some(InteractionKernel::gaussian(dim, strength, width)),
        }
    }

    fn write(&self, t: &mut Table) {
        match *self {
            KernelSpec::None => {
                t.insert("kernel".into(), "none".into());
            }
            KernelSpec::Linear(c) => {
                t.insert("kernel".into(), "linear".into());
                t.insert("kernel_strength".into(), c.into());
            }
            KernelSpec::Gaussian { strength, width } => {
                t.insert("kernel".into(), "gaussian".into());
                t.insert("kernel_strength".into(), strength.into());
                t.insert("kernel_width".into(), width.into());
            }
        }
    }
}

/// Model preset with its resolved parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    VlasovFpe { position_dim: usize, confinement: PotentialSpec, kernel: KernelSpec, velocity: PotentialSpec },
    WignerFpe { dim: usize, alpha: f64, beta: f64, sigma: f64, lambda: f64 },
    VpfpReg { position_dim: usize, confinement: PotentialSpec, kernel_epsilon: f64, beta: f64, sigma: f64 },
    KolmogorovChain { blocks: usize, block_dim: usize, potential: PotentialSpec },
    GenLangevin { block_dim: usize, force_stiffness: f64, kernel: KernelSpec, lambdas: Vec<Vec<f64>>, alphas: Vec<Vec<f64>> },
    /// Fields tabulated on the run grid.
    Custom { drift_file: PathBuf, potential_file: PathBuf, gradient_file: Option<PathBuf>, diffusion: Vec<f64> },
}

impl ModelSpec {
    pub fn preset_name(&self) -> &'static str {
        match self {
            ModelSpec::VlasovFpe { .. } => "vlasov_fpe",
            ModelSpec::WignerFpe { .. } => "wigner_fpe",
            ModelSpec::VpfpReg { .. } => "vpfp_reg",
            ModelSpec::KolmogorovChain { .. } => "kolmogorov_chain",
            ModelSpec::GenLangevin { .. } => "gen_langevin",
            ModelSpec::Custom { .. } => "custom",
        }
    }

    fn parse(s: &mut Section, base: &Path) -> Result<Self> {
        let preset = s.str_opt("preset")?.ok_or_else(|| s.err("preset", "is required"))?;
        let spec = match preset.as_str() {
            "vlasov_fpe" => ModelSpec::VlasovFpe {
                position_dim: s.usize("position_dim", 1)?,
                confinement: PotentialSpec::parse(s, "confinement", "confinement_stiffness", PotentialSpec::Quadratic(1.0))?,
                kernel: KernelSpec::parse(s)?,
                velocity: PotentialSpec::parse(s, "velocity_potential", "velocity_stiffness", PotentialSpec::Quadratic(1.0))?,
            },
            "wigner_fpe" => ModelSpec::WignerFpe {
                dim: s.usize("dim", 1)?,
                alpha: s.f64("alpha", 1.0)?,
                beta: s.f64("beta", 1.0)?,
                sigma: s.f64("sigma", 1.0)?,
                lambda: s.f64("lambda", 0.0)?,
            },
            "vpfp_reg" => ModelSpec::VpfpReg {
                position_dim: s.usize("position_dim", 2)?,
                confinement: PotentialSpec::parse(s, "confinement", "confinement_stiffness", PotentialSpec::Quadratic(1.0))?,
                kernel_epsilon: s.f64("kernel_epsilon", 0.1)?,
                beta: s.f64("beta", 1.0)?,
                sigma: s.f64("sigma", 1.0)?,
            },
            "kolmogorov_chain" => ModelSpec::KolmogorovChain {
                blocks: s.usize("blocks", 1)?,
                block_dim: s.usize("block_dim", 1)?,
                potential: PotentialSpec::parse(s, "potential", "stiffness", PotentialSpec::Zero)?,
            },
            "gen_langevin" => ModelSpec::GenLangevin {
                block_dim: s.usize("block_dim", 1)?,
                force_stiffness: s.f64("force_stiffness", 1.0)?,
                kernel: KernelSpec::parse(s)?,
                lambdas: s.matrices("lambdas")?,
                alphas: s.matrices("alphas")?,
            },
            "custom" => {
                let file = |s: &mut Section, key: &str| -> Result<Option<PathBuf>> {
                    match s.str_opt(key)? {
                        None => Ok(None),
                        Some(p) => {
                            let p = base.join(p);
                            if !p.is_file() {
                                return Err(s.err(key, format!("file {} does not exist", p.display())));
                            }
                            Ok(Some(p))
                        }
                    }
                };
                let drift_file = file(s, "drift_file")?.ok_or_else(|| s.err("drift_file", "is required for the custom preset"))?;
                let potential_file = file(s, "potential_file")?.ok_or_else(|| s.err("potential_file", "is required for the custom preset"))?;
                let gradient_file = file(s, "gradient_file")?;
                let diffusion = s.floats_req("diffusion")?;
                ModelSpec::Custom { drift_file, potential_file, gradient_file, diffusion }
            }
            other => {
                return Err(s.err(
                    "preset",
                    format!("unknown preset '{other}' (expected vlasov_fpe, wigner_fpe, vpfp_reg, kolmogorov_chain, gen_langevin or custom)"),
                ))
            }
        };
        Ok(spec)
    }

    fn write(&self, t: &mut Table) {
        t.insert("preset".into(), self.preset_name().into());
        let int = |v: usize| Value::Integer(v as i64);
        let mats = |m: &[Vec<f64>]| Value::Array(m.iter().map(|r| Value::Array(r.iter().map(|v| Value::Float(*v)).collect())).collect());
        match self {
            ModelSpec::VlasovFpe { position_dim, confinement, kernel, velocity } => {
                t.insert("position_dim".into(), int(*position_dim));
                confinement.write(t, "confinement", "confinement_stiffness");
                kernel.write(t);
                velocity.write(t, "velocity_potential", "velocity_stiffness");
            }
            ModelSpec::WignerFpe { dim, alpha, beta, sigma, lambda } => {
                t.insert("dim".into(), int(*dim));
                t.insert("alpha".into(), (*alpha).into());
                t.insert("beta".into(), (*beta).into());
                t.insert("sigma".into(), (*sigma).into());
                t.insert("lambda".into(), (*lambda).into());
            }
            ModelSpec::VpfpReg { position_dim, confinement, kernel_epsilon, beta, sigma } => {
                t.insert("position_dim".into(), int(*position_dim));
                confinement.write(t, "confinement", "confinement_stiffness");
                t.insert("kernel_epsilon".into(), (*kernel_epsilon).into());
                t.insert("beta".into(), (*beta).into());
                t.insert("sigma".into(), (*sigma).into());
            }
            ModelSpec::KolmogorovChain { blocks, block_dim, potential } => {
                t.insert("blocks".into(), int(*blocks));
                t.insert("block_dim".into(), int(*block_dim));
                potential.write(t, "potential", "stiffness");
            }
            ModelSpec::GenLangevin { block_dim, force_stiffness, kernel, lambdas, alphas } => {
                t.insert("block_dim".into(), int(*block_dim));
                t.insert("force_stiffness".into(), (*force_stiffness).into());
                kernel.write(t);
                t.insert("lambdas".into(), mats(lambdas));
                t.insert("alphas".into(), mats(alphas));
            }
            ModelSpec::Custom { drift_file, potential_file, gradient_file, diffusion } => {
                t.insert("drift_file".into(), drift_file.display().to_string().into());
                t.insert("potential_file".into(), potential_file.display().to_string().into());
                if let Some(g) = gradient_file {
                    t.insert("gradient_file".into(), g.display().to_string().into());
                }
                t.insert("diffusion".into(), Value::Array(diffusion.iter().map(|v| Value::Float(*v)).collect()));
            }
        }
    }
}

/// Named initial density.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialSpec {
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    File(PathBuf),
}

/// Output artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSpec {
    pub directory: PathBuf,
    /// Snapshot every `stride` windows (0 writes only the final density).
    pub snapshot_stride: usize,
    pub csv: bool,
    pub raw: bool,
}

/// Settings of the `oracle` command.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub epsilons: Vec<f64>,
    pub tol_objective: f64,
    pub tol_l1: f64,
    pub tol_marg: f64,
}

/// Settings of the `validate` command.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidateSpec {
    /// Window lengths at which the ε rule is checked, besides the run's own.
    pub check_h: Vec<f64>,
    pub seed: u64,
    /// Random density pairs for the measure-Lipschitz estimate.
    pub pairs: usize,
}

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub path: PathBuf,
    pub model: ModelSpec,
    pub unperturbed: bool,
    pub axes: Vec<Axis>,
    pub initial: InitialSpec,
    pub scheme: SchemeConfig,
    pub output: OutputSpec,
    pub oracle: OracleSpec,
    pub validate: ValidateSpec,
}

fn rule_from(s: &mut Section) -> Result<EpsilonRule> {
    let v = s.raw("epsilon_rule");
    let scale = s.f64_opt("epsilon_scale")?;
    match v {
        None => Ok(EpsilonRule::LogQuadratic),
        Some(Value::String(r)) => match r.as_str() {
            "log_quadratic" => Ok(EpsilonRule::LogQuadratic),
            "linear" => Ok(EpsilonRule::Linear(scale.unwrap_or(1.0))),
            other => Err(s.err("epsilon_rule", format!("unknown rule '{other}' (expected \"log_quadratic\", \"linear\" or a number)"))),
        },
        Some(Value::Float(e)) if e > 0.0 => Ok(EpsilonRule::Fixed(e)),
        Some(Value::Integer(e)) if e > 0 => Ok(EpsilonRule::Fixed(e as f64)),
        Some(_) => Err(s.err("epsilon_rule", "expected \"log_quadratic\", \"linear\" or a positive number")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` names the file in messages and anchors relative paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let shown = path.display().to_string();
        let src = Source { path: &shown, text };
        let root: Table = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("{shown}:{l}: {}", e.message().trim())),
                None => Error::Config(format!("{shown}: {}", e.message().trim())),
            }
        })?;
        for k in root.keys() {
            if !SECTIONS.contains(&k.as_str()) {
                return Err(src.err(k, None, "unknown section"));
            }
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

        let mut s = Section::new(&root, "model", &src, true)?;
        let model = ModelSpec::parse(&mut s, &base)?;
        let unperturbed = s.bool("unperturbed", false)?;
        s.finish()?;

        let mut s = Section::new(&root, "grid", &src, true)?;
        let lo = s.floats_req("lo")?;
        let hi = s.floats_req("hi")?;
        let n: Vec<usize> = match s.raw("n") {
            Some(Value::Integer(v)) => vec![usize::try_from(v).map_err(|_| s.err("n", "cell counts must be >= 1"))?; lo.len()],
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()).ok_or_else(|| s.err("n", "expected positive integers")))
                .collect::<Result<_>>()?,
            Some(_) => return Err(s.err("n", "expected an integer or an array of integers")),
            None => return Err(s.err("n", "is required")),
        };
        if lo.len() != hi.len() || lo.len() != n.len() {
            return Err(s.err("lo", format!("lo, hi and n lengths differ ({}, {}, {})", lo.len(), hi.len(), n.len())));
        }
        let mut axes = Vec::new();
        for k in 0..lo.len() {
            if n[k] == 0 {
                return Err(s.err("n", format!("axis {k}: cell count must be >= 1")));
            }
            if !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite() {
                return Err(s.err("hi", format!("axis {k}: spacing must be positive (lo = {}, hi = {})", lo[k], hi[k])));
            }
            axes.push(Axis::new(lo[k], hi[k], n[k]).map_err(|e| s.err("n", format!("axis {k}: {e}")))?);
        }
        s.finish()?;
        let d = axes.len();

        let mut s = Section::new(&root, "initial", &src, true)?;
        let kind = s.str("kind", "gaussian")?;
        let initial = match kind.as_str() {
            "gaussian" => {
                let mean = s.floats_opt("mean")?.unwrap_or_else(|| vec![0.0; d]);
                let var = s.floats_opt("var")?.unwrap_or_else(|| vec![1.0; d]);
                if mean.len() != d {
                    return Err(s.err("mean", format!("needs {d} entries")));
                }
                if var.len() != d || var.iter().any(|v| !(*v > 0.0)) {
                    return Err(s.err("var", format!("needs {d} positive entries")));
                }
                InitialSpec::Gaussian { mean, var }
            }
            "uniform" => {
                let lo = s.floats_req("lo")?;
                let hi = s.floats_req("hi")?;
                if lo.len() != d || hi.len() != d || lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
                    return Err(s.err("hi", format!("needs {d} entries with hi > lo")));
                }
                InitialSpec::Uniform { lo, hi }
            }
            "file" => {
                let p = s.str_opt("path")?.ok_or_else(|| s.err("path", "is required for kind = \"file\""))?;
                let p = base.join(p);
                if !p.is_file() {
                    return Err(s.err("path", format!("file {} does not exist", p.display())));
                }
                InitialSpec::File(p)
            }
            other => return Err(s.err("kind", format!("unknown initial density '{other}' (expected gaussian, uniform or file)"))),
        };
        s.finish()?;

        let mut s = Section::new(&root, "time", &src, true)?;
        let t_final = s.f64_req("t_final")?;
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(s.err("t_final", "must be positive"));
        }
        let windows = s.usize_opt("windows")?.ok_or_else(|| s.err("windows", "is required"))?;
        if windows == 0 {
            return Err(s.err("windows", "window count N must be >= 1"));
        }
        s.finish()?;

        let mut s = Section::new(&root, "solver", &src, false)?;
        let epsilon_rule = rule_from(&mut s)?;
        let dj = JkoOptions::default();
        let df = FlowConfig::default();
        let interpolation = match s.str_opt("interpolation")? {
            None => df.interpolation,
            Some(v) => v.parse::<Interpolation>().map_err(|e| s.err("interpolation", e))?,
        };
        let init = match s.usize_opt("init_seed")? {
            None => ScalingInit::Ones,
            Some(seed) => ScalingInit::Random(seed as u64),
        };
        let jko = JkoOptions {
            tol_marg: s.f64("tol_marg", dj.tol_marg)?,
            max_iter: s.usize("max_iter", dj.max_iter)?,
            sweeps_per_newton: s.usize("sweeps_per_newton", dj.sweeps_per_newton)?,
            max_refine: s.usize("max_refine", dj.max_refine)?,
            cell_budget: s.usize("cell_budget", dj.cell_budget)?,
            dense_limit: s.usize("dense_limit", dj.dense_limit)?,
            continuation: s.bool("continuation", dj.continuation)?,
            init,
            ..dj
        };
        let flow = FlowConfig {
            substeps: s.usize("substeps", df.substeps)?,
            interpolation,
            mass_tol: s.f64("mass_tol", df.mass_tol)?,
            hard_limit: s.f64("hard_limit", df.hard_limit)?,
        };
        let keep_plans = s.bool("keep_plans", false)?;
        let el = s.bool("el_residual", false)?;
        let scheme = SchemeConfig {
            t_final,
            windows,
            epsilon_rule,
            flow,
            jko,
            keep_plans,
            el_tests: if el { super::default_tests(d) } else { Vec::new() },
        };
        if let Err(Error::Config(m)) = jko.validate() {
            return Err(s.err("tol_marg", m));
        }
        if let Err(Error::Config(m)) = flow.validate() {
            return Err(s.err("substeps", m));
        }
        if !epsilon_rule.admissible(scheme.h()) {
            let h = scheme.h();
            let e = epsilon_rule.epsilon(h);
            return Err(s.err("epsilon_rule", format!("epsilon {e:e} at h = {h} violates eps*|log eps| <= 3h^2")));
        }
        s.finish()?;

        let mut s = Section::new(&root, "output", &src, false)?;
        let dir = s.str("directory", "out")?;
        let directory = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| base.join(dir));
        let snapshot_stride = s.usize("snapshot_stride", 0)?;
        let formats: Vec<String> = match s.raw("formats") {
            None => vec!["csv".into()],
            Some(Value::Array(a)) => a.iter().map(|v| v.as_str().map(str::to_string).ok_or_else(|| s.err("formats", "expected strings"))).collect::<Result<_>>()?,
            Some(_) => return Err(s.err("formats", "expected an array of strings")),
        };
        for f in &formats {
            if f != "csv" && f != "raw" {
                return Err(s.err("formats", format!("unknown format '{f}' (expected csv or raw)")));
            }
        }
        let output = OutputSpec { directory, snapshot_stride, csv: formats.iter().any(|f| f == "csv"), raw: formats.iter().any(|f| f == "raw") };
        s.finish()?;

        let mut s = Section::new(&root, "oracle", &src, false)?;
        let oracle = OracleSpec {
            epsilons: s.floats_opt("epsilons")?.unwrap_or_else(|| vec![1e-7]),
            tol_objective: s.f64("tol_objective", 1e-5)?,
            tol_l1: s.f64("tol_l1", 1e-4)?,
            tol_marg: s.f64("tol_marg", 1e-9)?,
        };
        if oracle.epsilons.is_empty() || oracle.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(s.err("epsilons", "needs at least one positive value"));
        }
        s.finish()?;

        let mut s = Section::new(&root, "validate", &src, false)?;
        let validate = ValidateSpec {
            check_h: s.floats_opt("check_h")?.unwrap_or_else(|| (3..=9).map(|k| 0.5f64.powi(k)).collect()),
            seed: s.usize("seed", 7)? as u64,
            pairs: s.usize("pairs", 4)?,
        };
        if validate.check_h.iter().any(|h| !(*h > 0.0)) {
            return Err(s.err("check_h", "window lengths must be positive"));
        }
        s.finish()?;

        Ok(RunConfig { path: path.to_path_buf(), model, unperturbed, axes, initial, scheme, output, oracle, validate })
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::new(self.axes.clone())?))
    }

    pub fn build_model(&self, grid: &Arc<Grid>) -> Result<Model> {
        let model = match &self.model {
            ModelSpec::VlasovFpe { position_dim, confinement, kernel, velocity } => {
                preset_vlasov_fpe(*position_dim, confinement.build(), kernel.build(*position_dim), velocity.build())?
            }
            ModelSpec::WignerFpe { dim, alpha, beta, sigma, lambda } => preset_wigner_fpe(*dim, *alpha, *beta, *sigma, *lambda)?,
            ModelSpec::VpfpReg { position_dim, confinement, kernel_epsilon, beta, sigma } => {
                preset_vpfp_regularized(*position_dim, confinement.build(), *kernel_epsilon, *beta, *sigma)?
            }
            ModelSpec::KolmogorovChain { blocks, block_dim, potential } => preset_kolmogorov_chain(*blocks, *block_dim, potential.build())?,
            ModelSpec::GenLangevin { block_dim, force_stiffness, kernel, lambdas, alphas } => {
                preset_generalized_langevin(*block_dim, linear_force(*force_stiffness), kernel.build(*block_dim), lambdas, alphas)?
            }
            ModelSpec::Custom { drift_file, potential_file, gradient_file, diffusion } => {
                let d = grid.dim();
                let drift = read_table(drift_file, grid, d)?;
                let potential = read_table(potential_file, grid, 1)?;
                let gradient = match gradient_file {
                    Some(p) => read_table(p, grid, d)?,
                    None => central_gradient(grid, &potential),
                };
                let a = DiffusionMatrix::new(d, diffusion.clone())?;
                Model::tabulated(grid.clone(), drift, potential, gradient, a)?
            }
        };
        if model.dim() != grid.dim() {
            return Err(self.section_err(
                "grid",
                Some("lo"),
                format!("the {} model is {}-dimensional but the grid has {} axes", self.model.preset_name(), model.dim(), grid.dim()),
            ));
        }
        model.with_unperturbed(self.unperturbed)
    }

    pub fn initial_density(&self, grid: &Arc<Grid>) -> Result<Density> {
        match &self.initial {
            InitialSpec::Gaussian { mean, var } => Density::gaussian(grid.clone(), mean, var),
            InitialSpec::Uniform { lo, hi } => Density::uniform(grid.clone(), lo, hi),
            InitialSpec::File(p) => {
                let rho = if matches!(p.extension().and_then(|e| e.to_str()), Some("raw" | "bin")) { Density::read_raw(p)? } else { Density::read_csv(p)? };
                if rho.grid() != grid.as_ref() {
                    return Err(self.section_err("initial", Some("path"), format!("snapshot grid {} differs from [grid]", rho.grid().header())));
                }
                Ok(rho)
            }
        }
    }

    fn section_err(&self, section: &str, key: Option<&str>, msg: impl std::fmt::Display) -> Error {
        let text = std::fs::read_to_string(&self.path).unwrap_or_default();
        let shown = self.path.display().to_string();
        Source { path: &shown, text: &text }.err(section, key, msg)
    }

    /// Every setting with defaults filled in; parsing it reproduces this config.
    pub fn resolved_toml(&self) -> String {
        let mut root = Table::new();
        let mut m = Table::new();
        self.model.write(&mut m);
        m.insert("unperturbed".into(), self.unperturbed.into());
        root.insert("model".into(), m.into());

        let mut g = Table::new();
        let floats = |v: &[f64]| Value::Array(v.iter().map(|x| Value::Float(*x)).collect());
        g.insert("lo".into(), floats(&self.axes.iter().map(|a| a.lo).collect::<Vec<_>>()));
        g.insert("hi".into(), floats(&self.axes.iter().map(|a| a.hi).collect::<Vec<_>>()));
        g.insert("n".into(), Value::Array(self.axes.iter().map(|a| Value::Integer(a.n as i64)).collect()));
        root.insert("grid".into(), g.into());

        let mut i = Table::new();
        match &self.initial {
            InitialSpec::Gaussian { mean, var } => {
                i.insert("kind".into(), "gaussian".into());
                i.insert("mean".into(), floats(mean));
                i.insert("var".into(), floats(var));
            }
            InitialSpec::Uniform { lo, hi } => {
                i.insert("kind".into(), "uniform".into());
                i.insert("lo".into(), floats(lo));
                i.insert("hi".into(), floats(hi));
            }
            InitialSpec::File(p) => {
                i.insert("kind".into(), "file".into());
                i.insert("path".into(), p.display().to_string().into());
            }
        }
        root.insert("initial".into(), i.into());

        let mut t = Table::new();
        t.insert("t_final".into(), self.scheme.t_final.into());
        t.insert("windows".into(), Value::Integer(self.scheme.windows as i64));
        root.insert("time".into(), t.into());

        let mut s = Table::new();
        match self.scheme.epsilon_rule {
            EpsilonRule::LogQuadratic => {
                s.insert("epsilon_rule".into(), "log_quadratic".into());
            }
            EpsilonRule::Fixed(e) => {
                s.insert("epsilon_rule".into(), e.into());
            }
            EpsilonRule::Linear(c) => {
                s.insert("epsilon_rule".into(), "linear".into());
                s.insert("epsilon_scale".into(), c.into());
            }
        }
        let j = &self.scheme.jko;
        let f = &self.scheme.flow;
        let int = |v: usize| Value::Integer(v as i64);
        s.insert("tol_marg".into(), j.tol_marg.into());
        s.insert("max_iter".into(), int(j.max_iter));
        s.insert("sweeps_per_newton".into(), int(j.sweeps_per_newton));
        s.insert("max_refine".into(), int(j.max_refine));
        s.insert("cell_budget".into(), int(j.cell_budget));
        s.insert("dense_limit".into(), int(j.dense_limit));
        s.insert("continuation".into(), j.continuation.into());
        if let ScalingInit::Random(seed) = j.init {
            s.insert("init_seed".into(), Value::Integer(seed as i64));
        }
        s.insert("substeps".into(), int(f.substeps));
        s.insert("interpolation".into(), if f.interpolation == Interpolation::Cubic { "cubic" } else { "multilinear" }.into());
        s.insert("mass_tol".into(), f.mass_tol.into());
        s.insert("hard_limit".into(), f.hard_limit.into());
        s.insert("keep_plans".into(), self.scheme.keep_plans.into());
        s.insert("el_residual".into(), (!self.scheme.el_tests.is_empty()).into());
        root.insert("solver".into(), s.into());

        let mut o = Table::new();
        o.insert("directory".into(), self.output.directory.display().to_string().into());
        o.insert("snapshot_stride".into(), int(self.output.snapshot_stride));
        let mut formats = Vec::new();
        if self.output.csv {
            formats.push(Value::from("csv"));
        }
        if self.output.raw {
            formats.push(Value::from("raw"));
        }
        o.insert("formats".into(), Value::Array(formats));
        root.insert("output".into(), o.into());

        let mut q = Table::new();
        q.insert("epsilons".into(), floats(&self.oracle.epsilons));
        q.insert("tol_objective".into(), self.oracle.tol_objective.into());
        q.insert("tol_l1".into(), self.oracle.tol_l1.into());
        q.insert("tol_marg".into(), self.oracle.tol_marg.into());
        root.insert("oracle".into(), q.into());

        let mut v = Table::new();
        v.insert("check_h".into(), floats(&self.validate.check_h));
        v.insert("seed".into(), Value::Integer(self.validate.seed as i64));
        v.insert("pairs".into(), int(self.validate.pairs));
        root.insert("validate".into(), v.into());
        root.to_string()
    }
}

/// Reads a tabulated field: the snapshot header line, then `ncomp` values per cell.
fn read_table(path: &Path, grid: &Grid, ncomp: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config(format!("{}: empty table", path.display())))?;
    let g = Grid::parse_header(header)?;
    if &g != grid {
        return Err(Error::Config(format!("{}: table grid {} differs from [grid]", path.display(), g.header())));
    }
    let mut values = Vec::with_capacity(grid.len() * ncomp);
    for (i, line) in lines.enumerate() {
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok.parse().map_err(|_| Error::Config(format!("{}:{}: bad value {tok}", path.display(), i + 2)))?;
            if !v.is_finite() {
                return Err(Error::Config(format!("{}:{}: value {tok} is not finite", path.display(), i + 2)));
            }
            values.push(v);
        }
    }
    if values.len() != grid.len() * ncomp {
        return Err(Error::Config(format!("{}: expected {} values, found {}", path.display(), grid.len() * ncomp, values.len())));
    }
    Ok(values)
}

/// Centered differences of a cell field, one-sided at the box faces.
fn central_gradient(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let strides = grid.strides().to_vec();
    let mut idx = vec![0usize; d];
    let mut out = vec![0.0; grid.len() * d];
    for c in 0..grid.len() {
        grid.multi_index(c, &mut idx);
        for k in 0..d {
            let n = grid.axis(k).n;
            if n == 1 {
                continue;
            }
            let dx = grid.spacing(k);
            let (lo, hi, span) = match idx[k] {
                0 => (c, c + strides[k], dx),
                i if i + 1 == n => (c - strides[k], c, dx),
                _ => (c - strides[k], c + strides[k], 2.0 * dx),
            };
            out[c * d + k] = (f[hi] - f[lo]) / span;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAT: &str = "\
[model]
preset = \"kolmogorov_chain\"

[grid]
lo = [-6.0]
hi = [6.0]
n = 64

[initial]
kind = \"gaussian\"
mean = [0.0]
var = [0.25]

[time]
t_final = 0.5
windows = 8
";

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("cfg.toml"))
    }

    fn message(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn heat_config_resolves_with_defaults() {
        let c = parse(HEAT).unwrap();
        assert_eq!(c.scheme.windows, 8);
        assert_eq!(c.scheme.epsilon_rule, EpsilonRule::LogQuadratic);
        assert_eq!(c.axes[0].n, 64);
        assert_eq!(c.model, ModelSpec::KolmogorovChain { blocks: 1, block_dim: 1, potential: PotentialSpec::Zero });
        let g = c.grid().unwrap();
        assert_eq!(c.build_model(&g).unwrap().dim(), 1);
    }

    #[test]
    fn zero_windows_is_rejected_with_its_line() {
        let m = message(parse(&HEAT.replace("windows = 8", "windows = 0")));
        assert!(m.starts_with("cfg.toml:16:"), "{m}");
        assert!(m.contains("windows"), "{m}");
    }

    #[test]
    fn negative_spacing_names_the_axis() {
        let m = message(parse(&HEAT.replace("hi = [6.0]", "hi = [-7.0]")));
        assert!(m.contains("axis 0"), "{m}");
        assert!(m.starts_with("cfg.toml:6:"), "{m}");
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let m = message(parse(&HEAT.replace("windows = 8", "windows = 8\nwindow = 3")));
        assert!(m.contains("unknown key") && m.contains("cfg.toml:17:"), "{m}");
        let m = message(parse(&format!("{HEAT}\n[extra]\nx = 1\n")));
        assert!(m.contains("unknown section"), "{m}");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let m = message(parse(&HEAT.replace("n = 64", "n = = 64")));
        assert!(m.starts_with("cfg.toml:7:"), "{m}");
    }

    #[test]
    fn linear_epsilon_rule_fails_validation() {
        let m = message(parse(&format!("{HEAT}\n[solver]\nepsilon_rule = \"linear\"\n")));
        assert!(m.contains("epsilon_rule"), "{m}");
    }

    #[test]
    fn resolved_echo_round_trips() {
        let text = format!("{HEAT}\n[solver]\ntol_marg = 1e-9\ninterpolation = \"cubic\"\n[output]\ndirectory = \"/tmp/x\"\nformats = [\"csv\", \"raw\"]\n");
        let a = parse(&text).unwrap();
        let echo = a.resolved_toml();
        let b = RunConfig::parse(&echo, Path::new("cfg.toml")).unwrap();
        assert_eq!(echo, b.resolved_toml());
        assert_eq!(b.scheme.jko.tol_marg, 1e-9);
        assert_eq!(b.scheme.flow.interpolation, Interpolation::Cubic);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let c = parse(&HEAT.replace("blocks", "x").replace("preset = \"kolmogorov_chain\"", "preset = \"vlasov_fpe\"")).unwrap();
        let g = c.grid().unwrap();
        assert!(matches!(c.build_model(&g), Err(Error::Config(_))));
    }

    #[test]
    fn central_gradient_of_linear_field_is_exact() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 5).unwrap(), Axis::new(0.0, 2.0, 4).unwrap()]).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|c| {
            let x = g.center(c);
            2.0 * x[0] - 3.0 * x[1]
        }).collect();
        let gr = central_gradient(&g, &f);
        for c in 0..g.len() {
            assert!((gr[2 * c] - 2.0).abs() < 1e-12 && (gr[2 * c + 1] + 3.0).abs() < 1e-12);
        }
    }
}
