//! File formats: `key = value` model and run-configuration files, JSON
//! containers for ground states and responses, CSV adaptation traces.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptStep;
use crate::density::Density;
use crate::eigensolver::EigenOptions;
use crate::gauges::GaugeKind;
use crate::groundstate::{BandPolicy, ChannelState, GroundState, GroundStateOptions, SpectrumSlice, OCCUPATION_THRESHOLD};
use crate::linalg::CMat;
use crate::model::{build_basis, HamiltonianChannel, LocalPotential};
use crate::report::{format_float, SolverReport};
use crate::response::{DysonOptions, HartreeKernel, ResponseResult};
use crate::smearing::{SmearingKind, SmearingScheme};
use crate::sternheimer::{Method, SternheimerOptions};
use crate::{Complex, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits structured text into entries. `#` starts a comment; blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected 'key = value', found '{body}'"),
        })?;
        let key = k.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(Error::Parse { line, msg: "empty key".into() });
        }
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_num<V: std::str::FromStr>(e: &Entry) -> Result<V> {
    e.value.parse().map_err(|_| Error::Parse {
        line: e.line,
        msg: format!("cannot read '{}' as a number for '{}'", e.value, e.key),
    })
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse {
            line: e.line,
            msg: format!("expected a boolean for '{}'", e.key),
        }),
    }
}

fn strip_brackets(s: &str, line: usize) -> Result<&str> {
    s.trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::Parse {
            line,
            msg: "expected a bracketed list".into(),
        })
}

/// `[(m, re, im), ...]`.
pub fn parse_triples(s: &str, line: usize) -> Result<Vec<(i64, f64, f64)>> {
    let inner = strip_brackets(s, line)?.trim();
    let bad = |msg: String| Error::Parse { line, msg };
    let mut out = Vec::new();
    let mut rest = inner;
    while !rest.is_empty() {
        let open = rest.strip_prefix('(').ok_or_else(|| bad(format!("expected '(' at '{rest}'")))?;
        let (tuple, after) = open.split_once(')').ok_or_else(|| bad("unclosed '('".into()))?;
        let parts: Vec<&str> = tuple.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected (mode, re, im), found ({tuple})")));
        }
        let m = parts[0].parse().map_err(|_| bad(format!("bad mode '{}'", parts[0])))?;
        let re = parts[1].parse().map_err(|_| bad(format!("bad number '{}'", parts[1])))?;
        let im = parts[2].parse().map_err(|_| bad(format!("bad number '{}'", parts[2])))?;
        out.push((m, re, im));
        rest = after.trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
        } else if !rest.is_empty() {
            return Err(bad(format!("expected ',' before '{rest}'")));
        }
    }
    Ok(out)
}

/// `[a, b, ...]` of numbers or words.
pub fn parse_list<V: std::str::FromStr>(s: &str, line: usize) -> Result<Vec<V>> {
    let inner = strip_brackets(s, line)?.trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|x| {
            x.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad list entry '{}'", x.trim()),
            })
        })
        .collect()
}

pub fn potential_from_triples(t: &[(i64, f64, f64)]) -> Result<LocalPotential<f64>> {
    LocalPotential::new(t.iter().map(|&(m, re, im)| (m, Complex::new(re, im))))
}

pub fn potential_to_triples(v: &LocalPotential<f64>) -> Vec<(i64, f64, f64)> {
    v.iter().map(|(m, z)| (m, z.re, z.im)).collect()
}

pub fn format_triples(t: &[(i64, f64, f64)]) -> String {
    let body: Vec<String> = t.iter().map(|(m, re, im)| format!("({m}, {re:?}, {im:?})")).collect();
    format!("[{}]", body.join(", "))
}

/// One channel as described by a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub cell_length: f64,
    pub ecut: f64,
    pub potential: Vec<(i64, f64, f64)>,
    pub weight: f64,
    pub f_max: f64,
}

const MODEL_KEYS: [&str; 5] = ["cell_length", "ecut", "potential", "weight", "f_max"];

impl ModelSpec {
    fn from_entries<'a>(entries: impl IntoIterator<Item = &'a Entry>) -> Result<Self> {
        let mut cell_length = None;
        let mut ecut = None;
        let mut potential = Vec::new();
        let mut weight = 1.0;
        let mut f_max = 2.0;
        for e in entries {
            match e.key.as_str() {
                "cell_length" => cell_length = Some(parse_num(e)?),
                "ecut" => ecut = Some(parse_num(e)?),
                "potential" => potential = parse_triples(&e.value, e.line)?,
                "weight" => weight = parse_num(e)?,
                "f_max" => f_max = parse_num(e)?,
                other => {
                    return Err(Error::Parse {
                        line: e.line,
                        msg: format!("unknown model key '{other}'"),
                    })
                }
            }
        }
        Ok(Self {
            cell_length: cell_length.ok_or_else(|| Error::invalid("model needs cell_length"))?,
            ecut: ecut.ok_or_else(|| Error::invalid("model needs ecut"))?,
            potential,
            weight,
            f_max,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_key_values(text)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "cell_length = {:?}\necut = {:?}\nweight = {:?}\nf_max = {:?}\npotential = {}\n",
            self.cell_length,
            self.ecut,
            self.weight,
            self.f_max,
            format_triples(&self.potential)
        )
    }

    pub fn build(&self) -> Result<HamiltonianChannel<f64>> {
        let basis = build_basis(self.cell_length, self.ecut)?;
        HamiltonianChannel::new(basis, potential_from_triples(&self.potential)?, self.weight, self.f_max)
    }

    pub fn from_channel(ch: &HamiltonianChannel<f64>) -> Self {
        Self {
            cell_length: ch.basis().cell_length(),
            ecut: ch.basis().ecut(),
            potential: potential_to_triples(ch.potential()),
            weight: ch.weight(),
            f_max: ch.f_max(),
        }
    }
}

/// A perturbation file: the model format restricted to `potential`.
pub fn parse_perturbation(text: &str) -> Result<LocalPotential<f64>> {
    let entries = parse_key_values(text)?;
    let mut found = None;
    for e in &entries {
        if e.key == "potential" {
            found = Some(parse_triples(&e.value, e.line)?);
        }
    }
    potential_from_triples(&found.ok_or_else(|| Error::invalid("perturbation file has no 'potential'"))?)
}

pub fn read_perturbation(path: &Path) -> Result<LocalPotential<f64>> {
    parse_perturbation(&fs::read_to_string(path)?)
}

/// Everything a command needs besides its positional files.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub models: Vec<ModelSpec>,
    pub smearing: SmearingKind,
    pub temperature: f64,
    pub n_el: Option<f64>,
    pub policy: BandPolicy,
    pub threshold: f64,
    pub eig_tol: f64,
    pub eig_max_iter: usize,
    pub method: Method,
    pub gauge: GaugeKind,
    pub tol: f64,
    pub max_iter: usize,
    pub precond_shift: f64,
    pub seed: u64,
    pub perturbation: Option<PathBuf>,
    pub mixing: f64,
    pub dyson_tol: f64,
    pub dyson_max_iter: usize,
    pub kernel_scale: f64,
    pub xi_target: f64,
    pub max_added: usize,
    pub adapt_channel: usize,
    pub gaps: Vec<f64>,
    pub bench_methods: Vec<Method>,
    pub bench: crate::bench::GapModelParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stern = SternheimerOptions::<f64>::default();
        let dyson = DysonOptions::default();
        Self {
            models: Vec::new(),
            smearing: SmearingKind::FermiDirac,
            temperature: 1e-2,
            n_el: None,
            policy: BandPolicy::default(),
            threshold: OCCUPATION_THRESHOLD,
            eig_tol: 1e-10,
            eig_max_iter: 500,
            method: stern.method,
            gauge: GaugeKind::default(),
            tol: stern.tol,
            max_iter: stern.max_iter,
            precond_shift: stern.precond_shift,
            seed: 0,
            perturbation: None,
            mixing: dyson.mixing,
            dyson_tol: dyson.tol,
            dyson_max_iter: dyson.max_iter,
            kernel_scale: 1.0,
            xi_target: 2.2,
            max_added: 30,
            adapt_channel: 0,
            gaps: vec![1.0, 1e-1, 1e-2, 1e-3],
            bench_methods: vec![Method::Direct, Method::Schur],
            bench: crate::bench::GapModelParams::default(),
        }
    }
}

impl RunConfig {
    /// Parses a configuration; `model = path` entries are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let entries = parse_key_values(text)?;
        let mut cfg = Self::default();
        let mut inline = Vec::new();
        for e in &entries {
            match e.key.as_str() {
                k if MODEL_KEYS.contains(&k) => inline.push(e.clone()),
                "model" => {
                    let p = base.join(&e.value);
                    let text = fs::read_to_string(&p).map_err(|err| Error::Parse {
                        line: e.line,
                        msg: format!("cannot read model file {}: {err}", p.display()),
                    })?;
                    cfg.models.push(ModelSpec::parse(&text)?);
                }
                "smearing" => cfg.smearing = e.value.parse()?,
                "temperature" => cfg.temperature = parse_num(e)?,
                "n_el" => cfg.n_el = Some(parse_num(e)?),
                "n_conv" => cfg.policy.n_conv = Some(parse_num(e)?),
                "n_ex" => cfg.policy.n_ex = parse_num(e)?,
                "guard" => cfg.policy.guard = parse_num(e)?,
                "auto_grow" => cfg.policy.auto_grow = parse_bool(e)?,
                "threshold" => cfg.threshold = parse_num(e)?,
                "eig_tol" => cfg.eig_tol = parse_num(e)?,
                "eig_max_iter" => cfg.eig_max_iter = parse_num(e)?,
                "method" => cfg.method = e.value.parse()?,
                "gauge" => cfg.gauge = e.value.parse()?,
                "tol" => cfg.tol = parse_num(e)?,
                "max_iter" => cfg.max_iter = parse_num(e)?,
                "precond_shift" => cfg.precond_shift = parse_num(e)?,
                "seed" => cfg.seed = parse_num(e)?,
                "perturbation" => cfg.perturbation = Some(base.join(&e.value)),
                "mixing" => cfg.mixing = parse_num(e)?,
                "dyson_tol" => cfg.dyson_tol = parse_num(e)?,
                "dyson_max_iter" => cfg.dyson_max_iter = parse_num(e)?,
                "kernel_scale" => cfg.kernel_scale = parse_num(e)?,
                "xi_target" => cfg.xi_target = parse_num(e)?,
                "max_added" => cfg.max_added = parse_num(e)?,
                "adapt_channel" => cfg.adapt_channel = parse_num(e)?,
                "gaps" => cfg.gaps = parse_list(&e.value, e.line)?,
                "bench_methods" => cfg.bench_methods = parse_list(&e.value, e.line)?,
                "bench_cell_scale" => cfg.bench.cell_scale = parse_num(e)?,
                "bench_ecut" => cfg.bench.ecut = parse_num(e)?,
                "bench_background" => cfg.bench.background = parse_num(e)?,
                "bench_occupied" => cfg.bench.occupied = parse_num(e)?,
                "bench_temperature" => cfg.bench.temperature = parse_num(e)?,
                "bench_smearing" => cfg.bench.smearing = e.value.parse()?,
                "bench_dv_amplitude" => cfg.bench.dv_amplitude = parse_num(e)?,
                "bench_dv_max_mode" => cfg.bench.dv_max_mode = parse_num(e)?,
                other => {
                    return Err(Error::Parse {
                        line: e.line,
                        msg: format!("unknown key '{other}'"),
                    })
                }
            }
        }
        if !inline.is_empty() {
            cfg.models.insert(0, ModelSpec::from_entries(&inline)?);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn smearing_scheme(&self) -> Result<SmearingScheme<f64>> {
        SmearingScheme::new(self.smearing, self.temperature)
    }

    pub fn channels(&self) -> Result<Vec<HamiltonianChannel<f64>>> {
        if self.models.is_empty() {
            return Err(Error::invalid("configuration defines no model"));
        }
        self.models.iter().map(ModelSpec::build).collect()
    }

    pub fn groundstate_options(&self) -> GroundStateOptions<f64> {
        GroundStateOptions {
            policy: self.policy,
            eigen: self.eigen_options(),
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    pub fn eigen_options(&self) -> EigenOptions<f64> {
        EigenOptions {
            tol: self.eig_tol,
            max_iter: self.eig_max_iter,
            precond_shift: self.precond_shift,
        }
    }

    pub fn sternheimer_options(&self) -> SternheimerOptions<f64> {
        SternheimerOptions {
            method: self.method,
            tol: self.tol,
            max_iter: self.max_iter,
            precond_shift: self.precond_shift,
        }
    }

    pub fn dyson_options(&self) -> DysonOptions {
        DysonOptions {
            mixing: self.mixing,
            tol: self.dyson_tol,
            max_iter: self.dyson_max_iter,
        }
    }

    pub fn kernel(&self) -> HartreeKernel {
        HartreeKernel::new(self.kernel_scale)
    }
}

/// Column-major complex matrix as two real arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &CMat<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            re: m.iter().map(|z| z.re).collect(),
            im: m.iter().map(|z| z.im).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<CMat<f64>> {
        if self.re.len() != self.rows * self.cols || self.im.len() != self.re.len() {
            return Err(Error::Format("matrix array length does not match its shape".into()));
        }
        Ok(CMat::from_iterator(
            self.rows,
            self.cols,
            self.re.iter().zip(&self.im).map(|(&r, &i)| Complex::new(r, i)),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisData {
    pub cell_length: f64,
    pub ecut: f64,
    pub n_max: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub basis: BasisData,
    pub potential: Vec<(i64, f64, f64)>,
    pub weight: f64,
    pub f_max: f64,
    pub n_occupied: usize,
    pub n_extra: usize,
    pub n_converged: usize,
    pub phi: MatrixData,
    pub phi_ex: MatrixData,
    pub eps: Vec<f64>,
    pub eps_ex: Vec<f64>,
    pub res_norms: Vec<f64>,
    pub converged: Vec<bool>,
    pub occupations: Vec<f64>,
    pub eigensolver_h_applies: u64,
    pub h_applies: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmearingData {
    pub kind: SmearingKind,
    pub temperature: f64,
}

/// Ground-state container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStateFile {
    pub format_version: u32,
    pub seed: u64,
    pub smearing: SmearingData,
    pub fermi_level: f64,
    pub n_el: f64,
    pub occupation_threshold: f64,
    /// Band counts, applied uniformly to every channel.
    pub band_policy: BandPolicy,
    pub channels: Vec<ChannelData>,
}

impl GroundStateFile {
    pub fn from_groundstate(gs: &GroundState<f64>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: gs.seed,
            smearing: SmearingData {
                kind: gs.smearing.kind(),
                temperature: gs.smearing.temperature(),
            },
            fermi_level: gs.fermi_level,
            n_el: gs.n_el,
            occupation_threshold: gs.threshold,
            band_policy: gs.policy,
            channels: gs
                .channels
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let b = c.channel.basis();
                    ChannelData {
                        basis: BasisData {
                            cell_length: b.cell_length(),
                            ecut: b.ecut(),
                            n_max: b.n_max(),
                        },
                        potential: potential_to_triples(c.channel.potential()),
                        weight: c.channel.weight(),
                        f_max: c.channel.f_max(),
                        n_occupied: c.slice.n_occ(),
                        n_extra: c.slice.n_ex(),
                        n_converged: c.n_conv,
                        phi: MatrixData::from_matrix(&c.slice.phi),
                        phi_ex: MatrixData::from_matrix(&c.slice.phi_ex),
                        eps: c.slice.eps.clone(),
                        eps_ex: c.slice.eps_ex.clone(),
                        res_norms: c.slice.res_norms.clone(),
                        converged: c.slice.converged.clone(),
                        occupations: gs.occupations(k),
                        eigensolver_h_applies: c.eig_applies,
                        h_applies: c.channel.apply_count(),
                    }
                })
                .collect(),
        }
    }

    pub fn to_groundstate(&self) -> Result<GroundState<f64>> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported ground-state format version {}",
                self.format_version
            )));
        }
        let smearing = SmearingScheme::new(self.smearing.kind, self.smearing.temperature)?;
        let mut channels = Vec::with_capacity(self.channels.len());
        for c in &self.channels {
            let basis = build_basis(c.basis.cell_length, c.basis.ecut)?;
            if basis.n_max() != c.basis.n_max {
                return Err(Error::Format("basis descriptor is inconsistent".into()));
            }
            let ch = HamiltonianChannel::new(basis, potential_from_triples(&c.potential)?, c.weight, c.f_max)?;
            ch.set_apply_count(c.h_applies);
            let phi = c.phi.to_matrix()?;
            let phi_ex = c.phi_ex.to_matrix()?;
            let dim = ch.dim();
            if phi.nrows() != dim || phi_ex.nrows() != dim || phi.ncols() != c.eps.len() || phi_ex.ncols() != c.eps_ex.len() {
                return Err(Error::Format("band arrays do not match the basis".into()));
            }
            if c.res_norms.len() != c.eps.len() + c.eps_ex.len() || c.converged.len() != c.res_norms.len() {
                return Err(Error::Format("residual arrays have the wrong length".into()));
            }
            channels.push(ChannelState {
                channel: ch,
                slice: SpectrumSlice {
                    phi,
                    eps: c.eps.clone(),
                    phi_ex,
                    eps_ex: c.eps_ex.clone(),
                    res_norms: c.res_norms.clone(),
                    converged: c.converged.clone(),
                },
                n_conv: c.n_converged,
                eig_applies: c.eigensolver_h_applies,
            });
        }
        if channels.is_empty() {
            return Err(Error::Format("ground state has no channels".into()));
        }
        Ok(GroundState {
            channels,
            smearing,
            fermi_level: self.fermi_level,
            n_el: self.n_el,
            threshold: self.occupation_threshold,
            policy: self.band_policy,
            seed: self.seed,
        })
    }
}

pub fn write_json<V: Serialize, W: Write>(mut out: W, value: &V) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<V: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<V> {
    Ok(serde_json::from_reader(input)?)
}

pub fn save_groundstate(gs: &GroundState<f64>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_json(&mut buf, &GroundStateFile::from_groundstate(gs))?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_groundstate(path: &Path) -> Result<GroundState<f64>> {
    let f: GroundStateFile = read_json(fs::File::open(path)?)?;
    f.to_groundstate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityData {
    pub max_mode: i64,
    pub cell_length: f64,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl DensityData {
    pub fn from_density(d: &Density<f64>) -> Self {
        Self {
            max_mode: d.max_mode(),
            cell_length: d.cell_length(),
            re: d.coefficients().iter().map(|z| z.re).collect(),
            im: d.coefficients().iter().map(|z| z.im).collect(),
        }
    }

    pub fn to_density(&self) -> Result<Density<f64>> {
        if self.re.len() as i64 != 2 * self.max_mode + 1 || self.im.len() != self.re.len() {
            return Err(Error::Format("density array length does not match max_mode".into()));
        }
        Ok(Density::from_coefficients(
            self.max_mode,
            self.cell_length,
            self.re.iter().zip(&self.im).map(|(&r, &i)| Complex::new(r, i)).collect(),
        ))
    }
}

/// Response container; `reports` follows the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFile {
    pub format_version: u32,
    pub seed: u64,
    pub method: Method,
    pub gauge: GaugeKind,
    /// Description of the interaction kernel (`none` for a bare `χ0` application).
    pub kernel: String,
    pub drho: DensityData,
    pub drho_norm: f64,
    pub delta_fermi_level: f64,
    pub total_h_applies: u64,
    pub dyson_history: Vec<f64>,
    pub orthogonal_gauge_fallback: bool,
    pub reports: Vec<SolverReport>,
}

impl ResponseFile {
    pub fn from_response(r: &ResponseResult<f64>, seed: u64, kernel: Option<&HartreeKernel>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            method: r.method,
            gauge: r.gauge,
            kernel: kernel.map_or_else(
                || "none".to_string(),
                |k| format!("hartree 4*pi/|G|^2 scaled by {}", format_float(k.scale)),
            ),
            drho: DensityData::from_density(&r.drho),
            drho_norm: r.drho.norm(),
            delta_fermi_level: r.def,
            total_h_applies: r.total_h_applies,
            dyson_history: r.dyson_history.clone(),
            orthogonal_gauge_fallback: r.channels.iter().any(|c| c.degenerate_fallback),
            reports: r.reports_with_totals(),
        }
    }
}

pub const TRACE_HEADER: [&str; 5] = ["step", "n_ex", "xi", "tol", "h_applies"];

pub fn write_trace<W: Write>(out: W, trace: &[AdaptStep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for s in trace {
        w.write_record([
            s.step.to_string(),
            s.n_ex.to_string(),
            format_float(s.xi),
            format_float(s.tol),
            s.h_applies.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<AdaptStep>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != TRACE_HEADER {
        return Err(Error::Format(format!("unexpected trace header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse { line: i + 2, msg: "bad trace row".into() };
        out.push(AdaptStep {
            step: rec[0].parse().map_err(|_| bad())?,
            n_ex: rec[1].parse().map_err(|_| bad())?,
            xi: rec[2].parse().map_err(|_| bad())?,
            tol: rec[3].parse().map_err(|_| bad())?,
            h_applies: rec[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundstate::prepare_groundstate;
    use proptest::prelude::*;

    #[test]
    fn key_values_with_comments() {
        let e = parse_key_values("# header\n a = 1 # trailing\n\nB=two\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("a", "1", 2));
        assert_eq!(e[1].key, "b");
        assert!(parse_key_values("novalue\n").is_err());
    }

    #[test]
    fn triples_parse_and_print() {
        let t = parse_triples("[(1, 0.25, -0.5), (-1, 0.25, 0.5) ,(0,1e-3,0)]", 1).unwrap();
        assert_eq!(t, vec![(1, 0.25, -0.5), (-1, 0.25, 0.5), (0, 1e-3, 0.0)]);
        assert_eq!(parse_triples(&format_triples(&t), 1).unwrap(), t);
        assert_eq!(parse_triples("[]", 1).unwrap(), vec![]);
        assert!(parse_triples("[(1, 2)]", 1).is_err());
    }

    #[test]
    fn model_text_round_trip() {
        let m = ModelSpec {
            cell_length: 0.1 + 0.2,
            ecut: 7.3,
            potential: vec![(-2, 0.1, -0.7), (2, 0.1, 0.7)],
            weight: 0.5,
            f_max: 1.0,
        };
        assert_eq!(ModelSpec::parse(&m.to_text()).unwrap(), m);
        assert!(ModelSpec::parse("cell_length = 1\necut = 1\ncolor = red\n").is_err());
    }

    #[test]
    fn asymmetric_model_is_rejected_on_build() {
        let m = ModelSpec::parse("cell_length = 6\necut = 3\npotential = [(1, 0.1, 0.0)]\n").unwrap();
        assert!(m.build().is_err());
    }

    #[test]
    fn groundstate_file_round_trip_is_exact() {
        let basis = build_basis(7.0, 6.0).unwrap();
        let ch = HamiltonianChannel::new(basis, LocalPotential::cosine(1, 0.3), 1.0, 2.0).unwrap();
        let gs = prepare_groundstate(vec![ch], SmearingScheme::gaussian(0.02).unwrap(), 3.0, &Default::default()).unwrap();
        let mut a = Vec::new();
        write_json(&mut a, &GroundStateFile::from_groundstate(&gs)).unwrap();
        let back: GroundStateFile = read_json(a.as_slice()).unwrap();
        let gs2 = back.to_groundstate().unwrap();
        let mut b = Vec::new();
        write_json(&mut b, &GroundStateFile::from_groundstate(&gs2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(gs2.channels[0].slice.phi, gs.channels[0].slice.phi);
    }

    proptest! {
        #[test]
        fn trace_round_trip(rows in proptest::collection::vec((0usize..100, 0usize..100, -1e10f64..1e10, 0.0f64..1.0, any::<u64>()), 0..10)) {
            let trace: Vec<AdaptStep> = rows.iter().map(|&(step, n_ex, xi, tol, h)| AdaptStep { step, n_ex, xi, tol, h_applies: h }).collect();
            let mut buf = Vec::new();
            write_trace(&mut buf, &trace).unwrap();
            prop_assert_eq!(read_trace(buf.as_slice()).unwrap(), trace);
        }

        #[test]
        fn decimal_doubles_parse_exactly(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            let text = format!("cell_length = {x:?}\necut = 1\n");
            let e = parse_key_values(&text).unwrap();
            let v: f64 = parse_num(&e[0]).unwrap();
            prop_assert_eq!(v.to_bits(), x.to_bits());
        }
    }
}
