//! Scenario files: flat INI-style sections of `key = value` lines.
//!
//! ```text
//! [scenario]
//! name = example
//! n = 2
//! horizon = 2.5
//! mode = output              # state | output
//! beta = 100                 # omit for the formula gain
//! allow_below_formula = true
//! uncertainty = bilinear_example:0.1   # zero | linear:<rows> | bilinear_example:<eps>
//! init = 0, -1, 1            # x0 followed by the n chain states
//! xi_init = 0, 0
//!
//! [integrator]
//! method = rk45
//! resample_dt = 0.001        # or none
//!
//! [output]
//! dir = out
//!
//! [sweep]
//! initials = 10
//! betas = formula, 2x, 100
//! ```
//!
//! Lines starting with `#` or `;` are comments; a `#` after a value starts a
//! trailing comment. Unknown sections and keys are errors. Linear tables list
//! lower-triangular rows separated by `;`, e.g. `linear:0.5; 0.1, -0.2`.
//! For `bilinear_example`, `init` is given in the model's own coordinates
//! `[x0, z1, z2]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ptchain_core::ple::{MAX_CHAIN, MIN_CHAIN};
use ptchain_core::sim::{IntegratorConfig, Method};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    State,
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyChoice {
    Zero,
    /// Lower-triangular rows of `a` in `φ = a x`.
    Linear(Vec<Vec<f64>>),
    BilinearExample(f64),
}

/// One gain in a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaChoice {
    Formula,
    Multiple(f64),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Also write the solver-native points.
    pub native: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub initials: usize,
    pub init_scale: f64,
    pub betas: Vec<BetaChoice>,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub horizon: f64,
    pub c0: f64,
    pub mode: Mode,
    pub beta: Option<f64>,
    pub allow_below_formula: bool,
    pub uncertainty: UncertaintyChoice,
    pub init: Vec<f64>,
    pub xi_init: Option<Vec<f64>>,
    pub seed: u64,
    pub integrator: IntegratorConfig,
    pub output: OutputSettings,
    pub sweep: SweepSettings,
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

const KEYS: &[(&str, &[&str])] = &[
    (
        "scenario",
        &[
            "name",
            "n",
            "horizon",
            "c0",
            "mode",
            "beta",
            "allow_below_formula",
            "uncertainty",
            "init",
            "xi_init",
            "seed",
        ],
    ),
    (
        "integrator",
        &[
            "method",
            "h0",
            "rel_tol",
            "abs_tol",
            "terminal_guard",
            "step_cap_ratio",
            "max_steps",
            "checkpoints",
            "resample_dt",
            "assert_assumption",
        ],
    ),
    ("output", &["dir", "native"]),
    ("sweep", &["initials", "init_scale", "betas", "threads"]),
];

fn err(line: usize, msg: impl std::fmt::Display) -> CliError {
    if line == 0 {
        CliError::Config(msg.to_string())
    } else {
        CliError::Config(format!("line {line}: {msg}"))
    }
}

fn split_sections(text: &str) -> Result<Sections, CliError> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name =
                rest.strip_suffix(']').ok_or_else(|| err(line_no, "unterminated section header"))?.trim().to_string();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(err(line_no, format!("unknown section [{name}]")));
            }
            if out.contains_key(&name) {
                return Err(err(line_no, format!("section [{name}] repeated")));
            }
            out.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let section = current.as_ref().ok_or_else(|| err(line_no, "key outside of a section"))?;
        let (key, value) =
            line.split_once('=').ok_or_else(|| err(line_no, format!("expected key = value, got '{line}'")))?;
        let key = key.trim().to_string();
        let allowed = KEYS.iter().find(|(s, _)| s == section).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key.as_str()) {
            return Err(err(line_no, format!("unknown key '{key}' in [{section}]")));
        }
        let entries = out.get_mut(section).expect("section inserted");
        if entries.contains_key(&key) {
            return Err(err(line_no, format!("key '{key}' repeated")));
        }
        entries.insert(key, (line_no, value.trim().to_string()));
    }
    Ok(out)
}

struct Reader<'a> {
    sections: &'a Sections,
}

impl Reader<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&(usize, String)> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    fn get<T>(
        &self,
        section: &str,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, CliError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => parse(v).map(Some).map_err(|m| err(*line, format!("{key}: {m}"))),
        }
    }

    fn require<T>(&self, section: &str, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, CliError> {
        self.get(section, key, parse)?.ok_or_else(|| err(0, format!("missing required key '{key}' in [{section}]")))
    }
}

fn float(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

fn integer(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("'{s}' is not a nonnegative integer"))
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("'{s}' is not true or false")),
    }
}

fn float_list(s: &str) -> Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| float(p.trim())).collect()
}

fn mode(s: &str) -> Result<Mode, String> {
    match s {
        "state" => Ok(Mode::State),
        "output" => Ok(Mode::Output),
        _ => Err(format!("'{s}' is not state or output")),
    }
}

fn method(s: &str) -> Result<Method, String> {
    match s {
        "rk4" => Ok(Method::Rk4),
        "rk45" => Ok(Method::Rk45),
        _ => Err(format!("'{s}' is not rk4 or rk45")),
    }
}

pub fn parse_uncertainty(s: &str) -> Result<UncertaintyChoice, String> {
    if s == "zero" {
        return Ok(UncertaintyChoice::Zero);
    }
    if let Some(eps) = s.strip_prefix("bilinear_example:") {
        return Ok(UncertaintyChoice::BilinearExample(float(eps.trim())?));
    }
    if let Some(rows) = s.strip_prefix("linear:") {
        let rows: Vec<Vec<f64>> = rows.split(';').map(|r| float_list(r.trim())).collect::<Result<_, _>>()?;
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(format!("row {} of the linear table needs {} entries, got {}", i + 1, i + 1, r.len()));
            }
        }
        return Ok(UncertaintyChoice::Linear(rows));
    }
    Err(format!("'{s}' is not zero, linear:<rows> or bilinear_example:<eps>"))
}

fn beta_choice(s: &str) -> Result<BetaChoice, String> {
    let s = s.trim();
    if s == "formula" {
        Ok(BetaChoice::Formula)
    } else if let Some(k) = s.strip_suffix('x') {
        Ok(BetaChoice::Multiple(float(k)?))
    } else {
        Ok(BetaChoice::Value(float(s)?))
    }
}

fn beta_list(s: &str) -> Result<Vec<BetaChoice>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(beta_choice).collect()
}

fn resample(s: &str) -> Result<Option<f64>, String> {
    if s == "none" {
        Ok(None)
    } else {
        float(s).map(Some)
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let sections = split_sections(text)?;
        let r = Reader { sections: &sections };
        let n = r.require("scenario", "n", integer)?;
        let defaults = IntegratorConfig::default();
        let integrator = IntegratorConfig {
            method: r.get("integrator", "method", method)?.unwrap_or(defaults.method),
            h0: r.get("integrator", "h0", float)?.unwrap_or(defaults.h0),
            rel_tol: r.get("integrator", "rel_tol", float)?.unwrap_or(defaults.rel_tol),
            abs_tol: r.get("integrator", "abs_tol", float)?.unwrap_or(defaults.abs_tol),
            terminal_guard: r.get("integrator", "terminal_guard", float)?.unwrap_or(defaults.terminal_guard),
            step_cap_ratio: r.get("integrator", "step_cap_ratio", float)?.unwrap_or(defaults.step_cap_ratio),
            max_steps: r.get("integrator", "max_steps", integer)?.unwrap_or(defaults.max_steps),
            checkpoint_fractions: r.get("integrator", "checkpoints", float_list)?.unwrap_or_default(),
            resample_dt: r.get("integrator", "resample_dt", resample)?.unwrap_or(defaults.resample_dt),
            assert_assumption: r.get("integrator", "assert_assumption", boolean)?.unwrap_or(defaults.assert_assumption),
        };
        let cfg = Self {
            name: r.get("scenario", "name", |s| Ok(s.to_string()))?.unwrap_or_else(|| "scenario".into()),
            n,
            horizon: r.require("scenario", "horizon", float)?,
            c0: r.get("scenario", "c0", float)?.unwrap_or(0.0),
            mode: r.get("scenario", "mode", mode)?.unwrap_or(Mode::State),
            beta: r.get("scenario", "beta", float)?,
            allow_below_formula: r.get("scenario", "allow_below_formula", boolean)?.unwrap_or(false),
            uncertainty: r.get("scenario", "uncertainty", parse_uncertainty)?.unwrap_or(UncertaintyChoice::Zero),
            init: r.require("scenario", "init", float_list)?,
            xi_init: r.get("scenario", "xi_init", float_list)?,
            seed: r
                .get("scenario", "seed", |s| s.parse::<u64>().map_err(|_| format!("'{s}' is not a u64")))?
                .unwrap_or(0),
            integrator,
            output: OutputSettings {
                dir: r.get("output", "dir", |s| Ok(PathBuf::from(s)))?.unwrap_or_else(|| PathBuf::from("out")),
                native: r.get("output", "native", boolean)?.unwrap_or(true),
            },
            sweep: SweepSettings {
                initials: r.get("sweep", "initials", integer)?.unwrap_or(0),
                init_scale: r.get("sweep", "init_scale", float)?.unwrap_or(1.0),
                betas: r.get("sweep", "betas", beta_list)?.unwrap_or_default(),
                threads: r.get("sweep", "threads", integer)?.unwrap_or(4),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that need no linear algebra; gain checks happen when
    /// the law is built.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(MIN_CHAIN..=MAX_CHAIN).contains(&self.n) {
            return bad(format!("n = {} outside supported range [{MIN_CHAIN}, {MAX_CHAIN}]", self.n));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name '{}' must be a plain file stem", self.name));
        }
        if !(self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.init.len() != self.n + 1 {
            return bad(format!("init needs x0 and {} chain states, got {} values", self.n, self.init.len()));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return bad(format!("beta must be positive, got {b}"));
            }
        }
        match &self.uncertainty {
            UncertaintyChoice::Zero => {}
            UncertaintyChoice::Linear(rows) => {
                if rows.len() != self.n {
                    return bad(format!("linear table has {} rows, expected {}", rows.len(), self.n));
                }
            }
            UncertaintyChoice::BilinearExample(eps) => {
                if self.n != 2 || self.c0 != 0.0 {
                    return bad("bilinear_example requires n = 2 and c0 = 0".into());
                }
                if !(eps.abs() < 2f64.sqrt()) {
                    return bad(format!("bilinear_example needs |eps| < sqrt(2), got {eps}"));
                }
            }
        }
        match self.mode {
            Mode::Output => {
                if self.c0 != 0.0 {
                    return bad("output feedback requires c0 = 0".into());
                }
                if let Some(xi) = &self.xi_init {
                    if xi.len() != self.n {
                        return bad(format!("xi_init needs {} values, got {}", self.n, xi.len()));
                    }
                }
            }
            Mode::State => {
                if self.xi_init.is_some() {
                    return bad("xi_init is only meaningful in output mode".into());
                }
            }
        }
        if !(self.sweep.init_scale > 0.0) {
            return bad("sweep init_scale must be positive".into());
        }
        if self.sweep.threads == 0 {
            return bad("sweep threads must be positive".into());
        }
        for b in &self.sweep.betas {
            if let BetaChoice::Multiple(v) | BetaChoice::Value(v) = b {
                if !(*v > 0.0) {
                    return bad(format!("sweep gains must be positive, got {v}"));
                }
            }
        }
        self.integrator.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Inverse of [`ScenarioConfig::parse`]; every key is written.
    pub fn serialize(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "[scenario]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "c0 = {}", self.c0);
        let _ = writeln!(s, "mode = {}", if self.mode == Mode::State { "state" } else { "output" });
        if let Some(b) = self.beta {
            let _ = writeln!(s, "beta = {b}");
        }
        let _ = writeln!(s, "allow_below_formula = {}", self.allow_below_formula);
        let unc = match &self.uncertainty {
            UncertaintyChoice::Zero => "zero".to_string(),
            UncertaintyChoice::Linear(rows) => {
                format!("linear:{}", rows.iter().map(|r| list(r)).collect::<Vec<_>>().join("; "))
            }
            UncertaintyChoice::BilinearExample(eps) => format!("bilinear_example:{eps}"),
        };
        let _ = writeln!(s, "uncertainty = {unc}");
        let _ = writeln!(s, "init = {}", list(&self.init));
        if let Some(xi) = &self.xi_init {
            let _ = writeln!(s, "xi_init = {}", list(xi));
        }
        let _ = writeln!(s, "seed = {}", self.seed);

        let ic = &self.integrator;
        let _ = writeln!(s, "\n[integrator]");
        let _ = writeln!(s, "method = {}", ic.method.name());
        let _ = writeln!(s, "h0 = {}", ic.h0);
        let _ = writeln!(s, "rel_tol = {}", ic.rel_tol);
        let _ = writeln!(s, "abs_tol = {}", ic.abs_tol);
        let _ = writeln!(s, "terminal_guard = {}", ic.terminal_guard);
        let _ = writeln!(s, "step_cap_ratio = {}", ic.step_cap_ratio);
        let _ = writeln!(s, "max_steps = {}", ic.max_steps);
        let _ = writeln!(s, "checkpoints = {}", list(&ic.checkpoint_fractions));
        let _ = writeln!(s, "resample_dt = {}", ic.resample_dt.map_or("none".to_string(), |d| d.to_string()));
        let _ = writeln!(s, "assert_assumption = {}", ic.assert_assumption);

        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output.dir.display());
        let _ = writeln!(s, "native = {}", self.output.native);

        let sw = &self.sweep;
        let betas: Vec<String> = sw
            .betas
            .iter()
            .map(|b| match b {
                BetaChoice::Formula => "formula".to_string(),
                BetaChoice::Multiple(k) => format!("{k}x"),
                BetaChoice::Value(v) => v.to_string(),
            })
            .collect();
        let _ = writeln!(s, "\n[sweep]");
        let _ = writeln!(s, "initials = {}", sw.initials);
        let _ = writeln!(s, "init_scale = {}", sw.init_scale);
        let _ = writeln!(s, "betas = {}", betas.join(", "));
        let _ = writeln!(s, "threads = {}", sw.threads);
        s
    }
}

/// The bilinear unicycle example: `ε = 0.1`, `T = 2.5`, `β = 100`, output feedback.
pub const EXAMPLE_CONFIG: &str = include_str!("../configs/unicycle.ini");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_example_parses() {
        let c = ScenarioConfig::parse(EXAMPLE_CONFIG).unwrap();
        assert_eq!(c.n, 2);
        assert_eq!(c.horizon, 2.5);
        assert_eq!(c.beta, Some(100.0));
        assert_eq!(c.mode, Mode::Output);
        assert_eq!(c.uncertainty, UncertaintyChoice::BilinearExample(0.1));
        assert_eq!(c.init, vec![0.0, -1.0, 1.0]);
        assert_eq!(c.xi_init, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let base = "[scenario]\nn = 2\nhorizon = 1\ninit = 0, 0, 0\n";
        assert!(ScenarioConfig::parse(base).is_ok());
        for bad in ["[scenario]\nn = 2\nhorizn = 1\n", "[extra]\n", "n = 2\n", "[scenario]\nn 2\n"] {
            assert!(matches!(ScenarioConfig::parse(bad), Err(CliError::Config(_))), "{bad}");
        }
        assert!(ScenarioConfig::parse(&format!("{base}n = 3\n")).is_err());
        assert!(ScenarioConfig::parse("[scenario]\nn = 13\nhorizon = 1\ninit = 0\n").is_err());
    }

    #[test]
    fn linear_rows_must_be_triangular() {
        assert!(parse_uncertainty("linear:0.5; 0.1, -0.2").is_ok());
        assert!(parse_uncertainty("linear:0.5, 1; 0.1, -0.2").is_err());
    }

    #[test]
    fn trailing_comments_are_ignored() {
        let c = ScenarioConfig::parse("[scenario]  # main\nn = 2  # length\nhorizon = 1\ninit = 0, 1, 0\n").unwrap();
        assert_eq!(c.n, 2);
    }
}
