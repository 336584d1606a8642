//! Strict TOML run configuration.
//!
//! Sections `[space]`, `[model]`, `[time]`, `[experiment]`. Unknown keys, wrong
//! types and out-of-range values are all collected, each with its line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use spde_ldp::ldp::ExceedanceEvent;
use spde_ldp::{BuiltinModel, DomainKind};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceSpec {
    pub kind: DomainKind,
    pub num_points: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSpec {
    pub horizon: f64,
    pub steps: usize,
}

/// Initial state: zero or `amplitude · e_mode`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialSpec {
    Zero,
    Mode { mode: usize, amplitude: f64 },
}

/// Constant control `amplitude` on noise mode 1 over `pieces` pieces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSpec {
    pub amplitude: f64,
    pub pieces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    CheckHypotheses { samples: usize, lambda_points: usize },
    SolveSkeleton,
    Simulate { epsilon: f64, stop_threshold: Option<f64> },
    GalerkinConvergence { levels: Vec<usize> },
    Rate { target_mode: usize, target_amplitude: f64, tolerance: f64, pieces: usize, max_rounds: usize },
    McLdp { epsilons: Vec<f64>, delta: f64, samples: usize, event: ExceedanceEvent, budget: f64 },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::CheckHypotheses { .. } => "check-hypotheses",
            Experiment::SolveSkeleton => "solve-skeleton",
            Experiment::Simulate { .. } => "simulate",
            Experiment::GalerkinConvergence { .. } => "galerkin-convergence",
            Experiment::Rate { .. } => "rate",
            Experiment::McLdp { .. } => "mc-ldp",
        }
    }
}

pub const EXPERIMENT_KINDS: [&str; 6] = ["check-hypotheses", "solve-skeleton", "simulate", "galerkin-convergence", "rate", "mc-ldp"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: BuiltinModel,
    pub space: SpaceSpec,
    pub time: TimeSpec,
    pub initial: InitialSpec,
    pub control: ControlSpec,
    pub experiment: Experiment,
    pub seed: u64,
    /// Not echoed: the output location does not affect results.
    #[serde(skip)]
    pub output: Option<PathBuf>,
    /// Not echoed: results are independent of the worker count.
    #[serde(skip)]
    pub workers: usize,
}

/// Line of each `[section]` header and `key =` assignment.
#[derive(Default)]
struct LineMap {
    sections: BTreeMap<String, usize>,
    keys: BTreeMap<(String, String), usize>,
}

fn offset_line(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Structural pre-scan: headers, duplicates and key positions.
fn scan(text: &str, errors: &mut Vec<ConfigError>) -> LineMap {
    let mut map = LineMap::default();
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.starts_with('[') {
            let name = l.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if let Some(first) = map.sections.get(&name) {
                errors.push(ConfigError { line: Some(line), message: format!("duplicate section [{name}] (first at line {first})") });
            } else {
                map.sections.insert(name.clone(), line);
            }
            current = name;
        } else if let Some((k, _)) = l.split_once('=') {
            if !l.starts_with('#') {
                let key = k.trim().trim_matches('"').to_string();
                map.keys.entry((current.clone(), key)).or_insert(line);
            }
        }
    }
    map
}

struct Reader<'a> {
    lines: &'a LineMap,
    errors: Vec<ConfigError>,
}

impl<'a> Reader<'a> {
    fn line(&self, sec: &str, key: &str) -> Option<usize> {
        self.lines.keys.get(&(sec.to_string(), key.to_string())).copied().or_else(|| self.lines.sections.get(sec).copied())
    }

    fn err(&mut self, sec: &str, key: &str, message: String) {
        let line = self.line(sec, key);
        self.errors.push(ConfigError { line, message });
    }

    fn check_keys(&mut self, sec: &str, t: &Table, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                let msg = format!("unknown key `{k}` in [{sec}] (allowed: {})", allowed.join(", "));
                self.err(sec, k, msg);
            }
        }
    }

    fn num(&mut self, sec: &str, t: &Table, key: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.err(sec, key, format!("{sec}.{key} must be a number"));
                None
            }
        }
    }

    fn int(&mut self, sec: &str, t: &Table, key: &str) -> Option<i64> {
        match t.get(key)? {
            Value::Integer(i) => Some(*i),
            _ => {
                self.err(sec, key, format!("{sec}.{key} must be an integer"));
                None
            }
        }
    }

    fn count(&mut self, sec: &str, t: &Table, key: &str, min: usize, max: usize) -> Option<usize> {
        let v = self.int(sec, t, key)?;
        if v < min as i64 || v > max as i64 {
            self.err(sec, key, format!("{sec}.{key} = {v} outside [{min}, {max}]"));
            return None;
        }
        Some(v as usize)
    }

    fn string(&mut self, sec: &str, t: &Table, key: &str) -> Option<String> {
        match t.get(key)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.err(sec, key, format!("{sec}.{key} must be a string"));
                None
            }
        }
    }

    fn positive(&mut self, sec: &str, t: &Table, key: &str) -> Option<f64> {
        let v = self.num(sec, t, key)?;
        if !(v > 0.0) || !v.is_finite() {
            self.err(sec, key, format!("{sec}.{key} = {v} must be positive and finite"));
            return None;
        }
        Some(v)
    }

    fn finite(&mut self, sec: &str, t: &Table, key: &str) -> Option<f64> {
        let v = self.num(sec, t, key)?;
        if !v.is_finite() {
            self.err(sec, key, format!("{sec}.{key} must be finite"));
            return None;
        }
        Some(v)
    }

    fn list<T>(&mut self, sec: &str, t: &Table, key: &str, item: impl Fn(&Value) -> Option<T>) -> Option<Vec<T>> {
        let Value::Array(arr) = t.get(key)? else {
            self.err(sec, key, format!("{sec}.{key} must be an array"));
            return None;
        };
        let out: Option<Vec<T>> = arr.iter().map(item).collect();
        if out.is_none() {
            self.err(sec, key, format!("{sec}.{key} has an entry of the wrong type or range"));
        }
        out
    }

    fn required<T>(&mut self, sec: &str, key: &str, v: Option<T>, t: &Table) -> Option<T> {
        if v.is_none() && !t.contains_key(key) {
            self.err(sec, key, format!("missing required key {sec}.{key}"));
        }
        v
    }
}

const SECTIONS: [&str; 4] = ["space", "model", "time", "experiment"];
const COMMON_EXPERIMENT_KEYS: [&str; 9] =
    ["kind", "seed", "output", "workers", "initial", "initial_mode", "initial_amplitude", "control_amplitude", "control_pieces"];

fn kind_keys(kind: &str) -> &'static [&'static str] {
    match kind {
        "check-hypotheses" => &["samples", "lambda_points"],
        "simulate" => &["epsilon", "stop_threshold"],
        "galerkin-convergence" => &["levels"],
        "rate" => &["target_mode", "target_amplitude", "tolerance", "pieces", "max_rounds"],
        "mc-ldp" => &["epsilons", "delta", "samples", "event", "budget"],
        _ => &[],
    }
}

const MAX_POINTS: usize = 4096;
const MAX_STEPS: usize = 10_000_000;
const MAX_SAMPLES: usize = 100_000_000;

/// Parse and fully validate a configuration, reporting every error found.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let lines = scan(text, &mut errors);
    let root: Table = match toml::from_str(text) {
        Ok(t) => t,
        Err(e) => {
            if errors.is_empty() {
                let line = e.span().map(|s| offset_line(text, s.start));
                errors.push(ConfigError { line, message: format!("syntax error: {}", e.message().trim()) });
            }
            return Err(ConfigErrors(errors));
        }
    };
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let mut r = Reader { lines: &lines, errors };
    let empty = Table::new();
    let mut sections: BTreeMap<&str, &Table> = BTreeMap::new();
    for (k, v) in &root {
        match (SECTIONS.contains(&k.as_str()), v) {
            (true, Value::Table(t)) => {
                sections.insert(SECTIONS.iter().find(|s| **s == k).copied().unwrap(), t);
            }
            (true, _) => r.err("", k, format!("`{k}` must be a section")),
            (false, _) => {
                let line = lines.sections.get(k.as_str()).copied().or_else(|| lines.keys.get(&(String::new(), k.clone())).copied());
                r.errors.push(ConfigError { line, message: format!("unknown section or key `{k}` (sections: {})", SECTIONS.join(", ")) });
            }
        }
    }
    for s in SECTIONS {
        if !sections.contains_key(s) && s != "space" {
            r.errors.push(ConfigError { line: None, message: format!("missing required section [{s}]") });
        }
    }

    // [model]
    let mt = sections.get("model").copied().unwrap_or(&empty);
    r.check_keys("model", mt, &["name", "p", "noise_modes"]);
    let name = r.string("model", mt, "name");
    let name = r.required("model", "name", name, mt);
    let p = r.num("model", mt, "p");
    let noise_modes = r.count("model", mt, "noise_modes", 1, 64);
    let model = name.and_then(|n| match BuiltinModel::from_name(&n, p, noise_modes) {
        Ok(m) => Some(m),
        Err(e) => {
            r.err("model", "name", e.to_string());
            None
        }
    });
    if let (Some(m), Some(p)) = (&model, p) {
        let uses_p = matches!(m, BuiltinModel::PLaplace { .. } | BuiltinModel::PLaplaceGradientNoise { .. });
        if !uses_p {
            r.err("model", "p", format!("model `{}` takes no parameter p", m.label()));
        } else if !(p >= 2.0) || !p.is_finite() {
            r.err("model", "p", format!("model.p = {p} must be at least 2"));
        }
    }
    if let (Some(m), Some(_)) = (&model, noise_modes) {
        if !matches!(m, BuiltinModel::Heat { .. }) {
            r.err("model", "noise_modes", format!("model `{}` takes no noise_modes", m.label()));
        }
    }

    // [space]
    let st = sections.get("space").copied().unwrap_or(&empty);
    r.check_keys("space", st, &["kind", "num_points", "alpha"]);
    let kind = r.string("space", st, "kind").and_then(|k| match k.parse::<DomainKind>() {
        Ok(d) => Some(d),
        Err(e) => {
            r.err("space", "kind", e.to_string());
            None
        }
    });
    let num_points = if st.contains_key("num_points") { r.count("space", st, "num_points", 4, MAX_POINTS) } else { Some(64) };
    let alpha = r.num("space", st, "alpha");
    if let Some(a) = alpha {
        if !(a > 1.0) || !a.is_finite() {
            r.err("space", "alpha", format!("alpha_exponent must exceed 1 (got {a})"));
        }
    }
    let model_alpha = model.as_ref().and_then(|m| m.build(8).ok()).map(|m| m.profile().alpha);
    if let (Some(a), Some(ma)) = (alpha, model_alpha) {
        if a > 1.0 && a != ma {
            r.err("space", "alpha", format!("alpha = {a} does not match the model exponent {ma}"));
        }
    }
    if let (Some(k), Some(m)) = (kind, &model) {
        if k != m.domain() {
            r.err("space", "kind", format!("model `{}` lives on the {} domain", m.label(), m.domain().as_str()));
        }
    }

    // [time]
    let tt = sections.get("time").copied().unwrap_or(&empty);
    r.check_keys("time", tt, &["horizon", "steps"]);
    let horizon = if tt.contains_key("horizon") { r.positive("time", tt, "horizon") } else { Some(1.0) };
    let steps = r.count("time", tt, "steps", 1, MAX_STEPS);
    let steps = r.required("time", "steps", steps, tt);

    // [experiment]
    let et = sections.get("experiment").copied().unwrap_or(&empty);
    let kind_name = r.string("experiment", et, "kind");
    let kind_name = r.required("experiment", "kind", kind_name, et);
    if let Some(k) = &kind_name {
        if !EXPERIMENT_KINDS.contains(&k.as_str()) {
            r.err("experiment", "kind", format!("unknown experiment kind `{k}` (expected one of {})", EXPERIMENT_KINDS.join(", ")));
        }
        let mut allowed: Vec<&str> = COMMON_EXPERIMENT_KEYS.to_vec();
        allowed.extend_from_slice(kind_keys(k));
        r.check_keys("experiment", et, &allowed);
    }
    let seed = match r.int("experiment", et, "seed") {
        Some(s) if s < 0 => {
            r.err("experiment", "seed", "experiment.seed must be nonnegative".into());
            None
        }
        Some(s) => Some(s as u64),
        None => Some(0),
    };
    let output = r.string("experiment", et, "output").map(PathBuf::from);
    let workers = if et.contains_key("workers") { r.count("experiment", et, "workers", 1, 1024) } else { Some(1) };
    let initial = match r.string("experiment", et, "initial").as_deref() {
        None | Some("zero") => {
            for k in ["initial_mode", "initial_amplitude"] {
                if et.contains_key(k) {
                    r.err("experiment", k, format!("experiment.{k} requires initial = \"mode\""));
                }
            }
            Some(InitialSpec::Zero)
        }
        Some("mode") => {
            let mode = if et.contains_key("initial_mode") { r.count("experiment", et, "initial_mode", 1, MAX_POINTS) } else { Some(1) };
            let amplitude = if et.contains_key("initial_amplitude") { r.finite("experiment", et, "initial_amplitude") } else { Some(1.0) };
            if let (Some(md), Some(n)) = (mode, num_points) {
                if md > n {
                    r.err("experiment", "initial_mode", format!("initial_mode {md} exceeds num_points {n}"));
                }
            }
            mode.zip(amplitude).map(|(mode, amplitude)| InitialSpec::Mode { mode, amplitude })
        }
        Some(other) => {
            r.err("experiment", "initial", format!("unknown initial state `{other}` (expected zero or mode)"));
            None
        }
    };
    let amplitude = if et.contains_key("control_amplitude") { r.finite("experiment", et, "control_amplitude") } else { Some(0.0) };
    let pieces = if et.contains_key("control_pieces") { r.count("experiment", et, "control_pieces", 1, MAX_STEPS) } else { steps };
    if let (Some(p), Some(s)) = (pieces, steps) {
        if s % p != 0 {
            r.err("experiment", "control_pieces", format!("control_pieces = {p} must divide time.steps = {s}"));
        }
    }

    let experiment = match kind_name.as_deref() {
        Some("check-hypotheses") => {
            let samples = if et.contains_key("samples") { r.count("experiment", et, "samples", 1, MAX_SAMPLES) } else { Some(10_000) };
            let lambda_points =
                if et.contains_key("lambda_points") { r.count("experiment", et, "lambda_points", 64, 1 << 16) } else { Some(64) };
            samples.zip(lambda_points).map(|(samples, lambda_points)| Experiment::CheckHypotheses { samples, lambda_points })
        }
        Some("solve-skeleton") => Some(Experiment::SolveSkeleton),
        Some("simulate") => {
            let eps = match r.num("experiment", et, "epsilon") {
                Some(e) if !(e >= 0.0) || !e.is_finite() => {
                    r.err("experiment", "epsilon", format!("experiment.epsilon = {e} must be nonnegative"));
                    None
                }
                e => r.required("experiment", "epsilon", e, et),
            };
            let stop = r.positive("experiment", et, "stop_threshold");
            let stop_ok = !et.contains_key("stop_threshold") || stop.is_some();
            eps.filter(|_| stop_ok).map(|epsilon| Experiment::Simulate { epsilon, stop_threshold: stop })
        }
        Some("galerkin-convergence") => {
            let levels = r.list("experiment", et, "levels", |v| v.as_integer().filter(|&x| x >= 1).map(|x| x as usize));
            let levels = r.required("experiment", "levels", levels, et);
            if let Some(l) = &levels {
                if l.len() < 2 || l.windows(2).any(|w| w[1] <= w[0]) {
                    r.err("experiment", "levels", "experiment.levels must be increasing with at least two entries".into());
                } else if let Some(n) = num_points {
                    if *l.last().unwrap() > n {
                        r.err("experiment", "levels", format!("largest level exceeds num_points {n}"));
                    }
                }
            }
            levels.map(|levels| Experiment::GalerkinConvergence { levels })
        }
        Some("rate") => {
            let target_mode = if et.contains_key("target_mode") { r.count("experiment", et, "target_mode", 1, MAX_POINTS) } else { Some(1) };
            let target_amplitude = r.finite("experiment", et, "target_amplitude");
            let target_amplitude = r.required("experiment", "target_amplitude", target_amplitude, et);
            let tolerance = if et.contains_key("tolerance") { r.positive("experiment", et, "tolerance") } else { Some(1e-3) };
            let k = if et.contains_key("pieces") { r.count("experiment", et, "pieces", 1, MAX_STEPS) } else { Some(10) };
            let max_rounds = if et.contains_key("max_rounds") { r.count("experiment", et, "max_rounds", 1, 200) } else { Some(40) };
            if let (Some(k), Some(s)) = (k, steps) {
                if s % k != 0 {
                    r.err("experiment", "pieces", format!("pieces = {k} must divide time.steps = {s}"));
                }
            }
            if let (Some(md), Some(n)) = (target_mode, num_points) {
                if md > n {
                    r.err("experiment", "target_mode", format!("target_mode {md} exceeds num_points {n}"));
                }
            }
            match (target_mode, target_amplitude, tolerance, k, max_rounds) {
                (Some(target_mode), Some(target_amplitude), Some(tolerance), Some(pieces), Some(max_rounds)) => {
                    Some(Experiment::Rate { target_mode, target_amplitude, tolerance, pieces, max_rounds })
                }
                _ => None,
            }
        }
        Some("mc-ldp") => {
            let eps = r.list("experiment", et, "epsilons", |v| {
                let x = v.as_float().or_else(|| v.as_integer().map(|i| i as f64))?;
                (x >= 0.0 && x.is_finite()).then_some(x)
            });
            let eps = r.required("experiment", "epsilons", eps, et);
            if let Some(e) = &eps {
                if e.is_empty() || e.windows(2).any(|w| w[1] >= w[0]) {
                    r.err("experiment", "epsilons", "experiment.epsilons must be nonempty and strictly decreasing".into());
                }
            }
            let delta = match r.num("experiment", et, "delta") {
                Some(d) if !(d >= 0.0) || !d.is_finite() => {
                    r.err("experiment", "delta", format!("experiment.delta = {d} must be nonnegative"));
                    None
                }
                d => r.required("experiment", "delta", d, et),
            };
            let samples = if et.contains_key("samples") { r.count("experiment", et, "samples", 1, MAX_SAMPLES) } else { Some(2000) };
            let event = match r.string("experiment", et, "event").as_deref() {
                None | Some("sup-path") => Some(ExceedanceEvent::SupPath),
                Some("endpoint") => Some(ExceedanceEvent::Endpoint),
                Some(other) => {
                    r.err("experiment", "event", format!("unknown event `{other}` (expected sup-path or endpoint)"));
                    None
                }
            };
            let budget = if et.contains_key("budget") { r.positive("experiment", et, "budget") } else { Some(1.0) };
            match (eps, delta, samples, event, budget) {
                (Some(epsilons), Some(delta), Some(samples), Some(event), Some(budget)) => {
                    Some(Experiment::McLdp { epsilons, delta, samples, event, budget })
                }
                _ => None,
            }
        }
        _ => None,
    };

    let errors = r.errors;
    if !errors.is_empty() {
        let mut seen = BTreeSet::new();
        let errors = errors.into_iter().filter(|e| seen.insert((e.line, e.message.clone()))).collect();
        return Err(ConfigErrors(errors));
    }
    let model = model.expect("validated");
    let space = SpaceSpec { kind: model.domain(), num_points: num_points.unwrap(), alpha: model_alpha.unwrap() };
    Ok(RunConfig {
        model,
        space,
        time: TimeSpec { horizon: horizon.unwrap(), steps: steps.unwrap() },
        initial: initial.unwrap(),
        control: ControlSpec { amplitude: amplitude.unwrap(), pieces: pieces.unwrap() },
        experiment: experiment.unwrap(),
        seed: seed.unwrap(),
        output,
        workers: workers.unwrap(),
    })
}

/// TOML text for `(section, key, value)` entries, as produced by command-line flags.
pub fn render_config(entries: &[(&str, &str, Value)]) -> String {
    let mut root = Table::new();
    for (sec, key, v) in entries {
        let t = root.entry(sec.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(t) = t {
            t.insert(key.to_string(), v.clone());
        }
    }
    toml::to_string(&root).expect("flag values serialise")
}
