//! TOML experiment configuration.
//!
//! Every section is optional. Unknown keys are errors, and every error is
//! reported with the line it refers to.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use orso::generation::{FaultInjection, Weights};
use orso::orchestrator::{Method, ResampleConfig, SelectorParams};
use orso::sandbox::Grid;
use orso::synthetic::CurveSpec;
use orso::{GeneratorSpec, GridSpec, RunConfig};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.source, line, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: Option<PathBuf>,
    pub grid: GridSection,
    pub generator: GeneratorSection,
    pub run: RunSection,
    pub sweep: SweepSection,
    pub theory: TheorySection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Inline map: `.` free, `#` wall, `S` start, `E` exit.
    pub map: Option<String>,
    pub map_file: Option<PathBuf>,
    pub slip: Option<f64>,
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub means: Option<Weights>,
    pub stds: Option<Weights>,
    pub evolve_sigma: Option<f64>,
    pub f_max: Option<f64>,
    pub probe_steps: Option<usize>,
    pub attempts_per_spec: Option<usize>,
    pub fault: Option<FaultInjection>,
    /// Shell command of an external proposer.
    pub external: Option<String>,
    pub timeout_ms: Option<u64>,
    /// Fixed first candidate set; its length must equal k.
    pub fixture: Option<Vec<Weights>>,
    pub shuffle: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub algo: Option<Method>,
    pub budget: Option<u64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub n_iters: Option<u64>,
    pub slice_n: Option<u64>,
    pub n_eval: Option<u64>,
    pub j_ref: Option<f64>,
    pub reward_range: Option<(f64, f64)>,
    pub thresholds: Option<Vec<f64>>,
    pub record_wall_time: Option<bool>,
    pub resample: Option<ResampleConfig>,
    pub selector: Option<SelectorParams>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub budgets: Vec<u64>,
    pub k: Vec<usize>,
    pub algos: Vec<Method>,
    pub seeds: Vec<u64>,
    pub workers: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            budgets: vec![5, 10, 15],
            k: vec![4, 8, 16],
            algos: Method::all(),
            seeds: (0..5).collect(),
            workers: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub k: Vec<usize>,
    pub horizon: u64,
    pub seeds: u64,
    /// Uniform observation noise added to every curve.
    pub noise: f64,
    pub selector: Option<SelectorParams>,
    /// Explicit curve set; replaces the generated suite.
    pub curves: Option<Vec<CurveSpec>>,
    pub star: Option<usize>,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            k: vec![2, 4, 8, 16],
            horizon: 2000,
            seeds: 20,
            noise: 0.0,
            selector: None,
            curves: None,
            star: None,
        }
    }
}

/// A parsed config together with its text, for line lookups.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: String,
    text: String,
    base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn empty() -> Self {
        Self {
            config: ExperimentConfig::default(),
            source: "<defaults>".into(),
            text: String::new(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: source.clone(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &source, base_dir)
    }

    pub fn parse(text: &str, source: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let config = toml::from_str(text).map_err(|e: toml::de::Error| ConfigError {
            source: source.into(),
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        Ok(Self {
            config,
            source: source.into(),
            text: text.into(),
            base_dir,
        })
    }

    /// An error pointed at the first line assigning `key` inside `section`.
    pub fn error(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            source: self.source.clone(),
            line: find_key(&self.text, section, key),
            message: message.into(),
        }
    }

    pub fn grid(&self, map_file: Option<&Path>) -> Result<Grid, ConfigError> {
        let g = &self.config.grid;
        let desk = GridSpec::desk_default();
        let slip = g.slip.unwrap_or(desk.slip);
        let horizon = g.horizon.unwrap_or(desk.horizon);
        let gamma = g.gamma.unwrap_or(desk.gamma);
        let map = if let Some(path) = map_file {
            Some(read_map(path).map_err(|m| self.error("grid", "map_file", m))?)
        } else if let Some(path) = &g.map_file {
            Some(read_map(&self.base_dir.join(path)).map_err(|m| self.error("grid", "map_file", m))?)
        } else {
            g.map.clone()
        };
        let spec = match map {
            Some(m) => GridSpec::parse_map(&m, slip, horizon, gamma),
            None => {
                let mut spec = desk;
                spec.slip = slip;
                spec.horizon = horizon;
                spec.gamma = gamma;
                spec.validate().map(|_| spec)
            }
        };
        spec.and_then(Grid::new).map_err(|e| {
            let key = if g.map.is_some() { "map" } else { "slip" };
            self.error("grid", key, e.to_string())
        })
    }

    pub fn generator(&self) -> Result<GeneratorSpec, ConfigError> {
        let s = &self.config.generator;
        let mut g = GeneratorSpec::default();
        if let Some(v) = s.means {
            g.means = v;
        }
        if let Some(v) = s.stds {
            g.stds = v;
        }
        if let Some(v) = s.evolve_sigma {
            g.evolve_sigma = v;
        }
        if let Some(v) = s.f_max {
            g.f_max = v;
        }
        if let Some(v) = s.probe_steps {
            g.probe_steps = v;
        }
        if let Some(v) = s.attempts_per_spec {
            g.attempts_per_spec = v;
        }
        g.fault = s.fault;
        g.validate().map_err(|e| self.error("generator", "stds", e.to_string()))?;
        Ok(g)
    }

    pub fn adapter_timeout(&self) -> Duration {
        Duration::from_millis(self.config.generator.timeout_ms.unwrap_or(5000))
    }

    /// A run config from the `[run]` section with optional overrides.
    pub fn run_config(&self, overrides: &RunOverrides) -> Result<RunConfig, ConfigError> {
        let r = &self.config.run;
        let algo = overrides.algo.or(r.algo).unwrap_or(Method::Orso(orso::Algorithm::D3rb));
        let k = overrides.k.or(r.k).unwrap_or(8);
        let budget = overrides.budget.or(r.budget).unwrap_or(5);
        let seed = overrides.seed.or(r.seed).unwrap_or(0);
        let mut cfg = RunConfig::new(algo, k, budget, seed);
        if let Some(v) = r.n_iters {
            cfg.n_iters = v;
        }
        cfg.slice_n = r.slice_n;
        if let Some(v) = r.n_eval {
            cfg.n_eval = v;
        }
        if let Some(v) = r.j_ref {
            cfg.j_ref = v;
        }
        if let Some(v) = r.reward_range {
            cfg.reward_range = v;
        }
        if let Some(v) = &r.thresholds {
            cfg.thresholds = v.clone();
        }
        if let Some(v) = &r.resample {
            cfg.resample = v.clone();
        }
        if let Some(v) = &r.selector {
            cfg.selector = v.clone();
        }
        cfg.record_wall_time = overrides.record_wall_time || r.record_wall_time.unwrap_or(false);
        cfg.validate().map_err(|e| {
            let msg = e.to_string();
            let key = ["slice_n", "n_iters", "n_eval", "reward_range", "j_ref", "threshold", "budget", "k"]
                .into_iter()
                .find(|k| msg.contains(k))
                .unwrap_or("selector");
            self.error("run", key, msg)
        })?;
        if let Some(f) = &self.config.generator.fixture {
            if f.len() != cfg.k {
                return Err(self.error(
                    "generator",
                    "fixture",
                    format!("fixture has {} rewards but k = {}", f.len(), cfg.k),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn validate_sweep(&self) -> Result<(), ConfigError> {
        let s = &self.config.sweep;
        for (key, empty) in [
            ("budgets", s.budgets.is_empty()),
            ("k", s.k.is_empty()),
            ("algos", s.algos.is_empty()),
            ("seeds", s.seeds.is_empty()),
        ] {
            if empty {
                return Err(self.error("sweep", key, format!("sweep list `{key}` is empty")));
            }
        }
        if s.seeds.iter().collect::<BTreeSet<_>>().len() != s.seeds.len() {
            return Err(self.error("sweep", "seeds", "sweep seeds must be distinct"));
        }
        if s.workers == Some(0) {
            return Err(self.error("sweep", "workers", "workers must be at least 1"));
        }
        let unique = |n: usize, m: usize| n == m;
        if !unique(s.budgets.iter().collect::<BTreeSet<_>>().len(), s.budgets.len())
            || !unique(s.k.iter().collect::<BTreeSet<_>>().len(), s.k.len())
            || !unique(s.algos.iter().map(|a| a.name()).collect::<BTreeSet<_>>().len(), s.algos.len())
        {
            return Err(self.error("sweep", "budgets", "sweep lists must not repeat values"));
        }
        for &budget in &s.budgets {
            for &k in &s.k {
                for &algo in &s.algos {
                    let o = RunOverrides {
                        algo: Some(algo),
                        budget: Some(budget),
                        k: Some(k),
                        seed: Some(s.seeds[0]),
                        record_wall_time: false,
                    };
                    self.run_config(&o)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub algo: Option<Method>,
    pub budget: Option<u64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub record_wall_time: bool,
}

fn read_map(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read map {}: {e}", path.display()))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]` (or a dotted subtable of it),
/// falling back to the section header.
fn find_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[') {
            current = name.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        if in_section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LoadedConfig, ConfigError> {
        LoadedConfig::parse(text, "test.toml", PathBuf::from("."))
    }

    #[test]
    fn empty_config_uses_defaults() {
        let c = parse("").unwrap();
        let cfg = c.run_config(&RunOverrides::default()).unwrap();
        assert_eq!((cfg.k, cfg.budget_b, cfg.n_iters), (8, 5, 2000));
        assert_eq!(c.grid(None).unwrap().spec(), &GridSpec::desk_default());
        c.validate_sweep().unwrap();
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let e = parse("[run]\nk = 4\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("bogus"), "{e}");
    }

    #[test]
    fn unknown_algo_lists_valid_names() {
        let e = parse("[sweep]\nalgos = [\"d3rb\", \"nope\"]\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("naive") && e.message.contains("exp3"), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let c = parse("[sweep]\nbudgets = [1]\nseeds = [1, 1]\n").unwrap();
        let e = c.validate_sweep().unwrap_err();
        assert_eq!(e.line, Some(3));
        let c = parse("[run]\nn_iters = 10\nslice_n = 20\n").unwrap();
        let e = c.run_config(&RunOverrides::default()).unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
        assert_eq!(e.to_string(), format!("test.toml:3: {}", e.message));
    }

    #[test]
    fn empty_sweep_list_rejected() {
        let c = parse("[sweep]\nk = []\n").unwrap();
        assert_eq!(c.validate_sweep().unwrap_err().line, Some(2));
    }

    #[test]
    fn fixture_must_match_k() {
        let c = parse("[run]\nk = 2\n[generator]\nfixture = [[0, 0, 0, 0, 1]]\n").unwrap();
        assert_eq!(c.run_config(&RunOverrides::default()).unwrap_err().line, Some(4));
    }

    #[test]
    fn inline_map_and_overrides() {
        let c = parse("[grid]\nmap = \"\"\"\nS..\n.#.\n..E\n\"\"\"\nslip = 0.0\nhorizon = 20\n").unwrap();
        let g = c.grid(None).unwrap();
        assert_eq!((g.spec().width, g.spec().height, g.spec().horizon), (3, 3, 20));
        let bad = parse("[grid]\nmap = \"S..\"\n").unwrap();
        assert_eq!(bad.grid(None).unwrap_err().line, Some(2));
    }

    #[test]
    fn theory_curves_parse() {
        let c = parse(
            "[theory]\nstar = 0\nhorizon = 100\n[[theory.curves]]\nkind = \"saturating\"\na = 0.9\nb = 0.5\n\
             [[theory.curves]]\nkind = \"constant\"\nvalue = 0.2\n",
        )
        .unwrap();
        let curves = c.config.theory.curves.unwrap();
        assert_eq!(curves[1], CurveSpec::constant(0.2));
    }
}
