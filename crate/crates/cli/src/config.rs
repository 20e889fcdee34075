//! JSON configuration file handling and flag/file precedence. Unknown keys
//! anywhere in the file are rejected (fail-closed), and validation reports
//! every violation at once.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

/// Maps library errors onto exit-code categories: a run that went non-finite
/// is a numeric failure; anything else reachable from here means the
/// requested parameters were invalid.
pub fn lib_err(e: psdflow::Error) -> CliError {
    match e {
        psdflow::Error::NonFiniteState { step } => {
            CliError::Numeric(format!("state became non-finite at step {step}"))
        }
        other => CliError::Config(other.to_string()),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub h: Option<f64>,
    pub t_end: Option<f64>,
    pub record_every: Option<usize>,
    pub out: Option<String>,
    pub project_bench: Option<BenchBlock>,
    pub riccati_compare: Option<RiccatiBlock>,
    pub swarm: Option<SwarmBlock>,
    pub brownian: Option<BrownianBlock>,
    pub viflow: Option<ViBlock>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchBlock {
    pub dims: Option<Vec<usize>>,
    pub p: Option<usize>,
    pub r: Option<usize>,
    pub reps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiBlock {
    pub d: Option<usize>,
    pub p: Option<usize>,
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwarmBlock {
    pub d: Option<usize>,
    pub p: Option<usize>,
    pub q_dispersion: Option<f64>,
    pub n_scale: Option<f64>,
    pub noise_free: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrownianBlock {
    pub d: Option<usize>,
    pub p: Option<usize>,
    pub lambda: Option<f64>,
    pub nu: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViBlock {
    pub d: Option<usize>,
    pub p: Option<usize>,
    pub epsilon: Option<f64>,
    pub mode: Option<String>,
    pub k: Option<usize>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!(
            "{} (line {}, column {})",
            e,
            e.line(),
            e.column()
        ))
    })
}

fn validate(violations: Vec<String>) -> Result<(), CliError> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(violations.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// Resolved per-experiment configurations (defaults < file < flags), echoed
// verbatim into the metadata sidecar.

#[derive(Debug, Serialize)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub p: usize,
    pub r: usize,
    pub reps: usize,
    pub seed: u64,
}

pub fn resolve_bench(
    file: &FileConfig,
    dims: Option<Vec<usize>>,
    p: Option<usize>,
    r: Option<usize>,
    reps: Option<usize>,
    seed: u64,
) -> Result<BenchConfig, CliError> {
    let blk = file.project_bench.as_ref();
    let cfg = BenchConfig {
        dims: dims
            .or_else(|| blk.and_then(|b| b.dims.clone()))
            .unwrap_or_else(|| vec![2_000, 5_000, 10_000]),
        p: p.or(blk.and_then(|b| b.p)).unwrap_or(10),
        r: r.or(blk.and_then(|b| b.r)).unwrap_or(100),
        reps: reps.or(blk.and_then(|b| b.reps)).unwrap_or(5),
        seed,
    };
    let mut bad = Vec::new();
    if cfg.r <= cfg.p {
        bad.push(format!("r ({}) must exceed p ({})", cfg.r, cfg.p));
    }
    if cfg.dims.is_empty() || cfg.dims.windows(2).any(|w| w[1] <= w[0]) {
        bad.push("dims must be non-empty and strictly ascending".into());
    }
    validate(bad)?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct TimeGrid {
    pub h: f64,
    pub t_end: f64,
    pub record_every: usize,
}

fn resolve_grid(
    file: &FileConfig,
    h: Option<f64>,
    t_end: Option<f64>,
    record_every: Option<usize>,
    default_t_end: f64,
    default_record: usize,
) -> (TimeGrid, Vec<String>) {
    let grid = TimeGrid {
        h: h.or(file.h).unwrap_or(0.01),
        t_end: t_end.or(file.t_end).unwrap_or(default_t_end),
        record_every: record_every.or(file.record_every).unwrap_or(default_record),
    };
    let mut bad = Vec::new();
    if !(grid.h > 0.0) {
        bad.push(format!("h must be positive, got {}", grid.h));
    }
    if !(grid.t_end >= grid.h) {
        bad.push(format!(
            "t_end ({}) must be at least h ({})",
            grid.t_end, grid.h
        ));
    }
    (grid, bad)
}

#[derive(Debug, Serialize)]
pub struct RiccatiConfig {
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub grid: TimeGrid,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_riccati(
    file: &FileConfig,
    d: Option<usize>,
    p: Option<usize>,
    k: Option<usize>,
    h: Option<f64>,
    t_end: Option<f64>,
    record_every: Option<usize>,
    seed: u64,
) -> Result<RiccatiConfig, CliError> {
    let blk = file.riccati_compare.as_ref();
    let (grid, mut bad) = resolve_grid(file, h, t_end, record_every, 5.0, 10);
    let cfg = RiccatiConfig {
        d: d.or(blk.and_then(|b| b.d)).unwrap_or(40),
        p: p.or(blk.and_then(|b| b.p)).unwrap_or(6),
        k: k.or(blk.and_then(|b| b.k)).unwrap_or(8),
        grid,
        seed,
    };
    if cfg.p == 0 || cfg.p >= cfg.d {
        bad.push(format!("need 1 <= p < d, got p = {}, d = {}", cfg.p, cfg.d));
    }
    if cfg.d > 2000 {
        bad.push(format!(
            "d = {} exceeds the dense-reference limit of 2000",
            cfg.d
        ));
    }
    if cfg.k == 0 {
        bad.push("k must be positive".into());
    }
    validate(bad)?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct SwarmConfig {
    pub d: usize,
    pub p: usize,
    pub q_dispersion: f64,
    pub n_scale: f64,
    pub noise_free: bool,
    pub grid: TimeGrid,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_swarm(
    file: &FileConfig,
    d: Option<usize>,
    p: Option<usize>,
    h: Option<f64>,
    t_end: Option<f64>,
    record_every: Option<usize>,
    q_dispersion: Option<f64>,
    n_scale: Option<f64>,
    noise_free_flag: bool,
    seed: u64,
) -> Result<SwarmConfig, CliError> {
    let blk = file.swarm.as_ref();
    let (grid, mut bad) = resolve_grid(file, h, t_end, record_every, 10.0, 10);
    let cfg = SwarmConfig {
        d: d.or(blk.and_then(|b| b.d)).unwrap_or(200),
        p: p.or(blk.and_then(|b| b.p)).unwrap_or(8),
        q_dispersion: q_dispersion
            .or(blk.and_then(|b| b.q_dispersion))
            .unwrap_or(0.3),
        n_scale: n_scale.or(blk.and_then(|b| b.n_scale)).unwrap_or(2.0),
        noise_free: noise_free_flag || blk.and_then(|b| b.noise_free).unwrap_or(false),
        grid,
        seed,
    };
    if cfg.d < 4 || cfg.d % 2 != 0 {
        bad.push(format!(
            "d ({}) must be even and at least 4 (two coordinates per agent)",
            cfg.d
        ));
    }
    if cfg.p == 0 || cfg.p >= cfg.d {
        bad.push(format!("need 1 <= p < d, got p = {}, d = {}", cfg.p, cfg.d));
    }
    if cfg.d > 2000 {
        bad.push(format!(
            "d = {} exceeds the dense full-filter limit of 2000",
            cfg.d
        ));
    }
    if !(cfg.q_dispersion >= 0.0 && cfg.q_dispersion < 1.0) {
        bad.push(format!(
            "q_dispersion must lie in [0, 1), got {}",
            cfg.q_dispersion
        ));
    }
    if !(cfg.n_scale > 0.0) {
        bad.push(format!("n_scale must be positive, got {}", cfg.n_scale));
    }
    validate(bad)?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct BrownianConfig {
    pub d: usize,
    pub p: usize,
    pub lambda: f64,
    pub nu: f64,
    pub grid: TimeGrid,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_brownian(
    file: &FileConfig,
    d: Option<usize>,
    p: Option<usize>,
    lambda: Option<f64>,
    nu: Option<f64>,
    h: Option<f64>,
    t_end: Option<f64>,
    record_every: Option<usize>,
    seed: u64,
) -> Result<BrownianConfig, CliError> {
    let blk = file.brownian.as_ref();
    let (grid, mut bad) = resolve_grid(file, h, t_end, record_every, 10.0, 10);
    let cfg = BrownianConfig {
        d: d.or(blk.and_then(|b| b.d)).unwrap_or(30),
        p: p.or(blk.and_then(|b| b.p)).unwrap_or(4),
        lambda: lambda.or(blk.and_then(|b| b.lambda)).unwrap_or(1.0),
        nu: nu.or(blk.and_then(|b| b.nu)).unwrap_or(1.0),
        grid,
        seed,
    };
    if cfg.p == 0 || cfg.p >= cfg.d {
        bad.push(format!("need 1 <= p < d, got p = {}, d = {}", cfg.p, cfg.d));
    }
    if !(cfg.lambda > 0.0) || !(cfg.nu > 0.0) {
        bad.push(format!(
            "lambda ({}) and nu ({}) must be positive",
            cfg.lambda, cfg.nu
        ));
    }
    validate(bad)?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct ViConfig {
    pub d: usize,
    pub p: usize,
    pub epsilon: f64,
    pub mode: String,
    pub k: usize,
    pub grid: TimeGrid,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_viflow(
    file: &FileConfig,
    d: Option<usize>,
    p: Option<usize>,
    epsilon: Option<f64>,
    mode: Option<String>,
    k: Option<usize>,
    h: Option<f64>,
    t_end: Option<f64>,
    record_every: Option<usize>,
    seed: u64,
) -> Result<ViConfig, CliError> {
    let blk = file.viflow.as_ref();
    let (grid, mut bad) = resolve_grid(file, h, t_end, record_every, 20.0, 100);
    let cfg = ViConfig {
        d: d.or(blk.and_then(|b| b.d)).unwrap_or(20),
        p: p.or(blk.and_then(|b| b.p)).unwrap_or(5),
        epsilon: epsilon.or(blk.and_then(|b| b.epsilon)).unwrap_or(1.0),
        mode: mode
            .or_else(|| blk.and_then(|b| b.mode.clone()))
            .unwrap_or_else(|| "exact".into()),
        k: k.or(blk.and_then(|b| b.k)).unwrap_or(1000),
        grid,
        seed,
    };
    if cfg.p == 0 || cfg.p >= cfg.d {
        bad.push(format!("need 1 <= p < d, got p = {}, d = {}", cfg.p, cfg.d));
    }
    if !(cfg.epsilon > 0.0) {
        bad.push(format!("epsilon must be positive, got {}", cfg.epsilon));
    }
    if cfg.mode != "exact" && cfg.mode != "mc" {
        bad.push(format!("mode must be \"exact\" or \"mc\", got {:?}", cfg.mode));
    }
    if cfg.mode == "mc" && cfg.k == 0 {
        bad.push("k must be positive in mc mode".into());
    }
    validate(bad)?;
    Ok(cfg)
}
