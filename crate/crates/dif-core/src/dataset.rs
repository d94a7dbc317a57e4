//! Dataset generation and the on-disk record format.
//!
//! A dataset directory holds three files:
//!
//! - `meta.txt` — `key=value` lines, fixed order: `system`, `seed`,
//!   `n_train`, `n_test`, `T`, `dt`, `t0`, `T_c`, `envs`, `noise_std`,
//!   `norm_mean`, `norm_std` (vectors comma-separated).
//! - `train.ndrec`, `test.ndrec` — one sample per line:
//!   `<system> <env_index> <name=value ...> | <T> <d> | <X row-major d*T> [| <X^c row-major d*T>]`
//!
//! Numbers are serialized with 17 significant digits, so a load/save loop is
//! bit-exact. Generation derives one random substream per (split, env, slot),
//! making output independent of generation order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::TimeGrid;
use crate::ode::{integrate, OdeError};
use crate::rng::{substream_seed, Stream};
use crate::systems::{
    invariant_vector_field, sample_params, vector_field, EnvId, ParamSet, SystemId,
};
use crate::traj::Trajectory;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}:{line}: schema violation: {msg}")]
    Schema {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("no non-divergent sample found for env {env} slot {slot} after {retries} retries")]
    ResampleExhausted {
        env: usize,
        slot: usize,
        retries: usize,
    },
    #[error("invalid generation config: {0}")]
    BadConfig(String),
}

/// Maximum fresh parameter draws per sample slot before giving up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub system: SystemId,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Grid points `T`.
    pub points: usize,
    pub dt: f64,
    pub t0: f64,
    pub t_c: usize,
    pub envs: Vec<EnvId>,
    pub noise_std: f64,
    /// Per-dimension mean of all training-set state entries.
    pub norm_mean: Vec<f64>,
    /// Per-dimension population standard deviation of the same.
    pub norm_std: Vec<f64>,
}

impl DatasetMeta {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.t0, self.dt, self.points).expect("meta grid")
    }
}

/// One trajectory with its provenance. Test-split samples also carry the
/// invariant-counterpart trajectory integrated from the same initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub traj: Trajectory,
    pub env: EnvId,
    pub params: ParamSet,
    pub invariant: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub system: SystemId,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub points: usize,
    pub dt: f64,
    pub t0: f64,
    /// Defaults to the system's cutoff rule when `None`.
    pub t_c: Option<usize>,
    pub envs: Vec<EnvId>,
    pub noise_std: f64,
}

impl GenConfig {
    pub fn new(system: SystemId, seed: u64) -> Self {
        Self {
            system,
            seed,
            n_train: 800,
            n_test: 200,
            points: 100,
            dt: 0.1,
            t0: 0.0,
            t_c: None,
            envs: EnvId::all().to_vec(),
            noise_std: 0.0,
        }
    }
}

fn split_id(test: bool) -> u64 {
    if test {
        1
    } else {
        0
    }
}

/// Generates one slot, redrawing parameters until integration stays bounded.
fn generate_sample(
    system: SystemId,
    grid: &TimeGrid,
    seed: u64,
    env: EnvId,
    slot: usize,
    test: bool,
    noise_std: f64,
) -> Result<Sample, DataError> {
    let stream_seed = substream_seed(&[seed, split_id(test), env.index() as u64, slot as u64]);
    let mut rng = Stream::seed_from_u64(stream_seed);
    for _ in 0..MAX_RESAMPLES {
        let params = sample_params(system, &mut rng);
        let x0 = params.x0();
        let field = vector_field(env, &params);
        let traj = match integrate(field.as_fn(), &x0, grid) {
            Ok(t) => t,
            Err(OdeError::Diverged { .. }) => continue,
            Err(e) => unreachable!("integration cannot fail otherwise: {e}"),
        };
        let invariant = if test {
            let inv_field = invariant_vector_field(&params);
            match integrate(inv_field.as_fn(), &x0, grid) {
                Ok(t) => Some(t),
                Err(OdeError::Diverged { .. }) => continue,
                Err(e) => unreachable!("integration cannot fail otherwise: {e}"),
            }
        } else {
            None
        };
        let mut sample = Sample {
            traj,
            env,
            params,
            invariant,
        };
        if noise_std > 0.0 {
            // Noise perturbs integrated columns only, keeping the shared
            // initial state of a test pair intact.
            add_noise(&mut sample.traj, noise_std, &mut rng);
            if let Some(inv) = sample.invariant.as_mut() {
                add_noise(inv, noise_std, &mut rng);
            }
        }
        return Ok(sample);
    }
    Err(DataError::ResampleExhausted {
        env: env.index(),
        slot,
        retries: MAX_RESAMPLES,
    })
}

fn add_noise(traj: &mut Trajectory, std: f64, rng: &mut Stream) {
    let t = traj.points();
    let d = traj.dim();
    for i in 0..d {
        for k in 1..t {
            let v = traj.get(i, k) + std * rng.normal();
            traj.set(i, k, v);
        }
    }
}

/// Generates a balanced multi-environment dataset and its normalization
/// constants. Sample counts split evenly across the configured environments.
pub fn generate_dataset(config: &GenConfig) -> Result<Dataset, DataError> {
    let n_envs = config.envs.len();
    if n_envs == 0 {
        return Err(DataError::BadConfig("no environments selected".into()));
    }
    if config.n_train % n_envs != 0 || config.n_test % n_envs != 0 {
        return Err(DataError::BadConfig(format!(
            "sample counts {}/{} not divisible by {} environments",
            config.n_train, config.n_test, n_envs
        )));
    }
    let grid = TimeGrid::new(config.t0, config.dt, config.points)
        .map_err(|e| DataError::BadConfig(e.to_string()))?;
    let t_c = config
        .t_c
        .unwrap_or_else(|| config.system.default_t_c(config.points));
    if t_c < 1 || t_c >= config.points {
        return Err(DataError::BadConfig(format!(
            "T_c = {t_c} outside 1..{}",
            config.points
        )));
    }

    let mut train = Vec::with_capacity(config.n_train);
    let mut test = Vec::with_capacity(config.n_test);
    for (dst, n, is_test) in [
        (&mut train, config.n_train, false),
        (&mut test, config.n_test, true),
    ] {
        let per_env = n / n_envs;
        for &env in &config.envs {
            for slot in 0..per_env {
                dst.push(generate_sample(
                    config.system,
                    &grid,
                    config.seed,
                    env,
                    slot,
                    is_test,
                    config.noise_std,
                )?);
            }
        }
    }

    let d = config.system.dim();
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for s in &train {
        let t = s.traj.points();
        for i in 0..d {
            mean[i] += s.traj.states()[i * t..(i + 1) * t].iter().sum::<f64>();
        }
        count += t;
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for s in &train {
        let t = s.traj.points();
        for i in 0..d {
            var[i] += s.traj.states()[i * t..(i + 1) * t]
                .iter()
                .map(|v| (v - mean[i]) * (v - mean[i]))
                .sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(DataError::BadConfig(
            "degenerate training set: zero variance in a state dimension".into(),
        ));
    }

    Ok(Dataset {
        meta: DatasetMeta {
            system: config.system,
            seed: config.seed,
            n_train: config.n_train,
            n_test: config.n_test,
            points: config.points,
            dt: config.dt,
            t0: config.t0,
            t_c,
            envs: config.envs.clone(),
            noise_std: config.noise_std,
            norm_mean: mean,
            norm_std: std,
        },
        train,
        test,
    })
}

// ---- serialization -----------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(vs: &[f64]) -> String {
    vs.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",")
}

fn write_meta(meta: &DatasetMeta, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "system={}", meta.system.name())?;
    writeln!(out, "seed={}", meta.seed)?;
    writeln!(out, "n_train={}", meta.n_train)?;
    writeln!(out, "n_test={}", meta.n_test)?;
    writeln!(out, "T={}", meta.points)?;
    writeln!(out, "dt={}", fmt_f64(meta.dt))?;
    writeln!(out, "t0={}", fmt_f64(meta.t0))?;
    writeln!(out, "T_c={}", meta.t_c)?;
    let env_names: Vec<&str> = meta.envs.iter().map(|e| e.name(meta.system)).collect();
    writeln!(out, "envs={}", env_names.join(","))?;
    writeln!(out, "noise_std={}", fmt_f64(meta.noise_std))?;
    writeln!(out, "norm_mean={}", fmt_vec(&meta.norm_mean))?;
    writeln!(out, "norm_std={}", fmt_vec(&meta.norm_std))?;
    Ok(())
}

fn write_sample(system: SystemId, s: &Sample, out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "{} {}", system.name(), s.env.index())?;
    for (name, value) in s.params.named_values() {
        write!(out, " {name}={}", fmt_f64(value))?;
    }
    write!(out, " | {} {}", s.traj.points(), s.traj.dim())?;
    write!(out, " |")?;
    for v in s.traj.states() {
        write!(out, " {}", fmt_f64(*v))?;
    }
    if let Some(inv) = &s.invariant {
        write!(out, " |")?;
        for v in inv.states() {
            write!(out, " {}", fmt_f64(*v))?;
        }
    }
    writeln!(out)
}

/// Writes `meta.txt`, `train.ndrec`, and `test.ndrec` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source| DataError::Io { path: p, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let meta_path = dir.join("meta.txt");
    let mut w = BufWriter::new(fs::File::create(&meta_path).map_err(io_err(&meta_path))?);
    write_meta(&dataset.meta, &mut w).map_err(io_err(&meta_path))?;
    w.flush().map_err(io_err(&meta_path))?;

    for (name, samples) in [("train.ndrec", &dataset.train), ("test.ndrec", &dataset.test)] {
        let path = dir.join(name);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        for s in samples {
            write_sample(dataset.meta.system, s, &mut w).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn schema_err(file: &str, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Schema {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(file: &str, line: usize, s: &str) -> Result<f64, DataError> {
    s.parse::<f64>()
        .map_err(|_| schema_err(file, line, format!("bad float `{s}`")))
}

fn parse_meta(file: &str, text: &str) -> Result<DatasetMeta, DataError> {
    let mut kv = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| schema_err(file, i + 1, "expected key=value"))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| schema_err(file, 0, format!("missing key `{k}`")))
    };
    let system = SystemId::from_name(&get("system")?)
        .map_err(|e| schema_err(file, 0, e.to_string()))?;
    let parse_usize = |k: &str| -> Result<usize, DataError> {
        get(k)?
            .parse::<usize>()
            .map_err(|_| schema_err(file, 0, format!("bad integer for `{k}`")))
    };
    let parse_vec = |k: &str| -> Result<Vec<f64>, DataError> {
        get(k)?
            .split(',')
            .map(|s| parse_f64(file, 0, s))
            .collect()
    };
    let envs: Vec<EnvId> = get("envs")?
        .split(',')
        .map(|n| EnvId::from_name(system, n).map_err(|e| schema_err(file, 0, e.to_string())))
        .collect::<Result<_, _>>()?;
    let meta = DatasetMeta {
        system,
        seed: get("seed")?
            .parse::<u64>()
            .map_err(|_| schema_err(file, 0, "bad integer for `seed`"))?,
        n_train: parse_usize("n_train")?,
        n_test: parse_usize("n_test")?,
        points: parse_usize("T")?,
        dt: parse_f64(file, 0, &get("dt")?)?,
        t0: parse_f64(file, 0, &get("t0")?)?,
        t_c: parse_usize("T_c")?,
        envs,
        noise_std: parse_f64(file, 0, &get("noise_std")?)?,
        norm_mean: parse_vec("norm_mean")?,
        norm_std: parse_vec("norm_std")?,
    };
    let d = meta.system.dim();
    if meta.norm_mean.len() != d || meta.norm_std.len() != d {
        return Err(schema_err(file, 0, "normalization constants have wrong length"));
    }
    if meta.norm_std.iter().any(|&s| !(s > 0.0)) {
        return Err(schema_err(file, 0, "norm_std entries must be positive"));
    }
    if meta.points < 2 || meta.t_c < 1 || meta.t_c >= meta.points {
        return Err(schema_err(file, 0, "invalid T / T_c combination"));
    }
    Ok(meta)
}

fn parse_sample(
    file: &str,
    line_no: usize,
    line: &str,
    meta: &DatasetMeta,
    expect_invariant: bool,
) -> Result<Sample, DataError> {
    let sections: Vec<&str> = line.split('|').map(str::trim).collect();
    if sections.len() != if expect_invariant { 4 } else { 3 } {
        return Err(schema_err(
            file,
            line_no,
            format!("expected {} `|` sections", if expect_invariant { 4 } else { 3 }),
        ));
    }

    let mut head = sections[0].split_whitespace();
    let system_name = head
        .next()
        .ok_or_else(|| schema_err(file, line_no, "missing system"))?;
    let system =
        SystemId::from_name(system_name).map_err(|e| schema_err(file, line_no, e.to_string()))?;
    if system != meta.system {
        return Err(schema_err(file, line_no, "record system differs from meta"));
    }
    let env_index: usize = head
        .next()
        .ok_or_else(|| schema_err(file, line_no, "missing env index"))?
        .parse()
        .map_err(|_| schema_err(file, line_no, "bad env index"))?;
    let env = EnvId::new(env_index).map_err(|e| schema_err(file, line_no, e.to_string()))?;
    let mut kv = std::collections::HashMap::new();
    for tok in head {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| schema_err(file, line_no, format!("bad parameter token `{tok}`")))?;
        kv.insert(k.to_string(), parse_f64(file, line_no, v)?);
    }
    let params = ParamSet::from_named(system, |k| kv.get(k).copied())
        .ok_or_else(|| schema_err(file, line_no, "missing parameters for system"))?;

    let mut dims = sections[1].split_whitespace();
    let t: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| schema_err(file, line_no, "bad T"))?;
    let d: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| schema_err(file, line_no, "bad d"))?;
    if t != meta.points || d != system.dim() {
        return Err(schema_err(file, line_no, "dimensions differ from meta"));
    }

    let parse_block = |section: &str| -> Result<Vec<f64>, DataError> {
        let vals: Vec<f64> = section
            .split_whitespace()
            .map(|s| parse_f64(file, line_no, s))
            .collect::<Result<_, _>>()?;
        if vals.len() != t * d {
            return Err(schema_err(
                file,
                line_no,
                format!("expected {} state values, got {}", t * d, vals.len()),
            ));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(schema_err(file, line_no, "non-finite state value"));
        }
        Ok(vals)
    };

    let grid = meta.grid();
    let traj = Trajectory::new(d, grid.clone(), parse_block(sections[2])?);
    let invariant = if expect_invariant {
        let inv = Trajectory::new(d, grid, parse_block(sections[3])?);
        if inv.column(0) != traj.column(0) {
            return Err(schema_err(
                file,
                line_no,
                "invariant trajectory does not share the initial state",
            ));
        }
        Some(inv)
    } else {
        None
    };

    Ok(Sample {
        traj,
        env,
        params,
        invariant,
    })
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let read = |name: &str| -> Result<String, DataError> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    let meta = parse_meta("meta.txt", &read("meta.txt")?)?;

    let mut splits = Vec::new();
    for (name, n, expect_inv) in [
        ("train.ndrec", meta.n_train, false),
        ("test.ndrec", meta.n_test, true),
    ] {
        let text = read(name)?;
        let mut samples = Vec::with_capacity(n);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            samples.push(parse_sample(name, i + 1, line, &meta, expect_inv)?);
        }
        if samples.len() != n {
            return Err(schema_err(
                name,
                0,
                format!("expected {} records, found {}", n, samples.len()),
            ));
        }
        splits.push(samples);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset { meta, train, test })
}
