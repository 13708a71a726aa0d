//! Command dispatch, overrides and artifact emission.
//!
//! Artifacts land in `--out` as `<command>-<stamp>.json` plus CSV tables
//! `<command>-<stamp>[-<part>].csv`. The stamp is a hash of the command, the
//! effective specification and the seed, so reruns overwrite identical files.
//!
//! CSV layouts (header row first, fixed column order):
//! - per-agent or per-type solution: `step,node,y,z_0..,pi_0..`
//! - aggregate field: `step,common_node,type,component,value`
//! - closed-form: `agent,component,n_agent_exposure,graphon_exposure,gap_bound`
//! - certificate: `agent,value,best_value,gain`
//! - convergence: see `ConvergenceRow::HEADER`
//!
//! Extra top-level keys read from the specification file: `n_list`,
//! `grid_points`, `grid_lower`, `grid_upper`, `perturbation`.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use graphon_nash::closed_form::{prop_gap_bound, prop_graphon_strategy, prop_n_agent_strategy, ClosedFormEquilibrium};
use graphon_nash::graphon_solver::{gmap_bound, solve_graphon_bsde_common_noise, solve_graphon_bsde_no_common, GraphonBsdeSolution};
use graphon_nash::io::{parse_spec, read_spec, write_json, write_solution_file, IoError};
use graphon_nash::model::{AgentModel, DriftModel, Mode, ValidationReport};
use graphon_nash::n_agent_solver::{check_spec, compute_values_n, solve_n_agent_bsde, y0_untransformed, SolverError};
use graphon_nash::verify::{certify_nash, certify_profile, convergence_experiment, shifted_strategy, GridConfig, VerifyError};
use graphon_nash::{AdaptedProcess, GameSpec};
use serde_json::{json, Value};
use thiserror::Error;

use crate::{Command, RunConfig};

const EXTRA_KEYS: [&str; 5] = ["n_list", "grid_points", "grid_lower", "grid_upper", "perturbation"];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn solver_code(e: &SolverError) -> u8 {
    if e.is_unsupported_projection() {
        return 4;
    }
    match e {
        SolverError::ContractionBound { .. } | SolverError::NonConvergence { .. } => 3,
        _ => 2,
    }
}

fn verify_code(e: &VerifyError) -> u8 {
    match e {
        VerifyError::Solver(s) => solver_code(s),
        VerifyError::AtN { source, .. } => verify_code(source),
        VerifyError::Model(m) => solver_code(&SolverError::Model(m.clone())),
        _ => 2,
    }
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Validation(_) => 2,
            RunError::Solver(e) => solver_code(e),
            RunError::Verify(e) => verify_code(e),
            RunError::Io(IoError::Json(_)) => 2,
            RunError::Io(_) => 1,
        }
    }
}

/// Sets `path` (dot separated, numeric segments index arrays) to `raw`,
/// read as JSON when it parses and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), RunError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = doc;
    for (pos, part) in parts.iter().enumerate() {
        let last = pos + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| RunError::Config(format!("override path `{path}`: no key `{part}`")))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| RunError::Config(format!("override path `{path}`: `{part}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| RunError::Config(format!("override path `{path}`: index {idx} beyond length {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(RunError::Config(format!("override path `{path}`: `{part}` is not inside an object or array"))),
        };
    }
    Err(RunError::Config(format!("empty override path in `{assignment}`")))
}

struct Prepared {
    spec: GameSpec,
    extras: serde_json::Map<String, Value>,
    stamp: String,
}

fn prepare(config: &RunConfig) -> Result<Prepared, RunError> {
    let mut doc = read_spec(&config.spec_path)?;
    for o in &config.overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(seed) = config.seed {
        doc["seed"] = json!(seed);
    }
    let mut extras = serde_json::Map::new();
    if let Value::Object(map) = &mut doc {
        for k in EXTRA_KEYS {
            if let Some(v) = map.remove(k) {
                extras.insert(k.to_string(), v);
            }
        }
    }
    let mut h = DefaultHasher::new();
    config.command.name().hash(&mut h);
    doc.to_string().hash(&mut h);
    Value::Object(extras.clone()).to_string().hash(&mut h);
    let stamp = format!("{:016x}", h.finish());
    let spec = parse_spec(doc)?;
    match check_spec(&spec) {
        Ok(()) => {}
        Err(SolverError::Validation(report)) => return Err(RunError::Validation(report)),
        Err(e) => return Err(e.into()),
    }
    Ok(Prepared { spec, extras, stamp })
}

fn create_csv(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| RunError::Io(IoError::Io { path: path.display().to_string(), source }))
}

fn csv_err(e: csv::Error) -> RunError {
    RunError::Io(IoError::Csv(e))
}

struct Out {
    dir: PathBuf,
    base: String,
}

impl Out {
    fn path(&self, part: Option<&str>, ext: &str) -> PathBuf {
        match part {
            Some(p) => self.dir.join(format!("{}-{p}.{ext}", self.base)),
            None => self.dir.join(format!("{}.{ext}", self.base)),
        }
    }
}

pub fn run(config: &RunConfig) -> Result<String, RunError> {
    let prepared = prepare(config)?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|source| RunError::Io(IoError::Io { path: config.out_dir.display().to_string(), source }))?;
    let out = Out { dir: config.out_dir.clone(), base: format!("{}-{}", config.command.name(), prepared.stamp) };
    let line = match config.command {
        Command::SolveN => solve_n(&prepared, &out)?,
        Command::SolveGraphon => solve_graphon(&prepared, &out)?,
        Command::ClosedForm => closed_form(&prepared, &out)?,
        Command::VerifyNash => verify_nash(&prepared, &out)?,
        Command::Converge => converge(&prepared, &out)?,
        Command::GMap => g_map(&prepared, &out)?,
    };
    Ok(format!("{line} [{}]", out.path(None, "json").display()))
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
}

fn solve_n(p: &Prepared, out: &Out) -> Result<String, RunError> {
    let sol = solve_n_agent_bsde(&p.spec)?;
    let values = compute_values_n(&sol, &p.spec);
    for (i, own) in sol.own.iter().enumerate() {
        write_solution_file(own, &out.path(Some(&format!("agent{i}")), "csv"))?;
    }
    write_json(
        &out.path(None, "json"),
        &json!({
            "command": "solve-n",
            "n": sol.n(),
            "y0": sol.y0,
            "y0_untransformed": y0_untransformed(&sol, &p.spec),
            "values": values,
            "picard": sol.picard,
        }),
    )?;
    let (lo, hi) = range(&values);
    Ok(format!("solve-n: n = {}, V0 in [{lo:.6e}, {hi:.6e}]", sol.n()))
}

fn write_graphon(sol: &GraphonBsdeSolution, out: &Out, command: &str) -> Result<(), RunError> {
    for (k, own) in sol.types.iter().enumerate() {
        write_solution_file(own, &out.path(Some(&format!("type{k}")), "csv"))?;
    }
    sol.aggregate
        .write_csv(create_csv(&out.path(Some("aggregate"), "csv"))?)
        .map_err(csv_err)?;
    write_json(
        &out.path(None, "json"),
        &json!({
            "command": command,
            "locations": sol.locations,
            "y0": sol.y0,
            "values": sol.values,
            "outer_trace": sol.trace,
            "damping": sol.damping,
            "common_noise": sol.common_noise,
            "gmap_rate": sol.gmap_rate,
            "picard": sol.picard,
        }),
    )?;
    Ok(())
}

fn solve_graphon(p: &Prepared, out: &Out) -> Result<String, RunError> {
    let sol = if p.spec.common_noise {
        solve_graphon_bsde_common_noise(&p.spec)?
    } else {
        solve_graphon_bsde_no_common(&p.spec)?
    };
    write_graphon(&sol, out, "solve-graphon")?;
    let (lo, hi) = range(&sol.values);
    Ok(format!(
        "solve-graphon: m = {}, V0 in [{lo:.6e}, {hi:.6e}], outer iterations {}",
        sol.types.len(),
        sol.trace.len()
    ))
}

fn closed_form(p: &Prepared, out: &Out) -> Result<String, RunError> {
    let spec = &p.spec;
    let n = spec.population();
    let finite = matches!(spec.mode, Mode::Finite { .. });
    let gamma_tilde = spec.gamma_tilde();
    let mut eq = ClosedFormEquilibrium { n_agent_exposure: Vec::new(), graphon_exposure: Vec::new(), gap_bound: Vec::new() };
    let mut w = csv::Writer::from_writer(create_csv(&out.path(None, "csv"))?);
    w.write_record(["agent", "component", "n_agent_exposure", "graphon_exposure", "gap_bound"])
        .map_err(csv_err)?;
    for i in 0..n {
        let a = spec.agent(i);
        if !matches!(a.mu, DriftModel::Constant { .. }) {
            return Err(RunError::Config(format!("closed-form needs a constant drift (agents[{i}].mu)")));
        }
        let model = AgentModel::new(&a).map_err(SolverError::from)?;
        let lat = model.own_lattice(i, 1, spec.horizon, false).map_err(SolverError::from)?;
        let mut theta = model.theta(&lat, 0, 0);
        if !a.has_common_loading() {
            theta.truncate(model.d);
        }
        let fail = |e: graphon_nash::closed_form::ClosedFormError| RunError::Config(format!("agents[{i}]: {e}"));
        let lam = if finite { spec.lambda_n(i, i) } else { 0.0 };
        let gr = prop_graphon_strategy(&theta, a.gamma).map_err(fail)?;
        let na = if finite { prop_n_agent_strategy(&theta, a.gamma, spec.rho, lam).map_err(fail)? } else { gr.clone() };
        let gap = prop_gap_bound(&theta, a.gamma, gamma_tilde, spec.rho, lam).map_err(fail)?;
        for c in 0..theta.len() {
            w.write_record([i.to_string(), c.to_string(), format!("{:e}", na[c]), format!("{:e}", gr[c]), format!("{gap:e}")])
                .map_err(csv_err)?;
        }
        eq.n_agent_exposure.push(na);
        eq.graphon_exposure.push(gr);
        eq.gap_bound.push(gap);
    }
    w.flush().map_err(|source| RunError::Io(IoError::Io { path: "closed-form csv".into(), source }))?;
    write_json(&out.path(None, "json"), &eq)?;
    let parts: Vec<String> = eq
        .n_agent_exposure
        .iter()
        .map(|v| {
            let c: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            format!("[{}]", c.join(", "))
        })
        .collect();
    let gap = eq.gap_bound.iter().copied().fold(0.0, f64::max);
    Ok(format!("closed-form: sigma*pi per agent {}, max gap bound {gap:.6e}", parts.join(" ")))
}

fn extra_f64(p: &Prepared, key: &str) -> Result<Option<f64>, RunError> {
    match p.extras.get(key) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| RunError::Config(format!("`{key}` must be a number"))),
    }
}

fn verify_nash(p: &Prepared, out: &Out) -> Result<String, RunError> {
    let spec = &p.spec;
    let points = match extra_f64(p, "grid_points")? {
        Some(v) if v >= 1.0 && v.fract() == 0.0 => v as usize,
        Some(_) => return Err(RunError::Config("`grid_points` must be a positive integer".into())),
        None => GridConfig::default().points,
    };
    let grid = GridConfig { points, lower: extra_f64(p, "grid_lower")?, upper: extra_f64(p, "grid_upper")? };
    let shift = extra_f64(p, "perturbation")?.unwrap_or(0.0);
    let sol = solve_n_agent_bsde(spec)?;
    let cert = if shift == 0.0 {
        certify_nash(spec, &sol, &grid)?
    } else {
        let profile: Vec<AdaptedProcess> = sol
            .own
            .iter()
            .map(|o| shifted_strategy(&o.pi, &o.lattice, &o.model.params.constraint, shift))
            .collect();
        certify_profile(spec, &sol, &profile, &grid)?
    };
    let verdict = if cert.passed { "PASS" } else { "FAIL" };
    let mut w = csv::Writer::from_writer(create_csv(&out.path(None, "csv"))?);
    w.write_record(["agent", "value", "best_value", "gain"]).map_err(csv_err)?;
    for i in 0..cert.gains.len() {
        w.write_record([
            i.to_string(),
            format!("{:e}", cert.values[i]),
            format!("{:e}", cert.best_values[i]),
            format!("{:e}", cert.gains[i]),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| RunError::Io(IoError::Io { path: "certificate csv".into(), source }))?;
    write_json(
        &out.path(None, "json"),
        &json!({ "command": "verify-nash", "perturbation": shift, "certificate": verdict, "details": cert }),
    )?;
    Ok(format!(
        "verify-nash: max deviation gain {:.6e}, epsilon {:.6e}, certificate {verdict}",
        cert.max_gain(),
        cert.epsilon
    ))
}

fn converge(p: &Prepared, out: &Out) -> Result<String, RunError> {
    let m = match &p.spec.mode {
        Mode::Graphon { m, .. } => *m,
        Mode::Finite { .. } => return Err(RunError::Config("converge needs a graphon-mode specification".into())),
    };
    let n_list: Vec<usize> = match p.extras.get("n_list") {
        None => vec![4, 16, 64],
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| RunError::Config(format!("`n_list`: {e}")))?,
    };
    let rep = convergence_experiment(&p.spec, &n_list, m)?;
    rep.write_csv(create_csv(&out.path(None, "csv"))?).map_err(csv_err)?;
    write_json(&out.path(None, "json"), &rep)?;
    let last = rep.rows.last().ok_or_else(|| RunError::Config("`n_list` is empty".into()))?;
    Ok(format!(
        "converge: n = {:?}, final value gap {:.6e}, final strategy gap {:.6e}",
        n_list, last.max_value_gap, last.max_strategy_gap
    ))
}

fn g_map(p: &Prepared, out: &Out) -> Result<String, RunError> {
    if !p.spec.common_noise {
        return Err(RunError::Config("g-map needs `common_noise: true`".into()));
    }
    let sol = solve_graphon_bsde_common_noise(&p.spec)?;
    write_graphon(&sol, out, "g-map")?;
    let bound = gmap_bound(p.spec.rho, p.spec.gamma_bar(), p.spec.gamma_tilde());
    Ok(format!("g-map: measured contraction rate {:.6e} (bound {bound:.6e})", sol.gmap_rate))
}
