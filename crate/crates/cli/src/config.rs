//! Flat sectioned run configuration with typed keys.
//!
//! Every key is validated; unknown keys are rejected with the offending name
//! so typos never silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::Path;

use beq_core::{BetweennessPreference, ConvexSet, DiscreteMeasure, MarketModel, Scheme, TimeDep};
use nalgebra::{DMatrix, DVector};
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct SolverCfg {
    pub n_steps: usize,
    pub y_max: f64,
    pub quad_order: usize,
    pub table_nodes: usize,
}

#[derive(Debug, Clone)]
pub struct VerifyCfg {
    pub grid_t: usize,
    pub grid_x: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub eps_ladder: Vec<f64>,
    pub t: Option<f64>,
    pub x: f64,
    pub alternatives: Option<Vec<DVector<f64>>>,
    pub scheme: Scheme,
    pub euler_steps: usize,
}

#[derive(Debug, Clone)]
pub struct OutputCfg {
    pub directory: String,
    pub emit_plots: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preference: BetweennessPreference,
    pub market: MarketModel,
    pub constraint: Option<ConvexSet>,
    pub solver: SolverCfg,
    pub verify: VerifyCfg,
    pub output: OutputCfg,
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::syntax(format!("{}: {e}", path.display())))?;
    let root = &root;
    check_keys(
        root,
        "<root>",
        &[
            "preference",
            "market",
            "constraint",
            "solver",
            "verify",
            "output",
        ],
    )?;

    let market = parse_market(require_table(root, "market")?)?;
    let dim = market.dim();
    let horizon = market.horizon();
    let preference = parse_preference(require_table(root, "preference")?)?;
    let constraint = match root.get("constraint") {
        Some(v) => Some(parse_constraint(as_table(v, "constraint")?, dim)?),
        None => None,
    };
    let solver = parse_solver(root.get("solver"))?;
    let verify = parse_verify(root.get("verify"), dim, horizon)?;
    let output = parse_output(root.get("output"))?;
    Ok(RunConfig {
        preference,
        market,
        constraint,
        solver,
        verify,
        output,
    })
}

// -- generic helpers ---------------------------------------------------------

type Table = toml::map::Map<String, Value>;

fn as_table<'v>(v: &'v Value, key: &str) -> Result<&'v Table, CliError> {
    v.as_table()
        .ok_or_else(|| CliError::semantic(key, "expected a table"))
}

fn require_table<'v>(t: &'v Table, key: &str) -> Result<&'v Table, CliError> {
    match t.get(key) {
        Some(v) => as_table(v, key),
        None => Err(CliError::semantic(key, "required section is missing")),
    }
}

fn check_keys(t: &Table, section: &str, allowed: &[&str]) -> Result<(), CliError> {
    let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
    for k in t.keys() {
        if !allowed.contains(k.as_str()) {
            return Err(CliError::semantic(
                &format!("{section}.{k}"),
                &format!(
                    "unknown key (allowed: {})",
                    allowed.iter().cloned().collect::<Vec<_>>().join(", ")
                ),
            ));
        }
    }
    Ok(())
}

fn get_f64(t: &Table, section: &str, key: &str) -> Result<Option<f64>, CliError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Float(f)) => Ok(Some(*f)),
        Some(Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(_) => Err(CliError::semantic(
            &format!("{section}.{key}"),
            "expected a number",
        )),
    }
}

fn need_f64(t: &Table, section: &str, key: &str) -> Result<f64, CliError> {
    get_f64(t, section, key)?
        .ok_or_else(|| CliError::semantic(&format!("{section}.{key}"), "required key is missing"))
}

fn get_usize(t: &Table, section: &str, key: &str) -> Result<Option<usize>, CliError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(_) => Err(CliError::semantic(
            &format!("{section}.{key}"),
            "expected a nonnegative integer",
        )),
    }
}

fn get_bool(t: &Table, section: &str, key: &str) -> Result<Option<bool>, CliError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Boolean(b)) => Ok(Some(*b)),
        Some(_) => Err(CliError::semantic(
            &format!("{section}.{key}"),
            "expected a boolean",
        )),
    }
}

fn get_str<'v>(t: &'v Table, section: &str, key: &str) -> Result<Option<&'v str>, CliError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.as_str())),
        Some(_) => Err(CliError::semantic(
            &format!("{section}.{key}"),
            "expected a string",
        )),
    }
}

fn number_array(v: &Value, key: &str) -> Result<Vec<f64>, CliError> {
    let arr = v
        .as_array()
        .ok_or_else(|| CliError::semantic(key, "expected an array of numbers"))?;
    arr.iter()
        .map(|e| match e {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(CliError::semantic(key, "expected an array of numbers")),
        })
        .collect()
}

fn vector(t: &Table, section: &str, key: &str, dim: usize) -> Result<DVector<f64>, CliError> {
    let full = format!("{section}.{key}");
    let v = t
        .get(key)
        .ok_or_else(|| CliError::semantic(&full, "required key is missing"))?;
    let xs = number_array(v, &full)?;
    if xs.len() != dim {
        return Err(CliError::semantic(
            &full,
            &format!("expected {dim} entries, found {}", xs.len()),
        ));
    }
    Ok(DVector::from_vec(xs))
}

// -- sections ----------------------------------------------------------------

fn parse_preference(t: &Table) -> Result<BetweennessPreference, CliError> {
    check_keys(t, "preference", &["family", "rho", "gamma", "atoms"])?;
    let family = get_str(t, "preference", "family")?
        .ok_or_else(|| CliError::semantic("preference.family", "required key is missing"))?;
    match family {
        "weighted" => {
            let rho = need_f64(t, "preference", "rho")?;
            let gamma = need_f64(t, "preference", "gamma")?;
            if t.contains_key("atoms") {
                return Err(CliError::semantic("preference.atoms", "not a weighted-utility key"));
            }
            BetweennessPreference::weighted_utility(rho, gamma).map_err(CliError::from)
        }
        "mixed_crra" => {
            let v = t
                .get("atoms")
                .ok_or_else(|| CliError::semantic("preference.atoms", "required for mixed_crra"))?;
            let arr = v
                .as_array()
                .ok_or_else(|| CliError::semantic("preference.atoms", "expected [[gamma, weight], ...]"))?;
            let mut atoms = Vec::with_capacity(arr.len());
            for (i, e) in arr.iter().enumerate() {
                let pair = number_array(e, &format!("preference.atoms[{i}]"))?;
                if pair.len() != 2 {
                    return Err(CliError::semantic(
                        &format!("preference.atoms[{i}]"),
                        "expected a [gamma, weight] pair",
                    ));
                }
                atoms.push((pair[0], pair[1]));
            }
            if t.contains_key("rho") || t.contains_key("gamma") {
                return Err(CliError::semantic("preference.rho", "not a mixed_crra key"));
            }
            Ok(BetweennessPreference::mixed_crra(DiscreteMeasure::new(atoms)?))
        }
        other => Err(CliError::semantic(
            "preference.family",
            &format!("unknown family '{other}' (supported: weighted, mixed_crra; custom generators are library-level)"),
        )),
    }
}

/// Scalar-or-nodes value: `0.2` or `{ nodes = [[t, v], ...] }`.
fn parse_time_scalar(
    t: &Table,
    section: &str,
    key: &str,
    default: Option<f64>,
) -> Result<TimeDep<f64>, CliError> {
    let full = format!("{section}.{key}");
    match t.get(key) {
        None => default
            .map(TimeDep::Constant)
            .ok_or_else(|| CliError::semantic(&full, "required key is missing")),
        Some(Value::Float(f)) => Ok(TimeDep::Constant(*f)),
        Some(Value::Integer(i)) => Ok(TimeDep::Constant(*i as f64)),
        Some(Value::Table(inner)) => {
            check_keys(inner, &full, &["nodes"])?;
            let nodes = inner
                .get("nodes")
                .and_then(|v| v.as_array())
                .ok_or_else(|| CliError::semantic(&full, "expected nodes = [[t, value], ...]"))?;
            let mut ts = Vec::new();
            let mut vals = Vec::new();
            for (i, n) in nodes.iter().enumerate() {
                let pair = number_array(n, &format!("{full}.nodes[{i}]"))?;
                if pair.len() != 2 {
                    return Err(CliError::semantic(
                        &format!("{full}.nodes[{i}]"),
                        "expected [t, value]",
                    ));
                }
                ts.push(pair[0]);
                vals.push(pair[1]);
            }
            Ok(TimeDep::PiecewiseLinear { ts, values: vals })
        }
        Some(_) => Err(CliError::semantic(
            &full,
            "expected a number or { nodes = ... }",
        )),
    }
}

/// Vector coefficient: scalar (d = 1), array, or nodes of arrays.
fn parse_time_vector(t: &Table, key: &str, dim: usize) -> Result<TimeDep<DVector<f64>>, CliError> {
    let full = format!("market.{key}");
    let vector_of = |v: &Value, ctx: &str| -> Result<DVector<f64>, CliError> {
        let xs = match v {
            Value::Float(f) if dim == 1 => vec![*f],
            Value::Integer(i) if dim == 1 => vec![*i as f64],
            other => number_array(other, ctx)?,
        };
        if xs.len() != dim {
            return Err(CliError::semantic(
                ctx,
                &format!("expected {dim} entries, found {}", xs.len()),
            ));
        }
        Ok(DVector::from_vec(xs))
    };
    match t.get(key) {
        None => Err(CliError::semantic(&full, "required key is missing")),
        Some(Value::Table(inner)) => {
            check_keys(inner, &full, &["nodes"])?;
            let nodes = inner
                .get("nodes")
                .and_then(|v| v.as_array())
                .ok_or_else(|| CliError::semantic(&full, "expected nodes = [[t, value], ...]"))?;
            let mut ts = Vec::new();
            let mut vals = Vec::new();
            for (i, n) in nodes.iter().enumerate() {
                let pair = n.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                    CliError::semantic(&format!("{full}.nodes[{i}]"), "expected [t, value]")
                })?;
                ts.push(match &pair[0] {
                    Value::Float(f) => *f,
                    Value::Integer(i) => *i as f64,
                    _ => {
                        return Err(CliError::semantic(
                            &format!("{full}.nodes[{i}]"),
                            "node time must be a number",
                        ))
                    }
                });
                vals.push(vector_of(&pair[1], &format!("{full}.nodes[{i}]"))?);
            }
            Ok(TimeDep::PiecewiseLinear { ts, values: vals })
        }
        Some(v) => Ok(TimeDep::Constant(vector_of(v, &full)?)),
    }
}

/// Square matrix: scalar (d = 1), row-major flat array of d*d numbers, or
/// nodes of those.
fn parse_time_matrix(t: &Table, key: &str, dim: usize) -> Result<TimeDep<DMatrix<f64>>, CliError> {
    let full = format!("market.{key}");
    let matrix_of = |v: &Value, ctx: &str| -> Result<DMatrix<f64>, CliError> {
        let xs = match v {
            Value::Float(f) if dim == 1 => vec![*f],
            Value::Integer(i) if dim == 1 => vec![*i as f64],
            other => number_array(other, ctx)?,
        };
        if xs.len() != dim * dim {
            return Err(CliError::semantic(
                ctx,
                &format!(
                    "expected {} row-major entries, found {}",
                    dim * dim,
                    xs.len()
                ),
            ));
        }
        Ok(DMatrix::from_row_slice(dim, dim, &xs))
    };
    match t.get(key) {
        None => Err(CliError::semantic(&full, "required key is missing")),
        Some(Value::Table(inner)) => {
            check_keys(inner, &full, &["nodes"])?;
            let nodes = inner
                .get("nodes")
                .and_then(|v| v.as_array())
                .ok_or_else(|| CliError::semantic(&full, "expected nodes = [[t, matrix], ...]"))?;
            let mut ts = Vec::new();
            let mut vals = Vec::new();
            for (i, n) in nodes.iter().enumerate() {
                let pair = n.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                    CliError::semantic(&format!("{full}.nodes[{i}]"), "expected [t, matrix]")
                })?;
                ts.push(match &pair[0] {
                    Value::Float(f) => *f,
                    Value::Integer(i) => *i as f64,
                    _ => {
                        return Err(CliError::semantic(
                            &format!("{full}.nodes[{i}]"),
                            "node time must be a number",
                        ))
                    }
                });
                vals.push(matrix_of(&pair[1], &format!("{full}.nodes[{i}]"))?);
            }
            Ok(TimeDep::PiecewiseLinear { ts, values: vals })
        }
        Some(v) => Ok(TimeDep::Constant(matrix_of(v, &full)?)),
    }
}

fn parse_market(t: &Table) -> Result<MarketModel, CliError> {
    check_keys(t, "market", &["T", "d", "mu", "sigma", "r", "R"])?;
    let horizon = need_f64(t, "market", "T")?;
    let dim = get_usize(t, "market", "d")?
        .ok_or_else(|| CliError::semantic("market.d", "required key is missing"))?;
    if dim == 0 {
        return Err(CliError::semantic("market.d", "asset count must be >= 1"));
    }
    let mu = parse_time_vector(t, "mu", dim)?;
    let sigma = parse_time_matrix(t, "sigma", dim)?;
    let r = parse_time_scalar(t, "market", "r", Some(0.0))?;
    let has_big_r = t.contains_key("R");
    let big_r = if has_big_r {
        parse_time_scalar(t, "market", "R", None)?
    } else {
        r.clone()
    };
    MarketModel::new(horizon, dim, mu, sigma, r, big_r).map_err(CliError::from)
}

fn parse_constraint(t: &Table, dim: usize) -> Result<ConvexSet, CliError> {
    check_keys(
        t,
        "constraint",
        &[
            "family", "lo", "hi", "center", "radius", "normal", "offset", "members", "witness",
        ],
    )?;
    let family = get_str(t, "constraint", "family")?
        .ok_or_else(|| CliError::semantic("constraint.family", "required key is missing"))?;
    let forbid = |keys: &[&str]| -> Result<(), CliError> {
        for k in keys {
            if t.contains_key(*k) {
                return Err(CliError::semantic(
                    &format!("constraint.{k}"),
                    &format!("not a key of family '{family}'"),
                ));
            }
        }
        Ok(())
    };
    match family {
        "full_space" => {
            forbid(&["lo", "hi", "center", "radius", "normal", "offset", "members", "witness"])?;
            Ok(ConvexSet::full_space(dim))
        }
        "nonneg_orthant" => {
            forbid(&["lo", "hi", "center", "radius", "normal", "offset", "members", "witness"])?;
            Ok(ConvexSet::nonneg_orthant(dim))
        }
        "box" => {
            forbid(&["center", "radius", "normal", "offset", "members", "witness"])?;
            let lo = vector(t, "constraint", "lo", dim)?;
            let hi = vector(t, "constraint", "hi", dim)?;
            ConvexSet::boxed(lo, hi).map_err(CliError::from)
        }
        "ball" => {
            forbid(&["lo", "hi", "normal", "offset", "members", "witness"])?;
            let center = vector(t, "constraint", "center", dim)?;
            let radius = need_f64(t, "constraint", "radius")?;
            ConvexSet::ball(center, radius).map_err(CliError::from)
        }
        "halfspace" => {
            forbid(&["lo", "hi", "center", "radius", "members", "witness"])?;
            let normal = vector(t, "constraint", "normal", dim)?;
            let offset = need_f64(t, "constraint", "offset")?;
            ConvexSet::halfspace(normal, offset).map_err(CliError::from)
        }
        "intersection" => {
            forbid(&["lo", "hi", "center", "radius", "normal", "offset"])?;
            let members_v = t
                .get("members")
                .and_then(|v| v.as_array())
                .ok_or_else(|| CliError::semantic("constraint.members", "expected an array of member tables"))?;
            let mut members = Vec::with_capacity(members_v.len());
            for (i, m) in members_v.iter().enumerate() {
                let mt = as_table(m, &format!("constraint.members[{i}]"))?;
                members.push(parse_constraint(mt, dim)?);
            }
            let witness = vector(t, "constraint", "witness", dim)?;
            ConvexSet::intersection(members, witness).map_err(CliError::from)
        }
        other => Err(CliError::semantic(
            "constraint.family",
            &format!("unknown family '{other}' (supported: full_space, nonneg_orthant, box, ball, halfspace, intersection)"),
        )),
    }
}

fn parse_solver(v: Option<&Value>) -> Result<SolverCfg, CliError> {
    let mut cfg = SolverCfg {
        n_steps: 2048,
        y_max: 4.0,
        quad_order: 96,
        table_nodes: 129,
    };
    if let Some(v) = v {
        let t = as_table(v, "solver")?;
        check_keys(
            t,
            "solver",
            &["n_steps", "y_max", "quad_order", "table_nodes"],
        )?;
        if let Some(n) = get_usize(t, "solver", "n_steps")? {
            if n < 2 {
                return Err(CliError::semantic("solver.n_steps", "must be >= 2"));
            }
            cfg.n_steps = n;
        }
        if let Some(y) = get_f64(t, "solver", "y_max")? {
            if !(y > 0.0) {
                return Err(CliError::semantic("solver.y_max", "must be > 0"));
            }
            cfg.y_max = y;
        }
        if let Some(q) = get_usize(t, "solver", "quad_order")? {
            if q < 8 {
                return Err(CliError::semantic("solver.quad_order", "must be >= 8"));
            }
            cfg.quad_order = q;
        }
        if let Some(n) = get_usize(t, "solver", "table_nodes")? {
            if n < 16 {
                return Err(CliError::semantic("solver.table_nodes", "must be >= 16"));
            }
            cfg.table_nodes = n;
        }
    }
    Ok(cfg)
}

fn parse_verify(v: Option<&Value>, dim: usize, horizon: f64) -> Result<VerifyCfg, CliError> {
    let mut cfg = VerifyCfg {
        grid_t: 5,
        grid_x: 3,
        n_paths: 100_000,
        seed: 42,
        eps_ladder: vec![0.1, 0.05, 0.02],
        t: None,
        x: 1.0,
        alternatives: None,
        scheme: Scheme::ExactLognormal,
        euler_steps: 256,
    };
    if let Some(v) = v {
        let t = as_table(v, "verify")?;
        check_keys(
            t,
            "verify",
            &[
                "grid",
                "n_paths",
                "seed",
                "eps_ladder",
                "t",
                "x",
                "alternatives",
                "scheme",
                "euler_steps",
            ],
        )?;
        if let Some(g) = t.get("grid") {
            let pair = number_array(g, "verify.grid")?;
            if pair.len() != 2 || pair.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
                return Err(CliError::semantic(
                    "verify.grid",
                    "expected [n_t, n_x] positive integers",
                ));
            }
            cfg.grid_t = pair[0] as usize;
            cfg.grid_x = pair[1] as usize;
        }
        if let Some(n) = get_usize(t, "verify", "n_paths")? {
            if n < 1000 {
                return Err(CliError::semantic(
                    "verify.n_paths",
                    "must be >= 1000 for reports",
                ));
            }
            cfg.n_paths = n;
        }
        if let Some(s) = t.get("seed") {
            match s {
                Value::Integer(i) if *i >= 0 => cfg.seed = *i as u64,
                _ => {
                    return Err(CliError::semantic(
                        "verify.seed",
                        "expected a nonnegative integer",
                    ))
                }
            }
        }
        if let Some(e) = t.get("eps_ladder") {
            let ladder = number_array(e, "verify.eps_ladder")?;
            if ladder.is_empty()
                || ladder.windows(2).any(|w| w[1] >= w[0])
                || ladder.iter().any(|&x| x <= 0.0)
            {
                return Err(CliError::semantic(
                    "verify.eps_ladder",
                    "expected strictly decreasing positive epsilons",
                ));
            }
            cfg.eps_ladder = ladder;
        }
        if let Some(tt) = get_f64(t, "verify", "t")? {
            if !(0.0..horizon).contains(&tt) {
                return Err(CliError::semantic("verify.t", "must lie in [0, T)"));
            }
            cfg.t = Some(tt);
        }
        if let Some(x) = get_f64(t, "verify", "x")? {
            if !(x > 0.0) {
                return Err(CliError::semantic("verify.x", "wealth must be > 0"));
            }
            cfg.x = x;
        }
        if let Some(a) = t.get("alternatives") {
            let arr = a.as_array().ok_or_else(|| {
                CliError::semantic("verify.alternatives", "expected an array of weight vectors")
            })?;
            let mut alts = Vec::with_capacity(arr.len());
            for (i, e) in arr.iter().enumerate() {
                let xs = number_array(e, &format!("verify.alternatives[{i}]"))?;
                if xs.len() != dim {
                    return Err(CliError::semantic(
                        &format!("verify.alternatives[{i}]"),
                        &format!("expected {dim} entries"),
                    ));
                }
                alts.push(DVector::from_vec(xs));
            }
            if alts.is_empty() {
                return Err(CliError::semantic(
                    "verify.alternatives",
                    "must not be empty",
                ));
            }
            cfg.alternatives = Some(alts);
        }
        if let Some(s) = get_str(t, "verify", "scheme")? {
            cfg.scheme = match s {
                "exact_lognormal" => Scheme::ExactLognormal,
                "euler_log" => Scheme::EulerLog,
                other => {
                    return Err(CliError::semantic(
                        "verify.scheme",
                        &format!("unknown scheme '{other}' (exact_lognormal, euler_log)"),
                    ))
                }
            };
        }
        if let Some(n) = get_usize(t, "verify", "euler_steps")? {
            if n == 0 {
                return Err(CliError::semantic("verify.euler_steps", "must be >= 1"));
            }
            cfg.euler_steps = n;
        }
    }
    Ok(cfg)
}

fn parse_output(v: Option<&Value>) -> Result<OutputCfg, CliError> {
    let mut cfg = OutputCfg {
        directory: ".".into(),
        emit_plots: false,
    };
    if let Some(v) = v {
        let t = as_table(v, "output")?;
        check_keys(t, "output", &["directory", "emit_plots"])?;
        if let Some(d) = get_str(t, "output", "directory")? {
            cfg.directory = d.to_string();
        }
        if let Some(p) = get_bool(t, "output", "emit_plots")? {
            cfg.emit_plots = p;
        }
    }
    Ok(cfg)
}
