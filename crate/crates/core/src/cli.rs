//! Config-driven experiment runner. A TOML file with four bracketed
//! sections — [potential], [params], [grid], [experiment] — selects a model,
//! numeric parameters, a discretization and one experiment kind; the runner
//! validates everything up front, executes, and writes CSV artifacts
//! atomically (temp file + rename).
//!
//! Experiment kinds:
//!   fe       free-energy profile quadrature → `<out>.csv`
//!   sample   trajectory ensemble + batch-means statistics
//!   fpe      stationary density, spectrum and correction fields on the grid
//!   sweep    δ-sweep table (gap, first-order error, variances) + slope fits
//!   variance grid vs Monte-Carlo asymptotic-variance comparison
//!   rate     density relaxation curve and fitted decay rate vs the gap
//!   gain     escape-time benchmark: accelerated vs plain dynamics

use ndarray::Array1;
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, TamdError};
use crate::estimators::{ergodic_stats, slope_fit, ObservableRegistry};
use crate::fpgrid::{
    build_generators, fit_decay_rate, poisson_solve, propagate, reference_variance,
    spectral_report, stationary_density, GridSpec, Scheme,
};
use crate::freenergy::{fluctuation_field, free_energy_profile, FreeEnergyProfile};
use crate::model::{Domain, Potential, State, TamdParams, TrigPoly, TrigTerm};
use crate::sde::{ensemble, DynamicsRegistry, Dynamics, Observable, RngStream};

pub const SEED_ENV: &str = "TAMD_LAB_SEED";

// ---------------------------------------------------------------------------
// raw config (serde) — unknown keys anywhere are a hard error
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    potential: PotentialSec,
    params: ParamsSec,
    #[serde(default)]
    grid: GridSec,
    experiment: ExperimentSec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialSec {
    kind: String,
    v: Option<Vec<TrigTerm>>,
    w: Option<Vec<TrigTerm>>,
    xi: Option<Vec<TrigTerm>>,
    a: Option<f64>,
    eps: Option<f64>,
    phase: Option<f64>,
    k: Option<f64>,
    d: Option<usize>,
    lq: Option<f64>,
    lz: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsSec {
    beta: f64,
    beta_bar: f64,
    delta: Option<f64>,
    delta_list: Option<Vec<f64>>,
    gamma: Option<f64>,
    mass: Option<f64>,
    dt: Option<f64>,
    n_steps: Option<u64>,
    stride: Option<u64>,
    seed: Option<u64>,
    replicas: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSec {
    n_q: Option<usize>,
    n_z: Option<usize>,
    scheme: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSec {
    kind: String,
    observables: Option<Vec<String>>,
    output: Option<String>,
    dynamics: Option<String>,
    burn_in: Option<f64>,
    n_batches: Option<usize>,
    barrier_list: Option<Vec<f64>>,
    t_final: Option<f64>,
    dt_pde: Option<f64>,
    z_fixed: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// resolved config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Fe,
    Sample,
    Fpe,
    Sweep,
    Variance,
    Rate,
    Gain,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fe" => Ok(Self::Fe),
            "sample" => Ok(Self::Sample),
            "fpe" => Ok(Self::Fpe),
            "sweep" => Ok(Self::Sweep),
            "variance" => Ok(Self::Variance),
            "rate" => Ok(Self::Rate),
            "gain" => Ok(Self::Gain),
            other => Err(TamdError::Config(format!(
                "experiment.kind '{other}' unknown (fe | sample | fpe | sweep | variance | rate | gain)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fe => "fe",
            Self::Sample => "sample",
            Self::Fpe => "fpe",
            Self::Sweep => "sweep",
            Self::Variance => "variance",
            Self::Rate => "rate",
            Self::Gain => "gain",
        }
    }

    fn uses_delta_list(&self) -> bool {
        matches!(self, Self::Sweep)
    }
}

/// Fully validated experiment description with every default resolved.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub potential: Potential,
    pub domain: Domain,
    pub params: TamdParams,
    pub delta_list: Vec<f64>,
    pub replicas: usize,
    pub grid: GridSpec,
    pub kind: ExperimentKind,
    pub observables: Vec<String>,
    pub output: String,
    pub dynamics: String,
    pub burn_in: f64,
    pub n_batches: usize,
    pub barrier_list: Vec<f64>,
    pub t_final: f64,
    pub dt_pde: f64,
    pub z_fixed: Vec<f64>,
    pub seed_overridden: bool,
    pub delta_list_given: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with_seed_env(text, std::env::var(SEED_ENV).ok())
    }

    /// Like [`from_toml_str`](Self::from_toml_str) with the seed-override
    /// environment value passed explicitly (testable without mutating the
    /// process environment).
    pub fn from_toml_str_with_seed_env(text: &str, seed_env: Option<String>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| TamdError::Config(format!("config parse error: {e}")))?;
        Self::resolve(raw, seed_env)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TamdError::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    fn resolve(raw: RawConfig, seed_env: Option<String>) -> Result<Self> {
        let domain = Domain::new(
            raw.potential.d.unwrap_or(1),
            raw.potential.lq.unwrap_or(1.0),
            raw.potential.lz.unwrap_or(1.0),
        )?;
        let potential = build_potential(&raw.potential)?;

        let kind = ExperimentKind::parse(&raw.experiment.kind)?;

        let delta_list_given = raw.params.delta_list.is_some();
        let delta_list = match (&raw.params.delta, &raw.params.delta_list) {
            (_, Some(list)) if kind.uses_delta_list() => {
                if list.len() < 2 {
                    return Err(TamdError::Config(
                        "params.delta_list needs at least 2 entries for a sweep".into(),
                    ));
                }
                list.clone()
            }
            (Some(d), _) => vec![*d],
            (None, Some(list)) => list.clone(),
            (None, None) => {
                return Err(TamdError::Config(
                    "params: one of delta or delta_list is required".into(),
                ))
            }
        };
        if kind.uses_delta_list() && !delta_list_given {
            return Err(TamdError::Config("experiment kind 'sweep' requires params.delta_list".into()));
        }

        let mut params = TamdParams {
            beta: raw.params.beta,
            beta_bar: raw.params.beta_bar,
            delta: delta_list[0],
            gamma: raw.params.gamma.unwrap_or(1.0),
            mass: raw.params.mass.unwrap_or(1.0),
            dt: raw.params.dt.unwrap_or(1e-3),
            n_steps: raw.params.n_steps.unwrap_or(100_000),
            stride: raw.params.stride.unwrap_or(10),
            seed: raw.params.seed.unwrap_or(0),
        };
        params.validate()?;
        for &d in &delta_list {
            if !(d > 0.0 && d <= 1.0) {
                return Err(TamdError::Config(format!(
                    "params.delta_list entry {d} outside (0, 1]"
                )));
            }
        }

        let mut seed_overridden = false;
        if let Some(s) = seed_env {
            let v: u64 = s.parse().map_err(|_| {
                TamdError::Config(format!("{SEED_ENV} must be an unsigned integer, got '{s}'"))
            })?;
            params.seed = v;
            seed_overridden = true;
        }

        let scheme: Scheme = raw.grid.scheme.as_deref().unwrap_or("spectral").parse()?;
        let grid = GridSpec::new(raw.grid.n_q.unwrap_or(64), raw.grid.n_z.unwrap_or(64), scheme)?;

        let observables = raw
            .experiment
            .observables
            .unwrap_or_else(|| vec!["cos_z".to_string()]);
        for name in &observables {
            // fail fast on typos before any computation
            ObservableRegistry::build(name, &potential, &domain)?;
        }

        let dynamics = raw.experiment.dynamics.unwrap_or_else(|| "overdamped".to_string());
        if !DynamicsRegistry::KINDS.contains(&dynamics.as_str()) {
            return Err(TamdError::Config(format!(
                "experiment.dynamics '{dynamics}' unknown (expected one of {:?})",
                DynamicsRegistry::KINDS
            )));
        }

        let burn_in = raw.experiment.burn_in.unwrap_or(0.1);
        if !(0.0..1.0).contains(&burn_in) {
            return Err(TamdError::Config(format!(
                "experiment.burn_in {burn_in} must lie in [0, 1)"
            )));
        }
        let n_batches = raw.experiment.n_batches.unwrap_or(32);
        let replicas = raw.params.replicas.unwrap_or(1);
        if replicas == 0 {
            return Err(TamdError::Config("params.replicas must be >= 1".into()));
        }
        let barrier_list = raw.experiment.barrier_list.unwrap_or_else(|| vec![1.0, 2.0, 3.0]);
        if kind == ExperimentKind::Gain && barrier_list.iter().any(|&b| b <= 0.0) {
            return Err(TamdError::Config("experiment.barrier_list entries must be > 0".into()));
        }
        let t_final = raw.experiment.t_final.unwrap_or(0.5);
        let dt_pde = raw.experiment.dt_pde.unwrap_or(1e-3);
        if t_final <= 0.0 || dt_pde <= 0.0 || dt_pde >= t_final {
            return Err(TamdError::Config(format!(
                "experiment: need 0 < dt_pde ({dt_pde}) < t_final ({t_final})"
            )));
        }
        let z_fixed = raw.experiment.z_fixed.unwrap_or_else(|| vec![0.1, 0.3, 0.7]);

        let output = raw.experiment.output.unwrap_or_else(|| kind.name().to_string());

        Ok(ExperimentConfig {
            potential,
            domain,
            params,
            delta_list,
            replicas,
            grid,
            kind,
            observables,
            output,
            dynamics,
            burn_in,
            n_batches,
            barrier_list,
            t_final,
            dt_pde,
            z_fixed,
            seed_overridden,
            delta_list_given,
        })
    }
}

fn trig_poly(terms: &Option<Vec<TrigTerm>>) -> TrigPoly {
    TrigPoly::new(terms.clone().unwrap_or_default())
}

fn build_potential(sec: &PotentialSec) -> Result<Potential> {
    match sec.kind.as_str() {
        "separable" => Ok(Potential::Separable { v: trig_poly(&sec.v), w: trig_poly(&sec.w) }),
        "tilted_coupling" => Ok(Potential::TiltedCoupling {
            a: sec.a.unwrap_or(1.0),
            eps: sec.eps.unwrap_or(0.5),
            phase: sec.phase.unwrap_or(0.0),
        }),
        "collective_variable" => {
            let k = sec.k.ok_or_else(|| {
                TamdError::Config("potential: collective_variable requires key 'k'".into())
            })?;
            Ok(Potential::CollectiveVariable { v: trig_poly(&sec.v), k, xi: trig_poly(&sec.xi) })
        }
        other => Err(TamdError::Config(format!(
            "potential.kind '{other}' unknown (separable | tilted_coupling | collective_variable)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    pub include_q: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { output_dir: PathBuf::from("."), include_q: false }
    }
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn out_path(opts: &RunOptions, cfg: &ExperimentConfig, suffix: &str) -> PathBuf {
    let name = if suffix.is_empty() {
        format!("{}.csv", cfg.output)
    } else {
        format!("{}_{suffix}.csv", cfg.output)
    };
    opts.output_dir.join(name)
}

/// Human-readable plan; performs no computation.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", cfg.kind.name());
    let _ = writeln!(
        s,
        "potential: {:?} on d={} torus (Lq={}, Lz={})",
        potential_label(&cfg.potential),
        cfg.domain.d,
        cfg.domain.lq,
        cfg.domain.lz
    );
    let _ = writeln!(
        s,
        "params: beta={} beta_bar={} delta={} gamma={} mass={} dt={} n_steps={} stride={} seed={}{}",
        cfg.params.beta,
        cfg.params.beta_bar,
        cfg.params.delta,
        cfg.params.gamma,
        cfg.params.mass,
        cfg.params.dt,
        cfg.params.n_steps,
        cfg.params.stride,
        cfg.params.seed,
        if cfg.seed_overridden { format!(" (overridden by {SEED_ENV})") } else { String::new() }
    );
    let _ = writeln!(s, "replicas: {}", cfg.replicas);
    if cfg.delta_list.len() > 1 {
        let _ = writeln!(s, "delta_list: {:?}", cfg.delta_list);
    }
    if cfg.delta_list_given && !cfg.kind.uses_delta_list() {
        let _ = writeln!(
            s,
            "warning: params.delta_list is unused by experiment kind '{}' (only delta={} applies)",
            cfg.kind.name(),
            cfg.params.delta
        );
    }
    let _ = writeln!(
        s,
        "grid: {}x{} ({:?}); dense dimension {}",
        cfg.grid.n_q,
        cfg.grid.n_z,
        cfg.grid.scheme,
        cfg.grid.n_q * cfg.grid.n_z
    );
    let _ = writeln!(s, "solver tolerances: stationary residual 1e-9, normalization 1e-12, correction cross-check 1e-8");
    let _ = writeln!(s, "observables: {}", cfg.observables.join(", "));
    let _ = writeln!(s, "dynamics: {}", cfg.dynamics);
    match cfg.kind {
        ExperimentKind::Fe => {
            let _ = writeln!(s, "outputs: {}.csv with columns z,A,A1,A2,Z", cfg.output);
        }
        ExperimentKind::Sample => {
            let _ = writeln!(
                s,
                "outputs: {}_trajectory_<k>.csv (t,z[,q...][,obs_*]), {}_stats.csv (observable,mean,se,batch_variance,iat,n_effective)",
                cfg.output, cfg.output
            );
        }
        ExperimentKind::Fpe => {
            let _ = writeln!(
                s,
                "outputs: {p}_stationary.csv, {p}_spectrum.csv, {p}_corrections.csv, {p}_report.csv",
                p = cfg.output
            );
        }
        ExperimentKind::Sweep => {
            let _ = writeln!(
                s,
                "outputs: {}.csv (delta,gap,lambda_ref,h_err,var_delta,var_ref) + slope-fit trailer",
                cfg.output
            );
        }
        ExperimentKind::Variance => {
            let _ = writeln!(
                s,
                "outputs: {}.csv (observable,mean_grid,mean_mc,se_mc,var_grid,var_ref,var_mc)",
                cfg.output
            );
        }
        ExperimentKind::Rate => {
            let _ = writeln!(s, "outputs: {}.csv (t,distance) + fitted-rate trailer", cfg.output);
        }
        ExperimentKind::Gain => {
            let _ = writeln!(
                s,
                "outputs: {}.csv (barrier,escape_plain,escape_tamd,ratio,n_escaped_plain,n_escaped_tamd)",
                cfg.output
            );
        }
    }
    s
}

fn potential_label(p: &Potential) -> &'static str {
    match p {
        Potential::Separable { .. } => "separable",
        Potential::TiltedCoupling { .. } => "tilted_coupling",
        Potential::CollectiveVariable { .. } => "collective_variable",
    }
}

/// Executes the configured experiment and writes its CSV artifacts.
/// Returns the list of files written.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    match cfg.kind {
        ExperimentKind::Fe => run_fe(cfg, opts),
        ExperimentKind::Sample => run_sample(cfg, opts),
        ExperimentKind::Fpe => run_fpe(cfg, opts),
        ExperimentKind::Sweep => run_sweep(cfg, opts),
        ExperimentKind::Variance => run_variance(cfg, opts),
        ExperimentKind::Rate => run_rate(cfg, opts),
        ExperimentKind::Gain => run_gain(cfg, opts),
    }
}

fn profile_for(cfg: &ExperimentConfig) -> Result<FreeEnergyProfile> {
    free_energy_profile(
        &cfg.potential,
        &cfg.domain,
        cfg.params.beta,
        cfg.params.beta_bar,
        cfg.grid.n_q,
        cfg.grid.n_z,
    )
}

fn run_fe(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let profile = profile_for(cfg)?;
    let path = out_path(opts, cfg, "");
    write_atomic(&path, &profile.to_csv())?;
    Ok(vec![path])
}

fn initial_states(cfg: &ExperimentConfig, inertial: bool) -> Vec<State> {
    (0..cfg.replicas)
        .map(|k| {
            let frac = k as f64 / cfg.replicas.max(1) as f64;
            let q = vec![cfg.domain.lq * (0.13 + 0.61 * frac) % cfg.domain.lq; cfg.domain.d];
            let z = cfg.domain.lz * (0.29 + 0.37 * frac) % cfg.domain.lz;
            if inertial {
                State::inertial(q, vec![0.0; cfg.domain.d], z)
            } else {
                State::overdamped(q, z)
            }
        })
        .collect()
}

fn build_observables(cfg: &ExperimentConfig) -> Result<Vec<Observable>> {
    cfg.observables
        .iter()
        .map(|n| ObservableRegistry::build(n, &cfg.potential, &cfg.domain))
        .collect()
}

fn run_sample(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let profile =
        if cfg.dynamics == "limiting" { Some(profile_for(cfg)?) } else { None };
    let dynamics = DynamicsRegistry::build(
        &cfg.dynamics,
        &cfg.potential,
        &cfg.domain,
        &cfg.params,
        profile.as_ref(),
    )?;
    let observables = build_observables(cfg)?;
    let inits = initial_states(cfg, cfg.dynamics == "inertial");
    let trajs = ensemble(&inits, dynamics.as_ref(), &cfg.params, &observables)?;

    let mut written = Vec::new();
    let mut stats_csv = String::from("observable,mean,se,batch_variance,iat,n_effective\n");
    for (k, traj) in trajs.iter().enumerate() {
        let path = out_path(opts, cfg, &format!("trajectory_{k}"));
        write_atomic(&path, &traj.to_csv(opts.include_q))?;
        written.push(path);
        let stats = ergodic_stats(traj, cfg.burn_in, cfg.n_batches, None)?;
        // one block of rows per replica, same schema
        for line in stats.to_csv().lines().skip(1) {
            stats_csv.push_str(line);
            stats_csv.push('\n');
        }
    }
    let spath = out_path(opts, cfg, "stats");
    write_atomic(&spath, &stats_csv)?;
    written.push(spath);
    Ok(written)
}

fn run_fpe(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let profile = profile_for(cfg)?;
    let gens = build_generators(&cfg.potential, &cfg.domain, &profile, &cfg.params, cfg.grid)?;
    let stat = stationary_density(&gens.ldelta, &gens.grid)?;
    let report = spectral_report(&gens.ldelta, &gens.a_op, cfg.params.beta_bar)?;
    let field = fluctuation_field(&cfg.potential, &cfg.domain, &profile, cfg.grid.n_q)?;
    let corrections = gens.correction_fields(&field)?;

    let mut written = Vec::new();

    let mut s = String::from("q,z,weight,h_delta\n");
    for iz in 0..cfg.grid.n_z {
        for iq in 0..cfg.grid.n_q {
            let k = gens.grid.idx(iq, iz);
            let _ = writeln!(
                s,
                "{:.12e},{:.12e},{:.12e},{:.12e}",
                gens.grid.q_nodes[iq], gens.grid.z_nodes[iz], gens.grid.weights[k], stat.h_delta[k]
            );
        }
    }
    let p = out_path(opts, cfg, "stationary");
    write_atomic(&p, &s)?;
    written.push(p);

    let mut s = String::from("index,re,im\n");
    let mut eigs = report.eigenvalues.clone();
    eigs.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
    for (i, v) in eigs.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.12e},{:.12e}", v.re, v.im);
    }
    let p = out_path(opts, cfg, "spectrum");
    write_atomic(&p, &s)?;
    written.push(p);

    let mut s = String::from("q,z,h_frak,h_tilde\n");
    for iz in 0..cfg.grid.n_z {
        for iq in 0..cfg.grid.n_q {
            let k = gens.grid.idx(iq, iz);
            let _ = writeln!(
                s,
                "{:.12e},{:.12e},{:.12e},{:.12e}",
                gens.grid.q_nodes[iq],
                gens.grid.z_nodes[iz],
                corrections.h_frak[k],
                corrections.h_tilde[k]
            );
        }
    }
    let p = out_path(opts, cfg, "corrections");
    write_atomic(&p, &s)?;
    written.push(p);

    let mut s = String::from("gap,lambda_ref,r2_marginal,zero_multiplicity,stationary_residual,construction_gap\n");
    let _ = writeln!(
        s,
        "{:.12e},{:.12e},{:.12e},{},{:.3e},{:.3e}",
        report.gap,
        report.lambda_ref,
        report.r2_marginal,
        report.zero_multiplicity,
        stat.residual_norm,
        corrections.construction_gap
    );
    let p = out_path(opts, cfg, "report");
    write_atomic(&p, &s)?;
    written.push(p);

    Ok(written)
}

fn run_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let profile = profile_for(cfg)?;
    let gens = build_generators(&cfg.potential, &cfg.domain, &profile, &cfg.params, cfg.grid)?;
    let field = fluctuation_field(&cfg.potential, &cfg.domain, &profile, cfg.grid.n_q)?;
    let corrections = gens.correction_fields(&field)?;
    let phi = ObservableRegistry::on_grid(&cfg.observables[0], &cfg.potential, &gens.grid)?;
    let var_ref = reference_variance(&gens.a_op, &phi, &gens.grid)?;

    let mut deltas = cfg.delta_list.clone();
    deltas.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut rows = String::from("delta,gap,lambda_ref,h_err,var_delta,var_ref\n");
    let mut h_errs = Vec::new();
    let mut var_gaps = Vec::new();
    for &delta in &deltas {
        let ld = gens.ldelta_for(delta);
        let stat = stationary_density(&ld, &gens.grid)?;
        let report = spectral_report(&ld, &gens.a_op, cfg.params.beta_bar)?;
        let first_order =
            Array1::<f64>::ones(gens.grid.n()) + &corrections.h_frak.mapv(|v| delta * v);
        let h_err = gens.grid.norm_w(&(&stat.h_delta - &first_order));
        let (_bp, var_delta) = poisson_solve(&ld, &stat.h_delta, &phi, &gens.grid)?;
        let _ = writeln!(
            rows,
            "{delta:.6e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            report.gap, report.lambda_ref, h_err, var_delta, var_ref
        );
        h_errs.push(h_err);
        var_gaps.push((var_delta - var_ref).abs());
    }

    if deltas.len() >= 3 {
        if let Ok((slope, r2)) = slope_fit(&deltas, &h_errs) {
            let _ = writeln!(rows, "# slope_h_err = {slope:.4} (r2 = {r2:.5})");
        }
        if var_gaps.iter().all(|&v| v > 0.0) {
            if let Ok((slope, r2)) = slope_fit(&deltas, &var_gaps) {
                let _ = writeln!(rows, "# slope_var_gap = {slope:.4} (r2 = {r2:.5})");
            }
        }
    }
    let p = out_path(opts, cfg, "");
    write_atomic(&p, &rows)?;
    Ok(vec![p])
}

fn run_variance(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let profile = profile_for(cfg)?;
    let gens = build_generators(&cfg.potential, &cfg.domain, &profile, &cfg.params, cfg.grid)?;
    let stat = stationary_density(&gens.ldelta, &gens.grid)?;

    let dynamics = DynamicsRegistry::build(
        &cfg.dynamics,
        &cfg.potential,
        &cfg.domain,
        &cfg.params,
        Some(&profile),
    )?;
    let observables = build_observables(cfg)?;
    let inits = initial_states(cfg, cfg.dynamics == "inertial");
    let trajs = ensemble(&inits, dynamics.as_ref(), &cfg.params, &observables)?;
    let stats = ergodic_stats(&trajs[0], cfg.burn_in, cfg.n_batches, None)?;

    let mut rows = String::from("observable,mean_grid,mean_mc,se_mc,var_grid,var_ref,var_mc\n");
    for name in &cfg.observables {
        let phi = ObservableRegistry::on_grid(name, &cfg.potential, &gens.grid)?;
        let mean_grid: f64 = phi
            .iter()
            .zip(stat.h_delta.iter())
            .zip(gens.grid.weights.iter())
            .map(|((p, h), w)| p * h * w)
            .sum();
        let (_bp, var_grid) = poisson_solve(&gens.ldelta, &stat.h_delta, &phi, &gens.grid)?;
        let var_ref = reference_variance(&gens.a_op, &phi, &gens.grid)?;
        let o = stats
            .get(name)
            .ok_or_else(|| TamdError::Solver(format!("observable '{name}' missing from stats")))?;
        let _ = writeln!(
            rows,
            "{name},{mean_grid:.12e},{:.12e},{:.12e},{var_grid:.12e},{var_ref:.12e},{:.12e}",
            o.mean, o.se, o.batch_variance
        );
    }
    let p = out_path(opts, cfg, "");
    write_atomic(&p, &rows)?;
    Ok(vec![p])
}

fn run_rate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let profile = profile_for(cfg)?;
    let gens = build_generators(&cfg.potential, &cfg.domain, &profile, &cfg.params, cfg.grid)?;
    let report = spectral_report(&gens.ldelta, &gens.a_op, cfg.params.beta_bar)?;

    // z-only perturbation of the stationary density, weighted mean 1
    let pert = gens.grid.eval_on_nodes(|_q, z| {
        (std::f64::consts::TAU * z / cfg.domain.lz).cos()
    });
    let m = gens.grid.mean_w(&pert);
    let f0 = Array1::ones(gens.grid.n()) + &pert.mapv(|v| 0.1 * v)
        - &Array1::from_elem(gens.grid.n(), 0.1 * m);
    let series = propagate(&gens.ldelta, &gens.grid, &f0, cfg.t_final, cfg.dt_pde)?;
    let rate = fit_decay_rate(&series, 0.5)?;

    let mut rows = String::from("t,distance\n");
    for &(t, d) in &series {
        let _ = writeln!(rows, "{t:.9e},{d:.12e}");
    }
    let _ = writeln!(rows, "# fitted_rate = {rate:.6}");
    let _ = writeln!(rows, "# gap = {:.6}", report.gap);
    let _ = writeln!(rows, "# lambda_ref = {:.6}", report.lambda_ref);
    let p = out_path(opts, cfg, "");
    write_atomic(&p, &rows)?;
    Ok(vec![p])
}

/// Mean first-passage time from the well at z = 0 to the well at z = Lz/2
/// for the double-well z-potential W(z) = −(E/2)cos(4πz/Lz); one trajectory
/// per replica, capped at n_steps.
fn escape_times(
    dynamics: &dyn Dynamics,
    cfg: &ExperimentConfig,
    stream_offset: u64,
) -> Result<(f64, usize)> {
    use rayon::prelude::*;
    let lz = cfg.domain.lz;
    let target = 0.5 * lz;
    let tol = 0.05 * lz;
    let results: Vec<Result<Option<f64>>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::new(cfg.params.seed, stream_offset + k as u64);
            let mut state = State::overdamped(vec![0.0; cfg.domain.d], 0.0);
            for step in 0..cfg.params.n_steps {
                state = dynamics.step(&state, &mut rng)?;
                let dist = {
                    let d = (state.z - target).abs() % lz;
                    d.min(lz - d)
                };
                if dist < tol {
                    return Ok(Some((step + 1) as f64 * cfg.params.dt));
                }
            }
            Ok(None)
        })
        .collect();
    let mut times = Vec::new();
    for r in results {
        if let Some(t) = r? {
            times.push(t);
        }
    }
    if times.is_empty() {
        // censored mean: every replica hit the cap
        return Ok((cfg.params.n_steps as f64 * cfg.params.dt, 0));
    }
    let n_esc = times.len();
    // censored replicas contribute the cap as a lower bound
    let cap = cfg.params.n_steps as f64 * cfg.params.dt;
    let total: f64 =
        times.iter().sum::<f64>() + (cfg.replicas - n_esc) as f64 * cap;
    Ok((total / cfg.replicas as f64, n_esc))
}

fn run_gain(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let v = match &cfg.potential {
        Potential::Separable { v, .. } => v.clone(),
        _ => {
            return Err(TamdError::Config(
                "experiment 'gain' requires potential.kind = separable (its w is replaced by the swept double-well)"
                    .into(),
            ))
        }
    };
    let mut rows =
        String::from("barrier,escape_plain,escape_tamd,ratio,n_escaped_plain,n_escaped_tamd\n");
    let mut prev_ratio = 0.0;
    let mut monotone = true;
    for (i, &barrier) in cfg.barrier_list.iter().enumerate() {
        let pot = Potential::Separable {
            v: v.clone(),
            w: TrigPoly::new(vec![TrigTerm { freq: 2, cos_amp: -0.5 * barrier, sin_amp: 0.0 }]),
        };
        let plain = DynamicsRegistry::build("plain", &pot, &cfg.domain, &cfg.params, None)?;
        let tamd = DynamicsRegistry::build("overdamped", &pot, &cfg.domain, &cfg.params, None)?;
        let (t_plain, n_plain) = escape_times(plain.as_ref(), cfg, 1000 * i as u64)?;
        let (t_tamd, n_tamd) = escape_times(tamd.as_ref(), cfg, 1000 * i as u64 + 500_000)?;
        let ratio = t_plain / t_tamd.max(1e-300);
        if ratio < prev_ratio {
            monotone = false;
        }
        prev_ratio = ratio;
        let _ = writeln!(
            rows,
            "{barrier:.6e},{t_plain:.6e},{t_tamd:.6e},{ratio:.6e},{n_plain},{n_tamd}"
        );
    }
    let _ = writeln!(rows, "# ratio_monotone_increasing = {monotone}");
    let p = out_path(opts, cfg, "");
    write_atomic(&p, &rows)?;
    Ok(vec![p])
}

// ---------------------------------------------------------------------------
// argument parsing (used by the binary)
// ---------------------------------------------------------------------------

#[derive(Debug, clap::Parser)]
#[command(
    name = "tamdlab",
    about = "Config-driven numerical laboratory for temperature-accelerated sampling dynamics"
)]
pub struct CliArgs {
    /// Path to the TOML experiment configuration.
    pub config: PathBuf,
    /// Directory for CSV artifacts (created if missing).
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
    /// Validate and print the execution plan without computing anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Size of the worker thread pool (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Include q columns in trajectory CSVs.
    #[arg(long)]
    pub include_q: bool,
}

/// Entry point shared by the binary and the integration tests.
pub fn main_with(args: CliArgs) -> Result<Vec<PathBuf>> {
    if let Some(n) = args.threads {
        // ignore the error if a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = ExperimentConfig::from_file(&args.config)?;
    if args.dry_run {
        print!("{}", describe(&cfg));
        return Ok(Vec::new());
    }
    let opts = RunOptions { output_dir: args.output_dir, include_q: args.include_q };
    let written = run(&cfg, &opts)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[potential]
kind = "tilted_coupling"
a = 1.0
eps = 0.5

[params]
beta = 4.0
beta_bar = 1.0
delta = 0.1

[experiment]
kind = "fe"
"#;

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Fe);
        assert_eq!(cfg.grid.n_q, 64);
        assert_eq!(cfg.grid.n_z, 64);
        assert_eq!(cfg.params.dt, 1e-3);
        assert_eq!(cfg.params.stride, 10);
        assert_eq!(cfg.replicas, 1);
        assert_eq!(cfg.observables, vec!["cos_z".to_string()]);
        assert_eq!(cfg.output, "fe");
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_the_key() {
        let text = BASE.replace("beta = 4.0", "betta = 4.0\nbeta = 4.0");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("betta"), "message should cite the key: {msg}");
        assert!(matches!(err, TamdError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sweep_requires_delta_list() {
        let text = BASE.replace("kind = \"fe\"", "kind = \"sweep\"");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("delta_list"));
    }

    #[test]
    fn missing_delta_rejected() {
        let text = BASE.replace("delta = 0.1\n", "");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("delta"));
    }

    #[test]
    fn bad_observable_rejected_before_running() {
        let text = BASE.replace(
            "kind = \"fe\"",
            "kind = \"sample\"\nobservables = [\"cos_z\", \"entropy\"]",
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("entropy"));
    }

    #[test]
    fn bad_scheme_and_odd_spectral_grid_rejected() {
        let text = format!("{BASE}\n[grid]\nscheme = \"upwind\"\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("{BASE}\n[grid]\nn_q = 15\nn_z = 16\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn describe_warns_on_unused_delta_list() {
        let text = BASE.replace("delta = 0.1", "delta = 0.1\ndelta_list = [0.2, 0.1]");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let plan = describe(&cfg);
        assert!(plan.contains("warning"), "{plan}");
        assert!(plan.contains("unused"), "{plan}");
    }

    #[test]
    fn describe_echoes_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let plan = describe(&cfg);
        for needle in ["gamma=1", "mass=1", "dt=0.001", "n_steps=100000", "stride=10", "64x64"] {
            assert!(plan.contains(needle), "plan missing '{needle}':\n{plan}");
        }
    }

    #[test]
    fn separable_potential_from_terms() {
        let text = r#"
[potential]
kind = "separable"
v = [{ freq = 1, cos_amp = 1.0, sin_amp = 0.0 }]
w = [{ freq = 1, cos_amp = 1.0, sin_amp = 0.0 }]

[params]
beta = 1.0
beta_bar = 1.0
delta = 1.0

[experiment]
kind = "fe"
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        match &cfg.potential {
            Potential::Separable { v, w } => {
                assert_eq!(v.terms.len(), 1);
                assert_eq!(w.terms.len(), 1);
            }
            _ => panic!("wrong potential kind"),
        }
    }

    #[test]
    fn gain_rejects_non_separable_potential() {
        let text = BASE.replace("kind = \"fe\"", "kind = \"gain\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = run(&cfg, &RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("separable"));
    }
}
