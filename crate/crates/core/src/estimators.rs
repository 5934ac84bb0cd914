//! Monte-Carlo statistics over trajectories: ergodic averages with
//! batch-means error bars, integrated autocorrelation times, histogram
//! densities compared against grid targets, and log-log slope fits. All of
//! it is pure post-processing over immutable trajectories.

use ndarray::Array1;
use std::sync::Arc;

use crate::error::{Result, TamdError};
use crate::fpgrid::Grid;
use crate::model::{wrap_periodic, Domain, Potential, State, TamdParams};
use crate::sde::{simulate, FrozenZ, Observable, Trajectory};

/// Batch-means summary for one observable series.
#[derive(Debug, Clone)]
pub struct ObservableStats {
    pub name: String,
    pub mean: f64,
    /// standard error of the mean from the batch means
    pub se: f64,
    /// estimate of σ²_φ = lim T·Var(time average), in time units
    pub batch_variance: f64,
    /// integrated autocorrelation time in units of recorded samples,
    /// floored at 0.5 (the iid value)
    pub iat: f64,
    pub n_effective: f64,
}

/// Statistics for a whole trajectory: one entry per recorded observable
/// plus z itself, and optional occupation histograms on a grid.
#[derive(Debug, Clone)]
pub struct TrajectoryStats {
    pub per_observable: Vec<ObservableStats>,
    pub n_samples: usize,
    pub n_kept: usize,
    pub dt_sample: f64,
    pub histogram_z: Vec<u64>,
    pub histogram_qz: Vec<u64>,
}

impl TrajectoryStats {
    pub fn get(&self, name: &str) -> Option<&ObservableStats> {
        self.per_observable.iter().find(|o| o.name == name)
    }

    /// CSV export: one row per observable.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("observable,mean,se,batch_variance,iat,n_effective\n");
        for o in &self.per_observable {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{:.6},{:.3}\n",
                o.name, o.mean, o.se, o.batch_variance, o.iat, o.n_effective
            ));
        }
        out
    }
}

/// Batch-means analysis of a scalar series sampled every `dt_sample` time
/// units. The series is split into `n_batches` equal blocks (trailing
/// remainder dropped); σ² is (block length in time)·Var(block means).
pub fn series_stats(
    name: &str,
    series: &[f64],
    dt_sample: f64,
    n_batches: usize,
) -> Result<ObservableStats> {
    let n = series.len();
    if n_batches < 10 || n_batches > n / 10 {
        return Err(TamdError::Config(format!(
            "n_batches = {n_batches} must lie in [10, {}] for {n} samples",
            n / 10
        )));
    }
    let m = n / n_batches;
    let used = m * n_batches;
    let mean = series[..used].iter().sum::<f64>() / used as f64;
    let marginal_var =
        series[..used].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / used as f64;

    let mut batch_means = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let s: f64 = series[b * m..(b + 1) * m].iter().sum();
        batch_means.push(s / m as f64);
    }
    let bm_mean = batch_means.iter().sum::<f64>() / n_batches as f64;
    let bm_var = batch_means.iter().map(|v| (v - bm_mean).powi(2)).sum::<f64>()
        / (n_batches as f64 - 1.0);

    let batch_variance = (m as f64 * dt_sample * bm_var).max(0.0);
    let iat = if marginal_var > 0.0 {
        (m as f64 * bm_var / (2.0 * marginal_var)).max(0.5)
    } else {
        0.5
    };
    let n_effective = used as f64 / (2.0 * iat);
    let se = (bm_var / n_batches as f64).sqrt();
    Ok(ObservableStats { name: name.to_string(), mean, se, batch_variance, iat, n_effective })
}

/// Histogram binning data: node-centered cells of a periodic tensor grid.
#[derive(Debug, Clone, Copy)]
pub struct HistogramSpec {
    pub n_q: usize,
    pub n_z: usize,
    pub lq: f64,
    pub lz: f64,
}

impl HistogramSpec {
    pub fn from_grid(grid: &Grid) -> Self {
        HistogramSpec {
            n_q: grid.spec.n_q,
            n_z: grid.spec.n_z,
            lq: grid.domain.lq,
            lz: grid.domain.lz,
        }
    }

    fn bin(&self, x: f64, n: usize, len: f64) -> usize {
        let h = len / n as f64;
        // node j owns the cell [j·h − h/2, j·h + h/2), periodically
        let j = ((wrap_periodic(x, len) / h).round() as usize) % n;
        j
    }
}

/// Ergodic averages, batch-means error bars and occupation histograms.
///
/// Discards the first `burn_in` fraction of samples, then analyses z and
/// every recorded observable.
pub fn ergodic_stats(
    traj: &Trajectory,
    burn_in: f64,
    n_batches: usize,
    hist: Option<HistogramSpec>,
) -> Result<TrajectoryStats> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(TamdError::Config(format!("burn_in fraction {burn_in} must be in [0, 1)")));
    }
    let n = traj.len();
    let skip = (n as f64 * burn_in).floor() as usize;
    let kept = n - skip;
    if kept < 100 {
        return Err(TamdError::Config(format!(
            "too few samples after burn-in: {kept} (need >= 100)"
        )));
    }

    let mut per_observable = Vec::new();
    let zs = traj.z_samples();
    per_observable.push(series_stats("z", &zs[skip..], traj.dt_sample, n_batches)?);
    for name in &traj.observable_names {
        let series = traj.series(name).expect("recorded observable");
        per_observable.push(series_stats(name, &series[skip..], traj.dt_sample, n_batches)?);
    }

    let (histogram_z, histogram_qz) = match hist {
        None => (Vec::new(), Vec::new()),
        Some(spec) => {
            let mut hz = vec![0u64; spec.n_z];
            let mut hqz = vec![0u64; spec.n_q * spec.n_z];
            for state in &traj.states[skip..] {
                let iz = spec.bin(state.z, spec.n_z, spec.lz);
                hz[iz] += 1;
                if state.q.len() == 1 {
                    let iq = spec.bin(state.q[0], spec.n_q, spec.lq);
                    hqz[iz * spec.n_q + iq] += 1;
                }
            }
            (hz, hqz)
        }
    };

    Ok(TrajectoryStats {
        per_observable,
        n_samples: n,
        n_kept: kept,
        dt_sample: traj.dt_sample,
        histogram_z,
        histogram_qz,
    })
}

/// Named observables resolvable from config files.
///
/// Supported: `cos_q`, `cos_z`, `sin_z`, `z_moment(k)`, `dz_u`,
/// `mixed(c1,c2)` = c1·cos_q + c2·cos_z. Angles are always scaled to the
/// fundamental period, so every observable is exactly periodic.
pub struct ObservableRegistry;

impl ObservableRegistry {
    pub const NAMES: [&'static str; 6] =
        ["cos_q", "cos_z", "sin_z", "z_moment(k)", "dz_u", "mixed(c1,c2)"];

    pub fn build(name: &str, pot: &Potential, domain: &Domain) -> Result<Observable> {
        let lq = domain.lq;
        let lz = domain.lz;
        let two_pi = std::f64::consts::TAU;
        match name {
            "cos_q" => Ok(Observable::new(name, move |s: &State| {
                s.q.iter().map(|&q| (two_pi * q / lq).cos()).sum::<f64>() / s.q.len().max(1) as f64
            })),
            "cos_z" => Ok(Observable::new(name, move |s: &State| (two_pi * s.z / lz).cos())),
            "sin_z" => Ok(Observable::new(name, move |s: &State| (two_pi * s.z / lz).sin())),
            "dz_u" => {
                let pot = pot.clone();
                let dom = *domain;
                Ok(Observable::new(name, move |s: &State| pot.derivatives(&dom, &s.q, s.z).dz))
            }
            _ => {
                if let Some(arg) = name.strip_prefix("z_moment(").and_then(|r| r.strip_suffix(')'))
                {
                    let k: u32 = arg.trim().parse().map_err(|_| {
                        TamdError::Config(format!("bad moment order in observable '{name}'"))
                    })?;
                    let lz = domain.lz;
                    return Ok(Observable::new(name, move |s: &State| {
                        wrap_periodic(s.z, lz).powi(k as i32)
                    }));
                }
                if let Some(arg) = name.strip_prefix("mixed(").and_then(|r| r.strip_suffix(')')) {
                    let parts: Vec<&str> = arg.split(',').collect();
                    if parts.len() != 2 {
                        return Err(TamdError::Config(format!(
                            "observable '{name}' needs exactly two coefficients"
                        )));
                    }
                    let c1: f64 = parts[0].trim().parse().map_err(|_| {
                        TamdError::Config(format!("bad coefficient in observable '{name}'"))
                    })?;
                    let c2: f64 = parts[1].trim().parse().map_err(|_| {
                        TamdError::Config(format!("bad coefficient in observable '{name}'"))
                    })?;
                    return Ok(Observable::new(name, move |s: &State| {
                        let cq = s.q.iter().map(|&q| (two_pi * q / lq).cos()).sum::<f64>()
                            / s.q.len().max(1) as f64;
                        c1 * cq + c2 * (two_pi * s.z / lz).cos()
                    }));
                }
                Err(TamdError::Config(format!(
                    "unknown observable '{name}' (known: {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
    }

    /// Evaluates a named observable on grid nodes (d = 1).
    pub fn on_grid(name: &str, pot: &Potential, grid: &Grid) -> Result<Array1<f64>> {
        let obs = Self::build(name, pot, &grid.domain)?;
        let f = obs.func.clone();
        if name.starts_with("z_moment") {
            // z^k is discontinuous at the wrap point, so the node value
            // misrepresents the node-centered cell there (the cell at z = 0
            // averages to 1/2, not 0); use the cell average instead
            let lz = grid.domain.lz;
            let h = lz / grid.spec.n_z as f64;
            let sub = 64;
            return Ok(grid.eval_on_nodes(move |q, z| {
                (0..sub)
                    .map(|i| {
                        let zi = z - 0.5 * h + (i as f64 + 0.5) * h / sub as f64;
                        f(&State::overdamped(vec![q], zi.rem_euclid(lz)))
                    })
                    .sum::<f64>()
                    / sub as f64
            }));
        }
        Ok(grid.eval_on_nodes(move |q, z| f(&State::overdamped(vec![q], z))))
    }
}

/// Thermodynamic-integration primitive: time average of ∂_zU along the
/// frozen-z fast dynamics, with a batch-means standard error.
pub fn mean_force_estimate(
    pot: &Potential,
    domain: &Domain,
    params: &TamdParams,
    z_fixed: f64,
    n_steps: u64,
) -> Result<(f64, f64)> {
    let mut p = params.clone();
    p.n_steps = n_steps;
    let dyn_frozen = FrozenZ::new(pot.clone(), *domain, p.clone(), z_fixed)?;
    let obs = ObservableRegistry::build("dz_u", pot, domain)?;
    let init = State::overdamped(vec![0.0; domain.d], z_fixed);
    let traj = simulate(&init, &dyn_frozen, &p, std::slice::from_ref(&obs), 0)?;
    let stats = ergodic_stats(&traj, 0.1, 32, None)?;
    let o = stats.get("dz_u").expect("dz_u recorded");
    Ok((o.mean, o.se))
}

/// Kolmogorov–Smirnov critical value at level `alpha` for `n_eff`
/// effectively independent samples (asymptotic formula).
pub fn ks_critical(n_eff: f64, alpha: f64) -> f64 {
    let c = if alpha <= 0.01 {
        1.628
    } else if alpha <= 0.05 {
        1.358
    } else {
        1.224
    };
    c / n_eff.sqrt()
}

/// Piecewise-linear CDF of node-centered cell masses on a periodic z-grid,
/// evaluated after shifting so cell j spans [j·h, (j+1)·h).
fn target_cdf(masses: &[f64], h: f64, y: f64) -> f64 {
    let n = masses.len();
    let total: f64 = masses.iter().sum();
    let j = ((y / h).floor() as usize).min(n - 1);
    let below: f64 = masses[..j].iter().sum();
    let frac = (y - j as f64 * h) / h;
    ((below + masses[j] * frac) / total).clamp(0.0, 1.0)
}

/// Distance of pooled samples from a target density on the grid.
///
/// Returns (z-marginal KS distance against the trapezoid-integrated target
/// CDF, weighted L² distance of the normalized (q,z) histogram from the
/// target, both measured as densities relative to ν_ref).
pub fn density_check(
    trajs: &[Trajectory],
    target: &Array1<f64>,
    grid: &Grid,
) -> Result<(f64, f64)> {
    if trajs.is_empty() {
        return Err(TamdError::Config("density_check needs at least one trajectory".into()));
    }
    let pooled: usize = trajs.iter().map(|t| t.len()).sum();
    if pooled < 10_000 {
        return Err(TamdError::Config(format!(
            "density_check needs >= 1e4 pooled samples, got {pooled}"
        )));
    }
    let n_z = grid.spec.n_z;
    let n_q = grid.spec.n_q;
    let h = grid.domain.lz / n_z as f64;

    // z-marginal target masses per node cell
    let mut tz = vec![0.0; n_z];
    for iz in 0..n_z {
        for iq in 0..n_q {
            tz[iz] += target[grid.idx(iq, iz)];
        }
    }

    // KS on the shifted circle (cell j → [j·h, (j+1)·h))
    let mut ys: Vec<f64> = trajs
        .iter()
        .flat_map(|t| t.z_samples())
        .map(|z| wrap_periodic(z + 0.5 * h, grid.domain.lz))
        .collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = ys.len() as f64;
    let mut ks = 0.0f64;
    for (i, &y) in ys.iter().enumerate() {
        let f = target_cdf(&tz, h, y);
        ks = ks.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }

    // joint histogram as a density relative to ν_ref
    let spec = HistogramSpec::from_grid(grid);
    let mut counts = vec![0u64; n_q * n_z];
    let mut counted = 0u64;
    for t in trajs {
        for s in &t.states {
            if s.q.len() != 1 {
                continue;
            }
            let iq = spec.bin(s.q[0], n_q, grid.domain.lq);
            let iz = spec.bin(s.z, n_z, grid.domain.lz);
            counts[grid.idx(iq, iz)] += 1;
            counted += 1;
        }
    }
    let tsum: f64 = target.sum();
    let mut l2_sq = 0.0;
    if counted > 0 {
        for k in 0..n_q * n_z {
            let p_emp = counts[k] as f64 / counted as f64;
            let p_tgt = target[k] / tsum;
            let w = grid.weights[k];
            let diff = p_emp / w - p_tgt / w;
            l2_sq += w * diff * diff;
        }
    }
    Ok((ks, l2_sq.sqrt()))
}

/// Least-squares slope of log y against log x, with r².
pub fn slope_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(TamdError::Config("slope_fit needs >= 3 matched points".into()));
    }
    if xs.iter().chain(ys.iter()).any(|&v| v <= 0.0) {
        return Err(TamdError::Config("slope_fit requires strictly positive data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Least-squares line y = a + b·x; returns (b, r²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(TamdError::Config("linear_fit needs >= 3 matched points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(TamdError::Config("linear_fit: degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, r2))
}

/// Draws iid samples from a node-mass target on the z-grid by inverse CDF
/// (piecewise-linear, matching `density_check`'s convention). Useful for
/// null calibration.
pub fn sample_target_z(masses: &[f64], lz: f64, n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let h = lz / masses.len() as f64;
    let total: f64 = masses.iter().sum();
    let mut cum = Vec::with_capacity(masses.len() + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for &m in masses {
        acc += m / total;
        cum.push(acc);
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let j = match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(j) => j.min(masses.len() - 1),
                Err(j) => j.saturating_sub(1).min(masses.len() - 1),
            };
            let frac = (u - cum[j]) / (cum[j + 1] - cum[j]).max(1e-300);
            // shifted coordinate back to node-centred cells
            wrap_periodic((j as f64 + frac) * h - 0.5 * h, lz)
        })
        .collect()
}

/// Convenience: an `Arc`-wrapped observable function from grid node values
/// is deliberately NOT provided; estimators only consume closed-form
/// observables so that trajectory and grid evaluations agree exactly.
pub type ObservableFn = Arc<dyn Fn(&State) -> f64 + Send + Sync>;
