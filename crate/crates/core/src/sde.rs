//! Time integrators for the extended dynamics and the limiting dynamics,
//! behind a common `Dynamics` trait selected by name at runtime.
//!
//! Schemes: Euler–Maruyama for the overdamped and limiting equations,
//! a BAOAB-pattern splitting with an exact Ornstein–Uhlenbeck substep for
//! the inertial system (the OU factor tolerates the stiff δ⁻¹γ friction),
//! and frozen-z overdamped q-dynamics for thermodynamic integration.
//!
//! Gaussian draws follow a fixed order per step (q-block, then p-block if
//! present, then z) so trajectories stay reproducible across refactors.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, TamdError};
use crate::freenergy::FreeEnergyProfile;
use crate::model::{Domain, Potential, State, TamdParams};

/// Source of standard Gaussian draws. Production code uses `RngStream`;
/// tests inject fixed draws.
pub trait NormalSource {
    fn normal(&mut self) -> f64;
}

/// Counter-based Gaussian stream: identical (seed, stream_id) reproduces the
/// sequence bit-for-bit; distinct stream_ids give independent streams.
pub struct RngStream {
    rng: ChaCha12Rng,
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { rng, seed, stream_id }
    }
}

impl NormalSource for RngStream {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// One algorithm of the integrator family.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &'static str;
    /// Advances the state by one step of size `params.dt`.
    fn step(&self, state: &State, noise: &mut dyn NormalSource) -> Result<State>;
    fn domain(&self) -> &Domain;
}

fn stability_guard(pot: &Potential, domain: &Domain, dt: f64, delta: f64) -> Result<()> {
    let curv = pot.q_curvature_bound(domain);
    if curv > 0.0 && dt / delta > 0.5 / curv {
        return Err(TamdError::Guard(format!(
            "overdamped stability: dt/delta = {:.3e} exceeds 0.5/max|d2U/dq2| = {:.3e}",
            dt / delta,
            0.5 / curv
        )));
    }
    Ok(())
}

/// Euler–Maruyama for the overdamped TAMD system.
pub struct OverdampedTamd {
    pot: Potential,
    domain: Domain,
    params: TamdParams,
}

impl OverdampedTamd {
    pub fn new(pot: Potential, domain: Domain, params: TamdParams) -> Result<Self> {
        params.validate()?;
        stability_guard(&pot, &domain, params.dt, params.delta)?;
        Ok(OverdampedTamd { pot, domain, params })
    }

    /// δ = 1, β̄ = β special case: the plain extended Langevin dynamics.
    pub fn plain(pot: Potential, domain: Domain, mut params: TamdParams) -> Result<Self> {
        params.delta = 1.0;
        params.beta_bar = params.beta;
        Self::new(pot, domain, params)
    }
}

impl Dynamics for OverdampedTamd {
    fn name(&self) -> &'static str {
        "overdamped"
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn step(&self, state: &State, noise: &mut dyn NormalSource) -> Result<State> {
        if state.p.is_some() {
            return Err(TamdError::Config("overdamped step received momenta".into()));
        }
        let p = &self.params;
        let der = self.pot.derivatives(&self.domain, &state.q, state.z);
        let cq = (2.0 * p.dt / (p.beta * p.delta)).sqrt();
        let cz = (2.0 * p.dt / p.beta_bar).sqrt();
        let mut q = Vec::with_capacity(state.q.len());
        for (qi, gi) in state.q.iter().zip(der.grad_q.iter()) {
            q.push(qi - p.dt / p.delta * gi + cq * noise.normal());
        }
        let z = state.z - p.dt * der.dz + cz * noise.normal();
        Ok(self.domain.wrap(State::overdamped(q, z)))
    }
}

/// Splitting scheme for the inertial TAMD system: z half-step, BAOAB for
/// (q,p) with the exact OU substep, z half-step.
pub struct InertialTamd {
    pot: Potential,
    domain: Domain,
    params: TamdParams,
}

impl InertialTamd {
    pub fn new(pot: Potential, domain: Domain, params: TamdParams) -> Result<Self> {
        params.validate()?;
        // the BAOAB force substeps see the rescaled drift, so the guard
        // carries the same delta scaling as the overdamped one
        stability_guard(&pot, &domain, params.dt, params.delta)?;
        Ok(InertialTamd { pot, domain, params })
    }
}

impl Dynamics for InertialTamd {
    fn name(&self) -> &'static str {
        "inertial"
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn step(&self, state: &State, noise: &mut dyn NormalSource) -> Result<State> {
        let p0 = state
            .p
            .as_ref()
            .ok_or_else(|| TamdError::Config("inertial step requires momenta".into()))?;
        let pr = &self.params;
        let d = state.q.len();
        // fixed draw order: p-block, then the two z half-step draws
        let xi_p: Vec<f64> = (0..d).map(|_| noise.normal()).collect();
        let xi_z1 = noise.normal();
        let xi_z2 = noise.normal();

        let half = 0.5 * pr.dt;
        let cz = (2.0 * half / pr.beta_bar).sqrt();
        let ou = (-pr.gamma * pr.dt / (pr.delta * pr.mass)).exp();
        let ou_noise = (pr.mass / pr.beta * (1.0 - ou * ou)).sqrt();

        // (i) z half-step
        let der = self.pot.derivatives(&self.domain, &state.q, state.z);
        let mut z = state.z - half * der.dz + cz * xi_z1;

        // (ii) BAOAB in the rescaled variables
        let mut q = state.q.clone();
        let mut p: Vec<f64> = p0.clone();
        let grad = self.pot.derivatives(&self.domain, &q, z).grad_q;
        for i in 0..d {
            p[i] -= half / pr.delta * grad[i];
        }
        for i in 0..d {
            q[i] += half / (pr.delta * pr.mass) * p[i];
        }
        for i in 0..d {
            p[i] = ou * p[i] + ou_noise * xi_p[i];
        }
        for i in 0..d {
            q[i] += half / (pr.delta * pr.mass) * p[i];
        }
        let grad = self.pot.derivatives(&self.domain, &q, z).grad_q;
        for i in 0..d {
            p[i] -= half / pr.delta * grad[i];
        }

        // (iii) z half-step at the updated configuration
        let der = self.pot.derivatives(&self.domain, &q, z);
        z = z - half * der.dz + cz * xi_z2;

        Ok(self.domain.wrap(State::inertial(q, p, z)))
    }
}

/// Euler–Maruyama for the limiting effective dynamics on z, with A'
/// evaluated by trigonometric interpolation of the tabulated profile.
pub struct LimitingDynamics {
    profile: FreeEnergyProfile,
    domain: Domain,
    params: TamdParams,
}

impl LimitingDynamics {
    pub fn new(profile: FreeEnergyProfile, domain: Domain, params: TamdParams) -> Result<Self> {
        params.validate()?;
        if (profile.lz - domain.lz).abs() > 1e-12 {
            return Err(TamdError::Config("limiting dynamics: profile z-period != domain Lz".into()));
        }
        Ok(LimitingDynamics { profile, domain, params })
    }
}

impl Dynamics for LimitingDynamics {
    fn name(&self) -> &'static str {
        "limiting"
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn step(&self, state: &State, noise: &mut dyn NormalSource) -> Result<State> {
        let p = &self.params;
        let drift = self.profile.a1_at(state.z);
        let z = state.z - p.dt * drift + (2.0 * p.dt / p.beta_bar).sqrt() * noise.normal();
        let mut out = state.clone();
        out.z = self.domain.wrap_z(z);
        Ok(out)
    }
}

/// Overdamped q-dynamics at the physical temperature with z frozen; the
/// thermodynamic-integration sampler.
pub struct FrozenZ {
    pot: Potential,
    domain: Domain,
    params: TamdParams,
    pub z_fixed: f64,
}

impl FrozenZ {
    pub fn new(pot: Potential, domain: Domain, params: TamdParams, z_fixed: f64) -> Result<Self> {
        params.validate()?;
        stability_guard(&pot, &domain, params.dt, 1.0)?;
        Ok(FrozenZ { pot, domain, params, z_fixed })
    }
}

impl Dynamics for FrozenZ {
    fn name(&self) -> &'static str {
        "frozen_z"
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn step(&self, state: &State, noise: &mut dyn NormalSource) -> Result<State> {
        let p = &self.params;
        let der = self.pot.derivatives(&self.domain, &state.q, self.z_fixed);
        let cq = (2.0 * p.dt / p.beta).sqrt();
        let q = state
            .q
            .iter()
            .zip(der.grad_q.iter())
            .map(|(qi, gi)| qi - p.dt * gi + cq * noise.normal())
            .collect();
        Ok(self.domain.wrap(State { q, p: None, z: self.z_fixed }))
    }
}

/// Named constructor table for the integrator family.
///
/// `limiting` needs a tabulated free-energy profile; the other kinds ignore
/// it.
pub struct DynamicsRegistry;

impl DynamicsRegistry {
    pub const KINDS: [&'static str; 4] = ["overdamped", "inertial", "limiting", "plain"];

    pub fn build(
        kind: &str,
        pot: &Potential,
        domain: &Domain,
        params: &TamdParams,
        profile: Option<&FreeEnergyProfile>,
    ) -> Result<Box<dyn Dynamics>> {
        match kind {
            "overdamped" => Ok(Box::new(OverdampedTamd::new(pot.clone(), *domain, params.clone())?)),
            "plain" => Ok(Box::new(OverdampedTamd::plain(pot.clone(), *domain, params.clone())?)),
            "inertial" => Ok(Box::new(InertialTamd::new(pot.clone(), *domain, params.clone())?)),
            "limiting" => {
                let prof = profile.ok_or_else(|| {
                    TamdError::Config("limiting dynamics requires a free-energy profile".into())
                })?;
                Ok(Box::new(LimitingDynamics::new(prof.clone(), *domain, params.clone())?))
            }
            other => Err(TamdError::Config(format!(
                "unknown dynamics kind '{other}' (expected one of {:?})",
                Self::KINDS
            ))),
        }
    }
}

/// Named function of the state, evaluated along recorded trajectories.
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    pub func: Arc<dyn Fn(&State) -> f64 + Send + Sync>,
}

impl Observable {
    pub fn new(name: impl Into<String>, f: impl Fn(&State) -> f64 + Send + Sync + 'static) -> Self {
        Observable { name: name.into(), func: Arc::new(f) }
    }
}

/// Recorded path: states every `stride` steps plus named observable series.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub observable_names: Vec<String>,
    /// series[i][k] = observable i at recorded time k
    pub observable_series: Vec<Vec<f64>>,
    /// spacing between recorded samples (stride·dt)
    pub dt_sample: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.observable_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.observable_series[i].as_slice())
    }

    pub fn z_samples(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.z).collect()
    }

    /// CSV with columns t, z, obs_<name>... ; q columns when `include_q`.
    pub fn to_csv(&self, include_q: bool) -> String {
        let mut header = String::from("t,z");
        if include_q {
            let d = self.states.first().map_or(0, |s| s.q.len());
            for i in 0..d {
                header.push_str(&format!(",q{i}"));
            }
        }
        for name in &self.observable_names {
            header.push_str(&format!(",obs_{name}"));
        }
        header.push('\n');
        let mut out = header;
        for k in 0..self.len() {
            out.push_str(&format!("{:.12e},{:.17e}", self.times[k], self.states[k].z));
            if include_q {
                for qi in &self.states[k].q {
                    out.push_str(&format!(",{qi:.17e}"));
                }
            }
            for series in &self.observable_series {
                out.push_str(&format!(",{:.17e}", series[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `params.n_steps` steps from `initial`, recording every
/// `params.stride` steps (the initial state included). Deterministic for a
/// given (seed, stream_id).
pub fn simulate(
    initial: &State,
    dynamics: &dyn Dynamics,
    params: &TamdParams,
    observables: &[Observable],
    stream_id: u64,
) -> Result<Trajectory> {
    let mut rng = RngStream::new(params.seed, stream_id);
    simulate_with(initial, dynamics, params, observables, &mut rng)
}

pub fn simulate_with(
    initial: &State,
    dynamics: &dyn Dynamics,
    params: &TamdParams,
    observables: &[Observable],
    noise: &mut dyn NormalSource,
) -> Result<Trajectory> {
    let dt_sample = params.stride as f64 * params.dt;
    let n_rec = (params.n_steps / params.stride) as usize;
    let mut times = Vec::with_capacity(n_rec + 1);
    let mut states = Vec::with_capacity(n_rec + 1);
    let mut series: Vec<Vec<f64>> = observables.iter().map(|_| Vec::with_capacity(n_rec + 1)).collect();

    let record = |state: &State, t: f64, series: &mut Vec<Vec<f64>>, times: &mut Vec<f64>, states: &mut Vec<State>| {
        times.push(t);
        for (i, obs) in observables.iter().enumerate() {
            series[i].push((obs.func)(state));
        }
        states.push(state.clone());
    };

    let mut state = dynamics.domain().wrap(initial.clone());
    record(&state, 0.0, &mut series, &mut times, &mut states);
    for step in 1..=params.n_steps {
        state = dynamics
            .step(&state, noise)
            .map_err(|e| TamdError::Solver(format!("step {step}: {e}")))?;
        if step % params.stride == 0 {
            record(&state, step as f64 * params.dt, &mut series, &mut times, &mut states);
        }
    }
    Ok(Trajectory {
        times,
        states,
        observable_names: observables.iter().map(|o| o.name.clone()).collect(),
        observable_series: series,
        dt_sample,
    })
}

/// One trajectory per replica; replica k owns RNG stream k. The result is
/// independent of scheduling because streams never mix.
pub fn ensemble(
    initials: &[State],
    dynamics: &dyn Dynamics,
    params: &TamdParams,
    observables: &[Observable],
) -> Result<Vec<Trajectory>> {
    if initials.is_empty() {
        return Err(TamdError::Config("ensemble requires at least one replica".into()));
    }
    let results: Vec<Result<Trajectory>> = initials
        .par_iter()
        .enumerate()
        .map(|(k, init)| {
            simulate(init, dynamics, params, observables, k as u64)
                .map_err(|e| TamdError::Solver(format!("replica {k}: {e}")))
        })
        .collect();
    results.into_iter().collect()
}

#[cfg(test)]
pub(crate) struct FixedSource {
    pub draws: Vec<f64>,
    pub at: usize,
}

#[cfg(test)]
impl NormalSource for FixedSource {
    fn normal(&mut self) -> f64 {
        let v = self.draws[self.at % self.draws.len()];
        self.at += 1;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrigPoly;
    use approx::assert_abs_diff_eq;

    fn flat() -> Potential {
        Potential::Separable { v: TrigPoly::zero(), w: TrigPoly::zero() }
    }

    fn params(dt: f64, delta: f64) -> TamdParams {
        let mut p = TamdParams::default_for(1.0, 1.0, delta);
        p.dt = dt;
        p
    }

    #[test]
    fn overdamped_noise_coefficient() {
        // U ≡ 0, ξ_q = 1, ξ_z = 0: q advances by sqrt(2dt/(βδ)) = sqrt(0.02)
        let dyn_ = OverdampedTamd::new(flat(), Domain::unit(), params(1e-3, 0.1)).unwrap();
        let mut src = FixedSource { draws: vec![1.0, 0.0], at: 0 };
        let s = dyn_.step(&State::overdamped(vec![0.0], 0.4), &mut src).unwrap();
        assert_abs_diff_eq!(s.q[0], 0.02f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.z, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn overdamped_drift_sign() {
        let pot = Potential::Separable { v: TrigPoly::cosine(1, 1.0), w: TrigPoly::cosine(1, 1.0) };
        let mut p = params(1e-4, 0.5);
        p.beta = 1.0;
        let dyn_ = OverdampedTamd::new(pot, Domain::unit(), p.clone()).unwrap();
        let mut src = FixedSource { draws: vec![0.0], at: 0 };
        let q0 = 0.2;
        let s = dyn_.step(&State::overdamped(vec![q0], 0.0), &mut src).unwrap();
        let expected = q0 + p.dt / p.delta * crate::model::TWO_PI * (crate::model::TWO_PI * q0).sin();
        assert_abs_diff_eq!(s.q[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn stability_guard_triggers() {
        let pot = Potential::Separable { v: TrigPoly::cosine(1, 1.0), w: TrigPoly::zero() };
        let err = match OverdampedTamd::new(pot, Domain::unit(), params(1e-2, 0.01)) {
            Err(e) => e,
            Ok(_) => panic!("stability guard should have fired"),
        };
        assert!(matches!(err, TamdError::Guard(_)), "{err}");
    }

    #[test]
    fn inertial_free_flight_and_ou_decay() {
        let mut p = params(1e-2, 0.2);
        p.gamma = 0.7;
        p.mass = 1.3;
        let dyn_ = InertialTamd::new(flat(), Domain::unit(), p.clone()).unwrap();
        let mut src = FixedSource { draws: vec![0.0], at: 0 };
        let p0 = 0.5;
        let s = dyn_.step(&State::inertial(vec![0.0], vec![p0], 0.3), &mut src).unwrap();
        let ou = (-p.gamma * p.dt / (p.delta * p.mass)).exp();
        assert_abs_diff_eq!(s.p.as_ref().unwrap()[0], ou * p0, epsilon = 1e-14);
        let free_flight = 0.5 * p.dt / (p.delta * p.mass) * (p0 + ou * p0);
        assert_abs_diff_eq!(s.q[0], free_flight, epsilon = 1e-14);
        assert_abs_diff_eq!(s.z, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn inertial_rejects_missing_momenta() {
        let dyn_ = InertialTamd::new(flat(), Domain::unit(), params(1e-3, 0.5)).unwrap();
        let mut src = FixedSource { draws: vec![0.0], at: 0 };
        assert!(dyn_.step(&State::overdamped(vec![0.0], 0.0), &mut src).is_err());
    }

    #[test]
    fn limiting_drift_fixed_points() {
        // zero noise, A1 = −2π sin(2πz): z = 0 and z = 0.5 are fixed
        let pot = Potential::Separable { v: TrigPoly::zero(), w: TrigPoly::cosine(1, 1.0) };
        let dom = Domain::unit();
        let prof = crate::freenergy::free_energy_profile(&pot, &dom, 1.0, 1.0, 32, 32).unwrap();
        let dyn_ = LimitingDynamics::new(prof, dom, params(1e-3, 1.0)).unwrap();
        let mut src = FixedSource { draws: vec![0.0], at: 0 };
        for &z in &[0.0, 0.5] {
            let s = dyn_.step(&State::z_only(z), &mut src).unwrap();
            assert_abs_diff_eq!(s.z, z, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_steps_returns_initial_only() {
        let mut p = params(1e-3, 1.0);
        p.n_steps = 0;
        let dyn_ = OverdampedTamd::new(flat(), Domain::unit(), p.clone()).unwrap();
        let traj = simulate(&State::overdamped(vec![0.25], 0.5), &dyn_, &p, &[], 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0].q[0], 0.25);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut p = params(1e-3, 0.5);
        p.n_steps = 500;
        p.stride = 5;
        p.seed = 42;
        let dyn_ = OverdampedTamd::new(flat(), Domain::unit(), p.clone()).unwrap();
        let obs = vec![Observable::new("z", |s: &State| s.z)];
        let init = State::overdamped(vec![0.1], 0.2);
        let a = simulate(&init, &dyn_, &p, &obs, 3).unwrap();
        let b = simulate(&init, &dyn_, &p, &obs, 3).unwrap();
        assert_eq!(a.observable_series, b.observable_series);
        // spacing contract
        for k in 1..a.len() {
            assert_abs_diff_eq!(a.times[k] - a.times[k - 1], 5e-3, epsilon = 1e-15);
        }
    }

    #[test]
    fn distinct_streams_decorrelate() {
        let mut p = params(1e-3, 1.0);
        p.n_steps = 100_000;
        p.stride = 1;
        let dyn_ = OverdampedTamd::new(flat(), Domain::unit(), p.clone()).unwrap();
        let obs = vec![Observable::new("z", |s: &State| s.z)];
        let init = State::overdamped(vec![0.0], 0.0);
        let a = simulate(&init, &dyn_, &p, &obs, 0).unwrap();
        let b = simulate(&init, &dyn_, &p, &obs, 1).unwrap();
        // correlate the Gaussian increments, not the wrapped positions
        let incr = |t: &Trajectory| {
            let zs = t.series("z").unwrap();
            zs.windows(2)
                .map(|w| {
                    let mut d = w[1] - w[0];
                    if d > 0.5 {
                        d -= 1.0;
                    } else if d < -0.5 {
                        d += 1.0;
                    }
                    d
                })
                .collect::<Vec<f64>>()
        };
        let xa = incr(&a);
        let xb = incr(&b);
        let n = xa.len() as f64;
        let ma = xa.iter().sum::<f64>() / n;
        let mb = xb.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in xa.iter().zip(xb.iter()) {
            cov += (x - ma) * (y - mb);
            va += (x - ma).powi(2);
            vb += (y - mb).powi(2);
        }
        let r = cov / (va.sqrt() * vb.sqrt());
        assert!(r.abs() < 0.01, "stream correlation r = {r}");
    }

    #[test]
    fn ensemble_matches_simulate_and_ignores_order() {
        let mut p = params(1e-3, 0.5);
        p.n_steps = 200;
        p.stride = 2;
        let dyn_ = OverdampedTamd::new(flat(), Domain::unit(), p.clone()).unwrap();
        let obs = vec![Observable::new("z", |s: &State| s.z)];
        let inits = vec![State::overdamped(vec![0.0], 0.0); 4];
        let trajs = ensemble(&inits, &dyn_, &p, &obs).unwrap();
        let single = simulate(&inits[0], &dyn_, &p, &obs, 0).unwrap();
        assert_eq!(trajs[0].observable_series, single.observable_series);
        let again = ensemble(&inits, &dyn_, &p, &obs).unwrap();
        for (t1, t2) in trajs.iter().zip(again.iter()) {
            assert_eq!(t1.observable_series, t2.observable_series);
        }
    }

    #[test]
    fn registry_rejects_unknown_kind() {
        let p = params(1e-3, 0.5);
        let err = match DynamicsRegistry::build("metropolis", &flat(), &Domain::unit(), &p, None) {
            Err(e) => e,
            Ok(_) => panic!("unknown kind should be rejected"),
        };
        assert!(err.to_string().contains("metropolis"));
    }
}
