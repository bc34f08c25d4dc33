//! Regression diagnostics that turn trajectories into verdicts: exponential decay of the
//! Lyapunov functional and the short-time blow-up rates of gradient norms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::CertificateReport;
use crate::error::{Error, Result};
use crate::evolution::{project_mean_zero, Mode, Stepper};
use crate::functionals::{e_functional, gradient_energies, h1_norm_squared, l2_squared};
use crate::grid::Field;
use crate::scalar::Real;
use crate::steady_state::SteadyState;

/// Fewest samples a fit accepts.
pub const MIN_FIT_SAMPLES: usize = 10;

/// Acceptance window of the fitted `||d_x h||^2` slope for rough data.
pub const SLOPE_X_RANGE: (f64, f64) = (-3.6, -2.4);
/// Acceptance window of the fitted `||d_v h||^2` slope for rough data.
pub const SLOPE_V_RANGE: (f64, f64) = (-1.4, -0.6);
/// Both slopes of the smooth control must lie in this window.
pub const SMOOTH_RANGE: (f64, f64) = (-0.3, 0.3);
/// Largest relative change of the regularisation sups under halving `dt`.
pub const SUP_STABILITY: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries<T> {
    pub times: Vec<T>,
    pub values: Vec<T>,
    pub label: String,
}

impl<T: Real> TimeSeries<T> {
    /// Checks equal lengths, finite entries and strictly increasing times.
    pub fn new(times: Vec<T>, values: Vec<T>, label: &str) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidParameter(format!("{} times but {} values", times.len(), values.len())));
        }
        if times.iter().chain(&values).any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("series {label}")));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(format!("times of {label} must increase strictly")));
        }
        Ok(Self { times, values, label: label.into() })
    }

    fn in_window(&self, w: Window<T>) -> (Vec<T>, Vec<T>) {
        self.times
            .iter()
            .zip(&self.values)
            .filter(|(&t, _)| t >= w.start && t <= w.end)
            .map(|(&t, &v)| (t, v))
            .unzip()
    }
}

/// Closed time interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window<T> {
    pub start: T,
    pub end: T,
}

impl<T: Real> Window<T> {
    pub fn new(start: T, end: T) -> Result<Self> {
        if !(start < end) {
            return Err(Error::InvalidParameter(format!("empty window [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }
}

/// Least-squares line through `(x, y)` with its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit<T> {
    pub slope: T,
    pub intercept: T,
    pub r2: T,
    pub samples: usize,
}

fn least_squares<T: Real>(x: &[T], y: &[T]) -> LineFit<T> {
    // Offsetting by the first value keeps constant series exactly flat.
    let y0 = y[0];
    let y: Vec<T> = y.iter().map(|&b| b - y0).collect();
    let n = T::from_count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(&y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        sxy += da * db;
        syy += db * db;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx + y0;
    let sse = y.iter().zip(x).map(|(&b, &a)| (b + y0 - intercept - slope * a).powi(2)).sum::<T>();
    // A constant series is fitted exactly.
    let r2 = if syy > T::zero() { T::one() - sse / syy } else { T::one() };
    LineFit { slope, intercept, r2, samples: x.len() }
}

fn log_values<T: Real>(series: &TimeSeries<T>, window: Window<T>, log_time: bool) -> Result<(Vec<T>, Vec<T>)> {
    let (t, v) = series.in_window(window);
    if t.len() < MIN_FIT_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "{}: {} samples in [{}, {}], need {MIN_FIT_SAMPLES}",
            series.label,
            t.len(),
            window.start,
            window.end
        )));
    }
    if let Some(k) = v.iter().position(|&a| !(a > T::zero())) {
        return Err(Error::InvalidParameter(format!("{}: non-positive value {} at t={}", series.label, v[k], t[k])));
    }
    if log_time && !(t[0] > T::zero()) {
        return Err(Error::InvalidParameter(format!("{}: log-log fit needs t > 0", series.label)));
    }
    let x = if log_time { t.iter().map(|a| a.ln()).collect() } else { t };
    Ok((x, v.iter().map(|a| a.ln()).collect()))
}

/// Exponential rate fit: `rate = -slope` of `ln(value)` against `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit<T> {
    pub rate: T,
    pub r2: T,
    pub samples: usize,
}

pub fn fit_exponential_rate<T: Real>(series: &TimeSeries<T>, window: Window<T>) -> Result<RateFit<T>> {
    let (x, y) = log_values(series, window, false)?;
    let f = least_squares(&x, &y);
    Ok(RateFit { rate: -f.slope, r2: f.r2, samples: f.samples })
}

/// Power-law fit: slope of `ln(value)` against `ln(t)`.
pub fn fit_loglog_slope<T: Real>(series: &TimeSeries<T>, window: Window<T>) -> Result<LineFit<T>> {
    let (x, y) = log_values(series, window, true)?;
    Ok(least_squares(&x, &y))
}

// ---------------------------------------------------------------------------------------
// Initial data.

/// Rough initial data. Roughness is operational: the discrete gradient norm of these
/// data grows without bound under grid refinement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoughDatum<T> {
    /// `sign(x) bump(v)` with the compactly supported bump `exp(-1/(1-v^2))`.
    SignBump,
    /// `|x|^{-a} |v|^{-b} exp(-(x^2 + v^2)/8)`, in `L^2` for `a, b < 1/2`.
    PowerLaw { a: T, b: T },
}

impl<T: Real> Default for RoughDatum<T> {
    fn default() -> Self {
        RoughDatum::SignBump
    }
}

fn bump<T: Real>(v: T) -> T {
    if v.abs() < T::one() {
        (-T::one() / (T::one() - v * v)).exp()
    } else {
        T::zero()
    }
}

pub fn rough_datum<T: Real>(eq: &SteadyState<T>, kind: RoughDatum<T>) -> Result<Field<T>> {
    let h = match kind {
        RoughDatum::SignBump => Field::from_fn(&eq.grid, |x, v| x.signum() * bump(v)),
        RoughDatum::PowerLaw { a, b } => {
            let half = T::lit(0.5);
            if !(a >= T::zero() && a < half && b >= T::zero() && b < half) {
                return Err(Error::InvalidParameter(format!("power-law exponents must lie in [0, 1/2), got {a}, {b}")));
            }
            Field::from_fn(&eq.grid, |x, v| {
                x.abs().powf(-a) * v.abs().powf(-b) * (-(x * x + v * v) / T::lit(8.0)).exp()
            })
        }
    };
    project_mean_zero(&h, eq)
}

/// Smooth control `(x - v) exp(-(x^2 + v^2)/16)`. For the harmonic part of the flow the
/// velocity coefficient of `x - v` is stationary at `t = 0`, so its gradient norms move
/// only at the slow decay rate.
pub fn smooth_control<T: Real>(eq: &SteadyState<T>) -> Result<Field<T>> {
    let h = Field::from_fn(&eq.grid, |x, v| (x - v) * (-(x * x + v * v) / T::lit(16.0)).exp());
    project_mean_zero(&h, eq)
}

/// Random probe fields: smooth ones are quadratic polynomials under a Gaussian envelope,
/// rough ones are shifted sign functions in `x` times a bump in `v`. All are projected
/// to mean zero and normalised in `L^2(finf)`.
/// Default datum of the decay probe, `v bump(x)` projected mean-zero.
pub fn decay_datum<T: Real>(eq: &SteadyState<T>) -> Result<Field<T>> {
    project_mean_zero(&Field::from_fn(&eq.grid, |x, v| v * bump(x)), eq)
}

pub fn probe_set<T: Real>(eq: &SteadyState<T>, n_smooth: usize, n_rough: usize, seed: u64) -> Result<Vec<Field<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_smooth + n_rough);
    for _ in 0..n_smooth {
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let width = rng.gen_range(4.0..16.0);
        let (cx, cv) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let c: Vec<T> = c.into_iter().map(T::lit).collect();
        let (w, cx, cv) = (T::lit(width), T::lit(cx), T::lit(cv));
        out.push(Field::from_fn(&eq.grid, |x, v| {
            let (a, b) = (x - cx, v - cv);
            (c[0] + c[1] * a + c[2] * b + c[3] * a * a + c[4] * a * b + c[5] * b * b) * (-(a * a + b * b) / w).exp()
        }));
    }
    for _ in 0..n_rough {
        let x0 = T::lit(rng.gen_range(-1.0..1.0));
        let scale = T::lit(rng.gen_range(1.0..2.5));
        let v0 = T::lit(rng.gen_range(-0.5..0.5));
        out.push(Field::from_fn(&eq.grid, |x, v| (x - x0).signum() * bump((v - v0) / scale)));
    }
    out.into_iter()
        .map(|h| {
            let h = project_mean_zero(&h, eq)?;
            let n = l2_squared(&h, eq)?.sqrt();
            if !(n > T::zero()) {
                return Err(Error::InvalidParameter("degenerate probe".into()));
            }
            Ok(h.scaled(T::one() / n))
        })
        .collect()
}

// ---------------------------------------------------------------------------------------
// Hypoelliptic regularisation.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HypoConfig<T> {
    pub dt: T,
    pub t_end: T,
    /// Fit window; defaults to `[5 dt, t_end]`.
    pub window: Option<Window<T>>,
    /// Number of log-spaced sample times in the window.
    pub samples: usize,
    pub datum: RoughDatum<T>,
    /// Repeat the rough run at `dt / 2` to test the sups.
    pub halve_dt: bool,
}

impl<T: Real> Default for HypoConfig<T> {
    fn default() -> Self {
        Self { dt: T::lit(2e-3), t_end: T::lit(0.3), window: None, samples: 40, datum: RoughDatum::SignBump, halve_dt: true }
    }
}

impl<T: Real> HypoConfig<T> {
    pub fn fit_window(&self) -> Result<Window<T>> {
        match self.window {
            Some(w) => Window::new(w.start, w.end),
            None => Window::new(T::lit(5.0) * self.dt, self.t_end),
        }
    }
}

/// Gradient energies along one run and their fits.
#[derive(Clone, Debug, Serialize)]
pub struct HypoRun<T> {
    pub dt: T,
    pub grad_x: TimeSeries<T>,
    pub grad_v: TimeSeries<T>,
    pub slope_x: LineFit<T>,
    pub slope_v: LineFit<T>,
    /// `sup t^3 ||d_x h||^2` over the sampled window.
    pub sup_x: T,
    /// `sup t ||d_v h||^2` over the sampled window.
    pub sup_v: T,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HypoVerdicts {
    pub slope_x: bool,
    pub slope_v: bool,
    pub sups_finite: bool,
    pub sups_stable: bool,
    pub smooth_control: bool,
}

impl HypoVerdicts {
    pub fn all(&self) -> bool {
        self.slope_x && self.slope_v && self.sups_finite && self.sups_stable && self.smooth_control
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HypoReport<T> {
    pub window: Window<T>,
    pub datum: RoughDatum<T>,
    pub rough: HypoRun<T>,
    pub rough_half_dt: Option<HypoRun<T>>,
    pub smooth: HypoRun<T>,
    /// Relative change of the sups under halving `dt`.
    pub sup_change_x: Option<T>,
    pub sup_change_v: Option<T>,
    pub verdicts: HypoVerdicts,
    pub passed: bool,
}

fn in_range<T: Real>(a: T, r: (f64, f64)) -> bool {
    a >= T::lit(r.0) && a <= T::lit(r.1)
}

/// Log-spaced times in the window, snapped to multiples of `dt` without duplicates.
fn sample_steps<T: Real>(window: Window<T>, dt: T, n: usize) -> Vec<usize> {
    let (a, b) = (window.start.ln(), window.end.ln());
    let mut steps: Vec<usize> = (0..n)
        .map(|k| {
            let t = (a + (b - a) * T::from_count(k) / T::from_count(n.max(2) - 1)).exp();
            (t / dt).round().to_usize().unwrap_or(1).max(1)
        })
        .collect();
    steps.dedup();
    steps
}

fn hypo_run<T: Real>(eq: &SteadyState<T>, h0: &Field<T>, dt: T, window: Window<T>, n: usize) -> Result<HypoRun<T>> {
    let steps = sample_steps(window, dt, n);
    let last = *steps.last().ok_or_else(|| Error::InvalidParameter("no sample times".into()))?;
    let mut st = Stepper::new(eq, Mode::Linear)?;
    st.check_cfl(h0, dt)?;
    let mut h = h0.clone();
    let (mut ts, mut gx, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    let mut next = 0;
    for k in 1..=last {
        st.step_unchecked(&mut h, dt);
        if steps[next] == k {
            if !h.is_finite() {
                return Err(Error::NonFinite(format!("hypoelliptic probe at step {k}")));
            }
            let (a, b) = gradient_energies(&h, eq)?;
            ts.push(dt * T::from_count(k));
            gx.push(a);
            gv.push(b);
            next += 1;
        }
    }
    let three = T::lit(3.0);
    let sup_x = ts.iter().zip(&gx).map(|(&t, &g)| t.powf(three) * g).fold(T::zero(), T::max);
    let sup_v = ts.iter().zip(&gv).map(|(&t, &g)| t * g).fold(T::zero(), T::max);
    let grad_x = TimeSeries::new(ts.clone(), gx, "grad_x_sq")?;
    let grad_v = TimeSeries::new(ts, gv, "grad_v_sq")?;
    let slope_x = fit_loglog_slope(&grad_x, window)?;
    let slope_v = fit_loglog_slope(&grad_v, window)?;
    Ok(HypoRun { dt, grad_x, grad_v, slope_x, slope_v, sup_x, sup_v })
}

/// Runs the rough datum (and, if configured, the same at `dt / 2`) and the smooth
/// control in parallel, fits the gradient-energy slopes and forms the verdicts.
pub fn run_hypo_probe<T: Real>(eq: &SteadyState<T>, config: &HypoConfig<T>) -> Result<HypoReport<T>> {
    let window = config.fit_window()?;
    if !(config.dt > T::zero()) || window.end > config.t_end {
        return Err(Error::InvalidParameter("hypoelliptic probe needs dt > 0 and a window inside (0, t_end]".into()));
    }
    let rough0 = rough_datum(eq, config.datum)?;
    let smooth0 = smooth_control(eq)?;
    let mut jobs = vec![(rough0.clone(), config.dt), (smooth0, config.dt)];
    if config.halve_dt {
        jobs.push((rough0, config.dt * T::lit(0.5)));
    }
    let mut runs: Vec<HypoRun<T>> = jobs
        .par_iter()
        .map(|(h0, dt)| hypo_run(eq, h0, *dt, window, config.samples))
        .collect::<Result<_>>()?;
    let half = if config.halve_dt { runs.pop() } else { None };
    let smooth = runs.pop().expect("two runs");
    let rough = runs.pop().expect("two runs");

    let change = |a: T, b: T| (a - b).abs() / a.abs().max(b.abs());
    let sup_change_x = half.as_ref().map(|h| change(rough.sup_x, h.sup_x));
    let sup_change_v = half.as_ref().map(|h| change(rough.sup_v, h.sup_v));
    let tol = T::lit(SUP_STABILITY);
    let verdicts = HypoVerdicts {
        slope_x: in_range(rough.slope_x.slope, SLOPE_X_RANGE),
        slope_v: in_range(rough.slope_v.slope, SLOPE_V_RANGE),
        sups_finite: rough.sup_x.is_finite() && rough.sup_v.is_finite(),
        sups_stable: matches!((sup_change_x, sup_change_v), (Some(a), Some(b)) if a <= tol && b <= tol),
        smooth_control: in_range(smooth.slope_x.slope, SMOOTH_RANGE) && in_range(smooth.slope_v.slope, SMOOTH_RANGE),
    };
    Ok(HypoReport {
        window,
        datum: config.datum,
        rough,
        rough_half_dt: half,
        smooth,
        sup_change_x,
        sup_change_v,
        passed: verdicts.all(),
        verdicts,
    })
}

// ---------------------------------------------------------------------------------------
// Certified decay.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecayConfig<T> {
    pub dt: T,
    pub t_end: T,
    /// Fit window; defaults to `[1, t_end]`.
    pub window: Option<Window<T>>,
    pub record_every: usize,
    /// Relative slack of the pathwise check.
    pub slack: T,
    /// Required ratio of measured to certified rate.
    pub threshold: T,
    pub min_r2: T,
    /// Multiplies the certified rate before testing (negative-control hook).
    pub lambda_multiplier: T,
}

impl<T: Real> Default for DecayConfig<T> {
    fn default() -> Self {
        Self {
            dt: T::lit(0.01),
            t_end: T::lit(10.0),
            window: None,
            record_every: 10,
            slack: T::lit(0.01),
            threshold: T::lit(0.95),
            min_r2: T::lit(0.999),
            lambda_multiplier: T::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayVerdicts {
    pub rate: bool,
    pub r2: bool,
    pub pathwise: bool,
}

impl DecayVerdicts {
    pub fn all(&self) -> bool {
        self.rate && self.r2 && self.pathwise
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport<T> {
    pub lambda_certified: T,
    pub lambda_multiplier: T,
    /// Rate under test, `lambda_multiplier * lambda_certified`.
    pub lambda_tested: T,
    pub window: Window<T>,
    /// Fitted decay rate of `E`, which decays like `exp(-2 lambda t)`.
    pub e_fit: RateFit<T>,
    pub lambda_measured: T,
    pub pathwise_violations: usize,
    /// Largest `E(t) / (exp(-2 lambda (t - s)) E(s))` over sampled `s < t`.
    pub worst_pathwise_ratio: T,
    pub energy: TimeSeries<T>,
    pub h1_norm_sq: TimeSeries<T>,
    pub verdicts: DecayVerdicts,
    pub passed: bool,
}

/// Evolves the linear flow from `h0`, fits the decay rate of the certified functional
/// and checks the pathwise decay inequality between every pair of samples.
pub fn run_decay_probe<T: Real>(
    eq: &SteadyState<T>,
    certificate: &CertificateReport<T>,
    h0: &Field<T>,
    config: &DecayConfig<T>,
) -> Result<DecayReport<T>> {
    if !(config.dt > T::zero() && config.t_end > config.dt) || config.record_every == 0 {
        return Err(Error::InvalidParameter("decay probe needs 0 < dt < t_end and record_every >= 1".into()));
    }
    let window = match config.window {
        Some(w) => Window::new(w.start, w.end)?,
        None => Window::new(T::one(), config.t_end)?,
    };
    let n0 = l2_squared(h0, eq)?;
    if !(n0 > T::zero()) {
        return Err(Error::InvalidParameter("zero initial datum".into()));
    }
    let mass = crate::grid::integrate(h0, Some(&eq.finf))?;
    if mass.abs() > T::lit(1e-10) * n0.sqrt() {
        return Err(Error::InvalidParameter(format!("initial datum is not mean-zero (mass {mass})")));
    }
    let spec = certificate.lyapunov();
    let lambda = certificate.lambda * config.lambda_multiplier;
    let steps = (config.t_end / config.dt).round().to_usize().unwrap_or(0);
    let mut st = Stepper::new(eq, Mode::Linear)?;
    st.check_cfl(h0, config.dt)?;
    let mut h = h0.clone();
    let (mut ts, mut es, mut hs) = (vec![T::zero()], vec![e_functional(&h, eq, &spec, T::zero())?], vec![h1_norm_squared(&h, eq)?]);
    for k in 1..=steps {
        st.step_unchecked(&mut h, config.dt);
        if k % config.record_every == 0 || k == steps {
            if !h.is_finite() {
                return Err(Error::NonFinite(format!("decay probe at step {k}")));
            }
            let t = config.dt * T::from_count(k);
            ts.push(t);
            es.push(e_functional(&h, eq, &spec, t)?);
            hs.push(h1_norm_squared(&h, eq)?);
        }
    }
    let energy = TimeSeries::new(ts.clone(), es, "lyapunov")?;
    let h1_norm_sq = TimeSeries::new(ts, hs, "h1_norm_sq")?;
    let e_fit = fit_exponential_rate(&energy, window)?;
    let lambda_measured = e_fit.rate * T::lit(0.5);

    let (mut violations, mut worst) = (0, T::zero());
    let (t, e) = (&energy.times, &energy.values);
    let two = T::lit(2.0);
    for j in 1..t.len() {
        for i in 0..j {
            let ratio = e[j] / ((-two * lambda * (t[j] - t[i])).exp() * e[i]);
            worst = worst.max(ratio);
            if ratio > T::one() + config.slack {
                violations += 1;
            }
        }
    }
    let verdicts = DecayVerdicts {
        rate: lambda_measured >= config.threshold * lambda,
        r2: e_fit.r2 >= config.min_r2,
        pathwise: violations == 0,
    };
    Ok(DecayReport {
        lambda_certified: certificate.lambda,
        lambda_multiplier: config.lambda_multiplier,
        lambda_tested: lambda,
        window,
        e_fit,
        lambda_measured,
        pathwise_violations: violations,
        worst_pathwise_ratio: worst,
        energy,
        h1_norm_sq,
        passed: verdicts.all(),
        verdicts,
    })
}
