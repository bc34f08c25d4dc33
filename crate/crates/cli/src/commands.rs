use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use serde::Serialize;
use vpfp::certificate::{
    best_smallness_radius, certify_rate, duhamel_constants, estimate_constants, estimate_semigroup_constants,
    hypo_search, smallness_thresholds, CertifyOutcome, DuhamelReport,
    HypoLedger, SemigroupOptions,
};
use vpfp::evolution::{evolve, project_mean_zero, EvolutionConfig, FunctionalKind, Mode};
use vpfp::functionals::norm_squared;
use vpfp::probes::{decay_datum, probe_set, rough_datum, run_decay_probe, run_hypo_probe, smooth_control, DecayReport, HypoReport, RoughDatum};
use vpfp::steady_state::{check_uniqueness, solve_pbe, SteadySummary};
use vpfp::{CertificateReport, ConstantsReport, Field, PhaseGrid, SteadyState};

use crate::config::{GridConfig, InitialDatum, RunConfig};
use crate::manifest::{config_hash, Manifest};
use crate::{Command, Failure};

/// Radius scan of the smallness thresholds when no radius is configured.
const RADIUS_SCAN: (f64, f64, usize) = (1e-6, 1e6, 121);

pub struct Context {
    pub command: Command,
    pub cfg: RunConfig,
    pub config_sha256: String,
    pub out: PathBuf,
    start: Instant,
}

impl Context {
    pub fn new(command: Command, cfg: RunConfig, bytes: &[u8], out: PathBuf) -> Self {
        let config_sha256 = config_hash(bytes, &cfg);
        Self { command, cfg, config_sha256, out, start: Instant::now() }
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            tool_version: env!("CARGO_PKG_VERSION"),
            core_version: vpfp::VERSION,
            command: self.command.name(),
            config_sha256: self.config_sha256.clone(),
            seed: self.cfg.seed,
            grid: self.cfg.grid,
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest: Manifest,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(ctx: &Context, name: &str, body: &T) -> Result<(), Failure> {
    let f = BufWriter::new(File::create(ctx.path(name))?);
    serde_json::to_writer_pretty(f, &Stamped { manifest: ctx.manifest(), body })?;
    Ok(())
}

fn equilibrium(cfg: &RunConfig, grid: &GridConfig) -> Result<SteadyState, Failure> {
    let g = PhaseGrid::new(grid.nx, grid.nv, grid.lx, grid.lv)?;
    Ok(solve_pbe(&g, &cfg.potential, &cfg.params, &cfg.pbe)?)
}

/// Two starts whose densities differ by more than this are flagged as distinct fixed points.
const UNIQUENESS_TOL: f64 = 1e-8;

#[derive(Serialize)]
struct SteadyBody {
    summary: SteadySummary<f64>,
    /// Sup-norm gap between the densities reached from two different starts.
    uniqueness_gap: f64,
    unique: bool,
}

fn steady(ctx: &Context, eq: &SteadyState) -> Result<(), Failure> {
    eq.write_csv(BufWriter::new(File::create(ctx.path("steady_state.csv"))?))?;
    let (_, gap) = check_uniqueness(&eq.grid, &ctx.cfg.potential, &ctx.cfg.params, &ctx.cfg.pbe)?;
    if !(gap <= UNIQUENESS_TOL) {
        eprintln!("warning: two PBE starts disagree by {gap:.3e}");
    }
    let body = SteadyBody { summary: eq.summary(), uniqueness_gap: gap, unique: gap <= UNIQUENESS_TOL };
    write_json(ctx, "steady_summary.json", &body)
}

#[derive(Serialize)]
struct CertificateBody<'a> {
    constants: &'a ConstantsReport,
    certificate: &'a CertifyOutcome<f64>,
    hypo: Option<HypoLedger<f64>>,
}

/// Certified rate, optionally with the Duhamel block. Infeasible searches still write
/// `certificate.json` before failing with exit code 3.
fn certify(ctx: &Context, eq: &SteadyState, duhamel: bool, write: bool) -> Result<CertificateReport, Failure> {
    let c = &ctx.cfg.certificate;
    let constants = estimate_constants(eq)?;
    let inputs = constants.rate_inputs();
    let mut outcome = certify_rate(&inputs, &c.search)?;
    let hypo = if write {
        let eps_max = c.search.eps_max.unwrap_or(inputs.sigma / (2.0 * inputs.kappa3) * (1.0 - 1e-6));
        hypo_search(c.t0, &inputs, eps_max, c.search.n_eps, c.search.gamma_max)?
    } else {
        None
    };
    if let (CertifyOutcome::Certified(cert), true) = (&mut outcome, duhamel) {
        let lambda1 = c.lambda1_fraction * cert.lambda;
        let constants = duhamel_constants(lambda1, c.alpha)?;
        let s = &c.semigroup;
        let probes = probe_set(eq, s.n_smooth, s.n_rough, ctx.cfg.seed)?;
        let opts = SemigroupOptions { dt: s.dt, t_end: s.t_end, every: s.every, alpha: c.alpha, lambda: cert.lambda, lambda1 };
        let semigroup = estimate_semigroup_constants(eq, &probes, &opts)?;
        let thresholds = match c.r {
            Some(r) => smallness_thresholds(&semigroup, &constants, r)?,
            None => best_smallness_radius(&semigroup, &constants, RADIUS_SCAN.0, RADIUS_SCAN.1, RADIUS_SCAN.2)?,
        };
        cert.duhamel = Some(DuhamelReport { constants, semigroup, thresholds });
    }
    if write {
        write_json(ctx, "certificate.json", &CertificateBody { constants: &constants, certificate: &outcome, hypo })?;
    }
    match outcome {
        CertifyOutcome::Certified(cert) => Ok(cert),
        CertifyOutcome::Infeasible(r) => {
            let worst = r.violated.iter().map(|v| format!("{} ({:.3e})", v.name, v.margin)).collect::<Vec<_>>();
            Err(Failure::infeasible(anyhow!("no feasible (eps, gamma); violated at best pair: {}", worst.join(", "))))
        }
    }
}

fn initial_datum(ctx: &Context, eq: &SteadyState) -> Result<Field, Failure> {
    let ev = &ctx.cfg.evolution;
    let h = match ev.initial {
        InitialDatum::Smooth => smooth_control(eq)?,
        InitialDatum::Rough => rough_datum(eq, RoughDatum::SignBump)?,
        InitialDatum::Random => {
            let set = probe_set(eq, 1, 0, ctx.cfg.seed)?;
            project_mean_zero(&set[0], eq)?
        }
    };
    Ok(match ev.amplitude {
        Some(a) => {
            let n = norm_squared(&h, eq)?.sqrt();
            if !(n > 0.0) {
                return Err(Failure::config(anyhow!("initial datum vanishes on this grid")));
            }
            h.scaled(a / n)
        }
        None => h,
    })
}

fn needs_lyapunov(kinds: &[FunctionalKind<f64>]) -> bool {
    kinds.iter().any(|k| matches!(k, FunctionalKind::E | FunctionalKind::SP))
}

#[derive(Serialize)]
struct TrajectoryMeta {
    mode: Mode,
    columns: Vec<String>,
    steps: usize,
    /// Columns whose identity is only established for the linear flow.
    extrapolated: Vec<String>,
}

fn run_evolve(ctx: &Context, eq: &SteadyState, cert: Option<&CertificateReport>) -> Result<(), Failure> {
    let ev = &ctx.cfg.evolution;
    let kinds = ev.functionals.iter().map(|s| FunctionalKind::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = EvolutionConfig::new(ev.dt, ev.t_end, ev.mode);
    cfg.record_every = ev.record_every;
    cfg.entropy_field_weight = ev.entropy_field_weight;
    cfg.lyapunov = match (needs_lyapunov(&kinds), cert) {
        (false, _) => None,
        (true, Some(c)) => Some(c.lyapunov()),
        (true, None) => Some(certify(ctx, eq, false, false)?.lyapunov()),
    };
    cfg.functionals = kinds;
    let h0 = initial_datum(ctx, eq)?;
    let traj = evolve(&h0, eq, &cfg)?;
    traj.write_csv(BufWriter::new(File::create(ctx.path("trajectory.csv"))?))?;
    let extrapolated = match ev.mode {
        Mode::Linear => Vec::new(),
        Mode::Nonlinear => traj.names.iter().filter(|n| *n == "norm2_rate").cloned().collect(),
    };
    let meta = TrajectoryMeta { mode: ev.mode, columns: traj.names.clone(), steps: traj.steps, extrapolated };
    write_json(ctx, "trajectory.json", &meta)
}

#[derive(Serialize)]
struct ProbeBody {
    decay: Option<DecayReport<f64>>,
    hypo: Option<HypoReport<f64>>,
    passed: bool,
}

/// Probe verdicts are reported, never turned into exit codes.
fn probe(ctx: &Context, eq: &SteadyState, cert: Option<&CertificateReport>) -> Result<(), Failure> {
    let p = &ctx.cfg.probes;
    let decay = if p.decay {
        let owned;
        let cert = match cert {
            Some(c) => c,
            None => {
                owned = certify(ctx, eq, false, false)?;
                &owned
            }
        };
        Some(run_decay_probe(eq, cert, &decay_datum(eq)?, &p.decay_config)?)
    } else {
        None
    };
    let hypo = if p.hypo {
        let heq;
        let target = match &p.hypo_grid {
            Some(g) if *g != ctx.cfg.grid => {
                heq = equilibrium(&ctx.cfg, g)?;
                &heq
            }
            _ => eq,
        };
        Some(run_hypo_probe(target, &p.hypo_config)?)
    } else {
        None
    };
    let passed = decay.as_ref().map_or(true, |d| d.passed) && hypo.as_ref().map_or(true, |h| h.verdicts.all());
    for line in verdict_lines(&decay, &hypo) {
        eprintln!("{line}");
    }
    write_json(ctx, "probe_report.json", &ProbeBody { decay, hypo, passed })
}

fn verdict_lines(decay: &Option<DecayReport<f64>>, hypo: &Option<HypoReport<f64>>) -> Vec<String> {
    let word = |b: bool| if b { "pass" } else { "FAIL" };
    let mut out = Vec::new();
    if let Some(d) = decay {
        out.push(format!(
            "decay: {} (lambda tested {:.4e}, measured {:.4e}, r2 {:.4}, worst pathwise ratio {:.4})",
            word(d.passed),
            d.lambda_tested,
            d.lambda_measured,
            d.e_fit.r2,
            d.worst_pathwise_ratio
        ));
    }
    if let Some(h) = hypo {
        out.push(format!(
            "hypo: {} (x slope {:.3}, v slope {:.3})",
            word(h.verdicts.all()),
            h.rough.slope_x.slope,
            h.rough.slope_v.slope
        ));
    }
    out
}

pub fn run(ctx: &Context) -> Result<(), Failure> {
    let eq = equilibrium(&ctx.cfg, &ctx.cfg.grid)?;
    let eq_ref = &eq;
    match ctx.command {
        Command::Steady => steady(ctx, eq_ref)?,
        Command::Certify => {
            certify(ctx, eq_ref, ctx.cfg.certificate.duhamel, true)?;
        }
        Command::Evolve => run_evolve(ctx, eq_ref, None)?,
        Command::Probe => probe(ctx, eq_ref, None)?,
        Command::All => {
            steady(ctx, eq_ref)?;
            let cert = certify(ctx, eq_ref, ctx.cfg.certificate.duhamel, true)?;
            run_evolve(ctx, eq_ref, Some(&cert))?;
            probe(ctx, eq_ref, Some(&cert))?;
        }
    }
    write_json(ctx, "manifest.json", &Files { files: outputs(&ctx.out) })
}

#[derive(Serialize)]
struct Files {
    files: Vec<String>,
}

fn outputs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map(|it| it.filter_map(|e| e.ok()).filter_map(|e| e.file_name().into_string().ok()).collect())
        .unwrap_or_default();
    names.retain(|n| n != "manifest.json");
    names.sort();
    names
}
