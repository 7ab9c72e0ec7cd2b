//! Experiment runner: flag and config parsing, suite dispatch and reports.
//!
//! Exit status: 0 when every certified check passes, 1 when a check fails or a
//! series diverges, 2 for usage errors, 3 for runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::report::{Cell, Report};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Harish-Chandra function on sphere representatives against the closed form
    HcFunction,
    /// Patterson density against the exact masses, C_q and Ahlfors regularity
    Density,
    /// Fatou trace of P_0 1_{cyl} along a weak nontangential domain
    Fatou,
    /// Weak (1,1) inequality for the maximal function
    Maximal,
    /// Cumulative sums S(n) against the assembled cubic
    RdSum,
    /// Sup-norms of annulus averages and the dual L^1 bound
    AnnulusAverage,
    /// Annulus sums of squared coefficients and the shadow-pair count
    Equidistribution,
    /// Convolution-algebra constants, closure and l^2 checks
    Schwartz,
    /// Cauchy-Schwarz bound through P_0 on random non-negative triples
    CsLemma,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::HcFunction => "hc-function",
            Command::Density => "density",
            Command::Fatou => "fatou",
            Command::Maximal => "maximal",
            Command::RdSum => "rd-sum",
            Command::AnnulusAverage => "annulus-average",
            Command::Equidistribution => "equidistribution",
            Command::Schwartz => "schwartz",
            Command::CsLemma => "cs-lemma",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        use Command::*;
        [HcFunction, Density, Fatou, Maximal, RdSum, AnnulusAverage, Equidistribution, Schwartz, CsLemma]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

/// Every option; a config file uses the same names (kebab-case keys).
#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Opts {
    /// Command to run when none is given on the command line (config only)
    #[arg(skip)]
    pub command: Option<String>,
    /// Group model: free:<k> or zfp:<p>,<q>
    #[arg(long, global = true)]
    pub group: Option<String>,
    /// Cylinder depth of test functions or tabulated densities
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Refuse enumerations predicted to exceed this many elements
    #[arg(long, global = true)]
    pub cap: Option<u64>,
    /// Output file (stdout when absent)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Add a generation timestamp to the report header
    #[arg(long, global = true)]
    #[serde(default)]
    pub timestamp: bool,
    #[arg(long, global = true)]
    pub max_n: Option<usize>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub n_min: Option<usize>,
    #[arg(long, global = true)]
    pub n_max: Option<usize>,
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    #[arg(long, global = true)]
    pub t: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Aperture C of the approach domain
    #[arg(long, global = true)]
    pub aperture: Option<f64>,
    #[arg(long, global = true)]
    pub radius: Option<usize>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub checks: Option<usize>,
    /// Structured test inputs
    #[arg(long, global = true)]
    pub inputs: Option<usize>,
    /// Random test inputs
    #[arg(long, global = true)]
    pub random: Option<usize>,
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    #[arg(long, global = true)]
    pub triples: Option<usize>,
    /// Boundary point such as a^inf or b(ab)^inf
    #[arg(long, global = true)]
    pub direction: Option<String>,
    /// Cylinder word of the indicator under test
    #[arg(long, global = true)]
    pub cylinder: Option<String>,
    #[arg(long, global = true)]
    pub u: Option<String>,
    #[arg(long, global = true)]
    pub w: Option<String>,
    #[arg(long, global = true)]
    pub slack: Option<f64>,
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    /// s - alpha for the Patterson orbit sum
    #[arg(long, global = true)]
    pub s_offset: Option<f64>,
    /// Orbit radius N of the Patterson sum
    #[arg(long, global = true)]
    pub orbit_radius: Option<usize>,
    #[arg(long, global = true)]
    pub cq_max: Option<f64>,
    /// Word length from which the Fatou tolerance applies
    #[arg(long, global = true)]
    pub tail_from: Option<usize>,
    /// Support radius of random convolution-algebra elements
    #[arg(long, global = true)]
    pub support: Option<usize>,
}

macro_rules! overlay {
    ($a:ident, $b:ident; $($f:ident),*) => {
        Opts { command: $a.command.or($b.command), timestamp: $a.timestamp || $b.timestamp, $($f: $a.$f.or($b.$f)),* }
    };
}

impl Opts {
    /// Flags win over the file.
    fn over(self, file: Opts) -> Opts {
        let a = self;
        let b = file;
        overlay!(a, b; group, depth, seed, threads, cap, out, format, max_n, n, n_min, n_max, rho, t, epsilon,
            aperture, radius, max_len, checks, inputs, random, levels, triples, direction, cylinder, u, w, slack,
            tolerance, s_offset, orbit_radius, cq_max, tail_from, support)
    }
}

#[derive(Debug, Parser)]
#[command(name = "hyplab", version, about = "Boundary representation experiments on free groups and free products of cyclic groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// TOML file with the same keys as the flags (plus `command`)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub opts: Opts,
}

/// Parses arguments, runs the suite and writes the report; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let file = match &cli.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(text) => match toml::from_str::<Opts>(&text) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: config {}: {e}", p.display());
                    return EXIT_USAGE;
                }
            },
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", p.display());
                return EXIT_USAGE;
            }
        },
        None => Opts::default(),
    };
    let opts = cli.opts.over(file);
    let command = match (cli.command, opts.command.as_deref()) {
        (Some(c), _) => c,
        (None, Some(name)) => match Command::from_name(name) {
            Some(c) => c,
            None => {
                eprintln!("error: unknown command `{name}` in config");
                return EXIT_USAGE;
            }
        },
        (None, None) => {
            eprintln!("error: no command given (pass a subcommand or set `command` in --config)\n");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_help());
            return EXIT_USAGE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(opts.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_ERROR;
        }
    };
    let result = pool.install(|| run(command, &opts));
    match result {
        Ok(report) => {
            if let Err(e) = emit(&report, &opts) {
                eprintln!("error: {e}");
                return EXIT_ERROR;
            }
            if report.certified { EXIT_OK } else { EXIT_FAILED }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => EXIT_FAILED,
                _ => EXIT_ERROR,
            }
        }
    }
}

fn emit(report: &Report, opts: &Opts) -> Result<()> {
    let timestamp = opts.timestamp.then(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    });
    let text = match opts.format.unwrap_or(Format::Csv) {
        Format::Csv => report.to_csv(timestamp),
        Format::Json => report.to_json(timestamp),
    };
    match &opts.out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Resolved settings shared by every suite.
struct Ctx {
    model: crate::GroupModel,
    seed: u64,
    cap: u64,
    /// Lower bound on the tabulated density depth, raised when a run reports
    /// that it needs deeper cylinders.
    depth_floor: usize,
}

fn context(opts: &Opts) -> Result<Ctx> {
    let model = crate::GroupModel::parse(opts.group.as_deref().unwrap_or("free:2"))?;
    Ok(Ctx { model, seed: opts.seed.unwrap_or(0), cap: opts.cap.unwrap_or(crate::group_model::DEFAULT_CAP), depth_floor: 0 })
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Precondition(format!("--{name} must be positive, got {v}")))
    }
}

fn epsilon_of(opts: &Opts) -> Result<f64> {
    let e = opts.epsilon.unwrap_or(1.0);
    if !(e > 0.0 && e <= 1.0) {
        return Err(Error::Precondition(format!("--epsilon must lie in (0, 1], got {e}")));
    }
    Ok(e)
}

/// Closed-form density for free groups, Patterson density otherwise.
fn working_density(ctx: &Ctx, opts: &Opts, depth: usize) -> Result<crate::boundary_measure::ConformalDensity> {
    use crate::boundary_measure::{exact_free_group_density, patterson_density_capped};
    let e = ctx.model.identity();
    let depth = depth.max(ctx.depth_floor);
    if ctx.model.is_free() {
        exact_free_group_density(&ctx.model, &e, depth)
    } else {
        let s = ctx.model.alpha() + positive("s-offset", opts.s_offset.unwrap_or(0.05))?;
        let radius = opts.orbit_radius.unwrap_or(depth + 6);
        // Tables keep every level, so they get a tenth of the element cap.
        patterson_density_capped(&ctx.model, &e, s, radius, depth, ctx.cap / 10)
    }
}

fn base_report(command: Command, ctx: &Ctx, density: Option<&crate::boundary_measure::ConformalDensity>) -> Report {
    let mut r = Report::new(command.name());
    r.provenance("model", ctx.model.name());
    r.provenance("alpha", ctx.model.alpha());
    r.provenance("delta", ctx.model.delta());
    if let Some(d) = density {
        r.provenance("c_q", d.c_q());
        r.provenance("density_depth", d.max_depth());
    }
    r.param("seed", ctx.seed);
    r.param("cap", ctx.cap);
    r
}

pub fn run(command: Command, opts: &Opts) -> Result<Report> {
    let mut ctx = context(opts)?;
    // Tabulated densities are built at a guessed depth; if the kernel asks for
    // more, rebuild at the requested depth and start over. The orbit cap ends
    // the loop for requests that are out of reach.
    loop {
        match run_once(command, &ctx, opts) {
            Err(Error::InsufficientDepth { required, .. }) if !ctx.model.is_free() && required > ctx.depth_floor => {
                ctx.depth_floor = required;
            }
            other => return other,
        }
    }
}

fn run_once(command: Command, ctx: &Ctx, opts: &Opts) -> Result<Report> {
    match command {
        Command::HcFunction => hc_function(&ctx, opts),
        Command::Density => density(&ctx, opts),
        Command::Fatou => fatou(&ctx, opts),
        Command::Maximal => maximal(&ctx, opts),
        Command::RdSum => rd_sum(&ctx, opts),
        Command::AnnulusAverage => annulus_average(&ctx, opts),
        Command::Equidistribution => equidistribution(&ctx, opts),
        Command::Schwartz => schwartz(&ctx, opts),
        Command::CsLemma => cs_lemma(&ctx, opts),
    }
}

/// phi(n) = (1 + n (q-1)/(q+1)) q^{-n/2}, q = 2k - 1.
fn free_closed_form(rank: u8, n: usize) -> f64 {
    let q = (2 * rank as usize - 1) as f64;
    (1.0 + n as f64 * (q - 1.0) / (q + 1.0)) * q.powf(-(n as f64) / 2.0)
}

fn hc_function(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::poisson_kernel::{fit_harish_chandra_estimates, harish_chandra, sphere_representatives};
    let max_n = opts.max_n.unwrap_or(20);
    let density = working_density(ctx, opts, opts.depth.unwrap_or(6))?;
    let model = &ctx.model;
    let mut r = base_report(Command::HcFunction, ctx, Some(&density));
    r.param("max-n", max_n);
    r.columns(&["n", "word", "phi", "phi_scaled", "closed_form", "ratio"]);
    let rank = match model.backend() {
        crate::Backend::Free { rank } => Some(rank),
        _ => None,
    };
    let mut worst: f64 = 0.0;
    for n in 0..=max_n {
        for w in sphere_representatives(model, n) {
            let phi = harish_chandra(&density, &model.element_unchecked(w.clone()))?;
            let scaled = phi * (model.alpha() * n as f64 / 2.0).exp();
            let (closed, ratio) = match rank {
                Some(k) => {
                    let c = free_closed_form(k, n);
                    worst = worst.max((phi / c - 1.0).abs());
                    (Cell::Float(c), Cell::Float(phi / c))
                }
                None => (Cell::Empty, Cell::Empty),
            };
            r.row(vec![Cell::Int(n as i64), Cell::Text(model.format_word(&w)), phi.into(), scaled.into(), closed, ratio]);
        }
    }
    let fit = if max_n >= 2 { Some(fit_harish_chandra_estimates(&density, 1, max_n)) } else { None };
    let fit_ok = match &fit {
        Some(Ok(f)) => {
            r.summary("q1", vec![f.q1.0, f.q1.1]);
            r.summary("q2", vec![f.q2.0, f.q2.1]);
            true
        }
        Some(Err(e)) => {
            r.summary("fit_error", e.to_string());
            false
        }
        None => true,
    };
    if rank.is_some() {
        r.summary("max_relative_error", worst);
    }
    r.certified = fit_ok && worst <= 1e-10;
    Ok(r)
}

fn density(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::boundary_measure::{
        certify_ahlfors_regularity, exact_free_group_density, patterson_density_capped, VisualMetricParams,
    };
    let model = &ctx.model;
    let depth = opts.depth.unwrap_or(3);
    let radius = opts.orbit_radius.unwrap_or(16);
    let offset = positive("s-offset", opts.s_offset.unwrap_or(0.05))?;
    let tolerance = opts.tolerance.unwrap_or(0.02);
    let cq_max = opts.cq_max.unwrap_or(1.2);
    let eps = epsilon_of(opts)?;
    let e = model.identity();
    let pd = patterson_density_capped(model, &e, model.alpha() + offset, radius, depth, ctx.cap / 10)?.with_epsilon(eps);
    let exact = if model.is_free() { Some(exact_free_group_density(model, &e, depth)?) } else { None };
    let mut r = base_report(Command::Density, ctx, Some(&pd));
    r.param("depth", depth);
    r.param("orbit-radius", radius);
    r.param("s-offset", offset);
    r.param("tolerance", tolerance);
    r.param("cq-max", cq_max);
    r.param("epsilon", eps);
    r.columns(&["word", "mass", "exact_mass", "abs_diff"]);
    let mut worst: f64 = 0.0;
    for w in model.words_of_length(depth) {
        let m = pd.mass(&w)?;
        let (ex, diff) = match &exact {
            Some(d) => {
                let x = d.mass(&w)?;
                worst = worst.max((m - x).abs());
                (Cell::Float(x), Cell::Float((m - x).abs()))
            }
            None => (Cell::Empty, Cell::Empty),
        };
        r.row(vec![Cell::Text(model.format_word(&w)), m.into(), ex, diff]);
    }
    let params = VisualMetricParams::new(model, eps)?;
    let reg = certify_ahlfors_regularity(&pd, &params, depth)?;
    r.summary("ahlfors_dimension", reg.dimension);
    r.summary("ahlfors_k", reg.k);
    r.summary("c_q", pd.c_q());
    if exact.is_some() {
        r.summary("max_abs_diff", worst);
    }
    r.certified = worst <= tolerance && pd.c_q() <= cq_max && reg.k.is_finite();
    Ok(r)
}

fn fatou(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::boundary_measure::Direction;
    use crate::fatou_lab::{cylinder_indicator, fatou_experiment, ApproachDomain};
    let model = &ctx.model;
    let v = match opts.direction.as_deref() {
        Some(text) => Direction::parse(model, text)?,
        None => Direction::canonical_extension(model, &[model.smallest_child(None)])?,
    };
    let cyl = model.parse_element(opts.cylinder.as_deref().unwrap_or("a"))?;
    let aperture = positive("aperture", opts.aperture.unwrap_or(1.0))?;
    let eps = epsilon_of(opts)?;
    let n_min = opts.n_min.unwrap_or(1);
    let n_max = opts.n_max.unwrap_or(25);
    let tail_from = opts.tail_from.unwrap_or(n_max);
    let tolerance = opts.tolerance.unwrap_or(1e-3);
    let density = working_density(ctx, opts, opts.depth.unwrap_or(cyl.len().max(6)))?.with_epsilon(eps);
    let dom = ApproachDomain::new(model, v.clone(), aperture, eps)?;
    let f = cylinder_indicator(model, cyl.word());
    let trace = fatou_experiment(&density, &f, &dom, n_min, n_max, ctx.cap)?;
    let mut r = base_report(Command::Fatou, ctx, Some(&density));
    r.param("direction", v.format(model));
    r.param("cylinder", model.format(&cyl));
    r.param("aperture", aperture);
    r.param("epsilon", eps);
    r.param("n-min", n_min);
    r.param("n-max", n_max);
    r.param("tail-from", tail_from);
    r.param("tolerance", tolerance);
    r.columns(&["n", "y", "in_domain", "p0f", "error"]);
    for row in &trace.rows {
        r.row(vec![
            Cell::Int(row.n as i64),
            Cell::Text(model.format_word(&row.y)),
            Cell::Bool(row.in_domain),
            row.p0f.into(),
            row.error.into(),
        ]);
    }
    let tail = trace.max_error_from(tail_from);
    r.summary("limit", trace.limit);
    r.summary("max_error_from_tail", tail);
    r.summary("envelope_nonincreasing", trace.envelope_nonincreasing());
    r.certified = tail <= tolerance && trace.envelope_nonincreasing();
    Ok(r)
}

fn maximal(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::fatou_lab::{check_weak_11, level_grid, weak_11_inputs};
    let depth = opts.depth.unwrap_or(6);
    let eps = epsilon_of(opts)?;
    let density = working_density(ctx, opts, depth)?.with_epsilon(eps);
    let structured = opts.inputs.unwrap_or(20);
    let random = opts.random.unwrap_or(20);
    let levels = level_grid(opts.levels.unwrap_or(10));
    let mut r = base_report(Command::Maximal, ctx, Some(&density));
    r.param("depth", depth);
    r.param("epsilon", eps);
    r.param("inputs", structured);
    r.param("random", random);
    r.param("levels", levels.len());
    r.columns(&["input", "level", "superlevel", "vitali_bound", "dyadic_bound", "vitali_ok", "dyadic_ok"]);
    let mut all_vitali = true;
    let mut all_dyadic = true;
    for (id, nu) in weak_11_inputs(&ctx.model, depth, structured, random, ctx.seed) {
        let rep = check_weak_11(&density, &id, &nu, &levels, depth)?;
        for i in 0..levels.len() {
            r.row(vec![
                Cell::Text(id.clone()),
                levels[i].into(),
                rep.superlevel[i].into(),
                rep.vitali_bound[i].into(),
                rep.dyadic_bound[i].into(),
                Cell::Bool(rep.superlevel[i] <= rep.vitali_bound[i] + 1e-12),
                Cell::Bool(rep.superlevel[i] <= rep.dyadic_bound[i] + 1e-12),
            ]);
        }
        all_vitali &= rep.vitali_ok;
        all_dyadic &= rep.dyadic_ok;
    }
    r.summary("vitali_ok", all_vitali);
    r.summary("dyadic_ok", all_dyadic);
    r.certified = all_vitali && all_dyadic;
    Ok(r)
}

/// Non-negative step function of unit L^2 norm.
pub fn random_unit<R: Rng>(
    density: &crate::boundary_measure::ConformalDensity,
    depth: usize,
    rng: &mut R,
) -> Result<crate::boundary_rep::StepFunction> {
    let f = crate::boundary_rep::StepFunction::random_nonnegative(density.model(), depth, rng);
    let n = f.l2_norm(density)?;
    Ok(f.scale(1.0 / n))
}

fn rd_sum(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::boundary_rep::StepFunction;
    use crate::decay_suite::{rd_constants, rd_sum_with};
    let n = opts.n.unwrap_or(10);
    let depth = opts.depth.unwrap_or(4);
    let count = opts.random.unwrap_or(10);
    let density = working_density(ctx, opts, depth.max(n + 2))?;
    let constants = rd_constants(&density, n, ctx.cap)?;
    let mut r = base_report(Command::RdSum, ctx, Some(&density));
    r.param("n", n);
    r.param("depth", depth);
    r.param("random", count);
    r.columns(&["xi", "n", "sphere_sum", "s", "q", "cubic_ratio", "certified"]);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut family = vec![("one".to_string(), StepFunction::constant(&ctx.model, 0, 1.0))];
    for i in 0..count {
        family.push((format!("random:{i}"), random_unit(&density, depth, &mut rng)?));
    }
    let mut certified = true;
    let mut envelope = true;
    let mut sup_ratio: f64 = 0.0;
    for (id, xi) in &family {
        let rep = rd_sum_with(&density, xi, &constants, n, ctx.cap)?;
        for row in &rep.rows {
            r.row(vec![
                Cell::Text(id.clone()),
                Cell::Int(row.n as i64),
                row.sphere_sum.into(),
                row.s.into(),
                row.q.into(),
                row.cubic_ratio.into(),
                Cell::Bool(row.certified),
            ]);
        }
        certified &= rep.certified() && rep.monotone();
        envelope &= rep.ratio_within_envelope(5.min(n));
        sup_ratio = sup_ratio.max(rep.max_cubic_ratio());
    }
    r.summary("cubic", constants.cubic().to_vec());
    r.summary("q2", vec![constants.q2.0, constants.q2.1]);
    r.summary("m", constants.m);
    r.summary("c_prime", constants.c_prime);
    r.summary("sup_cubic_ratio", sup_ratio);
    r.summary("ratio_within_envelope", envelope);
    r.certified = certified && envelope;
    Ok(r)
}

fn annulus_average(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::boundary_rep::StepFunction;
    use crate::decay_suite::{annulus_average, dual_l1_check, minimal_resolution};
    let n_min = opts.n_min.or(opts.n).unwrap_or(4);
    let n_max = opts.n_max.or(opts.n).unwrap_or(10).max(n_min);
    let rho = opts.rho.unwrap_or(1.0);
    let depth = opts.depth.unwrap_or(3);
    let count = opts.random.unwrap_or(5);
    let density = working_density(ctx, opts, crate::group_model::annulus_bounds(n_max, rho).1 + 1)?;
    let mut r = base_report(Command::AnnulusAverage, ctx, Some(&density));
    r.param("n-min", n_min);
    r.param("n-max", n_max);
    r.param("rho", rho);
    r.param("depth", depth);
    r.param("random", count);
    r.columns(&[
        "n", "rho", "count", "resolution", "sup", "integral", "f", "averaged", "pairing", "agreement", "l1", "holds",
    ]);
    let model = &ctx.model;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let first = model.words_of_length(1)[0].clone();
    let mut family = vec![
        ("one".to_string(), StepFunction::constant(model, 0, 1.0)),
        (format!("indicator:{}", model.format_word(&first)), StepFunction::indicator(model, 1, &first)),
    ];
    for i in 0..count {
        let f = StepFunction::random_nonnegative(model, depth, &mut rng);
        let l1 = f.l1_norm(&density)?;
        family.push((format!("random:{i}"), f.scale(1.0 / l1)));
    }
    let mut sups = Vec::new();
    let mut dual_ok = true;
    for n in n_min..=n_max {
        let res = minimal_resolution(&density, n, rho);
        let avg = annulus_average(&density, n, rho, res, ctx.cap)?;
        sups.push(avg.sup);
        for (id, f) in &family {
            let d = dual_l1_check(&density, f, &avg, ctx.cap)?;
            dual_ok &= d.holds && d.consistent;
            r.row(vec![
                Cell::Int(n as i64),
                rho.into(),
                Cell::Int(avg.count as i64),
                Cell::Int(res as i64),
                avg.sup.into(),
                avg.integral.into(),
                Cell::Text(id.clone()),
                d.averaged.re.into(),
                d.pairing.re.into(),
                d.agreement.into(),
                d.l1.into(),
                Cell::Bool(d.holds && d.consistent),
            ]);
        }
    }
    let half = (n_max - n_min) / 2 + 1;
    let lower = sups[..half].iter().copied().fold(0.0, f64::max);
    let all = sups.iter().copied().fold(0.0, f64::max);
    r.summary("m", all);
    r.summary("m_lower_half", lower);
    r.summary("stable", all <= 1.05 * lower);
    r.summary("dual_ok", dual_ok);
    r.certified = all <= 1.05 * lower && dual_ok;
    Ok(r)
}

fn normalized_indicator(
    density: &crate::boundary_measure::ConformalDensity,
    w: &[crate::Letter],
) -> Result<crate::boundary_rep::StepFunction> {
    let f = crate::boundary_rep::StepFunction::indicator(density.model(), w.len(), w);
    let n = f.l2_norm(density)?;
    Ok(f.scale(1.0 / n))
}

fn equidistribution(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::decay_suite::{equidistribution_trace, fit_roblin_constant, roblin_experiment};
    let model = &ctx.model;
    let rho = opts.rho.unwrap_or(1.0);
    let n_min = opts.n_min.unwrap_or(4);
    let n_max = opts.n_max.unwrap_or(10).max(n_min);
    let slack = opts.slack.unwrap_or(0.25);
    let u = model.parse_element(opts.u.as_deref().unwrap_or("a"))?;
    let w = model.parse_element(opts.w.as_deref().unwrap_or("a"))?;
    let density = working_density(ctx, opts, opts.depth.unwrap_or(u.len().max(w.len()).max(3)))?;
    let f = normalized_indicator(&density, u.word())?;
    let g = normalized_indicator(&density, w.word())?;
    let window = (n_min, n_max);
    let k = fit_roblin_constant(&density, rho, window, ctx.cap)?;
    let rep = roblin_experiment(&density, &f, &g, rho, window, k, slack, ctx.cap)?;
    let equi = equidistribution_trace(&density, u.word(), w.word(), window, ctx.cap)?;
    let mut r = base_report(Command::Equidistribution, ctx, Some(&density));
    r.param("rho", rho);
    r.param("n-min", n_min);
    r.param("n-max", n_max);
    r.param("slack", slack);
    r.param("u", model.format(&u));
    r.param("w", model.format(&w));
    r.columns(&[
        "n", "count", "raw_sum", "q", "ratio", "ball_count", "normalized", "target", "equi_ratio",
    ]);
    for (row, e) in rep.rows.iter().zip(&equi) {
        r.row(vec![
            Cell::Int(row.n as i64),
            Cell::Int(row.count as i64),
            row.raw_sum.into(),
            row.q.into(),
            row.ratio.into(),
            Cell::Int(e.count as i64),
            e.normalized.into(),
            e.target.into(),
            e.ratio.into(),
        ]);
    }
    r.summary("fitted_constant", rep.fitted_constant);
    r.summary("max_ratio", rep.max_ratio);
    r.summary("caveat", rep.caveat);
    r.certified = rep.certified;
    Ok(r)
}

fn schwartz(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::poisson_kernel::sphere_representatives;
    use crate::schwartz_algebra::{
        check_algebra_closure, check_l2_boundedness, critical_degree, trick2_constant, trick2_sum, PhiWeights,
        SchwartzElement,
    };
    let model = &ctx.model;
    let t = opts.t.unwrap_or(4.0);
    if !(t >= 0.0) {
        return Err(Error::Precondition(format!("--t must be non-negative, got {t}")));
    }
    if !model.is_free() {
        // The trick2 tails come from the sphere-constant free phi.
        return Err(Error::Unsupported(format!("schwartz needs a free group, got {}", model.name())));
    }
    let radius = opts.radius.unwrap_or(12);
    let max_len = opts.max_len.unwrap_or(6);
    let checks = opts.checks.unwrap_or(50);
    let support = opts.support.unwrap_or(3);
    let density = working_density(ctx, opts, opts.depth.unwrap_or(6))?;
    let weights = PhiWeights::new(&density, radius + 2 + max_len + 8)?;
    let t0 = critical_degree(&density)?;
    let mut r = base_report(Command::Schwartz, ctx, Some(&density));
    r.param("t", t);
    r.param("radius", radius);
    r.param("max-len", max_len);
    r.param("checks", checks);
    r.param("support", support);
    r.columns(&["kind", "id", "ratio", "ratio_next", "measured", "bound", "certified"]);
    let mut ratios = Vec::new();
    let mut max_change: f64 = 0.0;
    let mut divergent = false;
    for len in 0..=max_len {
        for (i, w) in sphere_representatives(model, len).into_iter().enumerate() {
            let g = model.element_unchecked(w);
            let a = trick2_sum(&weights, &g, t, radius.max(len + 2), ctx.cap)?;
            let b = trick2_sum(&weights, &g, t, radius.max(len + 2) + 2, ctx.cap)?;
            divergent |= a.divergent;
            let change = (b.ratio / a.ratio - 1.0).abs();
            max_change = max_change.max(change);
            ratios.push(a.ratio);
            r.row(vec![
                Cell::Text("trick2".into()),
                Cell::Text(format!("{len}:{i}:{}", model.format(&g))),
                a.ratio.into(),
                b.ratio.into(),
                a.ratio_upper.map(Cell::Float).unwrap_or(Cell::Empty),
                Cell::Empty,
                Cell::Bool(!a.divergent),
            ]);
        }
    }
    let spread = ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min);
    r.summary("critical_degree", t0);
    r.summary("divergent", divergent);
    r.summary("spread", spread);
    r.summary("max_change", max_change);
    if divergent {
        r.divergent = true;
        r.certified = false;
        return Ok(r);
    }
    let c_t = trick2_constant(&weights, t, radius, max_len, ctx.cap)?;
    r.summary("c_t", c_t);
    r.summary("b_t", 2f64.powf(t + 1.0) * c_t);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut all = true;
    for i in 0..checks {
        let f1 = SchwartzElement::random(model, support, t, 0.5, &mut rng, ctx.cap)?;
        let f2 = SchwartzElement::random(model, support, t, 0.5, &mut rng, ctx.cap)?;
        let c = check_algebra_closure(&weights, &f1, &f2, c_t, ctx.cap)?;
        all &= c.certified;
        r.row(vec![
            Cell::Text("closure".into()),
            Cell::Int(i as i64),
            Cell::Empty,
            Cell::Empty,
            c.measured_constant.into(),
            c.bound_constant.into(),
            Cell::Bool(c.certified),
        ]);
    }
    for i in 0..checks {
        let f = SchwartzElement::random(model, support, t, 0.5, &mut rng, ctx.cap)?;
        let h = SchwartzElement::random(model, support + 1, 0.0, 0.5, &mut rng, ctx.cap)?;
        let c = check_l2_boundedness(&weights, &f, &h, c_t, ctx.cap)?;
        all &= c.certified;
        r.row(vec![
            Cell::Text("l2".into()),
            Cell::Int(i as i64),
            Cell::Empty,
            Cell::Empty,
            c.lhs.into(),
            c.rhs.into(),
            Cell::Bool(c.certified),
        ]);
    }
    r.certified = all;
    Ok(r)
}

fn cs_lemma(ctx: &Ctx, opts: &Opts) -> Result<Report> {
    use crate::boundary_rep::{check_cs_poisson, StepFunction};
    let model = &ctx.model;
    let triples = opts.triples.unwrap_or(500);
    let max_len = opts.max_len.unwrap_or(6);
    let depth = opts.depth.unwrap_or(4);
    let density = working_density(ctx, opts, depth + max_len + 1)?;
    let mut r = base_report(Command::CsLemma, ctx, Some(&density));
    r.param("triples", triples);
    r.param("max-len", max_len);
    r.param("depth", depth);
    r.columns(&["id", "gamma", "lhs", "rhs", "slack", "holds"]);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut violations = 0usize;
    for i in 0..triples {
        let gamma = random_element(model, max_len, &mut rng);
        let xi = StepFunction::random_nonnegative(model, depth, &mut rng);
        let eta = StepFunction::random_nonnegative(model, depth, &mut rng);
        let c = check_cs_poisson(&density, &gamma, &xi, &eta)?;
        violations += usize::from(!c.holds);
        r.row(vec![
            Cell::Int(i as i64),
            Cell::Text(model.format(&gamma)),
            c.lhs.into(),
            c.rhs.into(),
            c.slack.into(),
            Cell::Bool(c.holds),
        ]);
    }
    r.summary("violations", violations);
    r.certified = violations == 0;
    Ok(r)
}

/// Uniform length in 0..=max_len, then uniform letters along the tree.
pub fn random_element<R: Rng>(model: &crate::GroupModel, max_len: usize, rng: &mut R) -> crate::GroupElement {
    let len = rng.gen_range(0..=max_len);
    let mut w = Vec::with_capacity(len);
    for _ in 0..len {
        let kids = model.children(w.last().copied());
        w.push(kids[rng.gen_range(0..kids.len())]);
    }
    model.element(w).expect("built letter by letter")
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<Complex64> for Cell {
    fn from(v: Complex64) -> Self {
        Cell::Float(v.re)
    }
}
