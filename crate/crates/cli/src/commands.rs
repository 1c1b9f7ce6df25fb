//! The six experiments.

use biparam_core::dyadic::{estimate_pi_good, exact_pi_good, DyadicGrid};
use biparam_core::engine::{averaging_identity_from_field, term_decomposition, SquareField, MIN_MC_TRIALS};
use biparam_core::haar::{product_haar_transform, random_haar_polynomial, random_in_window, HaarBasis, Mesh, ProductMeshFunction};
use biparam_core::journe::{necessity_check, OmegaAnalysis, OpenSetOmega};
use biparam_core::kernel::BiParamKernel;
use biparam_core::rng::stream;
use biparam_core::verify::{
    check_biparam_carleson, check_carleson_standard, check_holder, check_mixed_1, check_mixed_2, check_size,
    CarlesonDirection, EstimateReport, SamplingPlan,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{InputKind, OmegaKind, RunConfig};
use crate::error::CliError;
use crate::io;
use crate::report::{num, stamp, Bundle, Provenance, Table};

const SE_FACTOR: f64 = 3.0;
const EXACT_TOL: f64 = 1e-10;
const CROSS_CHECK_TOL: f64 = 1e-9;
/// Necessity ratios at or below this are rounding noise of a vanishing sum.
const RATIO_NOISE: f64 = 1e-13;

const TAG_PLAN: u64 = 10;
const TAG_INPUTS: u64 = 20;
const TAG_TRIALS: u64 = 30;
const TAG_OMEGA: u64 = 40;
const TAG_PI: u64 = 50;

/// Everything a command needs; built and validated before any work starts.
pub struct Context {
    pub cfg: RunConfig,
    pub prov: Provenance,
    pub pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(cfg: RunConfig, jobs: usize) -> Result<Self, CliError> {
        cfg.validate()?;
        let prov = Provenance::new(cfg.hash(), cfg.seed);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        Ok(Self { cfg, prov, pool })
    }

    /// Ordered parallel map; the result does not depend on the thread count.
    fn par_map<T: Send, F>(&self, n: usize, f: F) -> Result<Vec<T>, CliError>
    where
        F: Fn(usize) -> Result<T, CliError> + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }

    fn tensor_kernel(&self, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<BiParamKernel, CliError> {
        let k = self.cfg.kernel(g1, g2)?;
        if !k.is_tensor() {
            return Err(CliError::Config(format!("kernel {:?} is not a tensor kernel; use tensor-paraproduct or cancellative", k.label)));
        }
        Ok(k)
    }

    fn omega_family(&self, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<Vec<OpenSetOmega>, CliError> {
        let o = &self.cfg.omega;
        if o.kind == OmegaKind::File {
            return o.paths.iter().map(|p| io::read_omega(p, g1, g2)).collect();
        }
        let base = self.cfg.sub_seed(TAG_OMEGA);
        self.par_map(o.count, |k| {
            let mut rng = stream(base, k as u64);
            let staircase = match o.kind {
                OmegaKind::Staircase => true,
                OmegaKind::Mixed => k % 10 >= 7,
                _ => false,
            };
            Ok(if staircase {
                OpenSetOmega::staircase(g1, g2, 2 + k % o.max_rectangles.max(1), &mut rng)?
            } else {
                OpenSetOmega::random_union(g1, g2, 1 + k % o.max_rectangles, &mut rng)?
            })
        })
    }

    fn dump_sets(&self, bundle: &mut Bundle, analyses: &[OmegaAnalysis]) {
        if !self.cfg.omega.dump_sets {
            return;
        }
        for (k, a) in analyses.iter().enumerate() {
            let cells2 = a.omega().grids().1.cell_count();
            bundle.add(format!("omega_{k:03}.csv"), io::omega_to_csv(a.omega()));
            bundle.add(format!("shadows_{k:03}.csv"), io::shadows_to_csv(a.shadows(), cells2));
        }
    }
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    assumption_id: &'a str,
    constant: f64,
    samples: u64,
    witness: &'a [f64],
}

fn report_json(prov: &Provenance, r: &EstimateReport) -> Value {
    stamp(prov, &ReportRecord { assumption_id: &r.assumption_id, constant: r.constant, samples: r.samples, witness: &r.witness })
}

pub fn verify_kernel(ctx: &Context) -> Result<Bundle, CliError> {
    let cfg = &ctx.cfg;
    if cfg.verify.samples == 0 {
        return Err(CliError::Config("verify.samples must be positive".into()));
    }
    let (g1, g2) = cfg.grids()?;
    let kernel = cfg.kernel(&g1, &g2)?;
    let quad = cfg.quadrature()?;
    let plan = SamplingPlan::new(cfg.verify.samples, cfg.sub_seed(TAG_PLAN));
    let cubes = |g: &DyadicGrid| -> Result<Vec<_>, CliError> {
        let mut out = Vec::new();
        for &l in &cfg.verify.carleson_levels {
            out.extend(g.cubes_at(l)?);
        }
        Ok(out)
    };
    let (c1, c2) = (cubes(&g1)?, cubes(&g2)?);
    let family = ctx.omega_family(&g1, &g2)?;
    let jobs = 4 + CarlesonDirection::ALL.len() + 1;
    let reports: Vec<EstimateReport> = ctx.par_map(jobs, |k| {
        Ok(match k {
            0 => check_size(&kernel, &plan)?,
            1 => check_holder(&kernel, &plan)?,
            2 => check_mixed_1(&kernel, &plan)?,
            3 => check_mixed_2(&kernel, &plan)?,
            k if k < jobs - 1 => {
                let dir = CarlesonDirection::ALL[k - 4];
                let (g, c) = if dir.axis() == 0 { (&g1, &c1) } else { (&g2, &c2) };
                check_carleson_standard(&kernel, g, c, dir, &plan, &quad)?
            }
            _ => check_biparam_carleson(&kernel, &g1, &g2, &family, &quad)?,
        })
    })?;

    let mut bundle = Bundle::new();
    let mut table = Table::new(&["assumption_id", "constant", "samples", "witness"]);
    for r in &reports {
        let w = r.witness.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" ");
        table.push(vec![r.assumption_id.clone(), num(r.constant), r.samples.to_string(), w]);
    }
    bundle.pass = reports.iter().all(|r| !r.constant.is_nan()) && reports[0].constant.is_finite();
    bundle.add_json("reports.json", &Value::Array(reports.iter().map(|r| report_json(&ctx.prov, r)).collect()));
    bundle.add_table("reports.csv", &table, &ctx.prov);
    bundle.summary = format!("kernel {}\n{}", kernel.label, table.to_text());
    bundle.add("summary.txt", bundle.summary.clone().into_bytes());
    Ok(bundle)
}

fn mc_inputs(ctx: &Context, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<Vec<ProductMeshFunction>, CliError> {
    let cfg = &ctx.cfg;
    let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
    let (b1, b2) = (HaarBasis::new(g1)?, HaarBasis::new(g2)?);
    let base = cfg.sub_seed(TAG_INPUTS);
    match cfg.mc.input {
        InputKind::Zero => Ok(vec![ProductMeshFunction::zeros(m1, m2)]),
        InputKind::File => {
            let path = cfg.mc.path.as_ref().ok_or_else(|| CliError::Config("mc.input = \"file\" needs mc.path".into()))?;
            Ok(vec![io::read_product_function(path, m1, m2)?])
        }
        InputKind::HaarPolynomial => (0..cfg.mc.inputs)
            .map(|k| Ok(random_haar_polynomial(&b1, &b2, cfg.mc.terms, &mut stream(base, k as u64))?))
            .collect(),
        InputKind::RandomWindow => {
            (0..cfg.mc.inputs).map(|k| Ok(random_in_window(&b1, &b2, &mut stream(base, k as u64))?)).collect()
        }
    }
}

pub fn mc_average(ctx: &Context) -> Result<Bundle, CliError> {
    let cfg = &ctx.cfg;
    if cfg.mc.trials < MIN_MC_TRIALS {
        return Err(CliError::Config(format!("mc.trials must be at least {MIN_MC_TRIALS}, got {}", cfg.mc.trials)));
    }
    let (p1, p2) = (cfg.params1()?, cfg.params2()?);
    let (g1, g2) = cfg.grids()?;
    let kernel = cfg.kernel(&g1, &g2)?;
    let quad = cfg.quadrature()?;
    let inputs = mc_inputs(ctx, &g1, &g2)?;
    let base = cfg.sub_seed(TAG_TRIALS);
    let results = ctx.par_map(inputs.len(), |k| {
        let field = SquareField::compute(&kernel, &inputs[k], &quad)?;
        Ok(averaging_identity_from_field(&field, &p1, &p2, cfg.mc.trials, base.wrapping_add(k as u64))?)
    })?;

    let mut bundle = Bundle::new();
    let mut table = Table::new(&[
        "input", "lhs", "rhs", "standard_error", "deviation_se", "exact", "max_trial_error", "excluded_pairs", "excluded_mass", "pass",
    ]);
    let mut trials = Table::new(&["input", "trial", "value"]);
    let mut json = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let exact = r.pi1.iter().chain(&r.pi2).all(|&p| p == 1.0);
        let max_err = r.per_trial.iter().map(|v| (v - r.lhs).abs()).fold(0.0, f64::max);
        let pass = if exact {
            max_err <= EXACT_TOL * r.lhs.abs().max(f64::MIN_POSITIVE)
        } else {
            r.deviation_in_se() <= SE_FACTOR
        };
        bundle.pass &= pass;
        table.push(vec![
            k.to_string(),
            num(r.lhs),
            num(r.rhs),
            num(r.standard_error),
            num(r.deviation_in_se()),
            exact.to_string(),
            num(max_err),
            r.excluded_pairs.len().to_string(),
            num(r.excluded_mass),
            pass.to_string(),
        ]);
        for (t, v) in r.per_trial.iter().enumerate() {
            trials.push(vec![k.to_string(), t.to_string(), num(*v)]);
        }
        json.push(stamp(
            &ctx.prov,
            &serde_json::json!({
                "input": k, "lhs": r.lhs, "rhs": r.rhs, "standard_error": r.standard_error,
                "trials": r.trials, "exact": exact, "max_trial_error": max_err,
                "excluded_pairs": r.excluded_pairs, "excluded_mass": r.excluded_mass,
                "pi1": r.pi1, "pi2": r.pi2, "pass": pass,
            }),
        ));
    }
    bundle.add_json("mc_average.json", &Value::Array(json));
    bundle.add_table("mc_average.csv", &table, &ctx.prov);
    bundle.add_table("mc_trials.csv", &trials, &ctx.prov);
    bundle.add("mc_average.gp", PLOT_MC.as_bytes().to_vec());
    bundle.summary = table.to_text();
    Ok(bundle)
}

pub fn decompose(ctx: &Context) -> Result<Bundle, CliError> {
    let cfg = &ctx.cfg;
    let (g1, g2) = cfg.grids()?;
    let kernel = ctx.tensor_kernel(&g1, &g2)?;
    let quad = cfg.quadrature()?;
    let (b1, b2) = (HaarBasis::new(&g1)?, HaarBasis::new(&g2)?);
    let base = cfg.sub_seed(TAG_INPUTS);
    let ledgers = ctx.par_map(cfg.decompose.inputs, |k| {
        let f = random_in_window(&b1, &b2, &mut stream(base, k as u64))?;
        let coefs = product_haar_transform(&f, &b1, &b2)?;
        Ok(term_decomposition(&kernel, &coefs, &g1, &g2, &quad)?)
    })?;

    let mut bundle = Bundle::new();
    let mut entries = Table::new(&["input", "row_class", "col_class", "value"]);
    let mut checks = Table::new(&["input", "check", "lhs", "bound", "holds"]);
    let mut cross = Table::new(&["input", "good_sum_error", "car_car_error", "pass"]);
    for (k, l) in ledgers.iter().enumerate() {
        for (c, d, v) in l.entries() {
            entries.push(vec![k.to_string(), c.label().into(), d.label().into(), num(v)]);
        }
        for c in l.checks() {
            bundle.pass &= c.holds;
            checks.push(vec![k.to_string(), c.name, num(c.lhs), num(c.bound), c.holds.to_string()]);
        }
        let (a, b) = l.cross_check_errors();
        let ok = a <= CROSS_CHECK_TOL && b <= CROSS_CHECK_TOL;
        bundle.pass &= ok;
        cross.push(vec![k.to_string(), num(a), num(b), ok.to_string()]);
    }
    bundle.add_table("ledger.csv", &entries, &ctx.prov);
    bundle.add_table("ledger_checks.csv", &checks, &ctx.prov);
    bundle.add_table("ledger_cross_checks.csv", &cross, &ctx.prov);
    bundle.add("ledger.gp", PLOT_LEDGER.as_bytes().to_vec());
    bundle.summary = format!("{}\n{}", checks.to_text(), cross.to_text());
    Ok(bundle)
}

pub fn journe(ctx: &Context) -> Result<Bundle, CliError> {
    let cfg = &ctx.cfg;
    let weights = cfg.journe.weights.weights();
    weights.validate()?;
    let (g1, g2) = cfg.grids()?;
    let family = ctx.omega_family(&g1, &g2)?;
    let c = cfg.shadow_c();
    let analyses = ctx.par_map(family.len(), |k| Ok(OmegaAnalysis::new(&family[k], c)?))?;
    let results = ctx.par_map(analyses.len(), |k| Ok(analyses[k].journe_check(&weights)?))?;

    let mut bundle = Bundle::new();
    let mut table =
        Table::new(&["set", "omega_measure", "tilde_measure", "hat_measure", "rectangles", "capped", "lhs", "rhs", "pass"]);
    for (k, (a, r)) in analyses.iter().zip(&results).enumerate() {
        let m = a.shadows().measures;
        bundle.pass &= r.pass;
        table.push(vec![
            k.to_string(),
            num(m[0]),
            num(m[1]),
            num(m[2]),
            r.rectangles.to_string(),
            r.capped.to_string(),
            num(r.lhs),
            num(r.rhs),
            r.pass.to_string(),
        ]);
    }
    ctx.dump_sets(&mut bundle, &analyses);
    bundle.add_table("journe.csv", &table, &ctx.prov);
    bundle.add("journe.gp", PLOT_JOURNE.as_bytes().to_vec());
    let failures = results.iter().filter(|r| !r.pass).count();
    bundle.summary = format!("{}{} sets, {failures} failures\n", table.to_text(), results.len());
    Ok(bundle)
}

pub fn necessity(ctx: &Context) -> Result<Bundle, CliError> {
    let cfg = &ctx.cfg;
    let (g1, g2) = cfg.grids()?;
    let kernel = ctx.tensor_kernel(&g1, &g2)?;
    let quad = cfg.quadrature()?;
    let family = ctx.omega_family(&g1, &g2)?;
    let c = cfg.shadow_c();
    let n = cfg.grid.n;
    let mut shift1 = vec![0i64; n];
    shift1[0] = (g1.cells_per_axis() / 2) as i64;
    let shift2 = vec![0i64; cfg.grid.m];
    let analyses = ctx.par_map(family.len(), |k| Ok(OmegaAnalysis::new(&family[k], c)?))?;
    let results = ctx.par_map(family.len(), |k| {
        let r = necessity_check(&kernel, &analyses[k], &quad)?;
        let t = if cfg.necessity.translate {
            let moved = family[k].translated(&shift1, &shift2)?;
            Some(necessity_check(&kernel, &OmegaAnalysis::new(&moved, c)?, &quad)?.ratio)
        } else {
            None
        };
        Ok((r, t))
    })?;

    let mut bundle = Bundle::new();
    let mut table = Table::new(&[
        "set", "omega_measure", "hat_measure", "sum", "ratio", "hat_sum", "hat_c_sum", "s1", "s2", "translated_ratio",
    ]);
    let (mut sup, mut sup_t) = (0.0f64, 0.0f64);
    for (k, (r, t)) in results.iter().enumerate() {
        sup = sup.max(r.ratio);
        sup_t = sup_t.max(t.unwrap_or(0.0));
        table.push(vec![
            k.to_string(),
            num(r.omega_measure),
            num(r.hat_measure),
            num(r.sum),
            num(r.ratio),
            num(r.hat_sum),
            num(r.hat_c_sum),
            num(r.s1),
            num(r.s2),
            t.map(num).unwrap_or_default(),
        ]);
    }
    let rel = if sup.max(sup_t) > RATIO_NOISE { (sup - sup_t).abs() / sup } else { 0.0 };
    bundle.pass = sup.is_finite() && (!cfg.necessity.translate || rel <= cfg.necessity.tolerance);
    let summary = serde_json::json!({
        "sets": results.len(), "sup_ratio": sup,
        "translated_sup_ratio": if cfg.necessity.translate { Some(sup_t) } else { None },
        "relative_difference": rel, "pass": bundle.pass,
    });
    bundle.add_json("necessity.json", &stamp(&ctx.prov, &summary));
    bundle.add_table("necessity.csv", &table, &ctx.prov);
    bundle.summary = format!("{}sup ratio {sup:e}, translated {sup_t:e}, relative difference {rel:e}\n", table.to_text());
    Ok(bundle)
}

pub fn pi_good(ctx: &Context) -> Result<Bundle, CliError> {
    let cfg = &ctx.cfg;
    let pc = &cfg.pi_good;
    if pc.trials < 2 {
        return Err(CliError::Config("pi_good.trials must be at least 2".into()));
    }
    let p = cfg.params1()?;
    let exact = exact_pi_good(&p, pc.level)?;
    let base = cfg.sub_seed(TAG_PI);
    let estimates = ctx.par_map(pc.cubes.len(), |k| {
        Ok(estimate_pi_good(&p, pc.level, &pc.cubes[k], pc.trials, base.wrapping_add(k as u64))?)
    })?;

    let mut bundle = Bundle::new();
    let mut table = Table::new(&["cube", "level", "estimate", "standard_error", "trials", "exact", "z_vs_first"]);
    for (k, e) in estimates.iter().enumerate() {
        let first = &estimates[0];
        let se = (e.standard_error.powi(2) + first.standard_error.powi(2)).sqrt();
        let d = (e.estimate - first.estimate).abs();
        let z = if d == 0.0 { 0.0 } else { d / se };
        bundle.pass &= z <= SE_FACTOR;
        let idx = pc.cubes[k].iter().map(|v| v.to_string()).collect::<Vec<_>>().join(":");
        table.push(vec![idx, pc.level.to_string(), num(e.estimate), num(e.standard_error), e.trials.to_string(), num(exact), num(z)]);
    }
    bundle.add_table("pi_good.csv", &table, &ctx.prov);
    bundle.summary = table.to_text();
    Ok(bundle)
}

const PLOT_MC: &str = "\
# gnuplot: lhs against rhs of the averaging identity, with 3 SE bars
set datafile separator ','
set key autotitle columnhead
set xlabel 'lhs (full integral)'
set ylabel 'rhs (reweighted good sum)'
set terminal pngcairo size 800,600
set output 'mc_average.png'
plot 'mc_average.csv' using 5:6:(3*column(7)) with yerrorbars title 'inputs', x title 'lhs = rhs'
";

const PLOT_LEDGER: &str = "\
# gnuplot: restricted sums S_{C,D} of the first input, log scale
set datafile separator ','
set logscale y
set style data histograms
set style fill solid
set xtics rotate by -60
set terminal pngcairo size 1200,600
set output 'ledger.png'
plot '< awk -F, \"NR==1 || $4==0\" ledger.csv' using 7:xtic(stringcolumn(5).\"|\".stringcolumn(6)) title 'S'
";

const PLOT_JOURNE: &str = "\
# gnuplot: Journé lhs against the bound
set datafile separator ','
set xlabel 'rhs'
set ylabel 'lhs'
set terminal pngcairo size 800,600
set output 'journe.png'
plot 'journe.csv' every ::1 using 11:10 title 'sets', x title 'lhs = rhs'
";
