use clap::{Args, Parser, Subcommand, ValueEnum};
use diracwave::adjoint_inversion::{evaluate, finite_difference, Preset};
use diracwave::experiments::{forward_all, observations, run_experiment, tr_json, ExperimentConfig};
use diracwave::greens_slab::PotentialRep;
use diracwave::linearized::{born_forward, full_keys, invert_full, reduce_scalar, invert_scalar, v_hat, scalar_keys, SampleKey};
use diracwave::spectral_basis::{mode_list, YProfile};
use diracwave::tr_merge::{extract_smatrix, TRMatrix};
use diracwave::{Error, Result, C64};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "diracwave", version, about = "Scattering and inverse scattering for a Dirac domain wall")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// TR and S matrices of the reference potential.
    Forward(Common),
    /// Linearized (Born) data of the reference potential.
    Born(Common),
    /// Closed-form inversion of linearized data at fixed frequencies.
    InvertLinear {
        #[command(flatten)]
        common: Common,
        /// Frequencies to invert at.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.7, 1.3])]
        xi: Vec<f64>,
        #[arg(long, value_enum, default_value_t = LinearMode::Full)]
        mode: LinearMode,
    },
    /// Adjoint gradient descent.
    Reconstruct(Common),
    /// Quick invariant checks on the configuration.
    Verify(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum LinearMode {
    /// Scalar potential in the rescaled-Hermite profile.
    Scalar,
    /// All four Pauli channels.
    Full,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: exp1..exp4, exp1-small, exp2-small, ...
    #[arg(long, default_value = "exp2-small")]
    preset: String,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    ne: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Observation set: M0, MA, MB, MT or MR.
    #[arg(long)]
    obs: Option<Preset>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(v) = self.nx {
            c.n_x = v;
        }
        if let Some(v) = self.ny {
            c.n_y = v;
        }
        if let Some(v) = self.ne {
            c.n_e = v;
        }
        if let Some(v) = self.sigma {
            c.sigma = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.obs {
            c.obs = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = self.iters {
            c.i_max = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v)?)?;
    Ok(p)
}

fn pair(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

fn forward(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let pot = cfg.reference_potential()?;
    let trs = forward_all(&pot, &cfg.energies(), cfg.discretization())?;
    #[derive(Serialize)]
    struct SOut {
        energy: f64,
        modes: Vec<(usize, i8)>,
        entries: Vec<Vec<[f64; 2]>>,
        unitarity_defect: f64,
    }
    let s: Vec<SOut> = trs
        .iter()
        .map(|t| {
            let s = extract_smatrix(t);
            SOut {
                energy: t.energy,
                modes: s.modes.iter().map(|m| (m.level, m.eps)).collect(),
                entries: s.data.rows().into_iter().map(|r| r.iter().map(|&z| pair(z)).collect()).collect(),
                unitarity_defect: s.unitarity_defect(),
            }
        })
        .collect();
    let p1 = write_json(&c.out, "tr.json", &tr_json(&trs))?;
    let p2 = write_json(&c.out, "smatrix.json", &s)?;
    for o in &s {
        println!("E = {:8.4}  propagating = {:2}  unitarity defect = {:.2e}", o.energy, o.modes.len(), o.unitarity_defect);
    }
    println!("wrote {} and {}", p1.display(), p2.display());
    Ok(())
}

fn born(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let pot = cfg.reference_potential()?;
    let mut keys = Vec::new();
    for e in cfg.energies() {
        let list = mode_list(cfg.n_y);
        for &p in &list {
            for &m in &list {
                if cfg.obs.contains(m, p) && is_propagating(m, e) && is_propagating(p, e) {
                    keys.push(SampleKey { m, p, energy: e });
                }
            }
        }
    }
    let data = born_forward(&pot, &keys)?;
    let p = c.out.join("born.json");
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(&p, data.to_json()?)?;
    println!("{} Born samples written to {}", data.len(), p.display());
    Ok(())
}

fn is_propagating(m: diracwave::spectral_basis::ModeIndex, e: f64) -> bool {
    e * e > 2.0 * m.level as f64
}

fn invert_linear(c: &Common, xis: &[f64], mode: LinearMode) -> Result<()> {
    let cfg = c.config()?;
    let mut pot = cfg.reference_potential()?;
    #[derive(Serialize)]
    struct Row {
        xi: f64,
        recovered: Vec<[[f64; 2]; 4]>,
        exact: Vec<[[f64; 2]; 4]>,
        max_error: f64,
    }
    let mut rows = Vec::new();
    for &xi in xis {
        let n = pot.n_y;
        let (rec, exact) = match mode {
            LinearMode::Scalar => {
                if pot.profile != YProfile::Scaled {
                    pot = rescale_profile(&pot)?;
                }
                let keys = scalar_keys(xi, n)?;
                let data = born_forward(&pot, &keys)?;
                let v = invert_scalar(xi, &reduce_scalar(xi, n, &data)?)?;
                let z = C64::new(0.0, 0.0);
                let rec: Vec<[C64; 4]> = v.iter().map(|&v0| [v0, z, z, z]).collect();
                (rec, v_hat(&pot, xi))
            }
            LinearMode::Full => {
                let keys = full_keys(xi, n)?;
                let data = born_forward(&pot, &keys)?;
                let inv = invert_full(xi, n, pot.profile, &data)?;
                (inv.v, v_hat(&pot, xi))
            }
        };
        let max_error = rec
            .iter()
            .zip(&exact)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max);
        println!("xi = {xi:.4}  max |recovered - exact| = {max_error:.3e}");
        let conv = |v: &[[C64; 4]]| v.iter().map(|r| r.map(pair)).collect::<Vec<_>>();
        rows.push(Row {
            xi,
            recovered: conv(&rec),
            exact: conv(&exact),
            max_error,
        });
    }
    let p = write_json(&c.out, "invert_linear.json", &rows)?;
    println!("wrote {}", p.display());
    Ok(())
}

/// Same coefficients read in the rescaled-Hermite profile (scalar mode needs it).
fn rescale_profile(pot: &PotentialRep) -> Result<PotentialRep> {
    let mut p = pot.clone();
    p.profile = YProfile::Scaled;
    if pot.profile == YProfile::Constant {
        return Err(Error::Config("scalar inversion needs a y-dependent profile".into()));
    }
    Ok(p)
}

fn reconstruct(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    eprintln!("running {} ({} iterations, obs {}, sigma {})", cfg.name, cfg.i_max, cfg.obs, cfg.sigma);
    let out = run_experiment(&cfg, Some(&c.out))?;
    if let Some(r) = out.report.history.last() {
        println!(
            "iterations {}  objective {:.3e}  misfit {:.3e}  err {}  err_avg {}",
            r.iteration,
            r.objective,
            r.misfit,
            r.err.map(|e| format!("{e:.3e}")).unwrap_or_default(),
            r.err_avg.map(|e| format!("{e:.3e}")).unwrap_or_default()
        );
    }
    println!("artifacts in {}", c.out.display());
    Ok(())
}

fn verify(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let disc = cfg.discretization();
    let pot = cfg.reference_potential()?;
    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    let energies = cfg.energies();
    let free = forward_all(&pot.scaled(0.0), &energies, disc)?;
    let free_err = free
        .iter()
        .map(|t| {
            TRMatrix::free(t.energy, t.a, t.b, t.n_y)
                .map(|f| f.max_abs_diff(t))
                .unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max);
    report("free propagation", free_err <= 1e-10, format!("{free_err:.2e}"));
    let trs = forward_all(&pot, &energies, disc)?;
    let unit = trs.iter().map(|t| extract_smatrix(t).unitarity_defect()).fold(0.0, f64::max);
    report("unitarity", unit <= 1e-6, format!("{unit:.2e}"));
    let obs = observations(&cfg, &pot)?;
    let basis = cfg.param_basis()?;
    let kappa: Vec<f64> = basis.restrict(&pot).iter().map(|k| 0.5 * k).collect();
    let ev = evaluate(&basis, &kappa, &obs, disc, true)?;
    let g = ev.gradient.unwrap_or_default();
    let a = (0..g.len())
        .max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs()))
        .unwrap_or(0);
    let mut best = f64::INFINITY;
    for h in [1e-4, 1e-5, 1e-6] {
        let fd = finite_difference(&basis, &kappa, &obs, disc, a, h)?;
        best = best.min((fd - g[a]).abs() / (g[a].abs() + 1e-14));
    }
    report("adjoint gradient vs central differences", best <= 1e-5, format!("{best:.2e}"));
    if !ok {
        return Err(Error::Invalid("verification failed".into()));
    }
    Ok(())
}

fn main() {
    diracwave::init_threads();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Forward(c) => forward(c),
        Cmd::Born(c) => born(c),
        Cmd::InvertLinear { common, xi, mode } => invert_linear(common, xi, *mode),
        Cmd::Reconstruct(c) => reconstruct(c),
        Cmd::Verify(c) => verify(c),
    };
    if let Err(e) = res {
        eprintln!("error: {e}");
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            eprintln!("  caused by: {s}");
            src = s.source();
        }
        std::process::exit(1);
    }
}
