//! Reconstruction experiments: configurations, reference potentials,
//! measurement noise, metrics and on-disk reports.

use crate::adjoint_inversion::{
    descend, evaluate, DescentConfig, IterRecord, LineSearch, ObservationSet, ParamBasis, Preset,
    ReconstructionRun, Reference,
};
use crate::dense::lstsq;
use crate::greens_slab::{slab_tr, Discretization, PotentialRep};
use crate::spectral_basis::{check_band_edge, gauss_hermite_gaussian, gauss_legendre, YProfile};
use crate::tr_merge::{TRMatrix, TrJson};
use crate::{Error, Result, C64};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};
use std::path::Path;

/// Reference potential of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Bundled raster of the letter 'H' on `[x_left, x_right] x [-y_extent, y_extent]`, scalar.
    LetterH { amplitude: f64, y_extent: f64 },
    /// `pi^{1/4} cos(2 pi x / (x_right - x_left)) exp(-y^2 / 2)`, scalar.
    Cosine,
    /// `(slope x + offset) sigma_channel`, constant in y.
    Linear { channel: usize, slope: f64, offset: f64 },
    /// Explicit coefficients in the layout of [`PotentialRep`]; scalar unknowns.
    Coefficients { coeffs: Vec<f64> },
}

impl ReferenceSpec {
    /// Profile of the reconstruction basis and the channel it acts on.
    pub fn basis_shape(&self) -> (YProfile, usize) {
        match self {
            ReferenceSpec::Linear { channel, .. } => (YProfile::Constant, *channel),
            _ => (YProfile::Hermite, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n_x: usize,
    pub n_y: usize,
    pub n_e: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub x_left: f64,
    pub x_right: f64,
    pub obs: Preset,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub eta: f64,
    pub i_max: usize,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub line_search: LineSearch,
    /// Rescale parameters to unit Born sensitivity before descending.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Legendre order of the field; chosen from the energy when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_order: Option<usize>,
    /// Write wall time into the history; off makes reports bit-reproducible.
    #[serde(default = "yes")]
    pub timing: bool,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    fn base(name: &str, n_x: usize, n_y: usize, n_e: usize, half: f64, reference: ReferenceSpec) -> Self {
        ExperimentConfig {
            name: name.into(),
            n_x,
            n_y,
            n_e,
            e_min: 1.5,
            e_max: 15.0,
            x_left: -half,
            x_right: half,
            obs: Preset::M0,
            sigma: 0.0,
            seed: 7,
            eta: 1.0,
            i_max: 600,
            reference,
            line_search: LineSearch::Guarded,
            normalize: true,
            field_order: None,
            timing: true,
        }
    }

    /// Letter 'H', `n_x = 16`, `n_y = 20`, 18 energies in `[1.5, 15]`, support `[-0.4, 0.4]`.
    pub fn exp1() -> Self {
        Self::base(
            "exp1",
            16,
            20,
            18,
            0.4,
            ReferenceSpec::LetterH {
                amplitude: 1.0,
                y_extent: 3.0,
            },
        )
    }

    /// Cosine reference on `[-0.2, 0.2]`, `n_x = 6`, `n_y = 10`.
    pub fn exp2() -> Self {
        Self::base("exp2", 6, 10, 18, 0.2, ReferenceSpec::Cosine)
    }

    /// `(x + 0.1) sigma_3`.
    pub fn exp3() -> Self {
        Self::base(
            "exp3",
            6,
            10,
            18,
            0.2,
            ReferenceSpec::Linear {
                channel: 3,
                slope: 1.0,
                offset: 0.1,
            },
        )
    }

    /// `(x + 0.1) sigma_0`.
    pub fn exp4() -> Self {
        Self::base(
            "exp4",
            6,
            10,
            18,
            0.2,
            ReferenceSpec::Linear {
                channel: 0,
                slope: 1.0,
                offset: 0.1,
            },
        )
    }

    /// Desk-scale version of [`Self::exp1`]: `n_x = 8`, `n_y = 10`, 10 energies, 300 iterations.
    pub fn exp1_small() -> Self {
        ExperimentConfig {
            name: "exp1-small".into(),
            n_x: 8,
            n_y: 10,
            n_e: 10,
            i_max: 300,
            ..Self::exp1()
        }
    }

    /// Desk-scale version of experiments 2 to 4: `n_x = 4`, `n_y = 6`, 8 energies.
    pub fn small(mut self) -> Self {
        self.name = format!("{}-small", self.name);
        self.n_x = 4;
        self.n_y = 6;
        self.n_e = 8;
        self.i_max = 200;
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "exp1" => Self::exp1(),
            "exp2" => Self::exp2(),
            "exp3" => Self::exp3(),
            "exp4" => Self::exp4(),
            "exp1-small" => Self::exp1_small(),
            "exp2-small" => Self::exp2().small(),
            "exp3-small" => Self::exp3().small(),
            "exp4-small" => Self::exp4().small(),
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_left < self.x_right) {
            return Err(Error::Config(format!(
                "support [{}, {}] is empty",
                self.x_left, self.x_right
            )));
        }
        if self.n_e == 0 || !(self.e_min > 0.0) || self.e_max < self.e_min {
            return Err(Error::Config("energies must be positive and increasing".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta = {} must be positive", self.eta)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma = {} must be non-negative", self.sigma)));
        }
        if let ReferenceSpec::Linear { channel, .. } = self.reference {
            if channel > 3 {
                return Err(Error::Config(format!("channel {channel} is not a Pauli index")));
            }
        }
        for e in self.energies() {
            check_band_edge(e, self.n_y)?;
        }
        Ok(())
    }

    /// Uniformly spaced energies in `[e_min, e_max]`.
    pub fn energies(&self) -> Vec<f64> {
        if self.n_e == 1 {
            return vec![self.e_min];
        }
        (0..self.n_e)
            .map(|s| self.e_min + (self.e_max - self.e_min) * s as f64 / (self.n_e - 1) as f64)
            .collect()
    }

    pub fn discretization(&self) -> Discretization {
        Discretization {
            n_y: self.n_y,
            order: self.field_order,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Read a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    /// Stable identifier of the configuration.
    pub fn hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(self).unwrap_or_default().hash(&mut h);
        h.finish()
    }

    /// Empty potential in the layout of the reconstruction.
    pub fn template(&self) -> Result<PotentialRep> {
        let (profile, _) = self.reference.basis_shape();
        PotentialRep::zeros(self.x_left, self.x_right, self.n_x, self.n_y, profile)
    }

    pub fn param_basis(&self) -> Result<ParamBasis> {
        let (_, channel) = self.reference.basis_shape();
        Ok(ParamBasis::channels(&self.template()?, &[channel]))
    }

    /// Reference potential projected onto the reconstruction basis.
    pub fn reference_potential(&self) -> Result<PotentialRep> {
        let mut pot = self.template()?;
        match &self.reference {
            ReferenceSpec::LetterH { amplitude, y_extent } => {
                let img = RasterImage::letter_h(self.x_left, self.x_right, *y_extent);
                let fit = raster_to_basis(&img, self.n_x, self.n_y, self.x_left, self.x_right)?;
                pot.coeffs = fit.coeffs.iter().map(|c| c * amplitude).collect();
            }
            ReferenceSpec::Cosine => {
                let w = self.x_right - self.x_left;
                let c = std::f64::consts::PI.powf(0.25);
                let f = |x: f64, y: f64| c * (2.0 * std::f64::consts::PI * x / w).cos() * (-0.5 * y * y).exp();
                pot = project_samples(f, self.n_x, self.n_y, self.x_left, self.x_right)?.0;
            }
            ReferenceSpec::Linear {
                channel,
                slope,
                offset,
            } => {
                // (slope x + offset) = (slope c + offset) P_0 + slope (w/2) P_1
                let c = 0.5 * (self.x_left + self.x_right);
                let h = 0.5 * (self.x_right - self.x_left);
                pot.set(0, 0, *channel, slope * c + offset);
                if self.n_x >= 1 {
                    pot.set(1, 0, *channel, slope * h);
                }
            }
            ReferenceSpec::Coefficients { coeffs } => {
                if coeffs.len() != pot.coeffs.len() {
                    return Err(Error::Config(format!(
                        "{} coefficients for a layout of {}",
                        coeffs.len(),
                        pot.coeffs.len()
                    )));
                }
                pot.coeffs = coeffs.clone();
            }
        }
        Ok(pot)
    }

    /// Coefficient tracked by the average-value error: the mean of a
    /// y-constant reference.
    pub fn avg_index(&self) -> Option<usize> {
        match self.reference {
            ReferenceSpec::Linear { channel, .. } => self.template().ok().map(|t| t.index(0, 0, channel)),
            _ => None,
        }
    }
}

/// Monochrome image on a rectangle; row 0 is the top edge (largest `y`).
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub values: Array2<f64>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

const LETTER_H: [&str; 7] = ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"];

impl RasterImage {
    /// Letter 'H' filling `[x_left, x_right] x [-y_extent, y_extent]`.
    pub fn letter_h(x_left: f64, x_right: f64, y_extent: f64) -> Self {
        let rows = LETTER_H.len();
        let cols = LETTER_H[0].len();
        let values = Array2::from_shape_fn((rows, cols), |(r, c)| {
            if LETTER_H[r].as_bytes()[c] == b'#' {
                1.0
            } else {
                0.0
            }
        });
        RasterImage {
            values,
            x_range: (x_left, x_right),
            y_range: (-y_extent, y_extent),
        }
    }

    /// Pixel value at `(x, y)`, zero outside the image.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (rows, cols) = self.values.dim();
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return 0.0;
        }
        let c = (((x - x0) / (x1 - x0)) * cols as f64).floor() as usize;
        let r = (((y1 - y) / (y1 - y0)) * rows as f64).floor() as usize;
        self.values[[r.min(rows - 1), c.min(cols - 1)]]
    }
}

/// Least-squares fit grid: Gauss–Legendre in x, Gauss–Hermite in y.
fn fit_grid(n_x: usize, n_y: usize, x_left: f64, x_right: f64) -> (Vec<(f64, f64)>, Vec<f64>) {
    let gx = gauss_legendre(n_x + 4).on_interval(x_left, x_right);
    let gy = gauss_hermite_gaussian(n_y + 4, 1.0);
    let mut pts = Vec::new();
    let mut w = Vec::new();
    for (&x, &wx) in gx.nodes.iter().zip(&gx.weights) {
        for (&y, &wy) in gy.nodes.iter().zip(&gy.weights) {
            pts.push((x, y));
            w.push(wx * wy);
        }
    }
    (pts, w)
}

/// Weighted least-squares projection of `f` onto `P_j(x) phi_k(y) sigma_0`
/// on the fit grid. Returns the fit and the weighted RMS residual.
pub fn project_samples(
    f: impl Fn(f64, f64) -> f64,
    n_x: usize,
    n_y: usize,
    x_left: f64,
    x_right: f64,
) -> Result<(PotentialRep, f64)> {
    let mut pot = PotentialRep::zeros(x_left, x_right, n_x, n_y, YProfile::Hermite)?;
    let (pts, w) = fit_grid(n_x, n_y, x_left, x_right);
    let nb = (n_x + 1) * (n_y + 1);
    let mut a = Array2::<C64>::zeros((pts.len(), nb));
    let mut b = Array1::<C64>::zeros(pts.len());
    for (i, (&(x, y), &wi)) in pts.iter().zip(&w).enumerate() {
        let sw = wi.sqrt();
        let px = pot.x_basis(x);
        let chi = pot.profile.eval(n_y, y);
        for j in 0..=n_x {
            for k in 0..=n_y {
                a[[i, j * (n_y + 1) + k]] = C64::new(sw * px[j] * chi[k], 0.0);
            }
        }
        b[i] = C64::new(sw * f(x, y), 0.0);
    }
    let c = lstsq(&a, &b.view())?;
    let r = &b - &a.dot(&c);
    let total: f64 = w.iter().sum();
    let resid = (r.iter().map(|z| z.norm_sqr()).sum::<f64>() / total).sqrt();
    for j in 0..=n_x {
        for k in 0..=n_y {
            pot.set(j, k, 0, c[j * (n_y + 1) + k].re);
        }
    }
    Ok((pot, resid))
}

/// Project a raster onto the Legendre–Hermite basis.
pub fn raster_to_basis(
    image: &RasterImage,
    n_x: usize,
    n_y: usize,
    x_left: f64,
    x_right: f64,
) -> Result<PotentialRep> {
    Ok(project_samples(|x, y| image.sample(x, y), n_x, n_y, x_left, x_right)?.0)
}

/// Standard normal variates from a seeded ChaCha stream by Box–Muller.
pub fn normal_samples(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        out.push(r * t.cos());
        out.push(r * t.sin());
    }
    out.truncate(count);
    out
}

/// `T0 + (1 + sigma z) (T_ref - T0)` entrywise, with `z` fixed by `seed`.
pub fn inject_noise(t_ref: &[Vec<C64>], t_zero: &[Vec<C64>], sigma: f64, seed: u64) -> Result<Vec<Vec<C64>>> {
    if t_ref.len() != t_zero.len() || t_ref.iter().zip(t_zero).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Mismatch("noise needs matching index sets".into()));
    }
    let count: usize = t_ref.iter().map(|r| r.len()).sum();
    let z = normal_samples(seed, count);
    let mut k = 0;
    Ok(t_ref
        .iter()
        .zip(t_zero)
        .map(|(r, z0)| {
            r.iter()
                .zip(z0)
                .map(|(&tr, &t0)| {
                    let v = t0 + (tr - t0) * (1.0 + sigma * z[k]);
                    k += 1;
                    v
                })
                .collect()
        })
        .collect())
}

/// Per-iteration metrics of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub history: Vec<IterRecord>,
}

impl MetricReport {
    pub fn final_misfit(&self) -> Option<f64> {
        self.history.last().map(|r| r.misfit)
    }

    pub fn final_err(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.err)
    }

    pub fn final_err_avg(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.err_avg)
    }

    /// Errors from iteration `from` on never increase.
    pub fn err_monotone_from(&self, from: usize) -> bool {
        let errs: Vec<f64> = self
            .history
            .iter()
            .filter(|r| r.iteration >= from)
            .filter_map(|r| r.err)
            .collect();
        errs.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let history = r.deserialize().collect::<std::result::Result<Vec<IterRecord>, _>>()?;
        Ok(MetricReport { history })
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub run: ReconstructionRun,
    pub reference: PotentialRep,
    pub report: MetricReport,
}

#[derive(Serialize)]
struct FinalPotential<'a> {
    name: &'a str,
    config_hash: String,
    eta: f64,
    iterations: usize,
    kappa: &'a [f64],
    scale: &'a [f64],
    potential: &'a PotentialRep,
    reference: &'a PotentialRep,
}

/// TR matrices of `pot` at every energy.
pub fn forward_all(pot: &PotentialRep, energies: &[f64], disc: Discretization) -> Result<Vec<TRMatrix>> {
    energies.par_iter().map(|&e| slab_tr(pot, e, disc)).collect()
}

/// Observations for a configuration, noise included.
pub fn observations(cfg: &ExperimentConfig, reference: &PotentialRep) -> Result<ObservationSet> {
    let disc = cfg.discretization();
    let energies = cfg.energies();
    let trs = forward_all(reference, &energies, disc)?;
    let obs = ObservationSet::from_preset(cfg.obs, &trs)?;
    if cfg.sigma == 0.0 {
        return Ok(obs);
    }
    let zero = reference.scaled(0.0);
    let t0 = forward_all(&zero, &energies, disc)?;
    let obs0 = ObservationSet::from_preset(cfg.obs, &t0)?;
    let noisy = inject_noise(&obs.observed, &obs0.observed, cfg.sigma, cfg.seed)?;
    obs.with_observed(noisy)
}

/// Run gradient descent for a configuration; write artifacts when `out` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    let hash = cfg.hash();
    let wrap = |e: Error| Error::Experiment {
        hash,
        source: Box::new(e),
    };
    cfg.validate().map_err(wrap)?;
    let disc = cfg.discretization();
    let reference = cfg.reference_potential().map_err(wrap)?;
    let obs = observations(cfg, &reference).map_err(wrap)?;
    let mut basis = cfg.param_basis().map_err(wrap)?;
    if cfg.normalize {
        basis = basis.normalized(&obs, disc).map_err(wrap)?;
    }
    let reference_info = Reference {
        potential: reference.clone(),
        avg_index: cfg.avg_index(),
    };
    let run = ReconstructionRun::new(basis.clone(), vec![0.0; basis.len()], cfg.seed);
    let dcfg = DescentConfig {
        eta: cfg.eta,
        iters: cfg.i_max,
        line_search: cfg.line_search,
        target: 0.0,
    };
    let mut run = descend(run, &obs, disc, &dcfg, Some(&reference_info)).map_err(wrap)?;
    if !cfg.timing {
        run.history.iter_mut().for_each(|r| r.seconds = 0.0);
    }
    let report = MetricReport {
        history: run.history.clone(),
    };
    let output = ExperimentOutput {
        config: cfg.clone(),
        run,
        reference,
        report,
    };
    if let Some(dir) = out {
        write_artifacts(&output, dir).map_err(wrap)?;
    }
    Ok(output)
}

/// `history.csv`, `final_potential.json`, `potential_grid.csv` and `config.toml`.
pub fn write_artifacts(o: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    o.report.write_csv(&dir.join("history.csv"))?;
    let pot = o.run.potential();
    let fin = FinalPotential {
        name: &o.config.name,
        config_hash: format!("{:016x}", o.config.hash()),
        eta: o.run.eta,
        iterations: o.run.history.len().saturating_sub(1),
        kappa: &o.run.kappa,
        scale: &o.run.basis.scale,
        potential: &pot,
        reference: &o.reference,
    };
    std::fs::write(dir.join("final_potential.json"), serde_json::to_string_pretty(&fin)?)?;
    write_grid_csv(&pot, &o.reference, &dir.join("potential_grid.csv"))?;
    std::fs::write(dir.join("config.toml"), o.config.to_toml()?)?;
    Ok(())
}

/// Both potentials on a 41 x 41 grid over the support and `|y| <= 4`.
pub fn write_grid_csv(pot: &PotentialRep, reference: &PotentialRep, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "v0", "v1", "v2", "v3", "ref_v0", "ref_v1", "ref_v2", "ref_v3"])?;
    let n = 41;
    for i in 0..n {
        let x = pot.x_left + pot.width() * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let y = -4.0 + 8.0 * j as f64 / (n - 1) as f64;
            let v = pot.channels_at(x, y);
            let r = reference.channels_at(x, y);
            let row: Vec<String> = [x, y, v[0], v[1], v[2], v[3], r[0], r[1], r[2], r[3]]
                .iter()
                .map(|v| format!("{v:.12e}"))
                .collect();
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// TR matrices serialized with `[re, im]` entries.
pub fn tr_json(trs: &[TRMatrix]) -> Vec<TrJson> {
    trs.iter().map(|t| t.to_json()).collect()
}

/// Objective at zero and at the reference, a quick sanity probe of a configuration.
pub fn probe(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let disc = cfg.discretization();
    let reference = cfg.reference_potential()?;
    let obs = observations(cfg, &reference)?;
    let basis = cfg.param_basis()?;
    let k_ref = basis.restrict(&reference);
    let at_zero = evaluate(&basis, &vec![0.0; basis.len()], &obs, disc, false)?.objective();
    let at_ref = evaluate(&basis, &k_ref, &obs, disc, false)?.objective();
    Ok((at_zero, at_ref))
}
