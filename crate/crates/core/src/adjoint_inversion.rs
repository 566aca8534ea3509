//! Misfit over observed TR entries, the adjoint field and the gradient
//! descent on potential coefficients.
//!
//! The gradient is exact for the discrete objective: the adjoint field is
//! `A^{-H} g_in` with `A = I + V G` the slab system, and its source `g_in`
//! is the incoming wave built from weighted residuals. With this reading
//! `g` solves `(H - E + V) g = f` and `g_out = g - g_in` solves
//! `(H - E + V) g_out = -V g_in`; the finite-difference test pins the sign.

use crate::greens_slab::{Discretization, PotentialRep, SlabOperator};
use crate::spectral_basis::{mode_list, mode_position, ModeIndex};
use crate::tr_merge::TRMatrix;
use crate::{Error, Result, C64};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Named observation sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Preset {
    /// Every pair of the truncation.
    #[default]
    M0,
    /// One of the two levels is 0 or 1.
    MA,
    /// Same level on both sides.
    MB,
    /// Diagonal entries.
    MT,
    /// Same level, opposite directions.
    MR,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::M0, Preset::MA, Preset::MB, Preset::MT, Preset::MR];

    pub fn name(self) -> &'static str {
        match self {
            Preset::M0 => "M0",
            Preset::MA => "MA",
            Preset::MB => "MB",
            Preset::MT => "MT",
            Preset::MR => "MR",
        }
    }

    pub fn contains(self, m: ModeIndex, p: ModeIndex) -> bool {
        let (n, q) = (m.level, p.level);
        match self {
            Preset::M0 => true,
            Preset::MA => n <= 1 || q <= 1,
            Preset::MB => n == q,
            Preset::MT => m == p,
            Preset::MR => n == q && n > 0 && m.eps != p.eps,
        }
    }

    /// Pairs `(m, p)` of the preset, `p` outer in [`mode_list`] order.
    pub fn pairs(self, n_y: usize) -> Vec<(ModeIndex, ModeIndex)> {
        let list = mode_list(n_y);
        let mut out = Vec::new();
        for &p in &list {
            for &m in &list {
                if self.contains(m, p) {
                    out.push((m, p));
                }
            }
        }
        out
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase().replace(['^', '_'], "");
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == t)
            .ok_or_else(|| Error::Config(format!("unknown observation set {s:?}")))
    }
}

/// Observed TR entries at a list of energies.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObservationSet {
    pub n_y: usize,
    pub pairs: Vec<(ModeIndex, ModeIndex)>,
    pub weights: Vec<f64>,
    pub energies: Vec<f64>,
    /// `observed[s][i]` is the entry of `pairs[i]` at `energies[s]`.
    pub observed: Vec<Vec<C64>>,
}

fn energy_matches(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(1.0)
}

fn missing(m: ModeIndex, p: ModeIndex, e: f64) -> Error {
    Error::MissingSamples(format!("entry (m={m}, p={p}) at E={e}"))
}

impl ObservationSet {
    /// Entries of `pairs` read from TR matrices, one per energy, unit weights.
    pub fn from_tr(pairs: Vec<(ModeIndex, ModeIndex)>, trs: &[TRMatrix]) -> Result<Self> {
        let n_y = trs
            .first()
            .map(|t| t.n_y)
            .ok_or_else(|| Error::Invalid("no TR matrices".into()))?;
        let mut observed = Vec::with_capacity(trs.len());
        for t in trs {
            let row = pairs
                .iter()
                .map(|&(m, p)| t.get(m, p).ok_or_else(|| missing(m, p, t.energy)))
                .collect::<Result<Vec<_>>>()?;
            observed.push(row);
        }
        let set = ObservationSet {
            n_y,
            weights: vec![1.0; pairs.len()],
            pairs,
            energies: trs.iter().map(|t| t.energy).collect(),
            observed,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_preset(preset: Preset, trs: &[TRMatrix]) -> Result<Self> {
        let n_y = trs.first().map(|t| t.n_y).unwrap_or(0);
        Self::from_tr(preset.pairs(n_y), trs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.pairs.len() {
            return Err(Error::Mismatch(format!(
                "{} weights for {} pairs",
                self.weights.len(),
                self.pairs.len()
            )));
        }
        if self.observed.len() != self.energies.len() {
            return Err(Error::Mismatch("one observed row per energy expected".into()));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Invalid(format!("weight {w} is not positive")));
        }
        for (row, &e) in self.observed.iter().zip(&self.energies) {
            if row.len() != self.pairs.len() {
                return Err(Error::Mismatch(format!("observed row at E={e} has the wrong length")));
            }
        }
        for &(m, p) in &self.pairs {
            if mode_position(self.n_y, m).is_none() || mode_position(self.n_y, p).is_none() {
                return Err(Error::Invalid(format!("pair ({m}, {p}) outside the truncation")));
            }
        }
        Ok(())
    }

    /// Distinct incoming modes in [`mode_list`] order.
    pub fn incoming_modes(&self) -> Vec<ModeIndex> {
        mode_list(self.n_y)
            .into_iter()
            .filter(|&p| self.pairs.iter().any(|&(_, q)| q == p))
            .collect()
    }

    /// Same set with the observed entries replaced.
    pub fn with_observed(&self, observed: Vec<Vec<C64>>) -> Result<Self> {
        let out = ObservationSet {
            observed,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }
}

/// `Pi^T` split by the direction of the outgoing mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Misfit {
    pub minus: f64,
    pub plus: f64,
}

impl Misfit {
    pub fn total(&self) -> f64 {
        self.minus + self.plus
    }
}

/// Weighted squared misfit of TR matrices against the observations.
pub fn misfit(trs: &[TRMatrix], obs: &ObservationSet) -> Result<Misfit> {
    let mut out = Misfit::default();
    for (s, &e) in obs.energies.iter().enumerate() {
        let t = trs.iter().find(|t| energy_matches(t.energy, e));
        for (i, &(m, p)) in obs.pairs.iter().enumerate() {
            let v = t.and_then(|t| t.get(m, p)).ok_or_else(|| missing(m, p, e))?;
            let r = obs.weights[i] * (v - obs.observed[s][i]).norm_sqr();
            if m.eps < 0 {
                out.minus += r;
            } else {
                out.plus += r;
            }
        }
    }
    Ok(out)
}

/// Incoming data of the adjoint field: `g_in = sum_q coef_q exp(i xi_q (x - reference_q)) phi_q`.
#[derive(Clone, Debug)]
pub struct AdjointIncoming {
    pub coef: Vec<C64>,
    pub reference: Vec<f64>,
}

/// Adjoint incoming wave for weighted residuals `w_{m,p} (alpha^p_m - T^ob_{m,p})`.
///
/// A propagating `m = (n,-)` feeds `(n,-)` referenced at `a`, a propagating
/// `(n,+)` feeds `(n,+)` referenced at `b`. Below the band edge the wave must
/// decay away from the source, so it lands on the partner mode:
/// `(n,-) -> (n,+)` with `E/kappa + i` and `(n,+) -> (n,-)` with `E/kappa - i`,
/// where `kappa = sqrt(2n - E^2)`.
pub fn adjoint_incoming(op: &SlabOperator, residuals: &[(ModeIndex, C64)]) -> AdjointIncoming {
    let list = mode_list(op.n_y);
    let mut coef = vec![C64::new(0.0, 0.0); list.len()];
    let mut reference: Vec<f64> = list
        .iter()
        .map(|q| if q.eps < 0 { op.a } else { op.b })
        .collect();
    let e = op.energy;
    for &(m, r) in residuals {
        if r == C64::new(0.0, 0.0) {
            continue;
        }
        let n = m.level;
        let mode = op.mode(m);
        if mode.propagating {
            let th = mode.theta;
            let et = C64::new(e, 0.0) / th;
            let c = if n == 0 {
                et
            } else {
                let pn = op.dual.levels[n].overlap;
                let c_minus = op.mode(ModeIndex::minus(n)).norm;
                let c_plus = op.mode(ModeIndex::plus(n)).norm;
                let d = 1.0 - pn.norm_sqr();
                if m.eps < 0 {
                    (et - pn * (c_plus / c_minus) * (et + C64::i())) / d
                } else {
                    (et - pn.conj() * (c_minus / c_plus) * (et - C64::i())) / d
                }
            };
            let pos = mode_position(op.n_y, m).expect("mode in truncation");
            coef[pos] += c * r;
        } else {
            let kappa = (2.0 * n as f64 - e * e).sqrt();
            let (q, c, x0) = if m.eps < 0 {
                (ModeIndex::plus(n), C64::new(e / kappa, 1.0), op.a)
            } else {
                (ModeIndex::minus(n), C64::new(e / kappa, -1.0), op.b)
            };
            let pos = mode_position(op.n_y, q).expect("mode in truncation");
            coef[pos] += c * r;
            reference[pos] = x0;
        }
    }
    AdjointIncoming { coef, reference }
}

impl AdjointIncoming {
    /// Galerkin coefficients of `g_in` on the slab.
    pub fn project(&self, op: &SlabOperator) -> Array1<C64> {
        let list = mode_list(op.n_y);
        let shifted: Vec<C64> = list
            .iter()
            .enumerate()
            .map(|(pos, &q)| {
                let c = self.coef[pos];
                if c == C64::new(0.0, 0.0) {
                    return c;
                }
                let dx = op.incoming_reference(q) - self.reference[pos];
                c * (C64::i() * op.mode(q).xi * dx).exp()
            })
            .collect();
        op.project_incoming(&shifted)
    }
}

/// Adjoint field on one slab.
#[derive(Clone, Debug)]
pub struct AdjointField {
    pub g_in: Array1<C64>,
    pub g: Array1<C64>,
    /// `||g + G^H V g - g_in|| / ||g_in||`.
    pub residual: f64,
}

impl AdjointField {
    pub fn g_out(&self) -> Array1<C64> {
        &self.g - &self.g_in
    }
}

fn norm(v: &Array1<C64>) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Solve `(I + G^H V) g = g_in`, the Galerkin form of `(H - E + V) g = f`.
pub fn adjoint_solve(op: &SlabOperator, g_in: Array1<C64>) -> Result<AdjointField> {
    if g_in.len() != op.dim() {
        return Err(Error::Mismatch(format!(
            "adjoint source has {} entries, slab has {}",
            g_in.len(),
            op.dim()
        )));
    }
    let g = op.lu().solve_adjoint(&g_in.view());
    let r = &g + &op.apply_green_adjoint(&op.v_hat.dot(&g)) - &g_in;
    let scale = norm(&g_in);
    let residual = if scale == 0.0 { norm(&r) } else { norm(&r) / scale };
    Ok(AdjointField { g_in, g, residual })
}

/// `|<g, s> - sum_m conj(r_m) alpha_m[h]| / scale` for the outgoing field `h`
/// driven by the source `s`, i.e. `(H - E + V) h = s`.
pub fn green_identity_defect(
    op: &SlabOperator,
    residuals: &[(ModeIndex, C64)],
    field: &AdjointField,
    source: &Array1<C64>,
) -> f64 {
    let lhs: C64 = field.g.iter().zip(source).map(|(g, s)| g.conj() * s).sum();
    let rho = op.lu().solve(&source.view());
    let rhs: C64 = residuals
        .iter()
        .map(|&(m, r)| r.conj() * op.extraction_functional(m).dot(&rho))
        .sum();
    let scale = lhs.norm().max(rhs.norm()).max(1e-300);
    (lhs - rhs).norm() / scale
}

/// Real parameters `kappa_A` mapped to coefficients of a template potential.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamBasis {
    pub template: PotentialRep,
    /// Coefficient index of each parameter.
    pub active: Vec<usize>,
    /// Coefficient per unit parameter; all ones for the raw basis.
    pub scale: Vec<f64>,
}

impl ParamBasis {
    /// Every `(j, k)` coefficient of the listed Pauli channels.
    pub fn channels(template: &PotentialRep, channels: &[usize]) -> Self {
        let mut t = template.clone();
        t.coeffs.iter_mut().for_each(|c| *c = 0.0);
        let k_max = if t.profile == crate::spectral_basis::YProfile::Constant {
            0
        } else {
            t.n_y
        };
        let mut active = Vec::new();
        for j in 0..=t.n_x {
            for k in 0..=k_max {
                for &i in channels {
                    active.push(t.index(j, k, i));
                }
            }
        }
        let scale = vec![1.0; active.len()];
        ParamBasis {
            template: t,
            active,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn potential(&self, kappa: &[f64]) -> PotentialRep {
        let mut p = self.template.clone();
        for ((&idx, &k), &c) in self.active.iter().zip(kappa).zip(&self.scale) {
            p.coeffs[idx] += c * k;
        }
        p
    }

    /// Parameters of `pot` on this basis (coefficients outside it are dropped).
    pub fn restrict(&self, pot: &PotentialRep) -> Vec<f64> {
        self.active
            .iter()
            .zip(&self.scale)
            .map(|(&i, &c)| (pot.coeffs[i] - self.template.coeffs[i]) / c)
            .collect()
    }

    fn split(&self, idx: usize) -> (usize, usize, usize) {
        let ny1 = self.template.n_y + 1;
        (idx / 4 / ny1, (idx / 4) % ny1, idx % 4)
    }
}

/// `-2 Re <g, V_A psi>` for every parameter, summed over the listed pairs of
/// adjoint and forward fields of one slab.
pub fn gradient(
    op: &SlabOperator,
    basis: &ParamBasis,
    fields: &[(&Array1<C64>, &Array1<C64>)],
) -> Result<Vec<f64>> {
    Ok(pairing(op, basis, fields)?.into_iter().map(|z| 2.0 * z.re).collect())
}

/// `-sum <g, V_A psi>` for every parameter, each `V_A` carrying its scale.
pub fn pairing(
    op: &SlabOperator,
    basis: &ParamBasis,
    fields: &[(&Array1<C64>, &Array1<C64>)],
) -> Result<Vec<C64>> {
    let grid = GridBasis::new(op, basis)?;
    let mut vals = Vec::with_capacity(fields.len());
    for &(g, psi) in fields {
        if g.len() != op.dim() || psi.len() != op.dim() {
            return Err(Error::Mismatch("field does not live on this slab grid".into()));
        }
        vals.push((op.grid_values(g), op.grid_values(psi)));
    }
    let refs: Vec<(&[[C64; 2]], &[[C64; 2]])> = vals.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    Ok(grid.pair(op, basis, &refs))
}

/// Parameter basis functions tabulated on the slab grid.
struct GridBasis {
    px: Vec<Vec<f64>>,
    chi: Vec<Vec<f64>>,
}

impl GridBasis {
    fn new(op: &SlabOperator, basis: &ParamBasis) -> Result<Self> {
        let pot = &basis.template;
        if (op.a - pot.x_left).abs() > 1e-12 || (op.b - pot.x_right).abs() > 1e-12 {
            return Err(Error::Mismatch("slab and potential support differ".into()));
        }
        Ok(GridBasis {
            px: op.grid.x.nodes.iter().map(|&x| pot.x_basis(x)).collect(),
            chi: op.grid.y.nodes.iter().map(|&y| pot.profile.eval(pot.n_y, y)).collect(),
        })
    }

    fn pair(&self, op: &SlabOperator, basis: &ParamBasis, fields: &[(&[[C64; 2]], &[[C64; 2]])]) -> Vec<C64> {
        let nx = op.grid.x.len();
        let ny = op.grid.y.len();
        // t[c][q * ny + r] = w_q w_r conj(g)^T sigma_c psi
        let mut t = vec![vec![C64::new(0.0, 0.0); nx * ny]; 4];
        for &(gv, pv) in fields {
            for q in 0..nx {
                for r in 0..ny {
                    let w = op.grid.x.weights[q] * op.grid.y.weights[r];
                    let i = q * ny + r;
                    let (g0, g1) = (gv[i][0].conj(), gv[i][1].conj());
                    let (p0, p1) = (pv[i][0], pv[i][1]);
                    t[0][i] += w * (g0 * p0 + g1 * p1);
                    t[1][i] += w * (g0 * p1 + g1 * p0);
                    t[2][i] += w * C64::i() * (g1 * p0 - g0 * p1);
                    t[3][i] += w * (g0 * p0 - g1 * p1);
                }
            }
        }
        basis
            .active
            .iter()
            .zip(&basis.scale)
            .map(|(&idx, &sc)| {
                let (j, k, c) = basis.split(idx);
                let mut acc = C64::new(0.0, 0.0);
                for q in 0..nx {
                    let pj = self.px[q][j];
                    if pj == 0.0 {
                        continue;
                    }
                    for r in 0..ny {
                        acc += t[c][q * ny + r] * (pj * self.chi[r][k]);
                    }
                }
                -acc * sc
            })
            .collect()
    }
}

/// `sum w |d alpha^p_m / d kappa_A|^2` at `V = 0` over the observed pairs.
pub fn born_sensitivity(basis: &ParamBasis, obs: &ObservationSet, disc: Discretization) -> Result<Vec<f64>> {
    let zero = basis.template.scaled(0.0);
    let per: Vec<Vec<f64>> = obs
        .energies
        .par_iter()
        .map(|&e| {
            let op = SlabOperator::new(&zero, e, zero.x_left, zero.x_right, disc)?;
            let grid = GridBasis::new(&op, basis)?;
            let list = mode_list(op.n_y);
            let ells: Vec<Vec<[C64; 2]>> = list
                .iter()
                .map(|&m| op.grid_values(&op.extraction_functional(m).mapv(|z| z.conj())))
                .collect();
            let mut acc = vec![0.0; basis.len()];
            for p in obs.incoming_modes() {
                let psi = op.grid_values(&op.incoming_unit(p));
                for (i, &(m, q)) in obs.pairs.iter().enumerate() {
                    if q != p {
                        continue;
                    }
                    let pos = mode_position(op.n_y, m).expect("validated pair");
                    let jac = grid.pair(&op, basis, &[(ells[pos].as_slice(), psi.as_slice())]);
                    for (a, z) in acc.iter_mut().zip(jac) {
                        *a += obs.weights[i] * z.norm_sqr();
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; basis.len()];
    for v in per {
        out.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

impl ParamBasis {
    /// Rescale every parameter to unit Born sensitivity on `obs`.
    ///
    /// Parameters whose sensitivity is below `1e-12` of the largest are
    /// invisible to the data at this order and keep their scale.
    pub fn normalized(mut self, obs: &ObservationSet, disc: Discretization) -> Result<Self> {
        let sens = born_sensitivity(&self, obs, disc)?;
        let top = sens.iter().cloned().fold(0.0, f64::max);
        for (c, s) in self.scale.iter_mut().zip(sens) {
            if s > 1e-12 * top {
                *c /= s.sqrt();
            }
        }
        Ok(self)
    }
}

/// Objective, its split and (optionally) gradient at one parameter vector.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub misfit: Misfit,
    pub gradient: Option<Vec<f64>>,
    pub trs: Vec<TRMatrix>,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.misfit.total()
    }
}

/// Forward and adjoint solves at one energy.
#[derive(Clone, Debug)]
pub struct EnergyState {
    pub energy: f64,
    /// Per incoming mode `p`: forward field, weighted residuals, adjoint field.
    pub fields: Vec<(ModeIndex, Array1<C64>, Vec<(ModeIndex, C64)>, AdjointField)>,
    pub misfit: Misfit,
    pub tr: TRMatrix,
}

/// Forward and adjoint solves for observation row `s` at potential `pot`.
pub fn energy_state(
    pot: &PotentialRep,
    obs: &ObservationSet,
    s: usize,
    disc: Discretization,
) -> Result<(SlabOperator, EnergyState)> {
    let e = obs.energies[s];
    let op = SlabOperator::new(pot, e, pot.x_left, pot.x_right, disc)?;
    let list = mode_list(op.n_y);
    let ells = op.extraction_functionals();
    let nm = list.len();
    let mut data = ndarray::Array2::<C64>::zeros((nm, nm));
    let mut fields = Vec::new();
    let mut mis = Misfit::default();
    for (pp, &p) in list.iter().enumerate() {
        let observed: Vec<usize> = (0..obs.pairs.len()).filter(|&i| obs.pairs[i].1 == p).collect();
        let d = op.solve_mode(p);
        for m in 0..nm {
            let mut v = ells[m].dot(&d.rho);
            if m == pp {
                v += op.free_phase(list[m]);
            }
            data[[m, pp]] = v;
        }
        if observed.is_empty() {
            continue;
        }
        let mut res = Vec::with_capacity(observed.len());
        for &i in &observed {
            let m = obs.pairs[i].0;
            let pos = mode_position(op.n_y, m).ok_or_else(|| missing(m, p, e))?;
            let r = data[[pos, pp]] - obs.observed[s][i];
            let w = obs.weights[i];
            if m.eps < 0 {
                mis.minus += w * r.norm_sqr();
            } else {
                mis.plus += w * r.norm_sqr();
            }
            res.push((m, r * w));
        }
        let inc = adjoint_incoming(&op, &res);
        let adj = adjoint_solve(&op, inc.project(&op))?;
        fields.push((p, d.psi, res, adj));
    }
    let tr = TRMatrix::new(e, op.a, op.b, op.n_y, data);
    Ok((
        op,
        EnergyState {
            energy: e,
            fields,
            misfit: mis,
            tr,
        },
    ))
}

/// Objective and gradient over every energy of `obs`.
pub fn evaluate(
    basis: &ParamBasis,
    kappa: &[f64],
    obs: &ObservationSet,
    disc: Discretization,
    with_gradient: bool,
) -> Result<Evaluation> {
    if kappa.len() != basis.len() {
        return Err(Error::Mismatch(format!(
            "{} parameters for a basis of {}",
            kappa.len(),
            basis.len()
        )));
    }
    if disc.n_y != obs.n_y {
        return Err(Error::Mismatch("discretization and observations use different n_y".into()));
    }
    let pot = basis.potential(kappa);
    let per: Vec<(Misfit, Option<Vec<f64>>, TRMatrix)> = (0..obs.energies.len())
        .into_par_iter()
        .map(|s| {
            let (op, st) = energy_state(&pot, obs, s, disc)?;
            let grad = if with_gradient {
                let pairs: Vec<(&Array1<C64>, &Array1<C64>)> =
                    st.fields.iter().map(|(_, psi, _, adj)| (&adj.g, psi)).collect();
                Some(gradient(&op, basis, &pairs)?)
            } else {
                None
            };
            Ok((st.misfit, grad, st.tr))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut misfit = Misfit::default();
    let mut grad = with_gradient.then(|| vec![0.0; basis.len()]);
    let mut trs = Vec::with_capacity(per.len());
    for (m, g, t) in per {
        misfit.minus += m.minus;
        misfit.plus += m.plus;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        trs.push(t);
    }
    Ok(Evaluation {
        misfit,
        gradient: grad,
        trs,
    })
}

/// Central-difference derivative of the objective along parameter `a`.
pub fn finite_difference(
    basis: &ParamBasis,
    kappa: &[f64],
    obs: &ObservationSet,
    disc: Discretization,
    a: usize,
    h: f64,
) -> Result<f64> {
    let mut kp = kappa.to_vec();
    kp[a] += h;
    let fp = evaluate(basis, &kp, obs, disc, false)?.objective();
    kp[a] = kappa[a] - h;
    let fm = evaluate(basis, &kp, obs, disc, false)?.objective();
    Ok((fp - fm) / (2.0 * h))
}

/// Step-size control of the descent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Fixed step throughout.
    #[default]
    Off,
    /// Halve the step on the first iterate until it gives sufficient decrease, then keep it.
    First,
    /// As `First`, and halve again whenever a later step would increase the objective.
    Guarded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub eta: f64,
    pub iters: usize,
    #[serde(default)]
    pub line_search: LineSearch,
    /// Stop once the normalized misfit drops below this.
    #[serde(default)]
    pub target: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            eta: 1.0,
            iters: 100,
            line_search: LineSearch::Off,
            target: 0.0,
        }
    }
}

/// Reference potential for error metrics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Reference {
    pub potential: PotentialRep,
    /// Coefficient used for the average-value error, usually `(j=0, k=0, channel)`.
    pub avg_index: Option<usize>,
}

/// Weighted relative coefficient error with weights `1/(2j+1)`.
pub fn relative_error(iterate: &PotentialRep, reference: &PotentialRep) -> f64 {
    let ny1 = reference.n_y + 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for (idx, (&v, &r)) in iterate.coeffs.iter().zip(&reference.coeffs).enumerate() {
        let j = idx / 4 / ny1;
        let w = 1.0 / (2 * j + 1) as f64;
        num += w * (v - r) * (v - r);
        den += w * r * r;
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Squared relative error of one coefficient.
pub fn average_error(iterate: &PotentialRep, reference: &PotentialRep, idx: usize) -> f64 {
    let r = reference.coeffs[idx];
    let d = iterate.coeffs[idx] - r;
    if r == 0.0 {
        d * d
    } else {
        (d / r) * (d / r)
    }
}

/// One row of the run history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub objective: f64,
    pub misfit: f64,
    pub err: Option<f64>,
    pub err_avg: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionRun {
    pub basis: ParamBasis,
    pub kappa: Vec<f64>,
    pub kappas: Vec<Vec<f64>>,
    pub history: Vec<IterRecord>,
    pub eta: f64,
    pub i_max: usize,
    pub seed: u64,
    /// Objective at the starting iterate, the normalization of `misfit`.
    pub initial_objective: f64,
}

impl ReconstructionRun {
    pub fn new(basis: ParamBasis, kappa0: Vec<f64>, seed: u64) -> Self {
        ReconstructionRun {
            basis,
            kappas: Vec::new(),
            kappa: kappa0,
            history: Vec::new(),
            eta: 0.0,
            i_max: 0,
            seed,
            initial_objective: 0.0,
        }
    }

    pub fn potential(&self) -> PotentialRep {
        self.basis.potential(&self.kappa)
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.history.last()
    }
}

fn record(
    run: &ReconstructionRun,
    iteration: usize,
    objective: f64,
    reference: Option<&Reference>,
    start: Instant,
) -> IterRecord {
    let misfit = if run.initial_objective > 0.0 {
        objective / run.initial_objective
    } else {
        objective
    };
    let pot = run.potential();
    let err = reference.map(|r| relative_error(&pot, &r.potential));
    let err_avg = reference.and_then(|r| r.avg_index.map(|i| average_error(&pot, &r.potential, i)));
    IterRecord {
        iteration,
        objective,
        misfit,
        err,
        err_avg,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn step(kappa: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
    kappa.iter().zip(grad).map(|(k, g)| k - eta * g).collect()
}

/// Gradient descent `kappa <- kappa - eta grad`, one update per sweep over all energies.
pub fn descend(
    mut run: ReconstructionRun,
    obs: &ObservationSet,
    disc: Discretization,
    cfg: &DescentConfig,
    reference: Option<&Reference>,
) -> Result<ReconstructionRun> {
    if !(cfg.eta > 0.0) {
        return Err(Error::Invalid(format!("step size {} must be positive", cfg.eta)));
    }
    let start = Instant::now();
    let at = |iter: usize| move |e: Error| Error::Iterate { iter, source: Box::new(e) };
    let base = run.history.len();
    let mut cur = evaluate(&run.basis, &run.kappa, obs, disc, true).map_err(at(base))?;
    if run.history.is_empty() {
        run.initial_objective = cur.objective();
        run.kappas.push(run.kappa.clone());
        let r = record(&run, 0, cur.objective(), reference, start);
        run.history.push(r);
    }
    run.eta = cfg.eta;
    run.i_max = base.saturating_sub(1) + cfg.iters;
    let mut eta = cfg.eta;
    for it in 0..cfg.iters {
        let iter = run.history.len();
        let grad = cur.gradient.clone().expect("gradient requested");
        let search = match cfg.line_search {
            LineSearch::Off => false,
            LineSearch::First => it == 0,
            LineSearch::Guarded => true,
        };
        // First iterate: sufficient decrease with slope 1/2, which caps the
        // step at the inverse curvature along the gradient. Later: plain decrease.
        let slope = if it == 0 { 0.5 * grad.iter().map(|g| g * g).sum::<f64>() } else { 0.0 };
        let mut next;
        let mut halvings = 0;
        loop {
            let cand = step(&run.kappa, &grad, eta);
            next = evaluate(&run.basis, &cand, obs, disc, true).map_err(at(iter))?;
            let ok = next.objective() <= cur.objective() - slope * eta;
            if !search || ok || halvings >= 40 {
                run.kappa = cand;
                break;
            }
            eta *= 0.5;
            halvings += 1;
        }
        cur = next;
        run.eta = eta;
        run.kappas.push(run.kappa.clone());
        let r = record(&run, iter, cur.objective(), reference, start);
        run.history.push(r);
        if r.misfit <= cfg.target {
            break;
        }
    }
    Ok(run)
}
