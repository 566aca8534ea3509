//! Galerkin discretization of one slab `[a, b]`: potential and Green's
//! matrices on a Legendre (x) by transverse-sector basis, the density solve
//! and extraction of outgoing mode coefficients.
//!
//! Unknowns are indexed `s * N + j` where `j < N` is the Legendre index and
//! `s < 2 n_y + 1` the transverse slot: slot 0 is `(0, phi_0)`, slot `2n-1`
//! is `(phi_{n-1}, 0)` and slot `2n` is `(0, phi_n)`. Level `n` owns slots
//! `2n-1, 2n`, so its block of unknowns is contiguous.

use crate::dense::{identity, Lu};
use crate::spectral_basis::{
    build_modes, gauss_hermite_gaussian, gauss_legendre, hermite_functions, legendre_orthonormal,
    legendre_values, mode_list, DualBasis, GaussRule, Mode, ModeIndex, YProfile,
};
use crate::{Error, Result, C64};
use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Longitudinal basis of a potential.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XBasis {
    /// `P_j` mapped to the support.
    #[default]
    Legendre,
    /// `1, cos(w t), sin(w t), cos(2 w t), ...` with `t = x - x_left`, `w = 2 pi / width`.
    Fourier,
}

/// Real potential `V = sum kappa[j,k,i] e_j(x) chi_k(y) sigma_i` on `[x_left, x_right]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialRep {
    pub x_left: f64,
    pub x_right: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub profile: YProfile,
    #[serde(default)]
    pub x_kind: XBasis,
    pub coeffs: Vec<f64>,
}

impl PotentialRep {
    pub fn zeros(x_left: f64, x_right: f64, n_x: usize, n_y: usize, profile: YProfile) -> Result<Self> {
        if !(x_left < x_right) || !x_left.is_finite() || !x_right.is_finite() {
            return Err(Error::Invalid(format!("support [{x_left}, {x_right}] is empty")));
        }
        Ok(PotentialRep {
            x_left,
            x_right,
            n_x,
            n_y,
            profile,
            x_kind: XBasis::Legendre,
            coeffs: vec![0.0; (n_x + 1) * (n_y + 1) * 4],
        })
    }

    /// Zero potential on the real Fourier basis with `2 r + 1` functions.
    pub fn fourier_zeros(x_left: f64, x_right: f64, r: usize, n_y: usize, profile: YProfile) -> Result<Self> {
        let mut p = Self::zeros(x_left, x_right, 2 * r, n_y, profile)?;
        p.x_kind = XBasis::Fourier;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn index(&self, j: usize, k: usize, i: usize) -> usize {
        (j * (self.n_y + 1) + k) * 4 + i
    }

    pub fn get(&self, j: usize, k: usize, i: usize) -> f64 {
        self.coeffs[self.index(j, k, i)]
    }

    pub fn set(&mut self, j: usize, k: usize, i: usize, v: f64) {
        let idx = self.index(j, k, i);
        self.coeffs[idx] = v;
    }

    pub fn width(&self) -> f64 {
        self.x_right - self.x_left
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn scaled(&self, f: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= f);
        out
    }

    /// Longitudinal basis functions on the support, zero outside it.
    pub fn x_basis(&self, x: f64) -> Vec<f64> {
        if x < self.x_left || x > self.x_right {
            return vec![0.0; self.n_x + 1];
        }
        match self.x_kind {
            XBasis::Legendre => {
                let t = (2.0 * x - self.x_left - self.x_right) / self.width();
                legendre_values(self.n_x, t)
            }
            XBasis::Fourier => {
                let w = 2.0 * std::f64::consts::PI / self.width();
                let t = x - self.x_left;
                (0..=self.n_x)
                    .map(|l| {
                        let j = l.div_ceil(2) as f64;
                        if l == 0 {
                            1.0
                        } else if l % 2 == 1 {
                            (j * w * t).cos()
                        } else {
                            (j * w * t).sin()
                        }
                    })
                    .collect()
            }
        }
    }

    /// Pauli channel values `(v0, v1, v2, v3)` at a point.
    pub fn channels_at(&self, x: f64, y: f64) -> [f64; 4] {
        let px = self.x_basis(x);
        let chi = self.profile.eval(self.n_y, y);
        self.channels_from(&px, &chi)
    }

    pub fn channels_from(&self, px: &[f64], chi: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (j, &p) in px.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (k, &c) in chi.iter().enumerate() {
                let pc = p * c;
                if pc == 0.0 {
                    continue;
                }
                let base = self.index(j, k, 0);
                for (i, o) in out.iter_mut().enumerate() {
                    *o += self.coeffs[base + i] * pc;
                }
            }
        }
        out
    }

    pub fn matrix_at(&self, x: f64, y: f64) -> [[C64; 2]; 2] {
        pauli_matrix(self.channels_at(x, y))
    }
}

/// `v0 I + v1 sx + v2 sy + v3 sz`.
pub fn pauli_matrix(v: [f64; 4]) -> [[C64; 2]; 2] {
    [
        [C64::new(v[0] + v[3], 0.0), C64::new(v[1], -v[2])],
        [C64::new(v[1], v[2]), C64::new(v[0] - v[3], 0.0)],
    ]
}

/// Transverse truncation and Legendre order of the field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    /// Highest mode level kept.
    pub n_y: usize,
    /// Legendre functions per slot; chosen from the energy when `None`.
    pub order: Option<usize>,
}

impl Discretization {
    pub fn new(n_y: usize) -> Self {
        Discretization { n_y, order: None }
    }

    pub fn with_order(n_y: usize, order: usize) -> Self {
        Discretization {
            n_y,
            order: Some(order),
        }
    }

    pub fn field_order(&self, pot_nx: usize, energy: f64, width: f64) -> usize {
        self.order
            .unwrap_or_else(|| pot_nx + 10 + (energy.abs() * width).ceil() as usize)
            .max(2)
    }
}

/// Slot of the `(component, level)` basis function, component 0 upper.
pub fn slot_of(component: usize, level: usize) -> usize {
    if component == 0 {
        2 * level + 1
    } else {
        2 * level
    }
}

/// `(component, level)` of a slot.
pub fn slot_parts(slot: usize) -> (usize, usize) {
    if slot % 2 == 1 {
        (0, slot.div_ceil(2) - 1)
    } else {
        (1, slot / 2)
    }
}

/// Tensor grid shared by projections and pairings.
#[derive(Clone, Debug)]
pub struct SlabGrid {
    pub x: GaussRule,
    pub y: GaussRule,
    /// `px[q][j]`: orthonormal Legendre functions of the field at `x_q`.
    pub px: Vec<Vec<f64>>,
    /// `phi[r][n]`: Hermite functions at `y_r`.
    pub phi: Vec<Vec<f64>>,
}

impl SlabGrid {
    fn new(a: f64, b: f64, order: usize, n_y: usize, pot: &PotentialRep) -> SlabGrid {
        let pot_deg = if pot.profile == YProfile::Constant { 0 } else { pot.n_y };
        let qx = order + pot.n_x.div_ceil(2) + 2;
        let qy = n_y + pot_deg.div_ceil(2) + 3;
        let x = gauss_legendre(qx).on_interval(a, b);
        let y = gauss_hermite_gaussian(qy, 1.0 + pot.profile.gaussian_rate());
        let px = x.nodes.iter().map(|&xq| legendre_orthonormal(order - 1, xq, a, b)).collect();
        let phi = y.nodes.iter().map(|&yr| hermite_functions(n_y, yr)).collect();
        SlabGrid { x, y, px, phi }
    }
}

/// Kernel data for one level.
#[derive(Clone, Debug)]
struct LevelKernel {
    theta: C64,
    /// `∫∫_{x > x0} p_i(x) p_j(x0) exp(theta (x - x0))`.
    aplus: Array2<C64>,
    /// `M_+` (x > x0) and `M_-` (x < x0).
    m_plus: [[C64; 2]; 2],
    m_minus: [[C64; 2]; 2],
    /// `∫ exp(theta (x0 - a)) p_j(x0)` and `∫ exp(theta (b - x0)) p_j(x0)`.
    left_moment: Vec<C64>,
    right_moment: Vec<C64>,
}

/// Result of one density solve.
#[derive(Clone, Debug)]
pub struct Density {
    pub incoming: Array1<C64>,
    pub rho: Array1<C64>,
    pub psi: Array1<C64>,
}

/// Discretized slab at fixed energy.
#[derive(Clone, Debug)]
pub struct SlabOperator {
    pub energy: f64,
    pub a: f64,
    pub b: f64,
    pub n_y: usize,
    pub order: usize,
    pub modes: Vec<Mode>,
    pub dual: DualBasis,
    pub grid: SlabGrid,
    pub v_hat: Array2<C64>,
    pub g_hat: Array2<C64>,
    levels: Vec<LevelKernel>,
    lu: Lu,
    cond: f64,
}

fn amplitude(theta: C64) -> C64 {
    -1.0 / (2.0 * theta)
}

/// `M_+` and `M_-` for level `n`: `(H_0 + E)` applied to the scalar kernel.
pub fn kernel_matrices(level: usize, energy: f64) -> ([[C64; 2]; 2], [[C64; 2]; 2]) {
    let lam = crate::spectral_basis::lambda(level, energy);
    let e = C64::new(energy, 0.0);
    let k = C64::new((2.0 * level as f64).sqrt(), 0.0);
    ([[e + lam, k], [k, e - lam]], [[e - lam, k], [k, e + lam]])
}

fn build_level(level: usize, energy: f64, a: f64, b: f64, order: usize) -> LevelKernel {
    let theta = crate::spectral_basis::theta(level, energy);
    let h = b - a;
    let q = order + 6 + (theta.norm() * h).ceil() as usize;
    let rule = gauss_legendre(q).on_interval(0.0, 1.0);
    let mut aplus = Array2::<C64>::zeros((order, order));
    let mut inner = vec![C64::new(0.0, 0.0); order];
    for (&u, &wu) in rule.nodes.iter().zip(&rule.weights) {
        let x = a + h * u;
        let px = legendre_orthonormal(order - 1, x, a, b);
        inner.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (&v, &wv) in rule.nodes.iter().zip(&rule.weights) {
            let x0 = a + h * u * v;
            let p0 = legendre_orthonormal(order - 1, x0, a, b);
            let e = (theta * (h * u * (1.0 - v))).exp() * wv;
            for (acc, p) in inner.iter_mut().zip(&p0) {
                *acc += e * *p;
            }
        }
        let f = h * h * u * wu;
        for i in 0..order {
            let fi = f * px[i];
            for j in 0..order {
                aplus[[i, j]] += inner[j] * fi;
            }
        }
    }
    let mq = order + 20 + (theta.norm() * h).ceil() as usize;
    let mrule = gauss_legendre(mq).on_interval(a, b);
    let mut left_moment = vec![C64::new(0.0, 0.0); order];
    let mut right_moment = vec![C64::new(0.0, 0.0); order];
    for (&x0, &w) in mrule.nodes.iter().zip(&mrule.weights) {
        let p = legendre_orthonormal(order - 1, x0, a, b);
        let el = (theta * (x0 - a)).exp() * w;
        let er = (theta * (b - x0)).exp() * w;
        for j in 0..order {
            left_moment[j] += el * p[j];
            right_moment[j] += er * p[j];
        }
    }
    let (m_plus, m_minus) = kernel_matrices(level, energy);
    LevelKernel {
        theta,
        aplus,
        m_plus,
        m_minus,
        left_moment,
        right_moment,
    }
}

/// Local slots of level `n` with their component index into `M_pm`.
fn level_slots(level: usize) -> Vec<(usize, usize)> {
    if level == 0 {
        vec![(0, 1)]
    } else {
        vec![(2 * level - 1, 0), (2 * level, 1)]
    }
}

/// Galerkin matrix of the outgoing Green's operator.
pub fn green_matrix(energy: f64, a: f64, b: f64, n_y: usize, order: usize) -> Result<Array2<C64>> {
    crate::spectral_basis::check_band_edge(energy, n_y)?;
    let levels: Vec<LevelKernel> = (0..=n_y).map(|n| build_level(n, energy, a, b, order)).collect();
    Ok(assemble_green(&levels, n_y, order))
}

fn assemble_green(levels: &[LevelKernel], n_y: usize, order: usize) -> Array2<C64> {
    let dim = (2 * n_y + 1) * order;
    let mut g = Array2::<C64>::zeros((dim, dim));
    for (n, lk) in levels.iter().enumerate() {
        let amp = amplitude(lk.theta);
        for &(sa, ca) in &level_slots(n) {
            for &(sb, cb) in &level_slots(n) {
                let mp = lk.m_plus[ca][cb] * amp;
                let mm = lk.m_minus[ca][cb] * amp;
                for i in 0..order {
                    for j in 0..order {
                        g[[sa * order + i, sb * order + j]] = mp * lk.aplus[[i, j]] + mm * lk.aplus[[j, i]];
                    }
                }
            }
        }
    }
    g
}

/// Galerkin matrices `(G_out, G_in)`; the incoming one is the adjoint kernel.
pub fn greens_matrices(
    energy: f64,
    a: f64,
    b: f64,
    n_y: usize,
    order: usize,
) -> Result<(Array2<C64>, Array2<C64>)> {
    let g = green_matrix(energy, a, b, n_y, order)?;
    let gin = g.t().mapv(|z| z.conj());
    Ok((g, gin))
}

/// Galerkin matrix of multiplication by `V` on `[a, b]`.
pub fn project_potential(pot: &PotentialRep, grid: &SlabGrid, n_y: usize, order: usize) -> Array2<C64> {
    let d = 2 * n_y + 1;
    let dim = d * order;
    let mut v_hat = Array2::<C64>::zeros((dim, dim));
    if pot.is_zero() {
        return v_hat;
    }
    let chis: Vec<Vec<f64>> = grid.y.nodes.iter().map(|&y| pot.profile.eval(pot.n_y, y)).collect();
    let mut vy = vec![C64::new(0.0, 0.0); d * d];
    for (q, (&xq, &wq)) in grid.x.nodes.iter().zip(&grid.x.weights).enumerate() {
        let px_pot = pot.x_basis(xq);
        vy.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (r, &wr) in grid.y.weights.iter().enumerate() {
            let m = pauli_matrix(pot.channels_from(&px_pot, &chis[r]));
            let phi = &grid.phi[r];
            for s in 0..d {
                let (cs, ls) = slot_parts(s);
                let fs = wr * phi[ls];
                for t in 0..d {
                    let (ct, lt) = slot_parts(t);
                    vy[s * d + t] += m[cs][ct] * (fs * phi[lt]);
                }
            }
        }
        let p = &grid.px[q];
        for s in 0..d {
            for t in 0..d {
                let c = vy[s * d + t] * wq;
                if c.norm() == 0.0 {
                    continue;
                }
                for i in 0..order {
                    let ci = c * p[i];
                    let row = s * order + i;
                    for j in 0..order {
                        v_hat[[row, t * order + j]] += ci * p[j];
                    }
                }
            }
        }
    }
    v_hat
}

impl SlabOperator {
    /// Discretize `pot` restricted to `[a, b]` at energy `E > 0`.
    pub fn new(pot: &PotentialRep, energy: f64, a: f64, b: f64, disc: Discretization) -> Result<Self> {
        if !(energy > 0.0) {
            return Err(Error::Invalid(format!(
                "slab solver needs a positive energy, got {energy}"
            )));
        }
        if !(a <= b) {
            return Err(Error::Invalid(format!("slab [{a}, {b}] is reversed")));
        }
        let n_y = disc.n_y;
        let modes = build_modes(energy, n_y)?;
        let dual = DualBasis::new(energy, n_y)?;
        let order = disc.field_order(pot.n_x, energy, b - a);
        let grid = SlabGrid::new(a, b, order, n_y, pot);
        let levels: Vec<LevelKernel> = (0..=n_y).map(|n| build_level(n, energy, a, b, order)).collect();
        let g_hat = assemble_green(&levels, n_y, order);
        let v_hat = project_potential(pot, &grid, n_y, order);
        let dim = g_hat.nrows();
        let mut sys = identity(dim);
        // V G exploiting the level-block structure of G.
        for n in 0..=n_y {
            let (lo, hi) = level_range(n, order);
            let vg = v_hat.slice(s![.., lo..hi]).dot(&g_hat.slice(s![lo..hi, lo..hi]));
            let mut blk = sys.slice_mut(s![.., lo..hi]);
            blk += &vg;
        }
        let lu = Lu::new(sys);
        let cond = lu.condition_estimate();
        if !cond.is_finite() || cond > crate::dense::COND_LIMIT {
            return Err(Error::IllConditioned { cond });
        }
        Ok(SlabOperator {
            energy,
            a,
            b,
            n_y,
            order,
            modes,
            dual,
            grid,
            v_hat,
            g_hat,
            levels,
            lu,
            cond,
        })
    }

    pub fn dim(&self) -> usize {
        (2 * self.n_y + 1) * self.order
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    pub fn condition(&self) -> f64 {
        self.cond
    }

    pub fn lu(&self) -> &Lu {
        &self.lu
    }

    pub fn mode(&self, m: ModeIndex) -> &Mode {
        let pos = crate::spectral_basis::mode_position(self.n_y, m).expect("mode in truncation");
        &self.modes[pos]
    }

    /// Reference point of the incoming phase of mode `p`.
    pub fn incoming_reference(&self, p: ModeIndex) -> f64 {
        if p.eps > 0 {
            self.a
        } else {
            self.b
        }
    }

    /// Diagonal of the free TR matrix: `exp(i Lambda_n (b - a))`.
    pub fn free_phase(&self, m: ModeIndex) -> C64 {
        (C64::i() * self.mode(m).lambda() * self.width()).exp()
    }

    /// Legendre projection of `sum_p coef_p exp(i xi_p (x - ref_p)) phi_p`.
    pub fn project_incoming(&self, coef: &[C64]) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.dim());
        let order = self.order;
        let list = mode_list(self.n_y);
        let mut cache: Option<(usize, GaussRule)> = None;
        for (pos, &c) in coef.iter().enumerate() {
            if c == C64::new(0.0, 0.0) {
                continue;
            }
            let mode = &self.modes[pos];
            let p = list[pos];
            let q = order + 20 + (mode.xi.norm() * self.width()).ceil() as usize;
            if cache.as_ref().map(|c| c.0) != Some(q) {
                cache = Some((q, gauss_legendre(q).on_interval(self.a, self.b)));
            }
            let rule = &cache.as_ref().expect("rule").1;
            let xref = self.incoming_reference(p);
            let mut mom = vec![C64::new(0.0, 0.0); order];
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                let e = (C64::i() * mode.xi * (x - xref)).exp() * w;
                let px = legendre_orthonormal(order - 1, x, self.a, self.b);
                for j in 0..order {
                    mom[j] += e * px[j];
                }
            }
            for &(slot, comp) in &level_slots(p.level) {
                let amp = c * mode.profile[comp];
                for j in 0..order {
                    out[slot * order + j] += amp * mom[j];
                }
            }
        }
        out
    }

    /// Unit incoming wave in mode `p`.
    pub fn incoming_unit(&self, p: ModeIndex) -> Array1<C64> {
        let list = mode_list(self.n_y);
        let coef: Vec<C64> = list
            .iter()
            .map(|&m| if m == p { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
            .collect();
        self.project_incoming(&coef)
    }

    /// `G v` using the block structure.
    pub fn apply_green(&self, v: &Array1<C64>) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.dim());
        for n in 0..=self.n_y {
            let (lo, hi) = level_range(n, self.order);
            let r = self.g_hat.slice(s![lo..hi, lo..hi]).dot(&v.slice(s![lo..hi]));
            out.slice_mut(s![lo..hi]).assign(&r);
        }
        out
    }

    /// `G^H v` using the block structure.
    pub fn apply_green_adjoint(&self, v: &Array1<C64>) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.dim());
        for n in 0..=self.n_y {
            let (lo, hi) = level_range(n, self.order);
            let blk = self.g_hat.slice(s![lo..hi, lo..hi]);
            let r = blk.t().mapv(|z| z.conj()).dot(&v.slice(s![lo..hi]));
            out.slice_mut(s![lo..hi]).assign(&r);
        }
        out
    }

    /// Solve for the density driven by a projected incoming field.
    pub fn solve_projected(&self, incoming: Array1<C64>) -> Density {
        let rhs = -self.v_hat.dot(&incoming);
        let rho = self.lu.solve(&rhs.view());
        let psi = &incoming + &self.apply_green(&rho);
        Density { incoming, rho, psi }
    }

    /// Density for incoming coefficients ordered like [`mode_list`].
    pub fn solve_density(&self, coef: &[C64]) -> Density {
        self.solve_projected(self.project_incoming(coef))
    }

    pub fn solve_mode(&self, p: ModeIndex) -> Density {
        self.solve_projected(self.incoming_unit(p))
    }

    /// Densities for every mode of the truncation, in [`mode_list`] order.
    pub fn solve_all(&self) -> Vec<Density> {
        mode_list(self.n_y)
            .par_iter()
            .map(|&p| self.solve_mode(p))
            .collect()
    }

    /// `||rho + V (psi_in + G rho)|| / ||V psi_in||`.
    pub fn ls_residual(&self, d: &Density) -> f64 {
        let r = &d.rho + &self.v_hat.dot(&d.psi);
        let scale = self.v_hat.dot(&d.incoming).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let num = r.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if scale == 0.0 {
            num
        } else {
            num / scale
        }
    }

    /// Linear functional extracting the scattered part of `alpha_m` from a density.
    pub fn extraction_functional(&self, m: ModeIndex) -> Array1<C64> {
        let mut out = Array1::<C64>::zeros(self.dim());
        let lk = &self.levels[m.level];
        let amp = amplitude(lk.theta);
        let dual = self.dual.functional(m);
        let (mat, moment) = if m.eps < 0 {
            (&lk.m_minus, &lk.left_moment)
        } else {
            (&lk.m_plus, &lk.right_moment)
        };
        for &(slot, comp) in &level_slots(m.level) {
            // (theta_m^H M)[comp]
            let mut row = C64::new(0.0, 0.0);
            for &(_, c2) in &level_slots(m.level) {
                row += dual[c2].conj() * mat[c2][comp];
            }
            let f = row * amp;
            for j in 0..self.order {
                out[slot * self.order + j] = f * moment[j];
            }
        }
        out
    }

    /// All extraction functionals in [`mode_list`] order.
    pub fn extraction_functionals(&self) -> Vec<Array1<C64>> {
        mode_list(self.n_y).into_iter().map(|m| self.extraction_functional(m)).collect()
    }

    /// Outgoing coefficients for one density: `alpha_m(a)` for minus modes,
    /// `alpha_m(b)` for plus modes.
    pub fn outgoing(&self, coef: &[C64], d: &Density, ells: &[Array1<C64>]) -> Vec<C64> {
        mode_list(self.n_y)
            .iter()
            .enumerate()
            .map(|(pos, &m)| coef[pos] * self.free_phase(m) + ells[pos].dot(&d.rho))
            .collect()
    }

    /// TR matrix of this slab.
    pub fn tr(&self) -> crate::tr_merge::TRMatrix {
        let list = mode_list(self.n_y);
        let nm = list.len();
        let ells = self.extraction_functionals();
        let dens = self.solve_all();
        let mut data = Array2::<C64>::zeros((nm, nm));
        for (p, d) in dens.iter().enumerate() {
            for m in 0..nm {
                let mut v = ells[m].dot(&d.rho);
                if m == p {
                    v += self.free_phase(list[m]);
                }
                data[[m, p]] = v;
            }
        }
        crate::tr_merge::TRMatrix::new(self.energy, self.a, self.b, self.n_y, data)
    }

    /// Transverse coefficients (one per slot) of the total field at `x`.
    pub fn field_slots_at(&self, x: f64, d: &Density, coef: &[C64]) -> Vec<C64> {
        let dslots = 2 * self.n_y + 1;
        let order = self.order;
        let mut out = vec![C64::new(0.0, 0.0); dslots];
        let list = mode_list(self.n_y);
        for (pos, &c) in coef.iter().enumerate() {
            if c == C64::new(0.0, 0.0) {
                continue;
            }
            let mode = &self.modes[pos];
            let e = (C64::i() * mode.xi * (x - self.incoming_reference(list[pos]))).exp() * c;
            for &(slot, comp) in &level_slots(list[pos].level) {
                out[slot] += e * mode.profile[comp];
            }
        }
        let h = self.width();
        for (n, lk) in self.levels.iter().enumerate() {
            let amp = amplitude(lk.theta);
            let q = order + 20 + (lk.theta.norm() * h).ceil() as usize;
            let rule = gauss_legendre(q);
            // moments of rho over [a, x] and [x, b]
            let mut left = [C64::new(0.0, 0.0); 2];
            let mut right = [C64::new(0.0, 0.0); 2];
            let slots = level_slots(n);
            for (part, (lo, hi)) in [(self.a, x), (x, self.b)].into_iter().enumerate() {
                if hi <= lo {
                    continue;
                }
                let r = rule.on_interval(lo, hi);
                for (&x0, &w) in r.nodes.iter().zip(&r.weights) {
                    let p = legendre_orthonormal(order - 1, x0, self.a, self.b);
                    let e = if part == 0 {
                        (lk.theta * (x - x0)).exp()
                    } else {
                        (lk.theta * (x0 - x)).exp()
                    } * w;
                    for &(slot, comp) in &slots {
                        let mut v = C64::new(0.0, 0.0);
                        for j in 0..order {
                            v += d.rho[slot * order + j] * p[j];
                        }
                        if part == 0 {
                            left[comp] += e * v;
                        } else {
                            right[comp] += e * v;
                        }
                    }
                }
            }
            for &(slot, comp) in &slots {
                let mut v = C64::new(0.0, 0.0);
                for &(_, c2) in &slots {
                    v += lk.m_plus[comp][c2] * left[c2] + lk.m_minus[comp][c2] * right[c2];
                }
                out[slot] += amp * v;
            }
        }
        out
    }

    /// Mode coefficients `alpha_m(x)` of the total field, in [`mode_list`] order.
    pub fn field_coefficients_at(&self, x: f64, d: &Density, coef: &[C64]) -> Vec<C64> {
        let slots = self.field_slots_at(x, d, coef);
        slots_to_modes(&self.dual, self.n_y, &slots)
    }

    /// Values of a Galerkin field at every grid point, `[q * ny + r]`.
    pub fn grid_values(&self, coeffs: &Array1<C64>) -> Vec<[C64; 2]> {
        let order = self.order;
        let dslots = 2 * self.n_y + 1;
        let nqy = self.grid.y.len();
        let mut out = vec![[C64::new(0.0, 0.0); 2]; self.grid.x.len() * nqy];
        let mut per_slot = vec![C64::new(0.0, 0.0); dslots];
        for (q, p) in self.grid.px.iter().enumerate() {
            for (s, v) in per_slot.iter_mut().enumerate() {
                *v = (0..order).map(|j| coeffs[s * order + j] * p[j]).sum();
            }
            for (r, phi) in self.grid.phi.iter().enumerate() {
                let mut u = [C64::new(0.0, 0.0); 2];
                for (s, &v) in per_slot.iter().enumerate() {
                    let (c, l) = slot_parts(s);
                    u[c] += v * phi[l];
                }
                out[q * nqy + r] = u;
            }
        }
        out
    }
}

/// Decompose slot coefficients into mode coefficients with the dual basis.
pub fn slots_to_modes(dual: &DualBasis, n_y: usize, slots: &[C64]) -> Vec<C64> {
    mode_list(n_y)
        .into_iter()
        .map(|m| {
            let f = dual.functional(m);
            level_slots(m.level)
                .iter()
                .map(|&(slot, comp)| f[comp].conj() * slots[slot])
                .sum()
        })
        .collect()
}

/// Half-open range of unknowns owned by a level.
pub fn level_range(level: usize, order: usize) -> (usize, usize) {
    if level == 0 {
        (0, order)
    } else {
        ((2 * level - 1) * order, (2 * level + 1) * order)
    }
}

/// TR matrix of a single slab covering the whole support of `pot`.
pub fn slab_tr(pot: &PotentialRep, energy: f64, disc: Discretization) -> Result<crate::tr_merge::TRMatrix> {
    Ok(SlabOperator::new(pot, energy, pot.x_left, pot.x_right, disc)?.tr())
}
