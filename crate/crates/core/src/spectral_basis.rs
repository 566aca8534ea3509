//! Quadrature rules, Hermite and Legendre bases, transverse modes of the
//! unperturbed operator, their dual (extraction) functionals and triple
//! overlaps of Hermite functions.

use crate::{Error, Result, C64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Tolerance on `|E^2 - 2n|` below which an energy counts as a band edge.
pub const BAND_EDGE_TOL: f64 = 1e-9;

/// Nodes and weights of a one-dimensional quadrature rule.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Map a rule on [-1, 1] to [a, b].
    pub fn on_interval(&self, a: f64, b: f64) -> GaussRule {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        GaussRule {
            nodes: self.nodes.iter().map(|t| mid + half * t).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Legendre rule with `n` nodes on [-1, 1].
pub fn gauss_legendre(n: usize) -> GaussRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    GaussRule { nodes, weights }
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = 0.0;
    for j in 1..=n {
        let p2 = p1;
        p1 = p0;
        p0 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p2) / j as f64;
    }
    let d = n as f64 * (z * p0 - p1) / (z * z - 1.0);
    (p0, d)
}

/// Gauss–Hermite rule for `∫ f(t) e^{-t^2} dt`.
pub fn gauss_hermite(n: usize) -> GaussRule {
    let (nodes, fn_weights) = hermite_nodes(n);
    let weights = nodes
        .iter()
        .zip(&fn_weights)
        .map(|(&t, &w)| w * (-t * t).exp())
        .collect();
    GaussRule { nodes, weights }
}

/// Rule for `∫ F(y) dy` where `F = poly * exp(-gamma y^2)`; exact when the
/// polynomial part has degree below `2n`.
pub fn gauss_hermite_gaussian(n: usize, gamma: f64) -> GaussRule {
    let (t, w) = hermite_nodes(n);
    let s = gamma.sqrt();
    GaussRule {
        nodes: t.iter().map(|t| t / s).collect(),
        weights: w.iter().map(|w| w / s).collect(),
    }
}

// Nodes and "function" weights 1 / (n phi_{n-1}(t)^2), i.e. the standard
// weights times e^{t^2}.
fn hermite_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        for _ in 0..200 {
            let (pn, pn1) = hermite_pair(n, z);
            let dz = pn / ((2.0 * nf).sqrt() * pn1);
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, pn1) = hermite_pair(n, z);
        let wi = 1.0 / (nf * pn1 * pn1);
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    x.reverse();
    w.reverse();
    (x, w)
}

// (phi_n(t), phi_{n-1}(t)) for normalized Hermite functions.
fn hermite_pair(n: usize, t: f64) -> (f64, f64) {
    let v = hermite_functions(n, t);
    (v[n], if n > 0 { v[n - 1] } else { 0.0 })
}

/// `P_0(t) .. P_nmax(t)`.
pub fn legendre_values(nmax: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(nmax + 1);
    p.push(1.0);
    if nmax >= 1 {
        p.push(t);
    }
    for j in 1..nmax {
        let next = ((2 * j + 1) as f64 * t * p[j] - j as f64 * p[j - 1]) / (j + 1) as f64;
        p.push(next);
    }
    p
}

/// Legendre polynomials orthonormal on [a, b]: `sqrt((2j+1)/(b-a)) P_j`.
pub fn legendre_orthonormal(nmax: usize, x: f64, a: f64, b: f64) -> Vec<f64> {
    let h = b - a;
    let t = (2.0 * x - a - b) / h;
    let mut p = legendre_values(nmax, t);
    for (j, v) in p.iter_mut().enumerate() {
        *v *= ((2 * j + 1) as f64 / h).sqrt();
    }
    p
}

/// Normalized Hermite functions `phi_0(y) .. phi_nmax(y)` by the three-term
/// recurrence.
pub fn hermite_functions(nmax: usize, y: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(nmax + 1);
    v.push(PI.powf(-0.25) * (-0.5 * y * y).exp());
    if nmax >= 1 {
        v.push(2f64.sqrt() * y * v[0]);
    }
    for n in 1..nmax {
        let nf = n as f64;
        let next = (2.0 / (nf + 1.0)).sqrt() * y * v[n] - (nf / (nf + 1.0)).sqrt() * v[n - 1];
        v.push(next);
    }
    v
}

/// Derivatives `phi_n'(y)` for n = 0..=nmax.
pub fn hermite_derivatives(nmax: usize, y: f64) -> Vec<f64> {
    let v = hermite_functions(nmax + 1, y);
    (0..=nmax)
        .map(|n| {
            let nf = n as f64;
            let down = if n > 0 { (nf / 2.0).sqrt() * v[n - 1] } else { 0.0 };
            down - ((nf + 1.0) / 2.0).sqrt() * v[n + 1]
        })
        .collect()
}

/// Rescaled Hermite functions `sqrt(2) pi^{1/4} phi_k(sqrt(2) y)`.
pub fn scaled_hermite(nmax: usize, y: f64) -> Vec<f64> {
    let c = 2f64.sqrt() * PI.powf(0.25);
    hermite_functions(nmax, 2f64.sqrt() * y)
        .into_iter()
        .map(|v| c * v)
        .collect()
}

/// Transverse profile family used to expand a potential in y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YProfile {
    /// `phi_k(y)`
    #[default]
    Hermite,
    /// `sqrt(2) pi^{1/4} phi_k(sqrt(2) y)`
    Scaled,
    /// Constant in y; only k = 0 is meaningful.
    Constant,
}

impl YProfile {
    pub fn eval(self, kmax: usize, y: f64) -> Vec<f64> {
        match self {
            YProfile::Hermite => hermite_functions(kmax, y),
            YProfile::Scaled => scaled_hermite(kmax, y),
            YProfile::Constant => {
                let mut v = vec![0.0; kmax + 1];
                v[0] = 1.0;
                v
            }
        }
    }

    /// `a` in the Gaussian factor `exp(-a y^2)` of each profile.
    pub fn gaussian_rate(self) -> f64 {
        match self {
            YProfile::Hermite => 0.5,
            YProfile::Scaled => 1.0,
            YProfile::Constant => 0.0,
        }
    }
}

/// Hermite functions tabulated on a Gauss–Hermite grid.
#[derive(Clone, Debug)]
pub struct HermiteBasis {
    pub max_level: usize,
    /// Rule for integrands carrying `exp(-y^2)`, such as `phi_i phi_j`.
    pub rule: GaussRule,
    /// `values[n][q] = phi_n(y_q)`.
    pub values: Vec<Vec<f64>>,
}

impl HermiteBasis {
    pub fn new(max_level: usize) -> Self {
        let rule = gauss_hermite_gaussian(2 * max_level + 8, 1.0);
        let mut values = vec![vec![0.0; rule.len()]; max_level + 1];
        for (q, &y) in rule.nodes.iter().enumerate() {
            for (n, v) in hermite_functions(max_level, y).into_iter().enumerate() {
                values[n][q] = v;
            }
        }
        HermiteBasis {
            max_level,
            rule,
            values,
        }
    }

    pub fn inner(&self, i: usize, j: usize) -> f64 {
        self.rule
            .weights
            .iter()
            .enumerate()
            .map(|(q, w)| w * self.values[i][q] * self.values[j][q])
            .sum()
    }

    /// `(y + d/dy) phi_n` at the nodes.
    pub fn lowering(&self, n: usize) -> Vec<f64> {
        self.rule
            .nodes
            .iter()
            .enumerate()
            .map(|(q, &y)| y * self.values[n][q] + hermite_derivatives(n, y)[n])
            .collect()
    }

    /// `(y - d/dy) phi_n` at the nodes.
    pub fn raising(&self, n: usize) -> Vec<f64> {
        self.rule
            .nodes
            .iter()
            .enumerate()
            .map(|(q, &y)| y * self.values[n][q] - hermite_derivatives(n, y)[n])
            .collect()
    }
}

/// Mode label `(n, eps)`; `(0, +1)` is never a valid mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    pub level: usize,
    pub eps: i8,
}

impl ModeIndex {
    pub fn new(level: usize, eps: i8) -> Self {
        ModeIndex { level, eps }
    }
    pub fn minus(level: usize) -> Self {
        ModeIndex { level, eps: -1 }
    }
    pub fn plus(level: usize) -> Self {
        ModeIndex { level, eps: 1 }
    }
    pub fn is_valid(&self) -> bool {
        (self.eps == 1 || self.eps == -1) && !(self.level == 0 && self.eps == 1)
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.level, if self.eps > 0 { '+' } else { '-' })
    }
}

/// Mode ordering used everywhere: all minus modes by level, then plus modes.
pub fn mode_list(n_y: usize) -> Vec<ModeIndex> {
    let mut v: Vec<ModeIndex> = (0..=n_y).map(ModeIndex::minus).collect();
    v.extend((1..=n_y).map(ModeIndex::plus));
    v
}

/// Position of `m` in [`mode_list`].
pub fn mode_position(n_y: usize, m: ModeIndex) -> Option<usize> {
    if !m.is_valid() || m.level > n_y {
        return None;
    }
    Some(if m.eps < 0 { m.level } else { n_y + m.level })
}

/// `Lambda_n(E) = sqrt(E^2 - 2n)`, principal branch, `i sqrt(2n - E^2)` below threshold.
pub fn lambda(level: usize, energy: f64) -> C64 {
    C64::new(energy * energy - 2.0 * level as f64, 0.0).sqrt()
}

/// Decay exponent `theta_n = i Lambda_n`; negative real when evanescent.
pub fn theta(level: usize, energy: f64) -> C64 {
    C64::i() * lambda(level, energy)
}

pub fn check_band_edge(energy: f64, n_y: usize) -> Result<()> {
    for n in 0..=n_y {
        if (energy * energy - 2.0 * n as f64).abs() < BAND_EDGE_TOL {
            return Err(Error::BandEdge { energy, level: n });
        }
    }
    Ok(())
}

/// A transverse mode at fixed energy.
///
/// `profile` holds coefficients on `(phi_{n-1}, 0)` and `(0, phi_n)`; for
/// level 0 only the second entry is used.
#[derive(Clone, Copy, Debug)]
pub struct Mode {
    pub index: ModeIndex,
    pub energy: f64,
    pub xi: C64,
    pub theta: C64,
    pub profile: [C64; 2],
    pub norm: f64,
    pub propagating: bool,
}

impl Mode {
    pub fn new(index: ModeIndex, energy: f64) -> Result<Mode> {
        if !index.is_valid() {
            return Err(Error::Invalid(format!("mode {index} is not in the index set")));
        }
        let n = index.level;
        let k2 = 2.0 * n as f64;
        if (energy * energy - k2).abs() < BAND_EDGE_TOL {
            return Err(Error::BandEdge { energy, level: n });
        }
        let lam = lambda(n, energy);
        let xi = lam * index.eps as f64;
        let e_minus_xi = C64::new(energy, 0.0) - xi;
        let norm = 1.0 / (k2 + e_minus_xi.norm_sqr()).sqrt();
        let profile = if n == 0 {
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
        } else {
            [C64::new(norm * k2.sqrt(), 0.0), norm * e_minus_xi]
        };
        Ok(Mode {
            index,
            energy,
            xi,
            theta: C64::i() * lam,
            profile,
            norm,
            propagating: energy * energy > k2,
        })
    }

    pub fn lambda(&self) -> C64 {
        lambda(self.index.level, self.energy)
    }

    /// `Xi_m = E + eps Lambda_n`.
    pub fn big_xi(&self) -> C64 {
        C64::new(self.energy, 0.0) + self.lambda() * self.index.eps as f64
    }

    /// Spinor components `(u1, u2)` at a transverse point.
    pub fn spinor_at(&self, y: f64) -> [C64; 2] {
        let n = self.index.level;
        let phi = hermite_functions(n, y);
        let upper = if n > 0 { self.profile[0] * phi[n - 1] } else { C64::new(0.0, 0.0) };
        [upper, self.profile[1] * phi[n]]
    }

    /// Residual of the sector equations `xi u1 + a u2 = E u1`, `a* u1 - xi u2 = E u2`.
    pub fn residual(&self) -> f64 {
        let n = self.index.level;
        let k = (2.0 * n as f64).sqrt();
        let e = C64::new(self.energy, 0.0);
        let [u, w] = self.profile;
        if n == 0 {
            return (-self.xi * w - e * w).norm();
        }
        let r1 = self.xi * u + k * w - e * u;
        let r2 = k * u - self.xi * w - e * w;
        (r1.norm_sqr() + r2.norm_sqr()).sqrt()
    }
}

/// Modes for every valid index with level at most `n_y`, in [`mode_list`] order.
pub fn build_modes(energy: f64, n_y: usize) -> Result<Vec<Mode>> {
    check_band_edge(energy, n_y)?;
    mode_list(n_y).into_iter().map(|m| Mode::new(m, energy)).collect()
}

/// Biorthogonal extraction functionals for one level.
#[derive(Clone, Copy, Debug)]
pub struct DualLevel {
    pub overlap: C64,
    pub minus: [C64; 2],
    pub plus: [C64; 2],
}

#[derive(Clone, Debug)]
pub struct DualBasis {
    pub energy: f64,
    pub levels: Vec<DualLevel>,
}

fn dot_h(a: &[C64; 2], b: &[C64; 2]) -> C64 {
    a[0].conj() * b[0] + a[1].conj() * b[1]
}

impl DualBasis {
    pub fn new(energy: f64, n_y: usize) -> Result<DualBasis> {
        check_band_edge(energy, n_y)?;
        let mut levels = Vec::with_capacity(n_y + 1);
        let zero = C64::new(0.0, 0.0);
        levels.push(DualLevel {
            overlap: zero,
            minus: [zero, C64::new(1.0, 0.0)],
            plus: [zero, zero],
        });
        for n in 1..=n_y {
            let pm = Mode::new(ModeIndex::minus(n), energy)?.profile;
            let pp = Mode::new(ModeIndex::plus(n), energy)?.profile;
            let p = dot_h(&pp, &pm);
            if p.norm() >= 1.0 - 1e-8 {
                return Err(Error::DualBasis {
                    level: n,
                    overlap: p.norm(),
                });
            }
            let d = 1.0 - p.norm_sqr();
            let minus = [(pm[0] - p * pp[0]) / d, (pm[1] - p * pp[1]) / d];
            let plus = [(pp[0] - p.conj() * pm[0]) / d, (pp[1] - p.conj() * pm[1]) / d];
            levels.push(DualLevel {
                overlap: p,
                minus,
                plus,
            });
        }
        Ok(DualBasis { energy, levels })
    }

    pub fn functional(&self, m: ModeIndex) -> [C64; 2] {
        let l = &self.levels[m.level];
        if m.eps < 0 {
            l.minus
        } else {
            l.plus
        }
    }

    /// `<theta_m, phi_p>` for two modes on the same level.
    pub fn pair(&self, m: ModeIndex, p: &Mode) -> C64 {
        dot_h(&self.functional(m), &p.profile)
    }
}

/// Triple overlaps `<i,j;k> = ∫ phi_i phi_j chi_k dy`.
#[derive(Clone, Debug)]
pub struct TripleOverlap {
    pub n_ij: usize,
    pub n_k: usize,
    pub profile: YProfile,
    data: Vec<f64>,
}

impl TripleOverlap {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        if i > self.n_ij || j > self.n_ij || k > self.n_k {
            return 0.0;
        }
        self.data[(i * (self.n_ij + 1) + j) * (self.n_k + 1) + k]
    }
}

/// `<i,j;k>` with the rescaled profile, all indices up to `n_y`.
pub fn triple_overlap(n_y: usize) -> TripleOverlap {
    triple_overlap_with(n_y, n_y, YProfile::Scaled)
}

pub fn triple_overlap_with(n_ij: usize, n_k: usize, profile: YProfile) -> TripleOverlap {
    let n_k = if profile == YProfile::Constant { 0 } else { n_k };
    let gamma = 1.0 + profile.gaussian_rate();
    let rule = gauss_hermite_gaussian((2 * n_ij + n_k) / 2 + 10, gamma);
    let ni = n_ij + 1;
    let nk = n_k + 1;
    let mut data = vec![0.0; ni * ni * nk];
    for (&y, &w) in rule.nodes.iter().zip(&rule.weights) {
        let phi = hermite_functions(n_ij, y);
        let chi = profile.eval(n_k, y);
        for i in 0..ni {
            for j in i..ni {
                if phi[i] == 0.0 && phi[j] == 0.0 {
                    continue;
                }
                let pij = w * phi[i] * phi[j];
                for k in 0..nk {
                    if (i + j + k) % 2 == 1 && profile != YProfile::Constant {
                        continue;
                    }
                    data[(i * ni + j) * nk + k] += pij * chi[k];
                }
            }
        }
    }
    for i in 0..ni {
        for j in 0..i {
            for k in 0..nk {
                data[(i * ni + j) * nk + k] = data[(j * ni + i) * nk + k];
            }
        }
    }
    TripleOverlap {
        n_ij,
        n_k,
        profile,
        data,
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Closed form of `<0,s;k>` for the rescaled profile.
pub fn overlap_zero_closed(s: usize, k: usize) -> f64 {
    if k > s || (s - k) % 2 == 1 {
        return 0.0;
    }
    let l = (s - k) / 2;
    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
    sign * 2f64.powf(k as f64 / 2.0 - s as f64) * (factorial(s) / factorial(k)).sqrt()
        / factorial(l)
}

/// Closed form of `<n-1,1;k>` for the rescaled profile, `n >= 1`.
pub fn overlap_one_closed(n: usize, k: usize) -> f64 {
    if n == 0 || k > n || (n - k) % 2 == 1 {
        return 0.0;
    }
    let l = (n - k) / 2;
    let sign = if l % 2 == 0 { -1.0 } else { 1.0 };
    sign * 2f64.powf(k as f64 / 2.0 - n as f64)
        * (factorial(n - 1) / factorial(k)).sqrt()
        * (n as f64 - 2.0 * k as f64)
        / factorial(l)
}
