//! Born-level scattering map, dispersion inversion and the explicit
//! frequency-by-frequency inversion of the linearized data.

use crate::dense::solve_small;
use crate::greens_slab::{PotentialRep, XBasis};
use crate::spectral_basis::{lambda, triple_overlap_with, Mode, ModeIndex, TripleOverlap, YProfile};
use crate::{Error, Result, C64};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const EXCLUDED_TOL: f64 = 1e-12;

/// `xi_{m,p}(E) = eps_m Lambda_n(E) - eps_p Lambda_q(E)` for propagating modes.
pub fn xi_pair(m: ModeIndex, p: ModeIndex, energy: f64) -> f64 {
    m.eps as f64 * lambda(m.level, energy).re - p.eps as f64 * lambda(p.level, energy).re
}

/// Energy at which a level pair sees a given longitudinal frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionPair {
    pub n: usize,
    pub q: usize,
    pub xi: f64,
    pub eps_m: i8,
    pub eps_p: i8,
    pub energy: f64,
}

impl DispersionPair {
    pub fn m(&self) -> ModeIndex {
        ModeIndex::new(self.n, self.eps_m)
    }

    pub fn p(&self) -> ModeIndex {
        ModeIndex::new(self.q, self.eps_p)
    }

    /// Both directions name modes that exist (`(0,+)` does not).
    pub fn is_valid(&self) -> bool {
        self.m().is_valid() && self.p().is_valid()
    }

    /// Same pair at the negative root `-E`.
    pub fn negative(&self) -> DispersionPair {
        DispersionPair {
            energy: -self.energy,
            ..*self
        }
    }
}

fn excluded_set(n: usize, q: usize) -> String {
    let d = n.abs_diff(q);
    if d == 0 {
        "{0}".to_string()
    } else {
        format!("{{0, ±sqrt({})}}", 2 * d)
    }
}

/// Directions and positive energy root for levels `(n, q)` at frequency `xi`.
pub fn resolve_dispersion(n: usize, q: usize, xi: f64) -> Result<DispersionPair> {
    if n == 0 && q == 0 {
        return Err(Error::Invalid("level pair (0,0) only reaches xi = 0".into()));
    }
    let d = n.abs_diff(q) as f64;
    let edge = (2.0 * d).sqrt();
    if !xi.is_finite() || xi.abs() < EXCLUDED_TOL || (xi.abs() - edge).abs() < EXCLUDED_TOL {
        return Err(Error::ExcludedFrequency {
            xi,
            excluded: excluded_set(n, q),
        });
    }
    let sgn = |v: f64| if v > 0.0 { 1i8 } else { -1i8 };
    let (eps_m, eps_p) = if xi.abs() > edge {
        (sgn(xi), -sgn(xi))
    } else {
        let s = sgn(xi * (q as f64 - n as f64));
        (s, s)
    };
    let energy = (xi * xi / 4.0 + (n + q) as f64 + d * d / (xi * xi)).sqrt();
    Ok(DispersionPair {
        n,
        q,
        xi,
        eps_m,
        eps_p,
        energy,
    })
}

/// Spherical Bessel functions `j_0(z) .. j_nmax(z)`.
pub fn spherical_bessel(nmax: usize, z: f64) -> Vec<f64> {
    let mut out = vec![0.0; nmax + 1];
    let az = z.abs();
    if az < 1e-8 {
        // leading term z^n / (2n+1)!!
        let mut t = 1.0;
        for (n, o) in out.iter_mut().enumerate() {
            if n > 0 {
                t *= z / (2 * n + 1) as f64;
            }
            *o = t;
        }
        return out;
    }
    if az > nmax as f64 {
        out[0] = z.sin() / z;
        if nmax >= 1 {
            out[1] = z.sin() / (z * z) - z.cos() / z;
        }
        for n in 1..nmax {
            out[n + 1] = (2 * n + 1) as f64 / z * out[n] - out[n - 1];
        }
        return out;
    }
    // Miller's downward recurrence, normalized by sum (2n+1) j_n^2 = 1.
    let start = nmax + 20 + (40.0 * (nmax as f64 + az)).sqrt() as usize;
    let mut next = 0.0;
    let mut cur = 1.0;
    let mut tail = vec![0.0; start + 1];
    tail[start] = cur;
    for n in (1..=start).rev() {
        let prev = (2 * n + 1) as f64 / z * cur - next;
        next = cur;
        cur = prev;
        tail[n - 1] = cur;
        if cur.abs() > 1e120 {
            for t in tail.iter_mut().skip(n - 1) {
                *t *= 1e-120;
            }
            next *= 1e-120;
            cur *= 1e-120;
        }
    }
    let norm: f64 = tail
        .iter()
        .enumerate()
        .map(|(n, t)| (2 * n + 1) as f64 * t * t)
        .sum::<f64>()
        .sqrt();
    let j0 = z.sin() / z;
    let j1 = z.sin() / (z * z) - z.cos() / z;
    let sign = if j0.abs() > j1.abs() {
        j0.signum() * tail[0].signum()
    } else {
        j1.signum() * tail[1].signum()
    };
    for (o, t) in out.iter_mut().zip(&tail) {
        *o = sign * t / norm;
    }
    out
}

/// `∫_0^h e^{i k t} dt`.
fn exp_integral(k: f64, h: f64) -> C64 {
    let half = 0.5 * k * h;
    let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
    C64::from_polar(h * sinc, half)
}

/// Fourier transforms `∫ e_j(x) e^{-i xi x} dx` of the longitudinal basis.
pub fn basis_transform(pot: &PotentialRep, xi: f64) -> Vec<C64> {
    let (a, b) = (pot.x_left, pot.x_right);
    let h = b - a;
    match pot.x_kind {
        XBasis::Legendre => {
            let c = 0.5 * (a + b);
            let jb = spherical_bessel(pot.n_x, 0.5 * xi * h);
            let shift = C64::from_polar(h, -xi * c);
            let mut mi = C64::new(1.0, 0.0);
            jb.iter()
                .map(|&v| {
                    let out = shift * mi * v;
                    mi *= C64::new(0.0, -1.0);
                    out
                })
                .collect()
        }
        XBasis::Fourier => {
            let w = 2.0 * std::f64::consts::PI / h;
            let shift = C64::from_polar(1.0, -xi * a);
            (0..=pot.n_x)
                .map(|l| {
                    let j = l.div_ceil(2) as f64;
                    if l == 0 {
                        return shift * exp_integral(-xi, h);
                    }
                    let fp = exp_integral(j * w - xi, h);
                    let fm = exp_integral(-j * w - xi, h);
                    if l % 2 == 1 {
                        shift * (fp + fm) * 0.5
                    } else {
                        shift * (fp - fm) / C64::new(0.0, 2.0)
                    }
                })
                .collect()
        }
    }
}

/// Channel transforms `v_hat[k][i](xi)`.
pub fn v_hat(pot: &PotentialRep, xi: f64) -> Vec<[C64; 4]> {
    let f = basis_transform(pot, xi);
    let mut out = vec![[C64::new(0.0, 0.0); 4]; pot.n_y + 1];
    for (j, fj) in f.iter().enumerate() {
        for (k, row) in out.iter_mut().enumerate() {
            for (i, o) in row.iter_mut().enumerate() {
                let c = pot.get(j, k, i);
                if c != 0.0 {
                    *o += fj * c;
                }
            }
        }
    }
    out
}

/// `∫ conj(phi_m)^T sigma_i phi_p chi_k dy` for `i = 0..3`.
pub fn spin_integrals(m: &Mode, p: &Mode, tri: &TripleOverlap, k: usize) -> [C64; 4] {
    let (n, q) = (m.index.level, p.index.level);
    let um = m.profile[0].conj();
    let wm = m.profile[1].conj();
    let (up, wp) = (p.profile[0], p.profile[1]);
    let t = |i: Option<usize>, j: Option<usize>| match (i, j) {
        (Some(i), Some(j)) => tri.get(i, j, k),
        _ => 0.0,
    };
    let nm1 = n.checked_sub(1);
    let qm1 = q.checked_sub(1);
    let uu = um * up * t(nm1, qm1);
    let ww = wm * wp * t(Some(n), Some(q));
    let uw = um * wp * t(nm1, Some(q));
    let wu = wm * up * t(Some(n), qm1);
    let i = C64::i();
    [uu + ww, uw + wu, -i * uw + i * wu, uu - ww]
}

/// Linear map from `v_hat(xi_{m,p}(E))` to one Born sample: `coef[k][i]`.
#[derive(Clone, Debug)]
pub struct BornRow {
    pub m: ModeIndex,
    pub p: ModeIndex,
    pub energy: f64,
    pub xi: f64,
    pub coef: Vec<[C64; 4]>,
}

impl BornRow {
    pub fn new(m: ModeIndex, p: ModeIndex, energy: f64, tri: &TripleOverlap, n_k: usize) -> Result<BornRow> {
        let mm = Mode::new(m, energy)?;
        let mp = Mode::new(p, energy)?;
        if !mm.propagating || !mp.propagating {
            return Err(Error::Invalid(format!("{m} or {p} is evanescent at E = {energy}")));
        }
        let pref = C64::i() * energy / lambda(p.level, energy).re;
        let coef = (0..=n_k)
            .map(|k| spin_integrals(&mm, &mp, tri, k).map(|c| c * pref))
            .collect();
        Ok(BornRow {
            m,
            p,
            energy,
            xi: xi_pair(m, p, energy),
            coef,
        })
    }

    pub fn apply(&self, vh: &[[C64; 4]]) -> C64 {
        self.coef
            .iter()
            .zip(vh)
            .map(|(c, v)| (0..4).map(|i| c[i] * v[i]).sum::<C64>())
            .sum()
    }
}

/// One requested Born sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleKey {
    pub m: ModeIndex,
    pub p: ModeIndex,
    pub energy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub n: usize,
    pub eps_m: i8,
    pub q: usize,
    pub eps_p: i8,
    pub energy: f64,
    pub re: f64,
    pub im: f64,
}

impl Sample {
    pub fn key(&self) -> SampleKey {
        SampleKey {
            m: ModeIndex::new(self.n, self.eps_m),
            p: ModeIndex::new(self.q, self.eps_p),
            energy: self.energy,
        }
    }

    pub fn value(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

/// Born samples keyed by `(m, p, E)`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LinearizedDataSet {
    pub samples: Vec<Sample>,
    #[serde(skip)]
    lookup: HashMap<(ModeIndex, ModeIndex), Vec<usize>>,
}

impl LinearizedDataSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: SampleKey, value: C64) {
        let idx = self.samples.len();
        self.samples.push(Sample {
            n: key.m.level,
            eps_m: key.m.eps,
            q: key.p.level,
            eps_p: key.p.eps,
            energy: key.energy,
            re: value.re,
            im: value.im,
        });
        self.lookup.entry((key.m, key.p)).or_default().push(idx);
    }

    fn reindex(&mut self) {
        self.lookup.clear();
        for (i, s) in self.samples.iter().enumerate() {
            let k = s.key();
            self.lookup.entry((k.m, k.p)).or_default().push(i);
        }
    }

    pub fn get(&self, key: &SampleKey) -> Option<C64> {
        let tol = 1e-10 * key.energy.abs().max(1.0);
        self.lookup
            .get(&(key.m, key.p))?
            .iter()
            .map(|&i| &self.samples[i])
            .find(|s| (s.energy - key.energy).abs() <= tol)
            .map(Sample::value)
    }

    /// Look up every key, reporting all missing ones at once.
    pub fn get_all(&self, keys: &[SampleKey]) -> Result<Vec<C64>> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(keys.len());
        for k in keys {
            match self.get(k) {
                Some(v) => out.push(v),
                None => {
                    missing.push(format!("({}, {}, E={:.12})", k.m, k.p, k.energy));
                    out.push(C64::new(0.0, 0.0));
                }
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingSamples(missing.join(", ")))
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut d: LinearizedDataSet = serde_json::from_str(s)?;
        d.reindex();
        Ok(d)
    }

    /// Entrywise map, used for noise and differences.
    pub fn map(&self, f: impl Fn(&SampleKey, C64) -> C64) -> Self {
        let mut out = LinearizedDataSet::new();
        for s in &self.samples {
            let k = s.key();
            out.insert(k, f(&k, s.value()));
        }
        out
    }
}

fn overlaps_for(pot: &PotentialRep, max_level: usize) -> TripleOverlap {
    triple_overlap_with(max_level, pot.n_y, pot.profile)
}

/// Born samples of `pot` at the requested `(m, p, E)`.
pub fn born_forward(pot: &PotentialRep, keys: &[SampleKey]) -> Result<LinearizedDataSet> {
    let max_level = keys.iter().map(|k| k.m.level.max(k.p.level)).max().unwrap_or(0);
    let tri = overlaps_for(pot, max_level);
    let mut out = LinearizedDataSet::new();
    for k in keys {
        let row = BornRow::new(k.m, k.p, k.energy, &tri, pot.n_y)?;
        let vh = v_hat(pot, row.xi);
        out.insert(*k, row.apply(&vh));
    }
    Ok(out)
}

/// Born samples from channel transforms given directly at each sample's frequency.
pub fn born_from_transform(
    vh: impl Fn(f64) -> Vec<[C64; 4]>,
    n_k: usize,
    profile: YProfile,
    keys: &[SampleKey],
) -> Result<LinearizedDataSet> {
    let max_level = keys.iter().map(|k| k.m.level.max(k.p.level)).max().unwrap_or(0);
    let tri = triple_overlap_with(max_level, n_k, profile);
    let mut out = LinearizedDataSet::new();
    for k in keys {
        let row = BornRow::new(k.m, k.p, k.energy, &tri, n_k)?;
        out.insert(*k, row.apply(&vh(row.xi)));
    }
    Ok(out)
}

/// `S~ = i Lambda_q(E) S^lin` for one sample.
fn tilde(data: &LinearizedDataSet, m: ModeIndex, p: ModeIndex, energy: f64) -> Result<C64> {
    let key = SampleKey { m, p, energy };
    let v = data.get_all(&[key])?[0];
    Ok(C64::i() * lambda(p.level, energy).re * v)
}

fn check_positive_xi(xi: f64) -> Result<()> {
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(Error::ExcludedFrequency {
            xi,
            excluded: "xi <= 0 (use conjugate symmetry)".into(),
        });
    }
    Ok(())
}

fn check_branch_points(xi: f64, n: usize) -> Result<()> {
    check_positive_xi(xi)?;
    for k in 1..=n + 2 {
        if (xi - (2.0 * k as f64).sqrt()).abs() < EXCLUDED_TOL {
            return Err(Error::ExcludedFrequency {
                xi,
                excluded: "{sqrt(2k), k >= 1}".into(),
            });
        }
    }
    Ok(())
}

/// Samples needed by [`reduce_scalar`] at `xi` for levels `0..=n`.
pub fn scalar_keys(xi: f64, n: usize) -> Result<Vec<SampleKey>> {
    check_branch_points(xi, n)?;
    let mut keys = Vec::with_capacity(n + 1);
    let d = resolve_dispersion(1, 1, xi)?;
    keys.push(SampleKey {
        m: d.m(),
        p: d.p(),
        energy: d.energy,
    });
    for s in 1..=n {
        let d = resolve_dispersion(s, 0, xi)?;
        keys.push(SampleKey {
            m: d.m(),
            p: d.p(),
            energy: d.energy,
        });
    }
    Ok(keys)
}

/// Reduced scalar data `S~_s(xi)`, `s = 0..=n`.
pub fn reduce_scalar(xi: f64, n: usize, data: &LinearizedDataSet) -> Result<Vec<C64>> {
    let keys = scalar_keys(xi, n)?;
    let vals = data.get_all(&keys)?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(vals[0] * (0.5 * 2f64.sqrt() * xi));
    for s in 1..=n {
        let f = (1.0 + xi * xi / (2.0 * s as f64)).sqrt();
        out.push(vals[s] * f);
    }
    Ok(out)
}

/// `v0 = T0 / 2 - sqrt(2) T2 / 2` in the rescaled-Hermite basis.
pub fn v0_from_rows(t0: C64, t2: C64) -> C64 {
    t0 * 0.5 - t2 * (0.5 * 2f64.sqrt())
}

/// Invert the reduced scalar data at one frequency.
///
/// Rows are `T_s = -i S~_s = sum_k <0,s;k> v_k` for `s >= 1` and
/// `T_0 = sum_k (<0,0;k> + <1,1;k>) v_k`.
pub fn invert_scalar(xi: f64, s_tilde: &[C64]) -> Result<Vec<C64>> {
    check_branch_points(xi, s_tilde.len().saturating_sub(1))?;
    let n = s_tilde.len().saturating_sub(1);
    if s_tilde.is_empty() {
        return Ok(Vec::new());
    }
    let tri = triple_overlap_with(n.max(2), n, YProfile::Scaled);
    invert_scalar_with(&tri, s_tilde)
}

/// Scalar inversion with an explicit overlap table.
pub fn invert_scalar_with(tri: &TripleOverlap, s_tilde: &[C64]) -> Result<Vec<C64>> {
    let n = s_tilde.len().saturating_sub(1);
    let t: Vec<C64> = s_tilde.iter().map(|s| C64::new(0.0, -1.0) * s).collect();
    if tri.profile != YProfile::Scaled {
        let a = Array2::from_shape_fn((n + 1, n + 1), |(s, k)| {
            let v = if s == 0 {
                tri.get(0, 0, k) + tri.get(1, 1, k)
            } else {
                tri.get(0, s, k)
            };
            C64::new(v, 0.0)
        });
        return Ok(solve_small(a, &Array1::from(t).view())?.to_vec());
    }
    let mut v = vec![C64::new(0.0, 0.0); n + 1];
    v[0] = if n >= 2 {
        v0_from_rows(t[0], t[2])
    } else {
        t[0] / (tri.get(0, 0, 0) + tri.get(1, 1, 0))
    };
    for s in 1..=n {
        let mut r = t[s];
        for k in 0..s {
            r -= v[k] * tri.get(0, s, k);
        }
        v[s] = r / tri.get(0, s, s);
    }
    Ok(v)
}

/// Highest level `s` of the `(s,1)` pairs used by [`invert_full`].
fn full_top(n: usize) -> usize {
    (n + 1).max(3)
}

fn pm_keys(d: &DispersionPair) -> [SampleKey; 2] {
    [
        SampleKey {
            m: d.m(),
            p: d.p(),
            energy: d.energy,
        },
        SampleKey {
            m: d.m(),
            p: d.p(),
            energy: -d.energy,
        },
    ]
}

/// Samples needed by [`invert_full`] at `xi` for transverse order `n`.
pub fn full_keys(xi: f64, n: usize) -> Result<Vec<SampleKey>> {
    check_branch_points(xi, full_top(n))?;
    let mut keys = Vec::new();
    keys.extend(pm_keys(&resolve_dispersion(1, 1, xi)?));
    for s in 1..=n + 1 {
        keys.extend(pm_keys(&resolve_dispersion(s, 0, xi)?));
    }
    for s in 2..=full_top(n) {
        keys.extend(pm_keys(&resolve_dispersion(s, 1, xi)?));
        keys.extend(pm_keys(&resolve_dispersion(1, s, xi)?));
    }
    Ok(keys)
}

/// Reduced non-scalar data; entry `s` of each vector is level `s`
/// (unused leading entries are zero).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FullReduced {
    pub xi: f64,
    pub s0: Vec<C64>,
    pub s1: Vec<C64>,
    pub s2: Vec<C64>,
    pub s3: Vec<C64>,
    pub s4: Vec<C64>,
    pub s5: Vec<C64>,
}

/// Channel transforms recovered at one frequency, with the reduced data used.
#[derive(Clone, Debug)]
pub struct FullInversion {
    pub v: Vec<[C64; 4]>,
    pub reduced: FullReduced,
}

fn big_xi(m: ModeIndex, energy: f64) -> f64 {
    energy + m.eps as f64 * lambda(m.level, energy).re
}

fn big_xi_pair(m: ModeIndex, p: ModeIndex, energy: f64) -> f64 {
    (big_xi(m, energy) * big_xi(p, energy)).sqrt()
}

/// `S^0_s, S^1_s` from the `(s,0)` samples at `+-E_{s,0}`.
fn reduce_level_zero(xi: f64, s: usize, data: &LinearizedDataSet) -> Result<(C64, C64)> {
    let d = resolve_dispersion(s, 0, xi)?;
    let e = d.energy;
    let (m, p) = (d.m(), d.p());
    let a = tilde(data, m, p, e)?;
    let b = tilde(data, m, p, -e)?;
    let xp = (big_xi(ModeIndex::plus(s), e) / (2.0 * e)).sqrt();
    let xm = (big_xi(ModeIndex::minus(s), e) / (2.0 * e)).sqrt();
    let f = -1.0 / e;
    Ok(if m.eps < 0 {
        (f * (xp * a + xm * b), f * (xm * a - xp * b))
    } else {
        (f * (xm * a + xp * b), f * (xp * a - xm * b))
    })
}

struct LevelOne {
    s2: C64,
    s3: C64,
    // data parts of S^4, S^5 and the coefficients of the channel-12/21 sums
    s4_data: C64,
    s5_data: C64,
    denom: f64,
}

/// `S^2_s, S^3_s` and the data parts of `S^4_s, S^5_s` from the `(s,1)`, `(1,s)` samples.
fn reduce_level_one(xi: f64, s: usize, data: &LinearizedDataSet) -> Result<LevelOne> {
    let ds = resolve_dispersion(s, 1, xi)?;
    let d1 = resolve_dispersion(1, s, xi)?;
    let e = ds.energy;
    let (ms, ps) = (ds.m(), ds.p());
    let (m1, p1) = (d1.m(), d1.p());
    let a1 = tilde(data, ms, ps, e)?;
    let a2 = tilde(data, ms, ps, -e)?;
    let b1 = tilde(data, m1, p1, e)?;
    let b2 = tilde(data, m1, p1, -e)?;
    let (l1, ls) = (lambda(1, e).re, lambda(s, e).re);
    let xp = |a: ModeIndex, b: ModeIndex| big_xi_pair(a, b, e);
    let (sp, sm) = (ModeIndex::plus(s), ModeIndex::minus(s));
    let (op, om) = (ModeIndex::plus(1), ModeIndex::minus(1));
    if ms.eps < 0 {
        // (s-,1-) and (1+,s+)
        let den23 = 2.0 * e * (l1 - ls);
        let den45 = l1 + ls;
        Ok(LevelOne {
            s2: (-xp(sm, op) * (a1 + b2) + xp(sp, om) * (b1 + a2)) / den23,
            s3: (xp(sp, om) * (a1 + b2) - xp(sm, op) * (b1 + a2)) / den23,
            s4_data: (xp(sm, om) * a1 + xp(sp, op) * a2) / (e * den45),
            s5_data: -(xp(sp, op) * a1 + xp(sm, om) * a2) / (e * den45),
            denom: den45,
        })
    } else {
        // (s+,1-) and (1+,s-)
        let den23 = 2.0 * e * (l1 + ls);
        let den45 = l1 - ls;
        Ok(LevelOne {
            s2: (-xp(sp, op) * (a1 + b2) + xp(sm, om) * (b1 + a2)) / den23,
            s3: (xp(sm, om) * (a1 + b2) - xp(sp, op) * (b1 + a2)) / den23,
            s4_data: (xp(sp, om) * a1 + xp(sm, op) * a2) / (e * den45),
            s5_data: -(xp(sm, op) * a1 + xp(sp, om) * a2) / (e * den45),
            denom: den45,
        })
    }
}

/// `v_{0,1} = S^2_2 - sqrt(2) S^3_2`.
pub fn v01_closed(s2_2: C64, s3_2: C64) -> C64 {
    s2_2 - s3_2 * 2f64.sqrt()
}

/// `v_{1,1} = S^2_3 - sqrt(3) S^3_3`.
pub fn v11_closed(s2_3: C64, s3_3: C64) -> C64 {
    s2_3 - s3_3 * 3f64.sqrt()
}

fn dot_row(tri: &TripleOverlap, i: usize, j: usize, v: &[C64]) -> C64 {
    v.iter().enumerate().map(|(k, x)| x * tri.get(i, j, k)).sum()
}

fn square_solve(rows: Vec<Vec<f64>>, rhs: Vec<C64>) -> Result<Vec<C64>> {
    let n = rhs.len();
    let a = Array2::from_shape_fn((n, n), |(r, c)| C64::new(rows[r][c], 0.0));
    Ok(solve_small(a, &Array1::from(rhs).view())?.to_vec())
}

/// Recover all four Pauli channels of `v_hat(xi)` for transverse order `n`
/// from samples at `+-E`.
pub fn invert_full(xi: f64, n: usize, profile: YProfile, data: &LinearizedDataSet) -> Result<FullInversion> {
    let keys = full_keys(xi, n)?;
    data.get_all(&keys)?;
    let top = full_top(n);
    let tri = triple_overlap_with(top + 1, n, profile);
    let zero = C64::new(0.0, 0.0);
    let mut red = FullReduced {
        xi,
        s0: vec![zero; n + 2],
        s1: vec![zero; n + 2],
        s2: vec![zero; top + 1],
        s3: vec![zero; top + 1],
        s4: vec![zero; top + 1],
        s5: vec![zero; top + 1],
    };
    for s in 1..=n + 1 {
        let (a, b) = reduce_level_zero(xi, s, data)?;
        red.s0[s] = a;
        red.s1[s] = b;
    }
    let mut ones = Vec::new();
    for s in 2..=top {
        let l = reduce_level_one(xi, s, data)?;
        red.s2[s] = l.s2;
        red.s3[s] = l.s3;
        ones.push(l);
    }

    // channel 12 = v1 - i v2
    let rows: Vec<Vec<f64>> = (1..=n + 1)
        .map(|s| (0..=n).map(|k| tri.get(s - 1, 0, k)).collect())
        .collect();
    let v12 = square_solve(rows, red.s1[1..=n + 1].to_vec())?;

    // channel 1
    let v1: Vec<C64> = if profile == YProfile::Scaled {
        let mut v = vec![zero; n + 1];
        v[0] = v01_closed(red.s2[2], red.s3[2]);
        if n >= 1 {
            v[1] = v11_closed(red.s2[3], red.s3[3]);
        }
        for s in 2..=n {
            let mut r = red.s3[s];
            for (k, vk) in v.iter().enumerate().take(s) {
                r -= vk * tri.get(s, 0, k);
            }
            v[s] = r / tri.get(s, 0, s);
        }
        v
    } else {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for s in 2..=top {
            a.push((0..=n).map(|k| tri.get(s - 1, 1, k)).collect::<Vec<_>>());
            b.push(red.s2[s]);
            a.push((0..=n).map(|k| tri.get(s, 0, k)).collect());
            b.push(red.s3[s]);
        }
        real_lstsq(&a, &b)?
    };
    let v21: Vec<C64> = v1.iter().zip(&v12).map(|(a, b)| a * 2.0 - b).collect();
    let v2: Vec<C64> = v1.iter().zip(&v12).map(|(a, b)| C64::i() * (b - a)).collect();

    for (idx, l) in ones.iter().enumerate() {
        let s = idx + 2;
        let sf = s as f64;
        let b12 = dot_row(&tri, s - 1, 1, &v12);
        let b21 = dot_row(&tri, s, 0, &v21);
        red.s4[s] = l.s4_data + (b12 * 2f64.sqrt() + b21 * (2.0 * sf).sqrt()) / l.denom;
        red.s5[s] = l.s5_data - (b12 * (2.0 * sf).sqrt() + b21 * 2f64.sqrt()) / l.denom;
    }

    // channels 11 = v0 + v3 and 22 = v0 - v3, unknowns [V11_0..n, V22_0..n]
    let w = n + 1;
    let mut rows: Vec<Vec<C64>> = Vec::new();
    let mut rhs: Vec<C64> = Vec::new();
    let real_row = |f: &dyn Fn(usize) -> f64, off: usize| {
        let mut r = vec![zero; 2 * w];
        for k in 0..w {
            r[off + k] = C64::new(f(k), 0.0);
        }
        r
    };
    for s in 1..=n + 1 {
        rows.push(real_row(&|k| tri.get(s, 0, k), w));
        rhs.push(red.s0[s]);
    }
    for s in 2..=top {
        rows.push(real_row(&|k| tri.get(s - 1, 0, k), 0));
        rhs.push(red.s4[s]);
        rows.push(real_row(&|k| tri.get(s, 1, k), w));
        rhs.push(red.s5[s]);
    }
    let d11 = resolve_dispersion(1, 1, xi)?;
    for key in pm_keys(&d11) {
        let row = BornRow::new(key.m, key.p, key.energy, &tri, n)?;
        let mut r = vec![zero; 2 * w];
        let mut b = data.get_all(&[key])?[0];
        for k in 0..w {
            let c = row.coef[k];
            r[k] = (c[0] + c[3]) * 0.5;
            r[w + k] = (c[0] - c[3]) * 0.5;
            b -= c[1] * v1[k] + c[2] * v2[k];
        }
        rows.push(r);
        rhs.push(b);
    }
    let a = Array2::from_shape_fn((rows.len(), 2 * w), |(i, j)| rows[i][j]);
    let sol = crate::dense::lstsq(&a, &Array1::from(rhs).view())?;

    let v = (0..w)
        .map(|k| {
            let (p, m) = (sol[k], sol[w + k]);
            [(p + m) * 0.5, v1[k], v2[k], (p - m) * 0.5]
        })
        .collect();
    Ok(FullInversion { v, reduced: red })
}

fn real_lstsq(rows: &[Vec<f64>], rhs: &[C64]) -> Result<Vec<C64>> {
    let n = rows.first().map_or(0, Vec::len);
    let a = Array2::from_shape_fn((rows.len(), n), |(i, j)| C64::new(rows[i][j], 0.0));
    Ok(crate::dense::lstsq(&a, &Array1::from(rhs.to_vec()).view())?.to_vec())
}

/// Weighted l1 norms on transform coefficients and reduced data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedNorms {
    pub c1: f64,
    pub c2: f64,
}

impl Default for WeightedNorms {
    fn default() -> Self {
        let se = 0.5f64.exp();
        WeightedNorms { c1: 2.0 - se, c2: se }
    }
}

fn inv_sqrt_factorial(s: usize) -> f64 {
    (1..=s).map(|v| (v as f64).sqrt()).product::<f64>().recip()
}

impl WeightedNorms {
    /// `sum |a_s| / sqrt(s!)` over `s >= from`.
    pub fn v_norm_from(a: &[C64], from: usize) -> f64 {
        a.iter().enumerate().skip(from).map(|(s, x)| x.norm() * inv_sqrt_factorial(s)).sum()
    }

    /// `sum 2^{s/2} |a_s| / sqrt(s!)` over `s >= from`.
    pub fn s_norm_from(a: &[C64], from: usize) -> f64 {
        a.iter()
            .enumerate()
            .skip(from)
            .map(|(s, x)| x.norm() * 2f64.powf(0.5 * s as f64) * inv_sqrt_factorial(s))
            .sum()
    }

    pub fn v_norm(a: &[C64]) -> f64 {
        Self::v_norm_from(a, 0)
    }

    pub fn s_norm(a: &[C64]) -> f64 {
        Self::s_norm_from(a, 0)
    }
}

/// Both sides of the two-sided estimate for one frequency.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub v_norm: f64,
    pub s_norm: f64,
    /// `s_norm - c1 v_norm`
    pub lower_slack: f64,
    /// `c2 v_norm - s_norm`
    pub upper_slack: f64,
    /// Same slacks with the `s = 0` terms dropped from both norms.
    pub lower_slack_tail: f64,
    pub upper_slack_tail: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.lower_slack >= 0.0 && self.upper_slack >= 0.0
    }

    pub fn tail_holds(&self) -> bool {
        self.lower_slack_tail >= 0.0 && self.upper_slack_tail >= 0.0
    }
}

pub fn norm_bounds_check(v_hat: &[C64], s_tilde: &[C64]) -> BoundReport {
    let w = WeightedNorms::default();
    let vn = WeightedNorms::v_norm(v_hat);
    let sn = WeightedNorms::s_norm(s_tilde);
    let vt = WeightedNorms::v_norm_from(v_hat, 1);
    let st = WeightedNorms::s_norm_from(s_tilde, 1);
    BoundReport {
        v_norm: vn,
        s_norm: sn,
        lower_slack: sn - w.c1 * vn,
        upper_slack: w.c2 * vn - sn,
        lower_slack_tail: st - w.c1 * vt,
        upper_slack_tail: w.c2 * vt - st,
    }
}

/// Off-diagonal weighted mass of a system `T_s = sum_k beta[s][k] v_k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LemmaReport {
    /// `B_s = sum_{k != s} |alpha_k beta[k][s] / (alpha_s beta[k][k])|`
    pub b: Vec<f64>,
    pub applicable: bool,
    pub lower: f64,
    pub middle: f64,
    pub upper: f64,
}

/// Evaluate the diagonal-dominance estimate for given weights and coefficients.
///
/// When some `B_s >= 1` the estimate does not apply; this is reported, not asserted.
pub fn lemma_bound(beta: &Array2<f64>, alpha: &[f64], v: &[C64]) -> Result<LemmaReport> {
    let n = alpha.len();
    if beta.dim() != (n, n) || v.len() != n {
        return Err(Error::Mismatch("beta, alpha and v sizes differ".into()));
    }
    if (0..n).any(|s| beta[[s, s]] == 0.0) {
        return Err(Error::Invalid("zero diagonal coefficient".into()));
    }
    let b: Vec<f64> = (0..n)
        .map(|s| {
            (0..n)
                .filter(|&k| k != s)
                .map(|k| (alpha[k] * beta[[k, s]] / (alpha[s] * beta[[k, k]])).abs())
                .sum()
        })
        .collect();
    let t: Vec<C64> = (0..n)
        .map(|s| (0..n).map(|k| v[k] * beta[[s, k]]).sum())
        .collect();
    let middle = (0..n).map(|s| (t[s] * (alpha[s] / beta[[s, s]])).norm()).sum();
    let lower = (0..n).map(|s| (1.0 - b[s]) * alpha[s] * v[s].norm()).sum();
    let upper = (0..n).map(|s| (1.0 + b[s]) * alpha[s] * v[s].norm()).sum();
    Ok(LemmaReport {
        applicable: b.iter().all(|&x| x < 1.0),
        b,
        lower,
        middle,
        upper,
    })
}

/// `sum_{l>=1} 2^{-l} / l!` truncated at `l <= lmax`; tends to `sqrt(e) - 1`.
pub fn hermite_offdiag_mass(lmax: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for l in 1..=lmax {
        term *= 0.5 / l as f64;
        sum += term;
    }
    sum
}

/// Energy-side and frequency-side integrals of the scalar stability estimate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StabilityIntegral {
    /// `sum_s ∫ |v_s(xi)| / sqrt(s!) dxi` over `0 < xi <= xi_max`
    pub left: f64,
    /// `∫ ||S~(xi)||_S dxi` restricted to `E <= e_max`, on a frequency grid
    pub middle_xi: f64,
    /// The same integral after the change of variables to energy
    pub middle_energy: f64,
    pub xi_max: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

fn trapezoid(f: &[f64], dx: f64) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    dx * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1]))
}

/// Trapezoidal evaluation of the integrated scalar estimate for a potential
/// with channel transforms `vh(xi)[k]`, levels `0..=n`, energies up to `e_max`.
///
/// Both sides are truncated, so the sandwich is only indicative.
pub fn discrete_stability_integral(
    vh: impl Fn(f64) -> Vec<C64> + Sync,
    n: usize,
    e_max: f64,
    points: usize,
) -> Result<StabilityIntegral> {
    if e_max * e_max <= 2.0 * (n.max(1)) as f64 || points < 3 {
        return Err(Error::Invalid("energy range does not open every level".into()));
    }
    let full = |xi: f64| -> Vec<[C64; 4]> {
        vh(xi)
            .into_iter()
            .map(|v| [v, C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)])
            .collect()
    };
    let tri = triple_overlap_with(n.max(1), n, YProfile::Scaled);
    let sample = |m: ModeIndex, p: ModeIndex, e: f64| -> Result<C64> {
        let row = BornRow::new(m, p, e, &tri, n)?;
        Ok(row.apply(&full(row.xi)))
    };
    let weight = |s: usize| 2f64.powf(0.5 * s as f64) * inv_sqrt_factorial(s);
    let xi_max = 2.0 * lambda(1, e_max).re;

    // left side
    let dxi = xi_max / (points - 1) as f64;
    let mut left_vals = Vec::with_capacity(points);
    for i in 0..points {
        let xi = (i as f64 * dxi).max(1e-12);
        let v = vh(xi);
        left_vals.push(v.iter().enumerate().map(|(s, x)| x.norm() * inv_sqrt_factorial(s)).sum());
    }
    let left = trapezoid(&left_vals, dxi);

    // frequency side of the middle term, one grid per level
    let mut middle_xi = 0.0;
    for s in 0..=n {
        let (lo, hi) = if s == 0 {
            (0.0, xi_max)
        } else {
            let l = lambda(s, e_max).re;
            (e_max - l, e_max + l)
        };
        let h = (hi - lo) / (points - 1) as f64;
        let mut vals = Vec::with_capacity(points);
        for i in 0..points {
            let mut xi = lo + i as f64 * h;
            if (xi - (2.0 * s as f64).sqrt()).abs() < 1e-6 || xi < 1e-4 {
                xi += 1e-4;
            }
            let (d, f) = if s == 0 {
                (resolve_dispersion(1, 1, xi)?, 0.5 * 2f64.sqrt() * xi)
            } else {
                (resolve_dispersion(s, 0, xi)?, (1.0 + xi * xi / (2.0 * s as f64)).sqrt())
            };
            let v = if d.energy > e_max * (1.0 + 1e-12) {
                0.0
            } else {
                (sample(d.m(), d.p(), d.energy)? * f).norm()
            };
            vals.push(weight(s) * v);
        }
        middle_xi += trapezoid(&vals, h);
    }

    // energy side, E = sqrt(2 s') cosh(u) removes the threshold singularity
    let mut middle_energy = 0.0;
    for s in 0..=n {
        let thr = if s == 0 { 2f64.sqrt() } else { (2.0 * s as f64).sqrt() };
        let umax = (e_max / thr).acosh();
        let h = umax / (points - 1) as f64;
        let mut vals = Vec::with_capacity(points);
        for i in 0..points {
            let u = (i as f64 * h).max(1e-4);
            let e = thr * u.cosh();
            let dedu = thr * u.sinh();
            let val = if s == 0 {
                let sm = sample(ModeIndex::plus(1), ModeIndex::minus(1), e)?;
                // dxi = 2E/Lambda_1 dE and |S~_0| = (sqrt2/2) xi |S|
                let l1 = lambda(1, e).re;
                0.5 * 2f64.sqrt() * 2.0 * l1 * sm.norm() * 2.0 * e / l1 * dedu
            } else {
                let l = lambda(s, e).re;
                let sf = s as f64;
                let mut acc = 0.0;
                for eps in [-1i8, 1] {
                    let m = ModeIndex::new(s, eps);
                    let bx = e + eps as f64 * l;
                    let sm = sample(m, ModeIndex::minus(0), e)?;
                    acc += (e * bx / sf).sqrt() * sm.norm() * bx / l;
                }
                weight(s) * acc * dedu
            };
            vals.push(val);
        }
        middle_energy += trapezoid(&vals, h);
    }
    let w = WeightedNorms::default();
    Ok(StabilityIntegral {
        left,
        middle_xi,
        middle_energy,
        xi_max,
        lower_ok: middle_xi >= w.c1 * left,
        upper_ok: middle_xi <= w.c2 * left,
    })
}

/// `dxi/dE_0 = 2 E_0 / Lambda_1(E_0)` on the `(1+,1-)` branch `xi = 2 Lambda_1(E_0)`.
pub fn jacobian_level_zero(e0: f64) -> f64 {
    2.0 * e0 / lambda(1, e0).re
}

/// Finite-dimensional scalar potentials on the real Fourier basis, observed
/// through the reduced data at the basis frequencies `2 pi j / width`.
#[derive(Clone, Debug)]
pub struct FourierScalarModel {
    pub x_left: f64,
    pub x_right: f64,
    /// Highest harmonic.
    pub r: usize,
    /// Highest transverse index.
    pub n: usize,
    pub disc: crate::greens_slab::Discretization,
}

impl FourierScalarModel {
    pub fn new(x_left: f64, x_right: f64, r: usize, n: usize, solver_levels: usize) -> Result<Self> {
        let m = FourierScalarModel {
            x_left,
            x_right,
            r,
            n,
            disc: crate::greens_slab::Discretization::new(solver_levels.max(n + 1)),
        };
        for xi in m.frequencies() {
            check_branch_points(xi, n)?;
        }
        Ok(m)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let w = 2.0 * std::f64::consts::PI / (self.x_right - self.x_left);
        (1..=self.r).map(|j| j as f64 * w).collect()
    }

    /// Unknowns: for each `k`, the cosine and sine weights of harmonics `1..=r`.
    pub fn dim(&self) -> usize {
        2 * self.r * (self.n + 1)
    }

    pub fn potential(&self, c: &[f64]) -> Result<PotentialRep> {
        if c.len() != self.dim() {
            return Err(Error::Mismatch(format!("{} coefficients, expected {}", c.len(), self.dim())));
        }
        let mut p = PotentialRep::fourier_zeros(self.x_left, self.x_right, self.r, self.n, YProfile::Scaled)?;
        for k in 0..=self.n {
            for l in 1..=2 * self.r {
                p.set(l, k, 0, c[k * 2 * self.r + l - 1]);
            }
        }
        Ok(p)
    }

    /// Reduced data `S~_k(xi_j)` from the full scattering solve.
    pub fn nonlinear_data(&self, c: &[f64]) -> Result<Vec<Vec<C64>>> {
        use rayon::prelude::*;
        let pot = self.potential(c)?;
        self.frequencies()
            .par_iter()
            .map(|&xi| {
                let keys = scalar_keys(xi, self.n)?;
                let mut data = LinearizedDataSet::new();
                for key in keys {
                    let t = crate::greens_slab::slab_tr(&pot, key.energy, self.disc)?;
                    let v = crate::tr_merge::born_normalized(&t, key.m, key.p)
                        .ok_or_else(|| Error::Invalid(format!("{} not resolved", key.m)))?;
                    data.insert(key, v);
                }
                reduce_scalar(xi, self.n, &data)
            })
            .collect()
    }

    /// Reduced data of the Born map.
    pub fn linear_data(&self, c: &[f64]) -> Result<Vec<Vec<C64>>> {
        let pot = self.potential(c)?;
        self.frequencies()
            .iter()
            .map(|&xi| {
                let keys = scalar_keys(xi, self.n)?;
                reduce_scalar(xi, self.n, &born_forward(&pot, &keys)?)
            })
            .collect()
    }

    /// Inverse of the Born map, frequency by frequency.
    pub fn linear_inverse(&self, data: &[Vec<C64>]) -> Result<Vec<f64>> {
        let h = self.x_right - self.x_left;
        let mut c = vec![0.0; self.dim()];
        for (j, (xi, st)) in self.frequencies().into_iter().zip(data).enumerate() {
            let v = invert_scalar(xi, st)?;
            let shift = C64::from_polar(2.0 / h, xi * self.x_left);
            for (k, vk) in v.iter().enumerate().take(self.n + 1) {
                let z = vk * shift;
                c[k * 2 * self.r + 2 * j] = z.re;
                c[k * 2 * self.r + 2 * j + 1] = -z.im;
            }
        }
        Ok(c)
    }

    /// `c <- c - L_lin^{-1}(L(c) - data)` from `c = 0`; returns the iterates.
    pub fn fixed_point(&self, data: &[Vec<C64>], iters: usize, tol: f64) -> Result<Vec<Vec<f64>>> {
        let mut c = vec![0.0; self.dim()];
        let mut hist = Vec::new();
        for _ in 0..iters {
            let cur = self.nonlinear_data(&c)?;
            let diff: Vec<Vec<C64>> = cur
                .iter()
                .zip(data)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect();
            let step = self.linear_inverse(&diff)?;
            let mut change: f64 = 0.0;
            for (ci, si) in c.iter_mut().zip(&step) {
                *ci -= si;
                change = change.max(si.abs());
            }
            hist.push(c.clone());
            if change < tol {
                break;
            }
        }
        Ok(hist)
    }
}
