//! TR matrices, merging of adjacent slabs, intersection matrices and the
//! binary cascade with interior field recovery.
//!
//! A TR matrix maps incoming data `(alpha_-(b), alpha_+(a))` to outgoing
//! data `(alpha_-(a), alpha_+(b))`. Rows and columns follow
//! [`mode_list`]: minus modes first, then plus modes, so the four blocks
//! are `[[T11, T12], [T21, T22]]` with minus/plus splits.

use crate::dense::{identity, Lu, COND_LIMIT};
use crate::greens_slab::{Density, Discretization, PotentialRep, SlabOperator};
use crate::spectral_basis::{lambda, mode_list, ModeIndex};
use crate::{Error, Result, C64};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct TRMatrix {
    pub energy: f64,
    pub a: f64,
    pub b: f64,
    pub n_y: usize,
    pub data: Array2<C64>,
}

impl TRMatrix {
    pub fn new(energy: f64, a: f64, b: f64, n_y: usize, data: Array2<C64>) -> Self {
        TRMatrix {
            energy,
            a,
            b,
            n_y,
            data,
        }
    }

    pub fn modes(&self) -> Vec<ModeIndex> {
        mode_list(self.n_y)
    }

    pub fn dim(&self) -> usize {
        2 * self.n_y + 1
    }

    /// Number of minus modes (the first block size).
    pub fn n_minus(&self) -> usize {
        self.n_y + 1
    }

    /// Free propagation across `[a, b]`.
    pub fn free(energy: f64, a: f64, b: f64, n_y: usize) -> Result<Self> {
        crate::spectral_basis::check_band_edge(energy, n_y)?;
        let list = mode_list(n_y);
        let mut data = Array2::zeros((list.len(), list.len()));
        for (i, m) in list.iter().enumerate() {
            data[[i, i]] = (C64::i() * lambda(m.level, energy) * (b - a)).exp();
        }
        Ok(TRMatrix::new(energy, a, b, n_y, data))
    }

    pub fn get(&self, m: ModeIndex, p: ModeIndex) -> Option<C64> {
        let i = crate::spectral_basis::mode_position(self.n_y, m)?;
        let j = crate::spectral_basis::mode_position(self.n_y, p)?;
        Some(self.data[[i, j]])
    }

    fn blocks(&self) -> [Array2<C64>; 4] {
        let k = self.n_minus();
        let d = &self.data;
        [
            d.slice(s![..k, ..k]).to_owned(),
            d.slice(s![..k, k..]).to_owned(),
            d.slice(s![k.., ..k]).to_owned(),
            d.slice(s![k.., k..]).to_owned(),
        ]
    }

    pub fn max_abs_diff(&self, other: &TRMatrix) -> f64 {
        (&self.data - &other.data).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> TrJson {
        TrJson {
            energy: self.energy,
            interval: [self.a, self.b],
            modes: self.modes().iter().map(|m| (m.level, m.eps)).collect(),
            entries: self
                .data
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|z| [z.re, z.im]).collect())
                .collect(),
        }
    }

    pub fn from_json(j: &TrJson) -> Result<Self> {
        let n = j.modes.len();
        if n % 2 == 0 || j.entries.len() != n {
            return Err(Error::Mismatch("TR document shape".into()));
        }
        let n_y = (n - 1) / 2;
        let mut data = Array2::zeros((n, n));
        for (i, row) in j.entries.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Mismatch(format!("TR row {i} has {} entries", row.len())));
            }
            for (k, v) in row.iter().enumerate() {
                data[[i, k]] = C64::new(v[0], v[1]);
            }
        }
        Ok(TRMatrix::new(j.energy, j.interval[0], j.interval[1], n_y, data))
    }
}

/// Serialized TR matrix with `[re, im]` entries, row-major.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrJson {
    pub energy: f64,
    pub interval: [f64; 2],
    pub modes: Vec<(usize, i8)>,
    pub entries: Vec<Vec<[f64; 2]>>,
}

fn check_pair(l: &TRMatrix, r: &TRMatrix) -> Result<()> {
    if l.n_y != r.n_y {
        return Err(Error::Mismatch("TR matrices use different mode lists".into()));
    }
    if (l.energy - r.energy).abs() > 1e-12 * l.energy.abs().max(1.0) {
        return Err(Error::Mismatch("TR matrices at different energies".into()));
    }
    if (l.b - r.a).abs() > 1e-12 * (l.b.abs() + r.a.abs()).max(1.0) {
        return Err(Error::NotAdjacent {
            a0: l.a,
            a1: l.b,
            b0: r.a,
            b1: r.b,
        });
    }
    Ok(())
}

struct Coupling {
    lu: Lu,
}

fn coupling(l21: &Array2<C64>, r12: &Array2<C64>) -> Result<Coupling> {
    let k = r12.nrows();
    let m = identity(k) - r12.dot(l21);
    let lu = Lu::new(m);
    let cond = lu.condition_estimate();
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::ResonantMerge { cond });
    }
    Ok(Coupling { lu })
}

fn stack(tl: &Array2<C64>, tr: &Array2<C64>, bl: &Array2<C64>, br: &Array2<C64>) -> Array2<C64> {
    let top = concatenate(Axis(1), &[tl.view(), tr.view()]).expect("block widths");
    let bot = concatenate(Axis(1), &[bl.view(), br.view()]).expect("block widths");
    concatenate(Axis(0), &[top.view(), bot.view()]).expect("block heights")
}

fn solve_cols(lu: &Lu, b: &ArrayView2<C64>) -> Array2<C64> {
    lu.solve_many(b)
}

/// TR matrix of the union of two adjacent slabs, `l` on the left.
pub fn merge(l: &TRMatrix, r: &TRMatrix) -> Result<TRMatrix> {
    check_pair(l, r)?;
    let [l11, l12, l21, l22] = l.blocks();
    let [r11, r12, r21, r22] = r.blocks();
    let cp = coupling(&l21, &r12)?;
    // X = (I - R12 L21)^{-1}
    let x_r11 = solve_cols(&cp.lu, &r11.view());
    let x_r12l22 = solve_cols(&cp.lu, &r12.dot(&l22).view());
    let t11 = l11.dot(&x_r11);
    let t12 = l11.dot(&x_r12l22) + &l12;
    // (I - L21 R12)^{-1} L21 = L21 (I - R12 L21)^{-1}
    let t21 = r22.dot(&l21.dot(&x_r11)) + &r21;
    let t22 = r22.dot(&(l21.dot(&x_r12l22) + &l22));
    Ok(TRMatrix::new(l.energy, l.a, r.b, l.n_y, stack(&t11, &t12, &t21, &t22)))
}

/// Matrix mapping `(alpha_-(b), alpha_+(a))` of the merged slab to the
/// interior coefficients `(alpha_-(c), alpha_+(c))` at the shared point.
pub fn intersection_matrix(l: &TRMatrix, r: &TRMatrix) -> Result<Array2<C64>> {
    check_pair(l, r)?;
    let [_, _, l21, l22] = l.blocks();
    let [r11, r12, _, _] = r.blocks();
    let cp = coupling(&l21, &r12)?;
    let m11 = solve_cols(&cp.lu, &r11.view());
    let m12 = solve_cols(&cp.lu, &r12.dot(&l22).view());
    let m21 = l21.dot(&m11);
    let m22 = l21.dot(&m12) + &l22;
    Ok(stack(&m11, &m12, &m21, &m22))
}

/// Result of [`cascade`].
#[derive(Clone, Debug)]
pub struct CascadeResult {
    pub tr: TRMatrix,
    pub breakpoints: Vec<f64>,
    pub leaves: Vec<TRMatrix>,
    pub intersections: Vec<Array2<C64>>,
    /// Per leaf: incoming coefficients, solved slab and density.
    pub interior: Option<Vec<LeafField>>,
}

#[derive(Clone, Debug)]
pub struct LeafField {
    pub slab: SlabOperator,
    pub incoming: Vec<C64>,
    pub density: Density,
}

impl LeafField {
    /// Transverse slot coefficients of the field at `x` inside the leaf.
    pub fn slots_at(&self, x: f64) -> Vec<C64> {
        self.slab.field_slots_at(x, &self.density, &self.incoming)
    }
}

/// Split the support into `2^depth` equal leaves and merge left to right.
///
/// `incoming` holds `alpha_-(x_R)` on minus modes and `alpha_+(x_L)` on plus
/// modes, in [`mode_list`] order.
pub fn cascade(
    pot: &PotentialRep,
    energy: f64,
    depth: u32,
    disc: Discretization,
    incoming: Option<&[C64]>,
) -> Result<CascadeResult> {
    let k = 1usize << depth;
    let (xl, xr) = (pot.x_left, pot.x_right);
    let h = (xr - xl) / k as f64;
    let breakpoints: Vec<f64> = (0..=k)
        .map(|i| if i == k { xr } else { xl + h * i as f64 })
        .collect();
    // Same field order on every leaf as on the full interval.
    let disc = Discretization {
        n_y: disc.n_y,
        order: Some(disc.field_order(pot.n_x, energy, xr - xl)),
    };
    let slabs: Vec<SlabOperator> = (0..k)
        .into_par_iter()
        .map(|i| SlabOperator::new(pot, energy, breakpoints[i], breakpoints[i + 1], disc))
        .collect::<Result<_>>()?;
    let leaves: Vec<TRMatrix> = slabs.par_iter().map(|s| s.tr()).collect();
    let mut prefix = leaves[0].clone();
    let mut prefixes = vec![prefix.clone()];
    let mut intersections = Vec::with_capacity(k - 1);
    for leaf in leaves.iter().skip(1) {
        intersections.push(intersection_matrix(&prefix, leaf)?);
        prefix = merge(&prefix, leaf)?;
        prefixes.push(prefix.clone());
    }
    let interior = match incoming {
        None => None,
        Some(inc) => {
            let nm = mode_list(disc.n_y).len();
            if inc.len() != nm {
                return Err(Error::Mismatch(format!(
                    "expected {nm} incoming coefficients, got {}",
                    inc.len()
                )));
            }
            let km = disc.n_y + 1;
            let plus_left: Vec<C64> = inc[km..].to_vec();
            // alpha_-(x_i) and alpha_+(x_i) at every breakpoint.
            let mut minus_at: Vec<Vec<C64>> = vec![Vec::new(); k + 1];
            let mut plus_at: Vec<Vec<C64>> = vec![Vec::new(); k + 1];
            minus_at[k] = inc[..km].to_vec();
            plus_at[0] = plus_left.clone();
            for i in (1..k).rev() {
                let m = &intersections[i - 1];
                let mut rhs = minus_at[i + 1].clone();
                rhs.extend_from_slice(&plus_left);
                let v = m.dot(&Array1::from(rhs));
                minus_at[i] = v.slice(s![..km]).to_vec();
                plus_at[i] = v.slice(s![km..]).to_vec();
            }
            let fields = slabs
                .into_iter()
                .enumerate()
                .map(|(i, slab)| {
                    let mut coef = minus_at[i + 1].clone();
                    coef.extend_from_slice(&plus_at[i]);
                    let density = slab.solve_density(&coef);
                    LeafField {
                        slab,
                        incoming: coef,
                        density,
                    }
                })
                .collect();
            Some(fields)
        }
    };
    Ok(CascadeResult {
        tr: prefix,
        breakpoints,
        leaves,
        intersections,
        interior,
    })
}

fn x_out(m: ModeIndex, a: f64, b: f64) -> f64 {
    if m.eps < 0 {
        a
    } else {
        b
    }
}

fn x_in(p: ModeIndex, a: f64, b: f64) -> f64 {
    if p.eps > 0 {
        a
    } else {
        b
    }
}

/// Flux-normalized scattering matrix on the propagating modes, with free
/// phases removed so that `V = 0` gives the identity.
#[derive(Clone, Debug)]
pub struct SMatrix {
    pub energy: f64,
    pub modes: Vec<ModeIndex>,
    pub data: Array2<C64>,
}

impl SMatrix {
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.data.nrows();
        let p = self.data.t().mapv(|z| z.conj()).dot(&self.data) - identity(n);
        p.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

pub fn extract_smatrix(t: &TRMatrix) -> SMatrix {
    let all = t.modes();
    let e = t.energy;
    let idx: Vec<usize> = (0..all.len())
        .filter(|&i| e * e > 2.0 * all[i].level as f64)
        .collect();
    let modes: Vec<ModeIndex> = idx.iter().map(|&i| all[i]).collect();
    let xi = |m: ModeIndex| lambda(m.level, e).re * m.eps as f64;
    let n = idx.len();
    let mut data = Array2::zeros((n, n));
    for (r, &i) in idx.iter().enumerate() {
        let m = all[i];
        for (col, &j) in idx.iter().enumerate() {
            let p = all[j];
            let scale = (xi(m).abs() / xi(p).abs()).sqrt();
            let phase = C64::from_polar(1.0, -xi(m) * x_out(m, t.a, t.b) + xi(p) * x_in(p, t.a, t.b));
            data[[r, col]] = t.data[[i, j]] * phase * scale;
        }
    }
    SMatrix {
        energy: e,
        modes,
        data,
    }
}

/// Scattered part of `T` rescaled to the normalization of the Born formula:
/// `-(Lambda_n / Lambda_q) exp(-i xi_m x_out) exp(i xi_p x_ref) (T - T_free)`.
pub fn born_normalized(t: &TRMatrix, m: ModeIndex, p: ModeIndex) -> Option<C64> {
    let e = t.energy;
    let i = crate::spectral_basis::mode_position(t.n_y, m)?;
    let j = crate::spectral_basis::mode_position(t.n_y, p)?;
    let mut v = t.data[[i, j]];
    let lm = lambda(m.level, e);
    let lp = lambda(p.level, e);
    if i == j {
        v -= (C64::i() * lm * (t.b - t.a)).exp();
    }
    let xm = lm * m.eps as f64;
    let xp = lp * p.eps as f64;
    let phase = (C64::i() * (-xm * x_out(m, t.a, t.b) + xp * x_in(p, t.a, t.b))).exp();
    Some(-(lm / lp) * phase * v)
}

/// Identity TR matrix of a zero-width slab at `x`.
pub fn zero_width(energy: f64, x: f64, n_y: usize) -> TRMatrix {
    let n = 2 * n_y + 1;
    TRMatrix::new(energy, x, x, n_y, identity(n))
}
