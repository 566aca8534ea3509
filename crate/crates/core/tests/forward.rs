//! Forward solver against an independent transfer-matrix integration of the
//! mode-coupled ODE, plus structural properties.

use diracwave::dense::Lu;
use diracwave::greens_slab::*;
use diracwave::spectral_basis::*;
use diracwave::tr_merge::*;
use diracwave::{Error, C64};
use ndarray::{s, Array2};
use proptest::prelude::*;

fn lcg_potential(n_x: usize, n_y: usize, half: f64, profile: YProfile, seed: u64) -> PotentialRep {
    let mut p = PotentialRep::zeros(-half, half, n_x, n_y, profile).unwrap();
    let mut st = seed;
    for c in p.coeffs.iter_mut() {
        st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *c = ((st >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.0;
    }
    p
}

/// Potential projected on the truncated slot basis at fixed x.
fn coupling(p: &PotentialRep, x: f64, ny: usize) -> Array2<C64> {
    let d = 2 * ny + 1;
    let rule = gauss_hermite_gaussian(60, 1.0);
    let mut m = Array2::zeros((d, d));
    for (&y, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = p.matrix_at(x, y);
        let phi = hermite_functions(ny, y);
        for s in 0..d {
            let (cs, ls) = slot_parts(s);
            for t in 0..d {
                let (ct, lt) = slot_parts(t);
                m[[s, t]] += v[cs][ct] * (w * phi[ls] * phi[lt]);
            }
        }
    }
    m
}

/// d/dx of the slot coefficients: `c' = i sigma3 (E - ladder - V) c`.
fn rhs(p: &PotentialRep, e: f64, ny: usize, x: f64, c: &Array2<C64>) -> Array2<C64> {
    let d = 2 * ny + 1;
    let mut a = -coupling(p, x, ny);
    for s in 0..d {
        a[[s, s]] += C64::new(e, 0.0);
    }
    for n in 1..=ny {
        let k = (2.0 * n as f64).sqrt();
        a[[2 * n - 1, 2 * n]] -= C64::new(k, 0.0);
        a[[2 * n, 2 * n - 1]] -= C64::new(k, 0.0);
    }
    for s in 0..d {
        let sg = if s % 2 == 1 { 1.0 } else { -1.0 };
        for t in 0..d {
            a[[s, t]] *= C64::new(0.0, sg);
        }
    }
    a.dot(c)
}

/// TR matrix by RK4 propagation of the fundamental matrix across the slab.
fn ode_tr(p: &PotentialRep, e: f64, ny: usize, steps: usize) -> Array2<C64> {
    let d = 2 * ny + 1;
    let (a, b) = (p.x_left, p.x_right);
    let h = (b - a) / steps as f64;
    let c = |v: f64| C64::new(v, 0.0);
    let mut phi = Array2::from_diag_elem(d, c(1.0));
    for i in 0..steps {
        let x = a + h * i as f64;
        let k1 = rhs(p, e, ny, x, &phi);
        let k2 = rhs(p, e, ny, x + h / 2.0, &(&phi + &(&k1 * c(h / 2.0))));
        let k3 = rhs(p, e, ny, x + h / 2.0, &(&phi + &(&k2 * c(h / 2.0))));
        let k4 = rhs(p, e, ny, (x + h).min(b), &(&phi + &(&k3 * c(h))));
        phi = &phi + &((&k1 + &(&k2 * c(2.0)) + &(&k3 * c(2.0)) + &k4) * c(h / 6.0));
    }
    let modes = build_modes(e, ny).unwrap();
    let list = mode_list(ny);
    let mut bm = Array2::zeros((d, d));
    for (j, (m, mode)) in list.iter().zip(&modes).enumerate() {
        if m.level == 0 {
            bm[[0, j]] = mode.profile[1];
        } else {
            bm[[2 * m.level - 1, j]] = mode.profile[0];
            bm[[2 * m.level, j]] = mode.profile[1];
        }
    }
    let pm = Lu::new(bm.clone()).solve_many(&phi.dot(&bm).view());
    let k = ny + 1;
    let p11 = pm.slice(s![..k, ..k]).to_owned();
    let p12 = pm.slice(s![..k, k..]).to_owned();
    let p21 = pm.slice(s![k.., ..k]).to_owned();
    let p22 = pm.slice(s![k.., k..]).to_owned();
    let l11 = Lu::new(p11);
    let t11 = l11.solve_many(&Array2::from_diag_elem(k, c(1.0)).view());
    let t12 = -l11.solve_many(&p12.view());
    let t21 = p21.dot(&t11);
    let t22 = &p22 + &p21.dot(&t12);
    let mut t = Array2::zeros((d, d));
    t.slice_mut(s![..k, ..k]).assign(&t11);
    t.slice_mut(s![..k, k..]).assign(&t12);
    t.slice_mut(s![k.., ..k]).assign(&t21);
    t.slice_mut(s![k.., k..]).assign(&t22);
    t
}

fn max_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn agrees_with_ode_transfer_matrix() {
    // The y-constant profile keeps the coupling within the kept levels exact.
    let base = lcg_potential(3, 3, 0.4, YProfile::Constant, 7);
    for (f, e) in [(0.1, 2.3), (1.0, 2.3), (0.5, 0.9), (0.5, 3.1)] {
        let p = base.scaled(f);
        let tr = slab_tr(&p, e, Discretization::new(3)).unwrap();
        let o = ode_tr(&p, e, 3, 2000);
        let d = max_diff(&tr.data, &o);
        assert!(d < 1e-8, "scale {f}, E {e}: {d:e}");
    }
}

#[test]
fn ode_agreement_with_hermite_profile() {
    let p = lcg_potential(2, 2, 0.3, YProfile::Hermite, 11).scaled(0.4);
    let ny = 8;
    let tr = slab_tr(&p, 1.8, Discretization::new(ny)).unwrap();
    let o = ode_tr(&p, 1.8, ny, 1500);
    let d = max_diff(&tr.data, &o);
    assert!(d < 1e-8, "{d:e}");
}

#[test]
fn zero_potential_gives_free_tr() {
    for &e in &[0.5, 1.7, 3.9] {
        let p = PotentialRep::zeros(-0.7, 0.2, 3, 5, YProfile::Hermite).unwrap();
        let t = slab_tr(&p, e, Discretization::new(5)).unwrap();
        let f = TRMatrix::free(e, -0.7, 0.2, 5).unwrap();
        assert!(t.max_abs_diff(&f) < 1e-14);
        // Free propagation over width w is exp(i Lambda w) on the diagonal.
        for (i, m) in t.modes().iter().enumerate() {
            let want = (C64::i() * lambda(m.level, e) * 0.9).exp();
            assert!((f.data[[i, i]] - want).norm() < 1e-14);
        }
    }
}

#[test]
fn band_edge_energy_is_an_error() {
    let p = lcg_potential(1, 1, 0.2, YProfile::Hermite, 3);
    let r = slab_tr(&p, 2.0, Discretization::new(3));
    assert!(matches!(r, Err(Error::BandEdge { level: 2, .. })));
}

#[test]
fn solver_residual_is_small() {
    let p = lcg_potential(3, 3, 0.3, YProfile::Hermite, 5);
    let op = SlabOperator::new(&p, 2.5, -0.3, 0.3, Discretization::new(5)).unwrap();
    assert!(op.condition() < 1e6);
    for d in op.solve_all() {
        assert!(op.ls_residual(&d) < 1e-12);
    }
}

#[test]
fn cascade_matches_direct_and_exposes_interior() {
    let p = lcg_potential(3, 3, 0.5, YProfile::Hermite, 9).scaled(0.6);
    let disc = Discretization::new(4);
    let direct = cascade(&p, 2.1, 0, disc, None).unwrap();
    let inc: Vec<C64> = (0..direct.tr.dim()).map(|i| C64::new(1.0 / (1 + i) as f64, 0.3)).collect();
    for depth in 1..=3 {
        let c = cascade(&p, 2.1, depth, disc, Some(&inc)).unwrap();
        assert!(c.tr.max_abs_diff(&direct.tr) < 1e-9, "depth {depth}");
        assert_eq!(c.leaves.len(), 1 << depth);
        assert_eq!(c.breakpoints.len(), (1 << depth) + 1);
        let leaves = c.interior.as_ref().unwrap();
        // Field is continuous across every interior breakpoint.
        for w in leaves.windows(2) {
            let x = w[0].slab.b;
            let l = w[0].slots_at(x);
            let r = w[1].slots_at(x);
            let d = l.iter().zip(&r).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(d < 1e-8, "jump {d:e} at {x}");
        }
    }
}

#[test]
fn merge_is_associative_and_checks_adjacency() {
    let disc = Discretization::with_order(4, 18);
    let pieces = [(-0.6, -0.2), (-0.2, 0.1), (0.1, 0.6)];
    let trs: Vec<TRMatrix> = pieces
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let mut q = lcg_potential(2, 2, 1.0, YProfile::Hermite, 20 + i as u64).scaled(0.5);
            q.x_left = a;
            q.x_right = b;
            slab_tr(&q, 1.9, disc).unwrap()
        })
        .collect();
    let left = merge(&merge(&trs[0], &trs[1]).unwrap(), &trs[2]).unwrap();
    let right = merge(&trs[0], &merge(&trs[1], &trs[2]).unwrap()).unwrap();
    assert!(left.max_abs_diff(&right) < 1e-12);
    assert!(extract_smatrix(&left).unitarity_defect() < 1e-10);
    assert!(matches!(merge(&trs[0], &trs[2]), Err(Error::NotAdjacent { .. })));

    let f: Vec<TRMatrix> = pieces.iter().map(|&(a, b)| TRMatrix::free(1.9, a, b, 4).unwrap()).collect();
    let whole = merge(&merge(&f[0], &f[1]).unwrap(), &f[2]).unwrap();
    assert!(whole.max_abs_diff(&TRMatrix::free(1.9, -0.6, 0.6, 4).unwrap()) < 1e-12);
}

#[test]
fn tr_json_round_trip() {
    let p = lcg_potential(2, 2, 0.3, YProfile::Hermite, 17);
    let t = slab_tr(&p, 2.7, Discretization::new(3)).unwrap();
    let j = serde_json::to_string(&t.to_json()).unwrap();
    let back = TRMatrix::from_json(&serde_json::from_str(&j).unwrap()).unwrap();
    assert_eq!(back.max_abs_diff(&t), 0.0);
}

#[test]
fn gauge_sigma3_constant_only_shifts_phases() {
    // A constant c sigma_3 on the slab changes E - c on the upper and E + c on the
    // lower component; flux conservation still holds.
    let mut p = PotentialRep::zeros(-0.3, 0.3, 0, 0, YProfile::Constant).unwrap();
    p.set(0, 0, 3, 0.4);
    let t = slab_tr(&p, 2.2, Discretization::new(4)).unwrap();
    assert!(extract_smatrix(&t).unitarity_defect() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn scattering_matrix_is_unitary(seed in 0u64..1000, e in 0.5f64..3.5, amp in 0.0f64..1.5) {
        let ny = 5;
        prop_assume!((0..=ny).all(|n| (e * e - 2.0 * n as f64).abs() > 1e-3));
        let p = lcg_potential(2, 2, 0.3, YProfile::Hermite, seed).scaled(amp);
        let t = slab_tr(&p, e, Discretization::new(ny)).unwrap();
        prop_assert!(extract_smatrix(&t).unitarity_defect() < 1e-9);
    }
}
