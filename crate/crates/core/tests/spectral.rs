use diracwave::spectral_basis::*;
use diracwave::{Error, C64};
use proptest::prelude::*;
use std::f64::consts::PI;

fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * f(a + h * i as f64)
        })
        .sum::<f64>()
        * h
}

#[test]
fn legendre_rule_is_exact_to_degree_2n_minus_1() {
    for n in [1usize, 4, 9, 20] {
        let r = gauss_legendre(n);
        for k in 0..2 * n {
            let exact = if k % 2 == 0 { 2.0 / (k + 1) as f64 } else { 0.0 };
            let got = r.integrate(|t| t.powi(k as i32));
            assert!((got - exact).abs() < 1e-13, "n={n} k={k}: {got} vs {exact}");
        }
    }
}

#[test]
fn hermite_rule_matches_gaussian_moments() {
    // ∫ y^{2k} e^{-y^2} dy = Γ(k + 1/2)
    let r = gauss_hermite(12);
    let mut gamma = PI.sqrt();
    for k in 0..12 {
        let got = r.integrate(|y| y.powi(2 * k as i32));
        assert!((got - gamma).abs() < 1e-11 * gamma, "k={k}");
        gamma *= k as f64 + 0.5;
    }
    let g = gauss_hermite_gaussian(8, 3.0);
    // weights carry e^{gamma y^2}, so the integrand includes the Gaussian
    let got = g.integrate(|y| y * y * (-3.0 * y * y).exp());
    let exact = 0.5 * (PI / 3.0).sqrt() / 3.0;
    assert!((got - exact).abs() < 1e-14);
}

#[test]
fn hermite_functions_match_explicit_forms() {
    for &y in &[-2.3, -0.4, 0.0, 0.7, 3.1] {
        let v = hermite_functions(3, y);
        let g = PI.powf(-0.25) * (-0.5 * y * y).exp();
        assert!((v[0] - g).abs() < 1e-15);
        assert!((v[1] - 2f64.sqrt() * y * g).abs() < 1e-15);
        assert!((v[2] - (2.0 * y * y - 1.0) / 2f64.sqrt() * g).abs() < 1e-14);
        assert!((v[3] - (2.0 * y.powi(3) - 3.0 * y) / 3f64.sqrt() * g).abs() < 1e-14);
    }
}

#[test]
fn hermite_functions_are_orthonormal() {
    let n = 15;
    let mut gram = vec![vec![0.0; n + 1]; n + 1];
    let h = 1e-3;
    let mut y = -14.0;
    while y <= 14.0 {
        let v = hermite_functions(n, y);
        for i in 0..=n {
            for j in 0..=n {
                gram[i][j] += h * v[i] * v[j];
            }
        }
        y += h;
    }
    for i in 0..=n {
        for j in 0..=n {
            let id = if i == j { 1.0 } else { 0.0 };
            assert!((gram[i][j] - id).abs() < 1e-9, "({i},{j}) {}", gram[i][j]);
        }
    }
}

#[test]
fn hermite_derivatives_match_differences() {
    let h = 1e-5;
    for &y in &[-1.7, 0.2, 2.4] {
        let d = hermite_derivatives(8, y);
        let p = hermite_functions(8, y + h);
        let m = hermite_functions(8, y - h);
        for n in 0..=8 {
            assert!((d[n] - (p[n] - m[n]) / (2.0 * h)).abs() < 1e-8);
        }
    }
}

#[test]
fn legendre_orthonormal_on_interval() {
    let (a, b) = (-0.3, 1.1);
    let r = gauss_legendre(12).on_interval(a, b);
    for i in 0..8 {
        for j in 0..8 {
            let got = r.integrate(|x| {
                let v = legendre_orthonormal(7, x, a, b);
                v[i] * v[j]
            });
            let id = if i == j { 1.0 } else { 0.0 };
            assert!((got - id).abs() < 1e-13);
        }
    }
}

#[test]
fn mode_order_and_positions() {
    let l = mode_list(3);
    let want = [
        ModeIndex::minus(0),
        ModeIndex::minus(1),
        ModeIndex::minus(2),
        ModeIndex::minus(3),
        ModeIndex::plus(1),
        ModeIndex::plus(2),
        ModeIndex::plus(3),
    ];
    assert_eq!(l, want);
    for (i, m) in l.iter().enumerate() {
        assert_eq!(mode_position(3, *m), Some(i));
    }
    assert_eq!(mode_position(3, ModeIndex::plus(0)), None);
    assert!(!ModeIndex::plus(0).is_valid());
}

#[test]
fn modes_solve_sector_equations() {
    for &e in &[0.6, 1.9, 3.3, 5.2] {
        for m in build_modes(e, 8).unwrap() {
            assert!(m.residual() < 1e-13, "{} at {e}", m.index);
            let n2: f64 = m.profile.iter().map(|z| z.norm_sqr()).sum();
            assert!((n2 - 1.0).abs() < 1e-13);
            assert_eq!(m.propagating, e * e > 2.0 * m.index.level as f64);
            if m.propagating {
                assert!(m.xi.im.abs() < 1e-15);
            } else {
                assert!(m.xi.re.abs() < 1e-15 && m.lambda().im > 0.0);
            }
        }
    }
}

#[test]
fn band_edge_is_rejected() {
    let e = 6f64.sqrt();
    match build_modes(e, 4) {
        Err(Error::BandEdge { level, .. }) => assert_eq!(level, 3),
        other => panic!("expected band edge, got {other:?}"),
    }
    assert!(build_modes(e, 2).is_ok());
}

#[test]
fn dual_basis_is_biorthogonal() {
    for &e in &[0.9, 2.2, 4.7] {
        let d = DualBasis::new(e, 6).unwrap();
        for n in 1..=6 {
            for a in [-1i8, 1] {
                for b in [-1i8, 1] {
                    let m = ModeIndex::new(n, a);
                    let p = Mode::new(ModeIndex::new(n, b), e).unwrap();
                    let want = if a == b { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                    assert!((d.pair(m, &p) - want).norm() < 1e-12);
                }
            }
        }
        let z = Mode::new(ModeIndex::minus(0), e).unwrap();
        assert!((d.pair(ModeIndex::minus(0), &z) - 1.0).norm() < 1e-15);
    }
}

#[test]
fn triple_overlap_against_brute_force() {
    for profile in [YProfile::Hermite, YProfile::Scaled] {
        let t = triple_overlap_with(5, 6, profile);
        for (i, j, k) in [(0, 0, 0), (1, 3, 2), (2, 5, 3), (4, 4, 6), (0, 5, 5), (1, 2, 4)] {
            let f = |y: f64| {
                let p = hermite_functions(5, y);
                p[i] * p[j] * profile.eval(6, y)[k]
            };
            let want = trapezoid(f, -12.0, 12.0, 24000);
            assert!((t.get(i, j, k) - want).abs() < 1e-10, "{profile:?} ({i},{j};{k})");
        }
    }
}

#[test]
fn closed_overlaps_agree_with_table() {
    let t = triple_overlap(12);
    for s in 0..=12 {
        for k in 0..=12 {
            assert!((t.get(0, s, k) - overlap_zero_closed(s, k)).abs() < 1e-12, "<0,{s};{k}>");
            if s >= 1 {
                assert!((t.get(s - 1, 1, k) - overlap_one_closed(s, k)).abs() < 1e-12, "<{},1;{k}>", s - 1);
            }
        }
    }
}

#[test]
fn ladder_operators_shift_levels() {
    let b = HermiteBasis::new(6);
    for n in 1..6 {
        let low = b.lowering(n);
        let up = b.raising(n);
        for q in 0..b.rule.len() {
            assert!((low[q] - (2.0 * n as f64).sqrt() * b.values[n - 1][q]).abs() < 1e-12);
            assert!((up[q] - (2.0 * (n + 1) as f64).sqrt() * b.values[n + 1][q]).abs() < 1e-12);
        }
    }
    assert!(b.lowering(0).iter().all(|v| v.abs() < 1e-14));
}

proptest! {
    #[test]
    fn lambda_squares_to_energy_gap(e in 0.05f64..8.0, n in 0usize..12) {
        prop_assume!((e * e - 2.0 * n as f64).abs() > 1e-6);
        let l = lambda(n, e);
        let d = l * l - C64::new(e * e - 2.0 * n as f64, 0.0);
        prop_assert!(d.norm() < 1e-10 * (1.0 + e * e));
        prop_assert!(l.re >= 0.0 && l.im >= 0.0);
    }

    #[test]
    fn gauss_legendre_weights_sum_to_length(n in 1usize..40, a in -3.0f64..0.0, w in 0.1f64..4.0) {
        let r = gauss_legendre(n).on_interval(a, a + w);
        let s: f64 = r.weights.iter().sum();
        prop_assert!((s - w).abs() < 1e-12 * w.max(1.0));
        prop_assert!(r.nodes.iter().all(|&x| x > a && x < a + w));
    }
}
