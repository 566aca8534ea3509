use diracwave::adjoint_inversion::*;
use diracwave::experiments::forward_all;
use diracwave::greens_slab::{slab_tr, Discretization, PotentialRep, SlabOperator};
use diracwave::spectral_basis::{mode_list, ModeIndex, YProfile};
use diracwave::tr_merge::TRMatrix;
use diracwave::{Error, C64};
use ndarray::Array1;
use proptest::prelude::*;

fn template(n_x: usize, n_y: usize) -> PotentialRep {
    PotentialRep::zeros(-0.25, 0.25, n_x, n_y, YProfile::Hermite).unwrap()
}

fn values(n: usize, seed: u64, amp: f64) -> Vec<f64> {
    let mut st = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(3);
    (0..n)
        .map(|_| {
            st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            amp * ((st >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        })
        .collect()
}

struct Problem {
    basis: ParamBasis,
    obs: ObservationSet,
    disc: Discretization,
    kappa: Vec<f64>,
}

fn problem(preset: Preset, energies: &[f64]) -> Problem {
    let n_y = 3;
    let disc = Discretization::new(n_y);
    let basis = ParamBasis::channels(&template(2, 2), &[0, 1, 2, 3]);
    let reference = basis.potential(&values(basis.len(), 1, 1.0));
    let trs = forward_all(&reference, energies, disc).unwrap();
    let obs = ObservationSet::from_preset(preset, &trs).unwrap();
    let kappa = values(basis.len(), 2, 1.0);
    Problem { basis, obs, disc, kappa }
}

#[test]
fn preset_membership() {
    let n_y = 3;
    let total = mode_list(n_y).len();
    assert_eq!(Preset::M0.pairs(n_y).len(), total * total);
    assert_eq!(Preset::MT.pairs(n_y).len(), total);
    // MB: level 0 has one mode, the others two, so 1 + 3 * 4
    assert_eq!(Preset::MB.pairs(n_y).len(), 13);
    assert_eq!(Preset::MR.pairs(n_y).len(), 6);
    for (m, p) in Preset::MA.pairs(n_y) {
        assert!(m.level <= 1 || p.level <= 1);
    }
    assert!(!Preset::MA.contains(ModeIndex::plus(2), ModeIndex::minus(3)));
    assert!(Preset::MR.contains(ModeIndex::plus(2), ModeIndex::minus(2)));
    assert!(!Preset::MR.contains(ModeIndex::minus(0), ModeIndex::minus(0)));
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert_eq!("m^b".parse::<Preset>().unwrap(), Preset::MB);
    assert!(matches!("M9".parse::<Preset>(), Err(Error::Config(_))));
}

#[test]
fn preset_pairs_nest() {
    for n_y in [2, 5] {
        for (m, p) in Preset::MT.pairs(n_y) {
            assert!(Preset::MB.contains(m, p));
        }
        for (m, p) in Preset::MR.pairs(n_y) {
            assert!(Preset::MB.contains(m, p));
        }
    }
}

#[test]
fn misfit_on_hand_computed_case() {
    // n_y = 0: the only mode is (0,-), so TR is 1x1; two energies.
    let a = TRMatrix::new(1.0, 0.0, 1.0, 0, ndarray::arr2(&[[C64::new(1.0, 2.0)]]));
    let b = TRMatrix::new(2.0, 0.0, 1.0, 0, ndarray::arr2(&[[C64::new(0.0, -1.0)]]));
    let pairs = vec![(ModeIndex::minus(0), ModeIndex::minus(0))];
    let obs = ObservationSet::from_tr(pairs, &[a.clone(), b.clone()])
        .unwrap()
        .with_observed(vec![vec![C64::new(0.0, 0.0)], vec![C64::new(3.0, -1.0)]])
        .unwrap();
    // |1+2i|^2 + |-3|^2 = 5 + 9
    let m = misfit(&[a, b], &obs).unwrap();
    assert_eq!(m.minus, 14.0);
    assert_eq!(m.plus, 0.0);
    let mut w = obs.clone();
    w.weights = vec![0.5];
    assert_eq!(misfit(&[w_tr(1.0, 1.0, 2.0), w_tr(2.0, 0.0, -1.0)], &w).unwrap().total(), 7.0);
}

fn w_tr(e: f64, re: f64, im: f64) -> TRMatrix {
    TRMatrix::new(e, 0.0, 1.0, 0, ndarray::arr2(&[[C64::new(re, im)]]))
}

#[test]
fn relative_error_on_hand_computed_case() {
    // coefficients (j=0) weight 1, (j=1) weight 1/3
    let mut r = PotentialRep::zeros(0.0, 1.0, 1, 0, YProfile::Constant).unwrap();
    r.set(0, 0, 0, 2.0);
    r.set(1, 0, 0, 3.0);
    let mut v = r.clone();
    v.set(0, 0, 0, 1.0);
    v.set(1, 0, 0, 0.0);
    // (1 + 9/3) / (4 + 9/3) = 4/7
    assert!((relative_error(&v, &r) - 4.0 / 7.0).abs() < 1e-15);
    let idx = r.index(0, 0, 0);
    assert!((average_error(&v, &r, idx) - 0.25).abs() < 1e-15);
    assert_eq!(relative_error(&r, &r), 0.0);
}

#[test]
fn missing_entries_are_named() {
    let t = slab_tr(&template(1, 1), 1.7, Discretization::new(1)).unwrap();
    let r = ObservationSet::from_tr(vec![(ModeIndex::minus(2), ModeIndex::minus(0))], &[t]);
    match r {
        Err(Error::MissingSamples(s)) => assert!(s.contains(&ModeIndex::minus(2).to_string()), "{s}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn gradient_matches_central_differences() {
    // 3.3 keeps levels 2 and 3 evanescent at n_y = 3 on part of the set
    let pr = problem(Preset::M0, &[1.7, 2.2, 3.3]);
    let g = evaluate(&pr.basis, &pr.kappa, &pr.obs, pr.disc, true).unwrap().gradient.unwrap();
    for a in (0..pr.basis.len()).step_by(5) {
        let fd = finite_difference(&pr.basis, &pr.kappa, &pr.obs, pr.disc, a, 1e-5).unwrap();
        assert!((fd - g[a]).abs() <= 1e-6 * g[a].abs().max(1e-3), "a={a}: fd {fd} vs {}", g[a]);
    }
}

#[test]
fn gradient_matches_for_partial_observations() {
    for preset in [Preset::MT, Preset::MR, Preset::MA] {
        let pr = problem(preset, &[1.9, 2.6]);
        let g = evaluate(&pr.basis, &pr.kappa, &pr.obs, pr.disc, true).unwrap().gradient.unwrap();
        for a in [0, 7, 19, 30] {
            let fd = finite_difference(&pr.basis, &pr.kappa, &pr.obs, pr.disc, a, 1e-5).unwrap();
            assert!((fd - g[a]).abs() <= 1e-6 * g[a].abs().max(1e-3), "{preset} a={a}: {fd} vs {}", g[a]);
        }
    }
}

#[test]
fn adjoint_field_satisfies_green_identity() {
    let pr = problem(Preset::M0, &[2.4]);
    let pot = pr.basis.potential(&pr.kappa);
    let (op, st) = energy_state(&pot, &pr.obs, 0, pr.disc).unwrap();
    let source: Array1<C64> = Array1::from_iter((0..op.dim()).map(|i| C64::new((i as f64).sin(), (i as f64 * 0.3).cos())));
    for (_, _, res, adj) in &st.fields {
        assert!(adj.residual < 1e-12);
        let d = green_identity_defect(&op, res, adj, &source);
        assert!(d < 1e-10, "{d:e}");
    }
}

#[test]
fn adjoint_solve_checks_length() {
    let op = SlabOperator::new(&template(1, 1), 2.0 + 0.1, -0.25, 0.25, Discretization::new(2)).unwrap();
    assert!(matches!(adjoint_solve(&op, Array1::zeros(3)), Err(Error::Mismatch(_))));
}

#[test]
fn born_sensitivity_matches_tr_derivatives() {
    let energies = [1.8, 2.7];
    let pr = problem(Preset::MB, &energies);
    let sens = born_sensitivity(&pr.basis, &pr.obs, pr.disc).unwrap();
    let h = 1e-6;
    for a in [0, 5, 12, 33] {
        let mut kp = vec![0.0; pr.basis.len()];
        kp[a] = h;
        let plus = pr.basis.potential(&kp);
        kp[a] = -h;
        let minus = pr.basis.potential(&kp);
        let mut want = 0.0;
        for &e in &energies {
            let tp = slab_tr(&plus, e, pr.disc).unwrap();
            let tm = slab_tr(&minus, e, pr.disc).unwrap();
            for &(m, p) in &pr.obs.pairs {
                let d = (tp.get(m, p).unwrap() - tm.get(m, p).unwrap()) / (2.0 * h);
                want += d.norm_sqr();
            }
        }
        assert!((sens[a] - want).abs() < 1e-6 * want.max(1e-6), "a={a}: {} vs {want}", sens[a]);
    }
}

#[test]
fn descent_reduces_objective_and_records_history() {
    let pr = problem(Preset::M0, &[1.7, 2.6]);
    let basis = pr.basis.clone().normalized(&pr.obs, pr.disc).unwrap();
    let run = ReconstructionRun::new(basis, vec![0.0; pr.basis.len()], 0);
    let cfg = DescentConfig {
        eta: 1.0,
        iters: 8,
        line_search: LineSearch::Guarded,
        target: 0.0,
    };
    let run = descend(run, &pr.obs, pr.disc, &cfg, None).unwrap();
    assert_eq!(run.history.len(), 9);
    assert_eq!(run.history[0].misfit, 1.0);
    for w in run.history.windows(2) {
        assert!(w[1].objective <= w[0].objective);
    }
    assert!(run.last().unwrap().misfit < 0.5);
    assert_eq!(run.kappas.len(), 9);

    let bad = DescentConfig { eta: 0.0, ..cfg };
    let r = ReconstructionRun::new(pr.basis.clone(), vec![0.0; pr.basis.len()], 0);
    assert!(matches!(descend(r, &pr.obs, pr.disc, &bad, None), Err(Error::Invalid(_))));
}

#[test]
fn evaluation_checks_shapes() {
    let pr = problem(Preset::MT, &[2.2]);
    assert!(matches!(
        evaluate(&pr.basis, &pr.kappa[1..], &pr.obs, pr.disc, false),
        Err(Error::Mismatch(_))
    ));
    assert!(matches!(
        evaluate(&pr.basis, &pr.kappa, &pr.obs, Discretization::new(2), false),
        Err(Error::Mismatch(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn restrict_inverts_potential(seed in 0u64..1000, n_x in 0usize..4, n_y in 0usize..4) {
        let b = ParamBasis::channels(&template(n_x, n_y), &[0, 3]);
        let k = values(b.len(), seed, 2.0);
        let back = b.restrict(&b.potential(&k));
        for (x, y) in k.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-14);
        }
    }
}
