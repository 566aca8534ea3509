//! Acceptance suite. One line per criterion: `[PASS]` or `[FAIL]`, a short
//! label, the measured quantities and the wall time.
//!
//! `cargo test --test acceptance -- 1 4 7` runs a subset. The process exits
//! non-zero on failure only when `ACCEPTANCE_STRICT=1`.

use diracwave::adjoint_inversion::{evaluate, finite_difference, ObservationSet, ParamBasis, Preset};
use diracwave::experiments::{forward_all, run_experiment, ExperimentConfig, ExperimentOutput};
use diracwave::greens_slab::{slab_tr, Discretization, PotentialRep};
use diracwave::linearized::{
    born_forward, born_from_transform, full_keys, invert_full, invert_scalar, norm_bounds_check, reduce_scalar,
    scalar_keys, v_hat, SampleKey,
};
use diracwave::spectral_basis::{check_band_edge, mode_list, YProfile};
use diracwave::tr_merge::{born_normalized, cascade, extract_smatrix, TRMatrix};
use diracwave::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn admissible_energy(r: &mut ChaCha8Rng, lo: f64, hi: f64, n_y: usize) -> f64 {
    loop {
        let e = r.random_range(lo..hi);
        if check_band_edge(e, n_y).is_ok() && (1..=n_y).all(|n| (e * e - 2.0 * n as f64).abs() > 1e-2) {
            return e;
        }
    }
}

fn random_potential(r: &mut ChaCha8Rng, n_x: usize, n_y: usize, half: f64, amp: f64, profile: YProfile) -> PotentialRep {
    let mut p = PotentialRep::zeros(-half, half, n_x, n_y, profile).unwrap();
    for c in p.coeffs.iter_mut() {
        *c = amp * r.random_range(-1.0..1.0);
    }
    p
}

fn free_propagation() -> Outcome {
    let mut r = rng(1);
    let n_y = 6;
    let mut worst_tr: f64 = 0.0;
    let mut worst_s: f64 = 0.0;
    for _ in 0..20 {
        let e = admissible_energy(&mut r, 0.2, 6.0, n_y);
        let half = r.random_range(0.1..1.0);
        let pot = PotentialRep::zeros(-half, half, 2, n_y, YProfile::Hermite).unwrap();
        let t = slab_tr(&pot, e, Discretization::new(n_y)).unwrap();
        let free = TRMatrix::free(e, -half, half, n_y).unwrap();
        worst_tr = worst_tr.max(t.max_abs_diff(&free));
        let s = extract_smatrix(&t);
        for ((i, j), z) in s.data.indexed_iter() {
            let id = if i == j { 1.0 } else { 0.0 };
            worst_s = worst_s.max((z - id).norm());
        }
    }
    Outcome {
        pass: worst_tr <= 1e-10 && worst_s <= 1e-10,
        detail: format!("max |TR - free| = {worst_tr:.2e}, max |S - I| = {worst_s:.2e}"),
    }
}

fn unitarity() -> Outcome {
    let mut r = rng(2);
    let n_y = 6;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let pot = random_potential(&mut r, 3, 3, 0.3, 0.8, YProfile::Hermite);
        for _ in 0..5 {
            let e = admissible_energy(&mut r, 0.5, 4.0, n_y);
            let t = slab_tr(&pot, e, Discretization::new(n_y)).unwrap();
            worst = worst.max(extract_smatrix(&t).unitarity_defect());
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max ||S^H S - I||_F = {worst:.2e} over 50 solves"),
    }
}

fn merge_direct() -> Outcome {
    let mut r = rng(3);
    let n_y = 5;
    let mut worst = [0.0f64; 2];
    for _ in 0..3 {
        let pot = random_potential(&mut r, 3, 3, 0.4, 0.6, YProfile::Hermite);
        let e = admissible_energy(&mut r, 0.8, 3.5, n_y);
        let disc = Discretization::new(n_y);
        let direct = cascade(&pot, e, 0, disc, None).unwrap().tr;
        for d in 1..=2u32 {
            let c = cascade(&pot, e, d, disc, None).unwrap().tr;
            worst[d as usize - 1] = worst[d as usize - 1].max(c.max_abs_diff(&direct));
        }
    }
    Outcome {
        pass: worst.iter().all(|&w| w <= 1e-8),
        detail: format!("L=1: {:.2e}, L=2: {:.2e}", worst[0], worst[1]),
    }
}

fn slope(eps: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn born_consistency() -> Outcome {
    let mut r = rng(4);
    let n_y = 4;
    let eps = [1e-1, 1e-2, 1e-3, 1e-4];
    let mut min_slope = f64::INFINITY;
    let mut count = 0;
    for _ in 0..3 {
        let base = random_potential(&mut r, 3, 3, 0.3, 1.0, YProfile::Hermite);
        let e = admissible_energy(&mut r, 1.6, 3.0, n_y);
        let props: Vec<_> = mode_list(n_y).into_iter().filter(|m| e * e > 2.0 * m.level as f64).collect();
        let keys: Vec<SampleKey> = props
            .iter()
            .flat_map(|&m| props.iter().map(move |&p| SampleKey { m, p, energy: e }))
            .collect();
        let lin1 = born_forward(&base, &keys).unwrap();
        let trs: Vec<TRMatrix> = eps
            .iter()
            .map(|&f| slab_tr(&base.scaled(f), e, Discretization::new(n_y)).unwrap())
            .collect();
        for k in &keys {
            let l = lin1.get(k).unwrap();
            if l.norm() < 1e-3 {
                continue;
            }
            let errs: Vec<f64> = eps
                .iter()
                .zip(&trs)
                .map(|(&f, t)| (born_normalized(t, k.m, k.p).unwrap() - l * f).norm())
                .collect();
            min_slope = min_slope.min(slope(&eps, &errs));
            count += 1;
        }
    }
    Outcome {
        pass: count > 0 && min_slope >= 1.9,
        detail: format!("min log-log slope {min_slope:.3} over {count} entries"),
    }
}

fn avoid_branch(r: &mut ChaCha8Rng, n: usize) -> f64 {
    loop {
        let xi: f64 = r.random_range(0.2..4.0);
        if (1..=n + 2).all(|k| (xi - (2.0 * k as f64).sqrt()).abs() > 1e-2) {
            return xi;
        }
    }
}

fn linear_round_trip() -> Outcome {
    let mut r = rng(5);
    let mut scalar_err: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..=8usize);
        let n_x = r.random_range(0..=4usize);
        let half = r.random_range(0.1..0.8);
        let mut pot = PotentialRep::zeros(-half, half, n_x, n, YProfile::Scaled).unwrap();
        for j in 0..=n_x {
            for k in 0..=n {
                pot.set(j, k, 0, r.random_range(-1.0..1.0));
            }
        }
        let xi = avoid_branch(&mut r, n);
        let data = born_forward(&pot, &scalar_keys(xi, n).unwrap()).unwrap();
        let v = invert_scalar(xi, &reduce_scalar(xi, n, &data).unwrap()).unwrap();
        let exact = v_hat(&pot, xi);
        for k in 0..=n {
            scalar_err = scalar_err.max((v[k] - exact[k][0]).norm());
        }
    }
    let mut full_err: f64 = 0.0;
    for _ in 0..30 {
        let n = r.random_range(2..=6usize);
        let half = r.random_range(0.1..0.6);
        let mut pot = PotentialRep::zeros(-half, half, 3, n, YProfile::Hermite).unwrap();
        for j in 0..=3 {
            for k in 0..=n {
                pot.set(j, k, 0, r.random_range(-1.0..1.0));
            }
        }
        let xi = avoid_branch(&mut r, n + 1);
        let data = born_forward(&pot, &full_keys(xi, n).unwrap()).unwrap();
        let inv = invert_full(xi, n, YProfile::Hermite, &data).unwrap();
        let exact = v_hat(&pot, xi);
        for (a, b) in inv.v.iter().zip(&exact) {
            for c in 0..4 {
                full_err = full_err.max((a[c] - b[c]).norm());
            }
        }
    }
    Outcome {
        pass: scalar_err <= 1e-10 && full_err <= 1e-9,
        detail: format!("scalar max error {scalar_err:.2e} (100 potentials), full sigma_0 max error {full_err:.2e}"),
    }
}

fn stability_sandwich() -> Outcome {
    let mut r = rng(6);
    let mut violations = 0;
    let mut tail_violations = 0;
    let mut total = 0;
    let mut worst_lower: f64 = 0.0;
    let mut worst_upper: f64 = 0.0;
    for &n in &[2usize, 5, 10, 20] {
        for _ in 0..250 {
            let v: Vec<C64> = (0..=n)
                .map(|_| C64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                .collect();
            let xi = avoid_branch(&mut r, n);
            let vh = |_: f64| v.iter().map(|&x| [x, C64::default(), C64::default(), C64::default()]).collect();
            let keys = scalar_keys(xi, n).unwrap();
            let data = born_from_transform(vh, n, YProfile::Scaled, &keys).unwrap();
            let st = reduce_scalar(xi, n, &data).unwrap();
            let rep = norm_bounds_check(&v, &st);
            total += 1;
            if !rep.holds() {
                violations += 1;
                worst_lower = worst_lower.min(rep.lower_slack / rep.v_norm);
                worst_upper = worst_upper.min(rep.upper_slack / rep.v_norm);
            }
            if !rep.tail_holds() {
                tail_violations += 1;
            }
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!(
            "{violations}/{total} violations (worst relative slack lower {worst_lower:.3}, upper {worst_upper:.3}); \
             s>=1 tail: {tail_violations}/{total}"
        ),
    }
}

fn adjoint_gradient() -> Outcome {
    let mut r = rng(7);
    let n_y = 4;
    let disc = Discretization::new(n_y);
    let template = PotentialRep::zeros(-0.25, 0.25, 3, 3, YProfile::Hermite).unwrap();
    let basis = ParamBasis::channels(&template, &[0, 1, 2, 3]);
    let reference = basis.potential(&(0..basis.len()).map(|_| r.random_range(-0.5..0.5)).collect::<Vec<_>>());
    let energies = [1.7, 2.6, 3.3, 4.4];
    let obs = ObservationSet::from_preset(Preset::M0, &forward_all(&reference, &energies, disc).unwrap()).unwrap();
    let kappa: Vec<f64> = (0..basis.len()).map(|_| r.random_range(-0.5..0.5)).collect();
    let g = evaluate(&basis, &kappa, &obs, disc, true).unwrap().gradient.unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let a = r.random_range(0..basis.len());
        let best = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| {
                let fd = finite_difference(&basis, &kappa, &obs, disc, a, h).unwrap();
                (fd - g[a]).abs() / g[a].abs().max(fd.abs())
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!("max relative difference {worst:.2e} on 10 coefficients of {}", basis.len()),
    }
}

fn run(cfg: &ExperimentConfig) -> ExperimentOutput {
    run_experiment(cfg, None).unwrap_or_else(|e| panic!("{}: {e}", cfg.name))
}

fn desk_exp1() -> Outcome {
    let cfg = ExperimentConfig::exp1_small();
    let o = run(&cfg);
    let s = o.report.final_misfit().unwrap();
    let mono = o.report.err_monotone_from(10);
    Outcome {
        pass: s <= 1e-3 && mono && cfg.i_max <= 300,
        detail: format!(
            "{} iterations, final misfit {s:.3e}, final err {:.3e}, err monotone after 10: {mono}",
            cfg.i_max,
            o.report.final_err().unwrap()
        ),
    }
}

fn noise_floor() -> Outcome {
    let levels = [4e-2, 8e-2, 1.6e-1];
    let mut finals = Vec::new();
    for s2 in levels {
        let mut cfg = ExperimentConfig::exp1_small();
        cfg.sigma = f64::sqrt(s2);
        cfg.i_max = NOISE_ITERS;
        finals.push(run(&cfg).report.final_misfit().unwrap());
    }
    Outcome {
        pass: finals.windows(2).all(|w| w[0] < w[1]),
        detail: format!(
            "final misfit at sigma^2 = 4e-2, 8e-2, 1.6e-1: {:.3e}, {:.3e}, {:.3e} ({NOISE_ITERS} iterations)",
            finals[0], finals[1], finals[2]
        ),
    }
}

const NOISE_ITERS: usize = 100;

fn non_identifiability() -> Outcome {
    let s3 = run(&ExperimentConfig::exp3().small());
    let (e3, a3) = (s3.report.final_err().unwrap(), s3.report.final_err_avg().unwrap());
    let mut finals = Vec::new();
    for p in [Preset::MT, Preset::M0, Preset::MR] {
        let mut cfg = ExperimentConfig::exp4().small();
        cfg.obs = p;
        finals.push(run(&cfg).report.final_err().unwrap());
    }
    let pass = a3 <= 1e-4 && e3 >= 0.3 && finals[0] >= 0.3 && finals[1] < finals[0] && finals[2] < finals[0];
    Outcome {
        pass,
        detail: format!(
            "sigma_3: err_avg {a3:.2e}, err {e3:.3}; sigma_0 err MT {:.3}, M0 {:.2e}, MR {:.2e}",
            finals[0], finals[1], finals[2]
        ),
    }
}

fn observation_ordering() -> Outcome {
    let mut finals = Vec::new();
    for p in [Preset::M0, Preset::MA, Preset::MB] {
        let mut cfg = ExperimentConfig::exp2().small();
        cfg.obs = p;
        finals.push(run(&cfg).report.final_err().unwrap());
    }
    Outcome {
        pass: finals[0] <= finals[1] && finals[1] <= finals[2],
        detail: format!("final err M0 {:.2e}, MA {:.2e}, MB {:.2e}", finals[0], finals[1], finals[2]),
    }
}

type Check = (usize, &'static str, Duration, fn() -> Outcome);

fn main() {
    diracwave::init_threads();
    let checks: [Check; 11] = [
        (1, "free propagation", Duration::from_secs(1), free_propagation),
        (2, "unitarity", Duration::from_secs(60), unitarity),
        (3, "merge/direct equivalence", Duration::from_secs(60), merge_direct),
        (4, "Born consistency", Duration::from_secs(120), born_consistency),
        (5, "linearized round trip", Duration::from_secs(120), linear_round_trip),
        (6, "stability sandwich", Duration::from_secs(60), stability_sandwich),
        (7, "adjoint gradient", Duration::from_secs(300), adjoint_gradient),
        (8, "desk-scale experiment 1", Duration::from_secs(1800), desk_exp1),
        (9, "noise-floor ordering", Duration::from_secs(5400), noise_floor),
        (10, "non-identifiability", Duration::from_secs(1800), non_identifiability),
        (11, "observation-set ordering", Duration::from_secs(1800), observation_ordering),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, limit, f) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let dt = t.elapsed();
        let in_time = dt <= limit;
        let pass = o.pass && in_time;
        ran += 1;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {id:>2} {name}: {}; {:.1}s (limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
