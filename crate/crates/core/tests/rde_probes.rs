use roughmdp::coeff::AffineField;
use roughmdp::fbm::{FbmSampler, HurstParam};
use roughmdp::grid::TimeGrid;
use roughmdp::rde::{phi_map, solve_base_ode, KappaSpec};
use roughmdp::roughpath::{holder_estimate, lift_with_depth, Depth, Increment, RoughPathLift};

fn field() -> AffineField {
    AffineField::new(
        vec![vec![-0.5, 0.3], vec![0.1, -0.2]],
        Some(vec![0.1, 0.0]),
        vec![vec![0.4, 0.1], vec![0.0, 0.3]],
        vec![
            vec![vec![0.3, 0.0], vec![0.1, -0.2]],
            vec![vec![0.0, 0.2], vec![-0.1, 0.25]],
        ],
    )
    .unwrap()
}

fn driver(h: f64, depth: Depth, path: u64) -> RoughPathLift {
    let grid = TimeGrid::new(7).unwrap();
    let sampler = FbmSampler::new(grid, HurstParam::new(h).unwrap()).unwrap();
    lift_with_depth(&sampler.sample_path(99, 0, path, 2), depth)
}

/// Adds `size·(±1)` to every stored tensor entry, sign alternating.
fn perturb(x: &RoughPathLift, size: f64) -> RoughPathLift {
    let mut sign = 1.0;
    let mut bump = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                sign = -sign;
                a + sign * size
            })
            .collect()
    };
    let intervals = x
        .intervals()
        .iter()
        .map(|inc| {
            let l3 = (inc.depth() == Depth::Three).then(|| bump(inc.level(3)));
            Increment::from_levels(inc.dim(), bump(inc.level(1)), bump(inc.level(2)), l3).unwrap()
        })
        .collect();
    RoughPathLift::from_intervals(x.grid(), intervals).unwrap()
}

#[test]
fn phi_is_continuous_in_the_driver() {
    let kappa = KappaSpec::Power(0.4);
    for (h, depth) in [(0.45, Depth::Two), (0.3, Depth::Three)] {
        let x = driver(h, depth, 1);
        let grid = x.grid();
        let base = phi_map(&field(), &[0.3, -0.2], 0.3, &x, &kappa, grid).unwrap();
        let moved = phi_map(&field(), &[0.3, -0.2], 0.3, &perturb(&x, 1e-6), &kappa, grid).unwrap();
        let gap = base.sup_distance(&moved).unwrap();
        assert!(gap <= 1e-3, "H={h}: {gap:e}");
    }
}

#[test]
fn phi_is_continuous_in_eps() {
    let kappa = KappaSpec::Power(0.4);
    let x = driver(0.45, Depth::Two, 2);
    let grid = x.grid();
    for eps in [0.0, 0.1, 0.3, 0.7] {
        let a = phi_map(&field(), &[0.3, -0.2], eps, &x, &kappa, grid).unwrap();
        let b = phi_map(&field(), &[0.3, -0.2], eps + 1e-4, &x, &kappa, grid).unwrap();
        let gap = a.sup_distance(&b).unwrap();
        assert!(gap <= 1e-2, "eps={eps}: {gap:e}");
    }
}

#[test]
fn coupled_solution_is_bounded_over_eps() {
    let kappa = KappaSpec::Power(0.4);
    let x = driver(0.3, Depth::Three, 3);
    let grid = x.grid();
    let r: f64 = holder_estimate(&x, 0.29)
        .iter()
        .enumerate()
        .map(|(k, v)| v.powf(1.0 / (k + 1) as f64))
        .sum();
    assert!(r.is_finite());
    let y0 = solve_base_ode(&field(), &[0.3, -0.2], grid).unwrap();
    let sizes: Vec<f64> = (0..=10)
        .map(|i| {
            let z = phi_map(&field(), &[0.3, -0.2], i as f64 / 10.0, &x, &kappa, grid).unwrap();
            y0.sup_norm() + z.sup_norm()
        })
        .collect();
    let (lo, hi) = sizes
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    assert!(hi <= 5.0 * lo, "{sizes:?} (r = {r})");
}
