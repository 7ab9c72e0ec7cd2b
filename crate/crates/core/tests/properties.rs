//! Property suites for the structural invariants.

use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyplab::boundary_measure::{busemann_direction, exact_free_group_density, ConformalDensity, Direction};
use hyplab::boundary_rep::{act, check_cs_poisson, matrix_coefficient, matrix_coefficient_dense, StepFunction};
use hyplab::cli::random_element;
use hyplab::decay_suite::{annulus_average, minimal_resolution};
use hyplab::group_model::DEFAULT_CAP;
use hyplab::poisson_kernel::normalized_poisson;
use hyplab::schwartz_algebra::{convolve, SchwartzElement};
use hyplab::{GroupElement, GroupModel};

const MODELS: [&str; 4] = ["free:2", "free:3", "zfp:2,3", "zfp:3,3"];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn triple(m: &GroupModel, seed: u64, len: usize) -> (GroupElement, GroupElement, GroupElement) {
    let mut r = rng(seed);
    (random_element(m, len, &mut r), random_element(m, len, &mut r), random_element(m, len, &mut r))
}

fn free_density(spec: &str) -> (GroupModel, ConformalDensity) {
    let m = GroupModel::parse(spec).unwrap();
    let d = exact_free_group_density(&m, &m.identity(), 12).unwrap();
    (m, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_axioms(model in 0usize..4, seed in any::<u64>()) {
        let m = GroupModel::parse(MODELS[model]).unwrap();
        let (a, b, c) = triple(&m, seed, 8);
        let e = m.identity();
        let ab_c = m.multiply(&m.multiply(&a, &b).unwrap(), &c).unwrap();
        let a_bc = m.multiply(&a, &m.multiply(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(ab_c, a_bc);
        prop_assert_eq!(m.multiply(&a, &m.inverse(&a).unwrap()).unwrap(), e.clone());
        prop_assert_eq!(m.multiply(&e, &a).unwrap(), a.clone());
        prop_assert!(m.is_normal(a.word()));
    }

    #[test]
    fn word_metric(model in 0usize..4, seed in any::<u64>()) {
        let m = GroupModel::parse(MODELS[model]).unwrap();
        let (a, b, c) = triple(&m, seed, 8);
        let dab = m.distance(&a, &b).unwrap();
        prop_assert_eq!(dab, m.distance(&b, &a).unwrap());
        prop_assert!(m.distance(&a, &c).unwrap() <= dab + m.distance(&b, &c).unwrap());
        prop_assert_eq!(m.distance(&a, &a).unwrap(), 0);
        // Left invariance.
        let ca = m.multiply(&c, &a).unwrap();
        let cb = m.multiply(&c, &b).unwrap();
        prop_assert_eq!(m.distance(&ca, &cb).unwrap(), dab);
    }

    #[test]
    fn gromov_product_bounds_and_tree_condition(model in 0usize..4, seed in any::<u64>()) {
        let m = GroupModel::parse(MODELS[model]).unwrap();
        let (x, y, z) = triple(&m, seed, 7);
        let w = random_element(&m, 7, &mut rng(seed ^ 0x9e37));
        let g = |a: &GroupElement, b: &GroupElement| m.gromov_product(&w, a, b).unwrap();
        let lo = Ratio::from_integer(0);
        let dxw = Ratio::from_integer(m.distance(&w, &x).unwrap() as i64);
        prop_assert!(g(&x, &y) >= lo && g(&x, &y) <= dxw);
        // Four-point condition with delta = 0.
        let min = std::cmp::min(g(&x, &y), g(&y, &z));
        prop_assert!(g(&x, &z) >= min);
        let at_e = m.gromov_product(&m.identity(), &x, &y).unwrap();
        prop_assert_eq!(Ratio::from_integer(m.gp2_identity(x.word(), y.word())), at_e * 2);
    }

    #[test]
    fn busemann_cocycle(model in 0usize..4, seed in any::<u64>()) {
        let m = GroupModel::parse(MODELS[model]).unwrap();
        let (x, y, z) = triple(&m, seed, 8);
        let pre = random_element(&m, 5, &mut rng(seed.wrapping_add(1))).into_word();
        prop_assume!(!pre.is_empty());
        let v = Direction::canonical_extension(&m, &pre).unwrap();
        let b = |p: &GroupElement, q: &GroupElement| busemann_direction(&m, &v, p.word(), q.word());
        prop_assert_eq!(b(&x, &z), b(&x, &y) + b(&y, &z));
        prop_assert_eq!(b(&x, &x), 0);
        prop_assert!(b(&x, &y).abs() <= m.distance(&x, &y).unwrap() as i64);
    }

    #[test]
    fn density_consistency(rank in 2u8..4, seed in any::<u64>()) {
        let (m, d) = free_density(&format!("free:{rank}"));
        let mut r = rng(seed);
        let w = random_element(&m, 5, &mut r).into_word();
        let y = random_element(&m, 4, &mut r).into_word();
        let parent = d.mass_at(&y, &w).unwrap();
        let kids: f64 = m.children(w.last().copied()).into_iter().map(|l| {
            let mut c = w.clone();
            c.push(l);
            d.mass_at(&y, &c).unwrap()
        }).sum();
        prop_assert!((parent - kids).abs() <= 1e-12 * parent);
        let via = d.mass_via_cocycle(&y, &w).unwrap();
        prop_assert!((via - parent).abs() <= 1e-12 * parent);
    }

    #[test]
    fn boundary_action_is_unitary(seed in any::<u64>()) {
        let (m, d) = free_density("free:2");
        let mut r = rng(seed);
        let g = random_element(&m, 4, &mut r);
        let f = StepFunction::random_nonnegative(&m, 3, &mut r);
        let moved = act(&d, &g, &f).unwrap();
        let (a, b) = (f.l2_norm(&d).unwrap(), moved.l2_norm(&d).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * a);
    }

    #[test]
    fn stratified_coefficient_matches_dense(seed in any::<u64>()) {
        let (m, d) = free_density("free:2");
        let mut r = rng(seed);
        let g = random_element(&m, 5, &mut r);
        let f = StepFunction::random_nonnegative(&m, 3, &mut r);
        let h = StepFunction::random_nonnegative(&m, 2, &mut r);
        let s = matrix_coefficient(&d, &g, &f, &h).unwrap();
        let dense = matrix_coefficient_dense(&d, &g, &f, &h).unwrap();
        prop_assert!((s - dense).norm() <= 1e-12 * dense.norm().max(1e-300));
    }

    #[test]
    fn normalized_transform_is_an_average(seed in any::<u64>()) {
        let (m, d) = free_density("free:2");
        let mut r = rng(seed);
        let y = random_element(&m, 10, &mut r);
        let one = StepFunction::constant(&m, 0, 1.0);
        prop_assert!((normalized_poisson(&d, &one, &y).unwrap().re - 1.0).abs() <= 1e-12);
        let f = StepFunction::random_nonnegative(&m, 3, &mut r);
        let p = normalized_poisson(&d, &f, &y).unwrap().re;
        prop_assert!(p >= -1e-15 && p <= f.linf_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn cauchy_schwarz_lemma(seed in any::<u64>()) {
        let (m, d) = free_density("free:2");
        let mut r = rng(seed);
        let g = random_element(&m, 6, &mut r);
        let xi = StepFunction::random_nonnegative(&m, 3, &mut r);
        let eta = StepFunction::random_nonnegative(&m, 3, &mut r);
        prop_assert!(check_cs_poisson(&d, &g, &xi, &eta).unwrap().holds);
    }

    #[test]
    fn involution_reverses_products(model in 0usize..4, seed in any::<u64>()) {
        let m = GroupModel::parse(MODELS[model]).unwrap();
        let mut r = rng(seed);
        let f = SchwartzElement::random(&m, 2, 4.0, 0.5, &mut r, DEFAULT_CAP).unwrap();
        let g = SchwartzElement::random(&m, 2, 4.0, 0.5, &mut r, DEFAULT_CAP).unwrap();
        prop_assert!((f.involution().l2_norm() - f.l2_norm()).abs() <= 1e-12 * f.l2_norm().max(1.0));
        let lhs = convolve(&f, &g, DEFAULT_CAP).unwrap().involution();
        let rhs = convolve(&g.involution(), &f.involution(), DEFAULT_CAP).unwrap();
        let ball = m.enumerate_ball(4, DEFAULT_CAP).unwrap();
        for x in &ball {
            prop_assert!((lhs.value(x) - rhs.value(x)).norm() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn annulus_average_has_unit_integral(n in 2usize..7, rho in 0.0f64..2.0) {
        let (_, d) = free_density("free:2");
        let avg = annulus_average(&d, n, rho, minimal_resolution(&d, n, rho), DEFAULT_CAP).unwrap();
        prop_assert!((avg.integral - 1.0).abs() <= 1e-12);
        prop_assert!(avg.count > 0);
    }
}
