use multipass_core::hardness::{
    self, classify_direction, is_even_symmetric, is_ortho_even_symmetric, moment_functional, moment_mc,
    moment_quadrature, ClassifyOptions, Direction, Status,
};
use multipass_core::targets::{self, TargetFunction};
use proptest::prelude::*;
use std::collections::BTreeMap;

/// Polynomial in k variables: exponent vector -> coefficient.
#[derive(Clone, Debug)]
struct Poly(BTreeMap<Vec<u32>, f64>);

impl Poly {
    fn monomial(k: usize, exps: &[(usize, u32)], c: f64) -> Self {
        let mut e = vec![0; k];
        for &(i, p) in exps {
            e[i] += p;
        }
        Poly(BTreeMap::from([(e, c)]))
    }

    fn add(mut self, o: &Poly) -> Self {
        for (e, c) in &o.0 {
            *self.0.entry(e.clone()).or_insert(0.0) += c;
        }
        self
    }

    fn mul(&self, o: &Poly) -> Self {
        let mut out = BTreeMap::new();
        for (e1, c1) in &self.0 {
            for (e2, c2) in &o.0 {
                let e: Vec<u32> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                *out.entry(e).or_insert(0.0) += c1 * c2;
            }
        }
        Poly(out)
    }

    /// Gaussian expectation from E[z^n] = (n-1)!! for even n (Isserlis).
    fn expect(&self) -> f64 {
        let m = |n: u32| if n % 2 == 1 { 0.0 } else { (1..n).step_by(2).map(|x| x as f64).product::<f64>() };
        self.0.iter().map(|(e, c)| c * e.iter().map(|&n| m(n)).product::<f64>()).sum()
    }
}

/// E[g^power <h, u>] by exact expansion.
fn isserlis_moment(g: &Poly, k: usize, u: &[f64], power: usize) -> f64 {
    let mut acc = Poly::monomial(k, &[], 1.0);
    for _ in 0..power {
        acc = acc.mul(g);
    }
    let lin = (0..k).fold(Poly(BTreeMap::new()), |p, i| p.add(&Poly::monomial(k, &[(i, 1)], u[i])));
    acc.mul(&lin).expect()
}

fn he3_poly() -> Poly {
    Poly::monomial(1, &[(0, 3)], 1.0).add(&Poly::monomial(1, &[(0, 1)], -3.0))
}

fn staircase3_poly() -> Poly {
    Poly::monomial(3, &[(0, 1)], 1.0)
        .add(&Poly::monomial(3, &[(0, 1), (1, 1)], 1.0))
        .add(&Poly::monomial(3, &[(0, 1), (1, 1), (2, 1)], 1.0))
}

fn product3_poly() -> Poly {
    Poly::monomial(3, &[(0, 1), (1, 1), (2, 1)], 1.0)
}

fn quad(t: &TargetFunction, u: &[f64], k: usize) -> f64 {
    moment_quadrature(t, &Direction::new(u).unwrap(), k).unwrap().value
}

#[test]
fn he3_third_moment_is_324() {
    let t = targets::resolve("he3").unwrap();
    assert_eq!(isserlis_moment(&he3_poly(), 1, &[1.0], 3), 324.0);
    assert!((quad(&t, &[1.0], 3) - 324.0).abs() < 1e-6);
    for k in 1..=6 {
        let want = isserlis_moment(&he3_poly(), 1, &[1.0], k);
        assert!((quad(&t, &[1.0], k) - want).abs() < 1e-6 * want.abs().max(1.0), "k = {k}");
    }
}

#[test]
fn staircase_second_and_third_coordinates_at_power_two() {
    let t = targets::resolve("staircase3").unwrap();
    for axis in [1, 2] {
        let mut u = vec![0.0; 3];
        u[axis] = 1.0;
        assert_eq!(isserlis_moment(&staircase3_poly(), 3, &u, 2), 2.0);
        assert!((quad(&t, &u, 2) - 2.0).abs() < 1e-6);
        assert!(quad(&t, &u, 1).abs() < 1e-6);
    }
    // every moment up to 4 against the expansion, on all axes and a generic direction
    let g = [0.3, -0.5, 0.81];
    let n = (g.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let gn: Vec<f64> = g.iter().map(|x| x / n).collect();
    for u in [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], gn] {
        for k in 1..=4 {
            let want = isserlis_moment(&staircase3_poly(), 3, &u, k);
            assert!((quad(&t, &u, k) - want).abs() < 1e-6 * want.abs().max(1.0), "{u:?} k = {k}");
        }
    }
}

#[test]
fn product_axis_and_diagonal_vanish_up_to_eight() {
    let t: TargetFunction = "product:1,2,3".parse().unwrap();
    let s = 1.0 / 3f64.sqrt();
    for u in [vec![1.0, 0.0, 0.0], vec![s, s, s]] {
        for k in 1..=8 {
            assert_eq!(isserlis_moment(&product3_poly(), 3, &u, k), 0.0);
            assert!(quad(&t, &u, k).abs() < 1e-6, "{u:?} k = {k}");
        }
        let v = classify_direction(&t, &Direction::new(&u).unwrap(), &ClassifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::HardUpToK);
        assert_eq!(v.symmetry.ortho_even, Some(true));
    }
}

#[test]
fn he4_vanishes_up_to_eight() {
    let t = targets::resolve("he4").unwrap();
    let he4 = Poly::monomial(1, &[(0, 4)], 1.0)
        .add(&Poly::monomial(1, &[(0, 2)], -6.0))
        .add(&Poly::monomial(1, &[], 3.0));
    for k in 1..=8 {
        assert_eq!(isserlis_moment(&he4, 1, &[1.0], k), 0.0);
        // roundoff grows with E[|He4|^k |z|], so compare against the relative floor
        let m = moment_quadrature(&t, &Direction::new(&[1.0]).unwrap(), k).unwrap();
        assert!(!m.is_nonzero(), "k = {k}: {} vs threshold {}", m.value, m.threshold);
    }
    let v = classify_direction(&t, &Direction::new(&[1.0]).unwrap(), &ClassifyOptions::default()).unwrap();
    assert_eq!((v.status, v.symmetry.even), (Status::HardUpToK, true));
}

#[test]
fn odd_hermite_links_have_a_nonzero_third_moment() {
    for j in [3, 5, 7] {
        let t: TargetFunction = format!("single:he{j}").parse().unwrap();
        let m = moment_functional(&t, &Direction::new(&[1.0]).unwrap(), 3, 100_000, 0).unwrap();
        assert!(m.is_nonzero(), "He{j}: {}", m.value);
    }
}

#[test]
fn quadrature_agrees_with_monte_carlo_on_every_registry_target() {
    for (name, t) in targets::registry() {
        let k = t.k();
        // Beyond degree 6 the integrand's variance involves Gaussian moments of
        // order 20 and more; the sample standard error is then unreliable.
        let max_power = t.polynomial_degree().map_or(3, |deg| (6 / deg).clamp(1, 3));
        for i in 0..k {
            let dir = Direction::axis(k, i).unwrap();
            for power in 1..=max_power {
                let q = moment_quadrature(&t, &dir, power).unwrap().value;
                let mc = moment_mc(&t, &dir, power, 100_000, 5).unwrap();
                assert!(
                    (q - mc.value).abs() <= 4.0 * mc.stderr + 1e-12,
                    "{name} e{} k = {power}: quad {q} vs mc {} +- {}",
                    i + 1,
                    mc.value,
                    mc.stderr
                );
            }
        }
    }
}

#[test]
fn symmetric_directions_have_vanishing_moments() {
    let mut witnessed = 0;
    for (name, t) in targets::registry() {
        let k = t.k();
        let s = 1.0 / (k as f64).sqrt();
        let mut dirs: Vec<Direction> = (0..k).map(|i| Direction::axis(k, i).unwrap()).collect();
        dirs.push(Direction::new(&vec![s; k]).unwrap());
        if k == 2 {
            dirs.push(Direction::new(&[-s, s]).unwrap());
        }
        for dir in dirs {
            let even = is_even_symmetric(&t, &dir, 200, 1e-9, 0).unwrap();
            let ortho = k <= 6 && is_ortho_even_symmetric(&t, &dir, None, 200, 1e-9, 0).unwrap().is_some();
            if even || ortho {
                witnessed += 1;
                for power in 1..=8 {
                    let m = moment_functional(&t, &dir, power, 100_000, 0).unwrap();
                    assert!(!m.is_nonzero(), "{name} {:?} k = {power}: {}", dir.u(), m.value);
                }
            }
        }
    }
    // he4, the committee's antisymmetric direction and the product coordinates at least
    assert!(witnessed >= 5, "{witnessed}");
}

#[test]
fn committee_difference_direction_is_even() {
    let t = targets::resolve("committee").unwrap();
    let s = 1.0 / 2f64.sqrt();
    let dir = Direction::new(&[-s, s]).unwrap();
    assert!(is_even_symmetric(&t, &dir, 200, 1e-9, 0).unwrap());
    let v = classify_direction(&t, &dir, &ClassifyOptions::default()).unwrap();
    assert_eq!(v.status, Status::HardUpToK);
}

#[test]
fn zero_k_max_is_rejected() {
    let t = targets::resolve("he3").unwrap();
    let opts = ClassifyOptions { k_max: 0, ..Default::default() };
    assert!(classify_direction(&t, &Direction::new(&[1.0]).unwrap(), &opts).is_err());
    assert_eq!(hardness::DEFAULT_K_MAX, 8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn status_ignores_sign_of_direction(u in prop::collection::vec(-1.0f64..1.0, 3)) {
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let t = targets::resolve("staircase3").unwrap();
        let opts = ClassifyOptions { k_max: 4, ortho_search: false, ..Default::default() };
        let dir = Direction::new(&u).unwrap();
        let a = classify_direction(&t, &dir, &opts).unwrap();
        let b = classify_direction(&t, &dir.negated(), &opts).unwrap();
        prop_assert_eq!(a.status, b.status);
        prop_assert_eq!(a.witness_k, b.witness_k);
        for (x, y) in a.moments.iter().zip(&b.moments) {
            prop_assert!((x.1 + y.1).abs() <= 1e-9 * x.1.abs().max(1.0));
        }
    }
}
