//! The manufactured source against forward-mode automatic differentiation of
//! `phi0 = A prod cos(4 pi x_i)`.

use std::ops::{Add, Mul, Neg, Sub};

use chdg::forms::{manufactured_forcing, PhysicalParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn cst(v: f64) -> Self;
    fn cos(self) -> Self;
    fn sin(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
}

#[derive(Clone, Copy)]
struct Dual<T> {
    v: T,
    d: T,
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual { v: -self.v, d: -self.d }
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn cst(v: f64) -> Self {
        Dual { v: T::cst(v), d: T::cst(0.0) }
    }
    fn cos(self) -> Self {
        Dual {
            v: self.v.cos(),
            d: -(self.v.sin() * self.d),
        }
    }
    fn sin(self) -> Self {
        Dual {
            v: self.v.sin(),
            d: self.v.cos() * self.d,
        }
    }
}

/// Lifts `x` so that the result's `d` part is the derivative along axis `i`.
fn seed<T: Scalar>(x: &[T], i: usize) -> Vec<Dual<T>> {
    x.iter()
        .enumerate()
        .map(|(j, &v)| Dual {
            v,
            d: T::cst(if i == j { 1.0 } else { 0.0 }),
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Case {
    amplitude: f64,
    cn: f64,
    pe_inv: f64,
}

fn phi<T: Scalar>(c: Case, x: &[T]) -> T {
    let k = 4.0 * std::f64::consts::PI;
    x.iter().fold(T::cst(c.amplitude), |acc, &xi| acc * (T::cst(k) * xi).cos())
}

fn laplacian<T: Scalar>(c: Case, x: &[T]) -> T {
    (0..x.len()).fold(T::cst(0.0), |acc, i| {
        let inner: Vec<Dual<T>> = seed(x, i);
        let outer: Vec<Dual<Dual<T>>> = seed(&inner, i);
        acc + phi(c, &outer).d.d
    })
}

fn chemical_potential<T: Scalar>(c: Case, x: &[T]) -> T {
    let p = phi(c, x);
    p * p * p - p - T::cst(c.cn * c.cn) * laplacian(c, x)
}

fn flux<T: Scalar>(c: Case, x: &[T], i: usize) -> T {
    let p = phi(c, x);
    let mobility = T::cst(1.0) - p * p;
    mobility * chemical_potential(c, &seed(x, i)).d
}

/// `-Pe^{-1} div(M grad upsilon)`, the source keeping `phi0` stationary.
fn oracle(c: Case, x: &[f64]) -> f64 {
    let div: f64 = (0..x.len()).map(|i| flux(c, &seed(x, i), i).d).sum();
    -c.pe_inv * div
}

#[test]
fn forcing_matches_automatic_differentiation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for dim in 2..=3 {
        for amplitude in [0.1, 0.6, 1.0] {
            let params = PhysicalParams::new(0.1, 0.3, 1e-20, 5.0, dim).unwrap();
            let case = Case {
                amplitude,
                cn: params.cn,
                pe_inv: params.pe_inv(),
            };
            let s = manufactured_forcing(&params, amplitude);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let mut x = [0.0; 3];
                for xi in x.iter_mut().take(dim) {
                    *xi = rng.random_range(0.0..1.0);
                }
                let phi0 = phi(case, &x[..dim]);
                if amplitude == 1.0 && 1.0 - phi0 * phi0 < 1e-6 {
                    // The floored mobility is not differentiable there.
                    continue;
                }
                worst = worst.max((s(&x) - oracle(case, &x[..dim])).abs());
            }
            assert!(worst < 1e-10, "d={dim} A={amplitude}: residual {worst:e}");
        }
    }
}

#[test]
fn forcing_vanishes_at_the_saddle_points() {
    // phi0 and its gradient vanish where every cosine does.
    let params = PhysicalParams::new(0.1, 0.3, 1e-20, 5.0, 2).unwrap();
    let s = manufactured_forcing(&params, 0.6);
    for x in [[0.125, 0.125, 0.0], [0.375, 0.625, 0.0]] {
        assert!(s(&x).abs() < 1e-10, "{}", s(&x));
    }
}

#[test]
fn forcing_has_half_unit_period() {
    let params = PhysicalParams::new(0.1, 0.3, 1e-20, 5.0, 2).unwrap();
    let s = manufactured_forcing(&params, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), 0.0];
        let y = [x[0] + 0.5, x[1], 0.0];
        assert!((s(&x) - s(&y)).abs() < 1e-8 * s(&x).abs().max(1.0));
    }
}
