//! Gauss-Legendre rules on `[-1, 1]` and their tensor products.

use std::f64::consts::PI;

/// 1D Gauss-Legendre rule with `n` nodes, exact for degree `2n - 1`.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes used for the volume rule of a cell of degree `p`.
    pub fn volume_points(p: usize) -> usize {
        2 * p + 1
    }
}

/// Classical Legendre polynomial `P_n(x)` and its derivative.
pub fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = if (1.0 - x * x).abs() < 1e-300 {
        // P_n'(±1) = (±1)^{n+1} n(n+1)/2
        let s = if x > 0.0 || n % 2 == 1 { 1.0 } else { -1.0 };
        s * (n * (n + 1)) as f64 / 2.0
    } else {
        n as f64 * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, d)
}

/// Tensor-product points and weights of `rule` in `dim` dimensions on `[-1, 1]^dim`,
/// axis 0 running fastest.
pub fn tensor_rule(rule: &GaussRule, dim: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n = rule.len();
    let total = n.pow(dim as u32);
    let mut pts = Vec::with_capacity(total);
    let mut wts = Vec::with_capacity(total);
    for flat in 0..total {
        let mut p = [0.0; 3];
        let mut w = 1.0;
        let mut rest = flat;
        for v in p.iter_mut().take(dim) {
            let i = rest % n;
            rest /= n;
            *v = rule.nodes[i];
            w *= rule.weights[i];
        }
        pts.push(p);
        wts.push(w);
    }
    (pts, wts)
}
