//! Small numerical helpers shared across modules.

use crate::expr::C64;

/// Finite-difference weights for the `order`-th derivative at `x0` over
/// arbitrary distinct nodes (Fornberg's recursion).
pub fn fornberg_weights(x0: f64, nodes: &[f64], order: usize) -> Vec<f64> {
    let n = nodes.len();
    assert!(n > order, "need more nodes than the derivative order");
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// First derivative of samples on a (possibly nonuniform) increasing grid
/// using 5-point windows, centered where possible.
pub fn sampled_derivative<T>(ts: &[f64], values: &[T]) -> Vec<T>
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let n = ts.len();
    assert_eq!(n, values.len());
    if n < 2 {
        return values.iter().map(|v| v.clone() * 0.0).collect();
    }
    let width = n.min(5);
    (0..n)
        .map(|i| {
            let start = i.saturating_sub(width / 2).min(n - width);
            let window = &ts[start..start + width];
            let w = fornberg_weights(ts[i], window, 1);
            (1..width).fold(values[start].clone() * w[0], |acc, k| acc + values[start + k].clone() * w[k])
        })
        .collect()
}

/// Sup norm of a complex slice.
pub fn sup_norm(v: &[C64]) -> f64 {
    v.iter().fold(0.0, |m, z| m.max(z.norm()))
}
