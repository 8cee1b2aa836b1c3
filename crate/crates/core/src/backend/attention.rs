//! Single-head cross-attention `softmax(Q Kᵀ / sqrt(d')) V` and its backward pass.

use ndarray::{Array2, Axis};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Attention output (`queries × d_v`) and the softmax weights (`queries × keys`).
pub fn cross_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    scale_dim: usize,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (scale_dim as f64).sqrt();
    let scores = queries.dot(&keys.t()) * scale;
    let weights = softmax_rows(&scores);
    (weights.dot(values), weights)
}

pub struct AttentionGrads {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

/// Backpropagates `d_out` through [`cross_attention`] given its saved weights.
pub fn cross_attention_backward(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    weights: &Array2<f64>,
    d_out: &Array2<f64>,
    scale_dim: usize,
) -> AttentionGrads {
    let scale = 1.0 / (scale_dim as f64).sqrt();
    let d_values = weights.t().dot(d_out);
    let d_weights = d_out.dot(&values.t());
    // softmax Jacobian: ds = a * (da - <a, da>)
    let row_dot = (weights * &d_weights).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_scores = weights * &(&d_weights - &row_dot) * scale;
    AttentionGrads {
        queries: d_scores.dot(keys),
        keys: d_scores.t().dot(queries),
        values: d_values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_queries_give_uniform_weights_and_mean_values() {
        let q = Array2::<f64>::zeros((3, 2));
        let k = array![[1.0, -2.0], [0.5, 3.0], [4.0, 0.0], [-1.0, 1.0]];
        let v = array![[1.0, 2.0, 3.0], [5.0, 6.0, 7.0], [0.0, 0.0, 1.0], [2.0, -8.0, 1.0]];
        let (out, w) = cross_attention(&q, &k, &v, 2);
        for &a in &w {
            assert!((a - 0.25).abs() < 1e-15);
        }
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.axis_iter(Axis(0)) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = array![[1000.0, -1000.0, 3.0], [0.1, 0.2, 0.3]];
        for row in softmax_rows(&s).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let q = array![[0.3, -0.7], [1.1, 0.4]];
        let k = array![[0.2, 0.5], [-0.9, 0.3], [0.6, -1.2]];
        let v = array![[1.0, 0.5], [-0.3, 2.0], [0.7, -0.4]];
        let g = array![[0.9, -0.2], [0.1, 0.6]];
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let (out, _) = cross_attention(q, k, v, 4);
            (&out * &g).sum()
        };
        let (_, w) = cross_attention(&q, &k, &v, 4);
        let grads = cross_attention_backward(&q, &k, &v, &w, &g, 4);
        let h = 1e-6;
        for (which, analytic) in [(0, &grads.queries), (1, &grads.keys), (2, &grads.values)] {
            for idx in ndarray::indices(analytic.raw_dim()) {
                let mut args = [q.clone(), k.clone(), v.clone()];
                args[which][idx] += h;
                let plus = loss(&args[0], &args[1], &args[2]);
                args[which][idx] -= 2.0 * h;
                let minus = loss(&args[0], &args[1], &args[2]);
                let numeric = (plus - minus) / (2.0 * h);
                assert!((numeric - analytic[idx]).abs() < 1e-8, "{which} {idx:?}");
            }
        }
    }
}
