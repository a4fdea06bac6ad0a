use ndarray::{Array2, Axis};

/// Mean softmax cross-entropy and its gradient with respect to `logits`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (b, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss += z.ln() + max - row[labels[b]];
        for (o, e) in exp.iter().enumerate() {
            grad[[b, o]] = e / z / batch as f64;
        }
        grad[[b, labels[b]]] -= 1.0 / batch as f64;
    }
    (loss / batch as f64, grad)
}

/// Squared error summed over outputs, averaged over the batch.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let batch = pred.nrows() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / batch;
    (loss, diff * (2.0 / batch))
}

pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (o, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = o;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}
