//! Plain f64 reference formulas, written independently of the library.

pub fn log_softmax_t(row: &[f64], t: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|v| v / t).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax_t(row: &[f64], t: f64) -> Vec<f64> {
    log_softmax_t(row, t).into_iter().map(f64::exp).collect()
}

/// Batch-mean `KL(softmax(t/T) ‖ softmax(s/T))`.
pub fn kl(teacher: &[Vec<f64>], student: &[Vec<f64>], t: f64) -> f64 {
    let mut total = 0.0;
    for (a, b) in teacher.iter().zip(student) {
        let lp = log_softmax_t(a, t);
        let lq = log_softmax_t(b, t);
        total += lp
            .iter()
            .zip(&lq)
            .map(|(p, q)| p.exp() * (p - q))
            .sum::<f64>();
    }
    total / teacher.len() as f64
}

/// `∂KL/∂s = (softmax(s/T) − softmax(t/T)) / (T·N)`.
pub fn kl_grad(teacher: &[Vec<f64>], student: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    let n = teacher.len() as f64;
    teacher
        .iter()
        .zip(student)
        .map(|(a, b)| {
            let p = softmax_t(a, t);
            let q = softmax_t(b, t);
            q.iter().zip(&p).map(|(q, p)| (q - p) / (t * n)).collect()
        })
        .collect()
}

/// Weighted cross-entropy normalized by the weight mass of the batch.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let lp = log_softmax_t(row, 1.0);
        num -= weights[y] * lp[y];
        den += weights[y];
    }
    num / den
}

pub fn combined(
    student: &[Vec<f64>],
    teacher: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
    t: f64,
    alpha: f64,
) -> f64 {
    (1.0 - alpha) * cross_entropy(student, labels, weights)
        + alpha * t * t * kl(teacher, student, t)
}
