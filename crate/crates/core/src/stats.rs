pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Standard error of the mean of a sample.
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Weighted mean `(1/n) Σ r_j v_j`.
pub fn weighted_mean(r: &[f64], v: &[f64]) -> f64 {
    r.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / v.len() as f64
}
