use crate::{Error, Result};

/// Cross-entropy in nats per byte converted to bits per byte.
pub fn bits_per_byte(ce: f64) -> f64 {
    ce * std::f64::consts::LOG2_E
}

/// Pearson correlation; `None` when either side has zero variance or fewer than 2 points.
pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson `r` per group averaged in Fisher-z space: `tanh(mean(atanh r))`.
pub fn fisher_avg_correlation(groups: &[Vec<(f64, f64)>]) -> Result<f64> {
    let mut zs = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 3 {
            return Err(Error::Invalid(format!("group {i} has {} pairs, need at least 3", g.len())));
        }
        match pearson(g) {
            Some(r) => zs.push(r.atanh()),
            None => log::warn!("group {i} has zero variance, skipped"),
        }
    }
    if zs.is_empty() {
        return Err(Error::Empty("no group with non-zero variance".into()));
    }
    let r = (zs.iter().sum::<f64>() / zs.len() as f64).tanh();
    if r.is_nan() {
        return Err(Error::NonFinite("perfect correlations of opposite sign cannot be averaged".into()));
    }
    Ok(r)
}

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
