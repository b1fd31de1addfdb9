//! Scalar scoring over raw (gold, predicted) pairs, kept as exact integer
//! counts until the final division.

/// Per-class `(tp, fp, fn)` with gold rows of `excluded` dropped; a retained
/// pair predicted as `excluded` only costs recall.
pub fn counts(pairs: &[(usize, usize)], c: usize, excluded: Option<usize>) -> Vec<(u64, u64, u64)> {
    let mut out = vec![(0, 0, 0); c];
    for &(g, p) in pairs {
        if Some(g) == excluded {
            continue;
        }
        if g == p {
            out[g].0 += 1;
        } else {
            out[g].2 += 1;
            if Some(p) != excluded {
                out[p].1 += 1;
            }
        }
    }
    out
}

/// `2tp / (2tp + fp + fn)`, 0 for an empty denominator.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

pub fn micro(pairs: &[(usize, usize)], c: usize, excluded: Option<usize>) -> f64 {
    let (tp, fp, fn_) = counts(pairs, c, excluded)
        .into_iter()
        .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    f1(tp, fp, fn_)
}

pub fn macro_(pairs: &[(usize, usize)], c: usize, excluded: Option<usize>) -> f64 {
    let per = counts(pairs, c, excluded);
    let kept: Vec<f64> = (0..c)
        .filter(|&k| Some(k) != excluded)
        .map(|k| f1(per[k].0, per[k].1, per[k].2))
        .collect();
    kept.iter().sum::<f64>() / kept.len() as f64
}
