//! Correlation, classification and ordinal-distance metrics.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

fn check_pair(x: usize, y: usize) -> Result<()> {
    if x != y {
        return Err(Error::InvalidRequest(format!(
            "series lengths differ: {x} vs {y}"
        )));
    }
    if x == 0 {
        return Err(Error::EmptySeries);
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation. Fails on constant or single-element series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::DegenerateSeries("fewer than two samples".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSeries("constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(preds: &[T], gold: &[T]) -> Result<f64> {
    check_pair(preds.len(), gold.len())?;
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Micro- and macro-averaged F1 for single-label multiclass data. Macro averages
/// over every class present in gold or predictions.
pub fn micro_macro_f1<T: Ord + Clone>(preds: &[T], gold: &[T]) -> Result<(f64, f64)> {
    check_pair(preds.len(), gold.len())?;
    let classes: BTreeSet<&T> = preds.iter().chain(gold).collect();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let mut f1_sum = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(gold) {
            match (p == *c, g == *c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fnn;
        f1_sum += f1(tp, fp, fnn);
    }
    Ok((f1(tp_all, fp_all, fn_all), f1_sum / classes.len() as f64))
}

fn f1(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// `(alignment, mse)` on the 0–3 ordinal scale, where alignment is one minus the
/// mean absolute distance over the scale span.
pub fn alignment_and_mse(preds: &[u8], gold: &[u8]) -> Result<(f64, f64)> {
    check_pair(preds.len(), gold.len())?;
    let n = preds.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&p, &g) in preds.iter().zip(gold) {
        let d = f64::from(p) - f64::from(g);
        abs += d.abs();
        sq += d * d;
    }
    Ok((1.0 - abs / n / 3.0, sq / n))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn correlation_examples() {
        assert!(close(pearson(&[1., 2., 3.], &[6., 4., 2.]).unwrap(), -1.0));
        assert!(close(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0));
        // means 2.5; cov sum 4, each variance sum 5
        assert!(close(pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(), 0.8));
        assert!(close(spearman(&[1., 2., 3.], &[1., 8., 27.]).unwrap(), 1.0));
        assert!(close(spearman(&[1., 2., 3.], &[3., 1., 2.]).unwrap(), -0.5));
        // ranks [1, 2.5, 2.5] against [1, 2, 3]
        assert!(close(spearman(&[1., 2., 2.], &[1., 2., 3.]).unwrap(), 1.5 / 3f64.sqrt()));
        assert!(matches!(pearson(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::DegenerateSeries(_))));
        assert!(matches!(pearson(&[], &[]), Err(Error::EmptySeries)));
    }

    #[test]
    fn classification_examples() {
        let (mi, ma) = micro_macro_f1(&["a", "b"], &["a", "b"]).unwrap();
        assert_eq!((mi, ma), (1.0, 1.0));
        let gold: Vec<&str> = ["A", "B", "C"].iter().flat_map(|c| [*c; 3]).collect();
        let preds = vec!["A"; 9];
        let (mi, ma) = micro_macro_f1(&preds, &gold).unwrap();
        assert!(close(mi, 1.0 / 3.0));
        assert!(close(ma, 1.0 / 6.0));
        assert_eq!(micro_macro_f1(&[1], &[1]).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1], &[2]).unwrap(), 0.0);
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(Error::EmptySeries)));
    }

    #[test]
    fn ordinal_examples() {
        assert_eq!(alignment_and_mse(&[1, 2], &[1, 2]).unwrap(), (1.0, 0.0));
        assert_eq!(alignment_and_mse(&[0], &[3]).unwrap(), (0.0, 9.0));
        assert_eq!(alignment_and_mse(&[0, 3], &[1, 1]).unwrap().1, 2.5);
    }

    fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
                proptest::collection::vec(-50.0f64..50.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariant((x, y) in series()) {
            let fy: Vec<f64> = y.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&x, &fy)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_invariant((x, y) in series(), seed: u64) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let px: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            if let (Ok(a), Ok(b)) = (pearson(&x, &y), pearson(&px, &py)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let xi: Vec<i64> = x.iter().map(|v| *v as i64).collect();
            let pxi: Vec<i64> = px.iter().map(|v| *v as i64).collect();
            let yi: Vec<i64> = y.iter().map(|v| (*v as i64).rem_euclid(4)).collect();
            let pyi: Vec<i64> = py.iter().map(|v| (*v as i64).rem_euclid(4)).collect();
            let (m1, a1) = micro_macro_f1(&xi, &yi).unwrap();
            let (m2, a2) = micro_macro_f1(&pxi, &pyi).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12 && (a1 - a2).abs() < 1e-12);
            prop_assert!((m1 - accuracy(&xi, &yi).unwrap()).abs() < 1e-12);
        }
    }
}
