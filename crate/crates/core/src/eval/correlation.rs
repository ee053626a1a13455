//! Rank and linear correlation coefficients.

use super::EvalError;

fn check(a: &[f64], b: &[f64], min: usize) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < min {
        return Err(EvalError::TooShort { got: a.len(), need: min });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// Pearson correlation of raw values.
pub fn plcc(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check(a, b, 3)?;
    pearson(a, b)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check(a, b, 3)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Counts inversions of `v` while merge-sorting it.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Sum of t(t-1)/2 over runs of equal values in a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for x in sorted {
        if prev.as_ref() == Some(&x) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(x);
    }
    total + run * (run + 1) / 2
}

/// Kendall tau-b in O(n log n).
pub fn krcc(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check(a, b, 2)?;
    let n = a.len() as u64;
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let tot = n * (n - 1) / 2;
    let a_ties = tied_pairs(idx.iter().map(|&i| a[i]));
    let joint_ties = tied_pairs(idx.iter().map(|&i| (a[i], b[i])));
    let mut bs: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = Vec::with_capacity(bs.len());
    let discordant = count_inversions(&mut bs, &mut buf);
    let b_ties = tied_pairs(bs.iter().copied());
    if tot == a_ties || tot == b_ties {
        return Err(EvalError::ZeroVariance);
    }
    let s = tot as f64 - a_ties as f64 - b_ties as f64 + joint_ties as f64 - 2.0 * discordant as f64;
    let tau = s / ((tot - a_ties) as f64).sqrt() / ((tot - b_ties) as f64).sqrt();
    Ok(tau.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rank_oracle(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let eq = v.iter().filter(|y| *y == x).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }

    fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    fn kendall_oracle(a: &[f64], b: &[f64]) -> f64 {
        let (mut c, mut d, mut ta, mut tb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
                if a[i] == a[j] && b[i] == b[j] {
                    continue;
                } else if a[i] == a[j] {
                    ta += 1.0;
                } else if b[i] == b[j] {
                    tb += 1.0;
                } else if s > 0.0 {
                    c += 1.0;
                } else {
                    d += 1.0;
                }
            }
        }
        (c - d) / ((c + d + ta) * (c + d + tb)).sqrt()
    }

    #[test]
    fn srcc_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((srcc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().rev().copied().collect();
        assert!((srcc(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        let b = [1.0, 3.0, 2.0, 5.0, 4.0];
        let want = pearson_oracle(&rank_oracle(&a), &rank_oracle(&b));
        assert!((srcc(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.8).abs() < 1e-12);
    }

    #[test]
    fn krcc_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(krcc(&a, &a).unwrap(), 1.0);
        assert_eq!(krcc(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let b = [1.0, 3.0, 2.0, 4.0];
        // 5 concordant, 1 discordant of 6
        assert!((krcc(&a, &b).unwrap() - kendall_oracle(&a, &b)).abs() < 1e-12);
        assert!((krcc(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn plcc_examples() {
        let a = [0.0, 1.0, 2.0];
        let aff: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((plcc(&a, &aff).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&a, &[0.0, -1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        let b = [0.0, 1.0, 3.0];
        // deviations: sum dx*dy = 3, sum dx^2 = 2, sum dy^2 = 14/3
        let want = 3.0 / (2.0f64.sqrt() * (14.0f64 / 3.0).sqrt());
        assert!((plcc(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::ZeroVariance)));
        assert!(matches!(krcc(&[1.0, 2.0], &[3.0, 3.0]), Err(EvalError::ZeroVariance)));
        assert!(matches!(plcc(&[1.0, 2.0], &[1.0, 2.0]), Err(EvalError::TooShort { .. })));
        assert!(matches!(plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(3, 2))));
    }

    fn tied_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0i32..5, n).prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn krcc_matches_pair_counting((a, b) in (3usize..9).prop_flat_map(|n| (tied_vec(n), tied_vec(n)))) {
            let want = kendall_oracle(&a, &b);
            match krcc(&a, &b) {
                Ok(t) => prop_assert!((t - want).abs() <= 1e-12),
                Err(_) => prop_assert!(!want.is_finite()),
            }
        }

        #[test]
        fn srcc_matches_two_step_oracle((a, b) in (3usize..9).prop_flat_map(|n| (tied_vec(n), tied_vec(n)))) {
            let want = pearson_oracle(&rank_oracle(&a), &rank_oracle(&b));
            match srcc(&a, &b) {
                Ok(r) => prop_assert!((r - want).abs() <= 1e-12),
                Err(_) => prop_assert!(!want.is_finite()),
            }
        }

        #[test]
        fn monotone_invariance(a in prop::collection::vec(-10.0f64..10.0, 5..20), b in prop::collection::vec(-10.0f64..10.0, 20)) {
            let b = &b[..a.len()];
            let fa: Vec<f64> = a.iter().map(|x| x.exp()).collect();
            if let (Ok(r1), Ok(r2)) = (srcc(&a, b), srcc(&fa, b)) {
                prop_assert!((r1 - r2).abs() < 1e-12);
            }
            if let (Ok(t1), Ok(t2)) = (krcc(&a, b), krcc(&fa, b)) {
                prop_assert!((t1 - t2).abs() < 1e-12);
            }
            let la: Vec<f64> = a.iter().map(|x| 3.0 * x + 7.0).collect();
            if let (Ok(p1), Ok(p2)) = (plcc(&a, b), plcc(&la, b)) {
                prop_assert!((p1 - p2).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&p1));
            }
        }
    }
}
