//! Brute-force reference for the contextual retrieval targets.
//!
//! Deliberately naive and self-contained: an exhaustive pairwise scan per
//! object and search, sharing no code with the sampler in [`crate::task`].

/// Targets `y_i = Σ_s α_s · z̃[j][r_is]`, where `j` is the object closest
/// to `i` in search feature `s` (excluding `i`; ties go to the lowest
/// index).
///
/// `z` is `N×S`, `ztilde` is `N×R`, `prefs` is `N×S` retrieval indices.
pub fn oracle_targets(z: &[Vec<f64>], ztilde: &[Vec<f64>], prefs: &[Vec<usize>], alpha: &[f64]) -> Vec<f64> {
    let n = z.len();
    assert!(n >= 2, "the retrieval task needs at least two objects");
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut total = 0.0;
        for (s, a) in alpha.iter().enumerate() {
            let winner = nearest_other(z, i, s);
            total += a * ztilde[winner][prefs[i][s]];
        }
        y.push(total);
    }
    y
}

/// Index of the closest object to `i` along feature `s`, lowest index on ties.
pub fn nearest_other(z: &[Vec<f64>], i: usize, s: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_dist = f64::INFINITY;
    for j in 0..z.len() {
        if j == i {
            continue;
        }
        let dist = (z[i][s] - z[j][s]).abs();
        if best == usize::MAX || dist < best_dist {
            best = j;
            best_dist = dist;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_gives_zero_targets() {
        let z = vec![vec![0.1, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]];
        let zt = vec![vec![1.0; 4]; 3];
        let prefs = vec![vec![0, 1]; 3];
        assert_eq!(oracle_targets(&z, &zt, &prefs, &[0.0, 0.0]), vec![0.0; 3]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let z = vec![vec![1.0], vec![1.0], vec![1.0], vec![0.0]];
        assert_eq!(nearest_other(&z, 0, 0), 1);
        assert_eq!(nearest_other(&z, 1, 0), 0);
        assert_eq!(nearest_other(&z, 2, 0), 0);
        // Object 3 is equidistant (1.0) from all three; lowest wins.
        assert_eq!(nearest_other(&z, 3, 0), 0);
    }

    #[test]
    fn hand_computed_three_object_instance() {
        // Search feature 0: 0.0, 0.3, 1.0  -> winners 1, 0, 1
        // Search feature 1: 2.0, -1.0, 1.5 -> winners 2, 2, 0
        let z = vec![vec![0.0, 2.0], vec![0.3, -1.0], vec![1.0, 1.5]];
        let zt = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![1.1, 1.2, 1.3, 1.4],
            vec![2.1, 2.2, 2.3, 2.4],
        ];
        let prefs = vec![vec![3, 0], vec![1, 2], vec![0, 3]];
        let alpha = [0.5, -2.0];
        // y0 = 0.5·z̃[1][3] − 2·z̃[2][0] = 0.7 − 4.2
        // y1 = 0.5·z̃[0][1] − 2·z̃[2][2] = 0.1 − 4.6
        // y2 = 0.5·z̃[1][0] − 2·z̃[0][3] = 0.55 − 0.8
        let y = oracle_targets(&z, &zt, &prefs, &alpha);
        let want = [0.7 - 4.2, 0.1 - 4.6, 0.55 - 0.8];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }
}
