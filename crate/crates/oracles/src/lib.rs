//! Brute-force reference implementations used only by tests.
//!
//! Everything here recomputes results from first principles — exhaustive
//! path enumeration, from-scratch recounting, central differences, naive
//! triple-loop products — and deliberately shares no code with the
//! implementations it checks. Exponential time is fine; these never run in
//! the pipeline.

/// Outcome of one oracle comparison, for human-readable test reports.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub oracle: &'static str,
    pub instance: String,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {} — max deviation {:.3e} (tolerance {:.1e}): {}",
            self.oracle,
            self.instance,
            self.max_deviation,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Exhaustive linear-chain CRF quantities for an instance with `L` rows of
/// `T` emission scores: exact log-partition, the argmax path (ties toward
/// the lexicographically smallest path), and every path score.
///
/// Path score = start[t0] + sum emissions[i][ti] + sum trans[ti][ti+1]
/// + end[tL-1]. Panics if T^L > 4096.
pub fn enumerate_crf(
    emissions: &[Vec<f64>],
    transitions: &[Vec<f64>],
    start: &[f64],
    end: &[f64],
) -> CrfEnumeration {
    let len = emissions.len();
    let n_tags = start.len();
    assert!(len >= 1, "empty sequence");
    let n_paths = (n_tags as u64).checked_pow(len as u32).expect("overflow");
    assert!(n_paths <= 4096, "instance too large: {n_paths} paths");

    let mut path_scores = Vec::with_capacity(n_paths as usize);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut path = vec![0usize; len];
    for idx in 0..n_paths {
        let mut rem = idx;
        for slot in path.iter_mut() {
            *slot = (rem % n_tags as u64) as usize;
            rem /= n_tags as u64;
        }
        let mut score = start[path[0]] + emissions[0][path[0]];
        for i in 1..len {
            score += transitions[path[i - 1]][path[i]] + emissions[i][path[i]];
        }
        score += end[path[len - 1]];
        path_scores.push((path.clone(), score));
        let better = match &best {
            None => true,
            Some((bs, bp)) => score > *bs || (score == *bs && path < *bp),
        };
        if better {
            best = Some((score, path.clone()));
        }
    }

    // logsumexp over all path scores.
    let max = path_scores
        .iter()
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = max
        + path_scores
            .iter()
            .map(|(_, s)| (s - max).exp())
            .sum::<f64>()
            .ln();

    let (best_score, best_path) = best.unwrap();
    CrfEnumeration {
        log_z,
        best_path,
        best_score,
        path_scores,
    }
}

#[derive(Debug, Clone)]
pub struct CrfEnumeration {
    pub log_z: f64,
    pub best_path: Vec<usize>,
    pub best_score: f64,
    pub path_scores: Vec<(Vec<usize>, f64)>,
}

/// First `k` BPE merges computed the slow way: re-segment every word and
/// recount every adjacent pair from scratch after each merge.
///
/// Rule (mirrors the vocabulary module's documented contract): initial
/// segmentation is first char plain and the rest `##`-prefixed; pair counts
/// sum word counts once per adjacent position; the best pair has the
/// highest count with ties toward the lexicographically smaller
/// (left, right); merges apply left-to-right without overlap.
pub fn recount_merges(counts: &[(String, u64)], k: usize) -> Vec<(String, String)> {
    let mut words: Vec<(Vec<String>, u64)> = counts
        .iter()
        .filter(|(w, _)| !w.is_empty())
        .map(|(w, c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    if i == 0 {
                        ch.to_string()
                    } else {
                        format!("##{ch}")
                    }
                })
                .collect();
            (syms, *c)
        })
        .collect();
    // Deterministic word order regardless of caller ordering.
    words.sort();

    let mut merges = Vec::new();
    for _ in 0..k {
        let mut best: Option<((String, String), u64)> = None;
        // Recount everything from scratch.
        let mut tally: std::collections::BTreeMap<(String, String), u64> =
            std::collections::BTreeMap::new();
        for (syms, count) in &words {
            for w in syms.windows(2) {
                *tally.entry((w[0].clone(), w[1].clone())).or_insert(0) += count;
            }
        }
        for (pair, count) in &tally {
            let take = match &best {
                None => true,
                Some((bp, bc)) => count > bc || (count == bc && pair < bp),
            };
            if take {
                best = Some((pair.clone(), *count));
            }
        }
        let Some((pair, _)) = best else { break };

        let merged = format!(
            "{}{}",
            pair.0,
            pair.1.strip_prefix("##").unwrap_or(&pair.1)
        );
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = out;
        }
        merges.push(pair);
    }
    merges
}

/// Central-difference gradient of `f` at `x`, for the selected coordinates:
/// (f(x + eps·e) − f(x − eps·e)) / (2·eps).
pub fn numeric_gradient<F>(f: F, x: &[f64], coords: &[usize], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(coords.len());
    let mut probe = x.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Naive row-major matrix product: (m×k) · (k×n), fixed summation order.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_crf_single_step_uniform() {
        // L=1, T=2, everything zero: logZ = ln 2, best path [0] by tie-break.
        let trans = vec![vec![0.0; 2]; 2];
        let e = enumerate_crf(&[vec![0.0, 0.0]], &trans, &[0.0; 2], &[0.0; 2]);
        assert!((e.log_z - 2f64.ln()).abs() < 1e-12);
        assert_eq!(e.best_path, vec![0]);
        assert_eq!(e.path_scores.len(), 2);
    }

    #[test]
    fn enumerate_crf_l1_logz_is_ln_t() {
        for t in 2..=4 {
            let e = enumerate_crf(
                &[vec![0.0; t]],
                &vec![vec![0.0; t]; t],
                &vec![0.0; t],
                &vec![0.0; t],
            );
            assert!((e.log_z - (t as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn enumerate_crf_prefers_high_emission_path() {
        let trans = vec![vec![0.0; 2]; 2];
        let e = enumerate_crf(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &trans,
            &[0.0; 2],
            &[0.0; 2],
        );
        assert_eq!(e.best_path, vec![0, 1]);
        assert!((e.best_score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn recount_merges_hand_example() {
        let counts = vec![("aa".to_string(), 3), ("ab".to_string(), 1)];
        let merges = recount_merges(&counts, 1);
        assert_eq!(merges, vec![("a".to_string(), "##a".to_string())]);
    }

    #[test]
    fn recount_merges_empty() {
        assert!(recount_merges(&[], 5).is_empty());
    }

    #[test]
    fn numeric_gradient_of_square() {
        let g = numeric_gradient(|x| x[0] * x[0], &[3.0], &[0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn numeric_gradient_of_quadratic_form() {
        // f(x) = x' A x with A = [[2,1],[0,3]]; grad = (A + A') x.
        let f = |x: &[f64]| 2.0 * x[0] * x[0] + x[0] * x[1] + 3.0 * x[1] * x[1];
        let x = [1.5, -2.0];
        let g = numeric_gradient(f, &x, &[0, 1], 1e-6);
        assert!((g[0] - (4.0 * x[0] + x[1])).abs() < 1e-7);
        assert!((g[1] - (x[0] + 6.0 * x[1])).abs() < 1e-7);
    }

    #[test]
    fn naive_matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(naive_matmul(&a, &eye, 2, 2, 2), a);
    }
}
