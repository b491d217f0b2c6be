//! Independent reference implementations shared by the test targets.

use drgrade::attribution::ScoreModel;
use drgrade::Result;

/// Per-sample counting, straight from the definitions.
pub struct BruteForce {
    pub sens: [Option<f64>; 5],
    pub spec: [Option<f64>; 5],
    pub prec: [Option<f64>; 5],
    pub acc: f64,
}

pub fn brute_force(pairs: &[(usize, usize)]) -> BruteForce {
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let mut sens = [None; 5];
    let mut spec = [None; 5];
    let mut prec = [None; 5];
    for c in 0..5 {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for &(t, p) in pairs {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        sens[c] = rate(tp, tp + fn_);
        spec[c] = rate(tn, tn + fp);
        prec[c] = rate(tp, tp + fp);
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    BruteForce {
        sens,
        spec,
        prec,
        acc: correct as f64 / pairs.len() as f64,
    }
}

pub fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
pub fn pair_count_auc(scores: &[(bool, f64)]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.0).map(|s| s.1).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.0).map(|s| s.1).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// `F_c(x) = w_c . x + b_c`.
pub struct Linear {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl ScoreModel for Linear {
    fn input_len(&self) -> usize {
        self.w[0].len()
    }

    fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .w
            .iter()
            .zip(&self.b)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect())
    }

    fn target_gradients(&self, points: &[f64], rows: usize, target: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.input_len();
        let scores = points.chunks(d).map(|p| self.scores(p).map(|s| s[target])).collect::<Result<_>>()?;
        Ok((scores, self.w[target].repeat(rows)))
    }
}

