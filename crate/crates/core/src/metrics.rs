//! Attention quality measures.

/// Area under the ROC curve by its pairwise definition: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc_pairwise(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Foreground/background summary of attention values against a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaStats {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub auc: f64,
}

impl LambdaStats {
    pub fn separation(&self) -> f64 {
        self.fg_mean - self.bg_mean
    }
}

pub fn lambda_stats(pairs: impl IntoIterator<Item = (f64, u8)>) -> LambdaStats {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (l, m) in pairs {
        if m == 1 {
            fg.push(l);
        } else {
            bg.push(l);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    LambdaStats {
        fg_mean: mean(&fg),
        bg_mean: mean(&bg),
        auc: auc_pairwise(&fg, &bg),
    }
}
