//! Brute-force metric references.

/// Mean over all positive-negative pairs of 1 (ranked correctly), 1/2 (tie) or 0.
pub fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                if si > sj {
                    sum += 1.0;
                } else if si == sj {
                    sum += 0.5;
                }
            }
        }
    }
    sum / pairs as f64
}

/// Average precision with every distinct score as a threshold, counted from scratch.
pub fn brute_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|l| **l == 1).count() as u64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_tp = 0u64;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as u64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as u64;
        ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap
}
