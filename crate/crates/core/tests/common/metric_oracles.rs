use cessl::metrics::PredictionSet;

fn pos(p: &PredictionSet, i: usize, c: usize) -> bool {
    p.truths().get(i, c) >= 0.5
}

pub fn oracle_ranking_loss(p: &PredictionSet) -> f64 {
    let (n, c) = (p.samples(), p.classes());
    let mut total = 0.0;
    for i in 0..n {
        let (mut bad, mut pairs) = (0, 0);
        for a in 0..c {
            for b in 0..c {
                if pos(p, i, a) && !pos(p, i, b) {
                    pairs += 1;
                    if p.probs().get(i, b) >= p.probs().get(i, a) {
                        bad += 1;
                    }
                }
            }
        }
        if pairs > 0 {
            total += bad as f64 / pairs as f64;
        }
    }
    total / n as f64
}

pub fn oracle_coverage(p: &PredictionSet) -> f64 {
    let (n, c) = (p.samples(), p.classes());
    let mut total = 0.0;
    for i in 0..n {
        // smallest k such that the top-k set (ties included) holds every positive
        let mut depth = 0;
        for a in 0..c {
            if pos(p, i, a) {
                let above = (0..c).filter(|&b| p.probs().get(i, b) >= p.probs().get(i, a)).count();
                depth = depth.max(above);
            }
        }
        total += depth as f64;
    }
    total / n as f64
}

fn per_class<F: Fn(usize) -> Option<f64>>(c: usize, f: F) -> f64 {
    let kept: Vec<f64> = (0..c).filter_map(f).collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

pub fn oracle_auc(p: &PredictionSet) -> f64 {
    per_class(p.classes(), |c| {
        let (mut wins, mut pairs) = (0.0, 0);
        for i in 0..p.samples() {
            for j in 0..p.samples() {
                if pos(p, i, c) && !pos(p, j, c) {
                    pairs += 1;
                    let (si, sj) = (p.probs().get(i, c), p.probs().get(j, c));
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        (pairs > 0).then(|| wins / pairs as f64)
    })
}

pub fn oracle_map(p: &PredictionSet) -> f64 {
    per_class(p.classes(), |c| {
        let positives: Vec<usize> = (0..p.samples()).filter(|&i| pos(p, i, c)).collect();
        if positives.is_empty() {
            return None;
        }
        // precision at each positive's own score used as the threshold
        let sum: f64 = positives
            .iter()
            .map(|&i| {
                let t = p.probs().get(i, c);
                let kept = (0..p.samples()).filter(|&j| p.probs().get(j, c) >= t).count();
                let hits = positives.iter().filter(|&&j| p.probs().get(j, c) >= t).count();
                hits as f64 / kept as f64
            })
            .sum();
        Some(sum / positives.len() as f64)
    })
}

pub fn oracle_counts(p: &PredictionSet, c: usize, thr: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..p.samples() {
        match (p.probs().get(i, c) >= thr, pos(p, i, c)) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

pub fn oracle_f(p: &PredictionSet, beta: f64, thr: f64) -> f64 {
    per_class(p.classes(), |c| {
        let (tp, fp, fn_) = oracle_counts(p, c, thr);
        let b2 = beta * beta;
        (tp + fn_ > 0.0).then(|| (1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn_ + fp))
    })
}

pub fn oracle_g(p: &PredictionSet, beta: f64, thr: f64) -> f64 {
    per_class(p.classes(), |c| {
        let (tp, fp, fn_) = oracle_counts(p, c, thr);
        (tp + fn_ > 0.0).then(|| tp / (tp + fp + beta * fn_))
    })
}
