use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check_lengths(scores: usize, labels: usize) -> Result<()> {
    if scores != labels {
        return Err(Error::Shape(format!("{scores} scores for {labels} labels")));
    }
    Ok(())
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, with tied scores counted as half.
pub fn eval_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, tied groups sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-user AUC averaged over users with both classes: unweighted and
/// weighted by impression count.
pub fn eval_user_aucs(scores: &[f64], labels: &[u8], users: &[u64]) -> Result<(f64, f64)> {
    check_lengths(scores.len(), labels.len())?;
    check_lengths(scores.len(), users.len())?;
    let mut by_user: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &l), &u) in scores.iter().zip(labels).zip(users) {
        let e = by_user.entry(u).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    let (mut sum, mut wsum, mut n, mut w) = (0.0, 0.0, 0usize, 0usize);
    for (s, l) in by_user.values() {
        match eval_auc(s, l) {
            Ok(auc) => {
                sum += auc;
                wsum += auc * s.len() as f64;
                n += 1;
                w += s.len();
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no user has both classes"));
    }
    Ok((sum / n as f64, wsum / w as f64))
}

pub fn eval_uauc(scores: &[f64], labels: &[u8], users: &[u64]) -> Result<f64> {
    Ok(eval_user_aucs(scores, labels, users)?.0)
}

pub fn eval_wuauc(scores: &[f64], labels: &[u8], users: &[u64]) -> Result<f64> {
    Ok(eval_user_aucs(scores, labels, users)?.1)
}

/// Share of the `k` behaviors with the highest probe attention that carry
/// `target_sid`, out of `min(k, L)`. Equal scores favor earlier positions.
pub fn interest_recall_at_k<T: Copy + Into<f64>>(scores: &[T], seq_sids: &[u32], target_sid: u32, k: usize) -> Result<f64> {
    check_lengths(scores.len(), seq_sids.len())?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("attention scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| -> f64 { scores[i].into() };
    let cmp = |a: &usize, b: &usize| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    let top = k.min(order.len());
    if top < order.len() {
        order.select_nth_unstable_by(top, cmp);
    }
    let hits = order[..top].iter().filter(|&&i| seq_sids[i] == target_sid).count();
    Ok(hits as f64 / top as f64)
}
