use std::borrow::Borrow;

use rand::Rng;

use super::OptimizerConfig;
use crate::association::PersonHypothesis;

/// Picks a spatially spread subset of the queued hypotheses, favouring
/// recent ones.
///
/// A weighted random permutation is drawn with weight `γ^rank` (rank 0 is the
/// newest hypothesis) and walked in order, keeping a hypothesis only if its
/// center of mass is at least `cfg.spacing` away from everything kept so far.
pub fn select_hypotheses<H, R>(queue: &[H], cfg: &OptimizerConfig, rng: &mut R) -> Vec<H>
where
    H: Borrow<PersonHypothesis> + Clone,
    R: Rng + ?Sized,
{
    if queue.is_empty() || cfg.max_selection == 0 {
        return Vec::new();
    }
    // age rank: newest first, later ids break timestamp ties
    let mut by_age: Vec<usize> = (0..queue.len()).collect();
    by_age.sort_by(|&a, &b| {
        let (ha, hb) = (queue[a].borrow(), queue[b].borrow());
        hb.created_at.cmp(&ha.created_at).then(hb.id.cmp(&ha.id))
    });

    // Weighted sampling without replacement as an exponential race: item i
    // finishes at E_i / w_i with E_i ~ Exp(1). Compared in log space so that
    // tiny weights of old hypotheses cannot underflow.
    let log_gamma = cfg.recency_gamma.ln();
    let mut keys: Vec<(f64, usize)> = by_age
        .iter()
        .enumerate()
        .map(|(rank, &idx)| {
            let u: f64 = rng.random();
            let e = -(1.0 - u).ln();
            (e.ln() - rank as f64 * log_gamma, idx)
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut selected: Vec<H> = Vec::new();
    for (_, idx) in keys {
        let cand = &queue[idx];
        let c = cand.borrow().center_of_mass;
        if selected
            .iter()
            .all(|s| (s.borrow().center_of_mass - c).norm() >= cfg.spacing)
        {
            selected.push(cand.clone());
            if selected.len() >= cfg.max_selection {
                break;
            }
        }
    }
    selected
}
