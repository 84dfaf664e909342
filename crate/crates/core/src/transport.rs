//! Exact discrete optimal transport by successive shortest paths on the
//! complete bipartite graph, with reduced-cost potentials.

use crate::error::{precondition, Error, Result};

/// Optimal cost and a few solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportSolution {
    pub cost: f64,
    pub augmentations: usize,
    /// Mass left unmatched after termination; zero up to rounding.
    pub residual: f64,
}

/// Minimum of `Σ c(i,j) π_ij` over couplings of `supply` and `demand`.
///
/// Both weight vectors must be nonnegative with equal totals; costs must be
/// nonnegative.
pub fn transport<C: Fn(usize, usize) -> f64>(supply: &[f64], demand: &[f64], cost: C) -> Result<TransportSolution> {
    let (k, l) = (supply.len(), demand.len());
    precondition!(k > 0 && l > 0, "transport needs nonempty marginals");
    precondition!(supply.iter().chain(demand).all(|w| *w >= 0.0 && w.is_finite()), "weights must be nonnegative");
    let ts: f64 = supply.iter().sum();
    let td: f64 = demand.iter().sum();
    precondition!((ts - td).abs() <= 1e-9 * ts.max(td).max(1.0), "marginal totals differ: {ts} vs {td}");

    let mut c = vec![0.0; k * l];
    for i in 0..k {
        for j in 0..l {
            let v = cost(i, j);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Numerical(format!("invalid transport cost {v} at ({i}, {j})")));
            }
            c[i * l + j] = v;
        }
    }

    let eps = 1e-14 * ts.max(1.0);
    let mut sup = supply.to_vec();
    let mut dem = demand.to_vec();
    let mut flow = vec![0.0; k * l];
    let n = k + l;
    // Node potentials keep reduced costs c(a,b) + pi[a] − pi[b] nonnegative
    // on every residual edge.
    let mut pi = vec![0.0; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut augmentations = 0;
    let max_aug = 50 * (k + l) * (k + l);

    loop {
        let remaining: f64 = sup.iter().filter(|&&s| s > eps).sum();
        if remaining <= eps || !dem.iter().any(|&d| d > eps) {
            break;
        }
        if augmentations > max_aug {
            return Err(Error::Numerical(format!("transport did not converge after {augmentations} augmentations")));
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        // A virtual root feeds every source with spare supply at zero cost.
        let root = (0..k).filter(|&i| sup[i] > eps).map(|i| pi[i]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..k {
            if sup[i] > eps {
                dist[i] = root - pi[i];
            }
        }
        // Dense Dijkstra; nodes 0..k are sources, k..k+l sinks.
        let mut target = usize::MAX;
        loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for a in 0..n {
                if !done[a] && dist[a] < bd {
                    bd = dist[a];
                    best = a;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best >= k && dem[best - k] > eps {
                target = best;
                break;
            }
            if best < k {
                let i = best;
                for j in 0..l {
                    let b = k + j;
                    if done[b] {
                        continue;
                    }
                    let rc = (c[i * l + j] + pi[i] - pi[b]).max(0.0);
                    let nd = bd + rc;
                    if nd < dist[b] {
                        dist[b] = nd;
                        prev[b] = i;
                    }
                }
            } else {
                let j = best - k;
                for i in 0..k {
                    if done[i] || flow[i * l + j] <= eps {
                        continue;
                    }
                    let rc = (pi[best] - c[i * l + j] - pi[i]).max(0.0);
                    let nd = bd + rc;
                    if nd < dist[i] {
                        dist[i] = nd;
                        prev[i] = best;
                    }
                }
            }
        }
        if target == usize::MAX {
            return Err(Error::Numerical("no augmenting path found; marginals inconsistent".into()));
        }
        let dt = dist[target];
        for a in 0..n {
            pi[a] += if done[a] { dist[a] } else { dt };
        }
        // Trace the path back to its source and find the bottleneck.
        let mut amount = dem[target - k];
        let mut node = target;
        let source;
        loop {
            let p = prev[node];
            if p == usize::MAX {
                source = node;
                break;
            }
            if node < k {
                // Reverse edge sink p → source node carries flow on (node, p).
                amount = amount.min(flow[node * l + (p - k)]);
            }
            node = p;
        }
        amount = amount.min(sup[source]);
        node = target;
        while prev[node] != usize::MAX {
            let p = prev[node];
            if node >= k {
                flow[p * l + (node - k)] += amount;
            } else {
                let f = &mut flow[node * l + (p - k)];
                *f = (*f - amount).max(0.0);
            }
            node = p;
        }
        sup[source] -= amount;
        dem[target - k] -= amount;
        augmentations += 1;
    }
    let mut terms: Vec<f64> = Vec::new();
    for idx in 0..k * l {
        if flow[idx] > 0.0 {
            terms.push(flow[idx] * c[idx]);
        }
    }
    let residual = sup.iter().map(|s| s.max(0.0)).sum::<f64>();
    Ok(TransportSolution { cost: crate::stats::pairwise_sum(&terms), augmentations, residual })
}
