//! Independent oracles and fixtures shared by the integration tests. Nothing
//! here calls the library routine it checks.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cellsearch::autodiff::{check_gradients, GradCheck, ParamStore, Tensor};
use cellsearch::backbone::loss;
use cellsearch::cell::{apply, CellSpec, OpKind, SepConvVars, NUM_OPS};
use cellsearch::pruner::{PruneEvent, PruneKind, PrunerConfig};
use cellsearch::trajectory::TrajectoryLog;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- gradients

pub fn gradcheck_op(op: OpKind, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut r, vec![1, 4, 6, 6]));
    let mut ids = vec![x];
    let weights = op.conv_geometry().map(|(k, _)| {
        let dw = store.add("dw", random_tensor(&mut r, vec![4, 1, k, k]));
        let pw = store.add("pw", random_tensor(&mut r, vec![4, 4, 1, 1]));
        ids.extend([dw, pw]);
        (dw, pw)
    });
    let proj: Vec<f64> = (0..144).map(|_| r.gen_range(-1.0..1.0)).collect();
    check_gradients(&mut store, &ids, 1e-4, &mut |g, s| {
        let xv = g.param(s, x);
        let w = weights.map(|(dw, pw)| SepConvVars {
            depthwise: g.param(s, dw),
            pointwise: g.param(s, pw),
        });
        let y = apply(g, op, xv, w)?;
        g.weighted_sum(y, &proj)
    })
    .unwrap()
}

pub fn gradcheck_conv1x1(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut r, vec![2, 3, 4, 4]));
    let w = store.add("w", random_tensor(&mut r, vec![5, 3, 1, 1]));
    let b = store.add("b", random_tensor(&mut r, vec![5]));
    let proj: Vec<f64> = (0..160).map(|_| r.gen_range(-1.0..1.0)).collect();
    check_gradients(&mut store, &[x, w, b], 1e-4, &mut |g, s| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.conv2d(xv, wv, Some(bv), 1, 1)?;
        g.weighted_sum(y, &proj)
    })
    .unwrap()
}

pub fn gradcheck_loss(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let logits = store.add("logits", random_tensor(&mut r, vec![2, 3, 4, 4]));
    let labels: Vec<u8> = (0..32).map(|_| r.gen_range(0..3)).collect();
    check_gradients(&mut store, &[logits], 1e-4, &mut |g, s| {
        let z = g.param(s, logits);
        Ok(loss(g, z, &labels)?.0)
    })
    .unwrap()
}

// ------------------------------------------------------------ formula oracles

/// Same-padded stride-1 convolution by direct summation.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    (b, cin, h, wd): (usize, usize, usize, usize),
    cout: usize,
    k: usize,
    groups: usize,
    dil: usize,
) -> Vec<f64> {
    let pad = (dil * (k - 1) / 2) as isize;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; b * cout * h * wd];
    for n in 0..b {
        for co in 0..cout {
            let grp = co / cout_g;
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + (ky * dil) as isize - pad;
                                let ix = xx as isize + (kx * dil) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin_g + cl) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Capped tan-softmax written out step by step.
pub fn psi_oracle(beta: &[f64]) -> Vec<f64> {
    if beta.len() == 1 {
        return vec![1.0];
    }
    let t: Vec<f64> = beta.iter().map(|b| b.max(-1.2).min(1.2).tan()).collect();
    let mut mx = t[0];
    for &v in &t {
        if v > mx {
            mx = v;
        }
    }
    let e: Vec<f64> = t.iter().map(|v| (v - mx).exp()).collect();
    let mut z = 0.0;
    for v in &e {
        z += v;
    }
    let hat: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut top = 0;
    for i in 1..hat.len() {
        if hat[i] > hat[top] {
            top = i;
        }
    }
    if hat[top] <= 0.5 {
        return hat;
    }
    let mut rest = 0.0;
    for (i, v) in hat.iter().enumerate() {
        if i != top {
            rest += v;
        }
    }
    hat.iter()
        .enumerate()
        .map(|(i, v)| if i == top { 0.5 } else { 0.5 * v / rest })
        .collect()
}

pub fn distribution_oracle(theta: &[f64], eps: f64) -> Vec<f64> {
    let mut s = 0.0;
    for t in theta {
        if *t > 0.0 {
            s += t;
        }
    }
    if s == 0.0 {
        return vec![1.0 / theta.len() as f64; theta.len()];
    }
    let raw: Vec<f64> = theta.iter().map(|t| if *t > 0.0 { t / (s + eps) } else { 0.0 }).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

pub fn js_oracle(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let sp: f64 = p.iter().map(|v| v + eps).sum();
    let sq: f64 = q.iter().map(|v| v + eps).sum();
    let mut d = 0.0;
    for i in 0..p.len() {
        let a = (p[i] + eps) / sp;
        let b = (q[i] + eps) / sq;
        let m = (a + b) / 2.0;
        d += a / 2.0 * (a / m).ln() + b / 2.0 * (b / m).ln();
    }
    d.max(0.0)
}

/// Outliers below mean - 2 std (population std); keep the argmax if all
/// would go; otherwise drop the single weakest (lowest index on ties).
pub fn prune_oracle(ops: &[usize], theta: &[f64]) -> (PruneKind, Vec<usize>) {
    let n = theta.len() as f64;
    let mean: f64 = theta.iter().sum::<f64>() / n;
    let var: f64 = theta.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let cut = mean - 2.0 * var.sqrt();
    let mut out: Vec<usize> = Vec::new();
    for (k, &t) in theta.iter().enumerate() {
        if t < cut {
            out.push(k);
        }
    }
    if !out.is_empty() {
        if out.len() == theta.len() {
            let mut best = 0;
            for k in 1..theta.len() {
                if theta[k] > theta[best] {
                    best = k;
                }
            }
            out.retain(|&k| k != best);
        }
        return (PruneKind::Outlier, out.iter().map(|&k| ops[k]).collect());
    }
    let mut worst = 0;
    for k in 1..theta.len() {
        if theta[k] < theta[worst] {
            worst = k;
        }
    }
    (PruneKind::Fallback, vec![ops[worst]])
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn hamming_oracle(a: &[bool], b: &[bool]) -> f64 {
    let mut same = 0;
    for i in 0..a.len() {
        if a[i] == b[i] {
            same += 1;
        }
    }
    same as f64 / a.len() as f64
}

// ------------------------------------------------------------- replay oracle

/// Re-derives the prune events of an LTH search from its logged
/// trajectory and the pruner configuration alone, checking on the way that
/// the active set logged at each epoch matches what the replay predicts.
pub fn replay_events(
    spec: &CellSpec,
    traj: &TrajectoryLog,
    cfg: &PrunerConfig,
    warmup: usize,
) -> Result<Vec<PruneEvent>, String> {
    let edges = spec.edges();
    let edge_of = |src: usize, dst: usize| edges.iter().position(|e| e.src == src && e.dst == dst).unwrap();
    let mut active = vec![[true; NUM_OPS]; edges.len()];
    let mut edge_on = vec![true; edges.len()];
    let mut thr = vec![cfg.theta0; edges.len()];
    let mut prev: Vec<Option<Vec<f64>>> = vec![None; edges.len()];
    let mut streak = vec![0usize; edges.len()];
    let mut events = Vec::new();

    let mut epochs: Vec<usize> = traj.rows.iter().map(|r| r.epoch).collect();
    epochs.dedup();
    for &epoch in &epochs {
        // (edge) -> [(op, alpha, beta)]
        let mut rows: BTreeMap<usize, Vec<(usize, f64, f64)>> = BTreeMap::new();
        for r in traj.rows.iter().filter(|r| r.epoch == epoch) {
            rows.entry(edge_of(r.edge_src, r.edge_dst))
                .or_default()
                .push((r.op.index(), r.alpha, r.beta));
        }
        for e in 0..edges.len() {
            let logged: Vec<usize> = rows.get(&e).map(|v| v.iter().map(|x| x.0).collect()).unwrap_or_default();
            let expect: Vec<usize> = if edge_on[e] {
                (0..NUM_OPS).filter(|&o| active[e][o]).collect()
            } else {
                Vec::new()
            };
            if logged != expect {
                return Err(format!("epoch {epoch} edge {e}: logged ops {logged:?}, replay expects {expect:?}"));
            }
        }
        if epoch <= warmup {
            continue;
        }
        for (&e, ops) in &rows {
            if ops.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = ops.iter().map(|x| x.0).collect();
            let theta: Vec<f64> = ops.iter().map(|x| x.1 * x.2).collect();
            let p = distribution_oracle(&theta, cfg.eps);
            let q = prev[e].clone().unwrap_or_else(|| vec![1.0 / p.len() as f64; p.len()]);
            let js = js_oracle(&p, &q, cfg.eps);
            if js < thr[e] {
                let (kind, removed) = prune_oracle(&idx, &theta);
                for &o in &removed {
                    active[e][o] = false;
                }
                let kept: Vec<f64> = idx
                    .iter()
                    .zip(&p)
                    .filter(|(o, _)| !removed.contains(o))
                    .map(|(_, v)| *v)
                    .collect();
                let s: f64 = kept.iter().sum();
                prev[e] = Some(if s > 0.0 {
                    kept.iter().map(|v| v / s).collect()
                } else {
                    vec![1.0 / kept.len() as f64; kept.len()]
                });
                events.push(PruneEvent {
                    epoch,
                    edge: e,
                    kind,
                    ops_removed: removed,
                    js_value: Some(js),
                });
            } else {
                thr[e] *= cfg.kappa;
                prev[e] = Some(p);
                events.push(PruneEvent {
                    epoch,
                    edge: e,
                    kind: PruneKind::ThresholdInflation,
                    ops_removed: vec![],
                    js_value: Some(js),
                });
            }
        }
        if cfg.mid_search_edge_pruning {
            for (&e, ops) in &rows {
                let pos: f64 = ops.iter().map(|x| (x.1 * x.2).max(0.0)).sum();
                streak[e] = if pos == 0.0 { streak[e] + 1 } else { 0 };
            }
            for &e in rows.keys() {
                if streak[e] < cfg.edge_patience.max(1) {
                    continue;
                }
                let dst = edges[e].dst;
                let live = (0..edges.len()).filter(|&k| edges[k].dst == dst && edge_on[k]).count();
                if live <= 2 {
                    continue;
                }
                edge_on[e] = false;
                events.push(PruneEvent {
                    epoch,
                    edge: e,
                    kind: PruneKind::EdgeReduction,
                    ops_removed: vec![],
                    js_value: None,
                });
            }
        }
        let converged = (0..edges.len())
            .filter(|&e| edge_on[e])
            .all(|e| active[e].iter().filter(|&&a| a).count() == 1);
        if converged {
            for dst in 2..spec.n_nodes {
                let inc: Vec<usize> = (0..edges.len()).filter(|&k| edges[k].dst == dst && edge_on[k]).collect();
                let beta: Vec<f64> = inc.iter().map(|&k| rows[&k][0].2).collect();
                let psi = psi_oracle(&beta);
                let mut order: Vec<usize> = (0..inc.len()).collect();
                order.sort_by(|&a, &b| psi[b].partial_cmp(&psi[a]).unwrap().then(a.cmp(&b)));
                for &k in order.iter().skip(2) {
                    events.push(PruneEvent {
                        epoch,
                        edge: inc[k],
                        kind: PruneKind::EdgeReduction,
                        ops_removed: vec![],
                        js_value: None,
                    });
                }
            }
            if Some(&epoch) != epochs.last() {
                return Err(format!("replay converged at {epoch} but the log continues"));
            }
        }
    }
    let rank = |k: PruneKind| match k {
        PruneKind::Outlier => 0,
        PruneKind::Fallback => 1,
        PruneKind::ThresholdInflation => 2,
        PruneKind::EdgeReduction => 3,
    };
    events.sort_by_key(|e| (e.epoch, e.edge, rank(e.kind)));
    Ok(events)
}

/// Events compared with an absolute tolerance on the JS values.
pub fn events_match(a: &[PruneEvent], b: &[PruneEvent], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} events vs {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        let js_ok = match (x.js_value, y.js_value) {
            (Some(p), Some(q)) => (p - q).abs() <= tol,
            (None, None) => true,
            _ => false,
        };
        let mut rx = x.ops_removed.clone();
        let mut ry = y.ops_removed.clone();
        rx.sort_unstable();
        ry.sort_unstable();
        if x.epoch != y.epoch || x.edge != y.edge || x.kind != y.kind || rx != ry || !js_ok {
            return Err(format!("{x:?} vs {y:?}"));
        }
    }
    Ok(())
}

/// Trajectory rows for a sequence of architecture snapshots, one epoch each.
pub fn traj_from_archs(spec: &CellSpec, archs: &[(usize, cellsearch::cell::ArchParams)]) -> TrajectoryLog {
    use cellsearch::trajectory::TrajectoryRow;
    let edges = spec.edges();
    let mut log = TrajectoryLog::new();
    for (epoch, arch) in archs {
        for e in (0..arch.n_edges()).filter(|&e| arch.edge_active[e]) {
            let ops = arch.active_ops(e);
            let theta: Vec<f64> = ops.iter().map(|&o| arch.alpha[e * NUM_OPS + o] * arch.beta[e]).collect();
            let dist = distribution_oracle(&theta, 1e-6);
            for (k, &o) in ops.iter().enumerate() {
                log.rows.push(TrajectoryRow {
                    epoch: *epoch,
                    edge_src: edges[e].src,
                    edge_dst: edges[e].dst,
                    op: OpKind::ALL[o],
                    alpha: arch.alpha[e * NUM_OPS + o],
                    beta: arch.beta[e],
                    theta: theta[k],
                    p: dist[k],
                    js_of_edge: None,
                    theta_threshold: 1.0,
                    event: String::new(),
                });
            }
        }
    }
    log
}

// ------------------------------------------------------------ toy fixture

/// Two-edge cell (0 -> 2, 1 -> 2) over three epochs, beta fixed at one so
/// Θ = α. Edge 0 ranks ops (0,1,2), then (1,0,2), then (2,1,0); edge 1
/// always prefers op 6. The final genotype takes op 2 and op 6.
pub fn toy() -> (CellSpec, TrajectoryLog, cellsearch::genotype::DiscreteGenotype) {
    use cellsearch::cell::ArchParams;
    use cellsearch::genotype::{DiscreteGenotype, GenotypeEdge};
    let spec = CellSpec {
        n_nodes: 3,
        n_outputs: 1,
        channels: 4,
        partial_k: 2,
    };
    let rows0 = [
        [3.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [2.0, 3.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0],
    ];
    let row1 = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let snaps: Vec<(usize, ArchParams)> = rows0
        .iter()
        .enumerate()
        .map(|(k, r0)| {
            let mut arch = ArchParams::new(2);
            arch.alpha[..NUM_OPS].copy_from_slice(r0);
            arch.alpha[NUM_OPS..].copy_from_slice(&row1);
            arch.beta = vec![1.0, 1.0];
            (k + 1, arch)
        })
        .collect();
    let edge = |src, op: usize| GenotypeEdge {
        src,
        dst: 2,
        op: OpKind::ALL[op],
    };
    let genotype = DiscreteGenotype::new(&spec, vec![edge(0, 2), edge(1, 6)]).unwrap();
    let traj = traj_from_archs(&spec, &snaps);
    (spec, traj, genotype)
}

pub fn toy_similarity_check() -> Result<(), String> {
    use cellsearch::analysis::{similarity_matrix, Representation};
    let (spec, traj, _) = toy();
    let cp = [1, 2, 3];
    let full = similarity_matrix(&spec, &traj, Representation::Full, &cp).map_err(|e| e.to_string())?;
    let want = [
        [1.0, 14.0 / 15.0, 11.0 / 15.0],
        [14.0 / 15.0, 1.0, 12.0 / 15.0],
        [11.0 / 15.0, 12.0 / 15.0, 1.0],
    ];
    for i in 0..3 {
        for j in 0..3 {
            if (full.get(i, j) - want[i][j]).abs() > 1e-15 {
                return Err(format!("full ({i},{j}): {} vs {}", full.get(i, j), want[i][j]));
            }
        }
    }
    let d = 1.0 - 2.0 / 14.0;
    let top1 = [[1.0, d, d], [d, 1.0, d], [d, d, 1.0]];
    let top2 = [[1.0, 1.0, d], [1.0, 1.0, d], [d, d, 1.0]];
    let top3 = [[1.0; 3]; 3];
    for (rep, want) in [
        (Representation::Top1, top1),
        (Representation::Final, top1),
        (Representation::Top2, top2),
        (Representation::Top3, top3),
    ] {
        let m = similarity_matrix(&spec, &traj, rep, &cp).map_err(|e| e.to_string())?;
        for i in 0..3 {
            for j in 0..3 {
                if m.get(i, j) != want[i][j] {
                    return Err(format!("{rep} ({i},{j}): {} vs {}", m.get(i, j), want[i][j]));
                }
            }
        }
    }
    if similarity_matrix(&spec, &traj, Representation::Full, &[1, 4]).is_ok() {
        return Err("missing checkpoint accepted".into());
    }
    Ok(())
}

pub fn toy_emergence_check() -> Result<(), String> {
    use cellsearch::analysis::emergence_epochs;
    let (spec, traj, genotype) = toy();
    let r = emergence_epochs(&spec, &traj, &genotype, 1, 200).map_err(|e| e.to_string())?;
    let got: Vec<(usize, usize, usize)> = r.edges.iter().map(|e| (e.top3.epoch, e.top2.epoch, e.top1.epoch)).collect();
    let checks = [
        (got == vec![(1, 3, 3), (1, 1, 1)], format!("edge epochs {got:?}")),
        (r.edges.iter().all(|e| e.top1.reached), "unreached winner".into()),
        (
            (r.median_top3, r.median_top2, r.median_top1) == (1.0, 2.0, 2.0),
            format!("medians {} {} {}", r.median_top3, r.median_top2, r.median_top1),
        ),
        (
            (r.edges_first.epoch, r.edges_persistent.epoch) == (1, 1),
            format!("edges fixed {:?} {:?}", r.edges_first, r.edges_persistent),
        ),
    ];
    for (ok, msg) in checks {
        if !ok {
            return Err(msg);
        }
    }
    let late = emergence_epochs(&spec, &traj, &genotype, 2, 200).map_err(|e| e.to_string())?;
    if (late.edges[0].top3.epoch, late.edges[1].top1.epoch) != (2, 2) {
        return Err(format!("from epoch 2: {:?}", late.edges));
    }
    Ok(())
}
