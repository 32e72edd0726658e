//! Finite-difference check of every candidate op, the 1x1 convolution and
//! the segmentation loss.
//!
//! cargo run --release --example gradcheck -- [seeds]

use cellsearch::autodiff::{check_gradients, GradCheck, ParamId, ParamStore, Tensor};
use cellsearch::backbone::loss;
use cellsearch::cell::{apply, OpKind, SepConvVars};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check_op(op: OpKind, seed: u64) -> cellsearch::Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, vec![1, 4, 6, 6]));
    let mut ids = vec![x];
    let weights = op.conv_geometry().map(|(k, _)| {
        let dw = store.add("dw", random(&mut rng, vec![4, 1, k, k]));
        let pw = store.add("pw", random(&mut rng, vec![4, 4, 1, 1]));
        ids.extend([dw, pw]);
        (dw, pw)
    });
    let proj: Vec<f64> = (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_gradients(&mut store, &ids, 1e-4, &mut |g, s| {
        let xv = g.param(s, x);
        let w = weights.map(|(dw, pw)| SepConvVars {
            depthwise: g.param(s, dw),
            pointwise: g.param(s, pw),
        });
        let y = apply(g, op, xv, w)?;
        g.weighted_sum(y, &proj)
    })
}

fn check_conv1x1(seed: u64) -> cellsearch::Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, vec![2, 3, 4, 4]));
    let w = store.add("w", random(&mut rng, vec![5, 3, 1, 1]));
    let b = store.add("b", random(&mut rng, vec![5]));
    let proj: Vec<f64> = (0..160).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_gradients(&mut store, &[x, w, b], 1e-4, &mut |g, s| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.conv2d(xv, wv, Some(bv), 1, 1)?;
        g.weighted_sum(y, &proj)
    })
}

fn check_loss(seed: u64) -> cellsearch::Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let logits: ParamId = store.add("logits", random(&mut rng, vec![2, 3, 4, 4]));
    let labels: Vec<u8> = (0..32).map(|_| rng.gen_range(0..3)).collect();
    check_gradients(&mut store, &[logits], 1e-4, &mut |g, s| {
        let z = g.param(s, logits);
        Ok(loss(g, z, &labels)?.0)
    })
}

fn main() -> cellsearch::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut rows: Vec<(String, f64, usize)> = Vec::new();
    let mut record = |name: String, f: &mut dyn FnMut(u64) -> cellsearch::Result<GradCheck>| -> cellsearch::Result<()> {
        let (mut worst, mut kinks) = (0.0f64, 0);
        for seed in 0..seeds {
            let r = f(seed)?;
            worst = worst.max(r.max_rel_error);
            kinks += r.kinks;
        }
        rows.push((name, worst, kinks));
        Ok(())
    };
    for op in OpKind::ALL {
        record(op.name().to_string(), &mut |s| check_op(op, s))?;
    }
    record("conv1x1".into(), &mut check_conv1x1)?;
    record("loss".into(), &mut check_loss)?;
    println!("{:<16} {:>12} {:>6}", "op", "max rel err", "kinks");
    for (name, worst, kinks) in rows {
        println!("{name:<16} {worst:>12.2e} {kinks:>6}");
    }
    Ok(())
}
