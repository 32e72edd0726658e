//! One supernet cell on random inputs: capped edge weights per node, the
//! partial-channel bypass, and the discrete cell after argmax discretization.
//!
//! cargo run --release --example cell_forward -- [seed]

use cellsearch::autodiff::{Graph, ParamStore, Tensor};
use cellsearch::cell::{edge_weights, ArchParams, ArchVars, CellEval, CellMode, CellSpec, CellWeights, ChannelMask, NUM_OPS};
use cellsearch::genotype::discretize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cellsearch::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CellSpec::default();
    let mut store = ParamStore::new();
    let weights = CellWeights::init(&spec, 8, 16, 8, "cell", &mut store, &mut rng)?;

    let mut arch = ArchParams::new(spec.n_edges());
    arch.alpha.iter_mut().for_each(|a| *a = rng.gen_range(-1.0..1.0));
    arch.beta.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    let masks: Vec<ChannelMask> = (0..spec.n_edges())
        .map(|_| ChannelMask::sample(&mut rng, spec.channels, spec.partial_k))
        .collect();

    println!("edge weights (capped at 0.5):");
    for dst in 2..spec.n_nodes {
        let incoming = spec.incoming(dst);
        let beta: Vec<f64> = incoming.iter().map(|&e| arch.beta[e]).collect();
        let psi = edge_weights(&beta)?;
        let shown: Vec<String> = psi.iter().map(|p| format!("{p:.3}")).collect();
        println!("  node {dst}: [{}]", shown.join(", "));
    }

    let skip = Tensor::from_fn(vec![2, 8, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let up = Tensor::from_fn(vec![2, 16, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let eval = CellEval {
        spec: &spec,
        weights: &weights,
        store: &store,
        train_weights: false,
    };

    let mut g = Graph::new();
    let vars = ArchVars::constant(&mut g, &arch);
    let x = g.constant_owned(Tensor::from_fn(vec![1, spec.channels, 6, 6], |_| rng.gen_range(-1.0..1.0)));
    let y = eval.mixed_op_forward(&mut g, x, 0, &arch, vars, Some(&masks[0]))?;
    let bypass_exact = masks[0]
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &on)| !on)
        .all(|(c, _)| g.value(x)[c * 36..(c + 1) * 36] == g.value(y)[c * 36..(c + 1) * 36]);
    println!("masked-out channels of edge 0 copied bit-exactly: {bypass_exact}");

    let (sk, upv) = (g.constant(&skip), g.constant(&up));
    let out = eval.forward(
        &mut g,
        sk,
        upv,
        &CellMode::Supernet {
            arch: &arch,
            vars,
            masks: &masks,
        },
    )?;
    println!("supernet output shape {:?}", g.shape(out));

    let (genotype, _) = discretize(&spec, &arch)?;
    println!("discretized cell ({} entries per genotype vector):", spec.n_edges() * NUM_OPS);
    for e in &genotype.edges {
        println!("  {} -> {}: {}", e.src, e.dst, e.op);
    }
    let mut g = Graph::new();
    let (sk, upv) = (g.constant(&skip), g.constant(&up));
    let out = eval.forward(&mut g, sk, upv, &CellMode::Discrete { genotype: &genotype })?;
    println!("discrete output shape {:?}", g.shape(out));
    Ok(())
}
