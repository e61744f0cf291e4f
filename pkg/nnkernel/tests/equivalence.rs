use nnkernel::{chamfer_asym, nn_bruteforce, KdTree};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn random_cloud(rng: &mut StdRng, n: usize, dim: usize, kind: u8) -> Vec<f32> {
    match kind {
        // uniform
        0 => (0..n * dim).map(|_| rng.gen_range(-10.0..10.0)).collect(),
        // clustered around a few centers
        1 => {
            let centers: Vec<f32> =
                (0..4 * dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
            (0..n)
                .flat_map(|_| {
                    let c = rng.gen_range(0..4);
                    (0..dim)
                        .map(|d| centers[c * dim + d] + rng.gen_range(-0.5..0.5))
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        // heavy duplicates: few distinct values per coordinate
        _ => (0..n * dim)
            .map(|_| rng.gen_range(0..3) as f32)
            .collect(),
    }
}

#[test]
fn kdtree_matches_bruteforce_bit_identical() {
    let mut rng = StdRng::seed_from_u64(7);
    for case in 0..1000 {
        let dim = if case % 2 == 0 { 3 } else { 4 };
        let kind = (case % 3) as u8;
        let nq = rng.gen_range(1..60);
        let nr = rng.gen_range(1..120);
        let q = random_cloud(&mut rng, nq, dim, kind);
        let r = random_cloud(&mut rng, nr, dim, kind);

        let mut bd = vec![0f32; nq];
        let mut bi = vec![0u32; nq];
        nn_bruteforce(&q, &r, dim, &mut bd, &mut bi);

        let tree = KdTree::build(&r, dim).unwrap();
        let mut td = vec![0f32; nq];
        let mut ti = vec![0u32; nq];
        tree.query(&q, &mut td, &mut ti);

        for i in 0..nq {
            assert_eq!(bd[i].to_bits(), td[i].to_bits(), "case {case} query {i}");
            assert_eq!(bi[i], ti[i], "case {case} query {i}");
        }
    }
}

#[test]
fn degenerate_identical_reference_gives_index_zero() {
    let r: Vec<f32> = std::iter::repeat([1.0f32, 2.0, 3.0])
        .take(50)
        .flatten()
        .collect();
    let q = vec![0.0f32, 0.0, 0.0, 1.0, 2.0, 3.0];
    let tree = KdTree::build(&r, 3).unwrap();
    let mut d = vec![0f32; 2];
    let mut i = vec![0u32; 2];
    tree.query(&q, &mut d, &mut i);
    assert_eq!(i, vec![0, 0]);
    assert_eq!(d[1], 0.0);
}

#[test]
fn self_query_is_identity() {
    let mut rng = StdRng::seed_from_u64(1);
    let r = random_cloud(&mut rng, 200, 3, 0);
    let tree = KdTree::build(&r, 3).unwrap();
    let mut d = vec![0f32; 200];
    let mut i = vec![0u32; 200];
    tree.query(&r, &mut d, &mut i);
    for qi in 0..200 {
        assert_eq!(d[qi], 0.0);
        assert_eq!(i[qi], qi as u32);
    }
}

#[test]
fn spec_example_two_references() {
    let q = vec![0.0f32, 0.0, 0.0];
    let r = vec![1.0f32, 0.0, 0.0, 0.0, 2.0, 0.0];
    let tree = KdTree::build(&r, 3).unwrap();
    let (d, i) = tree.query_one(&q);
    assert_eq!(d, 1.0);
    assert_eq!(i, 0);
}

#[test]
fn chamfer_batch_matches_per_pair_loop() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..8 {
        let q = random_cloud(&mut rng, 40, 3, 0);
        let r = random_cloud(&mut rng, 70, 3, 0);
        // scalar reference: full double loop
        let mut want = 0.0f64;
        for qi in 0..40 {
            let mut best = f64::INFINITY;
            for ri in 0..70 {
                let mut acc = 0.0f64;
                for d in 0..3 {
                    let diff = q[qi * 3 + d] as f64 - r[ri * 3 + d] as f64;
                    acc += diff * diff;
                }
                best = best.min(acc);
            }
            want += best;
        }
        want /= 40.0;
        let got = chamfer_asym(&q, &r, 3);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn chamfer_self_is_zero() {
    let mut rng = StdRng::seed_from_u64(4);
    let q = random_cloud(&mut rng, 100, 4, 0);
    assert_eq!(chamfer_asym(&q, &q, 4), 0.0);
}

#[test]
fn throughput_100k_queries_dim4() {
    // budget: < 1 s on 8 cores, scaled up when fewer cores are available
    let mut rng = StdRng::seed_from_u64(5);
    let n = 100_000;
    let q = random_cloud(&mut rng, n, 4, 0);
    let r = random_cloud(&mut rng, n, 4, 0);
    let tree = KdTree::build(&r, 4).unwrap();
    let mut d = vec![0f32; n];
    let mut i = vec![0u32; n];
    let start = Instant::now();
    tree.query(&q, &mut d, &mut i);
    let elapsed = start.elapsed().as_secs_f64();
    let cores = std::thread::available_parallelism().map(|c| c.get()).unwrap_or(1);
    let budget = 1.0 * (8.0 / cores as f64).max(1.0);
    eprintln!("throughput: {elapsed:.3}s on {cores} cores (budget {budget:.1}s)");
    assert!(elapsed < budget, "{elapsed}s exceeds {budget}s on {cores} cores");

    // spot-check a subsample against brute force
    let sub = 1000;
    let mut bd = vec![0f32; sub];
    let mut bi = vec![0u32; sub];
    nn_bruteforce(&q[..sub * 4], &r, 4, &mut bd, &mut bi);
    for k in 0..sub {
        assert_eq!(bd[k].to_bits(), d[k].to_bits());
        assert_eq!(bi[k], i[k]);
    }
}

#[test]
fn protocol_roundtrip_in_memory() {
    use nnkernel::protocol::{serve, MAGIC, OP_NN, VERSION};
    let mut rng = StdRng::seed_from_u64(6);
    let q = random_cloud(&mut rng, 10, 3, 0);
    let r = random_cloud(&mut rng, 20, 3, 0);

    let mut msg = Vec::new();
    msg.extend_from_slice(MAGIC);
    msg.push(VERSION);
    msg.push(OP_NN);
    for cloud in [(&q, 10u32), (&r, 20u32)] {
        msg.extend_from_slice(&cloud.1.to_le_bytes());
        msg.push(3);
        for v in cloud.0 {
            msg.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::new();
    serve(&mut msg.as_slice(), &mut out).unwrap();

    assert_eq!(&out[..4], MAGIC);
    assert_eq!(out[4], VERSION);
    assert_eq!(out[5], 0);
    let n = u32::from_le_bytes(out[6..10].try_into().unwrap()) as usize;
    assert_eq!(n, 10);
    let dists: Vec<f32> = out[10..10 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tree = KdTree::build(&r, 3).unwrap();
    let mut want_d = vec![0f32; 10];
    let mut want_i = vec![0u32; 10];
    tree.query(&q, &mut want_d, &mut want_i);
    for k in 0..n {
        assert_eq!(dists[k].to_bits(), want_d[k].to_bits());
    }
}

#[test]
fn protocol_error_statuses() {
    use nnkernel::protocol::{serve, MAGIC, OP_NN, VERSION};
    // empty reference -> status 1
    let mut msg = Vec::new();
    msg.extend_from_slice(MAGIC);
    msg.push(VERSION);
    msg.push(OP_NN);
    msg.extend_from_slice(&1u32.to_le_bytes());
    msg.push(3);
    msg.extend_from_slice(&[0u8; 12]);
    msg.extend_from_slice(&0u32.to_le_bytes());
    msg.push(3);
    let mut out = Vec::new();
    serve(&mut msg.as_slice(), &mut out).unwrap();
    assert_eq!(out[5], 1);

    // dim mismatch -> status 2
    let mut msg = Vec::new();
    msg.extend_from_slice(MAGIC);
    msg.push(VERSION);
    msg.push(OP_NN);
    msg.extend_from_slice(&1u32.to_le_bytes());
    msg.push(3);
    msg.extend_from_slice(&[0u8; 12]);
    msg.extend_from_slice(&1u32.to_le_bytes());
    msg.push(4);
    msg.extend_from_slice(&[0u8; 16]);
    let mut out = Vec::new();
    serve(&mut msg.as_slice(), &mut out).unwrap();
    assert_eq!(out[5], 2);
}
