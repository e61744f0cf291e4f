//! Exact nearest-neighbor squared distances over small-dimensional point
//! clouds (dim 3 or 4 on the wire, any small dim internally).
//!
//! Two interchangeable engines: a brute-force scan (the reference) and a
//! k-d tree. Both accumulate squared distances in f64 and emit f32, and both
//! break distance ties by the lowest reference index, so their outputs are
//! bit-identical. The tree is immutable after construction and safe to query
//! from multiple threads.

use rayon::prelude::*;

pub const STATUS_OK: i32 = 0;
pub const STATUS_EMPTY_REFERENCE: i32 = 1;
pub const STATUS_DIM_MISMATCH: i32 = 2;

const LEAF_SIZE: usize = 24;

/// Exact squared distance: per-coordinate f64 difference, f64 accumulation.
#[inline]
fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for d in 0..a.len() {
        let diff = a[d] as f64 - b[d] as f64;
        acc += diff * diff;
    }
    acc
}

/// Running best neighbor under the lowest-index tie rule.
#[inline]
fn better(d: f64, i: u32, best_d: f64, best_i: u32) -> bool {
    d < best_d || (d == best_d && i < best_i)
}

pub fn nn_bruteforce(query: &[f32], reference: &[f32], dim: usize,
                     out_d: &mut [f32], out_i: &mut [u32]) {
    let nq = query.len() / dim;
    let nr = reference.len() / dim;
    debug_assert!(nr > 0);
    out_d[..nq]
        .par_iter_mut()
        .zip(out_i[..nq].par_iter_mut())
        .enumerate()
        .for_each(|(qi, (od, oi))| {
            let q = &query[qi * dim..(qi + 1) * dim];
            let mut best_d = f64::INFINITY;
            let mut best_i = u32::MAX;
            for ri in 0..nr {
                let d = dist_sq(q, &reference[ri * dim..(ri + 1) * dim]);
                if better(d, ri as u32, best_d, best_i) {
                    best_d = d;
                    best_i = ri as u32;
                }
            }
            *od = best_d as f32;
            *oi = best_i;
        });
}

struct Node {
    // interior: split plane; leaf: range into `order`
    split_dim: usize,
    split_val: f32,
    left: usize,
    right: usize,
    start: usize,
    end: usize,
}

pub struct KdTree {
    points: Vec<f32>,
    dim: usize,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

impl KdTree {
    pub fn build(points: &[f32], dim: usize) -> Option<KdTree> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return None;
        }
        let n = points.len() / dim;
        let mut tree = KdTree {
            points: points.to_vec(),
            dim,
            order: (0..n as u32).collect(),
            nodes: Vec::with_capacity(2 * n / LEAF_SIZE + 2),
            root: 0,
        };
        tree.root = tree.build_range(0, n);
        Some(tree)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn coord(&self, idx: u32, d: usize) -> f32 {
        self.points[idx as usize * self.dim + d]
    }

    fn build_range(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node { split_dim: 0, split_val: 0.0,
                                   left: usize::MAX, right: usize::MAX,
                                   start, end });
            return self.nodes.len() - 1;
        }
        // split the widest dimension at its median
        let mut widest = 0;
        let mut spread = -1.0f32;
        for d in 0..self.dim {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &idx in &self.order[start..end] {
                let v = self.coord(idx, d);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > spread {
                spread = hi - lo;
                widest = d;
            }
        }
        let mid = (start + end) / 2;
        let dim = self.dim;
        let points = std::mem::take(&mut self.points);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            let va = points[a as usize * dim + widest];
            let vb = points[b as usize * dim + widest];
            va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
        });
        self.points = points;
        // a degenerate spread (all duplicates) still terminates: the median
        // split is positional, both halves strictly shrink
        let split_val = self.coord(self.order[mid], widest);
        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes.push(Node { split_dim: widest, split_val, left, right,
                               start: 0, end: 0 });
        self.nodes.len() - 1
    }

    fn search(&self, node: usize, q: &[f32], best_d: &mut f64, best_i: &mut u32) {
        let n = &self.nodes[node];
        if n.left == usize::MAX {
            for &idx in &self.order[n.start..n.end] {
                let d = dist_sq(q, &self.points[idx as usize * self.dim
                                                ..(idx as usize + 1) * self.dim]);
                if better(d, idx, *best_d, *best_i) {
                    *best_d = d;
                    *best_i = idx;
                }
            }
            return;
        }
        let delta = q[n.split_dim] as f64 - n.split_val as f64;
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, best_d, best_i);
        // the far half may still hold an equal-distance lower index, so
        // descend on equality too
        if delta * delta <= *best_d {
            self.search(far, q, best_d, best_i);
        }
    }

    pub fn query_one(&self, q: &[f32]) -> (f32, u32) {
        let mut best_d = f64::INFINITY;
        let mut best_i = u32::MAX;
        self.search(self.root, q, &mut best_d, &mut best_i);
        (best_d as f32, best_i)
    }

    pub fn query(&self, queries: &[f32], out_d: &mut [f32], out_i: &mut [u32]) {
        let dim = self.dim;
        let nq = queries.len() / dim;
        out_d[..nq]
            .par_iter_mut()
            .zip(out_i[..nq].par_iter_mut())
            .enumerate()
            .for_each(|(qi, (od, oi))| {
                let (d, i) = self.query_one(&queries[qi * dim..(qi + 1) * dim]);
                *od = d;
                *oi = i;
            });
    }
}

/// Asymmetric Chamfer: mean over the query cloud of squared distance to the
/// nearest reference point, f64 accumulation.
pub fn chamfer_asym(query: &[f32], reference: &[f32], dim: usize) -> f64 {
    let nq = query.len() / dim;
    let tree = KdTree::build(reference, dim).expect("non-empty reference");
    let mut acc = 0.0f64;
    for qi in 0..nq {
        let mut best_d = f64::INFINITY;
        let mut best_i = u32::MAX;
        tree.search(tree.root, &query[qi * dim..(qi + 1) * dim],
                    &mut best_d, &mut best_i);
        acc += best_d;
    }
    acc / nq as f64
}

// ---------------------------------------------------------------------------
// C ABI
// ---------------------------------------------------------------------------

/// Build a tree from `count` points of `dim` coordinates. Returns null for an
/// empty cloud. The input buffer is copied; the tree owns no caller memory.
///
/// # Safety
/// `points` must be valid for `count * dim` f32 reads.
#[no_mangle]
pub unsafe extern "C" fn nnk_build_tree(points: *const f32, count: u32,
                                        dim: u8) -> *mut KdTree {
    if points.is_null() || count == 0 || dim == 0 {
        return std::ptr::null_mut();
    }
    let slice = std::slice::from_raw_parts(points, count as usize * dim as usize);
    match KdTree::build(slice, dim as usize) {
        Some(tree) => Box::into_raw(Box::new(tree)),
        None => std::ptr::null_mut(),
    }
}

/// Query `count` points against a built tree, writing squared distances and
/// reference indices. Status 0 ok, 2 dimension mismatch.
///
/// # Safety
/// `queries` must hold `count * dim` f32; `out_d`/`out_i` must hold `count`.
#[no_mangle]
pub unsafe extern "C" fn nnk_query(tree: *const KdTree, queries: *const f32,
                                   count: u32, dim: u8, out_d: *mut f32,
                                   out_i: *mut u32) -> i32 {
    let tree = match tree.as_ref() {
        Some(t) => t,
        None => return STATUS_EMPTY_REFERENCE,
    };
    if dim as usize != tree.dim {
        return STATUS_DIM_MISMATCH;
    }
    let q = std::slice::from_raw_parts(queries, count as usize * dim as usize);
    let d = std::slice::from_raw_parts_mut(out_d, count as usize);
    let i = std::slice::from_raw_parts_mut(out_i, count as usize);
    tree.query(q, d, i);
    STATUS_OK
}

/// # Safety
/// `tree` must come from `nnk_build_tree` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nnk_free(tree: *mut KdTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Element-wise asymmetric Chamfer over `pairs` cloud pairs laid out as
/// concatenated coordinate buffers with per-pair counts. A bad pair (empty
/// reference) gets per-pair status 1 and value 0; the batch continues.
///
/// # Safety
/// Coordinate buffers must match the totals implied by the count arrays;
/// `out` and `out_status` must hold `pairs` elements.
#[no_mangle]
pub unsafe extern "C" fn nnk_batched_chamfer(
    q_coords: *const f32, q_counts: *const u32,
    r_coords: *const f32, r_counts: *const u32,
    pairs: u32, dim: u8, out: *mut f64, out_status: *mut i32) -> i32 {
    if dim == 0 {
        return STATUS_DIM_MISMATCH;
    }
    let dim = dim as usize;
    let qc = std::slice::from_raw_parts(q_counts, pairs as usize);
    let rc = std::slice::from_raw_parts(r_counts, pairs as usize);
    let qtotal: usize = qc.iter().map(|&c| c as usize).sum();
    let rtotal: usize = rc.iter().map(|&c| c as usize).sum();
    let q = std::slice::from_raw_parts(q_coords, qtotal * dim);
    let r = std::slice::from_raw_parts(r_coords, rtotal * dim);
    let out = std::slice::from_raw_parts_mut(out, pairs as usize);
    let status = std::slice::from_raw_parts_mut(out_status, pairs as usize);
    let mut qo = 0usize;
    let mut ro = 0usize;
    for p in 0..pairs as usize {
        let nq = qc[p] as usize;
        let nr = rc[p] as usize;
        if nr == 0 || nq == 0 {
            out[p] = 0.0;
            status[p] = STATUS_EMPTY_REFERENCE;
        } else {
            out[p] = chamfer_asym(&q[qo * dim..(qo + nq) * dim],
                                  &r[ro * dim..(ro + nr) * dim], dim);
            status[p] = STATUS_OK;
        }
        qo += nq;
        ro += nr;
    }
    STATUS_OK
}

// ---------------------------------------------------------------------------
// Subprocess framing (shared with the binary front end)
// ---------------------------------------------------------------------------

pub mod protocol {
    use super::*;
    use std::io::{Read, Write};

    pub const MAGIC: &[u8; 4] = b"NNK1";
    pub const VERSION: u8 = 1;
    pub const OP_NN: u8 = 0;
    pub const OP_CHAMFER: u8 = 1;

    pub struct Cloud {
        pub count: u32,
        pub dim: u8,
        pub coords: Vec<f32>,
    }

    pub fn read_cloud(input: &mut impl Read) -> std::io::Result<Cloud> {
        let mut head = [0u8; 5];
        input.read_exact(&mut head)?;
        let count = u32::from_le_bytes(head[..4].try_into().unwrap());
        let dim = head[4];
        let mut raw = vec![0u8; count as usize * dim as usize * 4];
        input.read_exact(&mut raw)?;
        let coords = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Cloud { count, dim, coords })
    }

    fn write_header(output: &mut impl Write, status: u8) -> std::io::Result<()> {
        output.write_all(MAGIC)?;
        output.write_all(&[VERSION, status])
    }

    fn handle_nn(input: &mut impl Read, output: &mut impl Write) -> std::io::Result<()> {
        let query = read_cloud(input)?;
        let reference = read_cloud(input)?;
        if reference.count == 0 {
            return write_header(output, STATUS_EMPTY_REFERENCE as u8);
        }
        if query.dim != reference.dim {
            return write_header(output, STATUS_DIM_MISMATCH as u8);
        }
        let dim = reference.dim as usize;
        let tree = KdTree::build(&reference.coords, dim).unwrap();
        let n = query.count as usize;
        let mut dists = vec![0f32; n];
        let mut idx = vec![0u32; n];
        tree.query(&query.coords, &mut dists, &mut idx);
        write_header(output, STATUS_OK as u8)?;
        output.write_all(&(query.count).to_le_bytes())?;
        for d in &dists {
            output.write_all(&d.to_le_bytes())?;
        }
        for i in &idx {
            output.write_all(&i.to_le_bytes())?;
        }
        Ok(())
    }

    fn handle_chamfer(input: &mut impl Read, output: &mut impl Write) -> std::io::Result<()> {
        let mut head = [0u8; 4];
        input.read_exact(&mut head)?;
        let pairs = u32::from_le_bytes(head);
        let mut results = Vec::with_capacity(pairs as usize);
        for _ in 0..pairs {
            let query = read_cloud(input)?;
            let reference = read_cloud(input)?;
            if reference.count == 0 || query.count == 0 {
                results.push((STATUS_EMPTY_REFERENCE as u8, 0.0f64));
            } else if query.dim != reference.dim {
                results.push((STATUS_DIM_MISMATCH as u8, 0.0f64));
            } else {
                let v = chamfer_asym(&query.coords, &reference.coords,
                                     reference.dim as usize);
                results.push((STATUS_OK as u8, v));
            }
        }
        write_header(output, STATUS_OK as u8)?;
        output.write_all(&pairs.to_le_bytes())?;
        for (status, value) in results {
            output.write_all(&[status])?;
            output.write_all(&value.to_le_bytes())?;
        }
        Ok(())
    }

    /// Serve framed requests until EOF. An EOF at a message boundary is a
    /// clean shutdown; anywhere else it is an error.
    pub fn serve(input: &mut impl Read, output: &mut impl Write) -> std::io::Result<()> {
        loop {
            let mut head = [0u8; 6];
            match input.read(&mut head[..1])? {
                0 => return Ok(()),
                _ => input.read_exact(&mut head[1..])?,
            }
            if &head[..4] != MAGIC || head[4] != VERSION {
                return Err(std::io::Error::new(std::io::ErrorKind::InvalidData,
                                               "bad request framing"));
            }
            match head[5] {
                OP_NN => handle_nn(input, output)?,
                OP_CHAMFER => handle_chamfer(input, output)?,
                op => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("unknown opcode {op}")));
                }
            }
            output.flush()?;
        }
    }
}
