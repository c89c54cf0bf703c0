//! Shape arithmetic and raw loops shared by the forward and backward passes.

use crate::real::Real;
use crate::tensor::numel;

/// Numpy-style broadcast of two shapes, aligned on the right.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How the elements of a broadcast input line up with the output.
pub(crate) enum BMap {
    /// Input and output have the same layout.
    Same,
    /// Input repeats with this period (trailing-suffix or scalar broadcast).
    Cycle(usize),
    /// Explicit input offset for every output element.
    Gather(Vec<usize>),
}

pub(crate) fn broadcast_map(input: &[usize], out: &[usize]) -> BMap {
    if input == out {
        return BMap::Same;
    }
    let n_in = numel(input);
    let trimmed: &[usize] = {
        let lead = input.iter().take_while(|&&d| d == 1).count();
        &input[lead..]
    };
    if n_in == 1 || (trimmed.len() <= out.len() && out.ends_with(trimmed)) {
        return BMap::Cycle(n_in);
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + pad] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let total = numel(out);
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += in_strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= in_strides[d] * out[d];
            idx[d] = 0;
        }
    }
    BMap::Gather(map)
}

/// Materializes a broadcast input at output resolution.
pub(crate) fn expand<T: Real>(data: &[T], map: &BMap, out_len: usize) -> Vec<T> {
    match map {
        BMap::Same => data.to_vec(),
        BMap::Cycle(p) => {
            let mut v = Vec::with_capacity(out_len);
            while v.len() < out_len {
                v.extend_from_slice(&data[..*p]);
            }
            v
        }
        BMap::Gather(idx) => idx.iter().map(|&i| data[i]).collect(),
    }
}

/// Sums an output-resolution gradient back onto a broadcast input.
pub(crate) fn reduce_into<T: Real>(grad: &[T], map: &BMap, acc: &mut [T]) {
    match map {
        BMap::Same => {
            for (a, &g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
        }
        BMap::Cycle(p) => {
            for chunk in grad.chunks(*p) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
        }
        BMap::Gather(idx) => {
            for (&i, &g) in idx.iter().zip(grad) {
                acc[i] += g;
            }
        }
    }
}

/// Elementwise binary op with broadcasting.
pub(crate) fn zip_broadcast<T: Real>(
    a: &[T],
    a_map: &BMap,
    b: &[T],
    b_map: &BMap,
    out_len: usize,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    match (a_map, b_map) {
        (BMap::Same, BMap::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (BMap::Same, BMap::Cycle(p)) => {
            let mut out = Vec::with_capacity(out_len);
            for chunk in a.chunks(*p) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (BMap::Cycle(p), BMap::Same) => {
            let mut out = Vec::with_capacity(out_len);
            for chunk in b.chunks(*p) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        _ => {
            let ea = expand(a, a_map, out_len);
            let eb = expand(b, b_map, out_len);
            ea.into_iter().zip(eb).map(|(x, y)| f(x, y)).collect()
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Real>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // Copy contiguous runs when the last axis stays in place.
    let run = if perm[rank - 1] == rank - 1 {
        out_shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..total / run {
        if run > 1 {
            out.extend_from_slice(&data[off..off + run]);
        } else {
            out.push(data[off]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn gather_map_matches_manual_indexing() {
        // [2,1,3] broadcast to [2,4,3]
        let BMap::Gather(map) = broadcast_map(&[2, 1, 3], &[2, 4, 3]) else {
            panic!("expected gather map");
        };
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    assert_eq!(map[(i * 4 + j) * 3 + k], i * 3 + k);
                }
            }
        }
    }

    #[test]
    fn permute_transposes() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let (out, shape) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let (back, _) = permute(&out, &shape, &inverse_perm(&[1, 0]));
        assert_eq!(back, data);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
