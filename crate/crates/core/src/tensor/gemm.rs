//! Packed, register-blocked matrix multiply.
//!
//! Every output element accumulates its products in ascending inner index
//! starting from the value already stored in `c`, which is the order a naive
//! triple loop uses. Blocking only changes which elements are computed
//! together, never the summation order.

const MR: usize = 8;
const NR: usize = 8;
const KC: usize = 256;

/// Strided read-only view of a matrix: element `(i, j)` is `data[i * rs + j * cs]`.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, with `c` row-major.
pub fn gemm(m: usize, n: usize, k: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64]) {
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let n_panels = n.div_ceil(NR);
    let mut packed_b = vec![0.0; n_panels * KC * NR];
    let mut packed_a = vec![0.0; KC * MR];

    // Inner-dimension blocks run in ascending order and each one continues
    // from the partial sums already in `c`.
    let mut p0 = 0;
    while p0 < k {
        let kc = KC.min(k - p0);
        // B block packed into column panels of width NR: panel[p][0..NR].
        for jp in 0..n_panels {
            let j0 = jp * NR;
            let w = NR.min(n - j0);
            let panel = &mut packed_b[jp * kc * NR..(jp + 1) * kc * NR];
            for p in 0..kc {
                for jj in 0..NR {
                    panel[p * NR + jj] = if jj < w { b.at(p0 + p, j0 + jj) } else { 0.0 };
                }
            }
        }

        let mut i0 = 0;
        while i0 < m {
            let h = MR.min(m - i0);
            for p in 0..kc {
                for ii in 0..MR {
                    packed_a[p * MR + ii] = if ii < h { a.at(i0 + ii, p0 + p) } else { 0.0 };
                }
            }
            for jp in 0..n_panels {
                let j0 = jp * NR;
                let w = NR.min(n - j0);
                let panel = &packed_b[jp * kc * NR..(jp + 1) * kc * NR];
                let mut acc = [[0.0f64; NR]; MR];
                for ii in 0..h {
                    acc[ii][..w].copy_from_slice(&c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + w]);
                }
                kernel(&packed_a, panel, kc, &mut acc);
                for ii in 0..h {
                    c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + w].copy_from_slice(&acc[ii][..w]);
                }
            }
            i0 += MR;
        }
        p0 += kc;
    }
}

#[inline(always)]
fn kernel(a: &[f64], b: &[f64], k: usize, acc: &mut [[f64; NR]; MR]) {
    let a = &a[..k * MR];
    let b = &b[..k * NR];
    for (ap, bp) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for ii in 0..MR {
            let av = ap[ii];
            for jj in 0..NR {
                acc[ii][jj] += av * bp[jj];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;

    #[test]
    fn strided_views_match_naive_loops() {
        let mut rng = Rng::new(3);
        for &(m, n, k) in &[(1, 1, 1), (4, 8, 3), (5, 9, 13), (13, 3, 40), (17, 11, 600)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let bt: Vec<f64> = (0..n * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let init: Vec<f64> = (0..m * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            // a^T stored as [k x m], b stored transposed as [n x k].
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c1 = init.clone();
            gemm(m, n, k, MatRef::transposed(&at, m), MatRef::transposed(&bt, k), &mut c1);
            for i in 0..m {
                for j in 0..n {
                    let mut s = init[i * n + j];
                    for p in 0..k {
                        s += a[i * k + p] * bt[j * k + p];
                    }
                    assert_eq!(c1[i * n + j].to_bits(), s.to_bits());
                }
            }
        }
    }
}
