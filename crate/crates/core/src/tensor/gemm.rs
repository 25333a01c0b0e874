//! Packed, cache-blocked matrix multiply.
//!
//! Operands are copied into zero-padded micro-panels (`MR` rows of `A`, `NR`
//! columns of `B`) and a fixed-size register tile is accumulated over each
//! `KC` slice of the shared dimension. Partial tiles are padded, not
//! special-cased, so the work done for `M` rows is proportional to
//! `ceil(M / MR)`. When `M` is the output-channel count of a convolution that
//! is what shapes the latency staircase.
//!
//! Each output element is summed in the same order regardless of the thread
//! count: threads own disjoint row ranges and never split the `K` loop.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Register tile height (rows of `A`, i.e. output channels of a convolution).
pub const MR: usize = 16;
/// Register tile width (columns of `B`).
pub const NR: usize = 4;

const KC: usize = 256;
const MC: usize = 64;
const NC: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Strided read-only view of a logical `rows x cols` matrix.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    row_stride: usize,
    col_stride: usize,
}

impl<'a, T: Copy> View<'a, T> {
    fn new(data: &'a [T], cols_in_memory: usize, trans: Transpose) -> Self {
        match trans {
            Transpose::No => View {
                data,
                row_stride: cols_in_memory,
                col_stride: 1,
            },
            Transpose::Yes => View {
                data,
                row_stride: 1,
                col_stride: cols_in_memory,
            },
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.row_stride + c * self.col_stride]
    }

    fn offset_rows(self, r0: usize) -> Self {
        View {
            data: &self.data[r0 * self.row_stride..],
            ..self
        }
    }
}

/// GEMM driver with an explicit thread count.
#[derive(Debug, Clone, Copy)]
pub struct Gemm {
    pub threads: usize,
}

impl Default for Gemm {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

impl Gemm {
    pub fn single_thread() -> Self {
        Self::default()
    }

    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads: threads.max(1),
        }
    }

    /// `op(a) · op(b)` for rank-2 tensors.
    pub fn run<T: Scalar>(
        &self,
        a: &Tensor<T>,
        ta: Transpose,
        b: &Tensor<T>,
        tb: Transpose,
    ) -> Result<Tensor<T>> {
        let (ar, ac) = a.dims2()?;
        let (br, bc) = b.dims2()?;
        let (m, k) = match ta {
            Transpose::No => (ar, ac),
            Transpose::Yes => (ac, ar),
        };
        let (k2, n) = match tb {
            Transpose::No => (br, bc),
            Transpose::Yes => (bc, br),
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "gemm inner dimensions disagree: {m}x{k} times {k2}x{n}"
            )));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_into(
            m,
            n,
            k,
            a.data(),
            ac,
            ta,
            b.data(),
            bc,
            tb,
            &mut c,
            self.threads,
        );
        Tensor::from_vec(&[m, n], c)
    }
}

/// Single-threaded `op(a) · op(b)`.
pub fn gemm<T: Scalar>(
    a: &Tensor<T>,
    ta: Transpose,
    b: &Tensor<T>,
    tb: Transpose,
) -> Result<Tensor<T>> {
    Gemm::single_thread().run(a, ta, b, tb)
}

/// Raw entry point: `c[m x n] += op(a) · op(b)`.
///
/// `a_cols` / `b_cols` are the column counts of the operands as stored in
/// memory (before transposition). `c` is row-major with `n` columns and is
/// accumulated into, so callers zero it first for a plain product.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_cols: usize,
    ta: Transpose,
    b: &[T],
    b_cols: usize,
    tb: Transpose,
    c: &mut [T],
    threads: usize,
) {
    assert_eq!(c.len(), m * n, "output buffer does not match m x n");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let av = View::new(a, a_cols, ta);
    let bv = View::new(b, b_cols, tb);

    let threads = threads.max(1).min(m.div_ceil(MR));
    if threads == 1 {
        blocked(m, n, k, av, bv, c);
        return;
    }
    let rows_per = m.div_ceil(MR).div_ceil(threads) * MR;
    std::thread::scope(|s| {
        for (t, chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let r0 = t * rows_per;
            let rows = chunk.len() / n;
            let av = av.offset_rows(r0);
            s.spawn(move || blocked(rows, n, k, av, bv, chunk));
        }
    });
}

fn blocked<T: Scalar>(m: usize, n: usize, k: usize, a: View<'_, T>, b: View<'_, T>, c: &mut [T]) {
    let mut packed_a = vec![T::zero(); MC.div_ceil(MR) * MR * KC];
    let mut packed_b = vec![T::zero(); NC.div_ceil(NR) * NR * KC];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(&mut packed_b, b, pc, kc, jc, nc);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(&mut packed_a, a, ic, mc, pc, kc);
                macro_kernel(&packed_a, &packed_b, mc, nc, kc, c, ic, jc, n);
            }
        }
    }
}

fn pack_a<T: Scalar>(dst: &mut [T], a: View<'_, T>, ic: usize, mc: usize, pc: usize, kc: usize) {
    for (panel, r0) in (0..mc).step_by(MR).enumerate() {
        let base = panel * kc * MR;
        let rows = MR.min(mc - r0);
        for p in 0..kc {
            let out = &mut dst[base + p * MR..base + (p + 1) * MR];
            for (i, slot) in out.iter_mut().enumerate() {
                *slot = if i < rows {
                    a.at(ic + r0 + i, pc + p)
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn pack_b<T: Scalar>(dst: &mut [T], b: View<'_, T>, pc: usize, kc: usize, jc: usize, nc: usize) {
    for (panel, c0) in (0..nc).step_by(NR).enumerate() {
        let base = panel * kc * NR;
        let cols = NR.min(nc - c0);
        for p in 0..kc {
            let out = &mut dst[base + p * NR..base + (p + 1) * NR];
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = if j < cols {
                    b.at(pc + p, jc + c0 + j)
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn macro_kernel<T: Scalar>(
    pa: &[T],
    pb: &[T],
    mc: usize,
    nc: usize,
    kc: usize,
    c: &mut [T],
    ic: usize,
    jc: usize,
    ldc: usize,
) {
    for (bp, c0) in (0..nc).step_by(NR).enumerate() {
        let b_panel = &pb[bp * kc * NR..(bp + 1) * kc * NR];
        let cols = NR.min(nc - c0);
        for (ap, r0) in (0..mc).step_by(MR).enumerate() {
            let a_panel = &pa[ap * kc * MR..(ap + 1) * kc * MR];
            let acc = micro_kernel(a_panel, b_panel, kc);
            let rows = MR.min(mc - r0);
            for i in 0..rows {
                let row = &mut c[(ic + r0 + i) * ldc + jc + c0..][..cols];
                for (j, out) in row.iter_mut().enumerate() {
                    *out += acc[j][i];
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel<T: Scalar>(a_panel: &[T], b_panel: &[T], kc: usize) -> [[T; MR]; NR] {
    let mut acc = [[T::zero(); MR]; NR];
    for p in 0..kc {
        let a: &[T; MR] = a_panel[p * MR..(p + 1) * MR].try_into().unwrap();
        let b: &[T; NR] = b_panel[p * NR..(p + 1) * NR].try_into().unwrap();
        for j in 0..NR {
            let bj = b[j];
            for i in 0..MR {
                acc[j][i] += a[i] * bj;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c.data_mut()[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn hand_multiplication() {
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        let c = gemm(&a, Transpose::No, &b, Transpose::No).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn identity_and_annihilator() {
        let b = Tensor::<f32>::from_vec(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        let i2 = Tensor::identity(2);
        assert_eq!(gemm(&i2, Transpose::No, &b, Transpose::No).unwrap(), b);
        let z = Tensor::zeros(&[2, 2]);
        let c = gemm(&b, Transpose::No, &z, Transpose::No).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn right_identity_is_exact() {
        let mut rng = Rng::new(3);
        let a = Tensor::<f32>::randn(&[37, 29], 1.0, &mut rng);
        let c = gemm(&a, Transpose::No, &Tensor::identity(29), Transpose::No).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn mismatch_is_shape_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(
            gemm(&a, Transpose::No, &b, Transpose::No),
            Err(Error::Shape(_))
        ));
        assert!(gemm(&a, Transpose::No, &b, Transpose::Yes).is_ok());
    }

    #[test]
    fn matches_naive_across_blocking_edges() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (17, 300, 5), (65, 257, 1030), (3, 513, 9)] {
            let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
            let want = naive(&a, &b);
            let got = gemm(&a, Transpose::No, &b, Transpose::No).unwrap();
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{m}x{k}x{n}");
            }
        }
    }

    #[test]
    fn transposed_operands() {
        let mut rng = Rng::new(5);
        let a = Tensor::<f64>::randn(&[7, 19], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[11, 19], 1.0, &mut rng);
        let want = naive(&a, &b.transpose().unwrap());
        let got = gemm(&a, Transpose::No, &b, Transpose::Yes).unwrap();
        let got2 = gemm(
            &a.transpose().unwrap(),
            Transpose::Yes,
            &b,
            Transpose::Yes,
        )
        .unwrap();
        for ((x, y), z) in got.data().iter().zip(want.data()).zip(got2.data()) {
            assert!((x - y).abs() < 1e-12);
            assert_eq!(x, z);
        }
    }

    #[test]
    fn threads_do_not_change_bits() {
        let mut rng = Rng::new(9);
        let a = Tensor::<f32>::randn(&[70, 300], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[300, 45], 1.0, &mut rng);
        let one = Gemm::single_thread()
            .run(&a, Transpose::No, &b, Transpose::No)
            .unwrap();
        let four = Gemm::with_threads(4)
            .run(&a, Transpose::No, &b, Transpose::No)
            .unwrap();
        assert_eq!(one, four);
    }
}
