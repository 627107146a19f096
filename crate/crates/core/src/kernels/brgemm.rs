//! Batch-reduce GEMM: `C[m,n] (+)= sum_b sum_k A_b[m,k] * B_b[n,k]`.
//!
//! A blocks are `[MB, KB]` row-major, B blocks `[NB, KB]` with k fastest, C is
//! `[MB, NB]`. For every output element the sum runs over `b` outer, `k`
//! inner, so f32 results do not depend on how callers schedule blocks.

const MAX_BLOCK: usize = 64;

/// Block geometry shared by both kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BrgemmShape {
    pub mb: usize,
    pub nb: usize,
    pub kb: usize,
}

fn check(shape: BrgemmShape, a: &[usize], b: &[usize], a_len: usize, b_len: usize, c_len: usize) {
    assert_eq!(a.len(), b.len(), "brgemm: address arrays differ in length");
    assert!(!a.is_empty(), "brgemm: BS must be >= 1");
    let (ab, bb) = (shape.mb * shape.kb, shape.nb * shape.kb);
    assert!(a.iter().all(|&o| o + ab <= a_len), "brgemm: A block out of range");
    assert!(b.iter().all(|&o| o + bb <= b_len), "brgemm: B block out of range");
    assert!(shape.mb * shape.nb <= c_len, "brgemm: C tile out of range");
}

/// f32 batch-reduce GEMM. `a_offs`/`b_offs` are element offsets of the BS
/// blocks; `accumulate == false` overwrites C.
pub fn brgemm_f32(shape: BrgemmShape, a: &[f32], a_offs: &[usize], b: &[f32], b_offs: &[usize], c: &mut [f32], accumulate: bool) {
    check(shape, a_offs, b_offs, a.len(), b.len(), c.len());
    let BrgemmShape { mb, nb, kb } = shape;
    if !accumulate {
        c[..mb * nb].fill(0.0);
    }
    if nb > MAX_BLOCK || kb > MAX_BLOCK {
        return brgemm_f32_ref(shape, a, a_offs, b, b_offs, c);
    }
    let mut bt = [0f32; MAX_BLOCK * MAX_BLOCK];
    for (&ao, &bo) in a_offs.iter().zip(b_offs) {
        // transpose the B block to [KB, NB] so the inner loop is unit stride
        let blk = &b[bo..bo + nb * kb];
        for n in 0..nb {
            for k in 0..kb {
                bt[k * nb + n] = blk[n * kb + k];
            }
        }
        let ablk = &a[ao..ao + mb * kb];
        for m in 0..mb {
            let arow = &ablk[m * kb..(m + 1) * kb];
            let crow = &mut c[m * nb..(m + 1) * nb];
            for (k, &av) in arow.iter().enumerate() {
                let brow = &bt[k * nb..(k + 1) * nb];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

fn brgemm_f32_ref(shape: BrgemmShape, a: &[f32], a_offs: &[usize], b: &[f32], b_offs: &[usize], c: &mut [f32]) {
    let BrgemmShape { mb, nb, kb } = shape;
    for m in 0..mb {
        for n in 0..nb {
            let mut acc = c[m * nb + n];
            for (&ao, &bo) in a_offs.iter().zip(b_offs) {
                for k in 0..kb {
                    acc += a[ao + m * kb + k] * b[bo + n * kb + k];
                }
            }
            c[m * nb + n] = acc;
        }
    }
}

/// u8 x s8 -> s32 batch-reduce GEMM. Products widen to i32 immediately.
pub fn brgemm_u8s8s32(shape: BrgemmShape, a: &[u8], a_offs: &[usize], b: &[i8], b_offs: &[usize], c: &mut [i32], accumulate: bool) {
    check(shape, a_offs, b_offs, a.len(), b.len(), c.len());
    let BrgemmShape { mb, nb, kb } = shape;
    if !accumulate {
        c[..mb * nb].fill(0);
    }
    let mut bt = vec![0i32; nb * kb];
    for (&ao, &bo) in a_offs.iter().zip(b_offs) {
        let blk = &b[bo..bo + nb * kb];
        for n in 0..nb {
            for k in 0..kb {
                bt[k * nb + n] = blk[n * kb + k] as i32;
            }
        }
        let ablk = &a[ao..ao + mb * kb];
        for m in 0..mb {
            let arow = &ablk[m * kb..(m + 1) * kb];
            let crow = &mut c[m * nb..(m + 1) * nb];
            for (k, &av) in arow.iter().enumerate() {
                let av = av as i32;
                let brow = &bt[k * nb..(k + 1) * nb];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ONE: BrgemmShape = BrgemmShape { mb: 1, nb: 1, kb: 1 };

    #[test]
    fn scalar_product() {
        let mut c = [5.0f32];
        brgemm_f32(ONE, &[2.0], &[0], &[3.0], &[0], &mut c, false);
        assert_eq!(c, [6.0]);
    }

    #[test]
    fn batch_reduces() {
        let mut c = [0i32];
        brgemm_u8s8s32(ONE, &[2, 4], &[0, 1], &[3, 5], &[0, 1], &mut c, false);
        assert_eq!(c, [26]);
    }

    #[test]
    fn f32_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = BrgemmShape { mb: 32, nb: 32, kb: 32 };
        let bs = 4;
        let a: Vec<f32> = (0..bs * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..bs * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offs: Vec<usize> = (0..bs).map(|i| i * 1024).collect();
        let mut c = vec![0f32; 1024];
        brgemm_f32(s, &a, &offs, &b, &offs, &mut c, false);
        for m in 0..32 {
            for n in 0..32 {
                let mut want = 0f64;
                for blk in 0..bs {
                    for k in 0..32 {
                        want += a[blk * 1024 + m * 32 + k] as f64 * b[blk * 1024 + n * 32 + k] as f64;
                    }
                }
                let got = c[m * 32 + n] as f64;
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0) * 32.0, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn s32_exhaustive_extremes() {
        let av = [0u8, 1, 127, 128, 255];
        let bv = [-128i8, -1, 0, 1, 127];
        let s = BrgemmShape { mb: 2, nb: 2, kb: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let a: Vec<u8> = (0..8).map(|_| av[rng.gen_range(0..5)]).collect();
            let b: Vec<i8> = (0..8).map(|_| bv[rng.gen_range(0..5)]).collect();
            let mut c = vec![0i32; 4];
            brgemm_u8s8s32(s, &a, &[0, 4], &b, &[0, 4], &mut c, false);
            for m in 0..2 {
                for n in 0..2 {
                    let mut want = 0i64;
                    for blk in 0..2 {
                        for k in 0..2 {
                            want += a[blk * 4 + m * 2 + k] as i64 * b[blk * 4 + n * 2 + k] as i64;
                        }
                    }
                    assert_eq!(c[m * 2 + n] as i64, want);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = BrgemmShape { mb: 16, nb: 48, kb: 16 };
        let a: Vec<f32> = (0..3 * 256).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..3 * 768).map(|_| rng.gen()).collect();
        let run = || {
            let mut c = vec![1f32; 768];
            brgemm_f32(s, &a, &[0, 256, 512], &b, &[0, 768, 1536], &mut c, true);
            c
        };
        assert_eq!(run(), run());
    }
}
