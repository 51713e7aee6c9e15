mod conv;
mod dense;
mod norm;
mod optim;
mod pool;

pub use conv::{conv2d, conv2d_backward, Conv2dGrads};
pub use dense::{
    concat, concat_backward, linear, linear_backward, softmax, softmax_xent, softmax_xent_backward,
    LinearGrads,
};
pub use norm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, relu, relu_backward, BatchNormGrads,
    BnCache,
};
pub use optim::sgd_step;
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, pool_out_size,
    MaxPoolCache,
};

use crate::tensor::Scalar;

/// c(m,n) += a(m,k) * b(k,n), all row-major. The k-major inner loop keeps
/// writes sequential so the compiler can vectorize it.
pub(crate) fn matmul_acc<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c(m,n) += a(m,k) * b(n,k)^T; rows of `b` are used as columns.
pub(crate) fn matmul_nt_acc<E: Scalar>(
    a: &[E],
    b: &[E],
    c: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

/// c(m,n) += a(k,m)^T * b(k,n).
pub(crate) fn matmul_tn_acc<E: Scalar>(
    a: &[E],
    b: &[E],
    c: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        // a = [[1,2],[3,4],[5,6]] (3x2), b = [[7,8,9],[10,11,12]] (2x3)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let expect = [27.0, 30.0, 33.0, 61.0, 68.0, 75.0, 95.0, 106.0, 117.0];

        let mut c = [0.0f64; 9];
        matmul_acc(&a, &b, &mut c, 3, 2, 3);
        assert_eq!(c, expect);

        // Same product via a * (b^T)^T: pass b transposed (3x2).
        let bt = [7.0, 10.0, 8.0, 11.0, 9.0, 12.0];
        let mut c = [0.0f64; 9];
        matmul_nt_acc(&a, &bt, &mut c, 3, 2, 3);
        assert_eq!(c, expect);

        // And via (a^T)^T * b: pass a transposed (2x3).
        let at = [1.0, 3.0, 5.0, 2.0, 4.0, 6.0];
        let mut c = [0.0f64; 9];
        matmul_tn_acc(&at, &b, &mut c, 3, 2, 3);
        assert_eq!(c, expect);
    }
}
