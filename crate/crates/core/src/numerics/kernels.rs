//! Low-level f64 kernels: matrix products and exact summation.

/// Exact running sum of f64 values (Shewchuk partials).
///
/// `value` returns the correctly rounded result of the exact real sum, so it
/// does not depend on the order of the addends. Attention mixes and pooling
/// reductions use this to make token-permutation invariance hold bit-for-bit.
#[derive(Clone, Debug, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum {
            partials: Vec::with_capacity(8),
        }
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Rounds the non-overlapping expansion once, from the largest partial
    /// down, with the half-way correction that keeps the result equal to the
    /// correctly rounded exact sum.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// One-shot exact sum.
pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Splits the product `a * b` into a rounded head and exact tail via FMA.
#[inline]
pub fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

/// out += a (n x k) * b (k x m)
pub fn matmul_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a (n x k) * b (k x m)
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_acc(a, b, n, k, m, out);
}

/// out += a (n x k) * b^T where b is (m x k)
pub fn matmul_tb_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out = a * b^T
pub fn matmul_tb(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_tb_acc(a, b, n, k, m, out);
}

/// out += a^T * b where a is (n x p), b is (n x q), out is (p x q)
pub fn matmul_ta_acc(a: &[f64], b: &[f64], n: usize, p: usize, q: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * p);
    debug_assert_eq!(b.len(), n * q);
    debug_assert_eq!(out.len(), p * q);
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * q..(i + 1) * q];
        for (pp, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[pp * q..(pp + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsum_is_order_independent() {
        let xs = vec![1e16, 1.0, -1e16, 1e-8, 0.1, -0.05, 3.25e7, -7.5e-3];
        let mut perm = xs.clone();
        perm.reverse();
        assert_eq!(fsum(xs.iter().copied()).to_bits(), fsum(perm).to_bits());

        let ys = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let shuffled = vec![0.4, 0.1, 0.5, 0.3, 0.2];
        assert_eq!(fsum(ys).to_bits(), fsum(shuffled).to_bits());
    }

    #[test]
    fn fsum_matches_exact_small_cases() {
        assert_eq!(fsum([]), 0.0);
        assert_eq!(fsum([2.5]), 2.5);
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        // 0.1 ten times is famously not 1.0 under naive summation.
        assert_eq!(fsum(std::iter::repeat(0.1).take(10)), 1.0);
    }

    #[test]
    fn matmul_hand_checked() {
        // (2x3) * (3x2) with integer entries.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // 2x3 (as m x k for tb)
        let mut tb = [0.0; 4];
        matmul_tb(&a, &b, 2, 3, 2, &mut tb);
        // Compare against explicit transpose.
        let bt = [2.0, -1.0, 1.0, 1.5, 0.0, 2.5]; // 3x2
        let mut plain = [0.0; 4];
        matmul(&a, &bt, 2, 3, 2, &mut plain);
        assert_eq!(tb, plain);

        let mut ta = [0.0; 9];
        matmul_ta_acc(&a, &a, 2, 3, 3, &mut ta);
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0]; // 3x2
        let mut plain2 = [0.0; 9];
        matmul(&at, &a, 3, 2, 3, &mut plain2);
        assert_eq!(ta, plain2);
    }

    #[test]
    fn two_product_recovers_exact_product() {
        let (p, e) = two_product(0.1, 0.3);
        // p + e is the exact real product; p alone is the rounded one.
        assert_eq!(p, 0.1 * 0.3);
        assert!(e != 0.0);
    }
}
