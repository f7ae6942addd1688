//! Truncated multivariate Taylor arithmetic up to third order.
//!
//! A [`Jet`] carries a value together with its partial derivatives up to the
//! requested order at a fixed base point. All arithmetic propagates
//! derivatives exactly (forward mode), so results are exact up to round-off
//! for rational expressions. Second and third derivative tables are filled
//! from a canonical index triangle, which makes their symmetry bitwise rather
//! than approximate.

/// Hard cap on the number of chart coordinates.
pub const MAX_DIM: usize = 4;

/// Value plus derivatives to order `order` at a point, in `dim` variables.
#[derive(Debug, Clone, Copy)]
pub struct Jet {
    dim: usize,
    order: usize,
    /// Value at the base point.
    pub value: f64,
    d1: [f64; MAX_DIM],
    d2: [f64; MAX_DIM * MAX_DIM],
    d3: [f64; MAX_DIM * MAX_DIM * MAX_DIM],
}

impl Jet {
    pub fn constant(value: f64, dim: usize, order: usize) -> Self {
        debug_assert!(dim <= MAX_DIM && order <= 3);
        Jet {
            dim,
            order,
            value,
            d1: [0.0; MAX_DIM],
            d2: [0.0; MAX_DIM * MAX_DIM],
            d3: [0.0; MAX_DIM * MAX_DIM * MAX_DIM],
        }
    }

    /// The seed jet of coordinate `var` at `value`.
    pub fn variable(value: f64, var: usize, dim: usize, order: usize) -> Self {
        let mut j = Jet::constant(value, dim, order);
        if order >= 1 {
            j.d1[var] = 1.0;
        }
        j
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn d1(&self, i: usize) -> f64 {
        self.d1[i]
    }

    #[inline]
    pub fn d2(&self, i: usize, j: usize) -> f64 {
        self.d2[i * MAX_DIM + j]
    }

    #[inline]
    pub fn d3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.d3[(i * MAX_DIM + j) * MAX_DIM + k]
    }

    #[inline]
    fn set_d2(&mut self, i: usize, j: usize, v: f64) {
        self.d2[i * MAX_DIM + j] = v;
        self.d2[j * MAX_DIM + i] = v;
    }

    #[inline]
    fn set_d3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        // All six permutations share one computed value.
        for (a, b, c) in [
            (i, j, k),
            (i, k, j),
            (j, i, k),
            (j, k, i),
            (k, i, j),
            (k, j, i),
        ] {
            self.d3[(a * MAX_DIM + b) * MAX_DIM + c] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        if !self.value.is_finite() {
            return false;
        }
        for i in 0..self.dim {
            if !self.d1(i).is_finite() {
                return false;
            }
            for j in i..self.dim {
                if !self.d2(i, j).is_finite() {
                    return false;
                }
                for k in j..self.dim {
                    if !self.d3(i, j, k).is_finite() {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn add(&self, o: &Jet) -> Jet {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        self.zip(o, |a, b| a - b)
    }

    pub fn neg(&self) -> Jet {
        let z = Jet::constant(0.0, self.dim, self.order);
        z.sub(self)
    }

    fn zip(&self, o: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        let mut r = Jet::constant(f(self.value, o.value), self.dim, self.order);
        for i in 0..self.dim {
            if self.order >= 1 {
                r.d1[i] = f(self.d1(i), o.d1(i));
            }
            for j in i..self.dim {
                if self.order >= 2 {
                    r.set_d2(i, j, f(self.d2(i, j), o.d2(i, j)));
                }
                for k in j..self.dim {
                    if self.order >= 3 {
                        r.set_d3(i, j, k, f(self.d3(i, j, k), o.d3(i, j, k)));
                    }
                }
            }
        }
        r
    }

    /// Leibniz product.
    pub fn mul(&self, o: &Jet) -> Jet {
        let (a, b) = (self, o);
        let mut r = Jet::constant(a.value * b.value, a.dim, a.order);
        for i in 0..a.dim {
            if a.order >= 1 {
                r.d1[i] = a.d1(i) * b.value + a.value * b.d1(i);
            }
            for j in i..a.dim {
                if a.order >= 2 {
                    r.set_d2(
                        i,
                        j,
                        a.d2(i, j) * b.value
                            + a.d1(i) * b.d1(j)
                            + a.d1(j) * b.d1(i)
                            + a.value * b.d2(i, j),
                    );
                }
                for k in j..a.dim {
                    if a.order >= 3 {
                        r.set_d3(
                            i,
                            j,
                            k,
                            a.d3(i, j, k) * b.value
                                + a.d2(i, j) * b.d1(k)
                                + a.d2(i, k) * b.d1(j)
                                + a.d2(j, k) * b.d1(i)
                                + a.d1(i) * b.d2(j, k)
                                + a.d1(j) * b.d2(i, k)
                                + a.d1(k) * b.d2(i, j)
                                + a.value * b.d3(i, j, k),
                        );
                    }
                }
            }
        }
        r
    }

    /// Chain rule for a scalar map with derivatives `f0..f3` at `self.value`.
    pub fn compose(&self, f0: f64, f1: f64, f2: f64, f3: f64) -> Jet {
        let u = self;
        let mut r = Jet::constant(f0, u.dim, u.order);
        for i in 0..u.dim {
            if u.order >= 1 {
                r.d1[i] = f1 * u.d1(i);
            }
            for j in i..u.dim {
                if u.order >= 2 {
                    r.set_d2(i, j, f2 * u.d1(i) * u.d1(j) + f1 * u.d2(i, j));
                }
                for k in j..u.dim {
                    if u.order >= 3 {
                        r.set_d3(
                            i,
                            j,
                            k,
                            f3 * u.d1(i) * u.d1(j) * u.d1(k)
                                + f2 * (u.d2(i, j) * u.d1(k)
                                    + u.d2(i, k) * u.d1(j)
                                    + u.d2(j, k) * u.d1(i))
                                + f1 * u.d3(i, j, k),
                        );
                    }
                }
            }
        }
        r
    }

    /// 1/self. The caller guards against a zero value.
    pub fn recip(&self) -> Jet {
        let v = self.value;
        let iv = 1.0 / v;
        self.compose(iv, -iv * iv, 2.0 * iv * iv * iv, -6.0 * iv * iv * iv * iv)
    }

    /// Integer power by repeated multiplication (keeps symmetry exact).
    pub fn powi(&self, k: i32) -> Jet {
        if k == 0 {
            return Jet::constant(1.0, self.dim, self.order);
        }
        let neg = k < 0;
        let mut acc = *self;
        for _ in 1..k.unsigned_abs() {
            acc = acc.mul(self);
        }
        if neg {
            acc.recip()
        } else {
            acc
        }
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value.sin_cos();
        self.compose(s, c, -s, -c)
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value.sin_cos();
        self.compose(c, -s, -c, s)
    }

    pub fn exp(&self) -> Jet {
        let e = self.value.exp();
        self.compose(e, e, e, e)
    }

    /// Natural logarithm. Caller guards `value > 0`.
    pub fn ln(&self) -> Jet {
        let v = self.value;
        self.compose(v.ln(), 1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))
    }

    /// Square root. Caller guards `value > 0`.
    pub fn sqrt(&self) -> Jet {
        let s = self.value.sqrt();
        self.compose(
            s,
            0.5 / s,
            -0.25 / (s * self.value),
            0.375 / (s * self.value * self.value),
        )
    }

    /// Absolute value; differentiable away from zero.
    pub fn abs(&self) -> Jet {
        let sg = if self.value >= 0.0 { 1.0 } else { -1.0 };
        self.compose(self.value.abs(), sg, 0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_bilinear() {
        let x = Jet::variable(1.0, 0, 2, 2);
        let y = Jet::variable(1.0, 1, 2, 2);
        let p = x.mul(&y);
        assert_eq!(p.value, 1.0);
        assert_eq!(p.d1(0), 1.0);
        assert_eq!(p.d1(1), 1.0);
        assert_eq!(p.d2(0, 1), 1.0);
        assert_eq!(p.d2(1, 0), 1.0);
        assert_eq!(p.d2(0, 0), 0.0);
    }

    #[test]
    fn cube_third_derivative() {
        let x = Jet::variable(2.0, 0, 1, 3);
        let c = x.powi(3);
        assert_eq!(c.value, 8.0);
        assert_eq!(c.d1(0), 12.0);
        assert_eq!(c.d2(0, 0), 12.0);
        assert_eq!(c.d3(0, 0, 0), 6.0);
    }

    #[test]
    fn exp_jets_all_one_at_origin() {
        let x = Jet::variable(0.0, 0, 1, 3);
        let e = x.exp();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.d1(0), 1.0);
        assert_eq!(e.d2(0, 0), 1.0);
        assert_eq!(e.d3(0, 0, 0), 1.0);
    }

    #[test]
    fn symmetry_is_bitwise() {
        let x = Jet::variable(0.3, 0, 3, 3);
        let y = Jet::variable(-1.2, 1, 3, 3);
        let z = Jet::variable(0.7, 2, 3, 3);
        let f = x.mul(&y).sin().mul(&z.exp()).add(&x.recip());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(f.d2(i, j).to_bits(), f.d2(j, i).to_bits());
                for k in 0..3 {
                    let v = f.d3(i, j, k).to_bits();
                    assert_eq!(v, f.d3(i, k, j).to_bits());
                    assert_eq!(v, f.d3(j, i, k).to_bits());
                    assert_eq!(v, f.d3(k, j, i).to_bits());
                }
            }
        }
    }
}
