//! Scalar abstraction the tape is generic over: plain f64 for gradients,
//! dual numbers for forward-over-reverse Hessian-vector products.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    /// Construct with an explicit tangent (ignored by plain f64).
    fn with_tangent(value: f64, tangent: f64) -> Self;
    /// Primal part.
    fn val(self) -> f64;
    /// Tangent part (zero for plain f64).
    fn tangent(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn mul_f64(self, c: f64) -> Self;
}

impl Real for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn with_tangent(value: f64, _tangent: f64) -> Self {
        value
    }
    fn val(self) -> f64 {
        self
    }
    fn tangent(self) -> f64 {
        0.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn mul_f64(self, c: f64) -> Self {
        self * c
    }
}

/// First-order dual number: value plus directional tangent. Running the
/// whole forward-and-backward pass in `Dual` arithmetic turns the reverse
/// gradient into an exact Hessian-vector product along the seeded direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual {
            v: self.v + rhs.v,
            t: self.t + rhs.t,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual {
            v: self.v - rhs.v,
            t: self.t - rhs.t,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            v: self.v * rhs.v,
            t: self.t * rhs.v + self.v * rhs.t,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let q = self.v / rhs.v;
        Dual {
            v: q,
            t: (self.t - q * rhs.t) / rhs.v,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            t: -self.t,
        }
    }
}

impl Real for Dual {
    fn zero() -> Self {
        Dual { v: 0.0, t: 0.0 }
    }
    fn one() -> Self {
        Dual { v: 1.0, t: 0.0 }
    }
    fn from_f64(x: f64) -> Self {
        Dual { v: x, t: 0.0 }
    }
    fn with_tangent(value: f64, tangent: f64) -> Self {
        Dual { v: value, t: tangent }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn tangent(self) -> f64 {
        self.t
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            t: self.t * e,
        }
    }
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            t: self.t / self.v,
        }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual {
            v: s,
            t: if s == 0.0 { 0.0 } else { self.t / (2.0 * s) },
        }
    }
    fn tanh(self) -> Self {
        let th = self.v.tanh();
        Dual {
            v: th,
            t: self.t * (1.0 - th * th),
        }
    }
    fn mul_f64(self, c: f64) -> Self {
        Dual {
            v: self.v * c,
            t: self.t * c,
        }
    }
}

/// Numerically stable softplus ln(1 + e^x), branching on the primal sign.
pub fn softplus<S: Real>(x: S) -> S {
    if x.val() > 0.0 {
        x + (S::one() + (-x).exp()).ln()
    } else {
        (S::one() + x.exp()).ln()
    }
}

/// Logistic sigmoid, the softplus derivative.
pub fn sigmoid<S: Real>(x: S) -> S {
    if x.val() > 0.0 {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub const GELU_COEF: f64 = 0.044715;

fn gelu_scale() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Smooth GELU (tanh form).
pub fn gelu<S: Real>(x: S) -> S {
    let inner = (x + x * x * x.mul_f64(GELU_COEF)).mul_f64(gelu_scale());
    x.mul_f64(0.5) * (S::one() + inner.tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_derivative<S: Real>(x: S) -> S {
    let u = (x + x * x * x.mul_f64(GELU_COEF)).mul_f64(gelu_scale());
    let th = u.tanh();
    let sech2 = S::one() - th * th;
    let du = (S::one() + (x * x).mul_f64(3.0 * GELU_COEF)).mul_f64(gelu_scale());
    (S::one() + th).mul_f64(0.5) + x.mul_f64(0.5) * sech2 * du
}
