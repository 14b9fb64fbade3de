use rand::Rng;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

struct AddOp;
impl<T: Float> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
    }
}

struct SubOp;
impl<T: Float> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|&v| -v).collect())]
    }
}

struct MulOp;
impl<T: Float> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (x[0].data(), x[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Float> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct IdentityGrad;
impl<T: Float> Backward<T> for IdentityGrad {
    fn name(&self) -> &'static str {
        "identity"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct ReluOp;
impl<T: Float> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let z = T::zero();
        vec![Some(x[0].data().iter().zip(g).map(|(&x, &g)| if x > z { g } else { z }).collect())]
    }
}

struct SigmoidSlopeOp<T>(T);
impl<T: Float> Backward<T> for SigmoidSlopeOp<T> {
    fn name(&self) -> &'static str {
        "sigmoid_slope"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = self.0;
        vec![Some(y.data().iter().zip(g).map(|(&y, &g)| g * s * y * (T::one() - y)).collect())]
    }
}

struct LogOp;
impl<T: Float> Backward<T> for LogOp {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(x[0].data().iter().zip(g).map(|(&x, &g)| g / x).collect())]
    }
}

struct PowOp<T>(T);
impl<T: Float> Backward<T> for PowOp<T> {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = self.0;
        vec![Some(x[0].data().iter().zip(g).map(|(&x, &g)| g * p * x.powf(p - T::one())).collect())]
    }
}

struct ClampOp<T> {
    lo: T,
    hi: T,
}
impl<T: Float> Backward<T> for ClampOp<T> {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let z = T::zero();
        vec![Some(x[0].data().iter().zip(g).map(|(&x, &g)| if x >= self.lo && x <= self.hi { g } else { z }).collect())]
    }
}

struct AddBiasOp {
    channels: usize,
}
impl<T: Float> Backward<T> for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gb = needs[1].then(|| {
            let mut gb = vec![T::zero(); self.channels];
            for row in g.chunks_exact(self.channels) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            gb
        });
        vec![needs[0].then(|| g.to_vec()), gb]
    }
}

struct MaskOp<T> {
    mask: Vec<T>,
}
impl<T: Float> Backward<T> for MaskOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

fn same_shape<T: Float>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::dim(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<T: Float> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(out, vec![a, b], AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(out, vec![a, b], SubOp))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(out, vec![a, b], MulOp))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.record(out, vec![a], ScaleOp(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.record(out, vec![a], IdentityGrad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        let out = self.value(a).map(|v| if v > z { v } else { z });
        self.record(out, vec![a], ReluOp)
    }

    /// `1 / (1 + exp(-slope * z))`, elementwise.
    pub fn sigmoid_slope(&mut self, z: Var, slope: T) -> Var {
        let out = self.value(z).map(|v| sigmoid(slope * v));
        self.record(out, vec![z], SigmoidSlopeOp(slope))
    }

    /// Natural logarithm.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.ln());
        self.record(out, vec![a], LogOp)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.record(out, vec![a], PowOp(p))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.record(out, vec![a], ClampOp { lo, hi })
    }

    /// Adds `bias` (shape `[C]`) along the last axis of `x` (shape `[.., C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [c] {
            return Err(TensorError::dim(
                "add_bias",
                format!("bias {:?} against features {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.record(out, vec![x, bias], AddBiasOp { channels: c }))
    }

    /// Inverted dropout: at train time zeroes each element with probability
    /// `rate` and scales survivors by `1 / (1 - rate)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        if !train || rate <= 0.0 {
            return x;
        }
        let keep = T::cst(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape");
        self.record(out, vec![x], MaskOp { mask })
    }
}

#[inline]
pub fn sigmoid<T: Float>(z: T) -> T {
    // Branch keeps exp() from overflowing for large |z|.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
