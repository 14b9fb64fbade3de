use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{strides, Tensor};

struct ReshapeOp;
impl<T: Float> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// Gather with a fixed source index per output element.
struct GatherOp {
    src: Vec<usize>,
    in_len: usize,
}
impl<T: Float> Backward<T> for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); self.in_len];
        for (&s, &gv) in self.src.iter().zip(g) {
            out[s] += gv;
        }
        vec![Some(out)]
    }
}

/// Concatenation along an axis: `outer` blocks, each input contributing
/// `widths[i]` contiguous elements per block.
struct ConcatOp {
    outer: usize,
    widths: Vec<usize>,
}
impl<T: Float> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            if need {
                let mut gi = Vec::with_capacity(self.outer * w);
                for o in 0..self.outer {
                    gi.extend_from_slice(&g[o * total + offset..][..w]);
                }
                out.push(Some(gi));
            } else {
                out.push(None);
            }
            offset += w;
        }
        out
    }
}

struct WeightedSumOp;
impl<T: Float> Backward<T> for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let w = x[0].data();
        let mut out = Vec::with_capacity(x.len());
        out.push(needs[0].then(|| x[1..].iter().map(|t| t.data().iter().zip(g).map(|(&a, &b)| a * b).sum()).collect()));
        for (k, need) in needs[1..].iter().enumerate() {
            out.push(need.then(|| g.iter().map(|&gv| gv * w[k]).collect()));
        }
        out
    }
}

impl<T: Float> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::dim("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record(out, vec![a], ReshapeOp))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(TensorError::dim("flatten", "scalar input"));
        }
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim("permute", format!("{perm:?} on {shape:?}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n: usize = out_shape.iter().product();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            src.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        self.gather(a, src, out_shape)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::dim("slice", format!("axis {axis} range {start}..{} on {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            src.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, src, out_shape)
    }

    fn gather(&mut self, a: Var, src: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        let in_len = v.len();
        let data = src.iter().map(|&s| v.data()[s]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, vec![a], GatherOp { src, in_len }))
    }

    /// Concatenation along an existing axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} on {base:?}")));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::dim("concat", format!("{s:?} vs {base:?} along {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * widths.iter().sum::<usize>());
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * w..][..w]);
            }
        }
        let mut shape = base;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, parts.to_vec(), ConcatOp { outer, widths }))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let expanded = parts
            .iter()
            .map(|&p| {
                let mut s = self.shape(p).to_vec();
                s.push(1);
                self.reshape(p, &s)
            })
            .collect::<Result<Vec<_>>>()?;
        let axis = self.shape(expanded[0]).len() - 1;
        self.concat(&expanded, axis)
    }

    /// `sum_k w[k] * parts[k]` for a weight vector `w: [K]`.
    pub fn weighted_sum(&mut self, w: Var, parts: &[Var]) -> Result<Var> {
        if self.shape(w) != [parts.len()] || parts.is_empty() {
            return Err(TensorError::dim("weighted_sum", format!("weights {:?} for {} tensors", self.shape(w), parts.len())));
        }
        let shape = self.shape(parts[0]).to_vec();
        if parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(TensorError::dim("weighted_sum", "tensors differ in shape"));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&p, &wk) in parts.iter().zip(&wv) {
            for (o, &v) in out.iter_mut().zip(self.value(p).data()) {
                *o += wk * v;
            }
        }
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![w];
        inputs.extend_from_slice(parts);
        Ok(self.record(out, inputs, WeightedSumOp))
    }
}
