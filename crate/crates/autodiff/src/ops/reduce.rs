use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

struct SumOp;
impl<T: Float> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; x[0].len()])]
    }
}

struct SumAxis0Op {
    rows: usize,
}
impl<T: Float> Backward<T> for SumAxis0Op {
    fn name(&self) -> &'static str {
        "sum_axis0"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut out = Vec::with_capacity(g.len() * self.rows);
        for _ in 0..self.rows {
            out.extend_from_slice(g);
        }
        vec![Some(out)]
    }
}

struct GlobalAvgOp {
    n: usize,
    pixels: usize,
    c: usize,
}
impl<T: Float> Backward<T> for GlobalAvgOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv = T::one() / T::cst(self.pixels as f64);
        let mut out = vec![T::zero(); self.n * self.pixels * self.c];
        for n in 0..self.n {
            let gn = &g[n * self.c..][..self.c];
            for px in out[n * self.pixels * self.c..][..self.pixels * self.c].chunks_exact_mut(self.c) {
                for (o, &gv) in px.iter_mut().zip(gn) {
                    *o = gv * inv;
                }
            }
        }
        vec![Some(out)]
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
    in_len: usize,
}
impl<T: Float> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); self.in_len];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            out[src] += gv;
        }
        vec![Some(out)]
    }
}

/// `y = a / sum(a)` over contiguous groups of `width` elements.
struct NormalizeOp {
    width: usize,
}
impl<T: Float> Backward<T> for NormalizeOp {
    fn name(&self) -> &'static str {
        "normalize"
    }
    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); g.len()];
        for ((xa, ya), (ga, oa)) in x[0]
            .data()
            .chunks_exact(self.width)
            .zip(y.data().chunks_exact(self.width))
            .zip(g.chunks_exact(self.width).zip(out.chunks_exact_mut(self.width)))
        {
            let s: T = xa.iter().copied().sum();
            let gy: T = ga.iter().zip(ya).map(|(&g, &y)| g * y).sum();
            for (o, &gv) in oa.iter_mut().zip(ga) {
                *o = (gv - gy) / s;
            }
        }
        vec![Some(out)]
    }
}

/// `-sum p ln(p + eps)` over contiguous groups of `width` elements.
struct EntropyOp<T> {
    width: usize,
    eps: T,
}
impl<T: Float> Backward<T> for EntropyOp<T> {
    fn name(&self) -> &'static str {
        "entropy"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); x[0].len()];
        for ((pa, oa), &gv) in x[0].data().chunks_exact(self.width).zip(out.chunks_exact_mut(self.width)).zip(g) {
            for (o, &p) in oa.iter_mut().zip(pa) {
                let q = p + self.eps;
                *o = -gv * (q.ln() + p / q);
            }
        }
        vec![Some(out)]
    }
}

struct SegmentSumOp {
    groups: Vec<usize>,
    width: usize,
}
impl<T: Float> Backward<T> for SegmentSumOp {
    fn name(&self) -> &'static str {
        "segment_sum"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let w = self.width;
        let mut out = Vec::with_capacity(self.groups.len() * w);
        for &grp in &self.groups {
            out.extend_from_slice(&g[grp * w..][..w]);
        }
        vec![Some(out)]
    }
}

impl<T: Float> Tape<T> {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(s), vec![a], SumOp)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::cst(n as f64))
    }

    /// Sum over the leading axis: `[r, ...] -> [...]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(TensorError::dim("sum_axis0", "scalar input"));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let mut out = vec![T::zero(); width];
        for row in self.value(a).data().chunks_exact(width.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::new(shape[1..].to_vec(), out)?;
        Ok(self.record(out, vec![a], SumAxis0Op { rows }))
    }

    /// Spatial mean of `[n, h, w, c]` giving `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::dim("global_avg_pool", format!("expected NHWC, got {s:?}")));
        }
        let (n, pixels, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::one() / T::cst(pixels as f64);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let o = &mut out[b * c..][..c];
            for px in xs[b * pixels * c..][..pixels * c].chunks_exact(c) {
                for (ov, &v) in o.iter_mut().zip(px) {
                    *ov += v;
                }
            }
            for ov in o.iter_mut() {
                *ov *= inv;
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.record(out, vec![x], GlobalAvgOp { n, pixels, c }))
    }

    /// 2x2 max pooling with stride 2 on NHWC; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(TensorError::dim("max_pool2", format!("expected NHWC with h,w >= 2, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if best == usize::MAX || xs[idx] > best_v {
                                    best = idx;
                                    best_v = xs[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let in_len = xs.len();
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.record(out, vec![x], MaxPoolOp { argmax, in_len }))
    }

    /// `a / sum(a)` over the whole tensor.
    pub fn normalize(&mut self, a: Var) -> Var {
        let width = self.value(a).len();
        self.normalize_groups(a, width)
    }

    /// Normalizes each row of a 2-D tensor to sum to one.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::dim("normalize_rows", format!("expected 2-D, got {s:?}")));
        }
        let width = s[1];
        Ok(self.normalize_groups(a, width))
    }

    fn normalize_groups(&mut self, a: Var, width: usize) -> Var {
        let v = self.value(a);
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            let s: T = row.iter().copied().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape");
        self.record(out, vec![a], NormalizeOp { width })
    }

    /// `-sum p ln(p + eps)` over the whole tensor (natural log).
    pub fn entropy(&mut self, p: Var, eps: T) -> Var {
        let width = self.value(p).len();
        let h = entropy_rows(self.value(p).data(), width, eps);
        self.record(Tensor::scalar(h[0]), vec![p], EntropyOp { width, eps })
    }

    /// Entropy of each row of `[r, b]`, giving `[r]`.
    pub fn row_entropy(&mut self, p: Var, eps: T) -> Result<Var> {
        let s = self.shape(p);
        if s.len() != 2 {
            return Err(TensorError::dim("row_entropy", format!("expected 2-D, got {s:?}")));
        }
        let (rows, width) = (s[0], s[1]);
        let h = entropy_rows(self.value(p).data(), width, eps);
        let out = Tensor::new(vec![rows], h)?;
        Ok(self.record(out, vec![p], EntropyOp { width, eps }))
    }

    /// Sums rows of `x: [p, w]` into `n_groups` buckets given by `groups[p]`.
    pub fn segment_sum(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != groups.len() {
            return Err(TensorError::dim("segment_sum", format!("input {s:?} with {} group ids", groups.len())));
        }
        let w = s[1];
        let mut out = vec![T::zero(); n_groups * w];
        for (row, &grp) in self.value(x).data().chunks_exact(w).zip(groups) {
            if grp >= n_groups {
                return Err(TensorError::Index { op: "segment_sum", index: grp, bound: n_groups });
            }
            for (o, &v) in out[grp * w..][..w].iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![n_groups, w], out)?;
        Ok(self.record(out, vec![x], SegmentSumOp { groups: groups.to_vec(), width: w }))
    }
}

fn entropy_rows<T: Float>(p: &[T], width: usize, eps: T) -> Vec<T> {
    p.chunks_exact(width).map(|row| -row.iter().map(|&p| p * (p + eps).ln()).sum::<T>()).collect()
}
