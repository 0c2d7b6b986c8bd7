use super::kernels::{self, axis_split, gemm_nn, gemm_nt, gemm_tn};
use super::rng::{uniform01, DropoutKey};
use super::{numel, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBcast {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Relu {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        inner: usize,
        len: usize,
        start: usize,
        width: usize,
    },
    RepeatBatch {
        a: usize,
        times: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    KlTemperature {
        zs: usize,
        p: Vec<f64>,
        q: Vec<f64>,
        t: f64,
        classes: usize,
    },
    Mse {
        a: usize,
        b: usize,
        diff: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records differentiable computation for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(name.to_string()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Non-trainable input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(
            "matmul",
            Tensor { shape, data: out },
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            ng,
        )
    }

    fn batched(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension(format!("batched matmul: cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 3 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let b_i = &bd[i * k * n..(i + 1) * k * n];
            let c_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(a_i, b_i, c_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, c_i, m, k, n);
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let ng = self.needs(a.0) || self.needs(b.0);
        let op = Op::Bmm {
            a: a.0,
            b: b.0,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        self.push("bmm", Tensor { shape, data: out }, op, ng)
    }

    /// `a[..., m, k] · b[..., k, n]` with matching leading dims.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched(a, b, false)
    }

    /// `a[..., m, k] · b[..., n, k]ᵀ` with matching leading dims.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched(a, b, true)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(name, Tensor { shape, data }, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!(
                "broadcast add: {sb:?} does not trail {sa:?}"
            )));
        }
        let bd = self.value(b).data();
        let w = bd.len();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % w])
            .collect();
        let shape = sa.to_vec();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(
            "add_bcast",
            Tensor { shape, data },
            Op::AddBcast { a: a.0, b: b.0 },
            ng,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a.0);
        self.push("scale", Tensor { shape, data }, Op::Scale { a: a.0, c }, ng)
    }

    /// `x @ w + b` for a weight `[in, out]` and bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bcast(y, b)
    }

    // ---- activations ----------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a.0);
        self.push("relu", Tensor { shape, data }, Op::Relu { a: a.0 }, ng)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
            .collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a.0);
        self.push("gelu", Tensor { shape, data }, Op::Gelu { a: a.0 }, ng)
    }

    /// Inverted dropout. Identity (same node) when `training` is false.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|i| {
                if uniform01(key, i as u64) < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a.0);
        self.push(
            "dropout",
            Tensor { shape, data },
            Op::Dropout { a: a.0, mask },
            ng,
        )
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} invalid for {shape:?}"
            )));
        }
        check_finite("softmax input", self.value(a).data())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(
            "softmax",
            Tensor { shape, data: out },
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            ng,
        )
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm on a scalar".into()))?;
        if d == 0 {
            return Err(Error::Dimension("layer_norm over a zero-length row".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match row width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            d,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor { shape, data: out }, op, ng)
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Dimension(format!(
                "permutation {perm:?} invalid for {shape:?}"
            )));
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        let ng = self.needs(a.0);
        self.push(
            "permute",
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.value(a).data().to_vec();
        let ng = self.needs(a.0);
        self.push(
            "reshape",
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape { a: a.0 },
            ng,
        )
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Dimension("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} invalid for {first:?}"
            )));
        }
        let mut total = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::Dimension(format!(
                    "concat: {s:?} incompatible with {first:?}"
                )));
            }
            spans.push((p.0, s[axis]));
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &(p, len) in &spans {
            let src = self.nodes[p].value.data();
            for o in 0..outer {
                let dst =
                    &mut out[(o * total + offset) * inner..(o * total + offset + len) * inner];
                dst.copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = spans.iter().any(|&(p, _)| self.needs(p));
        self.push(
            "concat",
            Tensor { shape, data: out },
            Op::Concat {
                parts: spans,
                outer,
                inner,
                total,
            },
            ng,
        )
    }

    /// Slice `[start, start+width)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || width == 0 || start + width > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow({axis}, {start}, {width}) invalid for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &src[(o * len + start) * inner..(o * len + start + width) * inner],
            );
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let ng = self.needs(a.0);
        let op = Op::Narrow {
            a: a.0,
            outer,
            inner,
            len,
            start,
            width,
        };
        self.push(
            "narrow",
            Tensor {
                shape: out_shape,
                data: out,
            },
            op,
            ng,
        )
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat_batch(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Dimension("repeat_batch with zero copies".into()));
        }
        let t = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(times);
        let ng = self.needs(a.0);
        self.push(
            "repeat_batch",
            Tensor { shape, data },
            Op::RepeatBatch { a: a.0, times },
            ng,
        )
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a.0);
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(a.0);
        self.push("mean", Tensor::scalar(s), Op::Mean { a: a.0 }, ng)
    }

    /// Batch mean of `-log softmax(logits)[label]` for `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                label,
                classes,
                row,
            });
        }
        check_finite("cross_entropy input", self.value(logits).data())?;
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let ng = self.needs(logits.0);
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
            classes,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, ng)
    }

    /// `T² · KL(softmax(z_t/T) ‖ softmax(z_s/T))`, batch-meaned. The teacher
    /// logits `z_t` never receive a gradient.
    pub fn kl_temperature(&mut self, z_t: Var, z_s: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {t}"
            )));
        }
        self.same_shape("kl_temperature", z_t, z_s)?;
        let shape = self.shape(z_s).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "kl_temperature expects [B, C], got {shape:?}"
            )));
        }
        check_finite("kl_temperature input", self.value(z_s).data())?;
        check_finite("kl_temperature input", self.value(z_t).data())?;
        let (b, classes) = (shape[0], shape[1]);
        let log_softmax = |row: &[f64]| -> Vec<f64> {
            let scaled: Vec<f64> = row.iter().map(|v| v / t).collect();
            let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            scaled.iter().map(|v| v - lse).collect()
        };
        let (zt, zs) = (self.value(z_t).data(), self.value(z_s).data());
        let mut p = Vec::with_capacity(zt.len());
        let mut q = Vec::with_capacity(zs.len());
        let mut total = 0.0;
        for r in 0..b {
            let lp = log_softmax(&zt[r * classes..(r + 1) * classes]);
            let lq = log_softmax(&zs[r * classes..(r + 1) * classes]);
            for j in 0..classes {
                let pj = lp[j].exp();
                if pj > 0.0 {
                    total += pj * (lp[j] - lq[j]);
                }
                p.push(pj);
                q.push(lq[j].exp());
            }
        }
        // KL is non-negative; clamp away rounding noise at p == q.
        let loss = (t * t * total / b as f64).max(0.0);
        let ng = self.needs(z_s.0);
        self.push(
            "kl_temperature",
            Tensor::scalar(loss),
            Op::KlTemperature {
                zs: z_s.0,
                p,
                q,
                t,
                classes,
            },
            ng,
        )
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let diff: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(
            "mse",
            Tensor::scalar(loss),
            Op::Mse {
                a: a.0,
                b: b.0,
                diff,
            },
            ng,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from the scalar `loss`. Gradients are kept until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite("backward", g)
                    .map_err(|_| Error::Numeric(format!("gradient of node {i}")))?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].needs_grad;
        let val = |i: usize| nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[i].needs_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
            f(slot);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    acc(a, &mut |da| gemm_nt(g, val(b), da, m, n, k));
                }
                if needs(b) {
                    acc(b, &mut |db| gemm_tn(val(a), g, db, m, k, n));
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                if needs(a) {
                    acc(a, &mut |da| {
                        for i in 0..batch {
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            let b_i = &bd[i * k * n..(i + 1) * k * n];
                            let da_i = &mut da[i * m * k..(i + 1) * m * k];
                            if trans_b {
                                // C = A Bᵀ, B: [n,k] → dA = G B
                                gemm_nn(g_i, b_i, da_i, m, n, k);
                            } else {
                                gemm_nt(g_i, b_i, da_i, m, n, k);
                            }
                        }
                    });
                }
                if needs(b) {
                    acc(b, &mut |db| {
                        for i in 0..batch {
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            let a_i = &ad[i * m * k..(i + 1) * m * k];
                            let db_i = &mut db[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                // dB[n,k] = Gᵀ A
                                gemm_tn(g_i, a_i, db_i, m, n, k);
                            } else {
                                gemm_tn(a_i, g_i, db_i, m, k, n);
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(bd)
                        .for_each(|((x, gv), bv)| *x += gv * bv)
                });
                acc(b, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(ad)
                        .for_each(|((x, gv), av)| *x += gv * av)
                });
            }
            &Op::AddBcast { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| {
                    let w = d.len();
                    for chunk in g.chunks_exact(w) {
                        add_into(d, chunk);
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, gv)| *x += c * gv)
            }),
            &Op::Relu { a } => {
                let ad = val(a);
                acc(a, &mut |d| {
                    for ((x, gv), av) in d.iter_mut().zip(g).zip(ad) {
                        if *av > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            &Op::Gelu { a } => {
                let ad = val(a);
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                acc(a, &mut |d| {
                    for ((x, gv), &av) in d.iter_mut().zip(g).zip(ad) {
                        let cdf = 0.5 * (1.0 + libm::erf(av / std::f64::consts::SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * av * av).exp();
                        *x += gv * (cdf + av * pdf);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(mask)
                        .for_each(|((x, gv), m)| *x += gv * m)
                });
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = nodes[idx].value.data();
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let gm = val(gamma);
                let rows = xhat.len() / d;
                if needs(x) {
                    acc(x, &mut |dx| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                            for j in 0..d {
                                dxhat[j] = gr[j] * gm[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 =
                                dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                dx[r * d + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                acc(gamma, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(beta, &mut |db| {
                    for chunk in g.chunks_exact(d) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::Permute { a, perm } => {
                let out_shape = nodes[idx].value.shape();
                let (back, _) = kernels::permute(g, out_shape, &kernels::inverse_perm(perm));
                acc(*a, &mut |d| add_into(d, &back));
            }
            &Op::Reshape { a } => acc(a, &mut |d| add_into(d, g)),
            Op::Concat {
                parts,
                outer,
                inner,
                total,
            } => {
                let mut offset = 0;
                for &(p, len) in parts {
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Narrow {
                a,
                outer,
                inner,
                len,
                start,
                width,
            } => {
                acc(a, &mut |d| {
                    for o in 0..outer {
                        let dst =
                            &mut d[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            &Op::RepeatBatch { a, times } => {
                acc(a, &mut |d| {
                    let w = d.len();
                    for t in 0..times {
                        add_into(d, &g[t * w..(t + 1) * w]);
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean { a } => {
                let n = nodes[a].value.numel() as f64;
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..*classes {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::KlTemperature {
                zs,
                p,
                q,
                t,
                classes,
            } => {
                let b = p.len() / classes;
                let scale = g[0] * t / b as f64;
                acc(*zs, &mut |d| {
                    for ((x, qv), pv) in d.iter_mut().zip(q).zip(p) {
                        *x += scale * (qv - pv);
                    }
                });
            }
            Op::Mse { a, b, diff } => {
                let scale = 2.0 * g[0] / diff.len() as f64;
                acc(*a, &mut |d| {
                    d.iter_mut().zip(diff).for_each(|(x, df)| *x += scale * df)
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(diff).for_each(|(x, df)| *x -= scale * df)
                });
            }
        }
    }
}
