use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{self, QuantSpec};
use crate::scalar::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, context: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            context,
            expected: tape.shape(a).to_vec(),
            actual: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn scalar_of<T: Real>(tape: &Tape<T>, s: Var, context: &'static str) -> Result<T> {
    let v = tape.value(s);
    if v.len() != 1 {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![1],
            actual: v.shape().to_vec(),
        });
    }
    Ok(v.data()[0])
}

impl<T: Real> Tape<T> {
    /// Elementwise op whose derivative is a function of input and output.
    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Var {
        let xv = self.value(x).clone();
        let y = xv.map(&f);
        let yv = y.clone();
        self.push(op, y, &[x], move || {
            move |dy: &Tensor<T>| {
                let mut g = dy.clone();
                for ((gi, &xi), &yi) in g.data_mut().iter_mut().zip(xv.data()).zip(yv.data()) {
                    *gi *= df(xi, yi);
                }
                vec![Some(g)]
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push("add", out, &[a, b], || |dy: &Tensor<T>| vec![Some(dy.clone()), Some(dy.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push("sub", out, &[a, b], || {
            |dy: &Tensor<T>| vec![Some(dy.clone()), Some(dy.map(|g| -g))]
        }))
    }

    /// Sum of equally shaped inputs.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of no inputs".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, &[x], move || move |dy: &Tensor<T>| vec![Some(dy.map(|g| g * f))])
    }

    /// `s · x` for a single-element variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = scalar_of(self, s, "mul_scalar expects a one-element scale")?;
        let xv = self.value(x).clone();
        let out = xv.map(|v| v * sv);
        let s_shape = self.shape(s).to_vec();
        Ok(self.push("mul_scalar", out, &[x, s], move || {
            move |dy: &Tensor<T>| {
                let ds: T = dy.data().iter().zip(xv.data()).map(|(&g, &v)| g * v).sum();
                vec![
                    Some(dy.map(|g| g * sv)),
                    Some(Tensor::full(&s_shape, ds)),
                ]
            }
        }))
    }

    /// Element `i` of `x` as a one-element variable.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.len() {
            return Err(Error::InvalidArgument(format!("pick index {i} out of range {}", xv.len())));
        }
        let out = Tensor::scalar(xv.data()[i]);
        let shape = xv.shape().to_vec();
        Ok(self.push("pick", out, &[x], move || {
            move |dy: &Tensor<T>| {
                let mut g = Tensor::zeros(&shape);
                g.data_mut()[i] = dy.data()[0];
                vec![Some(g)]
            }
        }))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary("one_minus", x, |v| T::one() - v, |_, _| -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary("relu", x, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.push("sum", out, &[x], move || {
            move |dy: &Tensor<T>| vec![Some(Tensor::full(&shape, dy.data()[0]))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// (n, c, h, w) → (n, c).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let plane = h * w;
        let inv = T::of(1.0 / plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], out)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push("global_avg_pool", out, &[x], move || {
            move |dy: &Tensor<T>| {
                let mut g = Vec::with_capacity(n * c * plane);
                for &d in dy.data() {
                    g.extend(std::iter::repeat(d * inv).take(plane));
                }
                vec![Some(Tensor::from_vec(&shape, g).expect("pool grad"))]
            }
        }))
    }

    /// `x · wᵀ` for x of shape (n, f) and w of shape (o, f).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (&[n, f], &[o, fw]) = (xv.shape(), wv.shape()) else {
            return Err(Error::ShapeMismatch {
                context: "linear expects (n, f) input and (o, f) weight",
                expected: wv.shape().to_vec(),
                actual: xv.shape().to_vec(),
            });
        };
        if f != fw {
            return Err(Error::ShapeMismatch {
                context: "linear feature size",
                expected: vec![fw],
                actual: vec![f],
            });
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, f, o, xv.data(), false, wv.data(), true, T::zero(), &mut out);
        let out = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push("linear", out, &[x, w], move || {
            move |dy: &Tensor<T>| {
                let mut dx = vec![T::zero(); n * f];
                T::gemm(n, o, f, dy.data(), false, wv.data(), false, T::zero(), &mut dx);
                let mut dw = vec![T::zero(); o * f];
                T::gemm(o, n, f, dy.data(), true, xv.data(), false, T::zero(), &mut dw);
                vec![
                    Some(Tensor::from_vec(&[n, f], dx).expect("linear dx")),
                    Some(Tensor::from_vec(&[o, f], dw).expect("linear dw")),
                ]
            }
        }))
    }

    /// Mean softmax cross-entropy of (n, c) logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, c] = lv.shape() else {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy expects (n, c) logits",
                expected: vec![labels.len(), 0],
                actual: lv.shape().to_vec(),
            });
        };
        self.cross_entropy_rows(logits, labels, n, c, 1)
    }

    /// Per-pixel softmax cross-entropy of (n, c, h, w) logits, averaged over pixels.
    /// Labels are laid out (n, h, w).
    pub fn softmax_ce_nchw(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).nchw()?;
        self.cross_entropy_rows(logits, labels, n, c, h * w)
    }

    fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize], n: usize, c: usize, plane: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != n * plane {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: n * plane,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits).clone();
        let count = T::of((n * plane) as f64);
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for s in 0..n {
            for p in 0..plane {
                let idx = |k: usize| (s * c + k) * plane + p;
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(lv.data()[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (lv.data()[idx(k)] - m).exp();
                    probs[idx(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[idx(k)] /= z;
                }
                let label = labels[s * plane + p];
                loss -= (lv.data()[idx(label)] - m) - z.ln();
            }
        }
        let out = Tensor::scalar(loss / count);
        let labels = labels.to_vec();
        let shape = lv.shape().to_vec();
        Ok(self.push("softmax_cross_entropy", out, &[logits], move || {
            move |dy: &Tensor<T>| {
                let k = dy.data()[0] / count;
                let mut g = probs.clone();
                for s in 0..n {
                    for p in 0..plane {
                        g[(s * c + labels[s * plane + p]) * plane + p] -= T::one();
                    }
                }
                g.iter_mut().for_each(|v| *v *= k);
                vec![Some(Tensor::from_vec(&shape, g).expect("ce grad"))]
            }
        }))
    }

    /// Sign activation. The backward is always the piecewise polynomial
    /// factor; with `surrogate` the forward is its antiderivative instead of
    /// `sign`, which makes the node smooth enough for finite differences.
    pub fn sign_act(&mut self, x: Var, surrogate: bool) -> Result<Var> {
        let xv = self.value(x).clone();
        let out = if surrogate {
            xv.map(quant::approx_sign)
        } else {
            quant::sign_activation(&xv)?.0
        };
        Ok(self.push("sign", out, &[x], move || {
            move |dy: &Tensor<T>| vec![Some(quant::sign_activation_backward(dy, &xv).expect("sign grad"))]
        }))
    }

    /// Binarized weights `α·sign(w)` with a straight-through backward. With
    /// `surrogate` the forward is the identity (clipped at `ste_clip` if set).
    pub fn binarize_weight(&mut self, w: Var, spec: &QuantSpec, surrogate: bool) -> Result<Var> {
        let wv = self.value(w).clone();
        wv.check_finite()?;
        let out = if surrogate {
            match spec.ste_clip {
                None => wv.clone(),
                Some(c) => {
                    let c = T::of(c);
                    wv.map(|v| v.max(-c).min(c))
                }
            }
        } else {
            quant::binarized_weight_values(&wv, spec.weight_scale_granularity)
        };
        let spec = spec.clone();
        Ok(self.push("binarize_weight", out, &[w], move || {
            move |dy: &Tensor<T>| vec![Some(quant::weight_ste_backward(dy, &wv, &spec).expect("ste grad"))]
        }))
    }

    /// Uniform K-bit activation quantizer on `[0, β]` with a clip-gradient
    /// backward. With `surrogate` the forward is the clip alone.
    pub fn uniform_quant(&mut self, x: Var, bits: u32, beta: f64, surrogate: bool) -> Result<Var> {
        let xv = self.value(x).clone();
        let b = T::of(beta);
        let out = if surrogate {
            xv.map(|v| v.max(T::zero()).min(b))
        } else {
            quant::uniform_quantize(&xv, bits, b)?
        };
        Ok(self.push("uniform_quant", out, &[x], move || {
            move |dy: &Tensor<T>| vec![Some(quant::uniform_quantize_backward(dy, &xv, b).expect("quant grad"))]
        }))
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
