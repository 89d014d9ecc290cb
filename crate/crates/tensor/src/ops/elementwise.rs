use crate::error::{Error, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("add", &ta, &tb)?;
        let out: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let rec = self.wants_grad(&[a, b]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| {
                sink(a, g.to_vec());
                sink(b, g.to_vec());
            })
        });
        self.push("add", Tensor::new(ta.shape().to_vec(), out)?, rec, bw)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("sub", &ta, &tb)?;
        let out: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let rec = self.wants_grad(&[a, b]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| {
                sink(a, g.to_vec());
                sink(b, g.iter().map(|&v| -v).collect());
            })
        });
        self.push("sub", Tensor::new(ta.shape().to_vec(), out)?, rec, bw)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("mul", &ta, &tb)?;
        let out: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let rec = self.wants_grad(&[a, b]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (ca, cb) = (ta.clone(), tb.clone());
            Box::new(move |g, sink| {
                sink(a, g.iter().zip(cb.data()).map(|(&gv, &y)| gv * y).collect());
                sink(b, g.iter().zip(ca.data()).map(|(&gv, &x)| gv * x).collect());
            })
        });
        self.push("mul", Tensor::new(ta.shape().to_vec(), out)?, rec, bw)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("div", &ta, &tb)?;
        let out: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x / y).collect();
        let rec = self.wants_grad(&[a, b]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let (ca, cb) = (ta.clone(), tb.clone());
            Box::new(move |g, sink| {
                sink(a, g.iter().zip(cb.data()).map(|(&gv, &y)| gv / y).collect());
                sink(
                    b,
                    g.iter()
                        .zip(ca.data().iter().zip(cb.data()))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                        .collect(),
                );
            })
        });
        self.push("div", Tensor::new(ta.shape().to_vec(), out)?, rec, bw)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).clone();
        let cs = S::of(c);
        let out: Vec<S> = t.data().iter().map(|&v| v * cs).collect();
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| sink(x, g.iter().map(|&v| v * cs).collect()))
        });
        self.push("scale", Tensor::new(t.shape().to_vec(), out)?, rec, bw)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).clone();
        let cs = S::of(c);
        let out: Vec<S> = t.data().iter().map(|&v| v + cs).collect();
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> =
            rec.then(|| -> BackwardFn<S> { Box::new(move |g, sink| sink(x, g.to_vec())) });
        self.push("add_scalar", Tensor::new(t.shape().to_vec(), out)?, rec, bw)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        let out: Vec<S> =
            t.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let c = t.clone();
            Box::new(move |g, sink| {
                sink(
                    x,
                    c.data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                        .collect(),
                )
            })
        });
        self.push("relu", Tensor::new(t.shape().to_vec(), out)?, rec, bw)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        let out: Vec<S> = t.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let rec = self.wants_grad(&[x]);
        let ot = Tensor::new(t.shape().to_vec(), out)?;
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let y = ot.clone();
            Box::new(move |g, sink| {
                sink(
                    x,
                    y.data().iter().zip(g).map(|(&yv, &gv)| gv * yv * (S::one() - yv)).collect(),
                )
            })
        });
        self.push("sigmoid", ot, rec, bw)
    }

    /// Tanh-form gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        let c = S::of((2.0 / std::f64::consts::PI).sqrt());
        let a = S::of(0.044715);
        let half = S::of(0.5);
        let inner = move |v: S| c * (v + a * v * v * v);
        let out: Vec<S> =
            t.data().iter().map(|&v| half * v * (S::one() + inner(v).tanh())).collect();
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            let cx = t.clone();
            Box::new(move |g, sink| {
                let three = S::of(3.0);
                let gx: Vec<S> = cx
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let th = inner(v).tanh();
                        let dinner = c * (S::one() + three * a * v * v);
                        let d = half * (S::one() + th) + half * v * (S::one() - th * th) * dinner;
                        gv * d
                    })
                    .collect();
                sink(x, gx);
            })
        });
        self.push("gelu", Tensor::new(t.shape().to_vec(), out)?, rec, bw)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        let s = t.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let rec = self.wants_grad(&[x]);
        let n = t.numel();
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| sink(x, vec![g[0]; n]))
        });
        self.push("sum_all", Tensor::scalar(s), rec, bw)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        let n = t.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let inv = S::one() / S::of(n as f64);
        let s = t.data().iter().fold(S::zero(), |acc, &v| acc + v) * inv;
        let rec = self.wants_grad(&[x]);
        let bw: Option<BackwardFn<S>> = rec.then(|| -> BackwardFn<S> {
            Box::new(move |g, sink| sink(x, vec![g[0] * inv; n]))
        });
        self.push("mean_all", Tensor::scalar(s), rec, bw)
    }
}

fn stable_sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
