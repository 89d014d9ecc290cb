//! Layer building blocks shared by both branches: thin parameter bundles
//! with a `forward` that appends onto a caller-owned graph.

use promptseg_tensor::attention::{mhsa, MhsaParams};
use promptseg_tensor::{init, Graph64, Parameter64, Result, Tensor64, Var};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Visit every parameter of a module, immutably or mutably. Used for the
/// optimizer, checkpointing, and the frozen/trainable partition tests.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64));
}

pub fn collect_params<'a>(m: &'a dyn Module) -> Vec<&'a Parameter64> {
    let mut out = Vec::new();
    m.visit(&mut |p| out.push(p));
    out
}

/// x @ W + b with W stored [in, out].
pub struct Linear {
    pub weight: Parameter64,
    pub bias: Option<Parameter64>,
}

impl Linear {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        frozen: bool,
    ) -> Self {
        Linear {
            weight: Parameter64::new(
                format!("{name}.weight"),
                init::fan_in_uniform(rng, &[in_dim, out_dim], in_dim),
                frozen,
            ),
            bias: bias.then(|| {
                Parameter64::new(format!("{name}.bias"), Tensor64::zeros(&[out_dim]), frozen)
            }),
        }
    }

    /// All-zero weight (and bias); used where identity-at-init is required.
    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize, bias: bool, frozen: bool) -> Self {
        Linear {
            weight: Parameter64::new(
                format!("{name}.weight"),
                Tensor64::zeros(&[in_dim, out_dim]),
                frozen,
            ),
            bias: bias.then(|| {
                Parameter64::new(format!("{name}.bias"), Tensor64::zeros(&[out_dim]), frozen)
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let bv = g.param(b)?;
                g.add_suffix(y, bv)
            }
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub struct Conv2d {
    pub weight: Parameter64,
    pub bias: Option<Parameter64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        frozen: bool,
    ) -> Self {
        Conv2d {
            weight: Parameter64::new(
                format!("{name}.weight"),
                init::fan_in_uniform(rng, &[cout, cin, k, k], cin * k * k),
                frozen,
            ),
            bias: Some(Parameter64::new(format!("{name}.bias"), Tensor64::zeros(&[cout]), frozen)),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_ref().map(|b| g.param(b)).transpose()?;
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub struct ConvTranspose2d {
    pub weight: Parameter64,
    pub bias: Option<Parameter64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        frozen: bool,
    ) -> Self {
        ConvTranspose2d {
            weight: Parameter64::new(
                format!("{name}.weight"),
                init::fan_in_uniform(rng, &[cin, cout, k, k], cin * k * k),
                frozen,
            ),
            bias: Some(Parameter64::new(format!("{name}.bias"), Tensor64::zeros(&[cout]), frozen)),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_ref().map(|b| g.param(b)).transpose()?;
        g.conv_transpose2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for ConvTranspose2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Parameter64,
    pub beta: Parameter64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, frozen: bool) -> Self {
        LayerNorm {
            gamma: Parameter64::new(format!("{name}.gamma"), Tensor64::full(&[dim], 1.0), frozen),
            beta: Parameter64::new(format!("{name}.beta"), Tensor64::zeros(&[dim]), frozen),
        }
    }

    pub fn forward(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Pre-norm transformer encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
pub struct TransformerBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub attn: MhsaParams<f64>,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, dim: usize, heads: usize, frozen: bool) -> Self {
        let hidden = dim * 4;
        let lin =
            |rng: &mut ChaCha8Rng, n: String| Parameter64 {
                name: n.clone(),
                value: init::fan_in_uniform(rng, &[dim, dim], dim),
                frozen,
            };
        let zero_bias = |n: String| Parameter64::new(n, Tensor64::zeros(&[dim]), frozen);
        TransformerBlock {
            heads,
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim, frozen),
            attn: MhsaParams {
                wq: lin(rng, format!("{name}.attn.wq")),
                bq: zero_bias(format!("{name}.attn.bq")),
                wk: lin(rng, format!("{name}.attn.wk")),
                bk: zero_bias(format!("{name}.attn.bk")),
                wv: lin(rng, format!("{name}.attn.wv")),
                bv: zero_bias(format!("{name}.attn.bv")),
                wo: lin(rng, format!("{name}.attn.wo")),
                bo: zero_bias(format!("{name}.attn.bo")),
            },
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim, frozen),
            fc1: Linear::new(&format!("{name}.mlp.fc1"), rng, dim, hidden, true, frozen),
            fc2: Linear::new(&format!("{name}.mlp.fc2"), rng, hidden, dim, true, frozen),
        }
    }

    pub fn forward(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = mhsa(g, h, self.heads, &self.attn)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

impl Module for TransformerBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.ln1.visit(f);
        self.attn.for_each(&mut |p| f(p));
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.ln1.visit_mut(f);
        self.attn.for_each_mut(&mut |p| f(p));
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Two 3x3 convs plus a skip; the skip gets a 1x1 projection whenever the
/// channel count or stride changes. ReLU after the sum.
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        stride: usize,
        frozen: bool,
    ) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), rng, cin, cout, 3, stride, 1, frozen),
            conv2: Conv2d::new(&format!("{name}.conv2"), rng, cout, cout, 3, 1, 1, frozen),
            skip: (cin != cout || stride != 1).then(|| {
                Conv2d::new(&format!("{name}.skip"), rng, cin, cout, 1, stride, 0, frozen)
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(proj) => proj.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        g.relu(y)
    }
}

impl Module for ResidualBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter64)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter64)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use promptseg_tensor::init::seeded_rng;

    #[test]
    fn transformer_block_preserves_shape() {
        let mut rng = seeded_rng(1);
        let block = TransformerBlock::new("t", &mut rng, 16, 4, false);
        let mut g = Graph64::inference();
        let x = g.constant(init::uniform(&mut rng, &[2, 5, 16], -1.0, 1.0)).unwrap();
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 16]);
    }

    #[test]
    fn residual_block_projects_skip_on_stride() {
        let mut rng = seeded_rng(2);
        let rb = ResidualBlock::new("r", &mut rng, 3, 8, 2, false);
        assert!(rb.skip.is_some());
        let mut g = Graph64::inference();
        let x = g.constant(init::uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0)).unwrap();
        let y = rb.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn parameter_names_carry_the_module_path() {
        let mut rng = seeded_rng(3);
        let lin = Linear::new("gfe.reduce.0", &mut rng, 4, 2, true, false);
        let names: Vec<&str> = collect_params(&lin).iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["gfe.reduce.0.weight", "gfe.reduce.0.bias"]);
    }
}
