//! Layered composition of blocks into a compositional utility function.
//!
//! A network stacks layers of parallel blocks. Layer 1 consumes the
//! concatenated `[x; y]`; each later layer consumes the previous layer's
//! output vector, optionally rewired by skip connections:
//!
//! - `dense`: layer ℓ sees `[x; y; s₁; …; s₍ℓ₋₁₎]`,
//! - `residual`: `sℓ = 𝔹ℓ(s₍ℓ₋₁₎) + Π s₍ℓ₋₁₎` with Π the identity when the
//!   widths match and a learnable bias-free projection otherwise.
//!
//! A final affine readout produces either a scalar utility or a vector of
//! per-class utilities. All gradients (with respect to parameters, inputs,
//! and the input tangent) are exact and mirror the forward topology.

use crate::block::{BlockGrad, BlockParams, BlockScratch, Head, HeadStyle};
use crate::error::{BlError, Result};
use crate::mat::Mat;
use crate::poly::{MonomialBasis, PolynomialMap};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    None,
    Dense,
    Residual,
}

/// How a classification network turns inputs into per-class utilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassEncoding {
    /// Blocks see `x` alone; the readout has one row per class.
    Readout,
    /// A scalar field over `[x; one-hot(y)]`; utilities are assembled by
    /// evaluating every candidate.
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OutputMode {
    /// One scalar utility per `(x, y)`.
    Scalar,
    /// `m` class utilities per `x`.
    Classes { m: usize, encoding: ClassEncoding },
}

impl OutputMode {
    pub fn name(&self) -> &'static str {
        match self {
            OutputMode::Scalar => "scalar",
            OutputMode::Classes { .. } => "class",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub style: HeadStyle,
    pub x_dim: usize,
    /// Response dimension as seen by the blocks: the actual response length
    /// in scalar mode, the number of classes in one-hot mode, 0 in readout
    /// class mode.
    pub y_dim: usize,
    pub output: OutputMode,
    pub skip: SkipMode,
    pub layers: Vec<Vec<BlockParams>>,
    /// Residual projections, indexed by layer; entry ℓ applies to the
    /// shortcut into layer ℓ and is present only when widths differ.
    pub projections: Vec<Option<Mat>>,
    pub readout_w: Mat,
    pub readout_b: Option<Vec<f64>>,
}

/// Architecture of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCfg {
    pub blocks: usize,
    pub r_u: usize,
    pub r_c: usize,
    pub r_t: usize,
    pub degree: u32,
}

impl LayerCfg {
    pub fn new(blocks: usize, r_u: usize, r_c: usize, r_t: usize, degree: u32) -> Self {
        Self {
            blocks,
            r_u,
            r_c,
            r_t,
            degree,
        }
    }
}

/// Architecture of a whole network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchCfg {
    pub style: HeadStyle,
    pub x_dim: usize,
    pub y_dim: usize,
    pub output: OutputMode,
    pub skip: SkipMode,
    pub layers: Vec<LayerCfg>,
    pub readout_bias: bool,
}

/// Initialization scales. Polynomial coefficients and the readout draw from
/// centered normals; λ entries draw from `lambda_mean + N(0, σ)` and clamp
/// at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitCfg {
    pub sigma_params: f64,
    pub lambda_mean: f64,
    pub sigma_lambda: f64,
    pub sigma_readout: f64,
}

impl Default for InitCfg {
    fn default() -> Self {
        Self {
            sigma_params: 0.01,
            lambda_mean: 1.0,
            sigma_lambda: 0.01,
            sigma_readout: 0.01,
        }
    }
}

impl Network {
    /// Input width of layer `l` under the skip wiring.
    pub fn layer_input_dim(&self, l: usize) -> usize {
        let base = self.x_dim + self.y_dim;
        if l == 0 {
            return base;
        }
        match self.skip {
            SkipMode::None | SkipMode::Residual => self.layers[l - 1].len(),
            SkipMode::Dense => base + self.layers[..l].iter().map(|lay| lay.len()).sum::<usize>(),
        }
    }

    /// Response span inside layer `l`'s input: the coordinates that carry
    /// response dependence (exact `y` slots for layer 1 and dense layers,
    /// the whole input for inner plain/residual layers).
    pub fn layer_y_range(&self, l: usize) -> std::ops::Range<usize> {
        if l == 0 {
            return self.x_dim..self.x_dim + self.y_dim;
        }
        match self.skip {
            SkipMode::None | SkipMode::Residual => 0..self.layer_input_dim(l),
            SkipMode::Dense => self.x_dim..self.layer_input_dim(l),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn output_arity(&self) -> usize {
        match self.output {
            OutputMode::Scalar => 1,
            OutputMode::Classes { m, .. } => m,
        }
    }

    /// Rows of the readout matrix (1 for scalar and one-hot class mode).
    fn readout_rows(&self) -> usize {
        match self.output {
            OutputMode::Scalar => 1,
            OutputMode::Classes { m, encoding } => match encoding {
                ClassEncoding::Readout => m,
                ClassEncoding::OneHot => 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.is_empty()) {
            return Err(BlError::InvalidArgument(
                "network needs at least one layer with at least one block".into(),
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let want = self.layer_input_dim(l);
            for (i, b) in layer.iter().enumerate() {
                b.validate()?;
                if b.input_dim() != want {
                    return Err(BlError::Shape {
                        context: format!("layer {} block {} input", l + 1, i),
                        expected: want,
                        got: b.input_dim(),
                    });
                }
                if b.style != self.style {
                    return Err(BlError::InvalidArgument(
                        "all blocks must share the network head style".into(),
                    ));
                }
            }
        }
        if self.projections.len() != self.layers.len() {
            return Err(BlError::InvalidArgument(
                "projection list must have one slot per layer".into(),
            ));
        }
        for (l, proj) in self.projections.iter().enumerate() {
            let needed = self.skip == SkipMode::Residual
                && l >= 1
                && self.layers[l].len() != self.layers[l - 1].len();
            match (needed, proj) {
                (true, Some(p)) => {
                    if p.rows() != self.layers[l].len() || p.cols() != self.layers[l - 1].len() {
                        return Err(BlError::Shape {
                            context: format!("residual projection into layer {}", l + 1),
                            expected: self.layers[l].len() * self.layers[l - 1].len(),
                            got: p.rows() * p.cols(),
                        });
                    }
                }
                (true, None) => {
                    return Err(BlError::InvalidArgument(format!(
                        "residual projection missing for layer {}",
                        l + 1
                    )));
                }
                (false, Some(_)) => {
                    return Err(BlError::InvalidArgument(format!(
                        "unexpected projection at layer {}",
                        l + 1
                    )));
                }
                (false, None) => {}
            }
        }
        let d_last = self.layers.last().unwrap().len();
        if self.readout_w.cols() != d_last || self.readout_w.rows() != self.readout_rows() {
            return Err(BlError::Shape {
                context: "readout".into(),
                expected: self.readout_rows() * d_last,
                got: self.readout_w.rows() * self.readout_w.cols(),
            });
        }
        if let Some(b) = &self.readout_b {
            if b.len() != self.readout_w.rows() {
                return Err(BlError::Shape {
                    context: "readout bias".into(),
                    expected: self.readout_w.rows(),
                    got: b.len(),
                });
            }
        }
        Ok(())
    }

    /// Identifiability constraints of the smooth style: bias-free readout
    /// and blocks, response-dependent bases.
    pub fn satisfies_identifiable_constraints(&self) -> bool {
        self.readout_b.is_none()
            && self
                .layers
                .iter()
                .flatten()
                .all(|b| b.satisfies_identifiable_constraints())
    }

    /// Fresh network with randomly initialized parameters.
    pub fn init(arch: &ArchCfg, init: &InitCfg, seed: u64) -> Result<Self> {
        let mut rng = StreamRng::new(seed, &[0x1217]);
        let ibl = arch.style == HeadStyle::Ibl;
        let mut net = Network {
            style: arch.style,
            x_dim: arch.x_dim,
            y_dim: arch.y_dim,
            output: arch.output,
            skip: arch.skip,
            layers: Vec::new(),
            projections: vec![None; arch.layers.len()],
            readout_w: Mat::zeros(1, 1),
            readout_b: None,
        };
        if let OutputMode::Classes { m, encoding } = arch.output {
            let expect_y = match encoding {
                ClassEncoding::Readout => 0,
                ClassEncoding::OneHot => m,
            };
            if arch.y_dim != expect_y {
                return Err(BlError::InvalidArgument(format!(
                    "class mode with this encoding requires y_dim = {expect_y}"
                )));
            }
        }

        for (l, cfg) in arch.layers.iter().enumerate() {
            net.layers.push(Vec::new());
            let input_dim = net.layer_input_dim(l);
            let y_range = net.layer_y_range(l);
            let basis = if ibl && !y_range.is_empty() {
                MonomialBasis::y_dependent(input_dim, cfg.degree, y_range.clone())?
            } else {
                MonomialBasis::full(input_dim, cfg.degree, true)?
            };
            for _ in 0..cfg.blocks {
                let mk = |rng: &mut StreamRng, rows: usize| -> Result<PolynomialMap> {
                    let mut coeff = Mat::zeros(rows, basis.len());
                    for v in coeff.data_mut() {
                        *v = rng.gauss() * init.sigma_params;
                    }
                    let bias = (!ibl)
                        .then(|| (0..rows).map(|_| rng.gauss() * init.sigma_params).collect());
                    PolynomialMap::new(basis.clone(), coeff, bias, y_range.clone())
                };
                let map_u = mk(&mut rng, cfg.r_u)?;
                let map_c = mk(&mut rng, cfg.r_c)?;
                let map_t = mk(&mut rng, cfg.r_t)?;
                let lam = |rng: &mut StreamRng, n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| (init.lambda_mean + rng.gauss() * init.sigma_lambda).max(0.0))
                        .collect()
                };
                let block = BlockParams::new(
                    arch.style,
                    lam(&mut rng, cfg.r_u),
                    lam(&mut rng, cfg.r_c),
                    lam(&mut rng, cfg.r_t),
                    map_u,
                    map_c,
                    map_t,
                )?;
                net.layers[l].push(block);
            }
            if arch.skip == SkipMode::Residual && l >= 1 && cfg.blocks != arch.layers[l - 1].blocks
            {
                let mut p = Mat::zeros(cfg.blocks, arch.layers[l - 1].blocks);
                for v in p.data_mut() {
                    *v = rng.gauss() * init.sigma_params;
                }
                net.projections[l] = Some(p);
            }
        }

        let d_last = arch.layers.last().map_or(0, |c| c.blocks);
        let mut w = Mat::zeros(net.readout_rows(), d_last);
        for v in w.data_mut() {
            *v = rng.gauss() * init.sigma_readout;
        }
        net.readout_w = w;
        net.readout_b = (arch.readout_bias && !ibl).then(|| vec![0.0; net.readout_rows()]);
        net.validate()?;
        Ok(net)
    }

    fn assemble_base(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.x_dim {
            return Err(BlError::Shape {
                context: "network x input".into(),
                expected: self.x_dim,
                got: x.len(),
            });
        }
        if y.len() != self.y_dim {
            return Err(BlError::Shape {
                context: "network y input".into(),
                expected: self.y_dim,
                got: y.len(),
            });
        }
        let mut base = Vec::with_capacity(self.x_dim + self.y_dim);
        base.extend_from_slice(x);
        base.extend_from_slice(y);
        Ok(base)
    }

    /// Forward pass caching every intermediate in `scratch`. When `ydot`
    /// is given, intermediates also carry directional derivatives along the
    /// input tangent `(ẋ = 0, ẏ = ydot)`.
    pub fn forward_cached(
        &self,
        x: &[f64],
        y: &[f64],
        ydot: Option<&[f64]>,
        scratch: &mut NetScratch,
    ) -> Result<()> {
        let base = self.assemble_base(x, y)?;
        let dual = ydot.is_some();
        let base_dot: Vec<f64> = match ydot {
            Some(yd) => {
                if yd.len() != self.y_dim {
                    return Err(BlError::Shape {
                        context: "network tangent".into(),
                        expected: self.y_dim,
                        got: yd.len(),
                    });
                }
                let mut b = vec![0.0; self.x_dim];
                b.extend_from_slice(yd);
                b
            }
            None => Vec::new(),
        };

        let depth = self.depth();
        scratch.ensure_shape(self);
        scratch.dual = dual;

        for l in 0..depth {
            // Assemble this layer's input.
            let mut z = Vec::with_capacity(self.layer_input_dim(l));
            let mut zdot = Vec::with_capacity(if dual { self.layer_input_dim(l) } else { 0 });
            if l == 0 {
                z.extend_from_slice(&base);
                if dual {
                    zdot.extend_from_slice(&base_dot);
                }
            } else {
                match self.skip {
                    SkipMode::None | SkipMode::Residual => {
                        z.extend_from_slice(&scratch.outputs[l - 1]);
                        if dual {
                            zdot.extend_from_slice(&scratch.outputs_dot[l - 1]);
                        }
                    }
                    SkipMode::Dense => {
                        z.extend_from_slice(&base);
                        if dual {
                            zdot.extend_from_slice(&base_dot);
                        }
                        for j in 0..l {
                            z.extend_from_slice(&scratch.outputs[j]);
                            if dual {
                                zdot.extend_from_slice(&scratch.outputs_dot[j]);
                            }
                        }
                    }
                }
            }
            scratch.inputs[l] = z;
            scratch.inputs_dot[l] = zdot;

            let width = self.layers[l].len();
            scratch.outputs[l].resize(width, 0.0);
            scratch.outputs_dot[l].resize(width, 0.0);
            for (i, block) in self.layers[l].iter().enumerate() {
                let z = &scratch.inputs[l];
                let zdot = &scratch.inputs_dot[l];
                let mut bs = std::mem::take(&mut scratch.blocks[l][i]);
                block.forward(z, dual.then_some(zdot.as_slice()), &mut bs)?;
                scratch.outputs[l][i] = bs.value;
                scratch.outputs_dot[l][i] = bs.value_dot;
                scratch.blocks[l][i] = bs;
            }

            if self.skip == SkipMode::Residual && l >= 1 {
                let prev = scratch.inputs[l].clone();
                let prev_dot = scratch.inputs_dot[l].clone();
                match &self.projections[l] {
                    Some(p) => {
                        let mut shortcut = vec![0.0; width];
                        p.matvec(&prev, &mut shortcut);
                        for i in 0..width {
                            scratch.outputs[l][i] += shortcut[i];
                        }
                        if dual {
                            p.matvec(&prev_dot, &mut shortcut);
                            for i in 0..width {
                                scratch.outputs_dot[l][i] += shortcut[i];
                            }
                        }
                    }
                    None => {
                        for i in 0..width {
                            scratch.outputs[l][i] += prev[i];
                            if dual {
                                scratch.outputs_dot[l][i] += prev_dot[i];
                            }
                        }
                    }
                }
            }

            if scratch.outputs[l].iter().any(|v| !v.is_finite()) {
                return Err(BlError::NonFinite(format!("layer {}", l + 1)));
            }
        }

        let s_last = &scratch.outputs[depth - 1];
        scratch.output.resize(self.readout_rows(), 0.0);
        self.readout_w.matvec(s_last, &mut scratch.output);
        if let Some(b) = &self.readout_b {
            for (o, bi) in scratch.output.iter_mut().zip(b) {
                *o += bi;
            }
        }
        scratch.output_dot.resize(self.readout_rows(), 0.0);
        if dual {
            let sd = &scratch.outputs_dot[depth - 1];
            self.readout_w.matvec(sd, &mut scratch.output_dot);
        } else {
            scratch.output_dot.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    /// Scalar or class-utility forward pass.
    pub fn forward(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        match self.output {
            OutputMode::Scalar => {
                let mut s = NetScratch::default();
                self.forward_cached(x, y, None, &mut s)?;
                Ok(s.output)
            }
            OutputMode::Classes { .. } => self.class_utilities(x),
        }
    }

    /// Scalar field underlying scalar and one-hot-class networks.
    pub fn scalar_field(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if self.readout_rows() != 1 {
            return Err(BlError::Mode {
                required: "scalar",
                actual: "class",
            });
        }
        let mut s = NetScratch::default();
        self.forward_cached(x, y, None, &mut s)?;
        Ok(s.output[0])
    }

    /// Per-class utilities ("stacking evaluations over the candidate set").
    pub fn class_utilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.output {
            OutputMode::Scalar => Err(BlError::Mode {
                required: "class",
                actual: "scalar",
            }),
            OutputMode::Classes { m, encoding } => match encoding {
                ClassEncoding::Readout => {
                    let mut s = NetScratch::default();
                    self.forward_cached(x, &[], None, &mut s)?;
                    Ok(s.output)
                }
                ClassEncoding::OneHot => {
                    let mut out = Vec::with_capacity(m);
                    let mut onehot = vec![0.0; m];
                    for k in 0..m {
                        onehot.iter_mut().for_each(|v| *v = 0.0);
                        onehot[k] = 1.0;
                        out.push(self.scalar_field(x, &onehot)?);
                    }
                    Ok(out)
                }
            },
        }
    }

    /// Exact gradient of the scalar utility with respect to `y`.
    pub fn score_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = NetScratch::default();
        self.score_y_buffered(x, y, &mut scratch)
    }

    /// [`Network::score_y`] reusing a caller-owned scratch; skips parameter
    /// gradient accumulation entirely (the sampling hot path).
    pub fn score_y_buffered(
        &self,
        x: &[f64],
        y: &[f64],
        scratch: &mut NetScratch,
    ) -> Result<Vec<f64>> {
        if self.output != OutputMode::Scalar {
            return Err(BlError::Mode {
                required: "scalar",
                actual: "class",
            });
        }
        self.forward_cached(x, y, None, scratch)?;
        let (_, ygrad) = self.backward_cached(scratch, &[1.0], &[], None)?;
        Ok(ygrad)
    }

    /// Exact gradient of `upstreamᵀ · forward` with respect to every
    /// parameter, plus the input gradients `(∂/∂x, ∂/∂y)`.
    pub fn backward(
        &self,
        x: &[f64],
        y: &[f64],
        upstream: &[f64],
    ) -> Result<(NetworkGrad, Vec<f64>, Vec<f64>)> {
        let mut scratch = NetScratch::default();
        // One-hot class encoding aggregates m scalar passes.
        if let OutputMode::Classes {
            m,
            encoding: ClassEncoding::OneHot,
        } = self.output
        {
            if upstream.len() != m {
                return Err(BlError::Shape {
                    context: "backward upstream".into(),
                    expected: m,
                    got: upstream.len(),
                });
            }
            let mut grads = NetworkGrad::zeros_like(self);
            let mut xg = vec![0.0; self.x_dim];
            let mut onehot = vec![0.0; m];
            for k in 0..m {
                if upstream[k] == 0.0 {
                    continue;
                }
                onehot.iter_mut().for_each(|v| *v = 0.0);
                onehot[k] = 1.0;
                self.forward_cached(x, &onehot, None, &mut scratch)?;
                let (xk, _) =
                    self.backward_cached(&scratch, &[upstream[k]], &[], Some(&mut grads))?;
                for (a, b) in xg.iter_mut().zip(&xk) {
                    *a += b;
                }
            }
            return Ok((grads, xg, vec![0.0; self.y_dim]));
        }

        let y_eff = if matches!(self.output, OutputMode::Classes { .. }) {
            &[][..]
        } else {
            y
        };
        self.forward_cached(x, y_eff, None, &mut scratch)?;
        let mut grads = NetworkGrad::zeros_like(self);
        let (xg, yg) = self.backward_cached(&scratch, upstream, &[], Some(&mut grads))?;
        Ok((grads, xg, yg))
    }

    /// Reverse pass over a cached forward. `upstream` weights the output
    /// values; `upstream_dot` (may be empty) weights the output tangents
    /// from a dual forward. Accumulates into `grads`; returns the input
    /// gradients `(∂/∂x, ∂/∂y)` of the weighted objective.
    pub fn backward_cached(
        &self,
        scratch: &NetScratch,
        upstream: &[f64],
        upstream_dot: &[f64],
        mut grads: Option<&mut NetworkGrad>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = self.readout_rows();
        if upstream.len() != rows {
            return Err(BlError::Shape {
                context: "backward upstream".into(),
                expected: rows,
                got: upstream.len(),
            });
        }
        let use_dual = !upstream_dot.is_empty();
        if use_dual && (!scratch.dual || upstream_dot.len() != rows) {
            return Err(BlError::InvalidArgument(
                "tangent upstream requires a dual forward pass".into(),
            ));
        }
        let depth = self.depth();

        // Readout.
        if let Some(g) = grads.as_deref_mut() {
            let s_last = &scratch.outputs[depth - 1];
            g.readout_w.add_outer(1.0, upstream, s_last);
            if use_dual {
                g.readout_w
                    .add_outer(1.0, upstream_dot, &scratch.outputs_dot[depth - 1]);
            }
            if let Some(gb) = &mut g.readout_b {
                for (gv, u) in gb.iter_mut().zip(upstream) {
                    *gv += u;
                }
            }
        }

        // Layer-output adjoints.
        let mut adj: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.len()]).collect();
        let mut adj_dot: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.len()]).collect();
        self.readout_w.t_matvec_add(upstream, &mut adj[depth - 1]);
        if use_dual {
            self.readout_w
                .t_matvec_add(upstream_dot, &mut adj_dot[depth - 1]);
        }

        let mut base_adj = vec![0.0; self.x_dim + self.y_dim];

        for l in (0..depth).rev() {
            let z = &scratch.inputs[l];
            let zdot = &scratch.inputs_dot[l];
            let n_in = z.len();
            let mut zgrad = vec![0.0; n_in];
            let mut zdot_grad = vec![0.0; if use_dual { n_in } else { 0 }];

            // Residual shortcut adjoints.
            if self.skip == SkipMode::Residual && l >= 1 {
                match &self.projections[l] {
                    Some(p) => {
                        p.t_matvec_add(&adj[l], &mut zgrad);
                        if let Some(g) = grads.as_deref_mut() {
                            if let Some(gp) = &mut g.projections[l] {
                                gp.add_outer(1.0, &adj[l], z);
                                if use_dual {
                                    gp.add_outer(1.0, &adj_dot[l], zdot);
                                }
                            }
                        }
                        if use_dual {
                            p.t_matvec_add(&adj_dot[l], &mut zdot_grad);
                        }
                    }
                    None => {
                        for i in 0..adj[l].len() {
                            zgrad[i] += adj[l][i];
                            if use_dual {
                                zdot_grad[i] += adj_dot[l][i];
                            }
                        }
                    }
                }
            }

            for (i, block) in self.layers[l].iter().enumerate() {
                let w = adj[l][i];
                let wd = if use_dual { adj_dot[l][i] } else { 0.0 };
                if w == 0.0 && wd == 0.0 {
                    continue;
                }
                block.backward_dual(
                    z,
                    scratch.dual.then_some(zdot.as_slice()),
                    &scratch.blocks[l][i],
                    w,
                    wd,
                    grads.as_deref_mut().map(|g| &mut g.layers[l][i]),
                    &mut zgrad,
                    &mut zdot_grad,
                );
            }

            // Scatter input adjoints to producers. The tangent adjoint of a
            // produced value coincides with the value adjoint of its tangent,
            // so `zdot_grad` flows into `adj_dot` of earlier layers and the
            // base tangent slots are dropped (the caller owns a fixed ydot).
            if l == 0 {
                for (a, g) in base_adj.iter_mut().zip(&zgrad) {
                    *a += g;
                }
            } else {
                match self.skip {
                    SkipMode::None | SkipMode::Residual => {
                        for (a, g) in adj[l - 1].iter_mut().zip(&zgrad) {
                            *a += g;
                        }
                        if use_dual {
                            for (a, g) in adj_dot[l - 1].iter_mut().zip(&zdot_grad) {
                                *a += g;
                            }
                        }
                    }
                    SkipMode::Dense => {
                        let base = self.x_dim + self.y_dim;
                        for (a, g) in base_adj.iter_mut().zip(&zgrad[..base]) {
                            *a += g;
                        }
                        let mut off = base;
                        for j in 0..l {
                            let w_j = self.layers[j].len();
                            for i in 0..w_j {
                                adj[j][i] += zgrad[off + i];
                                if use_dual {
                                    adj_dot[j][i] += zdot_grad[off + i];
                                }
                            }
                            off += w_j;
                        }
                    }
                }
            }
        }

        let xgrad = base_adj[..self.x_dim].to_vec();
        let ygrad = base_adj[self.x_dim..].to_vec();
        Ok((xgrad, ygrad))
    }

    // ----- flat parameter views ------------------------------------------

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params_flat().len()
    }

    /// All parameters flattened in a fixed traversal order: layers, blocks,
    /// heads (λ, coefficients row-major, bias), then residual projections,
    /// then the readout.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for block in layer {
                for head in Head::ALL {
                    out.extend_from_slice(block.lambda(head));
                    out.extend_from_slice(block.map(head).coeff().data());
                    if let Some(b) = block.map(head).bias() {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        for proj in self.projections.iter().flatten() {
            out.extend_from_slice(proj.data());
        }
        out.extend_from_slice(self.readout_w.data());
        if let Some(b) = &self.readout_b {
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`Network::params_flat`].
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut idx = 0usize;
        fn take(idx: &mut usize, n: usize, len: usize) -> Result<std::ops::Range<usize>> {
            if *idx + n > len {
                return Err(BlError::Shape {
                    context: "flat parameter vector".into(),
                    expected: *idx + n,
                    got: len,
                });
            }
            let r = *idx..*idx + n;
            *idx += n;
            Ok(r)
        }
        for layer in &mut self.layers {
            for block in layer {
                for head in Head::ALL {
                    let n_l = block.lambda(head).len();
                    let r = take(&mut idx, n_l, flat.len())?;
                    block.lambda_mut(head).copy_from_slice(&flat[r]);
                    let n_c = block.map(head).coeff().data().len();
                    let r = take(&mut idx, n_c, flat.len())?;
                    block
                        .map_mut(head)
                        .coeff_mut()
                        .data_mut()
                        .copy_from_slice(&flat[r]);
                    if let Some(b) = block.map_mut(head).bias_mut() {
                        let n_b = b.len();
                        let r = take(&mut idx, n_b, flat.len())?;
                        b.copy_from_slice(&flat[r]);
                    }
                }
            }
        }
        for proj in self.projections.iter_mut().flatten() {
            let n = proj.data().len();
            let r = take(&mut idx, n, flat.len())?;
            proj.data_mut().copy_from_slice(&flat[r]);
        }
        let n = self.readout_w.data().len();
        let r = take(&mut idx, n, flat.len())?;
        self.readout_w.data_mut().copy_from_slice(&flat[r]);
        if let Some(b) = &mut self.readout_b {
            let n = b.len();
            let r = take(&mut idx, n, flat.len())?;
            b.copy_from_slice(&flat[r]);
        }
        if idx != flat.len() {
            return Err(BlError::Shape {
                context: "flat parameter vector".into(),
                expected: idx,
                got: flat.len(),
            });
        }
        Ok(())
    }

    /// `true` at indices holding λ entries (clamped nonnegative after
    /// optimizer steps).
    pub fn lambda_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for block in layer {
                for head in Head::ALL {
                    out.extend(std::iter::repeat(true).take(block.lambda(head).len()));
                    out.extend(std::iter::repeat(false).take(block.map(head).coeff().data().len()));
                    if let Some(b) = block.map(head).bias() {
                        out.extend(std::iter::repeat(false).take(b.len()));
                    }
                }
            }
        }
        for proj in self.projections.iter().flatten() {
            out.extend(std::iter::repeat(false).take(proj.data().len()));
        }
        out.extend(std::iter::repeat(false).take(self.readout_w.data().len()));
        if let Some(b) = &self.readout_b {
            out.extend(std::iter::repeat(false).take(b.len()));
        }
        out
    }

    /// Clamp every λ entry at zero (projection after optimizer steps).
    pub fn project_lambdas(&mut self) {
        for layer in &mut self.layers {
            for block in layer {
                for head in Head::ALL {
                    for v in block.lambda_mut(head) {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Forward caches for one network evaluation.
#[derive(Clone, Debug, Default)]
pub struct NetScratch {
    pub inputs: Vec<Vec<f64>>,
    pub inputs_dot: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub outputs_dot: Vec<Vec<f64>>,
    pub blocks: Vec<Vec<BlockScratch>>,
    pub output: Vec<f64>,
    pub output_dot: Vec<f64>,
    pub dual: bool,
}

impl NetScratch {
    fn ensure_shape(&mut self, net: &Network) {
        let depth = net.depth();
        self.inputs.resize(depth, Vec::new());
        self.inputs_dot.resize(depth, Vec::new());
        self.outputs.resize(depth, Vec::new());
        self.outputs_dot.resize(depth, Vec::new());
        if self.blocks.len() != depth {
            self.blocks = net
                .layers
                .iter()
                .map(|l| vec![BlockScratch::default(); l.len()])
                .collect();
        } else {
            for (l, layer) in net.layers.iter().enumerate() {
                if self.blocks[l].len() != layer.len() {
                    self.blocks[l] = vec![BlockScratch::default(); layer.len()];
                }
            }
        }
    }

}

/// Gradients of every network parameter, mirroring the network structure.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrad {
    pub layers: Vec<Vec<BlockGrad>>,
    pub projections: Vec<Option<Mat>>,
    pub readout_w: Mat,
    pub readout_b: Option<Vec<f64>>,
}

impl NetworkGrad {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| l.iter().map(BlockGrad::zeros_like).collect())
                .collect(),
            projections: net
                .projections
                .iter()
                .map(|p| p.as_ref().map(|m| Mat::zeros(m.rows(), m.cols())))
                .collect(),
            readout_w: Mat::zeros(net.readout_w.rows(), net.readout_w.cols()),
            readout_b: net.readout_b.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    /// Flatten in the same traversal order as [`Network::params_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for block in layer {
                for h in &block.heads {
                    out.extend_from_slice(&h.lambda);
                    out.extend_from_slice(h.coeff.data());
                    if let Some(b) = &h.bias {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        for proj in self.projections.iter().flatten() {
            out.extend_from_slice(proj.data());
        }
        out.extend_from_slice(self.readout_w.data());
        if let Some(b) = &self.readout_b {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn add_scaled(&mut self, other: &NetworkGrad, s: f64) {
        for (la, lb) in self.layers.iter_mut().zip(&other.layers) {
            for (ba, bb) in la.iter_mut().zip(lb) {
                for (ha, hb) in ba.heads.iter_mut().zip(&bb.heads) {
                    for (a, b) in ha.lambda.iter_mut().zip(&hb.lambda) {
                        *a += s * b;
                    }
                    for (a, b) in ha.coeff.data_mut().iter_mut().zip(hb.coeff.data()) {
                        *a += s * b;
                    }
                    if let (Some(ba_), Some(bb_)) = (&mut ha.bias, &hb.bias) {
                        for (a, b) in ba_.iter_mut().zip(bb_) {
                            *a += s * b;
                        }
                    }
                }
            }
        }
        for (pa, pb) in self.projections.iter_mut().zip(&other.projections) {
            if let (Some(a), Some(b)) = (pa, pb) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += s * y;
                }
            }
        }
        for (a, b) in self
            .readout_w
            .data_mut()
            .iter_mut()
            .zip(other.readout_w.data())
        {
            *a += s * b;
        }
        if let (Some(a), Some(b)) = (&mut self.readout_b, &other.readout_b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.layers {
            for block in layer {
                block.scale(s);
            }
        }
        for proj in self.projections.iter_mut().flatten() {
            for v in proj.data_mut() {
                *v *= s;
            }
        }
        for v in self.readout_w.data_mut() {
            *v *= s;
        }
        if let Some(b) = &mut self.readout_b {
            for v in b {
                *v *= s;
            }
        }
    }
}

/// Convenience scalar-mode architecture with identical per-layer head ranks.
pub fn scalar_arch(
    style: HeadStyle,
    x_dim: usize,
    y_dim: usize,
    widths: &[usize],
    degree_first: u32,
    skip: SkipMode,
) -> ArchCfg {
    let layers = widths
        .iter()
        .enumerate()
        .map(|(l, &w)| LayerCfg::new(w, 1, 1, 1, if l == 0 { degree_first } else { 1 }))
        .collect();
    ArchCfg {
        style,
        x_dim,
        y_dim,
        output: OutputMode::Scalar,
        skip,
        layers,
        readout_bias: style == HeadStyle::Bl,
    }
}
