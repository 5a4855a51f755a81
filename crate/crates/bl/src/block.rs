//! A single penalty-form utility-maximization block and its exact
//! derivatives.
//!
//! `B(z) = λ0ᵀ φ(p_u(z)) − λ1ᵀ ρ(p_c(z)) − λ2ᵀ ψ(p_t(z))`
//!
//! Two head styles are supported. The `bl` style instantiates
//! `(φ, ρ, ψ) = (tanh, relu, |·|)`; the `ibl` style uses the smooth triple
//! `(tanh, softplus, (·)²)` whose evenness and strict monotonicity underpin
//! the quotient-space equivalence tests in [`crate::interpret`].
//!
//! Besides plain evaluation and gradients, the block exposes a dual-number
//! pass: a forward sweep carrying `(value, directional derivative)` pairs
//! along a fixed input tangent, and a backward sweep that differentiates any
//! combination `w·B + ẇ·DB` with respect to all parameters. The tangent
//! machinery is what makes denoising-score-matching gradients exact (they
//! differentiate the input-gradient of the energy, a second-order quantity).

use crate::error::{BlError, Result};
use crate::mat::Mat;
use crate::poly::PolynomialMap;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadStyle {
    /// tanh / relu / absolute-value heads.
    Bl,
    /// tanh / softplus / square heads (identifiable variant).
    Ibl,
}

/// Which of the three heads a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Utility,
    Inequality,
    Equality,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Utility, Head::Inequality, Head::Equality];

    pub fn index(self) -> usize {
        match self {
            Head::Utility => 0,
            Head::Inequality => 1,
            Head::Equality => 2,
        }
    }

    /// Sign of the head's contribution to the block value.
    pub fn sign(self) -> f64 {
        match self {
            Head::Utility => 1.0,
            _ => -1.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Head::Utility => 'U',
            Head::Inequality => 'C',
            Head::Equality => 'T',
        }
    }
}

/// Scalar activation with first and second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
    Abs,
    Softplus,
    Square,
}

impl Activation {
    #[inline]
    pub fn value(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => u.tanh(),
            Activation::Identity => u,
            Activation::Relu => u.max(0.0),
            Activation::Abs => u.abs(),
            // Overflow-safe softplus.
            Activation::Softplus => u.max(0.0) + (-u.abs()).exp().ln_1p(),
            Activation::Square => u * u,
        }
    }

    /// Value, first and second derivative at `u`. Kinks (relu, abs at 0)
    /// use the subgradient value 0.
    #[inline]
    pub fn value_derivs(self, u: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = u.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Identity => (u, 1.0, 0.0),
            Activation::Relu => {
                let d = if u > 0.0 { 1.0 } else { 0.0 };
                (u.max(0.0), d, 0.0)
            }
            Activation::Abs => {
                let d = if u > 0.0 {
                    1.0
                } else if u < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (u.abs(), d, 0.0)
            }
            Activation::Softplus => {
                let v = u.max(0.0) + (-u.abs()).exp().ln_1p();
                let s = if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                };
                (v, s, s * (1.0 - s))
            }
            Activation::Square => (u * u, 2.0 * u, 2.0),
        }
    }
}

/// Parameters of one block: three nonnegative weight vectors and three
/// polynomial maps sharing an input dimension. Any head may have zero rows,
/// but not all three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub style: HeadStyle,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub map_u: PolynomialMap,
    pub map_c: PolynomialMap,
    pub map_t: PolynomialMap,
    /// Identity utility head (φ = id) variant. Excluded from the
    /// identifiability surface, which assumes a bounded strictly increasing φ.
    #[serde(default)]
    pub identity_utility: bool,
}

impl BlockParams {
    pub fn new(
        style: HeadStyle,
        lambda0: Vec<f64>,
        lambda1: Vec<f64>,
        lambda2: Vec<f64>,
        map_u: PolynomialMap,
        map_c: PolynomialMap,
        map_t: PolynomialMap,
    ) -> Result<Self> {
        let b = Self {
            style,
            lambda0,
            lambda1,
            lambda2,
            map_u,
            map_c,
            map_t,
            identity_utility: false,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.map_u.input_dim(),
            self.map_c.input_dim(),
            self.map_t.input_dim(),
        ];
        if dims[1] != dims[0] || dims[2] != dims[0] {
            return Err(BlError::InvalidArgument(
                "head maps must share one input dimension".into(),
            ));
        }
        for (lam, map, name) in [
            (&self.lambda0, &self.map_u, "lambda0"),
            (&self.lambda1, &self.map_c, "lambda1"),
            (&self.lambda2, &self.map_t, "lambda2"),
        ] {
            if lam.len() != map.out_dim() {
                return Err(BlError::Shape {
                    context: format!("{name} length vs head rows"),
                    expected: map.out_dim(),
                    got: lam.len(),
                });
            }
            if lam.iter().any(|&v| v < 0.0) {
                return Err(BlError::InvalidArgument(format!(
                    "{name} entries must be nonnegative"
                )));
            }
        }
        if self.lambda0.is_empty() && self.lambda1.is_empty() && self.lambda2.is_empty() {
            return Err(BlError::InvalidArgument(
                "a block needs at least one head row".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.map_u.input_dim()
    }

    pub fn map(&self, head: Head) -> &PolynomialMap {
        match head {
            Head::Utility => &self.map_u,
            Head::Inequality => &self.map_c,
            Head::Equality => &self.map_t,
        }
    }

    pub fn map_mut(&mut self, head: Head) -> &mut PolynomialMap {
        match head {
            Head::Utility => &mut self.map_u,
            Head::Inequality => &mut self.map_c,
            Head::Equality => &mut self.map_t,
        }
    }

    pub fn lambda(&self, head: Head) -> &[f64] {
        match head {
            Head::Utility => &self.lambda0,
            Head::Inequality => &self.lambda1,
            Head::Equality => &self.lambda2,
        }
    }

    pub fn lambda_mut(&mut self, head: Head) -> &mut Vec<f64> {
        match head {
            Head::Utility => &mut self.lambda0,
            Head::Inequality => &mut self.lambda1,
            Head::Equality => &mut self.lambda2,
        }
    }

    pub fn activation(&self, head: Head) -> Activation {
        match (head, self.style) {
            (Head::Utility, _) => {
                if self.identity_utility {
                    Activation::Identity
                } else {
                    Activation::Tanh
                }
            }
            (Head::Inequality, HeadStyle::Bl) => Activation::Relu,
            (Head::Inequality, HeadStyle::Ibl) => Activation::Softplus,
            (Head::Equality, HeadStyle::Bl) => Activation::Abs,
            (Head::Equality, HeadStyle::Ibl) => Activation::Square,
        }
    }

    /// Identifiability constraints: bias-free maps whose nonzero monomials
    /// all touch the response span (vacuous when the span is empty, e.g. in
    /// class-vector mode where blocks see only `x`).
    pub fn satisfies_identifiable_constraints(&self) -> bool {
        for head in Head::ALL {
            let map = self.map(head);
            if map.bias().is_some() {
                return false;
            }
            if !map.y_range().is_empty() && !map.is_y_dependent_only() {
                return false;
            }
        }
        true
    }

    /// Block evaluation at `z`.
    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let mut scratch = BlockScratch::default();
        self.forward(z, None, &mut scratch)?;
        Ok(scratch.value)
    }

    /// Exact gradient of the block value with respect to `z`.
    pub fn grad_input(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = BlockScratch::default();
        self.forward(z, None, &mut scratch)?;
        let mut grad = BlockGrad::zeros_like(self);
        let mut zgrad = vec![0.0; z.len()];
        self.backward(z, &scratch, 1.0, &mut grad, &mut zgrad);
        Ok(zgrad)
    }

    /// Exact partials of `upstream · eval(z)` with respect to every
    /// parameter.
    pub fn grad_params(&self, z: &[f64], upstream: f64) -> Result<BlockGrad> {
        let mut scratch = BlockScratch::default();
        self.forward(z, None, &mut scratch)?;
        let mut grad = BlockGrad::zeros_like(self);
        let mut zgrad = vec![0.0; z.len()];
        self.backward(z, &scratch, upstream, &mut grad, &mut zgrad);
        Ok(grad)
    }

    /// Forward pass filling `scratch`. When `zdot` is given, every
    /// intermediate also carries its directional derivative along `zdot`.
    pub fn forward(
        &self,
        z: &[f64],
        zdot: Option<&[f64]>,
        scratch: &mut BlockScratch,
    ) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(BlError::Shape {
                context: "block input".into(),
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(BlError::NonFinite("block input".into()));
        }
        let mut value = 0.0;
        let mut value_dot = 0.0;
        for head in Head::ALL {
            let map = self.map(head);
            let act = self.activation(head);
            let lam = self.lambda(head);
            let hs = &mut scratch.heads[head.index()];
            hs.resize(map.basis().len(), map.out_dim());

            map.basis().eval(z, &mut hs.m);
            map.coeff().matvec(&hs.m, &mut hs.pre);
            if let Some(b) = map.bias() {
                for (p, bi) in hs.pre.iter_mut().zip(b) {
                    *p += bi;
                }
            }
            if let Some(zd) = zdot {
                map.basis().eval_dir(z, zd, &mut hs.m_dot);
                map.coeff().matvec(&hs.m_dot, &mut hs.pre_dot);
            }
            let s = head.sign();
            for i in 0..map.out_dim() {
                let (v, d, dd) = act.value_derivs(hs.pre[i]);
                hs.act[i] = v;
                hs.d[i] = d;
                hs.dd[i] = dd;
                value += s * lam[i] * v;
                if zdot.is_some() {
                    value_dot += s * lam[i] * d * hs.pre_dot[i];
                }
            }
        }
        scratch.value = value;
        scratch.value_dot = value_dot;
        Ok(())
    }

    /// Backward pass for `upstream · B`, accumulating into `grad` and
    /// `zgrad`. Requires a prior [`BlockParams::forward`] on the same `z`.
    pub fn backward(
        &self,
        z: &[f64],
        scratch: &BlockScratch,
        upstream: f64,
        grad: &mut BlockGrad,
        zgrad: &mut [f64],
    ) {
        self.backward_dual(z, None, scratch, upstream, 0.0, Some(grad), zgrad, &mut []);
    }

    /// Backward pass for `w·B + wd·DB` where `DB` is the directional
    /// derivative along the tangent used in the forward pass. Accumulates
    /// parameter gradients into `grad` when given, input adjoints into
    /// `zgrad`, and tangent adjoints into `zdot_grad` (pass an empty slice
    /// when `wd = 0`).
    #[allow(clippy::too_many_arguments)]
    pub fn backward_dual(
        &self,
        z: &[f64],
        zdot: Option<&[f64]>,
        scratch: &BlockScratch,
        w: f64,
        wd: f64,
        mut grad: Option<&mut BlockGrad>,
        zgrad: &mut [f64],
        zdot_grad: &mut [f64],
    ) {
        for head in Head::ALL {
            let map = self.map(head);
            let lam = self.lambda(head);
            let hs = &scratch.heads[head.index()];
            let s = head.sign();
            let r = map.out_dim();
            if r == 0 {
                continue;
            }

            let mut q = vec![0.0; r];
            let mut qdot = vec![0.0; r];
            for i in 0..r {
                let pre_dot = if zdot.is_some() { hs.pre_dot[i] } else { 0.0 };
                q[i] = s * lam[i] * (w * hs.d[i] + wd * hs.dd[i] * pre_dot);
                if wd != 0.0 {
                    qdot[i] = s * lam[i] * wd * hs.d[i];
                }
                if let Some(g) = grad.as_deref_mut() {
                    g.heads[head.index()].lambda[i] +=
                        s * (w * hs.act[i] + wd * hs.d[i] * pre_dot);
                }
            }

            if let Some(g) = grad.as_deref_mut() {
                let gh = &mut g.heads[head.index()];
                gh.coeff.add_outer(1.0, &q, &hs.m);
                if let Some(gb) = &mut gh.bias {
                    for (b, qi) in gb.iter_mut().zip(&q) {
                        *b += qi;
                    }
                }
                if wd != 0.0 {
                    // Tangent-path coefficient gradient: q̇ ṁᵀ.
                    gh.coeff.add_outer(1.0, &qdot, &hs.m_dot);
                }
            }

            // Input adjoint: Jmᵀ (Mᵀ q).
            let mut v = vec![0.0; map.basis().len()];
            map.coeff().t_matvec_add(&q, &mut v);
            map.basis().add_weighted_grad(z, &v, zgrad);

            if wd != 0.0 {
                let zd = zdot.expect("tangent required when wd != 0");
                // Curvature term: Σ v̇_k H_k(z) ż feeding the input adjoint,
                // plus Jmᵀ (Mᵀ q̇) feeding the tangent adjoint.
                let mut vdot = vec![0.0; map.basis().len()];
                map.coeff().t_matvec_add(&qdot, &mut vdot);
                map.basis().add_weighted_hvp(z, zd, &vdot, zgrad);
                if !zdot_grad.is_empty() {
                    map.basis().add_weighted_grad(z, &vdot, zdot_grad);
                }
            }
        }
    }
}

/// Per-head forward caches.
#[derive(Clone, Debug, Default)]
pub struct HeadScratch {
    pub m: Vec<f64>,
    pub m_dot: Vec<f64>,
    pub pre: Vec<f64>,
    pub pre_dot: Vec<f64>,
    pub act: Vec<f64>,
    pub d: Vec<f64>,
    pub dd: Vec<f64>,
}

impl HeadScratch {
    fn resize(&mut self, basis_len: usize, rows: usize) {
        self.m.resize(basis_len, 0.0);
        self.m_dot.resize(basis_len, 0.0);
        self.pre.resize(rows, 0.0);
        self.pre_dot.resize(rows, 0.0);
        self.act.resize(rows, 0.0);
        self.d.resize(rows, 0.0);
        self.dd.resize(rows, 0.0);
    }
}

#[derive(Clone, Debug, Default)]
pub struct BlockScratch {
    pub heads: [HeadScratch; 3],
    pub value: f64,
    pub value_dot: f64,
}

/// Gradient of one head's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub lambda: Vec<f64>,
    pub coeff: Mat,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of every parameter in a block, in head order U, C, T.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrad {
    pub heads: [HeadGrad; 3],
}

impl BlockGrad {
    pub fn zeros_like(block: &BlockParams) -> Self {
        let make = |head: Head| {
            let map = block.map(head);
            HeadGrad {
                lambda: vec![0.0; map.out_dim()],
                coeff: Mat::zeros(map.out_dim(), map.basis().len()),
                bias: map.bias().map(|b| vec![0.0; b.len()]),
            }
        };
        Self {
            heads: [make(Head::Utility), make(Head::Inequality), make(Head::Equality)],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for h in &mut self.heads {
            for v in &mut h.lambda {
                *v *= s;
            }
            for v in h.coeff.data_mut() {
                *v *= s;
            }
            if let Some(b) = &mut h.bias {
                for v in b {
                    *v *= s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::MonomialBasis;

    /// Block whose heads are constants (via biases): p_u = u0, p_c = c0,
    /// p_t = t0 over a 1-D input.
    fn constant_block(style: HeadStyle, u0: f64, c0: f64, t0: f64) -> BlockParams {
        let basis = MonomialBasis::full(1, 1, true).unwrap();
        let mk = |v: f64| {
            PolynomialMap::new(
                basis.clone(),
                Mat::zeros(1, basis.len()),
                Some(vec![v]),
                0..1,
            )
            .unwrap()
        };
        BlockParams::new(
            style,
            vec![1.0],
            vec![1.0],
            vec![1.0],
            mk(u0),
            mk(c0),
            mk(t0),
        )
        .unwrap()
    }

    #[test]
    fn bl_direct_evaluation() {
        let b = constant_block(HeadStyle::Bl, 0.0, 1.0, -2.0);
        assert_eq!(b.eval(&[0.5]).unwrap(), -3.0);
    }

    #[test]
    fn ibl_softplus_and_square() {
        let mut b = constant_block(HeadStyle::Ibl, 0.0, 0.0, 3.0);
        b.lambda0 = vec![0.0];
        let v = b.eval(&[0.5]).unwrap();
        let expected = -(2.0f64.ln()) - 9.0;
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn pure_penalty_energy_conservation_form() {
        // B = −λ·T² with T = y² − x² (square head), λ = 25, x = 0, y = 2.
        let basis = MonomialBasis::custom(2, vec![vec![2, 0], vec![0, 2]]).unwrap();
        let map_t = PolynomialMap::new(
            basis.clone(),
            Mat::from_rows(vec![vec![-1.0, 1.0]]),
            None,
            1..2,
        )
        .unwrap();
        let empty_u = PolynomialMap::zeros(basis.clone(), 0, false, 1..2);
        let empty_c = PolynomialMap::zeros(basis, 0, false, 1..2);
        let b = BlockParams::new(
            HeadStyle::Ibl,
            vec![],
            vec![],
            vec![25.0],
            empty_u,
            empty_c,
            map_t,
        )
        .unwrap();
        assert_eq!(b.eval(&[0.0, 2.0]).unwrap(), -400.0);
    }

    #[test]
    fn all_heads_dropped_is_an_error() {
        let basis = MonomialBasis::full(1, 1, true).unwrap();
        let empty = PolynomialMap::zeros(basis, 0, false, 0..1);
        assert!(BlockParams::new(
            HeadStyle::Bl,
            vec![],
            vec![],
            vec![],
            empty.clone(),
            empty.clone(),
            empty
        )
        .is_err());
    }

    #[test]
    fn grad_input_affine_tanh_at_origin() {
        let basis = MonomialBasis::full(2, 1, true).unwrap();
        let map_u = PolynomialMap::new(
            basis.clone(),
            Mat::from_rows(vec![vec![1.0, 1.0]]),
            None,
            1..2,
        )
        .unwrap();
        let empty_c = PolynomialMap::zeros(basis.clone(), 0, false, 1..2);
        let empty_t = PolynomialMap::zeros(basis, 0, false, 1..2);
        let b = BlockParams::new(HeadStyle::Bl, vec![1.0], vec![], vec![], map_u, empty_c, empty_t)
            .unwrap();
        let g = b.grad_input(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn relu_kink_contributes_zero_gradient() {
        // p_c(z) = z1, evaluated exactly at the kink z1 = 0.
        let basis = MonomialBasis::full(1, 1, true).unwrap();
        let map_c =
            PolynomialMap::new(basis.clone(), Mat::from_rows(vec![vec![1.0]]), None, 0..1)
                .unwrap();
        let empty_u = PolynomialMap::zeros(basis.clone(), 0, false, 0..1);
        let empty_t = PolynomialMap::zeros(basis, 0, false, 0..1);
        let b = BlockParams::new(HeadStyle::Bl, vec![], vec![1.0], vec![], empty_u, map_c, empty_t)
            .unwrap();
        assert_eq!(b.grad_input(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn grad_params_at_zero_preactivation() {
        let b = constant_block(HeadStyle::Bl, 0.0, 0.5, 0.5);
        let g = b.grad_params(&[0.3], 1.0).unwrap();
        // ∂/∂λ0 = tanh(0) = 0.
        assert_eq!(g.heads[0].lambda, vec![0.0]);
        // Doubling upstream doubles everything.
        let g2 = b.grad_params(&[0.3], 2.0).unwrap();
        for h in 0..3 {
            for (a, b2) in g.heads[h].lambda.iter().zip(&g2.heads[h].lambda) {
                assert!((2.0 * a - b2).abs() < 1e-15);
            }
            for (a, b2) in g.heads[h].coeff.data().iter().zip(g2.heads[h].coeff.data()) {
                assert!((2.0 * a - b2).abs() < 1e-15);
            }
        }
    }

    /// Random block over a degree-2 basis. With `ibl = true` every head is
    /// smooth; otherwise gradients are valid away from kinks.
    pub(crate) fn random_block(seed: u64, style: HeadStyle, input_dim: usize) -> BlockParams {
        let mut rng = crate::rng::StreamRng::new(seed, &[0xB10C]);
        let basis = MonomialBasis::full(input_dim, 2, true).unwrap();
        let n = basis.len();
        let mk = |rng: &mut crate::rng::StreamRng, rows: usize| {
            let coeff = Mat::from_rows(
                (0..rows)
                    .map(|_| (0..n).map(|_| rng.gauss() * 0.7).collect())
                    .collect(),
            );
            let bias = Some((0..rows).map(|_| rng.gauss() * 0.3).collect());
            PolynomialMap::new(basis.clone(), coeff, bias, 1..input_dim).unwrap()
        };
        let map_u = mk(&mut rng, 2);
        let map_c = mk(&mut rng, 2);
        let map_t = mk(&mut rng, 1);
        BlockParams::new(
            style,
            (0..2).map(|_| rng.uniform() + 0.5).collect(),
            (0..2).map(|_| rng.uniform() + 0.5).collect(),
            (0..1).map(|_| rng.uniform() + 0.5).collect(),
            map_u,
            map_c,
            map_t,
        )
        .unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
    }

    /// Reject points where any kinked pre-activation sits within 1e-3 of 0.
    fn away_from_kinks(b: &BlockParams, z: &[f64]) -> bool {
        if b.style == HeadStyle::Ibl {
            return true;
        }
        for head in [Head::Inequality, Head::Equality] {
            let pre = b.map(head).eval(z).unwrap();
            if pre.iter().any(|p| p.abs() < 1e-3) {
                return false;
            }
        }
        true
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        for (seed, style) in [(1u64, HeadStyle::Bl), (2, HeadStyle::Ibl)] {
            let b = random_block(seed, style, 3);
            let mut rng = crate::rng::StreamRng::new(seed ^ 0xF00D, &[7]);
            let mut checked = 0;
            while checked < 5 {
                let z: Vec<f64> = (0..3).map(|_| rng.gauss()).collect();
                if !away_from_kinks(&b, &z) {
                    continue;
                }
                checked += 1;
                let g = b.grad_input(&z).unwrap();
                for j in 0..3 {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[j] += 1e-6;
                    zm[j] -= 1e-6;
                    let fd = (b.eval(&zp).unwrap() - b.eval(&zm).unwrap()) / 2e-6;
                    assert!(
                        rel_err(g[j], fd) <= 1e-6 || (g[j] - fd).abs() < 1e-9,
                        "style {:?} coord {j}: {} vs {}",
                        style,
                        g[j],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        for (seed, style) in [(11u64, HeadStyle::Bl), (12, HeadStyle::Ibl)] {
            let b = random_block(seed, style, 2);
            let mut rng = crate::rng::StreamRng::new(seed ^ 0xABC, &[8]);
            let z: Vec<f64> = loop {
                let z: Vec<f64> = (0..2).map(|_| rng.gauss()).collect();
                if away_from_kinks(&b, &z) {
                    break z;
                }
            };
            let g = b.grad_params(&z, 1.0).unwrap();
            let h = 1e-6;
            for head in Head::ALL {
                // λ entries.
                for i in 0..b.lambda(head).len() {
                    let mut bp = b.clone();
                    let mut bm = b.clone();
                    bp.lambda_mut(head)[i] += h;
                    bm.lambda_mut(head)[i] -= h;
                    let fd = (bp.eval(&z).unwrap() - bm.eval(&z).unwrap()) / (2.0 * h);
                    let an = g.heads[head.index()].lambda[i];
                    assert!(rel_err(an, fd) <= 1e-6 || (an - fd).abs() < 1e-8);
                }
                // Coefficients.
                let rows = b.map(head).out_dim();
                let cols = b.map(head).basis().len();
                for i in 0..rows {
                    for k in 0..cols {
                        let mut bp = b.clone();
                        let mut bm = b.clone();
                        bp.map_mut(head).coeff_mut()[(i, k)] += h;
                        bm.map_mut(head).coeff_mut()[(i, k)] -= h;
                        let fd = (bp.eval(&z).unwrap() - bm.eval(&z).unwrap()) / (2.0 * h);
                        let an = g.heads[head.index()].coeff[(i, k)];
                        assert!(
                            rel_err(an, fd) <= 1e-6 || (an - fd).abs() < 1e-8,
                            "{:?} head {:?} coeff ({i},{k}): {an} vs {fd}",
                            style,
                            head
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn utility_head_is_bounded_and_penalties_nonpositive() {
        let b = random_block(21, HeadStyle::Bl, 2);
        let l1: f64 = b.lambda0.iter().sum();
        let mut rng = crate::rng::StreamRng::new(99, &[3]);
        for _ in 0..200 {
            let z: Vec<f64> = (0..2).map(|_| 3.0 * rng.gauss()).collect();
            let mut scratch = BlockScratch::default();
            b.forward(&z, None, &mut scratch).unwrap();
            let u: f64 = scratch.heads[0]
                .act
                .iter()
                .zip(&b.lambda0)
                .map(|(a, l)| a * l)
                .sum();
            assert!(u.abs() <= l1 + 1e-12);
            let c: f64 = scratch.heads[1]
                .act
                .iter()
                .zip(&b.lambda1)
                .map(|(a, l)| -a * l)
                .sum();
            let t: f64 = scratch.heads[2]
                .act
                .iter()
                .zip(&b.lambda2)
                .map(|(a, l)| -a * l)
                .sum();
            assert!(c <= 0.0 && t <= 0.0);
        }
    }

    #[test]
    fn equality_head_is_even_in_coefficient_sign() {
        for style in [HeadStyle::Bl, HeadStyle::Ibl] {
            let b = random_block(31, style, 2);
            let mut flipped = b.clone();
            for v in flipped.map_mut(Head::Equality).coeff_mut().data_mut() {
                *v = -*v;
            }
            if let Some(bias) = flipped.map_mut(Head::Equality).bias_mut() {
                for v in bias.iter_mut() {
                    *v = -*v;
                }
            }
            let mut rng = crate::rng::StreamRng::new(77, &[4]);
            for _ in 0..100 {
                let z: Vec<f64> = (0..2).map(|_| rng.gauss()).collect();
                let a = b.eval(&z).unwrap();
                let c = flipped.eval(&z).unwrap();
                assert!((a - c).abs() <= 1e-12, "{a} vs {c}");
            }
        }
    }

    #[test]
    fn dual_forward_matches_directional_finite_difference() {
        for (seed, style) in [(41u64, HeadStyle::Bl), (42, HeadStyle::Ibl)] {
            let b = random_block(seed, style, 3);
            let mut rng = crate::rng::StreamRng::new(seed ^ 0x77, &[5]);
            let z: Vec<f64> = loop {
                let z: Vec<f64> = (0..3).map(|_| rng.gauss()).collect();
                if away_from_kinks(&b, &z) {
                    break z;
                }
            };
            let zdot: Vec<f64> = (0..3).map(|_| rng.gauss()).collect();
            let mut scratch = BlockScratch::default();
            b.forward(&z, Some(&zdot), &mut scratch).unwrap();
            let h = 1e-6;
            let zp: Vec<f64> = z.iter().zip(&zdot).map(|(a, d)| a + h * d).collect();
            let zm: Vec<f64> = z.iter().zip(&zdot).map(|(a, d)| a - h * d).collect();
            let fd = (b.eval(&zp).unwrap() - b.eval(&zm).unwrap()) / (2.0 * h);
            assert!(
                rel_err(scratch.value_dot, fd) <= 1e-6,
                "{} vs {}",
                scratch.value_dot,
                fd
            );
        }
    }

    #[test]
    fn dual_backward_differentiates_the_directional_derivative() {
        // Check ∂(DB)/∂θ against finite differences of DB for the smooth style.
        let b = random_block(51, HeadStyle::Ibl, 2);
        let mut rng = crate::rng::StreamRng::new(0x51, &[6]);
        let z: Vec<f64> = (0..2).map(|_| rng.gauss()).collect();
        let zdot: Vec<f64> = (0..2).map(|_| rng.gauss()).collect();

        let dir_deriv = |blk: &BlockParams| -> f64 {
            let mut s = BlockScratch::default();
            blk.forward(&z, Some(&zdot), &mut s).unwrap();
            s.value_dot
        };

        let mut scratch = BlockScratch::default();
        b.forward(&z, Some(&zdot), &mut scratch).unwrap();
        let mut grad = BlockGrad::zeros_like(&b);
        let mut zg = vec![0.0; 2];
        let mut zdg = vec![0.0; 2];
        b.backward_dual(
            &z,
            Some(&zdot),
            &scratch,
            0.0,
            1.0,
            Some(&mut grad),
            &mut zg,
            &mut zdg,
        );

        let h = 1e-6;
        for head in Head::ALL {
            for i in 0..b.lambda(head).len() {
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp.lambda_mut(head)[i] += h;
                bm.lambda_mut(head)[i] -= h;
                let fd = (dir_deriv(&bp) - dir_deriv(&bm)) / (2.0 * h);
                let an = grad.heads[head.index()].lambda[i];
                assert!(rel_err(an, fd) <= 1e-5 || (an - fd).abs() < 1e-8);
            }
            for i in 0..b.map(head).out_dim() {
                for k in 0..b.map(head).basis().len() {
                    let mut bp = b.clone();
                    let mut bm = b.clone();
                    bp.map_mut(head).coeff_mut()[(i, k)] += h;
                    bm.map_mut(head).coeff_mut()[(i, k)] -= h;
                    let fd = (dir_deriv(&bp) - dir_deriv(&bm)) / (2.0 * h);
                    let an = grad.heads[head.index()].coeff[(i, k)];
                    assert!(
                        rel_err(an, fd) <= 1e-5 || (an - fd).abs() < 1e-8,
                        "head {:?} ({i},{k}): {an} vs {fd}",
                        head
                    );
                }
            }
        }
        // Input adjoint of DB: FD over z along each axis.
        for j in 0..2 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let f = |zz: &Vec<f64>| -> f64 {
                let mut s = BlockScratch::default();
                b.forward(zz, Some(&zdot), &mut s).unwrap();
                s.value_dot
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!(rel_err(zg[j], fd) <= 1e-5 || (zg[j] - fd).abs() < 1e-8);
        }
    }
}
