//! Fixed monomial bases of bounded total degree and linear maps over them.
//!
//! A [`MonomialBasis`] enumerates exponent vectors in graded order: ascending
//! total degree, then descending lexicographic within each degree, so that
//! the affine part reads `x1, x2, ..., y1, ...` and the quadratic part
//! `x1², x1·x2, ...`. The ordering is deterministic and identical across
//! rebuilds, which downstream canonicalization relies on.
//!
//! A [`PolynomialMap`] is `z ↦ M·m(z) + b` where `m(z)` is the monomial
//! vector. All derivatives are computed exactly from the exponents.

use crate::error::{BlError, Result};
use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Hard cap on total degree. Higher-order bases destabilize training and are
/// outside the supported design space.
pub const MAX_DEGREE: u32 = 4;

/// How a basis was constructed; sufficient to rebuild the exact enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BasisSpec {
    /// Complete basis of total degree ≤ `degree`.
    Full { exclude_constant: bool },
    /// Complete basis restricted to monomials with at least one factor from
    /// the response span (used by the identifiable head style).
    YDependent,
    /// Explicit exponent list (on-demand higher-order terms).
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonomialBasis {
    input_dim: usize,
    degree: u32,
    spec: BasisSpec,
    exponents: Vec<Vec<u8>>,
}

/// Graded comparison: total degree first, then descending lexicographic.
fn graded_lex(a: &[u8], b: &[u8]) -> std::cmp::Ordering {
    let da: u32 = a.iter().map(|&e| e as u32).sum();
    let db: u32 = b.iter().map(|&e| e as u32).sum();
    da.cmp(&db).then_with(|| b.cmp(a))
}

/// Enumerate all exponent vectors with total degree exactly `d`, in
/// descending lexicographic order.
fn exact_degree(dim: usize, d: u32, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if prefix.len() == dim - 1 {
        prefix.push(d as u8);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=d).rev() {
        prefix.push(e as u8);
        exact_degree(dim, d - e, prefix, out);
        prefix.pop();
    }
}

impl MonomialBasis {
    /// Complete graded-lex basis of total degree ≤ `degree`.
    pub fn full(input_dim: usize, degree: u32, exclude_constant: bool) -> Result<Self> {
        if input_dim == 0 {
            return Err(BlError::InvalidArgument("input_dim must be ≥ 1".into()));
        }
        if degree > MAX_DEGREE {
            return Err(BlError::InvalidArgument(format!(
                "degree {degree} exceeds the cap of {MAX_DEGREE}"
            )));
        }
        if degree == 0 && exclude_constant {
            return Err(BlError::EmptyBasis);
        }
        let mut exponents = Vec::new();
        let start = if exclude_constant { 1 } else { 0 };
        for d in start..=degree {
            exact_degree(input_dim, d, &mut Vec::new(), &mut exponents);
        }
        Ok(Self {
            input_dim,
            degree,
            spec: BasisSpec::Full { exclude_constant },
            exponents,
        })
    }

    /// Complete basis restricted to monomials touching `y_range`. Excludes
    /// the constant and every pure function of the remaining coordinates.
    pub fn y_dependent(input_dim: usize, degree: u32, y_range: Range<usize>) -> Result<Self> {
        if y_range.end > input_dim || y_range.is_empty() {
            return Err(BlError::InvalidArgument(
                "response span must be nonempty and inside the input".into(),
            ));
        }
        let full = Self::full(input_dim, degree, true)?;
        let exponents: Vec<Vec<u8>> = full
            .exponents
            .into_iter()
            .filter(|e| y_range.clone().any(|j| e[j] > 0))
            .collect();
        if exponents.is_empty() {
            return Err(BlError::EmptyBasis);
        }
        Ok(Self {
            input_dim,
            degree,
            spec: BasisSpec::YDependent,
            exponents,
        })
    }

    /// Basis from an explicit exponent list. The list is sorted into graded
    /// order; duplicates are rejected.
    pub fn custom(input_dim: usize, exponents: Vec<Vec<u8>>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(BlError::EmptyBasis);
        }
        let mut exps = exponents;
        for e in &exps {
            if e.len() != input_dim {
                return Err(BlError::Shape {
                    context: "custom basis exponent vector".into(),
                    expected: input_dim,
                    got: e.len(),
                });
            }
            let total: u32 = e.iter().map(|&v| v as u32).sum();
            if total > MAX_DEGREE {
                return Err(BlError::InvalidArgument(format!(
                    "monomial degree {total} exceeds the cap of {MAX_DEGREE}"
                )));
            }
        }
        exps.sort_by(|a, b| graded_lex(a, b));
        if exps.windows(2).any(|w| w[0] == w[1]) {
            return Err(BlError::InvalidArgument(
                "duplicate exponent vector in custom basis".into(),
            ));
        }
        let degree = exps
            .iter()
            .map(|e| e.iter().map(|&v| v as u32).sum())
            .max()
            .unwrap_or(0);
        Ok(Self {
            input_dim,
            degree,
            spec: BasisSpec::Custom,
            exponents: exps,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exponents
    }

    /// Human-readable label of monomial `k`, e.g. `x1²·x2` under the given
    /// coordinate names.
    pub fn label(&self, k: usize, names: &[String]) -> String {
        let e = &self.exponents[k];
        let mut parts = Vec::new();
        for (j, &p) in e.iter().enumerate() {
            match p {
                0 => {}
                1 => parts.push(names[j].clone()),
                _ => parts.push(format!("{}^{}", names[j], p)),
            }
        }
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }

    /// Evaluate the monomial vector into `out`.
    pub fn eval(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.input_dim);
        debug_assert_eq!(out.len(), self.exponents.len());
        for (k, e) in self.exponents.iter().enumerate() {
            out[k] = monomial_value(e, z);
        }
    }

    /// Directional derivative of the monomial vector along `zdot`.
    pub fn eval_dir(&self, z: &[f64], zdot: &[f64], out: &mut [f64]) {
        for (k, e) in self.exponents.iter().enumerate() {
            let mut acc = 0.0;
            for (j, &ej) in e.iter().enumerate() {
                if ej > 0 && zdot[j] != 0.0 {
                    acc += zdot[j] * monomial_partial(e, z, j);
                }
            }
            out[k] = acc;
        }
    }

    /// `out += Σ_k v[k] · ∇_z m_k(z)`, i.e. the transposed-Jacobian action.
    pub fn add_weighted_grad(&self, z: &[f64], v: &[f64], out: &mut [f64]) {
        for (k, e) in self.exponents.iter().enumerate() {
            let vk = v[k];
            if vk == 0.0 {
                continue;
            }
            for (j, &ej) in e.iter().enumerate() {
                if ej > 0 {
                    out[j] += vk * monomial_partial(e, z, j);
                }
            }
        }
    }

    /// `out += Σ_k v[k] · H_k(z) · zdot` where `H_k` is monomial `k`'s Hessian.
    pub fn add_weighted_hvp(&self, z: &[f64], zdot: &[f64], v: &[f64], out: &mut [f64]) {
        for (k, e) in self.exponents.iter().enumerate() {
            let vk = v[k];
            if vk == 0.0 {
                continue;
            }
            for (j, &ej) in e.iter().enumerate() {
                if ej == 0 {
                    continue;
                }
                let mut acc = 0.0;
                for (l, &el) in e.iter().enumerate() {
                    if el == 0 || zdot[l] == 0.0 {
                        continue;
                    }
                    acc += zdot[l] * monomial_second_partial(e, z, j, l);
                }
                out[j] += vk * acc;
            }
        }
    }
}

/// `z^e` with the convention `0^0 = 1`.
pub fn monomial_value(e: &[u8], z: &[f64]) -> f64 {
    let mut v = 1.0;
    for (&ej, &zj) in e.iter().zip(z) {
        for _ in 0..ej {
            v *= zj;
        }
    }
    v
}

/// `∂ z^e / ∂ z_j`, exact from the exponents.
pub fn monomial_partial(e: &[u8], z: &[f64], j: usize) -> f64 {
    let ej = e[j];
    if ej == 0 {
        return 0.0;
    }
    let mut v = ej as f64;
    for (l, (&el, &zl)) in e.iter().zip(z).enumerate() {
        let p = if l == j { el - 1 } else { el };
        for _ in 0..p {
            v *= zl;
        }
    }
    v
}

/// `∂² z^e / ∂ z_j ∂ z_l`.
pub fn monomial_second_partial(e: &[u8], z: &[f64], j: usize, l: usize) -> f64 {
    let (ej, el) = (e[j], e[l]);
    if j == l {
        if ej < 2 {
            return 0.0;
        }
        let mut v = (ej as f64) * (ej as f64 - 1.0);
        for (i, (&ei, &zi)) in e.iter().zip(z).enumerate() {
            let p = if i == j { ei - 2 } else { ei };
            for _ in 0..p {
                v *= zi;
            }
        }
        v
    } else {
        if ej == 0 || el == 0 {
            return 0.0;
        }
        let mut v = (ej as f64) * (el as f64);
        for (i, (&ei, &zi)) in e.iter().zip(z).enumerate() {
            let p = if i == j || i == l { ei - 1 } else { ei };
            for _ in 0..p {
                v *= zi;
            }
        }
        v
    }
}

/// A linear map over a monomial basis: `z ↦ coeff · m(z) + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialMap {
    basis: MonomialBasis,
    coeff: Mat,
    bias: Option<Vec<f64>>,
    /// Index span of the response coordinates inside the concatenated input.
    y_start: usize,
    y_len: usize,
}

impl PolynomialMap {
    pub fn new(
        basis: MonomialBasis,
        coeff: Mat,
        bias: Option<Vec<f64>>,
        y_range: Range<usize>,
    ) -> Result<Self> {
        if coeff.cols() != basis.len() {
            return Err(BlError::Shape {
                context: "coefficient columns vs basis size".into(),
                expected: basis.len(),
                got: coeff.cols(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != coeff.rows() {
                return Err(BlError::Shape {
                    context: "bias length vs output rows".into(),
                    expected: coeff.rows(),
                    got: b.len(),
                });
            }
        }
        if y_range.end > basis.input_dim() {
            return Err(BlError::InvalidArgument(
                "response span exceeds input dimension".into(),
            ));
        }
        Ok(Self {
            basis,
            coeff,
            bias,
            y_start: y_range.start,
            y_len: y_range.end - y_range.start,
        })
    }

    /// Zero-coefficient map of the given output arity.
    pub fn zeros(basis: MonomialBasis, out_dim: usize, bias: bool, y_range: Range<usize>) -> Self {
        let coeff = Mat::zeros(out_dim, basis.len());
        let b = bias.then(|| vec![0.0; out_dim]);
        Self::new(basis, coeff, b, y_range).expect("zero map shapes are consistent")
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn coeff(&self) -> &Mat {
        &self.coeff
    }

    pub fn coeff_mut(&mut self) -> &mut Mat {
        &mut self.coeff
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.bias.as_mut()
    }

    pub fn out_dim(&self) -> usize {
        self.coeff.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.input_dim()
    }

    pub fn y_range(&self) -> Range<usize> {
        self.y_start..self.y_start + self.y_len
    }

    /// `true` when no nonzero coefficient sits on a monomial independent of
    /// the response span and no bias is present.
    pub fn is_y_dependent_only(&self) -> bool {
        if self.bias.is_some() {
            return false;
        }
        let yr = self.y_range();
        for (k, e) in self.basis.exponents().iter().enumerate() {
            let touches_y = yr.clone().any(|j| e[j] > 0);
            if !touches_y {
                for i in 0..self.coeff.rows() {
                    if self.coeff[(i, k)] != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(BlError::Shape {
                context: "polynomial map input".into(),
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `coeff · m(z) + bias`.
    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut m = vec![0.0; self.basis.len()];
        self.basis.eval(z, &mut m);
        let mut out = vec![0.0; self.out_dim()];
        self.coeff.matvec(&m, &mut out);
        if let Some(b) = &self.bias {
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi;
            }
        }
        Ok(out)
    }

    /// Jacobian of `eval` restricted to the response columns.
    pub fn jacobian_y(&self, z: &[f64]) -> Result<Mat> {
        self.check_input(z)?;
        let yr = self.y_range();
        let mut jac = Mat::zeros(self.out_dim(), yr.len());
        for (k, e) in self.basis.exponents().iter().enumerate() {
            for (cj, j) in yr.clone().enumerate() {
                if e[j] == 0 {
                    continue;
                }
                let d = monomial_partial(e, z, j);
                if d == 0.0 {
                    continue;
                }
                for i in 0..self.out_dim() {
                    jac[(i, cj)] += self.coeff[(i, k)] * d;
                }
            }
        }
        Ok(jac)
    }
}
