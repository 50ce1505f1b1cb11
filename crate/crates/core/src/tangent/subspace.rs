use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifold::{center, density_ratio, inner_product, norm, Distribution, StateFunction};
use crate::numeric::RANK_TOL;

/// A finite-dimensional subspace of `L2_0(P)` with a `P`-orthonormal basis.
#[derive(Debug, Clone, Serialize)]
pub struct Subspace {
    base: Distribution,
    basis: Vec<StateFunction>,
}

impl Subspace {
    pub fn zero(base: &Distribution) -> Self {
        Self {
            base: base.clone(),
            basis: Vec::new(),
        }
    }

    /// All of `L2_0(P)`, dimension `K - 1`.
    pub fn full(base: &Distribution) -> Self {
        let space = base.space();
        let vectors = (0..space.len()).map(|i| StateFunction::indicator(space, i));
        Self::span(base, vectors).expect("indicators live on the base space")
    }

    /// Centers every vector at `base` and orthonormalizes with pivoted
    /// Gram–Schmidt (two passes). A candidate is dropped once its residual norm
    /// falls below `RANK_TOL` times the largest input norm.
    pub fn span<I>(base: &Distribution, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = StateFunction>,
    {
        Self::span_scaled(base, vectors, None)
    }

    /// As [`Subspace::span`], with the pruning cutoff taken relative to `scale`
    /// instead of the largest input norm.
    pub fn span_scaled<I>(base: &Distribution, vectors: I, scale: Option<f64>) -> Result<Self>
    where
        I: IntoIterator<Item = StateFunction>,
    {
        let mut cands = vectors
            .into_iter()
            .map(|v| center(&v, base))
            .collect::<Result<Vec<_>>>()?;
        let mut norms = cands
            .iter()
            .map(|v| norm(v, base))
            .collect::<Result<Vec<_>>>()?;
        let scale = scale.unwrap_or_else(|| norms.iter().cloned().fold(0.0, f64::max));
        let mut out = Self::zero(base);
        if scale == 0.0 {
            return Ok(out);
        }
        let cutoff = RANK_TOL * scale;
        let mut used = vec![false; cands.len()];
        let max_dim = base.len() - 1;
        while out.basis.len() < max_dim {
            let mut pick: Option<usize> = None;
            for i in 0..cands.len() {
                if used[i] {
                    continue;
                }
                if pick.is_none_or(|j| norms[i] > norms[j]) {
                    pick = Some(i);
                }
            }
            let Some(i) = pick else { break };
            if norms[i] <= cutoff {
                break;
            }
            used[i] = true;
            let mut q = cands[i].clone();
            for b in &out.basis {
                let c = inner_product(&q, b, base)?;
                q = q.axpy(-c, b)?;
            }
            let n = norm(&q, base)?;
            if n <= cutoff {
                continue;
            }
            let q = q.scale(1.0 / n);
            for j in 0..cands.len() {
                if used[j] {
                    continue;
                }
                let c = inner_product(&cands[j], &q, base)?;
                cands[j] = cands[j].axpy(-c, &q)?;
                norms[j] = norm(&cands[j], base)?;
            }
            out.basis.push(q);
        }
        Ok(out)
    }

    pub fn base(&self) -> &Distribution {
        &self.base
    }

    pub fn basis(&self) -> &[StateFunction] {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Orthogonal projection of `center(f, base)` onto the span.
    pub fn project(&self, f: &StateFunction) -> Result<StateFunction> {
        let f = center(f, &self.base)?;
        let mut proj = StateFunction::zero(f.space());
        let mut resid = f.clone();
        for _ in 0..2 {
            for q in &self.basis {
                let c = inner_product(&resid, q, &self.base)?;
                proj = proj.axpy(c, q)?;
            }
            resid = f.sub(&proj)?;
        }
        Ok(proj)
    }

    pub fn same_base(&self, other: &Subspace) -> bool {
        same_point(&self.base, &other.base)
    }
}

pub(crate) fn same_point(a: &Distribution, b: &Distribution) -> bool {
    a.max_abs_diff(b).is_ok_and(|d| d <= 1e-15)
}

/// Orthogonal complement of `s` inside `within` (all of `L2_0(P)` when `None`).
pub fn orth_complement(s: &Subspace, within: Option<&Subspace>) -> Result<Subspace> {
    let full;
    let ambient = match within {
        Some(w) => w,
        None => {
            full = Subspace::full(&s.base);
            &full
        }
    };
    if !s.same_base(ambient) {
        return Err(Error::BaseMismatch);
    }
    let residuals = ambient
        .basis
        .iter()
        .map(|a| a.sub(&s.project(a)?))
        .collect::<Result<Vec<_>>>()?;
    Subspace::span_scaled(&s.base, residuals, Some(1.0))
}

/// Largest norm of `a - proj_B(a)` over the orthonormal basis of `A`; zero iff
/// `A` is contained in `B`.
pub fn subspace_residual(a: &Subspace, b: &Subspace) -> Result<f64> {
    if !a.same_base(b) {
        return Err(Error::BaseMismatch);
    }
    let mut worst: f64 = 0.0;
    for v in &a.basis {
        let r = v.sub(&b.project(v)?)?;
        worst = worst.max(norm(&r, &a.base)?);
    }
    Ok(worst)
}

/// Tangent space of a convex model at `p`: the span of `dP'/dP - 1` over the
/// given members.
pub fn convex_tangent_basis(members: &[Distribution], p: &Distribution) -> Result<Subspace> {
    if members.is_empty() {
        return Err(Error::Empty("member list"));
    }
    let vectors = members
        .iter()
        .map(|q| Ok(density_ratio(p, q)?.shift(-1.0)))
        .collect::<Result<Vec<_>>>()?;
    Subspace::span(p, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{expectation, SampleSpace};
    use std::sync::Arc;

    fn space(k: usize) -> Arc<SampleSpace> {
        SampleSpace::indexed(k).unwrap()
    }

    fn f(s: &Arc<SampleSpace>, v: &[f64]) -> StateFunction {
        StateFunction::new(s.clone(), v.to_vec()).unwrap()
    }

    #[test]
    fn project_examples() {
        let s = space(2);
        let p = Distribution::new(s.clone(), vec![0.5, 0.5]).unwrap();
        let sub = Subspace::span(&p, [f(&s, &[1.0, -1.0])]).unwrap();
        let proj = sub.project(&f(&s, &[2.0, 0.0])).unwrap();
        assert!((proj.values()[0] - 1.0).abs() < 1e-15);
        assert!((proj.values()[1] + 1.0).abs() < 1e-15);
        // idempotent on the span
        let g = f(&s, &[0.3, -0.3]);
        assert!(sub.project(&g).unwrap().max_abs_diff(&g).unwrap() < 1e-12);
    }

    #[test]
    fn orthogonal_input_projects_to_zero() {
        let s = space(3);
        let p = Distribution::uniform(s.clone());
        let sub = Subspace::span(&p, [f(&s, &[1.0, -1.0, 0.0])]).unwrap();
        let g = f(&s, &[1.0, 1.0, -2.0]);
        assert!(sub.project(&g).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn complement_dimensions() {
        let s = space(3);
        let p = Distribution::new(s.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        let full = Subspace::full(&p);
        assert_eq!(full.dim(), 2);
        assert_eq!(orth_complement(&full, None).unwrap().dim(), 0);
        assert_eq!(orth_complement(&Subspace::zero(&p), None).unwrap().dim(), 2);
        let one = Subspace::span(&p, [f(&s, &[1.0, 0.0, 0.0])]).unwrap();
        let comp = orth_complement(&one, None).unwrap();
        assert_eq!(comp.dim(), 1);
        let c = &comp.basis()[0];
        assert!(inner_product(c, &one.basis()[0], &p).unwrap().abs() < 1e-14);
        assert!(expectation(c, &p).unwrap().abs() < 1e-14);
    }

    #[test]
    fn residual_examples() {
        let s = space(3);
        let p = Distribution::uniform(s.clone());
        let a = Subspace::span(&p, [f(&s, &[1.0, -1.0, 0.0])]).unwrap();
        let b = Subspace::span(&p, [f(&s, &[1.0, 1.0, -2.0])]).unwrap();
        assert!(subspace_residual(&a, &a).unwrap() < 1e-14);
        assert_eq!(subspace_residual(&Subspace::zero(&p), &b).unwrap(), 0.0);
        assert!((subspace_residual(&a, &b).unwrap() - 1.0).abs() < 1e-14);
        let q = Distribution::new(s.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            subspace_residual(&a, &Subspace::zero(&q)),
            Err(Error::BaseMismatch)
        ));
    }

    #[test]
    fn convex_basis_examples() {
        let s = space(2);
        let p = Distribution::new(s.clone(), vec![0.5, 0.5]).unwrap();
        let q = Distribution::new(s.clone(), vec![0.25, 0.75]).unwrap();
        assert_eq!(convex_tangent_basis(std::slice::from_ref(&p), &p).unwrap().dim(), 0);
        let t = convex_tangent_basis(std::slice::from_ref(&q), &p).unwrap();
        assert_eq!(t.dim(), 1);
        let target = f(&s, &[-0.5, 0.5]);
        assert!(t.project(&target).unwrap().max_abs_diff(&target).unwrap() < 1e-15);
        let dup = convex_tangent_basis(&[q.clone(), q.clone(), p.clone()], &p).unwrap();
        assert_eq!(dup.dim(), 1);
        assert!(matches!(convex_tangent_basis(&[], &p), Err(Error::Empty(_))));
    }
}
