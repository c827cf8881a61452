//! Tensor-product equidistant grids with trapezoidal weights.
//!
//! Nodes are numbered in row-major order: the last axis varies fastest.
//! The weight of a node is the volume of its dual cell, which is the
//! tensor trapezoid weight, so boundary nodes carry half the interior
//! weight per extremal axis and the weights sum to the box volume.

use crate::model::BoxDomain;
use crate::{Error, Result};

/// Points this far outside the box are clamped instead of rejected.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Grid {
    domain: BoxDomain,
    counts: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(domain: &BoxDomain, counts: &[usize]) -> Result<Grid> {
        let dim = domain.dim();
        if counts.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "expected {dim} node counts, got {}",
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().find(|&&c| c < 3) {
            return Err(Error::InvalidGrid(format!("node count {c} is below the minimum of 3")));
        }
        if domain.lower.iter().zip(&domain.upper).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidGrid("empty domain".into()));
        }
        let spacing: Vec<f64> = (0..dim)
            .map(|a| (domain.upper[a] - domain.lower[a]) / (counts[a] - 1) as f64)
            .collect();
        let mut strides = vec![1; dim];
        for a in (0..dim.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * counts[a + 1];
        }
        let n: usize = counts.iter().product();
        let mut coords = Vec::with_capacity(n * dim);
        let mut weights = Vec::with_capacity(n);
        let mut multi = vec![0; dim];
        for flat in 0..n {
            unflatten(&strides, counts, flat, &mut multi);
            let mut w = 1.0;
            for a in 0..dim {
                coords.push(axis_coord(domain, &spacing, counts, a, multi[a]));
                let extremal = multi[a] == 0 || multi[a] == counts[a] - 1;
                w *= if extremal { 0.5 * spacing[a] } else { spacing[a] };
            }
            weights.push(w);
        }
        Ok(Grid {
            domain: domain.clone(),
            counts: counts.to_vec(),
            spacing,
            strides,
            coords,
            weights,
        })
    }

    /// Same node count on every axis.
    pub fn uniform(domain: &BoxDomain, per_axis: usize) -> Result<Grid> {
        Self::new(domain, &vec![per_axis; domain.dim()])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim())
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim()];
        unflatten(&self.strides, &self.counts, flat, &mut m);
        m
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Width of the dual cell of index `k` along `axis`.
    pub fn dual_width(&self, axis: usize, k: usize) -> f64 {
        if k == 0 || k == self.counts[axis] - 1 {
            0.5 * self.spacing[axis]
        } else {
            self.spacing[axis]
        }
    }

    /// Node closest to the box center.
    pub fn center_node(&self) -> usize {
        let c = self.domain.center();
        let multi: Vec<usize> = (0..self.dim())
            .map(|a| {
                let t = (c[a] - self.domain.lower[a]) / self.spacing[a];
                (t.round() as usize).min(self.counts[a] - 1)
            })
            .collect();
        self.flat_index(&multi)
    }

    /// Multilinear interpolation of nodal values.
    pub fn interpolate(&self, field: &[f64], x: &[f64]) -> Result<f64> {
        let mut base = vec![0; self.dim()];
        let mut frac = vec![0.0; self.dim()];
        self.locate(x, &mut base, &mut frac)?;
        Ok(self.blend(field, &base, &frac))
    }

    /// Cell lookup for `x`: lower corner multi-index and local coordinates.
    pub fn locate(&self, x: &[f64], base: &mut [usize], frac: &mut [f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::OutOfDomain(x.to_vec()));
        }
        for a in 0..self.dim() {
            let (lo, hi) = (self.domain.lower[a], self.domain.upper[a]);
            let tol = CLAMP_TOLERANCE * (1.0 + lo.abs().max(hi.abs()));
            if !(x[a] >= lo - tol && x[a] <= hi + tol) {
                return Err(Error::OutOfDomain(x.to_vec()));
            }
            let t = ((x[a] - lo) / self.spacing[a]).clamp(0.0, (self.counts[a] - 1) as f64);
            let cell = (t.floor() as usize).min(self.counts[a] - 2);
            base[a] = cell;
            frac[a] = t - cell as f64;
        }
        Ok(())
    }

    /// Interpolate after [`Grid::locate`]; allocation free.
    pub fn blend(&self, field: &[f64], base: &[usize], frac: &[f64]) -> f64 {
        let d = self.dim();
        let origin: usize = base.iter().zip(&self.strides).map(|(b, s)| b * s).sum();
        let mut acc = 0.0;
        for corner in 0..1usize << d {
            let mut w = 1.0;
            let mut idx = origin;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx += self.strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * field[idx];
            }
        }
        acc
    }

    /// Interpolate a field sampled on `self` at every node of `other`.
    pub fn resample_onto(&self, field: &[f64], other: &Grid) -> Result<Vec<f64>> {
        other.nodes().map(|x| self.interpolate(field, x)).collect()
    }
}

fn axis_coord(domain: &BoxDomain, spacing: &[f64], counts: &[usize], a: usize, k: usize) -> f64 {
    if k == counts[a] - 1 {
        domain.upper[a]
    } else {
        domain.lower[a] + k as f64 * spacing[a]
    }
}

fn unflatten(strides: &[usize], counts: &[usize], flat: usize, out: &mut [usize]) {
    for a in 0..strides.len() {
        out[a] = (flat / strides[a]) % counts[a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_node_trapezoid() {
        let g = Grid::new(&BoxDomain::cube(1, 0.0, 1.0), &[3]).unwrap();
        let nodes: Vec<f64> = g.nodes().map(|x| x[0]).collect();
        assert_eq!(nodes, vec![0.0, 0.5, 1.0]);
        assert_eq!(g.weights(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn case_study_grid_size_and_volume() {
        let g = Grid::uniform(&BoxDomain::cube(2, -3.0, 3.0), 150).unwrap();
        assert_eq!(g.len(), 22500);
        let total: f64 = g.weights().iter().sum();
        assert!((total - 36.0).abs() <= 1e-12 * 36.0);
    }

    #[test]
    fn boundary_weights_halve_per_extremal_axis() {
        let g = Grid::new(&BoxDomain::new(vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 5.0]), &[4, 5, 3]).unwrap();
        let interior: f64 = g.spacing().iter().product();
        for i in 0..g.len() {
            let m = g.multi_index(i);
            let extremal = m
                .iter()
                .zip(g.counts())
                .filter(|(k, c)| **k == 0 || **k == **c - 1)
                .count();
            let expected = interior * 0.5f64.powi(extremal as i32);
            assert!((g.weights()[i] - expected).abs() < 1e-15);
        }
        assert!((g.weights().iter().sum::<f64>() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_coarse_counts() {
        assert!(matches!(
            Grid::new(&BoxDomain::cube(1, 0.0, 1.0), &[2]),
            Err(Error::InvalidGrid(_))
        ));
        assert!(Grid::new(&BoxDomain::cube(2, 0.0, 1.0), &[3]).is_err());
    }

    #[test]
    fn interpolation_basics() {
        let g = Grid::new(&BoxDomain::cube(1, 0.0, 1.0), &[3]).unwrap();
        assert_eq!(g.interpolate(&[0.0, 1.0, 0.0], &[0.25]).unwrap(), 0.5);
        assert_eq!(g.interpolate(&[0.0, 1.0, 0.0], &[1.0 + 1e-13]).unwrap(), 0.0);
        assert!(matches!(
            g.interpolate(&[0.0, 1.0, 0.0], &[1.1]),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn center_node_is_central() {
        let g = Grid::uniform(&BoxDomain::cube(2, -3.0, 3.0), 11).unwrap();
        assert_eq!(g.node(g.center_node()), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn reproduces_linear_functions(x in -3.0f64..3.0, y in -1.0f64..2.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let g = Grid::new(&BoxDomain::new(vec![-3.0, -1.0], vec![3.0, 2.0]), &[7, 5]).unwrap();
            let field: Vec<f64> = g.nodes().map(|p| 1.0 + a * p[0] + b * p[1]).collect();
            let v = g.interpolate(&field, &[x, y]).unwrap();
            prop_assert!((v - (1.0 + a * x + b * y)).abs() < 1e-12);
            let x1: Vec<f64> = g.nodes().map(|p| p[0]).collect();
            prop_assert!((g.interpolate(&x1, &[x, y]).unwrap() - x).abs() < 1e-12);
        }

        #[test]
        fn interpolation_is_a_convex_combination(field in proptest::collection::vec(-5.0f64..5.0, 20),
                                                 x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let g = Grid::new(&BoxDomain::cube(2, 0.0, 1.0), &[4, 5]).unwrap();
            let v = g.interpolate(&field, &[x, y]).unwrap();
            let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn exact_at_nodes(field in proptest::collection::vec(-5.0f64..5.0, 60), i in 0usize..60) {
            let g = Grid::new(&BoxDomain::new(vec![0.0, 0.0, -1.0], vec![1.0, 2.0, 1.0]), &[3, 4, 5]).unwrap();
            let v = g.interpolate(&field, g.node(i)).unwrap();
            prop_assert!((v - field[i]).abs() < 1e-12);
        }

        #[test]
        fn index_maps_are_inverse(i in 0usize..60) {
            let g = Grid::new(&BoxDomain::new(vec![0.0, 0.0, -1.0], vec![1.0, 2.0, 1.0]), &[3, 4, 5]).unwrap();
            prop_assert_eq!(g.flat_index(&g.multi_index(i)), i);
        }
    }
}
