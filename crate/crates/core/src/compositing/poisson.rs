//! Seamless cloning by solving the discrete Poisson equation over the
//! pasted mask with conjugate gradients.
//!
//! For every masked pixel `p` the solver enforces
//!
//! ```text
//! 4 f_p - sum_{q in N4(p)} f_q = 4 g_p - sum_{q in N4(p)} g_q
//! ```
//!
//! where `g` is the reference resampled to the placement (edge-replicated
//! past the rectangle) and `f_q` is fixed to the context for `q` outside the
//! mask. Values are solved in `[0, 1]` units and clamped only when written
//! back to 8-bit pixels.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_placement, fit_to_placement, Backend, CompositeError, CompositeResult, Compositor, SolverStats};
use crate::types::{ContextScene, PlacementSpec, ReferenceInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    /// Max-norm residual bound, in `[0, 1]` pixel units.
    pub tol: f64,
    /// Defaults to `ceil(10 * sqrt(unknowns))` when unset.
    pub max_iter: Option<usize>,
}

impl Default for PoissonParams {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: None,
        }
    }
}

impl PoissonParams {
    pub fn max_iter_for(&self, unknowns: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| (10.0 * (unknowns as f64).sqrt()).ceil() as usize)
            .max(1)
    }
}

#[derive(Debug, Clone, Copy)]
enum Neighbor {
    Unknown(usize),
    Fixed([f64; 3]),
}

/// The assembled sparse system for one placement.
#[derive(Debug, Clone)]
pub struct PoissonProblem {
    unknowns: Vec<(u32, u32)>,
    neighbors: Vec<[Neighbor; 4]>,
    rhs: [Vec<f64>; 3],
    initial: [Vec<f64>; 3],
}

/// Solved channel values for each unknown pixel, in `[0, 1]` units and not
/// yet clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    pub unknowns: Vec<(u32, u32)>,
    pub values: [Vec<f64>; 3],
    pub stats: SolverStats,
}

fn unit(v: u8) -> f64 {
    f64::from(v) / 255.0
}

impl PoissonProblem {
    pub fn new(
        context: &ContextScene,
        reference: &ReferenceInstance,
        placement: &PlacementSpec,
    ) -> Result<Self, CompositeError> {
        check_placement(context, placement)?;
        let (cw, ch) = context.dimensions();
        let rect = placement.pixel_rect();
        let (src, mask) = fit_to_placement(reference, placement)?;
        let ctx = context.pixels();

        let mut index = vec![usize::MAX; (cw * ch) as usize];
        let mut unknowns = Vec::new();
        for y in 0..rect.height {
            for x in 0..rect.width {
                if !mask.get(x, y) {
                    continue;
                }
                let (gx, gy) = (rect.x + x, rect.y + y);
                if gx == 0 || gy == 0 || gx + 1 == cw || gy + 1 == ch {
                    return Err(CompositeError::MaskTouchesBorder { x: gx, y: gy });
                }
                index[(gy * cw + gx) as usize] = unknowns.len();
                unknowns.push((gx, gy));
            }
        }
        if unknowns.is_empty() {
            return Err(CompositeError::EmptyMask);
        }

        // source sampled in context coordinates, clamped to the rectangle
        let source = |gx: i64, gy: i64| {
            let lx = (gx - i64::from(rect.x)).clamp(0, i64::from(rect.width) - 1) as u32;
            let ly = (gy - i64::from(rect.y)).clamp(0, i64::from(rect.height) - 1) as u32;
            src.get_pixel(lx, ly)
        };

        let n = unknowns.len();
        let mut neighbors = Vec::with_capacity(n);
        let mut rhs = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut initial = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (k, &(x, y)) in unknowns.iter().enumerate() {
            let (xi, yi) = (i64::from(x), i64::from(y));
            let gp = source(xi, yi);
            let cp = ctx.get_pixel(x, y);
            let mut nb = [Neighbor::Unknown(0); 4];
            for (slot, (dx, dy)) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].into_iter().enumerate() {
                let (qx, qy) = ((xi + dx) as u32, (yi + dy) as u32);
                let gq = source(xi + dx, yi + dy);
                let qi = index[(qy * cw + qx) as usize];
                nb[slot] = if qi == usize::MAX {
                    let cq = ctx.get_pixel(qx, qy);
                    Neighbor::Fixed([unit(cq[0]), unit(cq[1]), unit(cq[2])])
                } else {
                    Neighbor::Unknown(qi)
                };
                for c in 0..3 {
                    rhs[c][k] += unit(gp[c]) - unit(gq[c]);
                    if let Neighbor::Fixed(v) = nb[slot] {
                        rhs[c][k] += v[c];
                    }
                }
            }
            for c in 0..3 {
                initial[c][k] = unit(cp[c]);
            }
            neighbors.push(nb);
        }
        Ok(Self {
            unknowns,
            neighbors,
            rhs,
            initial,
        })
    }

    pub fn unknowns(&self) -> &[(u32, u32)] {
        &self.unknowns
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (k, nb) in self.neighbors.iter().enumerate() {
            let mut v = 4.0 * x[k];
            for n in nb {
                if let Neighbor::Unknown(q) = n {
                    v -= x[*q];
                }
            }
            out[k] = v;
        }
    }

    fn residual(&self, channel: usize, x: &[f64], r: &mut [f64]) -> f64 {
        self.apply(x, r);
        let mut max = 0.0f64;
        for (ri, bi) in r.iter_mut().zip(&self.rhs[channel]) {
            *ri = bi - *ri;
            max = max.max(ri.abs());
        }
        max
    }

    fn solve_channel(&self, channel: usize, tol: f64, max_iter: usize) -> (Vec<f64>, SolverStats) {
        let n = self.unknowns.len();
        let mut x = self.initial[channel].clone();
        let mut r = vec![0.0; n];
        let mut res = self.residual(channel, &x, &mut r);
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let mut iterations = 0;
        while res > tol && iterations < max_iter {
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            iterations += 1;
            let recursive = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if recursive <= tol {
                // confirm against the true residual; restart on drift
                res = self.residual(channel, &x, &mut r);
                if res <= tol {
                    break;
                }
                p.copy_from_slice(&r);
                rr = r.iter().map(|v| v * v).sum();
                continue;
            }
            res = recursive;
            let rr_next: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_next / rr;
            rr = rr_next;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        let res = self.residual(channel, &x, &mut r);
        (
            x,
            SolverStats {
                iterations,
                residual: res,
                converged: res <= tol,
            },
        )
    }

    pub fn solve(&self, params: &PoissonParams) -> PoissonSolution {
        let max_iter = params.max_iter_for(self.unknowns.len());
        let mut solved: Vec<(Vec<f64>, SolverStats)> = (0..3)
            .into_par_iter()
            .map(|c| self.solve_channel(c, params.tol, max_iter))
            .collect();
        let stats = solved.iter().fold(
            SolverStats {
                iterations: 0,
                residual: 0.0,
                converged: true,
            },
            |acc, (_, s)| SolverStats {
                iterations: acc.iterations.max(s.iterations),
                residual: acc.residual.max(s.residual),
                converged: acc.converged && s.converged,
            },
        );
        let b = solved.pop().unwrap().0;
        let g = solved.pop().unwrap().0;
        let r = solved.pop().unwrap().0;
        PoissonSolution {
            unknowns: self.unknowns.clone(),
            values: [r, g, b],
            stats,
        }
    }
}

/// Gradient-domain paste. A solve that stops at `max_iter` still returns its
/// image, with `solver_stats.converged == false`.
pub fn compose_poisson(
    context: &ContextScene,
    reference: &ReferenceInstance,
    placement: &PlacementSpec,
    params: &PoissonParams,
) -> Result<CompositeResult, CompositeError> {
    let problem = PoissonProblem::new(context, reference, placement)?;
    let solution = problem.solve(params);
    if !solution.stats.converged {
        warn!(
            "poisson solve for {} stopped after {} iterations at residual {:.3e}",
            context.id, solution.stats.iterations, solution.stats.residual
        );
    }
    let mut out = context.pixels().clone();
    for (k, &(x, y)) in solution.unknowns.iter().enumerate() {
        let px = out.get_pixel_mut(x, y);
        for c in 0..3 {
            px[c] = (solution.values[c][k] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(CompositeResult {
        pixels: out,
        new_box: placement.target(),
        backend: Backend::Poisson,
        solver_stats: Some(solution.stats),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PoissonCompositor {
    pub params: PoissonParams,
}

impl Compositor for PoissonCompositor {
    fn backend(&self) -> Backend {
        Backend::Poisson
    }

    fn border_margin(&self) -> u32 {
        1
    }

    fn compose(
        &self,
        context: &ContextScene,
        reference: &ReferenceInstance,
        placement: &PlacementSpec,
        _seed: u64,
    ) -> Result<CompositeResult, CompositeError> {
        compose_poisson(context, reference, placement, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, ClassLabel, Mask, SourceRef};
    use image::{Rgb, RgbImage};

    fn reference(px: RgbImage, mask: Mask) -> ReferenceInstance {
        let (w, h) = px.dimensions();
        ReferenceInstance::new(
            px,
            mask,
            ClassLabel::novel("airplane"),
            SourceRef {
                image_id: "s".into(),
                bbox: BBox::new(0.0, 0.0, f64::from(w), f64::from(h)).unwrap(),
            },
        )
        .unwrap()
    }

    fn place(ctx: &ContextScene, x: f64, y: f64, w: f64, h: f64) -> PlacementSpec {
        PlacementSpec::in_context(BBox::new(x, y, x + w, y + h).unwrap(), ctx).unwrap()
    }

    #[test]
    fn single_unknown_is_harmonic_mean_of_neighbors() {
        let ctx = ContextScene::new("c", RgbImage::from_pixel(3, 3, Rgb([10, 10, 10])), vec![], true).unwrap();
        let r = reference(RgbImage::from_pixel(1, 1, Rgb([250, 0, 90])), Mask::full(1, 1));
        let p = place(&ctx, 1.0, 1.0, 1.0, 1.0);
        let out = compose_poisson(&ctx, &r, &p, &PoissonParams::default()).unwrap();
        assert_eq!(*out.pixels.get_pixel(1, 1), Rgb([10, 10, 10]));
        let sol = PoissonProblem::new(&ctx, &r, &p).unwrap().solve(&PoissonParams::default());
        for c in 0..3 {
            assert!((sol.values[c][0] - 10.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn border_touching_mask_rejected() {
        let ctx = ContextScene::new("c", RgbImage::new(10, 10), vec![], true).unwrap();
        let r = reference(RgbImage::new(4, 4), Mask::full(4, 4));
        let p = place(&ctx, 0.0, 3.0, 4.0, 4.0);
        assert!(matches!(
            compose_poisson(&ctx, &r, &p, &PoissonParams::default()),
            Err(CompositeError::MaskTouchesBorder { x: 0, .. })
        ));
    }

    #[test]
    fn nonconvergence_is_flagged_not_fatal() {
        let ctx = ContextScene::new(
            "c",
            RgbImage::from_fn(40, 40, |x, y| Rgb([(x * 6) as u8, (y * 6) as u8, 0])),
            vec![],
            true,
        )
        .unwrap();
        let r = reference(RgbImage::from_fn(30, 30, |x, _| Rgb([(x * 8) as u8, 255, 0])), Mask::full(30, 30));
        let p = place(&ctx, 5.0, 5.0, 30.0, 30.0);
        let params = PoissonParams {
            tol: 1e-12,
            max_iter: Some(2),
        };
        let out = compose_poisson(&ctx, &r, &p, &params).unwrap();
        let stats = out.solver_stats.unwrap();
        assert!(!stats.converged);
        assert_eq!(stats.iterations, 2);
    }

    #[test]
    fn default_iteration_cap() {
        assert_eq!(PoissonParams::default().max_iter_for(100), 100);
        assert_eq!(PoissonParams::default().max_iter_for(2), 15);
    }
}
