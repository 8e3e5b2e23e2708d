//! Numerical checks of the marginal-likelihood gradient identity, the
//! class-weight expectation and the unlabeled-pixel gradient decomposition
//! on small analytic models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Standard normal mass of `[a, b]`, evaluated on the tail nearer to the
/// interval to avoid cancellation.
fn normal_mass(a: f64, b: f64) -> f64 {
    let upper = |x: f64| 0.5 * libm::erfc(x / std::f64::consts::SQRT_2);
    if a >= 0.0 {
        upper(a) - upper(b)
    } else if b <= 0.0 {
        upper(-b) - upper(-a)
    } else {
        1.0 - upper(-a) - upper(b)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// A joint density `P(x, y | θ)` over one observation and `classes` labels.
pub trait JointDensity {
    fn classes(&self) -> usize;
    fn joint(&self, theta: &[f64], x: f64, y: usize) -> f64;
}

/// `P(x, y | θ) = softmax(θ[..K])_y · N(x; θ[K + y], 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub classes: usize,
    /// When set the density ignores `θ` and uses `fixed`.
    pub theta_free: bool,
    pub fixed: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(classes: usize) -> Self {
        GaussianMixture {
            classes,
            theta_free: false,
            fixed: vec![0.0; 2 * classes],
        }
    }

    /// Random logits and means.
    pub fn seeded_theta(classes: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * classes).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl JointDensity for GaussianMixture {
    fn classes(&self) -> usize {
        self.classes
    }

    fn joint(&self, theta: &[f64], x: f64, y: usize) -> f64 {
        let t = if self.theta_free { &self.fixed[..] } else { theta };
        let k = self.classes;
        softmax(&t[..k])[y] * normal_pdf(x - t[k + y])
    }
}

fn central_diff(f: impl Fn(&[f64]) -> f64, theta: &[f64], j: usize, step: f64) -> f64 {
    let mut tp = theta.to_vec();
    let mut tm = theta.to_vec();
    tp[j] += step;
    tm[j] -= step;
    (f(&tp) - f(&tm)) / (2.0 * step)
}

/// Both sides of the identity, per parameter coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrickSides {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TrickSides {
    pub fn discrepancy(&self) -> f64 {
        self.lhs.iter().zip(&self.rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `d/dθ log Σ_y P(x,y|θ)` against `Σ_y P(y|x,θ) d/dθ log P(x,y|θ)`, both
/// by central differences.
pub fn trick_sides(model: &impl JointDensity, x: f64, theta: &[f64], fd_step: f64) -> Result<TrickSides> {
    let k = model.classes();
    let marginal = |t: &[f64]| (0..k).map(|y| model.joint(t, x, y)).sum::<f64>();
    let px = marginal(theta);
    if !(px > f64::MIN_POSITIVE) || !px.is_finite() {
        return Err(Error::VanishingLikelihood);
    }
    let weights: Vec<f64> = (0..k).map(|y| model.joint(theta, x, y) / px).collect();
    let mut lhs = Vec::with_capacity(theta.len());
    let mut rhs = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        lhs.push(central_diff(|t| marginal(t).ln(), theta, j, fd_step));
        let mut r = 0.0;
        for (y, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                r += w * central_diff(|t| model.joint(t, x, y).ln(), theta, j, fd_step);
            }
        }
        rhs.push(r);
    }
    Ok(TrickSides { lhs, rhs })
}

/// Max absolute discrepancy of the marginal-gradient identity.
pub fn verify_trick(model: &impl JointDensity, x: f64, theta: &[f64], fd_step: f64) -> Result<f64> {
    Ok(trick_sides(model, x, theta, fd_step)?.discrepancy())
}

// ---------------------------------------------------------------------------
// classifier + generative toy

/// One-latent toy of the segmentation/generative pair:
/// feature `f(z, x) = tanh(a·x + b·z)`, classifier
/// `h(f, y) = softmax_y(w_y·f + c_y)` and generative model
/// `x ~ N(γ·s + δ, 1)` for a pixel with source value `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyJointModel {
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub delta: f64,
    /// When false the generative parameters are constants, not part of θ̄.
    pub generative_in_theta: bool,
}

impl ToyJointModel {
    pub fn seeded(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let w = (0..classes).map(|_| 2.0 * n()).collect();
        let c = (0..classes).map(|_| n()).collect();
        let gamma = n();
        let delta = 0.5 * n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xab);
        ToyJointModel {
            w,
            c,
            a: rng.gen_range(0.5..1.5),
            b: rng.gen_range(0.5..1.5),
            gamma,
            delta,
            generative_in_theta: true,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.len()
    }

    /// θ̄ = (w, c, a, b[, γ, δ]).
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.w.clone();
        t.extend(&self.c);
        t.push(self.a);
        t.push(self.b);
        if self.generative_in_theta {
            t.push(self.gamma);
            t.push(self.delta);
        }
        t
    }

    pub fn with_theta(&self, t: &[f64]) -> Self {
        let k = self.classes();
        let mut m = self.clone();
        m.w = t[..k].to_vec();
        m.c = t[k..2 * k].to_vec();
        m.a = t[2 * k];
        m.b = t[2 * k + 1];
        if self.generative_in_theta {
            m.gamma = t[2 * k + 2];
            m.delta = t[2 * k + 3];
        }
        m
    }

    pub fn generative_mean(&self, s: f64) -> f64 {
        self.gamma * s + self.delta
    }

    pub fn classify(&self, z: f64, x: f64) -> Vec<f64> {
        let f = (self.a * x + self.b * z).tanh();
        let logits: Vec<f64> = self.w.iter().zip(&self.c).map(|(w, c)| w * f + c).collect();
        softmax(&logits)
    }

    /// Logits scaled by `tau` (a confidence knob).
    pub fn sharpened(&self, tau: f64) -> Self {
        let mut m = self.clone();
        m.w.iter_mut().for_each(|v| *v *= tau);
        m.c.iter_mut().for_each(|v| *v *= tau);
        m
    }
}

/// Uniform latent grid; points are cell midpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

pub const MIN_GRID_POINTS: usize = 256;
pub const MAX_TAIL_MASS: f64 = 1e-8;

impl QuadratureGrid {
    /// `half_width` standard deviations either side of `mean`.
    pub fn around(mean: f64, half_width: f64, points: usize) -> Self {
        QuadratureGrid {
            lo: mean - half_width,
            hi: mean + half_width,
            points,
        }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.points as f64
    }

    pub fn midpoint(&self, j: usize) -> f64 {
        self.lo + (j as f64 + 0.5) * self.step()
    }

    /// Rejects grids whose bounds leave more than the allowed unit-normal
    /// tail mass around `mean`, or that are too coarse.
    pub fn validate(&self, mean: f64) -> Result<()> {
        if self.points < MIN_GRID_POINTS {
            return Err(Error::Config(format!("quadrature grid needs >= {MIN_GRID_POINTS} points")));
        }
        self.validate_bounds(mean)
    }

    fn validate_bounds(&self, mean: f64) -> Result<()> {
        if !(self.hi > self.lo) || self.points == 0 {
            return Err(Error::Config("empty quadrature grid".into()));
        }
        let tail = normal_mass(f64::NEG_INFINITY, self.lo - mean) + normal_mass(self.hi - mean, f64::INFINITY);
        if tail > MAX_TAIL_MASS {
            return Err(Error::GridTooNarrow(tail));
        }
        Ok(())
    }
}

/// One pixel's evidence: its value, its source value, and the source value
/// governing the latent neighbour `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelEvidence {
    pub x: f64,
    pub s: f64,
    pub s_latent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    pub class: usize,
    pub bayes: f64,
    pub expectation: f64,
    pub gap: f64,
}

/// Class weight of an unlabeled pixel two ways on one grid: Bayes over the
/// joint with exact per-cell latent mass, and the self-normalized
/// expectation of the classifier under the latent density.
pub fn verify_dynamic_weight(model: &ToyJointModel, px: &PixelEvidence, grid: &QuadratureGrid) -> Result<Vec<ClassWeight>> {
    let m = model.generative_mean(px.s_latent);
    grid.validate(m)?;
    Ok(dynamic_weight_unchecked(model, px, grid))
}

fn dynamic_weight_unchecked(model: &ToyJointModel, px: &PixelEvidence, grid: &QuadratureGrid) -> Vec<ClassWeight> {
    let k = model.classes();
    let m = model.generative_mean(px.s_latent);
    let lik = normal_pdf(px.x - model.generative_mean(px.s));
    let hstep = grid.step();
    let mut joint = vec![0.0; k];
    let mut expect = vec![0.0; k];
    let mut dens = 0.0;
    for j in 0..grid.points {
        let z = grid.midpoint(j);
        let h = model.classify(z, px.x);
        let lo = grid.lo + j as f64 * hstep - m;
        let mass = normal_mass(lo, lo + hstep);
        let d = normal_pdf(z - m);
        dens += d;
        for y in 0..k {
            joint[y] += h[y] * mass * lik;
            expect[y] += h[y] * d;
        }
    }
    let total: f64 = joint.iter().sum();
    (0..k)
        .map(|y| {
            let bayes = joint[y] / total;
            let expectation = expect[y] / dens;
            ClassWeight {
                class: y,
                bayes,
                expectation,
                gap: (bayes - expectation).abs(),
            }
        })
        .collect()
}

/// Max gap at each resolution over fixed bounds (coarser than the
/// validated minimum is allowed here).
pub fn dynamic_weight_convergence(
    model: &ToyJointModel,
    px: &PixelEvidence,
    half_width: f64,
    resolutions: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let m = model.generative_mean(px.s_latent);
    resolutions
        .iter()
        .map(|&n| {
            let g = QuadratureGrid::around(m, half_width, n);
            g.validate_bounds(m)?;
            let gap = dynamic_weight_unchecked(model, px, &g)
                .iter()
                .map(|c| c.gap)
                .fold(0.0, f64::max);
            Ok((n, gap))
        })
        .collect()
}

/// Fixed standardized latent nodes and weights (self-normalized).
fn latent_rule(points: usize, half_width: f64) -> Vec<(f64, f64)> {
    let g = QuadratureGrid::around(0.0, half_width, points);
    let raw: Vec<(f64, f64)> = (0..points).map(|j| (g.midpoint(j), normal_pdf(g.midpoint(j)))).collect();
    let s: f64 = raw.iter().map(|r| r.1).sum();
    raw.into_iter().map(|(u, w)| (u, w / s)).collect()
}

/// `φ₂(y) = E_Z[h(f(Z, x), y)] · N(x; g(s), 1)` for one pixel, with `θ̄`
/// as the parameter vector.
pub struct PixelJoint<'a> {
    pub model: &'a ToyJointModel,
    pub evidence: PixelEvidence,
    rule: Vec<(f64, f64)>,
}

impl<'a> PixelJoint<'a> {
    pub fn new(model: &'a ToyJointModel, evidence: PixelEvidence, points: usize) -> Self {
        PixelJoint {
            model,
            evidence,
            rule: latent_rule(points, 8.0),
        }
    }

    /// `φ₁(y)`: the normalized class weight.
    pub fn weights(&self, theta: &[f64]) -> Vec<f64> {
        let k = self.model.classes();
        let phi2: Vec<f64> = (0..k).map(|y| self.joint(theta, self.evidence.x, y)).collect();
        let s: f64 = phi2.iter().sum();
        phi2.into_iter().map(|v| v / s).collect()
    }
}

impl JointDensity for PixelJoint<'_> {
    fn classes(&self) -> usize {
        self.model.classes()
    }

    fn joint(&self, theta: &[f64], x: f64, y: usize) -> f64 {
        let m = self.model.with_theta(theta);
        let mz = m.generative_mean(self.evidence.s_latent);
        let e: f64 = self.rule.iter().map(|&(u, w)| w * m.classify(mz + u, x)[y]).sum();
        e * normal_pdf(x - m.generative_mean(self.evidence.s))
    }
}

pub const DECOMPOSITION_POINTS: usize = 512;

/// `d/dθ̄ Σ_k log N(x_k; g(s_k), 1)` against `Σ_k Σ_y φ₁ d/dθ̄ log φ₂`,
/// all by central differences; returns the max absolute discrepancy.
pub fn verify_gradient_decomposition(model: &ToyJointModel, pixels: &[PixelEvidence], fd_step: f64) -> Result<f64> {
    if pixels.is_empty() || pixels.len() > 4 || model.classes() > 3 || model.classes() == 0 {
        return Err(Error::Config("decomposition check expects 1-4 pixels and 1-3 classes".into()));
    }
    let theta = model.theta();
    let log_marginal = |t: &[f64]| {
        let m = model.with_theta(t);
        pixels
            .iter()
            .map(|p| normal_pdf(p.x - m.generative_mean(p.s)).ln())
            .sum::<f64>()
    };
    let joints: Vec<PixelJoint> = pixels.iter().map(|&p| PixelJoint::new(model, p, DECOMPOSITION_POINTS)).collect();
    for j in &joints {
        if !(j.weights(&theta).iter().all(|w| w.is_finite())) {
            return Err(Error::VanishingLikelihood);
        }
    }
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let lhs = central_diff(log_marginal, &theta, i, fd_step);
        let mut rhs = 0.0;
        for pj in &joints {
            let phi1 = pj.weights(&theta);
            for (y, &w) in phi1.iter().enumerate() {
                rhs += w * central_diff(|t| pj.joint(t, pj.evidence.x, y).ln(), &theta, i, fd_step);
            }
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Weight of the initially most likely class as the classifier's logits are
/// scaled by each `tau`.
pub fn weight_monotonicity_probe(model: &ToyJointModel, px: &PixelEvidence, taus: &[f64]) -> (usize, Vec<f64>) {
    let base = PixelJoint::new(model, *px, DECOMPOSITION_POINTS).weights(&model.theta());
    let top = (0..base.len()).fold(0, |b, y| if base[y] > base[b] { y } else { b });
    let ws = taus
        .iter()
        .map(|&t| {
            let m = model.sharpened(t);
            PixelJoint::new(&m, *px, DECOMPOSITION_POINTS).weights(&m.theta())[top]
        })
        .collect();
    (top, ws)
}

// ---------------------------------------------------------------------------
// report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsightReport {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl InsightReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.to_string(),
        value,
        tolerance,
        passed: value.is_finite() && value < tolerance,
    }
}

pub fn seeded_pixel(seed: u64) -> PixelEvidence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    PixelEvidence {
        x: StandardNormal.sample(&mut rng),
        s: StandardNormal.sample(&mut rng),
        s_latent: StandardNormal.sample(&mut rng),
    }
}

/// All checks at their default tolerances over `models` seeded toys.
pub fn run_all(seed: u64, models: usize) -> Result<InsightReport> {
    let mut checks = Vec::new();
    let mut trick = 0.0f64;
    for i in 0..models as u64 {
        let s = seed.wrapping_add(i);
        let k = 2 + (s % 3) as usize;
        let theta = GaussianMixture::seeded_theta(k, s);
        let x: f64 = StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(s ^ 0x77));
        trick = trick.max(verify_trick(&GaussianMixture::new(k), x, &theta, 1e-5)?);
        let toy = ToyJointModel::seeded(k, s);
        let pj = PixelJoint::new(&toy, seeded_pixel(s), 256);
        trick = trick.max(verify_trick(&pj, pj.evidence.x, &toy.theta(), 1e-5)?);
    }
    checks.push(check("trick_identity", trick, 1e-6));

    let mut gap = 0.0f64;
    let mut norm = 0.0f64;
    let mut halving = 0.0f64;
    for i in 0..models as u64 {
        let s = seed.wrapping_add(i);
        let toy = ToyJointModel::seeded(3, s);
        let px = seeded_pixel(s);
        let grid = QuadratureGrid::around(toy.generative_mean(px.s_latent), 8.0, 1024);
        let ws = verify_dynamic_weight(&toy, &px, &grid)?;
        gap = gap.max(ws.iter().map(|w| w.gap).fold(0.0, f64::max));
        let sb: f64 = ws.iter().map(|w| w.bayes).sum();
        let se: f64 = ws.iter().map(|w| w.expectation).sum();
        norm = norm.max((sb - 1.0).abs()).max((se - 1.0).abs());
        let conv = dynamic_weight_convergence(&toy, &px, 8.0, &[128, 256, 512, 1024])?;
        for w in conv.windows(2) {
            // ratio of successive gaps; must not exceed one half
            if w[0].1 > 0.0 {
                halving = halving.max(w[1].1 / w[0].1);
            }
        }
    }
    checks.push(check("dynamic_weight_gap_1024", gap, 1e-4));
    checks.push(check("dynamic_weight_normalization", norm, 1e-8));
    checks.push(Check {
        name: "dynamic_weight_gap_ratio_per_doubling".into(),
        value: halving,
        tolerance: 0.5,
        passed: halving <= 0.5,
    });

    let toy = ToyJointModel::seeded(2, seed);
    let pixels = [seeded_pixel(seed), seeded_pixel(seed + 1)];
    let d = verify_gradient_decomposition(&toy, &pixels, 1e-5)?;
    checks.push(check("gradient_decomposition", d, 1e-5));
    Ok(InsightReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_mass_matches_erf_and_is_symmetric() {
        assert!((normal_mass(-1.0, 1.0) - 0.682_689_492_137_086).abs() < 1e-14);
        assert!((normal_mass(0.5, 2.0) - normal_mass(-2.0, -0.5)).abs() < 1e-16);
        assert!((normal_mass(f64::NEG_INFINITY, f64::INFINITY) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trick_on_two_class_mixture() {
        let theta = [0.3, -0.2, -1.0, 1.5];
        let d = verify_trick(&GaussianMixture::new(2), 0.4, &theta, 1e-5).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn trick_degenerate_cases() {
        let mut g = GaussianMixture::new(2);
        g.theta_free = true;
        g.fixed = vec![0.1, 0.2, 0.0, 1.0];
        let s = trick_sides(&g, 0.3, &[5.0, 5.0, 5.0, 5.0], 1e-5).unwrap();
        assert!(s.lhs.iter().chain(&s.rhs).all(|&v| v == 0.0));
        // one class: weight 1, identical sides
        let s = trick_sides(&GaussianMixture::new(1), 0.3, &[0.7, -0.4], 1e-5).unwrap();
        assert_eq!(s.discrepancy(), 0.0);
    }

    #[test]
    fn vanishing_likelihood() {
        let r = verify_trick(&GaussianMixture::new(2), 1e4, &[0.0, 0.0, 0.0, 0.0], 1e-5);
        assert!(matches!(r, Err(Error::VanishingLikelihood)));
    }

    #[test]
    fn constant_classifier_gives_exact_weights() {
        let mut toy = ToyJointModel::seeded(3, 4);
        toy.b = 0.0;
        let px = seeded_pixel(4);
        let grid = QuadratureGrid::around(toy.generative_mean(px.s_latent), 8.0, 512);
        let h = toy.classify(0.0, px.x);
        for w in verify_dynamic_weight(&toy, &px, &grid).unwrap() {
            assert!((w.bayes - h[w.class]).abs() < 1e-14);
            assert!((w.expectation - h[w.class]).abs() < 1e-14);
        }
    }

    #[test]
    fn narrow_or_coarse_grids_rejected() {
        let toy = ToyJointModel::seeded(2, 1);
        let px = seeded_pixel(1);
        let m = toy.generative_mean(px.s_latent);
        let narrow = QuadratureGrid::around(m, 4.0, 1024);
        assert!(matches!(verify_dynamic_weight(&toy, &px, &narrow), Err(Error::GridTooNarrow(_))));
        let coarse = QuadratureGrid::around(m, 8.0, 128);
        assert!(verify_dynamic_weight(&toy, &px, &coarse).is_err());
    }

    #[test]
    fn decomposition_on_two_pixels() {
        let toy = ToyJointModel::seeded(2, 9);
        let d = verify_gradient_decomposition(&toy, &[seeded_pixel(1), seeded_pixel(2)], 1e-5).unwrap();
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn theta_free_likelihood_makes_term_vanish() {
        let mut toy = ToyJointModel::seeded(2, 3);
        toy.generative_in_theta = false;
        let pixels = [seeded_pixel(5)];
        let theta = toy.theta();
        let pj = PixelJoint::new(&toy, pixels[0], 512);
        let s = trick_sides(&pj, pixels[0].x, &theta, 1e-5).unwrap();
        assert!(s.lhs.iter().all(|v| v.abs() < 1e-9), "{:?}", s.lhs);
        assert!(s.rhs.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn sharper_classifier_raises_top_weight() {
        let toy = ToyJointModel::seeded(3, 2);
        let (_, ws) = weight_monotonicity_probe(&toy, &seeded_pixel(2), &[1.0, 1.5, 2.0, 3.0]);
        assert!(ws.windows(2).all(|w| w[1] >= w[0]), "{ws:?}");
    }

    #[test]
    fn default_report_passes() {
        let r = run_all(0, 20).unwrap();
        assert!(r.all_passed(), "{:#?}", r.checks);
    }
}
