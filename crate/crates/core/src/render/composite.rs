//! Front-to-back alpha compositing of isotropic 2D footprints at one pixel,
//! and its exact reverse-mode derivative.

use crate::field::{Identity, IDENTITY_DIM};
use crate::Vec3;

/// Per-splat alpha ceiling; keeps transmittance and its inverse finite.
pub const MAX_ALPHA: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Composited channels: color, identity, then a constant 1 whose composite
/// is the accumulated alpha.
pub(crate) const CHANNELS: usize = 3 + IDENTITY_DIM + 1;
pub(crate) const ALPHA_CHANNEL: usize = CHANNELS - 1;

/// A projected splat: pixel-space center, pixel-space standard deviation
/// and activated opacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub center: [f64; 2],
    pub sigma: f64,
    pub opacity: f64,
}

impl Footprint {
    /// Unclamped contribution `opacity * exp(-|p - center|² / 2σ²)` and the
    /// Gaussian falloff.
    #[inline]
    pub fn raw_alpha(&self, pixel: [f64; 2]) -> (f64, f64) {
        let dx = pixel[0] - self.center[0];
        let dy = pixel[1] - self.center[1];
        let g = (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp();
        (self.opacity * g, g)
    }
}

/// A splat as seen by a single pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSplat {
    pub footprint: Footprint,
    pub color: Vec3,
    pub identity: Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelComposite {
    pub color: Vec3,
    pub feature: Identity,
    pub alpha: f64,
}

/// Gradient of a scalar loss with respect to one splat's pixel inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSplatGrad {
    pub color: Vec3,
    pub identity: Identity,
    /// With respect to the activated opacity.
    pub opacity: f64,
    pub center: [f64; 2],
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Prepared {
    pub footprint: Footprint,
    pub values: [f64; CHANNELS],
}

impl Prepared {
    pub fn new(footprint: Footprint, color: &Vec3, identity: &Identity) -> Self {
        let mut values = [0.0; CHANNELS];
        values[..3].copy_from_slice(color.as_slice());
        values[3..3 + IDENTITY_DIM].copy_from_slice(identity.as_slice());
        values[ALPHA_CHANNEL] = 1.0;
        Self { footprint, values }
    }
}

/// One processed entry of a pixel's list, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step {
    pub alpha: f64,
    pub transmittance: f64,
    pub falloff: f64,
    pub clamped: bool,
}

/// Composites `order` (indices into `splats`, front to back) at `pixel`.
/// Returns the number of entries consumed before early termination.
#[inline]
pub(crate) fn forward(
    pixel: [f64; 2],
    splats: &[Prepared],
    order: &[u32],
    out: &mut [f64; CHANNELS],
    mut trace: Option<&mut Vec<Step>>,
) -> usize {
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut t = 1.0;
    let mut used = 0;
    for &k in order {
        if t < MIN_TRANSMITTANCE {
            break;
        }
        let s = &splats[k as usize];
        let (raw, g) = s.footprint.raw_alpha(pixel);
        let clamped = raw > MAX_ALPHA;
        let a = if clamped { MAX_ALPHA } else { raw };
        let w = a * t;
        for (o, v) in out.iter_mut().zip(&s.values) {
            *o += w * v;
        }
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(Step {
                alpha: a,
                transmittance: t,
                falloff: g,
                clamped,
            });
        }
        t *= 1.0 - a;
        used += 1;
    }
    used
}

/// Reverse pass for one pixel. `trace` must come from [`forward`] on the
/// same inputs. `emit(position_in_order, grad)` receives each contribution.
#[inline]
pub(crate) fn backward(
    pixel: [f64; 2],
    splats: &[Prepared],
    order: &[u32],
    trace: &[Step],
    grad_out: &[f64; CHANNELS],
    mut emit: impl FnMut(usize, &[f64; CHANNELS], f64, [f64; 2], f64),
) {
    let mut behind = [0.0; CHANNELS];
    let mut d_values = [0.0; CHANNELS];
    for (pos, step) in trace.iter().enumerate().rev() {
        let s = &splats[order[pos] as usize];
        let w = step.alpha * step.transmittance;
        let mut d_alpha = 0.0;
        for c in 0..CHANNELS {
            d_values[c] = w * grad_out[c];
            d_alpha += grad_out[c] * (s.values[c] - behind[c]);
            behind[c] = step.alpha * s.values[c] + (1.0 - step.alpha) * behind[c];
        }
        d_alpha *= step.transmittance;
        let (d_opacity, d_center, d_sigma) = if step.clamped {
            (0.0, [0.0; 2], 0.0)
        } else {
            let fp = &s.footprint;
            let dx = pixel[0] - fp.center[0];
            let dy = pixel[1] - fp.center[1];
            let s2 = fp.sigma * fp.sigma;
            // d(raw)/d(falloff) = opacity; d(falloff)/d(center) = g (p - c) / σ².
            let d_falloff = d_alpha * fp.opacity;
            let k = d_falloff * step.falloff / s2;
            (
                d_alpha * step.falloff,
                [k * dx, k * dy],
                k * (dx * dx + dy * dy) / fp.sigma,
            )
        };
        emit(pos, &d_values, d_opacity, d_center, d_sigma);
    }
}

/// Composites `splats` (already sorted front to back) at `pixel`.
pub fn composite(pixel: [f64; 2], splats: &[PixelSplat]) -> PixelComposite {
    let prepared: Vec<Prepared> = splats
        .iter()
        .map(|s| Prepared::new(s.footprint, &s.color, &s.identity))
        .collect();
    let order: Vec<u32> = (0..splats.len() as u32).collect();
    let mut out = [0.0; CHANNELS];
    forward(pixel, &prepared, &order, &mut out, None);
    PixelComposite {
        color: Vec3::new(out[0], out[1], out[2]),
        feature: Identity::from_column_slice(&out[3..3 + IDENTITY_DIM]),
        alpha: out[ALPHA_CHANNEL],
    }
}

/// Gradients of `d_color · C + d_feature · S + d_alpha · A` with respect to
/// every splat's inputs.
pub fn composite_backward(
    pixel: [f64; 2],
    splats: &[PixelSplat],
    d_color: &Vec3,
    d_feature: &Identity,
    d_alpha: f64,
) -> Vec<PixelSplatGrad> {
    let prepared: Vec<Prepared> = splats
        .iter()
        .map(|s| Prepared::new(s.footprint, &s.color, &s.identity))
        .collect();
    let order: Vec<u32> = (0..splats.len() as u32).collect();
    let mut out = [0.0; CHANNELS];
    let mut trace = Vec::new();
    forward(pixel, &prepared, &order, &mut out, Some(&mut trace));
    let mut grad_out = [0.0; CHANNELS];
    grad_out[..3].copy_from_slice(d_color.as_slice());
    grad_out[3..3 + IDENTITY_DIM].copy_from_slice(d_feature.as_slice());
    grad_out[ALPHA_CHANNEL] = d_alpha;
    let mut grads = vec![
        PixelSplatGrad {
            color: Vec3::zeros(),
            identity: Identity::zeros(),
            opacity: 0.0,
            center: [0.0; 2],
            sigma: 0.0,
        };
        splats.len()
    ];
    backward(pixel, &prepared, &order, &trace, &grad_out, |pos, dv, d_op, d_c, d_s| {
        let g = &mut grads[pos];
        g.color = Vec3::new(dv[0], dv[1], dv[2]);
        g.identity = Identity::from_column_slice(&dv[3..3 + IDENTITY_DIM]);
        g.opacity = d_op;
        g.center = d_c;
        g.sigma = d_s;
    });
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(center: [f64; 2], opacity: f64, color: Vec3) -> PixelSplat {
        PixelSplat {
            footprint: Footprint {
                center,
                sigma: 1.0,
                opacity,
            },
            color,
            identity: Identity::zeros(),
        }
    }

    #[test]
    fn single_opaque_splat_is_clamped() {
        let out = composite([0.0, 0.0], &[flat([0.0, 0.0], 1.0, Vec3::x())]);
        assert!((out.color - Vec3::new(0.99, 0.0, 0.0)).norm() < 1e-15);
        assert!((out.alpha - 0.99).abs() < 1e-15);
    }

    #[test]
    fn two_half_splats() {
        let s = [flat([0.0, 0.0], 0.5, Vec3::repeat(1.0)), flat([0.0, 0.0], 0.5, Vec3::zeros())];
        let out = composite([0.0, 0.0], &s);
        assert!((out.color.x - 0.5).abs() < 1e-15);
        assert!((out.alpha - 0.75).abs() < 1e-15);
    }

    #[test]
    fn early_termination() {
        let s: Vec<_> = (0..10).map(|_| flat([0.0, 0.0], 0.99, Vec3::x())).collect();
        let prepared: Vec<_> = s.iter().map(|s| Prepared::new(s.footprint, &s.color, &s.identity)).collect();
        let order: Vec<u32> = (0..10).collect();
        let mut out = [0.0; CHANNELS];
        // T after two 0.99 splats is 1e-4 exactly-ish, after three it's 1e-6.
        let used = forward([0.0, 0.0], &prepared, &order, &mut out, None);
        assert!(used <= 3, "used {used}");
    }

    fn random_splats(rng: &mut ChaCha8Rng, n: usize) -> Vec<PixelSplat> {
        (0..n)
            .map(|_| PixelSplat {
                footprint: Footprint {
                    center: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    sigma: rng.random_range(0.5..2.0),
                    opacity: rng.random_range(0.05..0.95),
                },
                color: Vec3::from_fn(|_, _| rng.random()),
                identity: Identity::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn matches_explicit_prefix_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_splats(&mut rng, 5);
        let p = [0.3, -0.4];
        let alphas: Vec<f64> = s.iter().map(|s| s.footprint.raw_alpha(p).0.min(MAX_ALPHA)).collect();
        let mut c = Vec3::zeros();
        let mut weight_sum = 0.0;
        for i in 0..5 {
            let prefix: f64 = (0..i).map(|j| 1.0 - alphas[j]).product();
            c += s[i].color * alphas[i] * prefix;
            weight_sum += alphas[i] * prefix;
        }
        let out = composite(p, &s);
        assert!((out.color - c).norm() < 1e-14);
        assert!((out.alpha - weight_sum).abs() < 1e-14);
        assert!(out.alpha <= 1.0);
    }

    #[test]
    fn shared_identity_renders_alpha_times_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = random_splats(&mut rng, 6);
        let v = s[0].identity;
        s.iter_mut().for_each(|x| x.identity = v);
        let out = composite([0.1, 0.2], &s);
        assert!((out.feature - v * out.alpha).norm() < 1e-12);
    }

    /// Scalar objective for finite differences.
    fn objective(p: [f64; 2], s: &[PixelSplat], dc: &Vec3, df: &Identity, da: f64) -> f64 {
        let o = composite(p, s);
        dc.dot(&o.color) + df.dot(&o.feature) + da * o.alpha
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1e-4);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let s = random_splats(&mut rng, n);
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let dc = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let df = Identity::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let da = rng.random_range(-1.0..1.0);
            let grads = composite_backward(p, &s, &dc, &df, da);
            for i in 0..n {
                let perturb = |f: &dyn Fn(&mut PixelSplat, f64)| {
                    let mut plus = s.clone();
                    f(&mut plus[i], h);
                    let mut minus = s.clone();
                    f(&mut minus[i], -h);
                    (objective(p, &plus, &dc, &df, da) - objective(p, &minus, &dc, &df, da)) / (2.0 * h)
                };
                let fd = perturb(&|x, d| x.footprint.opacity += d);
                assert!(rel(fd, grads[i].opacity) < 1e-3, "opacity {fd} {}", grads[i].opacity);
                for a in 0..2 {
                    let fd = perturb(&|x, d| x.footprint.center[a] += d);
                    assert!(rel(fd, grads[i].center[a]) < 1e-3, "center {fd} {}", grads[i].center[a]);
                }
                let fd = perturb(&|x, d| x.footprint.sigma += d);
                assert!(rel(fd, grads[i].sigma) < 1e-3);
                for a in 0..3 {
                    let fd = perturb(&|x, d| x.color[a] += d);
                    assert!(rel(fd, grads[i].color[a]) < 1e-3);
                }
                for a in 0..IDENTITY_DIM {
                    let fd = perturb(&|x, d| x.identity[a] += d);
                    assert!(rel(fd, grads[i].identity[a]) < 1e-3);
                }
            }
        }
    }
}
