use serde::{Deserialize, Serialize};

use super::latent::LatentVideo;
use crate::error::{Error, Result};

const A_BAR_FIRST: f64 = 0.999;
const A_BAR_LAST: f64 = 0.02;

/// Per-step coefficients `a_t` and their cumulative products `ā_t`, indexed
/// by `t = 1..=T`. `ā_0` is defined as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    a: Vec<f64>,
    a_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        self.a[t - 1]
    }

    pub fn a_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.steps(), "timestep {t} out of range");
        self.a_bar[t - 1]
    }

    pub fn a_bars(&self) -> &[f64] {
        &self.a_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::validation(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Schedule whose `ā_t` falls linearly from 0.999 (t = 1) to 0.02 (t = T).
/// A single-step schedule goes straight to 0.02.
pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("schedule needs at least one step"));
    }
    let target = |t: usize| -> f64 {
        if steps == 1 {
            A_BAR_LAST
        } else {
            A_BAR_FIRST + (A_BAR_LAST - A_BAR_FIRST) * (t - 1) as f64 / (steps - 1) as f64
        }
    };
    let mut a = Vec::with_capacity(steps);
    let mut a_bar = Vec::with_capacity(steps);
    let mut prev = 1.0;
    let mut prod = 1.0;
    for t in 1..=steps {
        let next = target(t);
        let at = next / prev;
        prod *= at;
        a.push(at);
        a_bar.push(prod);
        prev = next;
    }
    Ok(NoiseSchedule { a, a_bar })
}

/// Forward noising `z_t = sqrt(ā_t) z_0 + sqrt(1 − ā_t) ε`.
pub fn add_noise(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    z0.expect_shape(eps)?;
    sched.check_timestep(t)?;
    let ab = sched.a_bar(t);
    Ok(z0.affine(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Deterministic DDIM move between two cumulative noise levels.
pub fn ddim_update(z: &LatentVideo, eps: &LatentVideo, a_bar_from: f64, a_bar_to: f64) -> Result<LatentVideo> {
    z.expect_shape(eps)?;
    if a_bar_from <= 0.0 {
        return Err(Error::validation("ā must be positive for a DDIM update"));
    }
    let s_from = a_bar_from.sqrt();
    let n_from = (1.0 - a_bar_from).sqrt();
    let s_to = a_bar_to.sqrt();
    let n_to = (1.0 - a_bar_to).sqrt();
    // x̂0 = (z - n_from ε) / s_from, then re-noise to the target level
    let x0 = z.affine(1.0 / s_from, eps, -n_from / s_from);
    Ok(x0.affine(s_to, eps, n_to))
}

/// One η = 0 DDIM step from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_pred: &LatentVideo,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t <= t_prev {
        return Err(Error::validation(format!("ddim_step needs t > t_prev, got {t} <= {t_prev}")));
    }
    sched.check_timestep(t)?;
    ddim_update(z_t, eps_pred, sched.a_bar(t), sched.a_bar(t_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::LatentShape;

    #[test]
    fn schedule_invariants() {
        assert!(make_schedule(0).is_err());
        let s = make_schedule(30).unwrap();
        assert_eq!(s.steps(), 30);
        for t in 1..=30 {
            assert!(s.a(t) > 0.0 && s.a(t) < 1.0);
            assert!(s.a_bar(t) < s.a_bar(t - 1));
        }
        let mut prod = 1.0;
        for t in 1..=30 {
            prod *= s.a(t);
            assert!((prod - s.a_bar(t)).abs() < 1e-12);
        }
        assert!((s.a_bar(1) - 0.999).abs() < 1e-12);
        assert!((s.a_bar(30) - 0.02).abs() < 1e-12);
        let one = make_schedule(1).unwrap();
        assert!(one.a_bar(1) > 0.0 && one.a_bar(1) < 1.0);
    }

    fn random(shape: LatentShape, seed: u64) -> LatentVideo {
        LatentVideo::gaussian(shape, seed)
    }

    #[test]
    fn add_noise_cases() {
        let s = make_schedule(30).unwrap();
        let shape = LatentShape::new(2, 3, 4, 5);
        let z0 = random(shape, 1);
        let eps = random(shape, 2);
        let zero = LatentVideo::zeros(shape);
        let ab = s.a_bar(5);
        let a = add_noise(&z0, 5, &zero, &s).unwrap();
        for (o, x) in a.data().iter().zip(z0.data()) {
            assert_eq!(*o, ab.sqrt() * x);
        }
        let b = add_noise(&zero, 5, &eps, &s).unwrap();
        for (o, e) in b.data().iter().zip(eps.data()) {
            assert_eq!(*o, (1.0 - ab).sqrt() * e);
        }
        let c = add_noise(&z0, 5, &eps, &s).unwrap();
        for ((o, x), e) in c.data().iter().zip(z0.data()).zip(eps.data()) {
            let expect = ab.sqrt() * x + (1.0 - ab).sqrt() * e;
            assert!((o - expect).abs() < 1e-14);
        }
        let other = random(LatentShape::new(2, 3, 4, 4), 3);
        assert!(add_noise(&z0, 5, &other, &s).is_err());
        assert!(add_noise(&z0, 31, &eps, &s).is_err());
    }

    #[test]
    fn ddim_step_cases() {
        let s = make_schedule(30).unwrap();
        let shape = LatentShape::new(2, 2, 3, 3);
        let z = random(shape, 4);
        let eps = random(shape, 5);
        let zero = LatentVideo::zeros(shape);
        let out = ddim_step(&z, &zero, 7, 0, &s).unwrap();
        for (o, x) in out.data().iter().zip(z.data()) {
            assert!((o - x / s.a_bar(7).sqrt()).abs() < 1e-14);
        }
        let same = ddim_update(&z, &eps, 0.4, 0.4).unwrap();
        assert!(same.relative_error(&z) < 1e-14);

        let out = ddim_step(&z, &eps, 12, 11, &s).unwrap();
        let (ab, ap) = (s.a_bar(12), s.a_bar(11));
        for ((o, x), e) in out.data().iter().zip(z.data()).zip(eps.data()) {
            let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            let expect = ap.sqrt() * x0 + (1.0 - ap).sqrt() * e;
            assert!((o - expect).abs() < 1e-12);
        }
        assert!(ddim_step(&z, &eps, 3, 3, &s).is_err());
    }
}
