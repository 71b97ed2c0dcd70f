//! Dormand–Prince 5(4) integrator with PI step-size control.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus the embedded fourth-order ones.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions {
            rtol: tol,
            atol: tol,
            initial_step: None,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integrator state that can be advanced through a sequence of output times.
///
/// Integration runs forward or backward in time depending on the sign of the
/// first target.
pub struct Dopri5 {
    t: f64,
    y: Vec<f64>,
    h: f64,
    err_prev: f64,
    k: [Vec<f64>; 7],
    fsal: bool,
    opts: OdeOptions,
    pub stats: OdeStats,
}

impl Dopri5 {
    pub fn new(t0: f64, y0: &[f64], opts: OdeOptions) -> Result<Self> {
        if !(opts.rtol > 0.0) || !(opts.atol > 0.0) {
            return Err(Error::input("ODE tolerances must be positive"));
        }
        let n = y0.len();
        Ok(Dopri5 {
            t: t0,
            y: y0.to_vec(),
            h: opts.initial_step.unwrap_or(0.0),
            err_prev: 1e-4,
            k: std::array::from_fn(|_| vec![0.0; n]),
            fsal: false,
            opts,
            stats: OdeStats::default(),
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    fn error_norm(&self, y_new: &[f64], err: &[f64]) -> f64 {
        let n = self.y.len().max(1) as f64;
        let sum: f64 = self
            .y
            .iter()
            .zip(y_new)
            .zip(err)
            .map(|((a, b), e)| {
                let sc = self.opts.atol + self.opts.rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (sum / n).sqrt()
    }

    fn initial_step<F>(&mut self, f: &mut F, dir: f64, span: f64) -> Result<f64>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = self.y.len();
        f(self.t, &self.y, &mut self.k[0])?;
        self.stats.evaluations += 1;
        self.fsal = true;
        let sc: Vec<f64> = self
            .y
            .iter()
            .map(|v| self.opts.atol + self.opts.rtol * v.abs())
            .collect();
        let rms = |v: &[f64]| -> f64 {
            (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt()
        };
        let d0 = rms(&self.y);
        let d1 = rms(&self.k[0]);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1: Vec<f64> = self
            .y
            .iter()
            .zip(&self.k[0])
            .map(|(y, k)| y + dir * h0 * k)
            .collect();
        let mut f1 = vec![0.0; n];
        f(self.t + dir * h0, &y1, &mut f1)?;
        self.stats.evaluations += 1;
        let diff: Vec<f64> = f1.iter().zip(&self.k[0]).map(|(a, b)| a - b).collect();
        let d2 = rms(&diff) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }

    /// Integrates up to `t_end`, landing on it exactly.
    #[allow(clippy::needless_range_loop)]
    pub fn advance_to<F>(&mut self, f: &mut F, t_end: f64) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        if t_end == self.t {
            return Ok(());
        }
        let dir = (t_end - self.t).signum();
        let n = self.y.len();
        if self.h <= 0.0 {
            self.h = self.initial_step(f, dir, (t_end - self.t).abs())?;
        }
        let mut y_stage = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let mut err = vec![0.0; n];
        let mut steps = 0usize;
        while (t_end - self.t) * dir > 0.0 {
            if steps >= self.opts.max_steps {
                return Err(Error::Stiffness {
                    t: self.t,
                    step: self.h,
                    rejected: self.stats.rejected,
                });
            }
            steps += 1;
            let h_min = 1e-14 * self.t.abs().max(1.0);
            let remaining = (t_end - self.t).abs();
            let mut h = self.h.min(remaining);
            let last = h >= remaining * (1.0 - 1e-12);
            if last {
                h = remaining;
            }
            if h < h_min && !last {
                return Err(Error::Stiffness {
                    t: self.t,
                    step: h,
                    rejected: self.stats.rejected,
                });
            }
            if !self.fsal {
                f(self.t, &self.y, &mut self.k[0])?;
                self.stats.evaluations += 1;
                self.fsal = true;
            }
            let hs = dir * h;
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..s {
                        acc += A[s][j] * self.k[j][i];
                    }
                    y_stage[i] = self.y[i] + hs * acc;
                }
                f(self.t + C[s] * hs, &y_stage, &mut self.k[s])?;
                self.stats.evaluations += 1;
            }
            // Stage 7 is evaluated at the fifth-order solution.
            y_new.copy_from_slice(&y_stage);
            for i in 0..n {
                let mut e = 0.0;
                for s in 0..7 {
                    e += E[s] * self.k[s][i];
                }
                err[i] = hs * e;
            }
            let en = self.error_norm(&y_new, &err);
            if !en.is_finite() {
                self.stats.rejected += 1;
                self.h = 0.25 * h;
                self.fsal = true;
                if self.h < h_min {
                    return Err(Error::Stiffness {
                        t: self.t,
                        step: self.h,
                        rejected: self.stats.rejected,
                    });
                }
                continue;
            }
            if en <= 1.0 {
                self.stats.accepted += 1;
                self.t = if last { t_end } else { self.t + hs };
                std::mem::swap(&mut self.y, &mut y_new);
                self.k.swap(0, 6);
                let en = en.max(1e-10);
                let fac = 0.9 * en.powf(-0.7 / 5.0) * self.err_prev.powf(0.4 / 5.0);
                self.err_prev = en;
                let grown = h * fac.clamp(0.2, 5.0);
                // A forced short landing step should not shrink the running step.
                self.h = if last { self.h.max(grown) } else { grown };
            } else {
                self.stats.rejected += 1;
                let fac = (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
                self.h = h * fac;
                if self.h < h_min {
                    return Err(Error::Stiffness {
                        t: self.t,
                        step: self.h,
                        rejected: self.stats.rejected,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Integrates `y' = f(t, y)` from `t0` to `t1`.
pub fn integrate<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], opts: OdeOptions) -> Result<(Vec<f64>, OdeStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let mut solver = Dopri5::new(t0, y0, opts)?;
    solver.advance_to(&mut f, t1)?;
    Ok((solver.y, solver.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_decay() {
        let (y, stats) = integrate(
            |_, y, dy| {
                dy[0] = -2.0 * y[0];
                Ok(())
            },
            0.0,
            3.0,
            &[1.0],
            OdeOptions::with_tol(1e-11),
        )
        .unwrap();
        assert_relative_eq!(y[0], (-6.0f64).exp(), max_relative = 1e-9);
        assert!(stats.accepted > 0);
    }

    #[test]
    fn harmonic_oscillator_backward() {
        let (y, _) = integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            2.0,
            0.0,
            &[2.0f64.cos(), -2.0f64.sin()],
            OdeOptions::with_tol(1e-12),
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10);
        assert!(y[1].abs() < 1e-10);
    }

    #[test]
    fn error_decreases_with_tolerance() {
        let exact = (1.0f64).sin().exp();
        let run = |tol: f64| {
            integrate(
                |t, y, dy| {
                    dy[0] = t.cos() * y[0];
                    Ok(())
                },
                0.0,
                1.0,
                &[1.0],
                OdeOptions::with_tol(tol),
            )
            .unwrap()
            .0[0]
        };
        let e1 = (run(1e-6) - exact).abs();
        let e2 = (run(1e-9) - exact).abs();
        assert!(e2 < e1);
        assert!(e1 < 1e-5);
    }

    #[test]
    fn blow_up_reports_stiffness() {
        let r = integrate(
            |_, y, dy| {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            2.0,
            &[1.0],
            OdeOptions::with_tol(1e-10),
        );
        assert!(matches!(r, Err(Error::Stiffness { .. })), "{r:?}");
    }
}
