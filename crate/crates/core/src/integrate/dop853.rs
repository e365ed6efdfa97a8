//! Adaptive explicit Runge-Kutta 8(5,3) stepper with 7th-order dense output.
//!
//! Step-size control follows the usual embedded-pair recipe: the error of the
//! 8th-order solution is estimated from the blended 5th/3rd-order estimators and
//! the step is rescaled by `0.9·err^(-1/8)`, clamped to `[0.2, 10]`.

use super::tableau::{A, B, C, D, E3, E5, STAGES, STAGES_EXT};

/// First-order system `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepError {
    /// Step size fell below the floating-point resolution of `t`.
    TooSmall { t: f64 },
    /// The vector field produced a non-finite value.
    NonFinite { t: f64 },
}

pub struct Dop853<'a, S: OdeSystem> {
    sys: &'a S,
    n: usize,
    rtol: f64,
    atol: Vec<f64>,
    max_step: f64,
    direction: f64,
    t: f64,
    y: Vec<f64>,
    f: Vec<f64>,
    h_abs: f64,
    t_old: f64,
    y_old: Vec<f64>,
    h_prev: f64,
    // stage derivatives, row-major STAGES_EXT x n
    k: Vec<f64>,
    scratch: Vec<f64>,
    ys: Vec<f64>,
    dense_ready: bool,
    dense: Vec<f64>,
    pub accepted: u64,
    pub rejected: u64,
    pub rhs_evals: u64,
}

impl<'a, S: OdeSystem> Dop853<'a, S> {
    /// Starts at `(t0, y0)` heading towards `t_bound`.
    pub fn new(sys: &'a S, t0: f64, y0: &[f64], t_bound: f64, rtol: f64, atol: f64) -> Self {
        let n = sys.dim();
        assert_eq!(y0.len(), n, "state length does not match system dimension");
        let direction = if t_bound >= t0 { 1.0 } else { -1.0 };
        let mut f = vec![0.0; n];
        sys.rhs(t0, y0, &mut f);
        let mut s = Self {
            sys,
            n,
            rtol,
            atol: vec![atol; n],
            max_step: f64::INFINITY,
            direction,
            t: t0,
            y: y0.to_vec(),
            f,
            h_abs: 0.0,
            t_old: t0,
            y_old: y0.to_vec(),
            h_prev: 0.0,
            k: vec![0.0; STAGES_EXT * n],
            scratch: vec![0.0; n],
            ys: vec![0.0; n],
            dense_ready: false,
            dense: vec![0.0; 7 * n],
            accepted: 0,
            rejected: 0,
            rhs_evals: 1,
        };
        s.h_abs = s.initial_step(t_bound);
        s
    }

    pub fn with_max_step(mut self, max_step: f64) -> Self {
        self.max_step = max_step;
        self
    }

    /// Per-component absolute tolerances. Only affects steps taken afterwards.
    pub fn set_abs_tol(&mut self, atol: &[f64]) {
        self.atol.copy_from_slice(atol);
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn t_old(&self) -> f64 {
        self.t_old
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Replaces the current state, e.g. after a projection or renormalization.
    /// Dense output of the last step is invalidated.
    pub fn reset_state(&mut self, y: &[f64]) {
        self.y.copy_from_slice(y);
        self.sys.rhs(self.t, &self.y, &mut self.f);
        self.rhs_evals += 1;
        self.dense_ready = false;
        self.y_old.copy_from_slice(y);
        self.t_old = self.t;
    }

    fn initial_step(&mut self, t_bound: f64) -> f64 {
        let n = self.n;
        let interval = (t_bound - self.t).abs();
        if interval == 0.0 {
            return 0.0;
        }
        let scale: Vec<f64> = self
            .y
            .iter()
            .zip(&self.atol)
            .map(|(v, a)| a + v.abs() * self.rtol)
            .collect();
        let d0 = rms(self.y.iter().zip(&scale).map(|(v, s)| v / s), n);
        let d1 = rms(self.f.iter().zip(&scale).map(|(v, s)| v / s), n);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(interval);
        let y1: Vec<f64> = self
            .y
            .iter()
            .zip(&self.f)
            .map(|(y, f)| y + h0 * self.direction * f)
            .collect();
        let mut f1 = vec![0.0; n];
        self.sys.rhs(self.t + h0 * self.direction, &y1, &mut f1);
        self.rhs_evals += 1;
        let d2 = rms(
            f1.iter().zip(&self.f).zip(&scale).map(|((a, b), s)| (a - b) / s),
            n,
        ) / h0;
        let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 9.0)
        };
        (100.0 * h0).min(h1).min(interval)
    }

    /// Takes one accepted step, never passing `t_bound`.
    pub fn step(&mut self, t_bound: f64) -> Result<(), StepError> {
        let n = self.n;
        let t = self.t;
        let min_step = 10.0 * (next_after(t, self.direction) - t).abs();
        let mut h_abs = self.h_abs.min(self.max_step).max(min_step);
        let mut rejected_once = false;

        loop {
            if h_abs < min_step {
                return Err(StepError::TooSmall { t });
            }
            let mut t_new = t + h_abs * self.direction;
            if self.direction * (t_new - t_bound) > 0.0 {
                t_new = t_bound;
            }
            let h = t_new - t;
            h_abs = h.abs();

            self.stages(t, h);
            // y_new into scratch, f_new into stage row STAGES
            for i in 0..n {
                let mut acc = 0.0;
                for (s, b) in B.iter().enumerate() {
                    acc += b * self.k[s * n + i];
                }
                self.scratch[i] = self.y[i] + h * acc;
            }
            self.sys
                .rhs(t_new, &self.scratch, &mut self.k[STAGES * n..(STAGES + 1) * n]);
            self.rhs_evals += 1;

            if !self.scratch.iter().all(|v| v.is_finite()) {
                if h_abs <= min_step {
                    return Err(StepError::NonFinite { t });
                }
                h_abs *= MIN_FACTOR;
                rejected_once = true;
                self.rejected += 1;
                continue;
            }

            let err = self.error_norm(h);
            if err < 1.0 {
                let mut factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * err.powf(ERROR_EXPONENT)).min(MAX_FACTOR)
                };
                if rejected_once {
                    factor = factor.min(1.0);
                }
                self.h_prev = h;
                self.t_old = t;
                std::mem::swap(&mut self.y_old, &mut self.y);
                self.y.copy_from_slice(&self.scratch);
                self.f.copy_from_slice(&self.k[STAGES * n..(STAGES + 1) * n]);
                self.t = t_new;
                self.h_abs = h_abs * factor;
                self.dense_ready = false;
                self.accepted += 1;
                return Ok(());
            }
            h_abs *= (SAFETY * err.powf(ERROR_EXPONENT)).max(MIN_FACTOR);
            rejected_once = true;
            self.rejected += 1;
        }
    }

    fn stages(&mut self, t: f64, h: f64) {
        let n = self.n;
        self.k[..n].copy_from_slice(&self.f);
        for s in 1..STAGES {
            for i in 0..n {
                let mut acc = 0.0;
                for (r, a) in A[s][..s].iter().enumerate() {
                    if *a != 0.0 {
                        acc += a * self.k[r * n + i];
                    }
                }
                self.ys[i] = self.y[i] + h * acc;
            }
            self.sys.rhs(t + C[s] * h, &self.ys, &mut self.k[s * n..(s + 1) * n]);
        }
        self.rhs_evals += (STAGES - 1) as u64;
    }

    fn error_norm(&self, h: f64) -> f64 {
        let n = self.n;
        let mut e5 = 0.0;
        let mut e3 = 0.0;
        for i in 0..n {
            let scale = self.atol[i] + self.y[i].abs().max(self.scratch[i].abs()) * self.rtol;
            let mut a5 = 0.0;
            let mut a3 = 0.0;
            for s in 0..=STAGES {
                let k = self.k[s * n + i];
                a5 += E5[s] * k;
                a3 += E3[s] * k;
            }
            e5 += (a5 / scale).powi(2);
            e3 += (a3 / scale).powi(2);
        }
        if e5 == 0.0 && e3 == 0.0 {
            return 0.0;
        }
        let denom = e5 + 0.01 * e3;
        h.abs() * e5 / (denom * n as f64).sqrt()
    }

    fn prepare_dense(&mut self) {
        if self.dense_ready {
            return;
        }
        let n = self.n;
        let h = self.h_prev;
        for s in STAGES + 1..STAGES_EXT {
            for i in 0..n {
                let mut acc = 0.0;
                for (r, a) in A[s][..s].iter().enumerate() {
                    if *a != 0.0 {
                        acc += a * self.k[r * n + i];
                    }
                }
                self.ys[i] = self.y_old[i] + h * acc;
            }
            self.sys
                .rhs(self.t_old + C[s] * h, &self.ys, &mut self.k[s * n..(s + 1) * n]);
        }
        self.rhs_evals += (STAGES_EXT - STAGES - 1) as u64;
        for i in 0..n {
            let dy = self.y[i] - self.y_old[i];
            let f_old = self.k[i];
            self.dense[i] = dy;
            self.dense[n + i] = h * f_old - dy;
            self.dense[2 * n + i] = 2.0 * dy - h * (self.f[i] + f_old);
            for (r, drow) in D.iter().enumerate() {
                let mut acc = 0.0;
                for (s, d) in drow.iter().enumerate() {
                    if *d != 0.0 {
                        acc += d * self.k[s * n + i];
                    }
                }
                self.dense[(3 + r) * n + i] = h * acc;
            }
        }
        self.dense_ready = true;
    }

    /// Evaluates the interpolant of the last accepted step at `t` in `[t_old, t]`.
    pub fn dense_output(&mut self, t: f64, out: &mut [f64]) {
        let n = self.n;
        if t == self.t {
            out.copy_from_slice(&self.y);
            return;
        }
        self.prepare_dense();
        let x = (t - self.t_old) / self.h_prev;
        for i in 0..n {
            let mut y = 0.0;
            for r in (0..7).rev() {
                y += self.dense[r * n + i];
                // reversed index parity: 6,4,2,0 multiply by x; 5,3,1 by (1 - x)
                if r % 2 == 0 {
                    y *= x;
                } else {
                    y *= 1.0 - x;
                }
            }
            out[i] = self.y_old[i] + y;
        }
    }
}

fn rms(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    (it.map(|v| v * v).sum::<f64>() / n as f64).sqrt()
}

fn next_after(t: f64, direction: f64) -> f64 {
    if t == 0.0 {
        return direction * f64::from_bits(1);
    }
    let bits = t.to_bits();
    let up = (t > 0.0) == (direction > 0.0);
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}
