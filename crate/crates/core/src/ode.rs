//! Dormand-Prince 5(4) integrator with Hairer's continuous extension.

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl OdeOptions {
    pub fn tol(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, max_steps: 1_000_000 }
    }
}

/// Verdict of the per-step callback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    /// Finish successfully at the end of this step.
    Stop,
    /// Abandon integration; reported as [`OdeFailure::Aborted`].
    Abort,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OdeFailure {
    Aborted { t: f64 },
    StepUnderflow { t: f64 },
    TooManySteps { t: f64 },
}

#[derive(Clone, Debug)]
struct Step {
    t0: f64,
    h: f64,
    rcont: [Vec<f64>; 5],
}

/// Accepted steps with dense output over the integrated range.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub dim: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub y_start: Vec<f64>,
    pub y_end: Vec<f64>,
    steps: Vec<Step>,
    /// True when the integration ran to the requested end time.
    pub completed: bool,
}

impl DenseSolution {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Interpolated state at `t` (clamped to the integrated range).
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        if self.steps.is_empty() {
            out.copy_from_slice(&self.y_start);
            return;
        }
        let fwd = self.t_end >= self.t_start;
        // steps are ordered along the direction of integration
        let idx = self.steps.partition_point(|s| if fwd { s.t0 + s.h <= t } else { s.t0 + s.h >= t });
        let s = &self.steps[idx.min(self.steps.len() - 1)];
        let theta = ((t - s.t0) / s.h).clamp(0.0, 1.0);
        let th1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &s.rcont;
        for k in 0..self.dim {
            out[k] = r1[k] + theta * (r2[k] + th1 * (r3[k] + theta * (r4[k] + th1 * r5[k])));
        }
    }

    /// Endpoints `(t0, t1)` of the accepted steps.
    pub fn step_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.steps.iter().map(|s| s.t0).collect();
        v.push(self.t_end);
        v
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// `on_step(t, y)` runs after every accepted step and may stop or abort.
pub fn dopri5<F, C>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: OdeOptions,
    mut on_step: C,
) -> Result<DenseSolution, OdeFailure>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    C: FnMut(f64, &[f64]) -> StepControl,
{
    let n = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut sol = DenseSolution {
        dim: n,
        t_start: t0,
        t_end: t0,
        y_start: y0.to_vec(),
        y_end: y0.to_vec(),
        steps: Vec::new(),
        completed: false,
    };
    if t1 == t0 {
        sol.completed = true;
        return Ok(sol);
    }
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut ytmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    f(t, &y, &mut k1);

    let scale = |y: &[f64], k: usize| opts.atol + opts.rtol * y[k].abs();
    let span = (t1 - t0).abs();
    let mut h = {
        let d0 = (0..n).map(|k| (y[k] / scale(&y, k)).powi(2)).sum::<f64>().sqrt() / (n as f64).sqrt();
        let d1 = (0..n).map(|k| (k1[k] / scale(&y, k)).powi(2)).sum::<f64>().sqrt() / (n as f64).sqrt();
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min(span).max(1e-12 * span.max(1.0))
    };
    let h_min = 1e-14 * (t0.abs().max(t1.abs()).max(1.0));
    let mut steps = 0usize;
    let mut reject_last = false;

    loop {
        if steps >= opts.max_steps {
            return Err(OdeFailure::TooManySteps { t });
        }
        let remaining = (t1 - t) * dir;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = h * dir;
        for k in 0..n {
            ytmp[k] = y[k] + hs * A21 * k1[k];
        }
        f(t + C2 * hs, &ytmp, &mut k2);
        for k in 0..n {
            ytmp[k] = y[k] + hs * (A31 * k1[k] + A32 * k2[k]);
        }
        f(t + C3 * hs, &ytmp, &mut k3);
        for k in 0..n {
            ytmp[k] = y[k] + hs * (A41 * k1[k] + A42 * k2[k] + A43 * k3[k]);
        }
        f(t + C4 * hs, &ytmp, &mut k4);
        for k in 0..n {
            ytmp[k] = y[k] + hs * (A51 * k1[k] + A52 * k2[k] + A53 * k3[k] + A54 * k4[k]);
        }
        f(t + C5 * hs, &ytmp, &mut k5);
        for k in 0..n {
            ytmp[k] = y[k] + hs * (A61 * k1[k] + A62 * k2[k] + A63 * k3[k] + A64 * k4[k] + A65 * k5[k]);
        }
        let t_new = if last { t1 } else { t + hs };
        f(t_new, &ytmp, &mut k6);
        for k in 0..n {
            y1[k] = y[k] + hs * (A71 * k1[k] + A73 * k3[k] + A74 * k4[k] + A75 * k5[k] + A76 * k6[k]);
        }
        f(t_new, &y1, &mut k7);
        steps += 1;

        let mut err = 0.0;
        for k in 0..n {
            let sk = opts.atol + opts.rtol * y[k].abs().max(y1[k].abs());
            let e = hs * (E1 * k1[k] + E3 * k3[k] + E4 * k4[k] + E5 * k5[k] + E6 * k6[k] + E7 * k7[k]);
            err += (e / sk).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            h *= 0.1;
            if h < h_min {
                return Err(OdeFailure::StepUnderflow { t });
            }
            reject_last = true;
            continue;
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            let mut rc: [Vec<f64>; 5] = Default::default();
            rc[0] = y.clone();
            rc[1] = (0..n).map(|k| y1[k] - y[k]).collect();
            rc[2] = (0..n).map(|k| hs * k1[k] - rc[1][k]).collect();
            rc[3] = (0..n).map(|k| rc[1][k] - hs * k7[k] - rc[2][k]).collect();
            rc[4] = (0..n)
                .map(|k| hs * (D1 * k1[k] + D3 * k3[k] + D4 * k4[k] + D5 * k5[k] + D6 * k6[k] + D7 * k7[k]))
                .collect();
            sol.steps.push(Step { t0: t, h: t_new - t, rcont: rc });
            t = t_new;
            y.copy_from_slice(&y1);
            k1.copy_from_slice(&k7);
            sol.t_end = t;
            sol.y_end.copy_from_slice(&y);
            match on_step(t, &y) {
                StepControl::Continue => {}
                StepControl::Stop => return Ok(sol),
                StepControl::Abort => return Err(OdeFailure::Aborted { t }),
            }
            if last {
                sol.completed = true;
                return Ok(sol);
            }
            h *= if reject_last { fac.min(1.0) } else { fac };
            reject_last = false;
        } else {
            h *= fac.min(1.0);
            reject_last = true;
            if h < h_min {
                return Err(OdeFailure::StepUnderflow { t });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic(h0: f64, t: f64) -> f64 {
        let e = (2.0 * t).exp();
        2.0 * h0 * e / (2.0 + h0 * (e - 1.0))
    }

    #[test]
    fn logistic_endpoint_and_dense_output() {
        let sol = dopri5(
            |_, y, dy| dy[0] = 2.0 * y[0] - y[0] * y[0],
            0.0,
            &[0.1],
            3.0,
            OdeOptions::tol(1e-10),
            |_, _| StepControl::Continue,
        )
        .unwrap();
        assert!((sol.y_end[0] - logistic(0.1, 3.0)).abs() < 1e-9);
        for k in 0..=300 {
            let t = k as f64 * 0.01;
            assert!((sol.eval(t)[0] - logistic(0.1, t)).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn backward_integration() {
        let sol = dopri5(
            |_, y, dy| dy[0] = -y[0],
            1.0,
            &[1.0],
            0.0,
            OdeOptions::tol(1e-11),
            |_, _| StepControl::Continue,
        )
        .unwrap();
        assert!((sol.y_end[0] - 1f64.exp()).abs() < 1e-9);
        assert!((sol.eval(0.5)[0] - 0.5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn stop_callback() {
        let sol = dopri5(
            |_, _, dy| dy[0] = 1.0,
            0.0,
            &[0.0],
            10.0,
            OdeOptions::tol(1e-8),
            |_, y| if y[0] > 2.0 { StepControl::Stop } else { StepControl::Continue },
        )
        .unwrap();
        assert!(!sol.completed && sol.y_end[0] > 2.0);
    }
}
