//! Control laws: constants, open-loop tables and state feedback.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum LawKind {
    Constant(Vec<f64>),
    /// Piecewise-constant table: `values[i]` applies on `[times[i], times[i+1])`.
    OpenLoop { times: Vec<f64>, values: Vec<Vec<f64>> },
    Feedback(FeedbackFn),
}

/// An admissible control specification. Evaluations are clamped into
/// `bounds` when a box is declared.
#[derive(Clone)]
pub struct ControlLaw {
    pub label: String,
    dim: usize,
    kind: LawKind,
    bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub period: Option<f64>,
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            LawKind::Constant(c) => format!("Constant({c:?})"),
            LawKind::OpenLoop { times, .. } => format!("OpenLoop({} knots)", times.len()),
            LawKind::Feedback(_) => "Feedback".to_string(),
        };
        f.debug_struct("ControlLaw")
            .field("label", &self.label)
            .field("kind", &kind)
            .field("bounds", &self.bounds)
            .field("period", &self.period)
            .finish()
    }
}

impl ControlLaw {
    pub fn constant(value: Vec<f64>) -> Self {
        ControlLaw {
            label: format!("constant{value:?}"),
            dim: value.len(),
            kind: LawKind::Constant(value),
            bounds: None,
            period: None,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn open_loop(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidArgument(
                "open-loop table needs matching, non-empty times and values".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("open-loop times must increase".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::Dimension("open-loop values have mixed dimensions".into()));
        }
        Ok(ControlLaw {
            label: format!("open-loop[{}]", times.len()),
            dim,
            kind: LawKind::OpenLoop { times, values },
            bounds: None,
            period: None,
        })
    }

    pub fn feedback(
        label: impl Into<String>,
        dim: usize,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        ControlLaw {
            label: label.into(),
            dim,
            kind: LawKind::Feedback(Arc::new(f)),
            bounds: None,
            period: None,
        }
    }

    /// Scalar linear feedback `u = -gain · x₁` for one-dimensional problems.
    pub fn linear_feedback_1d(gain: f64) -> Self {
        Self::feedback(format!("u=-{gain}x"), 1, move |_, x, u| u[0] = -gain * x[0])
    }

    /// Linear feedback `u = -G x` with `G` row-major `m × n`.
    pub fn linear_feedback(gain: Vec<f64>, m: usize, n: usize) -> Result<Self> {
        if gain.len() != m * n {
            return Err(Error::Dimension(format!("gain must be {m}x{n}")));
        }
        Ok(Self::feedback(format!("u=-Gx{gain:?}"), m, move |_, x, u| {
            for i in 0..m {
                u[i] = -(0..n).map(|j| gain[i * n + j] * x[j]).sum::<f64>();
            }
        }))
    }

    pub fn with_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != self.dim || hi.len() != self.dim {
            return Err(Error::Dimension("control bounds do not match control dimension".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("control bounds inverted".into()));
        }
        self.bounds = Some((lo, hi));
        Ok(self)
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = Some(period);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> Option<(&[f64], &[f64])> {
        self.bounds.as_ref().map(|(l, h)| (l.as_slice(), h.as_slice()))
    }

    pub fn kind(&self) -> &LawKind {
        &self.kind
    }

    pub fn is_feedback(&self) -> bool {
        matches!(self.kind, LawKind::Feedback(_))
    }

    /// Evaluate `u(t, x)` into `out`, clamped into the declared bounds.
    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let t = match self.period {
            Some(p) => t.rem_euclid(p),
            None => t,
        };
        match &self.kind {
            LawKind::Constant(c) => out.copy_from_slice(c),
            LawKind::OpenLoop { times, values } => {
                let idx = match times.binary_search_by(|v| v.total_cmp(&t)) {
                    Ok(i) => i,
                    Err(0) => 0,
                    Err(i) => i - 1,
                };
                out.copy_from_slice(&values[idx]);
            }
            LawKind::Feedback(f) => f(t, x, out),
        }
        if let Some((lo, hi)) = &self.bounds {
            for ((v, l), h) in out.iter_mut().zip(lo).zip(hi) {
                *v = v.clamp(*l, *h);
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_respects_bounds() {
        let law = ControlLaw::linear_feedback_1d(0.5).with_bounds(vec![-1.0], vec![1.0]).unwrap();
        for x in [-10.0, -1.0, 0.0, 3.0, 100.0] {
            let u = law.eval(0.0, &[x])[0];
            assert!((-1.0..=1.0).contains(&u));
        }
        assert_eq!(law.eval(0.0, &[1.0])[0], -0.5);
    }

    #[test]
    fn open_loop_is_piecewise_constant() {
        let law = ControlLaw::open_loop(vec![0.0, 1.0], vec![vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(law.eval(0.5, &[0.0])[0], 1.0);
        assert_eq!(law.eval(1.0, &[0.0])[0], 2.0);
        assert_eq!(law.eval(7.0, &[0.0])[0], 2.0);
    }

    #[test]
    fn periodic_open_loop_wraps() {
        let law = ControlLaw::open_loop(vec![0.0, 0.5], vec![vec![1.0], vec![-1.0]])
            .unwrap()
            .with_period(1.0);
        assert_eq!(law.eval(1.25, &[0.0])[0], 1.0);
        assert_eq!(law.eval(1.75, &[0.0])[0], -1.0);
    }
}
