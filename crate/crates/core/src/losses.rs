//! Risk terms for every learning method, each returning its value and the
//! analytic derivative with respect to the ranker scores.
//!
//! Pairwise methods share the base loss `L(s_i, s_j) = -ln sigmoid(s_i - s_j)`
//! and differ only in the weight attached to a sampled `(u, i, j)`:
//!
//! | method | weight |
//! | ------ | ------ |
//! | BPR | `1` |
//! | UBPR | `(c_i / theta_i) (1 - c_j / theta_j)`, optionally clipped from below |
//! | UPL | `(1 - gamma_j) / (theta_i (1 - theta_j gamma_j))` |
//!
//! Pointwise baselines use the logistic log-loss `ell+(s) = -ln sigmoid(s)`,
//! `ell-(s) = -ln(1 - sigmoid(s))`:
//!
//! * WMF: `w c ell+ + (1 - c) ell-`
//! * Rel-MF: `(c / theta) ell+ + (1 - c / theta) ell-`
//! * MF-DU: `c [(1 / theta_click) ell+ + (1 - 1 / theta_click) ell-] + (1 - c) (1 / theta_nonclick) ell-`
//!
//! The MF-DU form applies separate inverse propensities to the clicked and
//! unclicked terms, following the dual-unbiased baseline.

use std::fmt;
use std::str::FromStr;

use crate::propensity::posterior_exposure;
use crate::{Error, Result};

pub const DEFAULT_WMF_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ideal,
    Bpr,
    /// UBPR with a tuned non-negative clipping threshold.
    Ubpr,
    /// UBPR without clipping.
    UbprNClip,
    /// UBPR with a fixed, user-supplied threshold.
    UbprClipped,
    Upl,
    Wmf,
    RelMf,
    MfDu,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Ideal,
        Method::Bpr,
        Method::Ubpr,
        Method::UbprNClip,
        Method::UbprClipped,
        Method::Upl,
        Method::Wmf,
        Method::RelMf,
        Method::MfDu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ideal => "ideal",
            Method::Bpr => "bpr",
            Method::Ubpr => "ubpr",
            Method::UbprNClip => "ubpr_nclip",
            Method::UbprClipped => "ubpr_clipped",
            Method::Upl => "upl",
            Method::Wmf => "wmf",
            Method::RelMf => "relmf",
            Method::MfDu => "mfdu",
        }
    }

    pub fn is_pairwise(self) -> bool {
        matches!(
            self,
            Method::Ideal | Method::Bpr | Method::Ubpr | Method::UbprNClip | Method::UbprClipped | Method::Upl
        )
    }

    pub fn needs_clip(self) -> bool {
        matches!(self, Method::Ubpr | Method::UbprClipped)
    }

    /// Negative items for these methods may themselves be clicked.
    pub fn samples_any_negative(self) -> bool {
        matches!(self, Method::Ubpr | Method::UbprNClip | Method::UbprClipped)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// A method plus the settings only some methods take.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    method: Method,
    clip_threshold: Option<f64>,
    wmf_weight: Option<f64>,
}

impl LossSpec {
    pub fn new(method: Method, clip_threshold: Option<f64>, wmf_weight: Option<f64>) -> Result<Self> {
        match (method.needs_clip(), clip_threshold) {
            (true, None) => return Err(Error::Config(format!("{method} requires a clip threshold"))),
            (false, Some(_)) => return Err(Error::Config(format!("{method} takes no clip threshold"))),
            (true, Some(t)) if !(-10.0..=0.0).contains(&t) => {
                return Err(Error::Config(format!("clip threshold {t} outside [-10, 0]")))
            }
            _ => {}
        }
        match (method == Method::Wmf, wmf_weight) {
            (true, None) => return Err(Error::Config("wmf requires a confidence weight".into())),
            (false, Some(_)) => return Err(Error::Config(format!("{method} takes no confidence weight"))),
            (true, Some(w)) if !(w >= 1.0 && w.is_finite()) => {
                return Err(Error::Config(format!("wmf weight {w} must be >= 1")))
            }
            _ => {}
        }
        Ok(Self {
            method,
            clip_threshold,
            wmf_weight,
        })
    }

    /// Spec for `method` with default settings (clip 0, WMF weight 10).
    pub fn default_for(method: Method) -> Self {
        Self {
            method,
            clip_threshold: method.needs_clip().then_some(0.0),
            wmf_weight: (method == Method::Wmf).then_some(DEFAULT_WMF_WEIGHT),
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn clip_threshold(&self) -> Option<f64> {
        self.clip_threshold
    }

    pub fn wmf_weight(&self) -> Option<f64> {
        self.wmf_weight
    }

    /// Weighted pair term and its score gradients.
    pub fn pair_term(&self, sample: &PairSample, s_i: f64, s_j: f64) -> Result<Term2> {
        let base = sigmoid_pair_loss(s_i, s_j);
        let weight = match self.method {
            Method::Ideal | Method::Bpr => 1.0,
            Method::Ubpr | Method::UbprNClip | Method::UbprClipped => {
                ubpr_pair_weight(true, sample.c_j, sample.theta_i, sample.theta_j)?
            }
            Method::Upl => upl_pair_weight(sample.theta_i, sample.theta_j, sample.gamma_hat_j)?,
            m => return Err(Error::Config(format!("{m} is pointwise"))),
        };
        let value = weight * base.value;
        if let Some(threshold) = self.clip_threshold {
            if value < threshold {
                return Ok(Term2 {
                    value: threshold,
                    d_si: 0.0,
                    d_sj: 0.0,
                });
            }
        }
        Ok(Term2 {
            value,
            d_si: weight * base.d_si,
            d_sj: weight * base.d_sj,
        })
    }

    pub fn point_term(&self, sample: &PointSample, s: f64) -> Result<Term1> {
        let weight = self.wmf_weight.unwrap_or(1.0);
        pointwise_loss(
            self.method,
            sample.clicked,
            s,
            sample.theta_click,
            sample.theta_nonclick,
            weight,
        )
    }
}

/// `(u, i, j)` with `c_{u,i} = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
    pub c_j: bool,
    pub theta_i: f64,
    pub theta_j: f64,
    /// Estimated relevance of `(u, j)`; only read by UPL.
    pub gamma_hat_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub user: usize,
    pub item: usize,
    pub clicked: bool,
    pub theta_click: f64,
    pub theta_nonclick: f64,
}

/// Value and gradients of a pair term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term2 {
    pub value: f64,
    pub d_si: f64,
    pub d_sj: f64,
}

/// Value and gradient of a pointwise term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term1 {
    pub value: f64,
    pub d_s: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-ln sigmoid(s_i - s_j)` and its derivatives.
pub fn sigmoid_pair_loss(s_i: f64, s_j: f64) -> Term2 {
    let delta = s_i - s_j;
    let g = sigmoid(-delta);
    Term2 {
        value: softplus(-delta),
        d_si: -g,
        d_sj: g,
    }
}

/// UPL weight `(1 - gamma_j) / (theta_i (1 - theta_j gamma_j))`, equal to
/// `posterior_j / (theta_i theta_j)`.
pub fn upl_pair_weight(theta_i: f64, theta_j: f64, gamma_hat_j: f64) -> Result<f64> {
    check_theta(theta_i)?;
    check_theta(theta_j)?;
    if !(0.0..=1.0).contains(&gamma_hat_j) {
        return Err(Error::domain(format!("gamma_hat {gamma_hat_j} outside [0, 1]")));
    }
    let denom = 1.0 - theta_j * gamma_hat_j;
    if denom <= 0.0 {
        return Err(Error::Singularity(format!(
            "theta_j * gamma_hat_j = {} >= 1",
            theta_j * gamma_hat_j
        )));
    }
    Ok((1.0 - gamma_hat_j) / (theta_i * denom))
}

/// UPL weight written through the posterior exposure of `j`. Passing
/// `posterior_j = theta_j` recovers the zero-clipped UBPR term.
pub fn upl_pair_weight_from_posterior(theta_i: f64, theta_j: f64, posterior_j: f64) -> Result<f64> {
    check_theta(theta_i)?;
    check_theta(theta_j)?;
    Ok(posterior_j / (theta_i * theta_j))
}

/// Same weight as [`upl_pair_weight`], routed through [`posterior_exposure`].
pub fn upl_pair_weight_via_posterior(theta_i: f64, theta_j: f64, gamma_j: f64) -> Result<f64> {
    upl_pair_weight_from_posterior(theta_i, theta_j, posterior_exposure(theta_j, gamma_j)?)
}

/// `(c_i / theta_i) (1 - c_j / theta_j)`; negative when `c_j = 1, theta_j < 1`.
pub fn ubpr_pair_weight(c_i: bool, c_j: bool, theta_i: f64, theta_j: f64) -> Result<f64> {
    check_theta(theta_i)?;
    check_theta(theta_j)?;
    let ci = f64::from(u8::from(c_i));
    let cj = f64::from(u8::from(c_j));
    Ok(ci / theta_i * (1.0 - cj / theta_j))
}

pub fn clip_term(weighted_loss: f64, threshold: f64) -> f64 {
    weighted_loss.max(threshold)
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else if theta == 0.0 {
        Err(Error::Singularity("zero propensity".into()))
    } else {
        Err(Error::domain(format!("propensity {theta} outside (0, 1]")))
    }
}

pub fn pointwise_loss(
    method: Method,
    clicked: bool,
    s: f64,
    theta_click: f64,
    theta_nonclick: f64,
    weight: f64,
) -> Result<Term1> {
    let c = f64::from(u8::from(clicked));
    // ell+ = softplus(-s), d/ds = -sigmoid(-s); ell- = softplus(s), d/ds = sigmoid(s)
    let pos = softplus(-s);
    let neg = softplus(s);
    let d_pos = -sigmoid(-s);
    let d_neg = sigmoid(s);
    let (a, b) = match method {
        Method::Wmf => (weight * c, 1.0 - c),
        Method::RelMf => {
            check_theta(theta_click)?;
            let w = c / theta_click;
            (w, 1.0 - w)
        }
        Method::MfDu => {
            if clicked {
                check_theta(theta_click)?;
                let w = 1.0 / theta_click;
                (w, 1.0 - w)
            } else {
                check_theta(theta_nonclick)?;
                (0.0, 1.0 / theta_nonclick)
            }
        }
        m => return Err(Error::Config(format!("{m} is pairwise"))),
    };
    Ok(Term1 {
        value: a * pos + b * neg,
        d_s: a * d_pos + b * d_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn pair_loss_examples() {
        let t = sigmoid_pair_loss(0.0, 0.0);
        assert!((t.value - LN_2).abs() < 1e-15);
        assert_eq!((t.d_si, t.d_sj), (-0.5, 0.5));
        assert!(sigmoid_pair_loss(100.0, 0.0).value < 1e-10);
        // -ln sigmoid(1), frozen from an independent evaluation
        assert!((sigmoid_pair_loss(1.0, 0.0).value - 0.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn pair_loss_is_stable_at_extremes() {
        for delta in [-500.0, -50.0, 50.0, 500.0] {
            let t = sigmoid_pair_loss(delta, 0.0);
            assert!(t.value.is_finite() && t.value >= 0.0);
            assert!(t.d_si.is_finite() && t.d_sj.is_finite());
        }
        assert!((sigmoid_pair_loss(-500.0, 0.0).value - 500.0).abs() < 1e-9);
    }

    #[test]
    fn upl_weight_examples() {
        assert_eq!(upl_pair_weight(1.0, 1.0, 0.0).unwrap(), 1.0);
        assert!((upl_pair_weight(0.5, 0.5, 0.5).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(matches!(upl_pair_weight(0.5, 1.0, 1.0), Err(Error::Singularity(_))));
    }

    #[test]
    fn ubpr_weight_examples() {
        for tj in [0.1, 0.5, 1.0] {
            assert_eq!(ubpr_pair_weight(true, false, 0.5, tj).unwrap(), 2.0);
        }
        assert_eq!(ubpr_pair_weight(true, true, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(ubpr_pair_weight(true, true, 0.5, 0.25).unwrap(), -6.0);
        assert!(ubpr_pair_weight(true, true, 0.0, 0.25).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_term(5.0, 0.0), 5.0);
        assert_eq!(clip_term(-3.0, 0.0), 0.0);
        assert_eq!(clip_term(-3.0, -10.0), -3.0);
    }

    #[test]
    fn pointwise_examples() {
        let t = pointwise_loss(Method::RelMf, true, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert!((t.value - LN_2).abs() < 1e-15);
        assert!((t.d_s + 0.5).abs() < 1e-15);
        for theta in [0.05, 0.3, 1.0] {
            let t = pointwise_loss(Method::RelMf, false, 0.0, theta, 1.0, 1.0).unwrap();
            assert!((t.value - LN_2).abs() < 1e-15);
        }
        let t = pointwise_loss(Method::Wmf, true, 0.0, 1.0, 1.0, 2.0).unwrap();
        assert!((t.value - 2.0 * LN_2).abs() < 1e-15);
        assert!(pointwise_loss(Method::RelMf, true, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(pointwise_loss(Method::Bpr, true, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn loss_spec_validation() {
        assert!(LossSpec::new(Method::Ubpr, None, None).is_err());
        assert!(LossSpec::new(Method::Ubpr, Some(-11.0), None).is_err());
        assert!(LossSpec::new(Method::Bpr, Some(0.0), None).is_err());
        assert!(LossSpec::new(Method::Wmf, None, None).is_err());
        assert!(LossSpec::new(Method::Wmf, None, Some(0.5)).is_err());
        assert!(LossSpec::new(Method::UbprClipped, Some(-1.0), None).is_ok());
        assert!(LossSpec::new(Method::Wmf, None, Some(10.0)).is_ok());
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let spec = LossSpec::default_for(m);
            assert_eq!(
                LossSpec::new(m, spec.clip_threshold(), spec.wmf_weight()).unwrap(),
                spec
            );
        }
    }

    #[test]
    fn clipped_term_has_zero_gradient() {
        let spec = LossSpec::new(Method::Ubpr, Some(0.0), None).unwrap();
        let s = PairSample {
            user: 0,
            pos: 0,
            neg: 1,
            c_j: true,
            theta_i: 0.5,
            theta_j: 0.25,
            gamma_hat_j: 0.0,
        };
        let t = spec.pair_term(&s, 0.3, 0.1).unwrap();
        assert_eq!((t.value, t.d_si, t.d_sj), (0.0, 0.0, 0.0));
        let unclipped = LossSpec::default_for(Method::UbprNClip)
            .pair_term(&s, 0.3, 0.1)
            .unwrap();
        assert!(unclipped.value < 0.0 && unclipped.d_si > 0.0);
    }

    proptest! {
        #[test]
        fn upl_weights_are_non_negative(theta_i in 1e-4f64..=1.0, theta_j in 1e-4f64..=1.0, g in 0.0f64..=1.0) {
            prop_assume!(theta_j * g < 1.0);
            let w = upl_pair_weight(theta_i, theta_j, g).unwrap();
            prop_assert!(w >= 0.0);
            let via = upl_pair_weight_via_posterior(theta_i, theta_j, g).unwrap();
            prop_assert!((w - via).abs() <= 1e-12 * w.max(1.0));
        }

        #[test]
        fn unit_propensities_collapse_to_bpr(s_i in -10.0f64..10.0, s_j in -10.0f64..10.0) {
            let sample = PairSample { user: 0, pos: 0, neg: 1, c_j: false, theta_i: 1.0, theta_j: 1.0, gamma_hat_j: 0.0 };
            let bpr = LossSpec::default_for(Method::Bpr).pair_term(&sample, s_i, s_j).unwrap();
            for m in [Method::Upl, Method::Ubpr, Method::UbprNClip] {
                let t = LossSpec::default_for(m).pair_term(&sample, s_i, s_j).unwrap();
                prop_assert!((t.value - bpr.value).abs() < 1e-12);
                prop_assert!((t.d_si - bpr.d_si).abs() < 1e-12);
            }
        }
    }
}
