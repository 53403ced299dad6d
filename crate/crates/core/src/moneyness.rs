//! Moneyness scaling between funds with different leverage ratios.
//!
//! For a fund with leverage `β` on the same index,
//!
//! ```text
//! LM(β) = β LM(1) − {r(β − 1) + c*} T − β(β − 1)/2 · E[∫V | log(S_T/S_0) = LM(1)]
//! ```
//!
//! and eliminating `LM(1)` between two funds gives the map from source
//! (`β₂`) to target (`β₁`) coordinates.

use serde::{Deserialize, Serialize};

use crate::cond_var::CondVarCurve;
use crate::error::{Error, Result};
use crate::market_data::{FundSpec, OptionQuote};

/// Source of the conditional expected integrated variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConditionalVariance {
    /// The same integrated variance for every conditioning value.
    Constant(f64),
    Curve(CondVarCurve),
}

impl ConditionalVariance {
    /// Value at unlevered log-moneyness `lm1`, with a flag set when `lm1`
    /// lies outside the populated part of the curve and was clamped.
    pub fn lookup(&self, lm1: f64) -> Result<(f64, bool)> {
        match self {
            ConditionalVariance::Constant(v) => Ok((*v, false)),
            ConditionalVariance::Curve(c) => {
                let pts = c.nonempty();
                if pts.is_empty() {
                    return Err(Error::invalid("conditional-variance curve has no populated bins"));
                }
                let first = pts[0];
                let last = pts[pts.len() - 1];
                if lm1 <= first.0 {
                    return Ok((first.1, lm1 < first.0));
                }
                if lm1 >= last.0 {
                    return Ok((last.1, lm1 > last.0));
                }
                let k = pts.partition_point(|p| p.0 <= lm1);
                let (a, b) = (pts[k - 1], pts[k]);
                let w = (lm1 - a.0) / (b.0 - a.0);
                Ok((a.1 + w * (b.1 - a.1), false))
            }
        }
    }

    /// Level used to locate `LM(1)` from a leveraged coordinate.
    pub fn surrogate(&self) -> Result<f64> {
        match self {
            ConditionalVariance::Constant(v) => Ok(*v),
            ConditionalVariance::Curve(c) => c
                .weighted_mean()
                .ok_or_else(|| Error::invalid("conditional-variance curve has no populated bins")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingContext {
    pub source: FundSpec,
    pub target: FundSpec,
    pub r: f64,
    pub ttm: f64,
    pub condvar: ConditionalVariance,
}

impl ScalingContext {
    pub fn validate(&self) -> Result<()> {
        if self.source.beta == 0.0 || self.target.beta == 0.0 {
            return Err(Error::invalid("leverage ratios must be nonzero"));
        }
        if !(self.ttm > 0.0) {
            return Err(Error::invalid("ttm must be positive"));
        }
        match &self.condvar {
            ConditionalVariance::Curve(c) => {
                c.validate()?;
                if (c.ttm - self.ttm).abs() > 1.0 / 365.0 {
                    return Err(Error::invalid(format!(
                        "curve maturity {} does not match scaling maturity {}",
                        c.ttm, self.ttm
                    )));
                }
            }
            ConditionalVariance::Constant(v) => {
                if !(*v >= 0.0) {
                    return Err(Error::invalid("integrated variance must be nonnegative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledLm {
    pub value: f64,
    /// The conditional-variance lookup was clamped at a curve end.
    pub extrapolated: bool,
}

/// Unlevered log-moneyness for a source-fund coordinate, inverting the
/// single-fund relation with the surrogate variance level.
pub fn unlevered_lm(lm_source: f64, ctx: &ScalingContext) -> Result<f64> {
    let b2 = ctx.source.beta;
    if b2 == 1.0 {
        return Ok(lm_source);
    }
    let e = ctx.condvar.surrogate()?;
    let t = ctx.ttm;
    Ok((lm_source + (ctx.r * (b2 - 1.0) + ctx.source.carry_cost()) * t + 0.5 * b2 * (b2 - 1.0) * e) / b2)
}

pub fn scale_log_moneyness(lm_source: f64, ctx: &ScalingContext) -> Result<ScaledLm> {
    ctx.validate()?;
    let (e, extrapolated) = ctx.condvar.lookup(unlevered_lm(lm_source, ctx)?)?;
    let b1 = ctx.target.beta;
    let b2 = ctx.source.beta;
    let ratio = b1 / b2;
    let c1 = ctx.target.carry_cost();
    let c2 = ctx.source.carry_cost();
    let carry = ((ratio * (b2 - 1.0) - (b1 - 1.0)) * ctx.r + ratio * c2 - c1) * ctx.ttm;
    let convexity = 0.5 * (b1 * (b2 - 1.0) - b1 * (b1 - 1.0)) * e;
    Ok(ScaledLm {
        value: ratio * lm_source + carry + convexity,
        extrapolated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledQuote {
    pub scaled_lm: f64,
    pub implied_vol: f64,
    pub extrapolated: bool,
}

/// Moves every quote to target coordinates; implied vols pass through.
pub fn scale_quote_set(quotes: &[OptionQuote], ctx: &ScalingContext) -> Result<Vec<ScaledQuote>> {
    if let (Some(lo), Some(hi)) = (
        quotes.iter().map(|q| q.ttm).reduce(f64::min),
        quotes.iter().map(|q| q.ttm).reduce(f64::max),
    ) {
        if hi - lo > 1.0 / 365.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "quotes span maturities {lo:.4}..{hi:.4}; scale one maturity slice at a time"
            )));
        }
    }
    quotes
        .iter()
        .map(|q| {
            let s = scale_log_moneyness(q.log_moneyness(), ctx)?;
            Ok(ScaledQuote {
                scaled_lm: s.value,
                implied_vol: q.implied_vol,
                extrapolated: s.extrapolated,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(b_src: f64, c_src: f64, b_tgt: f64, c_tgt: f64, r: f64, var: f64) -> ScalingContext {
        ScalingContext {
            source: FundSpec::new("SRC", b_src, c_src, 0.0),
            target: FundSpec::new("TGT", b_tgt, c_tgt, 0.0),
            r,
            ttm: 1.0,
            condvar: ConditionalVariance::Constant(var),
        }
    }

    #[test]
    fn constant_variance_doubling() {
        let c = ctx(1.0, 0.0, 2.0, 0.0, 0.0, 0.04);
        assert!((scale_log_moneyness(0.0, &c).unwrap().value + 0.04).abs() < 1e-15);
    }

    #[test]
    fn fund_table_doubling() {
        let c = ctx(1.0, 0.0, 2.0, 0.0134, 0.02, 0.04);
        let v = scale_log_moneyness(0.0, &c).unwrap().value;
        assert!((v + 0.0734).abs() < 1e-12, "{v}");
    }

    #[test]
    fn identity_when_funds_agree() {
        let c = ctx(-2.0, 0.0089, -2.0, 0.0089, 0.03, 0.05);
        for lm in [-0.7, 0.0, 0.31] {
            assert_eq!(scale_log_moneyness(lm, &c).unwrap().value, lm);
        }
    }

    #[test]
    fn curve_lookup_interpolates_and_flags() {
        let curve = CondVarCurve {
            ttm: 1.0,
            lm_grid: vec![-0.2, 0.0, 0.2],
            values: vec![Some(0.06), None, Some(0.02)],
            bin_counts: vec![10, 0, 30],
        };
        let cv = ConditionalVariance::Curve(curve);
        assert_eq!(cv.lookup(0.0).unwrap(), (0.04, false));
        assert_eq!(cv.lookup(0.5).unwrap(), (0.02, true));
        assert_eq!(cv.lookup(-0.2).unwrap(), (0.06, false));
        assert!((cv.surrogate().unwrap() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn empty_curve_is_an_error() {
        let curve = CondVarCurve {
            ttm: 1.0,
            lm_grid: vec![-0.2, 0.2],
            values: vec![None, None],
            bin_counts: vec![0, 0],
        };
        let mut c = ctx(1.0, 0.0, 2.0, 0.0, 0.0, 0.0);
        c.condvar = ConditionalVariance::Curve(curve);
        assert!(scale_log_moneyness(0.0, &c).is_err());
    }
}
