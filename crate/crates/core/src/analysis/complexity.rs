//! Closed-form cost of global, windowed and granular attention, evaluated
//! in exact integer arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Inputs of the cost formulas: token grid `h × w`, channels `c`, window
/// size `m` and deepest grid `h0 × w0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComplexityParams {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
    pub h0: u64,
    pub w0: u64,
}

impl ComplexityParams {
    /// Checks positivity and that `hw / (h0·w0)` is a power of four.
    pub fn validate(&self) -> Result<()> {
        let Self { h, w, c, m, h0, w0 } = *self;
        if [h, w, c, m, h0, w0].contains(&0) {
            return Err(invalid(
                "complexity",
                format!("all parameters must be positive: {self:?}"),
            ));
        }
        let (hw, base) = (self.hw()?, mul(h0, w0)?);
        if hw < base || hw % base != 0 || !(hw / base).is_power_of_two() || (hw / base).trailing_zeros() % 2 != 0 {
            return Err(invalid(
                "complexity",
                format!("hw / (h0·w0) = {hw} / {base} must be a power of four"),
            ));
        }
        Ok(())
    }

    fn hw(&self) -> Result<u128> {
        mul(self.h, self.w)
    }

    /// `log2(hw / (h0·w0))`, an even integer.
    pub fn log2_ratio(&self) -> Result<u128> {
        self.validate()?;
        Ok(u128::from((self.hw()? / mul(self.h0, self.w0)?).trailing_zeros()))
    }
}

fn overflow() -> crate::error::Error {
    invalid("complexity", "integer overflow")
}

fn mul(a: impl Into<u128>, b: impl Into<u128>) -> Result<u128> {
    a.into().checked_mul(b.into()).ok_or_else(overflow)
}

fn add(a: u128, b: u128) -> Result<u128> {
    a.checked_add(b).ok_or_else(overflow)
}

/// Shared projection term `4hwC²`.
fn projections(p: &ComplexityParams) -> Result<u128> {
    mul(mul(4u8, p.hw()?)?, mul(p.c, p.c)?)
}

/// `Ω(MSA) = 4hwC² + 2(hw)²C`.
pub fn omega_msa(p: &ComplexityParams) -> Result<u128> {
    p.validate()?;
    let hw = p.hw()?;
    add(projections(p)?, mul(mul(2u8, mul(hw, hw)?)?, p.c)?)
}

/// `Ω(W-MSA) = 4hwC² + 2M²hwC`.
pub fn omega_wmsa(p: &ComplexityParams) -> Result<u128> {
    p.validate()?;
    add(projections(p)?, mul(mul(mul(2u8, mul(p.m, p.m)?)?, p.hw()?)?, p.c)?)
}

/// `Ω(GMSA) = 4hwC² + (h0w0)²C + 16·log2(hw/(h0w0))·C`.
pub fn omega_gmsa(p: &ComplexityParams) -> Result<u128> {
    p.validate()?;
    let base = mul(p.h0, p.w0)?;
    let deep = mul(mul(base, base)?, p.c)?;
    let levels = mul(mul(16u8, p.log2_ratio()?)?, p.c)?;
    add(add(projections(p)?, deep)?, levels)
}

/// One row of a sweep. Column names are stable; they are the CSV header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
    pub h0: u64,
    pub w0: u64,
    pub omega_msa: u128,
    pub omega_wmsa: u128,
    pub omega_gmsa: u128,
    pub gmsa_over_msa: f64,
    pub wmsa_over_msa: f64,
}

impl ComplexityRow {
    pub fn params(&self) -> ComplexityParams {
        ComplexityParams {
            h: self.h,
            w: self.w,
            c: self.c,
            m: self.m,
            h0: self.h0,
            w0: self.w0,
        }
    }
}

pub fn evaluate(p: &ComplexityParams) -> Result<ComplexityRow> {
    let (msa, wmsa, gmsa) = (omega_msa(p)?, omega_wmsa(p)?, omega_gmsa(p)?);
    Ok(ComplexityRow {
        h: p.h,
        w: p.w,
        c: p.c,
        m: p.m,
        h0: p.h0,
        w0: p.w0,
        omega_msa: msa,
        omega_wmsa: wmsa,
        omega_gmsa: gmsa,
        gmsa_over_msa: gmsa as f64 / msa as f64,
        wmsa_over_msa: wmsa as f64 / msa as f64,
    })
}

/// Evaluates every parameter set. An empty sweep is an error.
pub fn sweep(params: &[ComplexityParams]) -> Result<Vec<ComplexityRow>> {
    if params.is_empty() {
        return Err(invalid("sweep", "no parameter sets"));
    }
    params.iter().map(evaluate).collect()
}

/// `h = w ∈ {32, 64, 128, 256}`, `C = 64`, `M = 8`, `h0 = w0 = 16`.
pub fn default_sweep() -> Vec<ComplexityParams> {
    [32, 64, 128, 256]
        .into_iter()
        .map(|s| ComplexityParams {
            h: s,
            w: s,
            c: 64,
            m: 8,
            h0: 16,
            w0: 16,
        })
        .collect()
}

/// Measured multiply-accumulates of one module of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleMacs {
    pub module: String,
    pub macs: u64,
}

/// Analytic sweep plus measured counts for a concrete model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub sweep: Vec<ComplexityRow>,
    pub measured: Vec<ModuleMacs>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(h: u64, c: u64, m: u64, h0: u64) -> ComplexityParams {
        ComplexityParams {
            h,
            w: h,
            c,
            m,
            h0,
            w0: h0,
        }
    }

    #[test]
    fn worked_values() {
        assert_eq!(omega_msa(&p(16, 64, 4, 4)).unwrap(), 12_582_912);
        assert_eq!(omega_wmsa(&p(16, 64, 4, 4)).unwrap(), 4_718_592);
        assert_eq!(omega_gmsa(&p(16, 64, 4, 4)).unwrap(), 4_214_784);
    }

    #[test]
    fn log_term_vanishes_at_deepest_grid() {
        let q = p(8, 32, 4, 8);
        assert_eq!(q.log2_ratio().unwrap(), 0);
        assert_eq!(omega_gmsa(&q).unwrap(), 4 * 64 * 32 * 32 + 64 * 64 * 32);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(omega_msa(&p(0, 64, 4, 4)).is_err());
        // ratio 2 and ratio 8 are not powers of four
        assert!(omega_gmsa(&ComplexityParams {
            h: 8,
            w: 4,
            c: 1,
            m: 1,
            h0: 4,
            w0: 4
        })
        .is_err());
        assert!(omega_gmsa(&ComplexityParams {
            h: 8,
            w: 8,
            c: 1,
            m: 1,
            h0: 4,
            w0: 2
        })
        .is_err());
        assert!(omega_gmsa(&p(4, 64, 4, 8)).is_err());
        assert!(omega_gmsa(&p(12, 64, 4, 4)).is_err());
        assert!(omega_msa(&p(u64::MAX, u64::MAX, 1, 1)).is_err());
        assert!(sweep(&[]).is_err());
    }

    #[test]
    fn default_sweep_ordering() {
        let rows = sweep(&default_sweep()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.omega_gmsa < r.omega_wmsa && r.omega_wmsa < r.omega_msa);
        }
        assert!(rows.windows(2).all(|w| w[1].gmsa_over_msa < w[0].gmsa_over_msa));
    }
}
