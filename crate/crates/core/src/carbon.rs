//! Closed-form carbon-footprint accounting for a training run:
//! MWh = device-hours × device power × PUE / 10⁶, tCO2eq = MWh × intensity.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CarbonError {
    #[error("pue {0} below physical lower bound 1.0")]
    PueBelowOne(f64),
    #[error("device_hours must be non-negative, got {0}")]
    NegativeHours(f64),
    #[error("device_power_w must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("carbon_intensity must be non-negative, got {0}")]
    NegativeIntensity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarbonInput {
    pub device_hours: f64,
    pub device_power_w: f64,
    /// Power usage effectiveness; total facility energy over IT energy.
    pub pue: f64,
    /// tCO2eq per MWh.
    pub carbon_intensity: f64,
}

impl CarbonInput {
    pub fn validate(&self) -> Result<(), CarbonError> {
        if self.device_hours < 0.0 || !self.device_hours.is_finite() {
            return Err(CarbonError::NegativeHours(self.device_hours));
        }
        if self.device_power_w <= 0.0 || !self.device_power_w.is_finite() {
            return Err(CarbonError::NonPositivePower(self.device_power_w));
        }
        if self.pue < 1.0 || !self.pue.is_finite() {
            return Err(CarbonError::PueBelowOne(self.pue));
        }
        if self.carbon_intensity < 0.0 || !self.carbon_intensity.is_finite() {
            return Err(CarbonError::NegativeIntensity(self.carbon_intensity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarbonReport {
    pub mwh: f64,
    pub tco2eq: f64,
    pub inputs: CarbonInput,
}

impl CarbonReport {
    /// One-line display with the table rounding convention.
    pub fn display_line(&self) -> String {
        format!("{:.1} MWh, {:.2} tCO2eq", self.mwh, self.tco2eq)
    }
}

/// Full-precision estimate; rounding happens only at display.
pub fn estimate(input: CarbonInput) -> Result<CarbonReport, CarbonError> {
    input.validate()?;
    // The watt-hour → megawatt-hour factor 1e-6 is implicit in the source
    // arithmetic (hours × watts reported as MWh); made explicit here.
    let mwh = input.device_hours * input.device_power_w * input.pue / 1e6;
    Ok(CarbonReport {
        mwh,
        tco2eq: mwh * input.carbon_intensity,
        inputs: input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_input() -> CarbonInput {
        CarbonInput {
            device_hours: 270336.0,
            device_power_w: 192.0,
            pue: 1.10,
            carbon_intensity: 0.079,
        }
    }

    #[test]
    fn golden_values_round_to_57_and_4_5() {
        let r = estimate(reference_input()).unwrap();
        assert!((r.mwh - 57.094963).abs() < 1e-4, "{}", r.mwh);
        assert!((r.tco2eq - 4.510502).abs() < 1e-4, "{}", r.tco2eq);
        assert_eq!(r.mwh.round(), 57.0);
        assert_eq!((r.tco2eq * 10.0).round() / 10.0, 4.5);
        assert_eq!(r.display_line(), "57.1 MWh, 4.51 tCO2eq");
    }

    #[test]
    fn zero_hours_gives_zero() {
        let r = estimate(CarbonInput {
            device_hours: 0.0,
            ..reference_input()
        })
        .unwrap();
        assert_eq!(r.mwh, 0.0);
        assert_eq!(r.tco2eq, 0.0);
    }

    #[test]
    fn zero_intensity_gives_zero_tco2eq() {
        let r = estimate(CarbonInput {
            carbon_intensity: 0.0,
            ..reference_input()
        })
        .unwrap();
        assert!(r.mwh > 0.0);
        assert_eq!(r.tco2eq, 0.0);
    }

    #[test]
    fn pue_below_one_rejected() {
        let err = estimate(CarbonInput {
            pue: 0.9,
            ..reference_input()
        })
        .unwrap_err();
        assert!(matches!(err, CarbonError::PueBelowOne(_)));
    }

    #[test]
    fn linear_in_hours_and_intensity() {
        let base = estimate(reference_input()).unwrap();
        let doubled_hours = estimate(CarbonInput {
            device_hours: 2.0 * reference_input().device_hours,
            ..reference_input()
        })
        .unwrap();
        assert!((doubled_hours.mwh - 2.0 * base.mwh).abs() < 1e-9);
        let tripled_intensity = estimate(CarbonInput {
            carbon_intensity: 3.0 * reference_input().carbon_intensity,
            ..reference_input()
        })
        .unwrap();
        assert!((tripled_intensity.tco2eq - 3.0 * base.tco2eq).abs() < 1e-9);
    }
}
