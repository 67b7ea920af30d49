//! Corey relative permeability and fractional-flow helpers.

/// Corey-type relative permeability curves with unit endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreyRelPerm {
    /// Connate water saturation.
    pub s_wc: f64,
    /// Residual oil saturation.
    pub s_or: f64,
    /// Corey exponent, water.
    pub n_w: f64,
    /// Corey exponent, oil.
    pub n_o: f64,
}

impl CoreyRelPerm {
    /// Normalized water saturation clamped to [0, 1].
    fn normalized(&self, s_w: f64) -> f64 {
        let span = 1.0 - self.s_wc - self.s_or;
        ((s_w - self.s_wc) / span).clamp(0.0, 1.0)
    }

    pub fn krw(&self, s_w: f64) -> f64 {
        self.normalized(s_w).powf(self.n_w)
    }

    pub fn kro(&self, s_w: f64) -> f64 {
        (1.0 - self.normalized(s_w)).powf(self.n_o)
    }

    /// Water fractional flow for given viscosities (no gravity).
    pub fn frac_flow(&self, s_w: f64, mu_w: f64, mu_o: f64) -> f64 {
        let lw = self.krw(s_w) / mu_w;
        let lo = self.kro(s_w) / mu_o;
        if lw + lo == 0.0 {
            0.0
        } else {
            lw / (lw + lo)
        }
    }

    /// Largest slope of the fractional-flow curve over the mobile range,
    /// sampled densely; used for the explicit CFL limit.
    pub fn max_frac_flow_slope(&self, mu_w: f64, mu_o: f64) -> f64 {
        let n = 2000;
        let lo = self.s_wc;
        let hi = 1.0 - self.s_or;
        let h = (hi - lo) / n as f64;
        let mut max_slope = 0.0f64;
        let mut prev = self.frac_flow(lo, mu_w, mu_o);
        for i in 1..=n {
            let s = lo + i as f64 * h;
            let cur = self.frac_flow(s, mu_w, mu_o);
            max_slope = max_slope.max((cur - prev) / h);
            prev = cur;
        }
        max_slope
    }
}
