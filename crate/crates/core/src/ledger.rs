//! Empirically calibrated constants echoed into every report.

use serde::{Deserialize, Serialize};

use crate::models::BoundConstants;

/// Version tag of the JSON report layout.
pub const REPORT_SCHEMA: &str = "weakloc-report/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsLedger {
    pub c0: Option<f64>,
    pub n1: Option<usize>,
    pub c2_fit: Option<f64>,
    pub c1_fit: Option<f64>,
    pub c_weyl: Option<f64>,
    pub c_b: Option<f64>,
    pub d: Option<f64>,
    pub c5: Option<f64>,
    pub c6: Option<f64>,
    pub c7: Option<f64>,
    pub c8: Option<f64>,
    pub c11: Option<f64>,
    pub theta: Option<f64>,
}

impl ConstantsLedger {
    pub fn record_bounds(&mut self, c: &BoundConstants) {
        self.c5 = Some(c.c5);
        self.c6 = Some(c.c6);
        self.c7 = Some(c.c7);
        self.c8 = Some(c.c8);
        self.c11 = Some(c.c11);
    }
}
