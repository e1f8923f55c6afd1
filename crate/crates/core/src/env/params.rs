use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Problem family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    /// Constant velocity (25, 0); randomized source location.
    Horizontal,
    /// Phase-shifted meandering velocity; randomized source and phase.
    Sinusoidal,
}

impl Setup {
    /// Number of randomized parameters fed to the policies.
    pub fn param_dim(self) -> usize {
        match self {
            Setup::Horizontal => 2,
            Setup::Sinusoidal => 3,
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::Horizontal => "horizontal",
            Setup::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "horizontal" => Ok(Setup::Horizontal),
            "sinusoidal" => Ok(Setup::Sinusoidal),
            other => Err(Error::Config(format!("unknown setup `{other}`"))),
        }
    }
}

pub const SOURCE_X1_RANGE: (f64, f64) = (0.1, 0.25);
pub const SOURCE_X2_RANGE: (f64, f64) = (0.2, 0.8);
pub const PHASE_RANGE: (f64, f64) = (-0.425, 0.0);

/// One member of the problem family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub setup: Setup,
    pub source_x1: f64,
    pub source_x2: f64,
    /// Velocity phase; ignored (and kept at 0) for the horizontal setup.
    pub phase: f64,
}

impl ProblemParams {
    pub fn horizontal(source_x1: f64, source_x2: f64) -> Self {
        Self {
            setup: Setup::Horizontal,
            source_x1,
            source_x2,
            phase: 0.0,
        }
    }

    pub fn sinusoidal(source_x1: f64, source_x2: f64, phase: f64) -> Self {
        Self {
            setup: Setup::Sinusoidal,
            source_x1,
            source_x2,
            phase,
        }
    }

    /// Parameter vector presented to policies: `(y_x1, y_x2[, y_v])`.
    pub fn as_vec(&self) -> Vec<f64> {
        match self.setup {
            Setup::Horizontal => vec![self.source_x1, self.source_x2],
            Setup::Sinusoidal => vec![self.source_x1, self.source_x2, self.phase],
        }
    }

    /// Parameter vector affinely mapped so each sampling box becomes [−1, 1].
    pub fn normalized_vec(&self) -> Vec<f64> {
        let map = |v: f64, (lo, hi): (f64, f64)| 2.0 * (v - lo) / (hi - lo) - 1.0;
        let mut y = vec![
            map(self.source_x1, SOURCE_X1_RANGE),
            map(self.source_x2, SOURCE_X2_RANGE),
        ];
        if self.setup == Setup::Sinusoidal {
            y.push(map(self.phase, PHASE_RANGE));
        }
        y
    }

    pub fn in_range(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        inside(self.source_x1, SOURCE_X1_RANGE)
            && inside(self.source_x2, SOURCE_X2_RANGE)
            && (self.setup == Setup::Horizontal || inside(self.phase, PHASE_RANGE))
    }

    /// Velocity field at `(x1, x2)`.
    pub fn velocity(&self, x1: f64, _x2: f64) -> [f64; 2] {
        match self.setup {
            Setup::Horizontal => [25.0, 0.0],
            Setup::Sinusoidal => {
                let wave =
                    (1.1 - x1).cos() * (4.0 * std::f64::consts::PI * (x1 - self.phase)).sin();
                let radicand = 0.81 - (0.75 * wave).powi(2);
                assert!(radicand >= 0.0, "negative radicand in velocity field");
                [(1.0 + x1) * radicand.sqrt(), -0.9 * wave]
            }
        }
    }
}

/// Uniform draw from the parameter boxes; the phase is drawn only for the
/// sinusoidal setup.
pub fn sample_params<R: Rng + ?Sized>(setup: Setup, rng: &mut R) -> ProblemParams {
    let source_x1 = rng.random_range(SOURCE_X1_RANGE.0..SOURCE_X1_RANGE.1);
    let source_x2 = rng.random_range(SOURCE_X2_RANGE.0..SOURCE_X2_RANGE.1);
    match setup {
        Setup::Horizontal => ProblemParams::horizontal(source_x1, source_x2),
        Setup::Sinusoidal => {
            let phase = rng.random_range(PHASE_RANGE.0..PHASE_RANGE.1);
            ProblemParams::sinusoidal(source_x1, source_x2, phase)
        }
    }
}

pub const VALIDATION_X1: [f64; 2] = [0.125, 0.225];
pub const VALIDATION_X2: [f64; 5] = [0.25, 0.4, 0.5, 0.6, 0.75];
pub const VALIDATION_PHASE: [f64; 3] = [-0.35, -0.2125, -0.1];

/// Fixed validation grid: 10 horizontal or 30 sinusoidal problems, ordered
/// with y_x1 slowest and the phase fastest.
pub fn validation_set(setup: Setup) -> Vec<ProblemParams> {
    let mut out = Vec::new();
    for &x1 in &VALIDATION_X1 {
        for &x2 in &VALIDATION_X2 {
            match setup {
                Setup::Horizontal => out.push(ProblemParams::horizontal(x1, x2)),
                Setup::Sinusoidal => out.extend(
                    VALIDATION_PHASE
                        .iter()
                        .map(|&v| ProblemParams::sinusoidal(x1, x2, v)),
                ),
            }
        }
    }
    out
}
