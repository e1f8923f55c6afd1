//! Baseline results keyed by (setup, parameters, grid, steps).
//!
//! CSV columns: `setup,y_x1,y_x2,y_v,grid,n_steps,J_star,iterations,grad_norm,wall_time_s,status`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Termination;
use crate::env::Setup;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub setup: Setup,
    pub y_x1: f64,
    pub y_x2: f64,
    pub y_v: f64,
    pub grid: usize,
    pub n_steps: usize,
    #[serde(rename = "J_star")]
    pub j_star: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub wall_time_s: f64,
    pub status: Termination,
}

impl BaselineRecord {
    pub fn matches(&self, setup: Setup, y: (f64, f64, f64), grid: usize, n_steps: usize) -> bool {
        self.setup == setup
            && self.y_x1 == y.0
            && self.y_x2 == y.1
            && self.y_v == y.2
            && self.grid == grid
            && self.n_steps == n_steps
    }
}

pub fn write_cache<W: Write>(w: W, records: &[BaselineRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cache<R: Read>(r: R) -> Result<Vec<BaselineRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let rec = BaselineRecord {
            setup: Setup::Sinusoidal,
            y_x1: 0.125,
            y_x2: 0.4,
            y_v: -0.2125,
            grid: 16,
            n_steps: 25,
            j_star: 0.0412345678901234,
            iterations: 87,
            grad_norm: 3.2e-5,
            wall_time_s: 1.5,
            status: Termination::Converged,
        };
        let mut buf = Vec::new();
        write_cache(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "setup,y_x1,y_x2,y_v,grid,n_steps,J_star,iterations,grad_norm,wall_time_s,status\n"
        ));
        assert!(text.contains("sinusoidal") && text.contains("converged"));
        let back = read_cache(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        assert!(back[0].matches(Setup::Sinusoidal, (0.125, 0.4, -0.2125), 16, 25));
    }
}
