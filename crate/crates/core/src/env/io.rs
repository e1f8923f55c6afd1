//! Episode dumps for the plotting tools.
//!
//! Episode CSV: header `step,s,alpha,u1,u2,reward`, one row per step
//! `0..=N`; the terminal row leaves `u1,u2` empty and carries `G` as reward.
//!
//! Snapshot file (little-endian):
//!
//! ```text
//! magic   8 bytes "AMPCGRD1"
//! nx, ny  u32, u32   grid nodes along x₁ and x₂
//! frames  u32
//! per frame: s f64, then nx·ny f64 values, row-major with rows along x₂
//! ```

use std::io::{Read, Write};

use super::EpisodeRecord;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"AMPCGRD1";

pub fn write_episode_csv<W: Write>(w: W, ep: &EpisodeRecord) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "s", "alpha", "u1", "u2", "reward"])?;
    for (i, (s, z)) in ep.times.iter().zip(&ep.states).enumerate() {
        let (u1, u2) = match ep.controls.get(i) {
            Some(u) => (u[0].to_string(), u[1].to_string()),
            None => (String::new(), String::new()),
        };
        out.write_record([
            i.to_string(),
            s.to_string(),
            z.alpha.to_string(),
            u1,
            u2,
            ep.rewards[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshots {
    pub nx: usize,
    pub ny: usize,
    pub frames: Vec<(f64, Vec<f64>)>,
}

impl Snapshots {
    pub fn from_episode(ep: &EpisodeRecord, n: usize) -> Self {
        let frames = ep
            .times
            .iter()
            .zip(&ep.states)
            .map(|(&s, z)| (s, z.a.clone()))
            .collect();
        Self {
            nx: n,
            ny: n,
            frames,
        }
    }
}

pub fn write_snapshots<W: Write>(w: &mut W, snaps: &Snapshots) -> Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&(snaps.nx as u32).to_le_bytes())?;
    w.write_all(&(snaps.ny as u32).to_le_bytes())?;
    w.write_all(&(snaps.frames.len() as u32).to_le_bytes())?;
    for (s, values) in &snaps.frames {
        if values.len() != snaps.nx * snaps.ny {
            return Err(Error::Format(format!(
                "frame has {} values, expected {}",
                values.len(),
                snaps.nx * snaps.ny
            )));
        }
        w.write_all(&s.to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshots<R: Read>(r: &mut R) -> Result<Snapshots> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a snapshot file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4) as usize)
    };
    let nx = next_u32(r)?;
    let ny = next_u32(r)?;
    let count = next_u32(r)?;
    let mut b8 = [0u8; 8];
    let mut frames = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        let s = f64::from_le_bytes(b8);
        let mut values = Vec::with_capacity(nx * ny);
        for _ in 0..nx * ny {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        frames.push((s, values));
    }
    Ok(Snapshots { nx, ny, frames })
}
