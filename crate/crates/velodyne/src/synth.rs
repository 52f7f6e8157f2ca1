//! Synthetic VLP-16 scans for tests, demos and benchmarks.

use crate::capture::Record;
use crate::error::Result;
use crate::packet::encode_packet;
use crate::packet::wire::{BLOCKS, ELEVATION_DEG, LASERS, RECORDS_PER_BLOCK};
use crate::packet::Return;

/// Range and reflectivity of laser `laser` fired at `azimuth_deg`; range 0 means no return.
pub type Scene = fn(laser: usize, azimuth_deg: f64) -> Return;

/// Default scene: every laser returns, ranges between 3 m and 40 m.
pub fn default_scene(laser: usize, azimuth_deg: f64) -> Return {
    let a = azimuth_deg.to_radians();
    let up = ELEVATION_DEG[laser] > 0.0;
    let base = if up { 25.0 } else { 6.0 + laser as f64 * 0.5 };
    Return { distance_m: base + 8.0 * (a * 3.0).sin().abs() + 3.0 * a.cos(), reflectivity: (laser * 13) as u8 }
}

/// A rotating sensor sampled at a fixed azimuth resolution per firing sequence.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticScan {
    pub revolutions: usize,
    /// Azimuth step between firing sequences, degrees.
    pub resolution_deg: f64,
    pub rotation_hz: f64,
    pub start_timestamp_us: u64,
    pub scene: Scene,
}

impl Default for SyntheticScan {
    /// 10 Hz, 0.2° between firings: 1800 firings of 16 lasers per revolution.
    fn default() -> Self {
        SyntheticScan {
            revolutions: 1,
            resolution_deg: 0.2,
            rotation_hz: 10.0,
            start_timestamp_us: 1_000_000,
            scene: default_scene,
        }
    }
}

impl SyntheticScan {
    pub fn blocks_per_revolution(&self) -> usize {
        (360.0 / (2.0 * self.resolution_deg)).round() as usize
    }

    /// Packets of every revolution, in order. A trailing partial packet is padded
    /// with the azimuths that follow, so it starts the next revolution.
    pub fn records(&self) -> Result<Vec<Record>> {
        let per_rev = self.blocks_per_revolution();
        let total_blocks = per_rev * self.revolutions;
        let block_step = 360.0 / per_rev as f64;
        let block_us = 1e6 / self.rotation_hz / per_rev as f64;
        let mut out = Vec::with_capacity(total_blocks.div_ceil(BLOCKS));
        let mut b = 0;
        while b < total_blocks {
            let mut az = [0.0; BLOCKS];
            let mut returns = [[Return::default(); RECORDS_PER_BLOCK]; BLOCKS];
            for i in 0..BLOCKS {
                az[i] = ((b + i) % per_rev) as f64 * block_step;
                if b + i >= total_blocks {
                    continue;
                }
                for (j, r) in returns[i].iter_mut().enumerate() {
                    let seq_az = az[i] + (j / LASERS) as f64 * block_step / 2.0;
                    *r = (self.scene)(j % LASERS, seq_az % 360.0);
                }
            }
            let ts = self.start_timestamp_us + (b as f64 * block_us).round() as u64;
            let payload = encode_packet(&returns, &az, (ts % 3_600_000_000) as u32)?;
            out.push(Record { timestamp_us: ts, payload });
            b += BLOCKS;
        }
        Ok(out)
    }
}
