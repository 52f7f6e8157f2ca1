//! VLP-16 data packet layout and decoding.

use crate::error::{Result, VelodyneError};

/// Wire constants of the VLP-16 single-return data packet.
pub mod wire {
    /// UDP payload size of a data packet.
    pub const PACKET_LEN: usize = 1206;
    pub const BLOCKS: usize = 12;
    pub const BLOCK_LEN: usize = 100;
    /// Start-of-block flag, bytes `FF EE` on the wire.
    pub const BLOCK_FLAG: u16 = 0xFFEE;
    /// Two firing sequences of sixteen lasers per block.
    pub const RECORDS_PER_BLOCK: usize = 32;
    pub const LASERS: usize = 16;
    pub const RECORD_LEN: usize = 3;
    /// Azimuth unit in degrees.
    pub const AZIMUTH_UNIT_DEG: f64 = 0.01;
    /// Distance unit in meters.
    pub const DISTANCE_UNIT_M: f64 = 0.002;
    /// Time between the two firing sequences of a block, µs.
    pub const SEQUENCE_PERIOD_US: f64 = 55.296;
    /// Time between consecutive laser firings within a sequence, µs.
    pub const FIRING_PERIOD_US: f64 = 2.304;
    /// Time covered by one block, µs.
    pub const BLOCK_PERIOD_US: f64 = 110.592;
    pub const TIMESTAMP_OFFSET: usize = BLOCKS * BLOCK_LEN;
    pub const RETURN_MODE_OFFSET: usize = TIMESTAMP_OFFSET + 4;
    pub const PRODUCT_ID_OFFSET: usize = RETURN_MODE_OFFSET + 1;
    pub const RETURN_STRONGEST: u8 = 0x37;
    pub const RETURN_LAST: u8 = 0x38;
    pub const RETURN_DUAL: u8 = 0x39;
    pub const PRODUCT_VLP16: u8 = 0x22;
    /// Elevation in degrees of each laser channel, in firing order.
    pub const ELEVATION_DEG: [f64; LASERS] =
        [-15.0, 1.0, -13.0, 3.0, -11.0, 5.0, -9.0, 7.0, -7.0, 9.0, -5.0, 11.0, -3.0, 13.0, -1.0, 15.0];
    pub const DEFAULT_PORT: u16 = 2368;
}

use wire::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RawReturn {
    /// Distance in 2 mm units; zero means no return.
    pub distance: u16,
    pub reflectivity: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawBlock {
    /// Azimuth in hundredths of a degree.
    pub azimuth: u16,
    pub returns: [RawReturn; RECORDS_PER_BLOCK],
}

/// A parsed data packet, field for field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VelodynePacket {
    pub blocks: [RawBlock; BLOCKS],
    /// Microseconds past the hour of the first firing.
    pub timestamp_us: u32,
    pub return_mode: u8,
    pub product_id: u8,
}

/// A single laser return in sensor coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarPoint {
    /// Range in meters.
    pub r: f64,
    /// Azimuth in degrees, `[0, 360)`, corrected for firing time.
    pub azimuth: f64,
    /// Elevation in degrees.
    pub elevation: f64,
    pub reflectivity: u8,
    pub laser_id: u8,
    /// Firing time in µs relative to the packet timestamp (frame start once assembled).
    pub t_offset: f64,
}

fn u16_le(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

impl VelodynePacket {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PACKET_LEN {
            return Err(VelodyneError::Length { expected: PACKET_LEN, got: bytes.len() });
        }
        let return_mode = bytes[RETURN_MODE_OFFSET];
        match return_mode {
            RETURN_STRONGEST | RETURN_LAST => {}
            RETURN_DUAL => return Err(VelodyneError::DualReturn),
            other => return Err(VelodyneError::ReturnMode(other)),
        }
        let mut blocks = [RawBlock { azimuth: 0, returns: [RawReturn::default(); RECORDS_PER_BLOCK] }; BLOCKS];
        for (i, block) in blocks.iter_mut().enumerate() {
            let base = i * BLOCK_LEN;
            let flag = u16::from_be_bytes([bytes[base], bytes[base + 1]]);
            if flag != BLOCK_FLAG {
                return Err(VelodyneError::BlockFlag { block: i, found: flag });
            }
            block.azimuth = u16_le(bytes, base + 2);
            if block.azimuth >= 36000 {
                return Err(VelodyneError::Azimuth { block: i, value: block.azimuth });
            }
            for (j, ret) in block.returns.iter_mut().enumerate() {
                let at = base + 4 + j * RECORD_LEN;
                *ret = RawReturn { distance: u16_le(bytes, at), reflectivity: bytes[at + 2] };
            }
        }
        let ts = &bytes[TIMESTAMP_OFFSET..TIMESTAMP_OFFSET + 4];
        Ok(VelodynePacket {
            blocks,
            timestamp_us: u32::from_le_bytes([ts[0], ts[1], ts[2], ts[3]]),
            return_mode,
            product_id: bytes[PRODUCT_ID_OFFSET],
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PACKET_LEN);
        for block in &self.blocks {
            out.extend_from_slice(&BLOCK_FLAG.to_be_bytes());
            out.extend_from_slice(&block.azimuth.to_le_bytes());
            for r in &block.returns {
                out.extend_from_slice(&r.distance.to_le_bytes());
                out.push(r.reflectivity);
            }
        }
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        out.push(self.return_mode);
        out.push(self.product_id);
        out
    }

    /// Block azimuths in degrees.
    pub fn block_azimuths(&self) -> [f64; BLOCKS] {
        self.blocks.map(|b| b.azimuth as f64 * AZIMUTH_UNIT_DEG)
    }

    /// Returns of block `i`, with non-returns dropped.
    pub fn block_points(&self, i: usize) -> Vec<PolarPoint> {
        let az = self.block_azimuths();
        // The last block has no successor; it reuses the spacing of the previous pair.
        let (cur, next) = if i + 1 < BLOCKS {
            (az[i], az[i + 1])
        } else {
            let step = azimuth_gap(az[BLOCKS - 2], az[BLOCKS - 1]);
            (az[i], (az[i] + step) % 360.0)
        };
        let mut points = Vec::with_capacity(RECORDS_PER_BLOCK);
        for (j, ret) in self.blocks[i].returns.iter().enumerate() {
            if ret.distance == 0 {
                continue;
            }
            let (seq, ch) = (j / LASERS, j % LASERS);
            points.push(PolarPoint {
                r: ret.distance as f64 * DISTANCE_UNIT_M,
                azimuth: interpolate_azimuth(cur, next, seq, ch),
                elevation: ELEVATION_DEG[ch],
                reflectivity: ret.reflectivity,
                laser_id: ch as u8,
                t_offset: firing_offset_us(i, seq, ch),
            });
        }
        points
    }

    pub fn points(&self) -> Vec<PolarPoint> {
        (0..BLOCKS).flat_map(|i| self.block_points(i)).collect()
    }
}

/// Decode one UDP payload into its returns.
pub fn decode_packet(bytes: &[u8]) -> Result<Vec<PolarPoint>> {
    Ok(VelodynePacket::parse(bytes)?.points())
}

/// One return to encode: range in meters and reflectivity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Return {
    pub distance_m: f64,
    pub reflectivity: u8,
}

/// Build a single-return packet. Azimuths are rounded to 0.01° and distances to 2 mm.
pub fn encode_packet(
    returns: &[[Return; RECORDS_PER_BLOCK]; BLOCKS],
    azimuths_deg: &[f64; BLOCKS],
    timestamp_us: u32,
) -> Result<Vec<u8>> {
    let mut blocks = [RawBlock { azimuth: 0, returns: [RawReturn::default(); RECORDS_PER_BLOCK] }; BLOCKS];
    for (i, block) in blocks.iter_mut().enumerate() {
        let az = (azimuths_deg[i] / AZIMUTH_UNIT_DEG).round();
        if !(0.0..36000.0).contains(&az) {
            return Err(VelodyneError::Azimuth { block: i, value: az.clamp(0.0, 65535.0) as u16 });
        }
        block.azimuth = az as u16;
        for (raw, ret) in block.returns.iter_mut().zip(&returns[i]) {
            let d = (ret.distance_m / DISTANCE_UNIT_M).round();
            if !(0.0..=u16::MAX as f64).contains(&d) {
                return Err(VelodyneError::Distance(ret.distance_m));
            }
            *raw = RawReturn { distance: d as u16, reflectivity: ret.reflectivity };
        }
    }
    let packet = VelodynePacket { blocks, timestamp_us, return_mode: RETURN_STRONGEST, product_id: PRODUCT_VLP16 };
    Ok(packet.to_bytes())
}

/// Forward angular distance from `a` to `b` in degrees, across 360 if needed.
pub fn azimuth_gap(a: f64, b: f64) -> f64 {
    let d = b - a;
    if d < 0.0 {
        d + 360.0
    } else {
        d
    }
}

/// Time of firing `(sequence, channel)` in block `block`, µs after the packet timestamp.
pub fn firing_offset_us(block: usize, sequence: usize, channel: usize) -> f64 {
    block as f64 * BLOCK_PERIOD_US + sequence as f64 * SEQUENCE_PERIOD_US + channel as f64 * FIRING_PERIOD_US
}

/// Azimuth of a firing, interpolated between its block's azimuth and the next.
pub fn interpolate_azimuth(block_azimuth: f64, next_block_azimuth: f64, sequence: usize, channel: usize) -> f64 {
    let frac = (sequence as f64 * SEQUENCE_PERIOD_US + channel as f64 * FIRING_PERIOD_US) / BLOCK_PERIOD_US;
    let a = block_azimuth + azimuth_gap(block_azimuth, next_block_azimuth) * frac;
    if a >= 360.0 {
        a - 360.0
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate_azimuth(10.0, 10.4, 0, 0), 10.0);
        assert!((interpolate_azimuth(10.0, 10.4, 1, 15) - 10.325).abs() < 1e-12);
        for seq in 0..2 {
            for ch in 0..16 {
                let a = interpolate_azimuth(359.8, 0.2, seq, ch);
                assert!((0.0..360.0).contains(&a));
            }
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert_eq!(
            decode_packet(&[0u8; 1205]),
            Err(VelodyneError::Length { expected: 1206, got: 1205 })
        );
    }

    #[test]
    fn top_azimuth_encodes_as_35999() {
        let bytes = encode_packet(&[[Return::default(); 32]; 12], &[359.99; 12], 0).unwrap();
        assert_eq!(u16::from_le_bytes([bytes[2], bytes[3]]), 35999);
        assert!(decode_packet(&bytes).unwrap().is_empty());
    }

    #[test]
    fn dual_return_is_rejected() {
        let mut bytes = encode_packet(&[[Return::default(); 32]; 12], &[0.0; 12], 0).unwrap();
        bytes[RETURN_MODE_OFFSET] = RETURN_DUAL;
        assert_eq!(decode_packet(&bytes), Err(VelodyneError::DualReturn));
    }

    #[test]
    fn bad_flag_is_rejected() {
        let mut bytes = encode_packet(&[[Return::default(); 32]; 12], &[0.0; 12], 0).unwrap();
        bytes[3 * BLOCK_LEN] = 0;
        assert!(matches!(decode_packet(&bytes), Err(VelodyneError::BlockFlag { block: 3, .. })));
    }
}
