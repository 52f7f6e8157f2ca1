use crate::cloud::PolarFrame;
use crate::error::Result;
use crate::packet::{firing_offset_us, wire::BLOCKS, VelodynePacket};

/// Splits a packet stream into revolutions at the azimuth wraparound.
///
/// A frame ends at the first block whose azimuth is smaller than the previous
/// block's. [`FrameAssembler::finish`] flushes the revolution in progress.
#[derive(Debug, Default)]
pub struct FrameAssembler {
    current: PolarFrame,
    started: bool,
    last_block_azimuth: Option<u16>,
    last_timestamp: Option<u64>,
    next_index: u64,
    out_of_order: u64,
    decode_errors: u64,
    decoded_points: u64,
}

impl FrameAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Packets dropped because their timestamp went backwards.
    pub fn out_of_order(&self) -> u64 {
        self.out_of_order
    }

    /// Packets dropped because they failed to decode.
    pub fn decode_errors(&self) -> u64 {
        self.decode_errors
    }

    /// Returns decoded so far, over all frames.
    pub fn decoded_points(&self) -> u64 {
        self.decoded_points
    }

    /// Feed one datagram received at `timestamp_us`. Returns a frame when this
    /// packet completes one. Malformed packets are counted, logged and skipped.
    pub fn push(&mut self, timestamp_us: u64, payload: &[u8]) -> Option<PolarFrame> {
        match self.try_push(timestamp_us, payload) {
            Ok(frame) => frame,
            Err(e) => {
                self.decode_errors += 1;
                log::warn!("dropping packet at {timestamp_us} us: {e}");
                None
            }
        }
    }

    /// Like [`push`](Self::push), but reports decode failures to the caller.
    pub fn try_push(&mut self, timestamp_us: u64, payload: &[u8]) -> Result<Option<PolarFrame>> {
        let packet = VelodynePacket::parse(payload)?;
        if self.last_timestamp.is_some_and(|t| timestamp_us < t) {
            self.out_of_order += 1;
            log::debug!("out-of-order packet at {timestamp_us} us dropped");
            return Ok(None);
        }
        self.last_timestamp = Some(timestamp_us);

        let mut done = None;
        for i in 0..BLOCKS {
            let az = packet.blocks[i].azimuth;
            if self.last_block_azimuth.is_some_and(|prev| az < prev) {
                done = Some(self.take_frame());
            }
            self.last_block_azimuth = Some(az);
            let points = packet.block_points(i);
            if !self.started {
                self.started = true;
                self.current.start_timestamp_us = timestamp_us + firing_offset_us(i, 0, 0) as u64;
            }
            let shift = timestamp_us as f64 - self.current.start_timestamp_us as f64;
            self.decoded_points += points.len() as u64;
            self.current.points.extend(points.into_iter().map(|mut p| {
                p.t_offset += shift;
                p
            }));
        }
        Ok(done)
    }

    fn take_frame(&mut self) -> PolarFrame {
        self.started = false;
        let mut frame = std::mem::take(&mut self.current);
        frame.index = self.next_index;
        self.next_index += 1;
        frame
    }

    /// Flush the revolution in progress, if it holds any returns.
    pub fn finish(&mut self) -> Option<PolarFrame> {
        self.last_block_azimuth = None;
        if self.current.points.is_empty() {
            self.started = false;
            return None;
        }
        Some(self.take_frame())
    }
}
