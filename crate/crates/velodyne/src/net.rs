//! UDP ingestion and the queue between the listener and the frame consumer.

use std::collections::VecDeque;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::assembler::FrameAssembler;
use crate::capture::Record;
use crate::cloud::PolarFrame;
use crate::error::{Result, VelodyneError};
use crate::packet::wire::{PACKET_LEN, DEFAULT_PORT};

/// Frames buffered between the assembler and the consumer.
pub const DEFAULT_FRAME_QUEUE: usize = 4;
/// Packets buffered between the socket and the assembler: four revolutions.
pub const DEFAULT_PACKET_QUEUE: usize = 4 * 76;

/// Bounded FIFO that discards its oldest entry instead of blocking the producer.
pub struct DropOldestQueue<T> {
    state: Mutex<QueueState<T>>,
    ready: Condvar,
    capacity: usize,
}

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Pop<T> {
    Item(T),
    Timeout,
    Closed,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        DropOldestQueue {
            state: Mutex::new(QueueState { items: VecDeque::new(), closed: false, dropped: 0 }),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Append `item`. Returns `false` if the queue is closed and the item was discarded.
    pub fn push(&self, item: T) -> bool {
        let mut s = self.state.lock().unwrap();
        if s.closed {
            return false;
        }
        if s.items.len() == self.capacity {
            s.items.pop_front();
            s.dropped += 1;
        }
        s.items.push_back(item);
        self.ready.notify_one();
        true
    }

    /// Wait up to `timeout` for an item. Remaining items are still delivered after close.
    pub fn pop_timeout(&self, timeout: Duration) -> Pop<T> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(item) = s.items.pop_front() {
                return Pop::Item(item);
            }
            if s.closed {
                return Pop::Closed;
            }
            let now = Instant::now();
            if now >= deadline {
                return Pop::Timeout;
            }
            s = self.ready.wait_timeout(s, deadline - now).unwrap().0;
        }
    }

    /// Block until an item arrives or the queue is closed and drained.
    pub fn pop(&self) -> Option<T> {
        loop {
            match self.pop_timeout(Duration::from_secs(3600)) {
                Pop::Item(t) => return Some(t),
                Pop::Closed => return None,
                Pop::Timeout => {}
            }
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items discarded to make room.
    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

/// A bound UDP socket with a receiver thread feeding a packet queue.
pub struct Listener {
    queue: Arc<DropOldestQueue<Record>>,
    malformed: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    local: SocketAddr,
    thread: Option<JoinHandle<()>>,
}

/// Listen on all interfaces at `port` (use [`DEFAULT_PORT`] for the sensor default).
pub fn listen(port: u16) -> Result<Listener> {
    listen_on(("0.0.0.0", port), DEFAULT_PACKET_QUEUE)
}

pub fn listen_default() -> Result<Listener> {
    listen(DEFAULT_PORT)
}

pub fn listen_on<A: ToSocketAddrs>(addr: A, queue_capacity: usize) -> Result<Listener> {
    let socket = UdpSocket::bind(addr)?;
    socket.set_read_timeout(Some(Duration::from_millis(20)))?;
    let local = socket.local_addr()?;
    let queue = Arc::new(DropOldestQueue::new(queue_capacity));
    let malformed = Arc::new(AtomicU64::new(0));
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let (queue, malformed, stop) = (queue.clone(), malformed.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut buf = [0u8; 2048];
            while !stop.load(Ordering::Relaxed) {
                match socket.recv_from(&mut buf) {
                    Ok((PACKET_LEN, _)) => {
                        queue.push(Record { timestamp_us: now_us(), payload: buf[..PACKET_LEN].to_vec() });
                    }
                    Ok((len, from)) => {
                        malformed.fetch_add(1, Ordering::Relaxed);
                        log::debug!("dropped {len}-byte datagram from {from}");
                    }
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                    Err(e) => {
                        log::error!("UDP receive failed: {e}");
                        break;
                    }
                }
            }
            queue.close();
        })
    };
    Ok(Listener { queue, malformed, stop, local, thread: Some(thread) })
}

impl Listener {
    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    /// Next packet, `Ok(None)` on timeout, [`VelodyneError::Closed`] once closed and drained.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Record>> {
        match self.queue.pop_timeout(timeout) {
            Pop::Item(r) => Ok(Some(r)),
            Pop::Timeout => Ok(None),
            Pop::Closed => Err(VelodyneError::Closed),
        }
    }

    /// Datagrams of the wrong size.
    pub fn malformed(&self) -> u64 {
        self.malformed.load(Ordering::Relaxed)
    }

    /// Packets discarded because the consumer fell behind.
    pub fn overflowed(&self) -> u64 {
        self.queue.dropped()
    }

    /// Stop receiving. Packets already queued can still be read.
    pub fn close(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.close();
    }
}

/// Consumer stage: assembles packets from a [`Listener`] into frames on a
/// bounded drop-oldest frame queue.
pub struct FramePipeline {
    frames: Arc<DropOldestQueue<PolarFrame>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Listener>>,
}

impl FramePipeline {
    pub fn spawn(listener: Listener, frame_capacity: usize) -> Self {
        let frames = Arc::new(DropOldestQueue::new(frame_capacity));
        let out = frames.clone();
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let mut listener = listener;
        let thread = std::thread::spawn(move || {
            let mut asm = FrameAssembler::new();
            loop {
                if stop_flag.load(Ordering::Relaxed) {
                    listener.close();
                }
                match listener.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(rec)) => {
                        if let Some(f) = asm.push(rec.timestamp_us, &rec.payload) {
                            out.push(f);
                        }
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
            if let Some(f) = asm.finish() {
                out.push(f);
            }
            out.close();
            listener
        });
        FramePipeline { frames, stop, thread: Some(thread) }
    }

    pub fn frames(&self) -> &DropOldestQueue<PolarFrame> {
        &self.frames
    }

    /// Close the listener, drain queued packets and flush the last frame.
    /// Returns the closed listener for its counters.
    pub fn stop(&mut self) -> Option<Listener> {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().and_then(|t| t.join().ok())
    }
}

impl Drop for FramePipeline {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Send records to `target`, optionally spacing them by their recorded timestamps.
pub fn replay<A: ToSocketAddrs>(records: &[Record], target: A, preserve_timing: bool) -> Result<usize> {
    let socket = UdpSocket::bind(("127.0.0.1", 0))?;
    socket.connect(target)?;
    let start = Instant::now();
    let t0 = records.first().map_or(0, |r| r.timestamp_us);
    for r in records {
        if preserve_timing {
            let due = Duration::from_micros(r.timestamp_us.saturating_sub(t0));
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        socket.send(&r.payload)?;
    }
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_drops_oldest() {
        let q = DropOldestQueue::new(2);
        for i in 0..5 {
            q.push(i);
        }
        assert_eq!(q.dropped(), 3);
        q.close();
        assert!(!q.push(9));
        assert_eq!(q.pop(), Some(3));
        assert_eq!(q.pop(), Some(4));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn empty_queue_times_out() {
        let q: DropOldestQueue<u8> = DropOldestQueue::new(1);
        assert_eq!(q.pop_timeout(Duration::from_millis(5)), Pop::Timeout);
    }
}
