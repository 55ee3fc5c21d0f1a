// SPDX-License-Identifier: Apache-2.0

//! Bounded hand-off between the listener and the extractor.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError, TrySendError};
use std::sync::Arc;

use crate::packet::CapturedPacket;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OfferOutcome {
    Accepted,
    Dropped,
}

#[derive(Debug, Default)]
struct Counts {
    offered: AtomicU64,
    dropped: AtomicU64,
    delivered: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BufferCounts {
    pub offered: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// Producer half. `offer` never blocks: a full buffer drops the newest packet.
#[derive(Debug, Clone)]
pub struct BufferWriter {
    tx: SyncSender<CapturedPacket>,
    counts: Arc<Counts>,
}

/// Consumer half.
#[derive(Debug)]
pub struct BufferReader {
    rx: Receiver<CapturedPacket>,
    counts: Arc<Counts>,
}

fn snapshot(c: &Counts) -> BufferCounts {
    BufferCounts {
        offered: c.offered.load(Ordering::Acquire),
        dropped: c.dropped.load(Ordering::Acquire),
        delivered: c.delivered.load(Ordering::Acquire),
    }
}

impl BufferWriter {
    pub fn offer(&self, p: CapturedPacket) -> OfferOutcome {
        self.counts.offered.fetch_add(1, Ordering::AcqRel);
        match self.tx.try_send(p) {
            Ok(()) => OfferOutcome::Accepted,
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.counts.dropped.fetch_add(1, Ordering::AcqRel);
                OfferOutcome::Dropped
            }
        }
    }

    pub fn counts(&self) -> BufferCounts {
        snapshot(&self.counts)
    }
}

impl BufferReader {
    /// Blocks until a packet arrives; `None` once every writer is gone and the
    /// buffer is empty.
    pub fn take(&self) -> Option<CapturedPacket> {
        let p = self.rx.recv().ok()?;
        self.counts.delivered.fetch_add(1, Ordering::AcqRel);
        Some(p)
    }

    pub fn try_take(&self) -> Option<CapturedPacket> {
        match self.rx.try_recv() {
            Ok(p) => {
                self.counts.delivered.fetch_add(1, Ordering::AcqRel);
                Some(p)
            }
            Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => None,
        }
    }

    pub fn counts(&self) -> BufferCounts {
        snapshot(&self.counts)
    }
}

/// Bounded FIFO of captured packets with drop-newest overflow.
#[derive(Debug)]
pub struct PacketBuffer {
    writer: BufferWriter,
    reader: BufferReader,
    capacity: usize,
}

impl PacketBuffer {
    /// Panics if `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "packet buffer capacity must be at least 1");
        let (tx, rx) = mpsc::sync_channel(capacity);
        let counts = Arc::new(Counts::default());
        PacketBuffer {
            writer: BufferWriter {
                tx,
                counts: counts.clone(),
            },
            reader: BufferReader { rx, counts },
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn offer(&self, p: CapturedPacket) -> OfferOutcome {
        self.writer.offer(p)
    }

    pub fn try_take(&self) -> Option<CapturedPacket> {
        self.reader.try_take()
    }

    pub fn dropped_count(&self) -> u64 {
        self.counts().dropped
    }

    pub fn counts(&self) -> BufferCounts {
        self.writer.counts()
    }

    pub fn split(self) -> (BufferWriter, BufferReader) {
        (self.writer, self.reader)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_tcp_frame, FiveTuple, MacAddr, TcpFlags, IPPROTO_TCP};

    fn pkt(ts: u64) -> CapturedPacket {
        let f = FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: [10, 0, 0, 1].into(),
            dst_ip: [10, 0, 0, 2].into(),
            src_port: 1,
            dst_port: 80,
        };
        build_tcp_frame(ts, MacAddr::ZERO, MacAddr::ZERO, &f, 0, 0, TcpFlags::ACK, 0, &[])
    }

    #[test]
    fn capacity_one_drops_second() {
        let b = PacketBuffer::new(1);
        assert_eq!(b.offer(pkt(1)), OfferOutcome::Accepted);
        assert_eq!(b.offer(pkt(2)), OfferOutcome::Dropped);
        assert_eq!(b.dropped_count(), 1);
        // Drop-newest: the first packet survives.
        assert_eq!(b.try_take().unwrap().timestamp_us, 1);
        assert!(b.try_take().is_none());
    }

    #[test]
    fn interleaved_offers_never_drop() {
        let b = PacketBuffer::new(1);
        for i in 0..1000 {
            assert_eq!(b.offer(pkt(i)), OfferOutcome::Accepted);
            assert_eq!(b.try_take().unwrap().timestamp_us, i);
        }
        assert_eq!(b.dropped_count(), 0);
    }

    #[test]
    fn burst_with_slow_consumer() {
        let (w, r) = PacketBuffer::new(1024).split();
        let mut accepted = 0u64;
        let consumer = std::thread::spawn(move || {
            let mut n = 0u64;
            while r.take().is_some() {
                n += 1;
                if n.is_multiple_of(64) {
                    std::thread::sleep(std::time::Duration::from_millis(1));
                }
            }
            (n, r.counts())
        });
        for i in 0..10_000 {
            if w.offer(pkt(i)) == OfferOutcome::Accepted {
                accepted += 1;
            }
        }
        let before_close = w.counts();
        drop(w);
        let (delivered, counts) = consumer.join().unwrap();
        assert_eq!(before_close.offered, 10_000);
        assert_eq!(counts.dropped, 10_000 - accepted);
        assert_eq!(delivered, accepted);
        assert_eq!(counts.dropped + counts.delivered, counts.offered);
    }
}
