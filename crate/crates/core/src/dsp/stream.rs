use std::collections::VecDeque;

/// Turns an arbitrary-chunked sample stream into hop-spaced analysis frames.
///
/// A frame is released as soon as its last sample arrives, so the framer adds
/// no latency beyond the window itself.
#[derive(Debug, Clone)]
pub struct Framer {
    win_len: usize,
    hop: usize,
    backlog: VecDeque<f64>,
}

impl Framer {
    pub fn new(win_len: usize, hop: usize) -> Self {
        Self {
            win_len,
            hop,
            backlog: VecDeque::with_capacity(win_len + hop),
        }
    }

    pub fn push(&mut self, samples: &[f64]) {
        self.backlog.extend(samples);
    }

    /// Next complete frame, if one is buffered.
    pub fn pop_frame(&mut self) -> Option<Vec<f64>> {
        if self.backlog.len() < self.win_len {
            return None;
        }
        let frame: Vec<f64> = self.backlog.iter().take(self.win_len).copied().collect();
        self.backlog.drain(..self.hop);
        Some(frame)
    }

    pub fn buffered(&self) -> usize {
        self.backlog.len()
    }
}

/// Overlap-add accumulator for synthesized frames.
#[derive(Debug, Clone)]
pub struct OverlapAdd {
    hop: usize,
    acc: Vec<f64>,
}

impl OverlapAdd {
    pub fn new(win_len: usize, hop: usize) -> Self {
        Self {
            hop,
            acc: vec![0.0; win_len],
        }
    }

    /// Adds one windowed frame and returns the `hop` samples that no later
    /// frame can touch.
    pub fn push(&mut self, segment: &[f64]) -> Vec<f64> {
        for (a, s) in self.acc.iter_mut().zip(segment) {
            *a += s;
        }
        let done: Vec<f64> = self.acc[..self.hop].to_vec();
        self.acc.copy_within(self.hop.., 0);
        let n = self.acc.len();
        self.acc[n - self.hop..].fill(0.0);
        done
    }

    /// Remaining partially overlapped samples after the last frame.
    pub fn flush(&mut self) -> Vec<f64> {
        let n = self.acc.len();
        let tail = self.acc[..n - self.hop].to_vec();
        self.acc.fill(0.0);
        tail
    }
}
