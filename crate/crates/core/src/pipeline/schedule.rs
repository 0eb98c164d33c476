use std::fmt::Write as _;

use num_rational::Ratio;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Forward(usize),
    Backward(usize),
    Bubble,
}

/// Uniform-slot 1F1B timetable: `slots[stage][time]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub p: usize,
    pub m: usize,
    pub slots: Vec<Vec<Slot>>,
}

/// Exact `(p - 1) / (m + p - 1)`.
pub fn bubble_ratio(p: usize, m: usize) -> Ratio<u64> {
    Ratio::new((p as u64).saturating_sub(1), (m + p).saturating_sub(1).max(1) as u64)
}

fn stage_program(s: usize, p: usize, m: usize) -> Vec<Slot> {
    let warmup = (p - s - 1).min(m);
    let mut ops: Vec<Slot> = (0..warmup).map(Slot::Forward).collect();
    for i in 0..m - warmup {
        ops.push(Slot::Forward(warmup + i));
        ops.push(Slot::Backward(i));
    }
    ops.extend((m - warmup..m).map(Slot::Backward));
    ops
}

pub fn build_1f1b_schedule(p: usize, m: usize) -> Result<Schedule> {
    if p < 1 || m < 1 {
        return Err(Error::InvalidConfig(format!("1F1B needs p >= 1 and m >= 1, got p={p}, m={m}")));
    }
    let programs: Vec<Vec<Slot>> = (0..p).map(|s| stage_program(s, p, m)).collect();
    let mut next = vec![0usize; p];
    // completion time of each (stage, mb) forward / backward
    let mut fwd_done = vec![vec![usize::MAX; m]; p];
    let mut bwd_done = vec![vec![usize::MAX; m]; p];
    let mut slots = vec![Vec::new(); p];
    let mut t = 0usize;
    while next.iter().zip(&programs).any(|(n, prog)| *n < prog.len()) {
        for s in 0..p {
            let op = programs[s].get(next[s]).copied();
            let ready = match op {
                Some(Slot::Forward(mb)) => s == 0 || fwd_done[s - 1][mb] < t,
                Some(Slot::Backward(mb)) => {
                    fwd_done[s][mb] < t && (s + 1 == p || bwd_done[s + 1][mb] < t)
                }
                _ => false,
            };
            if ready {
                match op {
                    Some(Slot::Forward(mb)) => fwd_done[s][mb] = t,
                    Some(Slot::Backward(mb)) => bwd_done[s][mb] = t,
                    _ => unreachable!(),
                }
                slots[s].push(op.expect("ready implies op"));
                next[s] += 1;
            } else {
                slots[s].push(Slot::Bubble);
            }
        }
        t += 1;
    }
    Ok(Schedule { p, m, slots })
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.slots.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self, stage: usize, time: usize) -> Slot {
        self.slots[stage][time]
    }

    pub fn bubble_count(&self) -> usize {
        self.slots.iter().flatten().filter(|s| **s == Slot::Bubble).count()
    }

    /// Fraction of Bubble slots over the whole grid.
    pub fn bubble_fraction(&self) -> Ratio<u64> {
        Ratio::new(self.bubble_count() as u64, (self.p * self.len()) as u64)
    }

    /// Time of the stage's last backward; its update follows.
    pub fn finish_time(&self, stage: usize) -> usize {
        self.slots[stage]
            .iter()
            .rposition(|s| *s != Slot::Bubble)
            .expect("every stage runs m >= 1 backwards")
    }

    /// Bubble slots of one stage.
    pub fn bubbles_of(&self, stage: usize) -> usize {
        self.slots[stage].iter().filter(|s| **s == Slot::Bubble).count()
    }

    /// Checks uniqueness, dependency order and the in-flight bound.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (p, m) = (self.p, self.m);
        let mut fwd = vec![vec![None; m]; p];
        let mut bwd = vec![vec![None; m]; p];
        for s in 0..p {
            let mut in_flight = 0usize;
            for (t, slot) in self.slots[s].iter().enumerate() {
                match *slot {
                    Slot::Forward(mb) => {
                        if mb >= m || fwd[s][mb].replace(t).is_some() {
                            return bad(format!("stage {s}: duplicate or unknown F{mb}"));
                        }
                        in_flight += 1;
                        if in_flight > p - s {
                            return bad(format!("stage {s}: {in_flight} micro-batches in flight"));
                        }
                    }
                    Slot::Backward(mb) => {
                        if mb >= m || bwd[s][mb].replace(t).is_some() {
                            return bad(format!("stage {s}: duplicate or unknown B{mb}"));
                        }
                        in_flight = in_flight.saturating_sub(1);
                    }
                    Slot::Bubble => {}
                }
            }
        }
        for s in 0..p {
            for mb in 0..m {
                let (Some(f), Some(b)) = (fwd[s][mb], bwd[s][mb]) else {
                    return bad(format!("stage {s}: micro-batch {mb} missing"));
                };
                if b <= f {
                    return bad(format!("stage {s}: B{mb} before F{mb}"));
                }
                if s > 0 && fwd[s - 1][mb].is_some_and(|t| t >= f) {
                    return bad(format!("F{mb} at stage {s} precedes stage {}", s - 1));
                }
                if s + 1 < p && bwd[s + 1][mb].is_some_and(|t| t >= b) {
                    return bad(format!("B{mb} at stage {s} precedes stage {}", s + 1));
                }
            }
        }
        Ok(())
    }

    /// One row per stage, one column per slot, e.g. `F0 F1 .. B0`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "      ");
        for t in 0..self.len() {
            let _ = write!(out, "{t:>4}");
        }
        out.push('\n');
        for (s, row) in self.slots.iter().enumerate() {
            let _ = write!(out, "s{s:<4} ");
            for slot in row {
                let cell = match slot {
                    Slot::Forward(mb) => format!("F{mb}"),
                    Slot::Backward(mb) => format!("B{mb}"),
                    Slot::Bubble => ".".to_string(),
                };
                let _ = write!(out, "{cell:>4}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four() {
        let s = build_1f1b_schedule(4, 4).unwrap();
        s.validate().unwrap();
        assert_eq!(s.len(), 14);
        assert_eq!(
            &s.slots[0][..4],
            &[Slot::Forward(0), Slot::Forward(1), Slot::Forward(2), Slot::Forward(3)]
        );
        let last: Vec<Slot> = s.slots[3].iter().copied().filter(|x| *x != Slot::Bubble).collect();
        let interior = &s.slots[3][3..11];
        assert!(interior.iter().all(|x| *x != Slot::Bubble));
        assert_eq!(last[0], Slot::Forward(0));
        assert_eq!(last[1], Slot::Backward(0));
        assert_eq!(bubble_ratio(4, 4), Ratio::new(3, 7));
        assert_eq!(s.bubble_fraction(), Ratio::new(3, 7));
    }

    #[test]
    fn single_stage_has_no_bubbles() {
        for m in 1..6 {
            let s = build_1f1b_schedule(1, m).unwrap();
            assert_eq!(s.bubble_count(), 0);
            assert_eq!(bubble_ratio(1, m), Ratio::new(0, 1));
        }
    }

    #[test]
    fn two_stages_one_mb() {
        let s = build_1f1b_schedule(2, 1).unwrap();
        assert_eq!(s.bubbles_of(0), 2);
        assert_eq!(s.bubbles_of(1), 2);
        assert_eq!(s.bubble_fraction(), bubble_ratio(2, 1));
    }

    #[test]
    fn finish_order() {
        let s = build_1f1b_schedule(4, 3).unwrap();
        for st in 1..4 {
            assert!(s.finish_time(st) < s.finish_time(st - 1));
        }
        assert_eq!(s.finish_time(0), s.len() - 1);
    }

    #[test]
    fn zero_rejected() {
        assert!(build_1f1b_schedule(0, 3).is_err());
        assert!(build_1f1b_schedule(3, 0).is_err());
    }
}
