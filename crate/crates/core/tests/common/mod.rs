//! Naive reference managers written without the library's data structures,
//! used as oracles for the replay engine.

#![allow(dead_code)]

use std::collections::HashMap;

use dmmsim::trace::{Trace, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fit {
    First,
    Best,
    Exact,
}

/// One free list over `(0, hi]` holding blocks in list order.
#[derive(Debug, Clone)]
pub struct ListModel {
    pub header: u64,
    pub fit: Fit,
    pub lifo: bool,
    pub split: bool,
    pub coalesce: bool,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Outcome {
    /// `(position, size)` handed out for each malloc, in order.
    pub chosen: Vec<(u64, u64)>,
    pub hwm: u64,
    pub mallocs: u64,
    pub frees: u64,
    pub invalid_frees: u64,
}

impl ListModel {
    pub fn run(&self, trace: &Trace) -> Outcome {
        let h = self.header;
        let mut free: Vec<(u64, u64)> = Vec::new();
        let mut live: HashMap<u32, Vec<(u64, u64)>> = HashMap::new();
        let mut top = 0u64;
        let mut out = Outcome::default();
        let push = |free: &mut Vec<(u64, u64)>, b: (u64, u64)| {
            if self.lifo {
                free.insert(0, b)
            } else {
                free.push(b)
            }
        };
        for ev in trace.events() {
            match *ev {
                TraceEvent::Malloc { id, size } => {
                    let mut pick: Option<usize> = None;
                    for (i, &(_, s)) in free.iter().enumerate() {
                        let p = s - h;
                        let ok = match self.fit {
                            Fit::First | Fit::Best => p >= size,
                            Fit::Exact => p == size,
                        };
                        if !ok {
                            continue;
                        }
                        match (self.fit, pick) {
                            (Fit::Best, Some(j)) if free[j].1 <= s => {}
                            (Fit::Best, _) => pick = Some(i),
                            (_, None) => pick = Some(i),
                            _ => {}
                        }
                    }
                    let block = match pick {
                        Some(i) => {
                            let (pos, s) = free.remove(i);
                            let keep = size + h;
                            if self.split && s - h > size && s - keep > h {
                                push(&mut free, (pos + keep, s - keep));
                                (pos, keep)
                            } else {
                                (pos, s)
                            }
                        }
                        None => {
                            let b = (top, size + h);
                            top += size + h;
                            b
                        }
                    };
                    out.chosen.push(block);
                    out.mallocs += 1;
                    live.entry(id.0).or_default().push(block);
                }
                TraceEvent::Free { id } => {
                    let Some(mut b) = live.get_mut(&id.0).and_then(Vec::pop) else {
                        out.invalid_frees += 1;
                        continue;
                    };
                    out.frees += 1;
                    if self.coalesce {
                        loop {
                            if let Some(i) = free.iter().position(|f| f.0 == b.0 + b.1) {
                                let n = free.remove(i);
                                b.1 += n.1;
                            } else if let Some(i) = free.iter().position(|f| f.0 + f.1 == b.0) {
                                let n = free.remove(i);
                                b = (n.0, n.1 + b.1);
                            } else {
                                break;
                            }
                        }
                    }
                    push(&mut free, b);
                }
            }
        }
        out.hwm = top;
        out
    }
}

/// Power-of-two classes, one LIFO stack per class, never split or merged.
pub fn kingsley_model(trace: &Trace, header: u64) -> Outcome {
    let mut stacks: HashMap<u64, Vec<u64>> = HashMap::new();
    let mut live: HashMap<u32, Vec<(u64, u64)>> = HashMap::new();
    let mut top = 0;
    let mut out = Outcome::default();
    for ev in trace.events() {
        match *ev {
            TraceEvent::Malloc { id, size } => {
                let class = size.next_power_of_two();
                let pos = match stacks.get_mut(&class).and_then(Vec::pop) {
                    Some(p) => p,
                    None => {
                        let p = top;
                        top += class + header;
                        p
                    }
                };
                out.chosen.push((pos, class + header));
                out.mallocs += 1;
                live.entry(id.0).or_default().push((pos, class));
            }
            TraceEvent::Free { id } => match live.get_mut(&id.0).and_then(Vec::pop) {
                Some((pos, class)) => {
                    stacks.entry(class).or_default().push(pos);
                    out.frees += 1;
                }
                None => out.invalid_frees += 1,
            },
        }
    }
    out.hwm = top;
    out
}
