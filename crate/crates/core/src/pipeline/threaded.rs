//! One OS thread per worker, talking over `mpsc` channels.
//!
//! Each thread walks its own schedule row; a receive blocks until the
//! neighbour has produced the message, so the dependency order of the grid is
//! enforced by the channels themselves. Stage updates run on the caller's
//! thread after the join, in finish-time order, which leaves exactly the state
//! the event loop produces.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;

use crate::cluster::{Direction, FailurePhase, Message, WorkerId};
use crate::error::{Error, Result};
use crate::resilience::LogRecord;
use crate::Tensor;

use super::engine::{backward_op, forward_op, Engine, IterationOutcome, Worker};
use super::schedule::Slot;

struct Links {
    tx: BTreeMap<WorkerId, Sender<Message>>,
    rx: BTreeMap<WorkerId, Receiver<Message>>,
}

fn recv_checked(rx: &Receiver<Message>, i: u64, mb: usize, dir: Direction) -> Result<Tensor> {
    let msg = rx
        .recv()
        .map_err(|_| Error::Unrecoverable("peer thread exited before sending".into()))?;
    if (msg.iteration, msg.mb, msg.direction) != (i, mb, dir) {
        return Err(Error::Unrecoverable(format!(
            "out-of-order message ({}, {}, {:?})",
            msg.iteration, msg.mb, msg.direction
        )));
    }
    Ok(msg.payload)
}

impl Engine {
    /// Same contract as [`Engine::run_iteration`], executed with real threads.
    /// Only mid-iteration stop points are supported here.
    pub fn run_iteration_threaded(&mut self) -> Result<IterationOutcome> {
        let i = self.next_iteration;
        let firing: Vec<_> = self.scheduled.iter().copied().filter(|e| e.iteration == i).collect();
        if firing.iter().any(|e| !matches!(e.phase, FailurePhase::MidIteration(_))) {
            return Err(Error::InvalidInjection(
                "threaded mode stops only at mid-iteration points".into(),
            ));
        }
        let stop = firing
            .iter()
            .filter_map(|e| match e.phase {
                FailurePhase::MidIteration(s) => Some(s),
                _ => None,
            })
            .min()
            .unwrap_or(self.schedule.len());
        self.begin_iteration(i)?;

        let topo = self.topo.clone();
        let n = topo.num_workers();
        let mut links: Vec<Links> = (0..n)
            .map(|_| Links {
                tx: BTreeMap::new(),
                rx: BTreeMap::new(),
            })
            .collect();
        let mut edges = Vec::new();
        for w in 0..n {
            let (r, s) = (topo.replica_of(w), topo.stage_of(w));
            if s + 1 < topo.p {
                edges.push((w, topo.worker(r, s + 1)));
                edges.push((topo.worker(r, s + 1), w));
            }
        }
        for &(a, b) in &edges {
            let (tx, rx) = channel();
            links[a].tx.insert(b, tx);
            links[b].rx.insert(a, rx);
        }

        let ctx = self.ctx(i);
        let schedule = &self.schedule;
        let logs = Mutex::new(&mut self.logs);
        let disks: Vec<_> = (0..n)
            .map(|w| self.cluster.machine(topo.machine_of(w)).local_disk.clone())
            .collect();
        let should_log: Vec<Vec<bool>> = (0..n)
            .map(|a| (0..n).map(|b| self.cfg.logging && {
                let (ma, mb) = (topo.machine_of(a), topo.machine_of(b));
                ma != mb && self.layout.is_logged(ma, mb)
            }).collect())
            .collect();
        let dtype = self.cfg.log.dtype;
        let mut workers = std::mem::take(&mut self.workers);

        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .zip(links.iter_mut())
                .map(|(wk, link)| {
                    let (topo, logs, disks, should_log) = (&topo, &logs, &disks, &should_log);
                    scope.spawn(move || -> Result<()> {
                        run_row(wk, link, topo, schedule, &ctx, stop, logs, disks, should_log, dtype)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Unrecoverable("worker thread panicked".into()))))
                .collect()
        });
        self.workers = workers;
        for r in results {
            r?;
        }

        // messages still in flight go back on the cluster's channels
        let mut leftover: BTreeMap<(WorkerId, WorkerId), VecDeque<Message>> = BTreeMap::new();
        for (b, link) in links.iter().enumerate() {
            for (&a, rx) in &link.rx {
                let q: VecDeque<Message> = rx.try_iter().collect();
                if !q.is_empty() {
                    leftover.insert((a, b), q);
                }
            }
        }
        self.cluster.restore_channels(leftover);

        let mut order: Vec<usize> = (0..self.cfg.p).collect();
        order.sort_by_key(|&s| self.schedule.finish_time(s));
        for s in order {
            if self.schedule.finish_time(s) < stop {
                self.update_stage(s, None)?;
            }
        }
        if stop < self.schedule.len() {
            let now: Vec<_> = firing
                .into_iter()
                .filter(|e| e.phase == FailurePhase::MidIteration(stop))
                .collect();
            return self.fire(now);
        }
        Ok(self.finish_iteration(i))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_row(
    wk: &mut Worker,
    link: &Links,
    topo: &crate::cluster::Topology,
    schedule: &super::schedule::Schedule,
    ctx: &super::engine::StepCtx,
    stop: usize,
    logs: &Mutex<&mut crate::resilience::LogManager>,
    disks: &[std::path::PathBuf],
    should_log: &[Vec<bool>],
    dtype: crate::numerics::DType,
) -> Result<()> {
    let w = wk.id;
    let (r, s) = (topo.replica_of(w), topo.stage_of(w));
    let send = |to: WorkerId, msg: Message| -> Result<()> {
        if should_log[w][to] {
            let rec = LogRecord::from_tensor(
                (topo.machine_of(w), topo.machine_of(to)),
                (w, to),
                msg.iteration,
                msg.mb,
                msg.direction,
                &msg.payload,
                dtype,
            );
            logs.lock().expect("log lock").log_send(rec);
        }
        link.tx[&to]
            .send(msg)
            .map_err(|_| Error::Unrecoverable("receiver thread gone".into()))
    };
    for tau in 0..stop {
        match schedule.slot(s, tau) {
            Slot::Forward(mb) => {
                let input = if s == 0 {
                    None
                } else {
                    Some(recv_checked(&link.rx[&topo.worker(r, s - 1)], ctx.iteration, mb, Direction::Activation)?)
                };
                let out = forward_op(ctx, &wk.stage, &mut wk.cache, r, mb, input)?;
                if s + 1 < topo.p {
                    let to = topo.worker(r, s + 1);
                    send(
                        to,
                        Message {
                            sender_worker: w,
                            receiver_worker: to,
                            iteration: ctx.iteration,
                            mb,
                            direction: Direction::Activation,
                            payload: out,
                        },
                    )?;
                }
            }
            Slot::Backward(mb) => {
                let grad = if s + 1 == topo.p {
                    None
                } else {
                    Some(recv_checked(&link.rx[&topo.worker(r, s + 1)], ctx.iteration, mb, Direction::Gradient)?)
                };
                let (gi, pg, loss) = backward_op(ctx, &wk.stage, &mut wk.cache, r, mb, grad)?;
                wk.partials.insert(mb, pg);
                if let Some(l) = loss {
                    wk.losses.insert(mb, l);
                }
                if s > 0 {
                    let to = topo.worker(r, s - 1);
                    send(
                        to,
                        Message {
                            sender_worker: w,
                            receiver_worker: to,
                            iteration: ctx.iteration,
                            mb,
                            direction: Direction::Gradient,
                            payload: gi,
                        },
                    )?;
                }
            }
            Slot::Bubble => {
                logs.lock().expect("log lock").commit(w, &disks[w])?;
            }
        }
    }
    Ok(())
}
