//! Batch-level scheduling of compute instructions across cores.
//!
//! An index register holds one status bit per batch (1 = compute, 0 = replay).
//! Compute batches are mapped to cores round-robin; instructions of replayed
//! batches are discarded at dispatch. Timing is a plain cycle count: dispatch is
//! serial, then every core drains its queue.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DecodeTrace;
use crate::scalar::Scalar;

/// Batches covered by one index register.
pub const MAX_BATCHES: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexRegister(pub u32);

impl IndexRegister {
    pub fn all_compute() -> Self {
        IndexRegister(u32::MAX)
    }

    pub fn all_replay() -> Self {
        IndexRegister(0)
    }

    /// Bit `b` is set iff `compute[b]`.
    pub fn from_flags(compute: &[bool]) -> Result<Self> {
        if compute.len() > MAX_BATCHES {
            return Err(Error::Input(format!(
                "{} batches exceed the register width",
                compute.len()
            )));
        }
        Ok(IndexRegister(
            compute
                .iter()
                .enumerate()
                .fold(0, |acc, (b, c)| acc | (u32::from(*c) << b)),
        ))
    }

    pub fn is_compute(self, batch: usize) -> bool {
        batch < MAX_BATCHES && self.0 >> batch & 1 == 1
    }

    pub fn compute_batches(self) -> impl Iterator<Item = usize> {
        (0..MAX_BATCHES).filter(move |b| self.is_compute(*b))
    }

    pub fn compute_count(self) -> usize {
        self.0.count_ones() as usize
    }
}

/// Core index per batch; only entries of compute batches are meaningful.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRegisters {
    pub num_cores: usize,
    pub entries: [u32; MAX_BATCHES],
    /// Bit `b` set iff entry `b` was assigned.
    pub mapped: u32,
}

impl MappingRegisters {
    /// Bits needed per entry.
    pub fn width(&self) -> u32 {
        self.num_cores.trailing_zeros()
    }

    pub fn core_of(&self, batch: usize) -> Option<usize> {
        (batch < MAX_BATCHES && self.mapped >> batch & 1 == 1).then(|| self.entries[batch] as usize)
    }

    /// Compute batches assigned to each core.
    pub fn loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.num_cores];
        for b in 0..MAX_BATCHES {
            if let Some(c) = self.core_of(b) {
                loads[c] += 1;
            }
        }
        loads
    }
}

fn check_cores(num_cores: usize) -> Result<()> {
    if num_cores == 0 || !num_cores.is_power_of_two() || num_cores > MAX_BATCHES {
        return Err(Error::Config(format!(
            "core count {num_cores} must be a power of two between 1 and 32"
        )));
    }
    Ok(())
}

/// The `k`-th compute batch (ascending) goes to core `k mod num_cores`.
pub fn round_robin_assign(idx: IndexRegister, num_cores: usize) -> Result<MappingRegisters> {
    check_cores(num_cores)?;
    let mut map = MappingRegisters {
        num_cores,
        entries: [0; MAX_BATCHES],
        mapped: 0,
    };
    for (k, b) in idx.compute_batches().enumerate() {
        map.entries[b] = (k % num_cores) as u32;
        map.mapped |= 1 << b;
    }
    Ok(map)
}

/// Batch `b` goes to core `b mod num_cores` whatever the register says.
pub fn static_assign(num_cores: usize) -> Result<MappingRegisters> {
    check_cores(num_cores)?;
    let mut map = MappingRegisters {
        num_cores,
        entries: [0; MAX_BATCHES],
        mapped: u32::MAX,
    };
    for (b, e) in map.entries.iter_mut().enumerate() {
        *e = (b % num_cores) as u32;
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub batch: usize,
    /// Sequence number in the incoming stream.
    pub seq: usize,
    /// Execution cost in units of the per-instruction cost.
    pub weight: u64,
}

/// `per_batch` unit-weight instructions for each of `batches` batches, batch-major.
pub fn uniform_stream(batches: usize, per_batch: usize) -> Vec<Instruction> {
    weighted_stream(&vec![1; batches], per_batch)
}

/// Like [`uniform_stream`] with a per-batch instruction weight.
pub fn weighted_stream(weights: &[u64], per_batch: usize) -> Vec<Instruction> {
    let mut out = Vec::with_capacity(weights.len() * per_batch);
    for (batch, w) in weights.iter().enumerate() {
        for _ in 0..per_batch {
            out.push(Instruction {
                batch,
                seq: out.len(),
                weight: *w,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub queues: Vec<Vec<Instruction>>,
    pub discarded: usize,
}

impl DispatchPlan {
    pub fn surviving(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    pub fn dispatch_cycles(&self, cost_per_instr: u64) -> u64 {
        cost_per_instr * self.surviving() as u64
    }

    pub fn execution_cycles(&self, exec_per_instr: u64) -> Vec<u64> {
        self.queues
            .iter()
            .map(|q| q.iter().map(|i| i.weight * exec_per_instr).sum())
            .collect()
    }
}

/// Drops instructions of replayed batches and queues the rest on their mapped core.
pub fn dispatch(
    stream: &[Instruction],
    idx: IndexRegister,
    map: &MappingRegisters,
) -> Result<DispatchPlan> {
    let mut plan = DispatchPlan {
        queues: vec![Vec::new(); map.num_cores],
        discarded: 0,
    };
    for ins in stream {
        if ins.batch >= MAX_BATCHES {
            return Err(Error::Input(format!(
                "instruction batch {} exceeds {MAX_BATCHES}",
                ins.batch
            )));
        }
        if !idx.is_compute(ins.batch) {
            plan.discarded += 1;
            continue;
        }
        let core = map.core_of(ins.batch).ok_or_else(|| {
            Error::Internal(format!("compute batch {} has no core mapping", ins.batch))
        })?;
        plan.queues[core].push(*ins);
    }
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub dispatch_cycles: u64,
    pub busy: Vec<u64>,
    pub makespan: u64,
    pub utilization: Vec<f64>,
}

impl SimReport {
    pub fn dispatch_share(&self) -> f64 {
        if self.makespan == 0 {
            0.0
        } else {
            self.dispatch_cycles as f64 / self.makespan as f64
        }
    }
}

/// Makespan is serial dispatch plus the longest core queue.
pub fn simulate(
    plan: &DispatchPlan,
    exec_per_instr: u64,
    dispatch_per_instr: u64,
) -> Result<SimReport> {
    if exec_per_instr == 0 || dispatch_per_instr == 0 {
        return Err(Error::Config("cycle costs must be at least 1".into()));
    }
    let dispatch_cycles = plan.dispatch_cycles(dispatch_per_instr);
    let busy = plan.execution_cycles(exec_per_instr);
    let makespan = dispatch_cycles + busy.iter().copied().max().unwrap_or(0);
    let utilization = busy
        .iter()
        .map(|b| {
            if makespan == 0 {
                0.0
            } else {
                *b as f64 / makespan as f64
            }
        })
        .collect();
    Ok(SimReport {
        dispatch_cycles,
        busy,
        makespan,
        utilization,
    })
}

/// Scenario file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub num_cores: usize,
    pub exec_cycles: u64,
    pub dispatch_cycles: u64,
    pub instrs_per_batch: usize,
    /// Batches present in each step (at most 32).
    pub batches: usize,
    /// Optional per-batch instruction weights; defaults to 1.
    pub weights: Vec<u64>,
    /// One index register per step.
    pub registers: Vec<u32>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            num_cores: 4,
            exec_cycles: 1000,
            dispatch_cycles: 1,
            instrs_per_batch: 4,
            batches: MAX_BATCHES,
            weights: Vec::new(),
            registers: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        check_cores(self.num_cores)?;
        if self.batches == 0 || self.batches > MAX_BATCHES {
            return Err(Error::Config(format!(
                "batches must be in 1..=32, got {}",
                self.batches
            )));
        }
        if !self.weights.is_empty() && self.weights.len() != self.batches {
            return Err(Error::Config(format!(
                "{} weights for {} batches",
                self.weights.len(),
                self.batches
            )));
        }
        if self.exec_cycles == 0 || self.dispatch_cycles == 0 {
            return Err(Error::Config("cycle costs must be at least 1".into()));
        }
        let mask = if self.batches == MAX_BATCHES {
            u32::MAX
        } else {
            (1u32 << self.batches) - 1
        };
        if let Some(r) = self.registers.iter().find(|r| **r & !mask != 0) {
            return Err(Error::Config(format!(
                "register {r:#x} sets bits beyond batch {}",
                self.batches
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    fn stream(&self) -> Vec<Instruction> {
        if self.weights.is_empty() {
            uniform_stream(self.batches, self.instrs_per_batch)
        } else {
            weighted_stream(&self.weights, self.instrs_per_batch)
        }
    }
}

/// One row of the scenario report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub register: u32,
    pub compute_batches: usize,
    pub surviving: usize,
    pub dispatch_cycles: u64,
    pub drs_makespan: u64,
    pub static_makespan: u64,
    pub utilization: Vec<f64>,
}

impl StepReport {
    /// Static makespan over DRS makespan; 1 when both are empty.
    pub fn speedup(&self) -> f64 {
        if self.drs_makespan == 0 {
            1.0
        } else {
            self.static_makespan as f64 / self.drs_makespan as f64
        }
    }
}

/// Simulates one step under both the round-robin and the static mapping.
pub fn run_step(scenario: &Scenario, step: usize, idx: IndexRegister) -> Result<StepReport> {
    let stream = scenario.stream();
    let drs = dispatch(&stream, idx, &round_robin_assign(idx, scenario.num_cores)?)?;
    let stat = dispatch(&stream, idx, &static_assign(scenario.num_cores)?)?;
    let a = simulate(&drs, scenario.exec_cycles, scenario.dispatch_cycles)?;
    let b = simulate(&stat, scenario.exec_cycles, scenario.dispatch_cycles)?;
    Ok(StepReport {
        step,
        register: idx.0,
        compute_batches: idx.compute_count(),
        surviving: drs.surviving(),
        dispatch_cycles: a.dispatch_cycles,
        drs_makespan: a.makespan,
        static_makespan: b.makespan,
        utilization: a.utilization,
    })
}

pub fn run_scenario(scenario: &Scenario) -> Result<Vec<StepReport>> {
    scenario.validate()?;
    scenario
        .registers
        .iter()
        .enumerate()
        .map(|(s, r)| run_step(scenario, s, IndexRegister(*r)))
        .collect()
}

/// CSV with one row per step and one utilization column per core.
pub fn report_csv(rows: &[StepReport], num_cores: usize) -> String {
    let mut out =
        String::from("step,register,compute_batches,surviving,dispatch_cycles,drs_makespan,static_makespan,speedup");
    for c in 0..num_cores {
        out.push_str(&format!(",util_core{c}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.register,
            r.compute_batches,
            r.surviving,
            r.dispatch_cycles,
            r.drs_makespan,
            r.static_makespan,
            r.speedup()
        ));
        for u in &r.utilization {
            out.push_str(&format!(",{u}"));
        }
        out.push('\n');
    }
    out
}

pub fn read_report_csv(text: &str) -> Result<Vec<StepReport>> {
    let bad = |line: &str| Error::Parse(format!("bad DRS report row {line:?}"));
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty DRS report".into()))?;
    let cores = header
        .split(',')
        .filter(|h| h.starts_with("util_core"))
        .count();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 + cores {
            return Err(bad(line));
        }
        let int = |k: usize| f[k].parse::<u64>().map_err(|_| bad(line));
        rows.push(StepReport {
            step: int(0)? as usize,
            register: f[1].parse().map_err(|_| bad(line))?,
            compute_batches: int(2)? as usize,
            surviving: int(3)? as usize,
            dispatch_cycles: int(4)?,
            drs_makespan: int(5)?,
            static_makespan: int(6)?,
            utilization: f[8..]
                .iter()
                .map(|u| u.parse().map_err(|_| bad(line)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// How per-token replay decisions become per-batch status bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Aggregation {
    /// Consecutive generated tokens forming one step.
    pub tokens_per_step: usize,
    /// A batch replays a step/layer when at least this fraction of its tokens replayed.
    pub threshold: f64,
}

impl Default for Aggregation {
    fn default() -> Self {
        Self {
            tokens_per_step: 16,
            threshold: 1.0,
        }
    }
}

/// Index registers for a set of decode runs, one run per batch.
///
/// Registers are ordered step-major, then layer. Tokens without a score (frame 1)
/// count as computed.
pub fn registers_from_traces<S: Scalar>(
    traces: &[DecodeTrace<S>],
    agg: &Aggregation,
) -> Result<Vec<IndexRegister>> {
    if traces.is_empty() || traces.len() > MAX_BATCHES {
        return Err(Error::Input(format!(
            "need 1..=32 decode runs, got {}",
            traces.len()
        )));
    }
    if agg.tokens_per_step == 0 || !(agg.threshold > 0.0 && agg.threshold <= 1.0) {
        return Err(Error::Config(
            "tokens_per_step must be positive and threshold in (0, 1]".into(),
        ));
    }
    let layout = traces[0].layout;
    let layers = traces[0].stats.eligible.len();
    if traces
        .iter()
        .any(|t| t.layout != layout || t.stats.eligible.len() != layers)
    {
        return Err(Error::Input("decode runs differ in layout or depth".into()));
    }
    let n = layout.video_len();
    let steps = n.div_ceil(agg.tokens_per_step);
    // replayed[batch][layer][j]
    let mut replayed = vec![vec![vec![false; n]; layers]; traces.len()];
    for (b, tr) in traces.iter().enumerate() {
        for e in &tr.tas {
            let j = layout.flat(crate::model::GridPos {
                t: e.record.t,
                i: e.record.i,
            });
            replayed[b][e.record.layer][j] = e.replayed;
        }
    }
    let mut out = Vec::with_capacity(steps * layers);
    for s in 0..steps {
        let range = s * agg.tokens_per_step..((s + 1) * agg.tokens_per_step).min(n);
        for l in 0..layers {
            let flags: Vec<bool> = replayed
                .iter()
                .map(|rb| {
                    let hits = rb[l][range.clone()].iter().filter(|r| **r).count();
                    (hits as f64) < agg.threshold * range.len() as f64
                })
                .collect();
            out.push(IndexRegister::from_flags(&flags)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_load_when_all_compute() {
        let map = round_robin_assign(IndexRegister::all_compute(), 4).unwrap();
        assert_eq!(map.loads(), vec![8; 4]);
        assert_eq!(map.width(), 2);
    }

    #[test]
    fn five_batches_on_four_cores() {
        let idx = IndexRegister::from_flags(&[true; 5]).unwrap();
        assert_eq!(
            round_robin_assign(idx, 4).unwrap().loads(),
            vec![2, 1, 1, 1]
        );
    }

    #[test]
    fn all_replay_maps_nothing() {
        let idx = IndexRegister::all_replay();
        let map = round_robin_assign(idx, 4).unwrap();
        assert_eq!(map.loads(), vec![0; 4]);
        let plan = dispatch(&uniform_stream(32, 3), idx, &map).unwrap();
        assert_eq!(plan.surviving(), 0);
        assert_eq!(plan.dispatch_cycles(5), 0);
        assert_eq!(plan.discarded, 96);
    }

    #[test]
    fn core_count_must_be_power_of_two() {
        assert!(matches!(
            round_robin_assign(IndexRegister(1), 3),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            round_robin_assign(IndexRegister(1), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_stream_gives_equal_queues() {
        let idx = IndexRegister::all_compute();
        let plan = dispatch(
            &uniform_stream(32, 2),
            idx,
            &round_robin_assign(idx, 8).unwrap(),
        )
        .unwrap();
        assert!(plan.queues.iter().all(|q| q.len() == 8));
    }

    #[test]
    fn mixed_register_matches_reference_enumerator() {
        // bits 1,0,1,1,0,0,1,0 for batches 0..8
        let flags = [true, false, true, true, false, false, true, false];
        let idx = IndexRegister::from_flags(&flags).unwrap();
        let stream = uniform_stream(8, 3);
        let plan = dispatch(&stream, idx, &round_robin_assign(idx, 2).unwrap()).unwrap();
        let mut want = vec![Vec::new(); 2];
        let mut k = 0;
        for (b, f) in flags.iter().enumerate() {
            if *f {
                for s in 0..3 {
                    want[k % 2].push(Instruction {
                        batch: b,
                        seq: 3 * b + s,
                        weight: 1,
                    });
                }
                k += 1;
            }
        }
        assert_eq!(plan.queues, want);
    }

    #[test]
    fn unmapped_compute_batch_is_internal_error() {
        let map = round_robin_assign(IndexRegister(0b01), 2).unwrap();
        let res = dispatch(&uniform_stream(2, 1), IndexRegister(0b11), &map);
        assert!(matches!(res, Err(Error::Internal(_))));
    }

    #[test]
    fn single_core_makespan() {
        let idx = IndexRegister(0b1011);
        let plan = dispatch(
            &uniform_stream(4, 5),
            idx,
            &round_robin_assign(idx, 1).unwrap(),
        )
        .unwrap();
        let rep = simulate(&plan, 7, 2).unwrap();
        assert_eq!(rep.makespan, 2 * 15 + 15 * 7);
        assert!(simulate(&plan, 0, 1).is_err());
    }

    #[test]
    fn scenario_round_trip_and_report() {
        let sc = Scenario {
            batches: 8,
            registers: vec![0xff, 0b1011_0010, 0],
            ..Default::default()
        };
        let back = Scenario::from_toml(&sc.to_toml()).unwrap();
        assert_eq!(back, sc);
        let rows = run_scenario(&sc).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].drs_makespan, 0);
        let csv = report_csv(&rows, sc.num_cores);
        assert_eq!(read_report_csv(&csv).unwrap(), rows);
        let bad = Scenario {
            batches: 4,
            registers: vec![0x10],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
