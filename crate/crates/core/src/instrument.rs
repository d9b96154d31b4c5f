//! Per-thread call counters used to audit the feedforward inference contract.

use std::cell::Cell;

thread_local! {
    static EDITOR_FORWARDS: Cell<usize> = const { Cell::new(0) };
    static LIFTER_FORWARDS: Cell<usize> = const { Cell::new(0) };
    static RENDERS: Cell<usize> = const { Cell::new(0) };
    static OPTIMIZER_STEPS: Cell<usize> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Counts {
    pub editor_forwards: usize,
    pub lifter_forwards: usize,
    pub renders: usize,
    pub optimizer_steps: usize,
}

impl Counts {
    pub fn since(self, earlier: Counts) -> Counts {
        Counts {
            editor_forwards: self.editor_forwards - earlier.editor_forwards,
            lifter_forwards: self.lifter_forwards - earlier.lifter_forwards,
            renders: self.renders - earlier.renders,
            optimizer_steps: self.optimizer_steps - earlier.optimizer_steps,
        }
    }
}

fn bump(c: &'static std::thread::LocalKey<Cell<usize>>) {
    c.with(|v| v.set(v.get() + 1));
}

pub(crate) fn editor_forward() {
    bump(&EDITOR_FORWARDS);
}

pub(crate) fn lifter_forward() {
    bump(&LIFTER_FORWARDS);
}

pub(crate) fn render() {
    bump(&RENDERS);
}

pub(crate) fn optimizer_step() {
    bump(&OPTIMIZER_STEPS);
}

pub fn snapshot() -> Counts {
    Counts {
        editor_forwards: EDITOR_FORWARDS.with(Cell::get),
        lifter_forwards: LIFTER_FORWARDS.with(Cell::get),
        renders: RENDERS.with(Cell::get),
        optimizer_steps: OPTIMIZER_STEPS.with(Cell::get),
    }
}
