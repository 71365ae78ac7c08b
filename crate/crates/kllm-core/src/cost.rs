//! Operation accounting and configurable-cost reporting.
//!
//! Every compute kernel charges its work to an [`OpCounters`] instance, one
//! tally per operation class. The tallies are exact operation counts, not
//! timings; a [`CostTable`] maps them to dimensionless energy units for the
//! breakdown report.

use serde::Serialize;
use std::fmt;

/// Operation classes tracked by the accounting layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Concat,
    HistogramIncrement,
    FpMac,
    FpMul,
    FpAdd,
    Comparison,
    Lookup,
    ClusterDistance,
    ExpEval,
    Square,
}

impl OpClass {
    pub const ALL: [OpClass; 10] = [
        OpClass::Concat,
        OpClass::HistogramIncrement,
        OpClass::FpMac,
        OpClass::FpMul,
        OpClass::FpAdd,
        OpClass::Comparison,
        OpClass::Lookup,
        OpClass::ClusterDistance,
        OpClass::ExpEval,
        OpClass::Square,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Concat => "concat",
            OpClass::HistogramIncrement => "histogram_increment",
            OpClass::FpMac => "fp_mac",
            OpClass::FpMul => "fp_mul",
            OpClass::FpAdd => "fp_add",
            OpClass::Comparison => "comparison",
            OpClass::Lookup => "lookup",
            OpClass::ClusterDistance => "cluster_distance",
            OpClass::ExpEval => "exp_eval",
            OpClass::Square => "square",
        }
    }

    fn slot(self) -> usize {
        match self {
            OpClass::Concat => 0,
            OpClass::HistogramIncrement => 1,
            OpClass::FpMac => 2,
            OpClass::FpMul => 3,
            OpClass::FpAdd => 4,
            OpClass::Comparison => 5,
            OpClass::Lookup => 6,
            OpClass::ClusterDistance => 7,
            OpClass::ExpEval => 8,
            OpClass::Square => 9,
        }
    }
}

/// Monotone tallies of executed operations, mergeable by addition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub concat: u64,
    pub histogram_increment: u64,
    pub fp_mac: u64,
    pub fp_mul: u64,
    pub fp_add: u64,
    pub comparison: u64,
    pub lookup: u64,
    pub cluster_distance: u64,
    pub exp_eval: u64,
    pub square: u64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: OpClass, n: u64) {
        *self.slot_mut(class) += n;
    }

    pub fn get(&self, class: OpClass) -> u64 {
        match class {
            OpClass::Concat => self.concat,
            OpClass::HistogramIncrement => self.histogram_increment,
            OpClass::FpMac => self.fp_mac,
            OpClass::FpMul => self.fp_mul,
            OpClass::FpAdd => self.fp_add,
            OpClass::Comparison => self.comparison,
            OpClass::Lookup => self.lookup,
            OpClass::ClusterDistance => self.cluster_distance,
            OpClass::ExpEval => self.exp_eval,
            OpClass::Square => self.square,
        }
    }

    fn slot_mut(&mut self, class: OpClass) -> &mut u64 {
        match class {
            OpClass::Concat => &mut self.concat,
            OpClass::HistogramIncrement => &mut self.histogram_increment,
            OpClass::FpMac => &mut self.fp_mac,
            OpClass::FpMul => &mut self.fp_mul,
            OpClass::FpAdd => &mut self.fp_add,
            OpClass::Comparison => &mut self.comparison,
            OpClass::Lookup => &mut self.lookup,
            OpClass::ClusterDistance => &mut self.cluster_distance,
            OpClass::ExpEval => &mut self.exp_eval,
            OpClass::Square => &mut self.square,
        }
    }

    /// Fold another worker's tallies into this one. Commutative and associative.
    pub fn merge(&mut self, other: &OpCounters) {
        for class in OpClass::ALL {
            self.add(class, other.get(class));
        }
    }

    pub fn total(&self) -> u64 {
        OpClass::ALL.iter().map(|&c| self.get(c)).sum()
    }
}

/// Per-class unit costs in dimensionless energy units.
///
/// Defaults to 1.0 per operation, making the report a pure count breakdown.
#[derive(Debug, Clone)]
pub struct CostTable {
    costs: [f64; 10],
}

impl Default for CostTable {
    fn default() -> Self {
        Self { costs: [1.0; 10] }
    }
}

impl CostTable {
    pub fn all_ones() -> Self {
        Self::default()
    }

    pub fn set(&mut self, class: OpClass, unit_cost: f64) -> crate::Result<()> {
        if !(unit_cost >= 0.0 && unit_cost.is_finite()) {
            return Err(crate::Error::InvalidConfig(format!(
                "unit cost for {} must be non-negative and finite",
                class.name()
            )));
        }
        self.costs[class.slot()] = unit_cost;
        Ok(())
    }

    pub fn get(&self, class: OpClass) -> f64 {
        self.costs[class.slot()]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub class: &'static str,
    pub count: u64,
    pub unit_cost: f64,
    pub cost: f64,
    /// Percentage share of the total cost; 0 when the total is zero.
    pub share_percent: f64,
}

/// Cost breakdown over all operation classes, in [`OpClass::ALL`] order.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub entries: Vec<ReportEntry>,
    pub total_count: u64,
    pub total_cost: f64,
    /// Set when every counter is zero; shares are reported as 0 in that case.
    pub zero_total: bool,
}

/// Freeze the current tallies into a breakdown report under the given cost table.
pub fn snapshot_and_report(counters: &OpCounters, table: &CostTable) -> Report {
    let total_cost: f64 = OpClass::ALL
        .iter()
        .map(|&c| counters.get(c) as f64 * table.get(c))
        .sum();
    let zero_total = total_cost == 0.0;
    let entries = OpClass::ALL
        .iter()
        .map(|&c| {
            let count = counters.get(c);
            let unit_cost = table.get(c);
            let cost = count as f64 * unit_cost;
            let share_percent = if zero_total {
                0.0
            } else {
                100.0 * cost / total_cost
            };
            ReportEntry {
                class: c.name(),
                count,
                unit_cost,
                cost,
                share_percent,
            }
        })
        .collect();
    Report {
        entries,
        total_count: counters.total(),
        total_cost,
        zero_total,
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{}: count={} unit_cost={} cost={} share={:.2}%",
                e.class, e.count, e.unit_cost, e.cost, e.share_percent
            )?;
        }
        writeln!(f, "total_count: {}", self.total_count)?;
        writeln!(f, "total_cost: {}", self.total_cost)?;
        if self.zero_total {
            writeln!(f, "note: total cost is zero; shares reported as 0")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BudgetKind {
    /// The counter must equal the bound exactly.
    Exact,
    /// The counter must not exceed the bound.
    AtMost,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetItem {
    pub class: OpClass,
    pub kind: BudgetKind,
    pub bound: u64,
}

impl BudgetItem {
    pub fn exact(class: OpClass, bound: u64) -> Self {
        Self {
            class,
            kind: BudgetKind::Exact,
            bound,
        }
    }

    pub fn at_most(class: OpClass, bound: u64) -> Self {
        Self {
            class,
            kind: BudgetKind::AtMost,
            bound,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetOutcome {
    pub class: &'static str,
    pub kind: BudgetKind,
    pub bound: u64,
    pub actual: u64,
    /// actual - bound
    pub delta: i128,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    pub outcomes: Vec<BudgetOutcome>,
    pub all_pass: bool,
}

/// Check counters against a set of exact-count identities and inequality budgets.
pub fn budget_check(counters: &OpCounters, budget: &[BudgetItem]) -> BudgetReport {
    let outcomes: Vec<BudgetOutcome> = budget
        .iter()
        .map(|item| {
            let actual = counters.get(item.class);
            let pass = match item.kind {
                BudgetKind::Exact => actual == item.bound,
                BudgetKind::AtMost => actual <= item.bound,
            };
            BudgetOutcome {
                class: item.class.name(),
                kind: item.kind,
                bound: item.bound,
                actual,
                delta: actual as i128 - item.bound as i128,
                pass,
            }
        })
        .collect();
    let all_pass = outcomes.iter().all(|o| o.pass);
    BudgetReport { outcomes, all_pass }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            let rel = match o.kind {
                BudgetKind::Exact => "==",
                BudgetKind::AtMost => "<=",
            };
            writeln!(
                f,
                "{}: actual={} {} bound={} delta={} [{}]",
                o.class,
                o.actual,
                rel,
                o.bound,
                o.delta,
                if o.pass { "pass" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "identities: {}",
            if self.all_pass { "PASS" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_addition() {
        let mut a = OpCounters::new();
        a.add(OpClass::Concat, 3);
        a.add(OpClass::FpMac, 1);
        let mut b = OpCounters::new();
        b.add(OpClass::Concat, 4);
        b.add(OpClass::Comparison, 7);
        a.merge(&b);
        assert_eq!(a.concat, 7);
        assert_eq!(a.fp_mac, 1);
        assert_eq!(a.comparison, 7);
        assert_eq!(a.total(), 15);
    }

    #[test]
    fn zero_counters_report_zero_shares() {
        let report = snapshot_and_report(&OpCounters::new(), &CostTable::default());
        assert!(report.zero_total);
        assert_eq!(report.total_cost, 0.0);
        assert!(report.entries.iter().all(|e| e.share_percent == 0.0));
        let text = report.to_string();
        assert!(text.contains("total cost is zero"));
    }

    #[test]
    fn shares_follow_cost_table() {
        let mut c = OpCounters::new();
        c.add(OpClass::Concat, 10);
        c.add(OpClass::FpMac, 10);
        let mut t = CostTable::default();
        t.set(OpClass::FpMac, 3.0).unwrap();
        let report = snapshot_and_report(&c, &t);
        let concat = &report.entries[OpClass::Concat.slot()];
        let mac = &report.entries[OpClass::FpMac.slot()];
        assert_eq!(report.total_cost, 40.0);
        assert!((concat.share_percent - 25.0).abs() < 1e-12);
        assert!((mac.share_percent - 75.0).abs() < 1e-12);
    }

    #[test]
    fn negative_unit_cost_rejected() {
        let mut t = CostTable::default();
        assert!(t.set(OpClass::Square, -1.0).is_err());
    }

    #[test]
    fn empty_budget_passes() {
        let report = budget_check(&OpCounters::new(), &[]);
        assert!(report.all_pass);
    }

    #[test]
    fn budget_exact_and_at_most() {
        let mut c = OpCounters::new();
        c.add(OpClass::Concat, 32);
        c.add(OpClass::Comparison, 22);
        let report = budget_check(
            &c,
            &[
                BudgetItem::exact(OpClass::Concat, 32),
                BudgetItem::at_most(OpClass::Comparison, 24),
            ],
        );
        assert!(report.all_pass);
        assert_eq!(report.outcomes[1].delta, -2);

        let bad = budget_check(&c, &[BudgetItem::exact(OpClass::Concat, 31)]);
        assert!(!bad.all_pass);
    }
}
