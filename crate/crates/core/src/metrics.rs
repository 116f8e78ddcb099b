//! Base-model metrics (F1, AUC) and the trust-informed confusion matrix.
//!
//! The matrix crosses base-prediction correctness {TP, FP, TN, FN} with the
//! meta-model's trust outcome {TT, FT, TU, FU}, giving 16 cells. Because the
//! ground-truth trust label can only be 1 on a correct prediction, the cells
//! FNTT, FPTT, FNFU and FPFU are always empty.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_binary(xs: &[u8]) -> Result<()> {
    match xs.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::InvalidArgument(format!("label {v} outside {{0,1}}"))),
        None => Ok(()),
    }
}

/// F1 for the positive class (1). Zero when there are no positives at all.
pub fn f1_score(truths: &[u8], preds: &[u8]) -> Result<f64> {
    if truths.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: truths.len(),
            right: preds.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::Empty("label vector"));
    }
    check_binary(truths)?;
    check_binary(preds)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&t, &p) in truths.iter().zip(preds) {
        match (t, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

/// ROC AUC via the Mann-Whitney U statistic with mid-ranks for ties.
pub fn auc(truths: &[u8], scores: &[f64]) -> Result<f64> {
    if truths.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: truths.len(),
            right: scores.len(),
        });
    }
    check_binary(truths)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n_pos = truths.iter().filter(|&&t| t == 1).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of 1-based mid-ranks over positives; every term is a multiple of 0.5
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| truths[k] == 1).count();
        rank_sum += mid_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Ground-truth trust label: 1 iff the base prediction is correct and its
/// PE does not exceed `tau`.
pub fn ground_truth_trust(base_label: u8, truth: u8, pe: f64, tau: f64) -> u8 {
    u8::from(base_label == truth && pe <= tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Correctness {
    Tp,
    Fp,
    Tn,
    Fn,
}

impl Correctness {
    pub const ALL: [Correctness; 4] = [Correctness::Tp, Correctness::Fp, Correctness::Tn, Correctness::Fn];

    pub fn of(truth: u8, pred: u8) -> Self {
        match (truth, pred) {
            (1, 1) => Correctness::Tp,
            (0, 1) => Correctness::Fp,
            (1, _) => Correctness::Fn,
            _ => Correctness::Tn,
        }
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Correctness::Tp | Correctness::Tn)
    }

    fn code(self) -> &'static str {
        match self {
            Correctness::Tp => "TP",
            Correctness::Fp => "FP",
            Correctness::Tn => "TN",
            Correctness::Fn => "FN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrustOutcome {
    /// flagged trustworthy, actually trustworthy
    Tt,
    /// flagged trustworthy, actually untrustworthy
    Ft,
    /// flagged untrustworthy, actually untrustworthy
    Tu,
    /// flagged untrustworthy, actually trustworthy
    Fu,
}

impl TrustOutcome {
    pub const ALL: [TrustOutcome; 4] = [TrustOutcome::Tt, TrustOutcome::Ft, TrustOutcome::Tu, TrustOutcome::Fu];

    pub fn of(trust_truth: u8, trust_pred: u8) -> Self {
        match (trust_pred, trust_truth) {
            (1, 1) => TrustOutcome::Tt,
            (1, _) => TrustOutcome::Ft,
            (_, 1) => TrustOutcome::Fu,
            _ => TrustOutcome::Tu,
        }
    }

    pub fn flagged_trustworthy(self) -> bool {
        matches!(self, TrustOutcome::Tt | TrustOutcome::Ft)
    }

    fn code(self) -> &'static str {
        match self {
            TrustOutcome::Tt => "TT",
            TrustOutcome::Ft => "FT",
            TrustOutcome::Tu => "TU",
            TrustOutcome::Fu => "FU",
        }
    }
}

/// One scored test sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub truth: u8,
    pub base_label: u8,
    pub pe: f64,
    pub trust_truth: u8,
    pub trust_pred: u8,
}

impl EvalRecord {
    /// Build a record, deriving the ground-truth trust label at `tau`.
    pub fn new(truth: u8, base_label: u8, pe: f64, tau: f64, trust_pred: u8) -> Self {
        Self {
            truth,
            base_label,
            pe,
            trust_truth: ground_truth_trust(base_label, truth, pe, tau),
            trust_pred,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustConfusionMatrix {
    cells: [[u64; 4]; 4],
    pub tau: f64,
}

impl TrustConfusionMatrix {
    pub fn empty(tau: f64) -> Self {
        Self { cells: [[0; 4]; 4], tau }
    }

    pub fn get(&self, c: Correctness, t: TrustOutcome) -> u64 {
        self.cells[c as usize][t as usize]
    }

    pub fn set(&mut self, c: Correctness, t: TrustOutcome, count: u64) {
        self.cells[c as usize][t as usize] = count;
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    /// Sum of the four structurally impossible cells.
    pub fn forbidden_total(&self) -> u64 {
        use Correctness::*;
        use TrustOutcome::*;
        self.get(Fn, Tt) + self.get(Fp, Tt) + self.get(Fn, Fu) + self.get(Fp, Fu)
    }

    pub fn cells(&self) -> impl Iterator<Item = (Correctness, TrustOutcome, u64)> + '_ {
        Correctness::ALL
            .into_iter()
            .flat_map(move |c| TrustOutcome::ALL.into_iter().map(move |t| (c, t, self.get(c, t))))
    }

    pub fn cell_name(c: Correctness, t: TrustOutcome) -> String {
        format!("{}{}", c.code(), t.code())
    }

    /// Four-by-four table laid out as ground truth (class, trust) rows against
    /// U-SNN output (class, flag) columns.
    pub fn render_table(&self) -> String {
        use Correctness::*;
        use TrustOutcome::*;
        let rows = [
            ("Positive", "Trustworthy", [(Tp, Tt), (Tp, Fu), (Fn, Tt), (Fn, Fu)]),
            ("Positive", "Untrustworthy", [(Tp, Ft), (Tp, Tu), (Fn, Ft), (Fn, Tu)]),
            ("Negative", "Trustworthy", [(Fp, Tt), (Fp, Fu), (Tn, Tt), (Tn, Fu)]),
            ("Negative", "Untrustworthy", [(Fp, Ft), (Fp, Tu), (Tn, Ft), (Tn, Tu)]),
        ];
        let mut out = String::new();
        let _ = writeln!(out, "trust-informed confusion matrix (tau = {})", self.tau);
        let _ = writeln!(
            out,
            "{:<28}| {:^27} | {:^27} |",
            "", "output: Positive", "output: Negative"
        );
        let _ = writeln!(
            out,
            "{:<28}| {:>13} {:>13} | {:>13} {:>13} |",
            "truth", "Trustworthy", "Untrustworthy", "Trustworthy", "Untrustworthy"
        );
        for (class, trust, cells) in rows {
            let _ = write!(out, "{:<28}|", format!("{class} / {trust}"));
            for (k, (c, t)) in cells.into_iter().enumerate() {
                let cell = format!("{}={}", Self::cell_name(c, t), self.get(c, t));
                let _ = write!(out, " {cell:>13}");
                if k % 2 == 1 {
                    out.push_str(" |");
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "total = {}", self.total());
        out
    }
}

impl fmt::Display for TrustConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_table())
    }
}

impl Serialize for TrustConfusionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        struct Cells<'a>(&'a TrustConfusionMatrix);
        impl Serialize for Cells<'_> {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                let mut map = s.serialize_map(Some(16))?;
                for (c, t, n) in self.0.cells() {
                    map.serialize_entry(&TrustConfusionMatrix::cell_name(c, t), &n)?;
                }
                map.end()
            }
        }
        let mut map = s.serialize_map(Some(2))?;
        map.serialize_entry("tau", &self.tau)?;
        map.serialize_entry("cells", &Cells(self))?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for TrustConfusionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Doc {
            tau: f64,
            cells: BTreeMap<String, u64>,
        }
        let doc = Doc::deserialize(d)?;
        let mut m = TrustConfusionMatrix::empty(doc.tau);
        for c in Correctness::ALL {
            for t in TrustOutcome::ALL {
                let name = TrustConfusionMatrix::cell_name(c, t);
                let n = doc
                    .cells
                    .get(&name)
                    .ok_or_else(|| serde::de::Error::custom(format!("missing cell {name}")))?;
                m.set(c, t, *n);
            }
        }
        if doc.cells.len() != 16 {
            return Err(serde::de::Error::custom("expected exactly 16 cells"));
        }
        Ok(m)
    }
}

/// Tally `records` into the 16 cells.
pub fn trust_confusion(records: &[EvalRecord], tau: f64) -> Result<TrustConfusionMatrix> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let mut m = TrustConfusionMatrix::empty(tau);
    for (i, r) in records.iter().enumerate() {
        for v in [r.truth, r.base_label, r.trust_truth, r.trust_pred] {
            if v > 1 {
                return Err(Error::InvalidArgument(format!("record {i}: value {v} outside {{0,1}}")));
            }
        }
        if r.trust_truth == 1 && r.base_label != r.truth {
            return Err(Error::UnsoundTrustLabel(i));
        }
        m.cells[Correctness::of(r.truth, r.base_label) as usize][TrustOutcome::of(r.trust_truth, r.trust_pred) as usize] += 1;
    }
    Ok(m)
}

/// Rates derived from a trust-informed confusion matrix. Ratios whose
/// denominator is zero are `None` (serialised as `null`), never 0 or NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    /// Confident accuracy rate.
    pub car: f64,
    /// Confident precision rate.
    pub cpr: Option<f64>,
    /// Trust precision rate (not the true-positive rate).
    pub tpr_trust: Option<f64>,
    /// False trust rate.
    pub ftr: f64,
    /// Review alert ratio.
    pub rar: f64,
    /// Miscalibration review ratio.
    pub mrr: Option<f64>,
    /// True review ratio.
    pub trr: Option<f64>,
    /// False review ratio.
    pub frr: Option<f64>,
    /// Total accurate predictions.
    pub tap: u64,
    /// Total flagged trustworthy.
    pub ttp: u64,
    /// Total flagged untrustworthy.
    pub tup: u64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn trust_report(m: &TrustConfusionMatrix) -> Result<TrustReport> {
    use Correctness::*;
    use TrustOutcome::*;
    let total = m.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let g = |c, t| m.get(c, t);
    let tap: u64 = m.cells().filter(|(c, _, _)| c.is_correct()).map(|(_, _, n)| n).sum();
    let ttp: u64 = m.cells().filter(|(_, t, _)| t.flagged_trustworthy()).map(|(_, _, n)| n).sum();
    let tup: u64 = m.cells().filter(|(_, t, _)| !t.flagged_trustworthy()).map(|(_, _, n)| n).sum();
    let confident_correct = g(Tp, Tt) + g(Tn, Tt);
    Ok(TrustReport {
        car: confident_correct as f64 / total as f64,
        cpr: ratio(confident_correct, tap),
        tpr_trust: ratio(confident_correct, ttp),
        ftr: (g(Fp, Ft) + g(Fn, Ft)) as f64 / total as f64,
        rar: tup as f64 / total as f64,
        mrr: ratio(g(Tp, Tu) + g(Tn, Tu), tup),
        trr: ratio(g(Fn, Tu) + g(Fp, Tu), tup),
        frr: ratio(g(Tp, Fu) + g(Tn, Fu), tup),
        tap,
        ttp,
        tup,
        total,
    })
}

impl TrustReport {
    /// (name, value) pairs of the eight rates, in a fixed order.
    pub fn rates(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("car", Some(self.car)),
            ("cpr", self.cpr),
            ("tpr_trust", self.tpr_trust),
            ("ftr", Some(self.ftr)),
            ("rar", Some(self.rar)),
            ("mrr", self.mrr),
            ("trr", self.trr),
            ("frr", self.frr),
        ]
    }
}

impl fmt::Display for TrustReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.rates() {
            match v {
                Some(v) => writeln!(f, "{:<10} {v:.6}", name.to_uppercase())?,
                None => writeln!(f, "{:<10} absent", name.to_uppercase())?,
            }
        }
        writeln!(f, "TAP {}  TTP {}  TUP {}  total {}", self.tap, self.ttp, self.tup, self.total)
    }
}
