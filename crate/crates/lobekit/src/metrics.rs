//! Per-lobe dice evaluation and its Table-shaped report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{LabelMask, LOBE_CLASSES, LOBE_NAMES};

/// Voxel counts behind one class's dice value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub lobe: String,
    pub pred: u64,
    pub gt: u64,
    pub intersection: u64,
}

/// Dice per lobe plus their unweighted mean (background excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Values keyed RU, RM, RL, LU, LL in that order.
    pub per_class: Vec<(String, f64)>,
    pub average: f64,
    pub counts: Vec<ClassCounts>,
}

impl DiceReport {
    pub fn dice_values(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (slot, (_, v)) in out.iter_mut().zip(&self.per_class) {
            *slot = *v;
        }
        out
    }

    /// Single-row table in the RU..LL, AVG column order.
    pub fn render_table(&self) -> String {
        render_rows(&[("dice".to_string(), self.dice_values(), self.average)])
    }
}

/// Aligned text table; values printed as percentages.
pub fn render_rows(rows: &[(String, [f64; 5], f64)]) -> String {
    let mut out = String::new();
    let name_w = rows.iter().map(|(n, _, _)| n.len()).max().unwrap_or(4).max(4);
    out.push_str(&format!("{:name_w$}", ""));
    for lobe in LOBE_NAMES {
        out.push_str(&format!("{lobe:>8}"));
    }
    out.push_str(&format!("{:>8}\n", "AVG"));
    for (name, vals, avg) in rows {
        out.push_str(&format!("{name:name_w$}"));
        for v in vals {
            out.push_str(&format!("{:>8.2}", v * 100.0));
        }
        out.push_str(&format!("{:>8.2}\n", avg * 100.0));
    }
    out
}

fn check_dims(p: &LabelMask, g: &LabelMask) -> Result<()> {
    if p.dims != g.dims {
        return Err(Error::ShapeMismatch(format!(
            "prediction dims {:?} != ground truth dims {:?}",
            p.dims, g.dims
        )));
    }
    Ok(())
}

fn counts_for(p: &LabelMask, g: &LabelMask, class: u8) -> ClassCounts {
    let mut pred = 0u64;
    let mut gt = 0u64;
    let mut intersection = 0u64;
    for (pv, gv) in p.data.iter().zip(&g.data) {
        let in_p = *pv == class;
        let in_g = *gv == class;
        pred += in_p as u64;
        gt += in_g as u64;
        intersection += (in_p && in_g) as u64;
    }
    ClassCounts {
        lobe: LOBE_NAMES[(class - 1) as usize].to_string(),
        pred,
        gt,
        intersection,
    }
}

fn dice_from_counts(c: &ClassCounts) -> f64 {
    if c.pred + c.gt == 0 {
        // agreement on absence
        1.0
    } else {
        2.0 * c.intersection as f64 / (c.pred + c.gt) as f64
    }
}

/// Sørensen–Dice for one class: `2|P∩G| / (|P|+|G|)`; 1.0 when both empty.
pub fn dice_per_class(p: &LabelMask, g: &LabelMask, class: u8) -> Result<f64> {
    check_dims(p, g)?;
    if class == 0 || class as usize >= crate::volume::NUM_CLASSES {
        return Err(Error::InvalidLabel(class));
    }
    Ok(dice_from_counts(&counts_for(p, g, class)))
}

/// Per-lobe dice for classes 1..=5 and the unweighted mean.
pub fn dice_average(p: &LabelMask, g: &LabelMask) -> Result<DiceReport> {
    check_dims(p, g)?;
    let counts = exec::map_collect(LOBE_CLASSES.len(), |i| counts_for(p, g, LOBE_CLASSES[i]));
    let per_class: Vec<(String, f64)> = counts
        .iter()
        .map(|c| (c.lobe.to_string(), dice_from_counts(c)))
        .collect();
    let average = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
    Ok(DiceReport {
        per_class,
        average,
        counts,
    })
}
