//! Agreement between two devices measured on the same subjects.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ReplicatePanel;
use crate::stats::{mean, median, sample_sd, t_p_value, Z_95};

/// Distribution of subject-level daily means for one device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceSummary {
    pub n_subjects: usize,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
}

impl DeviceSummary {
    pub fn from_values(xs: &[f64]) -> Self {
        DeviceSummary {
            n_subjects: xs.len(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            median: median(xs),
            mean: mean(xs),
            sd: sample_sd(xs),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlandAltman {
    /// Mean of `a - b`.
    pub mean_difference: f64,
    pub sd_difference: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub n_paired: usize,
    pub device_a: DeviceSummary,
    pub device_b: DeviceSummary,
    pub pearson_r: f64,
    pub pearson_p_value: f64,
    pub bland_altman: BlandAltman,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Compares subject-level means over the subjects present in both panels.
pub fn compare(a: &ReplicatePanel, b: &ReplicatePanel) -> Result<AgreementReport> {
    let b_index: HashMap<&str, usize> = b
        .subject_ids()
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let (xa, xb): (Vec<f64>, Vec<f64>) = a
        .subject_ids()
        .iter()
        .enumerate()
        .filter_map(|(i, id)| b_index.get(id.as_str()).map(|&k| (a.subject_mean(i), b.subject_mean(k))))
        .unzip();
    let n = xa.len();
    if n == 0 {
        return Err(Error::Data("the two devices share no subject ids".into()));
    }
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 shared subjects, found {n}")));
    }
    let r = pearson(&xa, &xb);
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt();
        t_p_value(t, n as f64 - 2.0)
    };
    let diffs: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x - y).collect();
    let md = mean(&diffs);
    let sd = sample_sd(&diffs);
    Ok(AgreementReport {
        n_paired: n,
        device_a: DeviceSummary::from_values(&xa),
        device_b: DeviceSummary::from_values(&xb),
        pearson_r: r,
        pearson_p_value: p,
        bland_altman: BlandAltman {
            mean_difference: md,
            sd_difference: sd,
            lower_limit: md - Z_95 * sd,
            upper_limit: md + Z_95 * sd,
        },
    })
}
