//! Plot-ready CSV tables.

use std::io::Write;

use crate::behavioral::CalibrationBin;
use crate::error::Result;
use crate::inference::InferenceResult;
use crate::relspar::PathPoint;
use crate::simulate::{AveragedCell, CoverageReport};

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn indexed(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}_{j}")).collect()
}

/// One row per lambda: coefficients, behavioral coefficients, sd bands,
/// train and test value, KL, treatment probabilities and active flags.
pub fn write_path_csv<W: Write>(path: &[PathPoint], k: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["lambda".to_string()];
    header.extend(indexed("beta", k));
    header.extend(indexed("b", k));
    header.extend(indexed("sd_band", k));
    header.extend(["v_train", "v_train_se", "v_test", "kl", "prob_sugg", "prob_beh", "active_flags"].map(String::from));
    w.write_record(&header)?;
    for p in path {
        let mut row = vec![num(p.lambda)];
        row.extend(p.beta.as_slice().iter().map(|&v| num(v)));
        row.extend(p.b.as_slice().iter().map(|&v| num(v)));
        row.extend(p.sd_band.iter().map(|&v| num(v)));
        row.push(opt(p.value_train.map(|v| v.v_weighted)));
        row.push(opt(p.value_train.map(|v| v.se())));
        row.push(opt(p.value_test.map(|v| v.v_weighted)));
        row.push(num(p.kl));
        row.push(num(p.prob_sugg));
        row.push(num(p.prob_beh));
        row.push(active_flags(&p.active_set, k));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| crate::error::Error::io("path csv", e))?;
    Ok(())
}

/// `0`/`1` per coordinate, joined by `;`.
pub fn active_flags(active: &[usize], k: usize) -> String {
    (0..k).map(|j| if active.contains(&j) { "1" } else { "0" }).collect::<Vec<_>>().join(";")
}

/// Averaged selection-study path with empirical sds next to the sandwich bands.
pub fn write_averaged_path_csv<W: Write>(cell: &AveragedCell, k: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["lambda".to_string()];
    header.extend(indexed("beta", k));
    header.extend(indexed("b", k));
    header.extend(indexed("sd_band", k));
    header.extend(indexed("empirical_sd", k));
    header.extend(indexed("active_freq", k));
    header.extend(
        ["v_train", "v_train_se", "v_train_empirical_sd", "v_test", "kl", "prob_sugg", "prob_beh", "selected_freq"]
            .map(String::from),
    );
    w.write_record(&header)?;
    for (i, p) in cell.points.iter().enumerate() {
        let mut row = vec![num(p.lambda)];
        for v in [&p.mean_beta, &p.mean_b, &p.mean_sd_band, &p.sd_beta, &p.active_frequency] {
            row.extend(v.iter().map(|&x| num(x)));
        }
        for x in [
            p.mean_v_train,
            p.mean_v_train_se,
            p.sd_v_train,
            p.mean_v_test,
            p.mean_kl,
            p.mean_prob_sugg,
            p.mean_prob_beh,
            cell.selected_index_frequency[i],
        ] {
            row.push(num(x));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| crate::error::Error::io("averaged path csv", e))?;
    Ok(())
}

/// Post-selection table: one suggested-policy row and one behavioral row per
/// covariate. Pinned suggested coefficients carry no interval.
pub fn write_inference_csv<W: Write>(res: &InferenceResult, names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["covariate", "policy", "coefficient", "ci_low", "ci_high", "se", "pinned"])?;
    for (j, name) in names.iter().enumerate() {
        let pinned = !res.mask.is_active(j);
        let (lo, hi, se) = if pinned {
            (String::new(), String::new(), String::new())
        } else {
            (num(res.ci_lower[j]), num(res.ci_upper[j]), num(res.se[j]))
        };
        w.write_record([name.as_str(), "suggested", &num(res.beta.coefficients[j]), &lo, &hi, &se, if pinned { "1" } else { "0" }])?;
    }
    for (j, name) in names.iter().enumerate() {
        w.write_record([
            name.as_str(),
            "behavioral",
            &num(res.behavioral.b_n.coefficients[j]),
            &num(res.behavioral_ci_lower[j]),
            &num(res.behavioral_ci_upper[j]),
            &num(res.behavioral_se[j]),
            "0",
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("inference csv", e))?;
    Ok(())
}

/// One row per covariate with the suggested and behavioral coefficients side
/// by side. A pinned suggested coefficient shows `set to behavioral` and no
/// interval.
pub fn write_coefficient_table<W: Write>(res: &InferenceResult, names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["covariate", "suggested", "suggested_ci_low", "suggested_ci_high", "behavioral", "behavioral_ci_low", "behavioral_ci_high"])?;
    for (j, name) in names.iter().enumerate() {
        let (sugg, lo, hi) = if res.mask.is_active(j) {
            (num(res.beta.coefficients[j]), num(res.ci_lower[j]), num(res.ci_upper[j]))
        } else {
            ("set to behavioral".to_string(), String::new(), String::new())
        };
        w.write_record([
            name.clone(),
            sugg,
            lo,
            hi,
            num(res.behavioral.b_n.coefficients[j]),
            num(res.behavioral_ci_lower[j]),
            num(res.behavioral_ci_upper[j]),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("coefficient table", e))?;
    Ok(())
}

pub fn write_coverage_csv<W: Write>(reports: &[CoverageReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "gamma",
        "coordinate",
        "true_beta",
        "mean_estimate",
        "bias",
        "true_sd",
        "mean_estimated_sd",
        "coverage",
        "mean_ci_length",
        "replications",
        "failed",
        "not_converged",
        "n",
        "level",
    ])?;
    for r in reports {
        w.write_record([
            num(r.gamma),
            r.coordinate.to_string(),
            num(r.true_beta),
            num(r.mean_estimate),
            num(r.bias),
            num(r.true_sd),
            num(r.mean_estimated_sd),
            num(r.coverage),
            num(r.mean_ci_length),
            r.replications.to_string(),
            r.failed.to_string(),
            r.not_converged.to_string(),
            r.n.to_string(),
            num(r.level),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("coverage csv", e))?;
    Ok(())
}

pub fn write_calibration_csv<W: Write>(bins: &[CalibrationBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lower", "bin_upper", "mean_predicted", "observed", "count"])?;
    for b in bins {
        w.write_record([num(b.lower), num(b.upper), num(b.mean_predicted), num(b.observed), b.count.to_string()])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("calibration csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_and_numbers() {
        assert_eq!(active_flags(&[1], 3), "0;1;0");
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(num(0.25), "0.25");
    }
}
