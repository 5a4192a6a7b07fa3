//! Plot-ready CSV exports from metrics files and evaluation reports.

use std::io::Write;

use super::eval::EvalReport;
use super::{HarnessError, HarnessResult};

pub const LOSS_CURVE_HEADER: &str = "iteration,train_loss,val_loss,grad_var,wall_ms";
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,hedged,unhedged,delta_only";

/// Keeps the loss-related columns of a metrics CSV. An empty input yields a
/// header-only output.
pub fn loss_curves(metrics_csv: &str, out: &mut impl Write) -> HarnessResult<usize> {
    writeln!(out, "{LOSS_CURVE_HEADER}")?;
    let mut lines = metrics_csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok(0);
    };
    let cols: Vec<&str> = header.split(',').collect();
    let wanted: Vec<usize> = LOSS_CURVE_HEADER
        .split(',')
        .map(|name| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| HarnessError::Config(format!("metrics file lacks column {name}")))
        })
        .collect::<HarnessResult<_>>()?;
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(HarnessError::Config(format!("metrics row with {} fields: {line:?}", f.len())));
        }
        let picked: Vec<&str> = wanted.iter().map(|&k| f[k]).collect();
        writeln!(out, "{}", picked.join(","))?;
        rows += 1;
    }
    Ok(rows)
}

pub fn histogram_csv(report: &EvalReport, out: &mut impl Write) -> HarnessResult<()> {
    writeln!(out, "{HISTOGRAM_HEADER}")?;
    let h = &report.histograms;
    for k in 0..h.hedged.len() {
        writeln!(
            out,
            "{:e},{:e},{},{},{}",
            h.edges[k],
            h.edges[k + 1],
            h.hedged[k],
            h.unhedged[k],
            h.delta_only[k]
        )?;
    }
    Ok(())
}

/// One row per step and instrument with the action quantile bands.
pub fn fan_chart_csv(report: &EvalReport, out: &mut impl Write) -> HarnessResult<()> {
    let levels: Vec<String> = report.quantile_levels.iter().map(|q| format!("q{:02}", (q * 100.0).round())).collect();
    writeln!(out, "step,instrument,{}", levels.join(","))?;
    for a in &report.action_quantiles {
        let vals: Vec<String> = a.values.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{},{},{}", a.step, a.instrument, vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metrics_give_header_only() {
        let mut out = Vec::new();
        assert_eq!(loss_curves("", &mut out).unwrap(), 0);
        assert_eq!(String::from_utf8(out).unwrap(), format!("{LOSS_CURVE_HEADER}\n"));
    }

    #[test]
    fn loss_columns_are_selected() {
        let metrics = "iteration,train_loss,val_loss,eta,rho_tr,grad_var,d_max.embed,wall_ms\n\
                       0,,1.5,,,2,,3.0\n\
                       1,1.4,,0.1,0.5,,7,4.0\n";
        let mut out = Vec::new();
        assert_eq!(loss_curves(metrics, &mut out).unwrap(), 2);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, format!("{LOSS_CURVE_HEADER}\n0,,1.5,2,3.0\n1,1.4,,,4.0\n"));
    }

    #[test]
    fn malformed_metrics_are_rejected() {
        let mut out = Vec::new();
        assert!(loss_curves("iteration,foo\n1,2\n", &mut out).is_err());
    }
}
