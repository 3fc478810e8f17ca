//! Flat-file emission: CSV report variants and plot-ready tables.

use std::fmt::Write as _;

use crate::reports::{McReport, MinimizeReport};

fn join_semicolon(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

pub fn minimize_csv(report: &MinimizeReport) -> String {
    let mut out = String::from(
        "index,energy,energy_invariant,residual_norm,residual_doubled,p0,q_terminal,x_terminal\n",
    );
    for (k, m) in report.minimizers.iter().enumerate() {
        let _ = writeln!(
            out,
            "{k},{},{},{:e},{:e},{},{},{}",
            m.energy,
            m.energy_invariant,
            m.residual_norm,
            m.residual_doubled,
            join_semicolon(&m.p0),
            join_semicolon(&m.q_terminal),
            join_semicolon(&m.x_terminal),
        );
    }
    out
}

pub fn mc_csv(report: &McReport) -> String {
    let mut out =
        String::from("eps,log_density,stderr_log,density,n_used,censored_fraction,bandwidth\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.eps,
            r.log_density,
            r.stderr_log,
            r.density,
            r.n_used,
            r.censored_fraction,
            join_semicolon(&r.bandwidth),
        );
    }
    out
}

/// Leading-order prediction log f(eps) = -c1/eps^2 + c2/eps - ell ln eps on a
/// grid of noise levels, ready for plotting against simulation output.
pub fn predicted_curve_csv(c1: f64, c2: f64, ell: usize, epsilons: &[f64]) -> String {
    let mut out = String::from("eps,predicted_log_density\n");
    for &eps in epsilons {
        let logf = -c1 / (eps * eps) + c2 / eps - ell as f64 * eps.ln();
        let _ = writeln!(out, "{eps},{logf}");
    }
    out
}

/// Rescaled exponent observable g(eps) = eps^2 log f + ell eps^2 ln eps next
/// to its fitted quadratic, one row per rung.
pub fn mc_curve_csv(report: &McReport) -> String {
    let ell = report.manifest.mask.len();
    let mut out = String::from("eps,g,g_fit,log_density,stderr_log\n");
    for r in &report.rows {
        let eps = r.eps;
        let g = eps * eps * r.log_density + ell as f64 * eps * eps * eps.ln();
        let g_fit =
            -report.fit.c1_hat + report.fit.c2_hat * eps + report.fit.curvature * eps * eps;
        let _ = writeln!(out, "{eps},{g},{g_fit},{},{}", r.log_density, r.stderr_log);
    }
    out
}
