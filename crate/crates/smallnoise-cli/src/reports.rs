//! Serializable report types. Every subcommand emits one of these, headed by
//! a manifest that pins down the inputs so a run can be reproduced from its
//! own output.

use std::collections::BTreeMap;

use serde::Serialize;
use smallnoise::bvp::{Minimizer, MinimizerSet};
use smallnoise::expansion::{ExpansionMode, ExpansionResult, MinimizerContribution};
use smallnoise::montecarlo::{McRow, McValidation};
use smallnoise::nondegeneracy::{
    BracketDiagnostics, FocalityVerdict, MinimizerCertificate, NdReport, NdVerdict,
};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub model: String,
    pub params: BTreeMap<String, f64>,
    /// Effective projection mask, natural coordinate indices.
    pub mask: Vec<usize>,
    pub target: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub multistart: Option<usize>,
    pub steps: Option<usize>,
    pub paths: Option<usize>,
    pub euler_steps: Option<usize>,
    pub epsilons: Option<Vec<f64>>,
    pub version: String,
    pub timestamp: String,
}

#[derive(Serialize)]
pub struct MinimizerRow {
    pub p0: Vec<f64>,
    pub energy: f64,
    pub energy_invariant: f64,
    pub residual_norm: f64,
    pub residual_doubled: f64,
    pub q_terminal: Vec<f64>,
    pub x_terminal: Vec<f64>,
}

impl MinimizerRow {
    fn new(m: &Minimizer) -> Self {
        MinimizerRow {
            p0: m.p0.iter().cloned().collect(),
            energy: m.energy,
            energy_invariant: m.energy_invariant,
            residual_norm: m.residual_norm,
            residual_doubled: m.residual_doubled,
            q_terminal: m.q_terminal.iter().cloned().collect(),
            x_terminal: m.x_terminal.iter().cloned().collect(),
        }
    }
}

#[derive(Serialize)]
pub struct MinimizeReport {
    pub manifest: RunManifest,
    pub lambda: f64,
    pub attempted: usize,
    pub converged: usize,
    pub continuum: bool,
    pub degenerate_zero_control: bool,
    pub distinct_solutions: usize,
    pub minimizers: Vec<MinimizerRow>,
}

impl MinimizeReport {
    pub fn new(manifest: RunManifest, set: &MinimizerSet) -> Self {
        MinimizeReport {
            manifest,
            lambda: set.lambda,
            attempted: set.attempted,
            converged: set.converged,
            continuum: set.continuum_flag,
            degenerate_zero_control: set.degenerate_zero_control,
            distinct_solutions: set.solutions.len(),
            minimizers: set.minimizers.iter().map(MinimizerRow::new).collect(),
        }
    }
}

#[derive(Serialize)]
pub struct BracketRow {
    pub rank: usize,
    pub full_rank: bool,
    pub depth_used: usize,
    pub ranks_by_depth: Vec<usize>,
    pub include_drift: bool,
}

impl BracketRow {
    fn new(b: &BracketDiagnostics) -> Self {
        BracketRow {
            rank: b.rank,
            full_rank: b.full_rank,
            depth_used: b.depth_used,
            ranks_by_depth: b.ranks_by_depth.clone(),
            include_drift: b.include_drift,
        }
    }
}

#[derive(Serialize)]
pub struct HessianRow {
    pub lambda_min: f64,
    /// Lowest eigenvalues of the projected Hessian, at most eight.
    pub eigenvalues_head: Vec<f64>,
    pub grid: usize,
}

#[derive(Serialize)]
pub struct CertificateRow {
    pub covariance_invertible: bool,
    pub covariance_sigma_min: f64,
    pub covariance_sigma_max: f64,
    pub ellipticity_time: Option<f64>,
    pub focality: String,
    pub focality_det: f64,
    pub focality_ratio: f64,
    pub hessian: Option<HessianRow>,
}

impl CertificateRow {
    fn new(c: &MinimizerCertificate) -> Self {
        CertificateRow {
            covariance_invertible: c.covariance_invertible,
            covariance_sigma_min: c.covariance_sigma_min,
            covariance_sigma_max: c.covariance_sigma_max,
            ellipticity_time: c.ellipticity_time,
            focality: focality_str(c.focality).to_string(),
            focality_det: c.focality_det,
            focality_ratio: c.focality_ratio,
            hessian: c.hessian.as_ref().map(|h| HessianRow {
                lambda_min: h.lambda_min,
                eigenvalues_head: h.eigenvalues.iter().take(8).cloned().collect(),
                grid: h.grid,
            }),
        }
    }
}

#[derive(Serialize)]
pub struct CheckNdReport {
    pub manifest: RunManifest,
    pub verdict: String,
    pub lambda: f64,
    pub minimizer_count: usize,
    pub certificates: Vec<CertificateRow>,
    pub weak_bracket: BracketRow,
    pub strong_bracket: BracketRow,
}

impl CheckNdReport {
    pub fn new(manifest: RunManifest, set: &MinimizerSet, nd: &NdReport) -> Self {
        CheckNdReport {
            manifest,
            verdict: verdict_str(nd.verdict).to_string(),
            lambda: set.lambda,
            minimizer_count: set.minimizers.len(),
            certificates: nd.certificates.iter().map(CertificateRow::new).collect(),
            weak_bracket: BracketRow::new(&nd.weak_bracket),
            strong_bracket: BracketRow::new(&nd.strong_bracket),
        }
    }
}

#[derive(Serialize)]
pub struct ContributionRow {
    pub c2_term: f64,
    pub yhat_terminal: Vec<f64>,
    pub gradient_fd: Option<Vec<f64>>,
    pub gradient_gap: Option<f64>,
}

impl ContributionRow {
    fn new(c: &MinimizerContribution) -> Self {
        ContributionRow {
            c2_term: c.c2_term,
            yhat_terminal: c.yhat_terminal.iter().cloned().collect(),
            gradient_fd: c.gradient_fd.as_ref().map(|g| g.iter().cloned().collect()),
            gradient_gap: c.gradient_gap,
        }
    }
}

#[derive(Serialize)]
pub struct ExpandReport {
    pub manifest: RunManifest,
    pub mode: String,
    pub c1: f64,
    pub c2: f64,
    pub ell: usize,
    /// sqrt(2 c1); reported in short-time mode.
    pub distance: Option<f64>,
    pub certified: bool,
    pub verdict: String,
    pub contributions: Vec<ContributionRow>,
    pub minimizers: Vec<MinimizerRow>,
}

impl ExpandReport {
    pub fn new(manifest: RunManifest, r: &ExpansionResult) -> Self {
        ExpandReport {
            manifest,
            mode: match r.mode {
                ExpansionMode::SmallNoise => "SMALL_NOISE".to_string(),
                ExpansionMode::ShortTime => "SHORT_TIME".to_string(),
            },
            c1: r.c1,
            c2: r.c2,
            ell: r.ell,
            distance: r.distance,
            certified: r.certified,
            verdict: verdict_str(r.nd.verdict).to_string(),
            contributions: r.contributions.iter().map(ContributionRow::new).collect(),
            minimizers: r.set.minimizers.iter().map(MinimizerRow::new).collect(),
        }
    }
}

#[derive(Serialize)]
pub struct LocalizationCell {
    pub radius: f64,
    pub prob: f64,
    pub eps2_log_prob: f64,
}

#[derive(Serialize)]
pub struct McRowOut {
    pub eps: f64,
    pub log_density: f64,
    pub stderr_log: f64,
    pub density: f64,
    pub n_used: usize,
    pub censored_fraction: f64,
    pub bandwidth: Vec<f64>,
    pub localization: Vec<LocalizationCell>,
}

impl McRowOut {
    fn new(r: &McRow) -> Self {
        McRowOut {
            eps: r.eps,
            log_density: r.estimate.log_density,
            stderr_log: r.estimate.stderr_log,
            density: r.estimate.density,
            n_used: r.estimate.n_used,
            censored_fraction: r.censored_fraction,
            bandwidth: r.estimate.bandwidth.clone(),
            localization: r
                .localization
                .iter()
                .map(|l| LocalizationCell {
                    radius: l.radius,
                    prob: l.prob,
                    eps2_log_prob: l.eps2_log_prob,
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
pub struct FitRow {
    pub c1_hat: f64,
    pub c2_hat: f64,
    pub curvature: f64,
    pub residual_rms: f64,
}

#[derive(Serialize)]
pub struct ReferenceRow {
    pub c1: f64,
    pub c2: f64,
}

#[derive(Serialize)]
pub struct McReport {
    pub manifest: RunManifest,
    pub rows: Vec<McRowOut>,
    pub fit: FitRow,
    pub valid: bool,
    pub warnings: Vec<String>,
    pub reference: Option<ReferenceRow>,
    pub c1_relative_error: Option<f64>,
    pub c2_relative_error: Option<f64>,
}

impl McReport {
    pub fn new(manifest: RunManifest, v: &McValidation) -> Self {
        McReport {
            manifest,
            rows: v.rows.iter().map(McRowOut::new).collect(),
            fit: FitRow {
                c1_hat: v.fit.c1_hat,
                c2_hat: v.fit.c2_hat,
                curvature: v.fit.curvature,
                residual_rms: v.fit.residual_rms,
            },
            valid: v.valid,
            warnings: v.warnings.clone(),
            reference: v.reference.map(|(c1, c2)| ReferenceRow { c1, c2 }),
            c1_relative_error: v.c1_error,
            c2_relative_error: v.c2_error,
        }
    }
}

pub fn verdict_str(v: NdVerdict) -> &'static str {
    match v {
        NdVerdict::NdHolds => "ND_HOLDS",
        NdVerdict::Continuum => "CONTINUUM",
        NdVerdict::SingularMalliavin => "SINGULAR_MALLIAVIN",
        NdVerdict::Focal => "FOCAL",
        NdVerdict::Undecided => "UNDECIDED",
    }
}

pub fn focality_str(v: FocalityVerdict) -> &'static str {
    match v {
        FocalityVerdict::NonFocal => "NON_FOCAL",
        FocalityVerdict::Focal => "FOCAL",
        FocalityVerdict::Undecided => "UNDECIDED",
    }
}
