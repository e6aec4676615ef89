//! Discrete-time proportional hazards: `g(h(t | x)) = alpha_t + beta' x`.
//!
//! Person-period records are collapsed into binomial cells, one per
//! (period, covariate vector), and the likelihood is maximised by damped
//! Newton steps on the expected information (exact Newton for the logit link).
//! Cells with no events or only events push estimates to infinity; those are
//! detected up front and, for the logit link, fitted with Firth's penalised
//! likelihood instead.

use super::mortality::PersonPeriodRecord;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Logit,
    /// Complementary log-log, the grouped-time analogue of a continuous PH model.
    Cloglog,
}

impl std::str::FromStr for Link {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logit" => Ok(Link::Logit),
            "cloglog" => Ok(Link::Cloglog),
            other => Err(format!("unknown link `{other}` (expected logit or cloglog)")),
        }
    }
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Link::Logit => "logit",
            Link::Cloglog => "cloglog",
        })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Link {
    /// Hazard for linear predictor `eta`.
    pub fn hazard(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Link::Cloglog => -(-eta.exp()).exp_m1(),
        }
    }

    /// Linear predictor for hazard `h`.
    pub fn eta(self, h: f64) -> f64 {
        match self {
            Link::Logit => (h / (1.0 - h)).ln(),
            Link::Cloglog => (-(-h).ln_1p()).ln(),
        }
    }

    /// `d log L / d eta` for `events` out of `trials` at `eta`.
    fn score(self, eta: f64, trials: f64, events: f64) -> f64 {
        match self {
            Link::Logit => events - trials * self.hazard(eta),
            Link::Cloglog => {
                let e = eta.exp();
                let h = self.hazard(eta);
                events * e * (1.0 - h) / h - (trials - events) * e
            }
        }
    }

    /// Expected information weight per cell.
    fn weight(self, eta: f64, trials: f64) -> f64 {
        let h = self.hazard(eta);
        match self {
            Link::Logit => trials * h * (1.0 - h),
            Link::Cloglog => {
                let e = eta.exp();
                trials * e * e * (1.0 - h) / h
            }
        }
    }

    fn log_likelihood(self, eta: f64, trials: f64, events: f64) -> f64 {
        match self {
            Link::Logit => events * eta - trials * softplus(eta),
            Link::Cloglog => {
                let e = eta.exp();
                let log_h = (-(-e).exp_m1()).ln();
                let mut ll = -(trials - events) * e;
                if events > 0.0 {
                    ll += events * log_h;
                }
                ll
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cell {
    period: usize,
    x: Vec<f64>,
    trials: f64,
    events: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("no events in the data")]
    NoEvents,
    #[error("records disagree on covariate dimension")]
    DimensionMismatch,
    #[error("period {0} has no records at risk")]
    MissingPeriod(u32),
    #[error("complete separation: {0:?}")]
    CompleteSeparation(Vec<String>),
    #[error("information matrix is singular (design not of full rank)")]
    SingularDesign,
    #[error("no convergence after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationPolicy {
    /// Fall back to Firth-penalised estimation and flag the affected cells.
    #[default]
    Firth,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub link: Link,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub separation: SeparationPolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            link: Link::Logit,
            gradient_tolerance: 1e-8,
            max_iterations: 100,
            separation: SeparationPolicy::Firth,
        }
    }
}

/// The grouped-binomial likelihood for a set of person-period records.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardModel {
    pub link: Link,
    n_periods: usize,
    n_covariates: usize,
    cells: Vec<Cell>,
}

type CellTotals = (Vec<f64>, f64, f64);

impl HazardModel {
    pub fn from_records(records: &[PersonPeriodRecord], link: Link) -> Result<HazardModel, FitError> {
        let n_covariates = records.first().map_or(0, |r| r.covariates.len());
        // (period, covariate bits) -> (covariates, at risk, events)
        let mut grouped: BTreeMap<(u32, Vec<u64>), CellTotals> = BTreeMap::new();
        for r in records {
            if r.covariates.len() != n_covariates {
                return Err(FitError::DimensionMismatch);
            }
            let bits = r.covariates.iter().map(|v| v.to_bits()).collect();
            let cell = grouped
                .entry((r.period, bits))
                .or_insert_with(|| (r.covariates.clone(), 0.0, 0.0));
            cell.1 += 1.0;
            if r.event {
                cell.2 += 1.0;
            }
        }
        let n_periods = grouped.keys().map(|(p, _)| *p).max().unwrap_or(0) as usize;
        for p in 1..=n_periods as u32 {
            if !grouped.keys().any(|(q, _)| *q == p) {
                return Err(FitError::MissingPeriod(p));
            }
        }
        let cells = grouped
            .into_iter()
            .map(|((period, _), (x, trials, events))| Cell {
                period: period as usize - 1,
                x,
                trials,
                events,
            })
            .collect();
        Ok(HazardModel {
            link,
            n_periods,
            n_covariates,
            cells,
        })
    }

    /// Same periods, covariates dropped.
    fn without_covariates(&self) -> HazardModel {
        let mut merged: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for c in &self.cells {
            let e = merged.entry(c.period).or_default();
            e.0 += c.trials;
            e.1 += c.events;
        }
        HazardModel {
            link: self.link,
            n_periods: self.n_periods,
            n_covariates: 0,
            cells: merged
                .into_iter()
                .map(|(period, (trials, events))| Cell {
                    period,
                    x: Vec::new(),
                    trials,
                    events,
                })
                .collect(),
        }
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Period effects first, then covariate coefficients.
    pub fn n_params(&self) -> usize {
        self.n_periods + self.n_covariates
    }

    pub fn total_events(&self) -> f64 {
        self.cells.iter().map(|c| c.events).sum()
    }

    pub fn total_records(&self) -> f64 {
        self.cells.iter().map(|c| c.trials).sum()
    }

    fn eta(&self, theta: &[f64], cell: &Cell) -> f64 {
        let beta = &theta[self.n_periods..];
        theta[cell.period] + cell.x.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>()
    }

    fn design_row(&self, cell: &Cell) -> DVector<f64> {
        let mut row = DVector::zeros(self.n_params());
        row[cell.period] = 1.0;
        for (j, x) in cell.x.iter().enumerate() {
            row[self.n_periods + j] = *x;
        }
        row
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.cells
            .iter()
            .map(|c| self.link.log_likelihood(self.eta(theta, c), c.trials, c.events))
            .sum()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params()];
        for c in &self.cells {
            let u = self.link.score(self.eta(theta, c), c.trials, c.events);
            g[c.period] += u;
            for (j, x) in c.x.iter().enumerate() {
                g[self.n_periods + j] += u * x;
            }
        }
        g
    }

    /// Expected (Fisher) information.
    pub fn information(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = self.n_params();
        let mut info = DMatrix::zeros(p, p);
        for c in &self.cells {
            let w = self.link.weight(self.eta(theta, c), c.trials);
            let row = self.design_row(c);
            info.ger(w, &row, &row, 1.0);
        }
        info
    }

    fn penalized_objective(&self, theta: &[f64]) -> f64 {
        let info = self.information(theta);
        match Cholesky::new(info) {
            Some(ch) => {
                let log_det: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
                self.log_likelihood(theta) + 0.5 * log_det
            }
            None => f64::NEG_INFINITY,
        }
    }

    /// Firth-modified score for the logit link.
    fn firth_score(&self, theta: &[f64], chol: &Cholesky<f64, Dyn>) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params()];
        for c in &self.cells {
            let eta = self.eta(theta, c);
            let h = self.link.hazard(eta);
            let w = self.link.weight(eta, c.trials);
            let row = self.design_row(c);
            let leverage = w * row.dot(&chol.solve(&row));
            let u = c.events - c.trials * h + leverage * (0.5 - h);
            for (k, g_k) in g.iter_mut().enumerate() {
                *g_k += u * row[k];
            }
        }
        g
    }

    fn objective(&self, theta: &[f64], penalized: bool) -> f64 {
        if penalized {
            self.penalized_objective(theta)
        } else {
            self.log_likelihood(theta)
        }
    }

    fn starting_point(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_params()];
        let mut per: Vec<(f64, f64)> = vec![(0.0, 0.0); self.n_periods];
        for c in &self.cells {
            per[c.period].0 += c.trials;
            per[c.period].1 += c.events;
        }
        for (t, (n, d)) in per.into_iter().enumerate() {
            theta[t] = self.link.eta((d + 0.5) / (n + 1.0));
        }
        theta
    }

    fn maximize(&self, penalized: bool, opts: &FitOptions) -> Result<Optimum, FitError> {
        let mut theta = self.starting_point();
        let mut gradient_norm = f64::INFINITY;
        for iteration in 0..=opts.max_iterations {
            let chol = Cholesky::new(self.information(&theta)).ok_or(FitError::SingularDesign)?;
            let g = if penalized {
                self.firth_score(&theta, &chol)
            } else {
                self.gradient(&theta)
            };
            gradient_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !gradient_norm.is_finite() {
                break;
            }
            if gradient_norm < opts.gradient_tolerance {
                return Ok(Optimum {
                    objective: self.objective(&theta, penalized),
                    theta,
                    iterations: iteration,
                    gradient_norm,
                });
            }
            if iteration == opts.max_iterations {
                break;
            }
            let step = chol.solve(&DVector::from_vec(g));
            let current = self.objective(&theta, penalized);
            let slack = 1e-10 * (1.0 + current.abs());
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..50 {
                let candidate: Vec<f64> = theta
                    .iter()
                    .zip(step.iter())
                    .map(|(t, s)| t + scale * s)
                    .collect();
                let value = self.objective(&candidate, penalized);
                if value.is_finite() && value >= current - slack {
                    accepted = Some(candidate);
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some(next) => theta = next,
                None => break,
            }
        }
        Err(FitError::NonConvergence {
            iterations: opts.max_iterations,
            gradient_norm,
        })
    }

    /// Cells whose maximum-likelihood estimate lies at infinity.
    pub fn separated_cells(&self, covariate_names: &[String]) -> Vec<String> {
        let mut flags = Vec::new();
        let mut check = |label: String, n: f64, d: f64| {
            if n > 0.0 && d == 0.0 {
                flags.push(format!("{label}: no events"));
            } else if n > 0.0 && d == n {
                flags.push(format!("{label}: all events"));
            }
        };
        for t in 0..self.n_periods {
            let (n, d) = self
                .cells
                .iter()
                .filter(|c| c.period == t)
                .fold((0.0, 0.0), |(n, d), c| (n + c.trials, d + c.events));
            check(format!("period {}", t + 1), n, d);
        }
        for j in 0..self.n_covariates {
            let (n, d) = self
                .cells
                .iter()
                .filter(|c| c.x[j] != 0.0)
                .fold((0.0, 0.0), |(n, d), c| (n + c.trials, d + c.events));
            let name = covariate_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("x{j}"));
            check(name, n, d);
        }
        flags
    }
}

struct Optimum {
    theta: Vec<f64>,
    objective: f64,
    iterations: usize,
    gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalFit {
    pub link: Link,
    /// `alpha_t` for t = 1..=P.
    pub period_effects: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub wald: Vec<WaldTest>,
    /// Maximised objective: the log-likelihood, or the penalised one when `penalized`.
    pub log_likelihood: f64,
    pub null_log_likelihood: Option<f64>,
    pub lr_statistic: Option<f64>,
    pub df: usize,
    /// Likelihood-ratio test of the covariate block against period effects only.
    pub p_value: Option<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub penalized: bool,
    pub separation: Vec<String>,
    pub n_records: usize,
    pub n_events: usize,
}

impl SurvivalFit {
    pub fn n_periods(&self) -> usize {
        self.period_effects.len()
    }

    /// Fitted hazard in `period` (1-based) for covariate profile `x`.
    pub fn hazard(&self, period: u32, x: &[f64]) -> f64 {
        let lp: f64 = self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum();
        self.link.hazard(self.period_effects[period as usize - 1] + lp)
    }

    pub fn hazards(&self, x: &[f64]) -> Vec<f64> {
        (1..=self.n_periods() as u32).map(|t| self.hazard(t, x)).collect()
    }
}

/// `S(t) = prod_{s <= t} (1 - h(s))` for t = 1..=len.
pub fn survival_from_hazards(hazards: &[f64]) -> Vec<f64> {
    hazards
        .iter()
        .scan(1.0, |s, h| {
            *s *= 1.0 - h;
            Some(*s)
        })
        .collect()
}

/// `(t, S(t | x))` for every fitted period. `1 - S(t)` is the chance the
/// branch has stopped improving by transition t.
pub fn survival_curve(fit: &SurvivalFit, x: &[f64]) -> Vec<(u32, f64)> {
    survival_from_hazards(&fit.hazards(x))
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as u32 + 1, s))
        .collect()
}

pub fn fit_discrete_hazard(
    records: &[PersonPeriodRecord],
    covariate_names: &[String],
    opts: &FitOptions,
) -> Result<SurvivalFit, FitError> {
    let model = HazardModel::from_records(records, opts.link)?;
    if model.total_events() == 0.0 {
        return Err(FitError::NoEvents);
    }
    let mut separation = model.separated_cells(covariate_names);
    let firth_allowed = opts.separation == SeparationPolicy::Firth && opts.link == Link::Logit;
    let mut penalized = false;
    if !separation.is_empty() {
        if !firth_allowed {
            return Err(FitError::CompleteSeparation(separation));
        }
        penalized = true;
    }
    let optimum = match model.maximize(penalized, opts) {
        Err(FitError::NonConvergence { .. }) if !penalized && firth_allowed => {
            separation.push("numerical divergence".into());
            penalized = true;
            model.maximize(true, opts)?
        }
        other => other?,
    };

    let (null_ll, lr, p_value) = if model.n_covariates() > 0 {
        let null = model.without_covariates().maximize(penalized, opts)?;
        let lr = (2.0 * (optimum.objective - null.objective)).max(0.0);
        let chi2 = ChiSquared::new(model.n_covariates() as f64).expect("df >= 1");
        (Some(null.objective), Some(lr), Some(chi2.sf(lr)))
    } else {
        (None, None, None)
    };

    let covariance = Cholesky::new(model.information(&optimum.theta))
        .ok_or(FitError::SingularDesign)?
        .inverse();
    let normal = Normal::standard();
    let names: Vec<String> = (0..model.n_covariates())
        .map(|j| covariate_names.get(j).cloned().unwrap_or_else(|| format!("x{j}")))
        .collect();
    let wald = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let k = model.n_periods() + j;
            let estimate = optimum.theta[k];
            let std_error = covariance[(k, k)].sqrt();
            let z = estimate / std_error;
            WaldTest {
                name: name.clone(),
                estimate,
                std_error,
                z,
                p_value: 2.0 * normal.sf(z.abs()),
            }
        })
        .collect();

    Ok(SurvivalFit {
        link: opts.link,
        period_effects: optimum.theta[..model.n_periods()].to_vec(),
        covariate_names: names,
        coefficients: optimum.theta[model.n_periods()..].to_vec(),
        wald,
        log_likelihood: optimum.objective,
        null_log_likelihood: null_ll,
        lr_statistic: lr,
        df: model.n_covariates(),
        p_value,
        iterations: optimum.iterations,
        gradient_norm: optimum.gradient_norm,
        penalized,
        separation,
        n_records: model.total_records() as usize,
        n_events: model.total_events() as usize,
    })
}
