//! Benchmark report: per-trip rows, per-controller aggregates, and the
//! metric definitions used everywhere (fuel economy, SoC-deficit fuel
//! correction, SoC variance). All derived metrics are recomputed from the
//! raw step quantities through these functions, so a report can be audited
//! against its logs exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::powertrain::{PowertrainParams, WILLANS_B_KG_PER_J};
use crate::traffic::EpisodeStatus;

/// Gasoline mass per US gallon: 0.743 kg/L × 3.78541 L/gal.
pub const KG_PER_GALLON: f64 = 2.81256;

pub const METERS_PER_MILE: f64 = 1609.344;

/// Miles per gallon-equivalent from distance and fuel mass.
pub fn fuel_economy_mpg(distance_m: f64, fuel_g: f64) -> f64 {
    if fuel_g <= 0.0 {
        return f64::INFINITY;
    }
    (distance_m / METERS_PER_MILE) / (fuel_g / 1000.0 / KG_PER_GALLON)
}

/// Fuel-equivalent of a terminal charge shortfall against `soc_target`:
/// the missing battery energy divided by the belt-machine efficiency and
/// converted at the engine's marginal Willans slope. Zero when the trip
/// ends at or above the target.
pub fn soc_deficit_fuel_g(soc_end: f64, soc_target: f64, pt: &PowertrainParams) -> f64 {
    let deficit = (soc_target - soc_end).max(0.0);
    if deficit == 0.0 {
        return 0.0;
    }
    let e_j = deficit * pt.c_nom_as * pt.v_oc_v.eval(soc_target);
    1000.0 * e_j * WILLANS_B_KG_PER_J / pt.eta_bsg
}

/// Population variance of a SoC series, in percentage points squared.
pub fn soc_variance_pct2(soc: &[f64]) -> f64 {
    if soc.is_empty() {
        return 0.0;
    }
    let n = soc.len() as f64;
    let mean = soc.iter().sum::<f64>() / n;
    soc.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n * 10_000.0
}

/// One (trip, controller) outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripRow {
    pub seed: u64,
    pub controller: String,
    pub status: EpisodeStatus,
    pub distance_m: f64,
    pub time_s: f64,
    pub fuel_g: f64,
    pub avg_speed_mps: f64,
    pub mpg: f64,
    /// Fuel economy after charging the terminal SoC deficit to fuel.
    pub mpg_soc_corrected: f64,
    pub terminal_soc: f64,
    pub soc_variance_pct2: f64,
    /// Realized weighted cost (fuel/time blend accumulated by the env).
    pub cost: f64,
    /// Free-form note (e.g. failure detail); empty when clean.
    pub note: String,
}

impl TripRow {
    /// Builds a row from raw trip quantities; every derived metric goes
    /// through the shared definitions above.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        seed: u64,
        controller: &str,
        status: EpisodeStatus,
        distance_m: f64,
        time_s: f64,
        fuel_g: f64,
        soc_series: &[f64],
        terminal_soc: f64,
        cost: f64,
        pt: &PowertrainParams,
        note: String,
    ) -> Self {
        let corrected_fuel = fuel_g + soc_deficit_fuel_g(terminal_soc, pt.soc_terminal_min, pt);
        TripRow {
            seed,
            controller: controller.to_string(),
            status,
            distance_m,
            time_s,
            fuel_g,
            avg_speed_mps: if time_s > 0.0 { distance_m / time_s } else { 0.0 },
            mpg: fuel_economy_mpg(distance_m, fuel_g),
            mpg_soc_corrected: fuel_economy_mpg(distance_m, corrected_fuel),
            terminal_soc,
            soc_variance_pct2: soc_variance_pct2(soc_series),
            cost,
            note,
        }
    }
}

/// Per-controller aggregate over a trip set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub trips: usize,
    pub goal_rate: f64,
    pub mean_cost: f64,
    pub mean_fuel_g: f64,
    pub mean_mpg: f64,
    pub mean_avg_speed_mps: f64,
    /// Mean over trips of each trip's SoC-series variance, %².
    pub mean_soc_variance_pct2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<TripRow>,
    pub summaries: Vec<ControllerSummary>,
}

pub const TRIP_CSV_HEADER: &str = "seed,controller,status,distance_m,time_s,fuel_g,avg_speed_mps,\
mpg,mpg_soc_corrected,terminal_soc,soc_variance_pct2,cost,note";

impl BenchmarkReport {
    pub fn new(rows: Vec<TripRow>) -> Self {
        let mut by: BTreeMap<String, Vec<&TripRow>> = BTreeMap::new();
        for r in &rows {
            by.entry(r.controller.clone()).or_default().push(r);
        }
        let summaries = by
            .into_iter()
            .map(|(controller, rs)| {
                let n = rs.len() as f64;
                let goals = rs
                    .iter()
                    .filter(|r| r.status == EpisodeStatus::GoalReached)
                    .count() as f64;
                let mean = |f: &dyn Fn(&TripRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                ControllerSummary {
                    controller,
                    trips: rs.len(),
                    goal_rate: goals / n,
                    mean_cost: mean(&|r| r.cost),
                    mean_fuel_g: mean(&|r| r.fuel_g),
                    mean_mpg: mean(&|r| r.mpg),
                    mean_avg_speed_mps: mean(&|r| r.avg_speed_mps),
                    mean_soc_variance_pct2: mean(&|r| r.soc_variance_pct2),
                }
            })
            .collect();
        BenchmarkReport { rows, summaries }
    }

    /// Deterministic CSV: a header comment documenting the conversion
    /// constants, the column header, then one row per (trip, controller).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# fuel economy uses {KG_PER_GALLON} kg/gallon (0.743 kg/L x 3.78541 L/gal), \
{METERS_PER_MILE} m/mile\n"
        ));
        out.push_str(
            "# soc-corrected mpg charges max(0, soc_floor - terminal_soc) at the marginal \
Willans slope over the belt efficiency\n",
        );
        out.push_str(TRIP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.seed,
                r.controller,
                r.status,
                r.distance_m,
                r.time_s,
                r.fuel_g,
                r.avg_speed_mps,
                r.mpg,
                r.mpg_soc_corrected,
                r.terminal_soc,
                r.soc_variance_pct2,
                r.cost,
                r.note
            ));
        }
        out.push_str("controller,trips,goal_rate,mean_cost,mean_fuel_g,mean_mpg,mean_avg_speed_mps,mean_soc_variance_pct2\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.controller,
                s.trips,
                s.goal_rate,
                s.mean_cost,
                s.mean_fuel_g,
                s.mean_mpg,
                s.mean_avg_speed_mps,
                s.mean_soc_variance_pct2
            ));
        }
        out
    }

    /// Metric identity audit: every derived column must reproduce exactly
    /// from the row's raw fields through the shared metric functions.
    pub fn audit(&self, pt: &PowertrainParams) -> Result<(), String> {
        for r in &self.rows {
            let avg = if r.time_s > 0.0 { r.distance_m / r.time_s } else { 0.0 };
            if avg != r.avg_speed_mps {
                return Err(format!("seed {}: avg speed mismatch", r.seed));
            }
            if fuel_economy_mpg(r.distance_m, r.fuel_g) != r.mpg {
                return Err(format!("seed {}: mpg mismatch", r.seed));
            }
            let corrected =
                r.fuel_g + soc_deficit_fuel_g(r.terminal_soc, pt.soc_terminal_min, pt);
            if fuel_economy_mpg(r.distance_m, corrected) != r.mpg_soc_corrected {
                return Err(format!("seed {}: corrected mpg mismatch", r.seed));
            }
        }
        Ok(())
    }
}
