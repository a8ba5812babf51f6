use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mvcage::basis::{fourier_basis, gaussian_rbf_basis, oc_orthogonalize, regular_knots, OcBasis, OcOptions};
use mvcage::bayes::{gibbs_fit, per_draw_coeff_cov, posterior_coeff_cov, PosteriorDraws};
use mvcage::cage::{dmvcage, posterior_mvcage, CageReport, LossKind};
use mvcage::covariance::{build_joint_cov, empirical_cross_cov, simulate_gp, JointCovariance, ReplicatedData};
use mvcage::geometry::{areal_average_scalar, build_grid, BBox, GridFile, Partition, PartitionFile, SpatialGrid};
use mvcage::io::{self, geojson, svg};
use mvcage::kle::{
    multivariate_eigensystem, posterior_eof_eigensystem, score_cov, univariate_kle_galerkin, MultivariateEigenSystem,
};
use mvcage::regionalize::{
    cut_dendrogram, feature_matrix, kle_feature_matrix, regionalize, regionalize_bounded, ward_hgc, FeatureSource,
    PartitionScorer, PlugInScorer, PosteriorScorer, RegionalizationResult,
};
use nalgebra::DMatrix;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{BasisSpec, ExperimentConfig, PartitionSpec, Route, SearchMode, SourceSpec};
use crate::CliError;

/// Shared state of one command invocation.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub grid: SpatialGrid,
    outputs: BTreeMap<String, String>,
}

pub struct Eigen {
    pub sys: MultivariateEigenSystem,
    pub oc: OcBasis,
    pub draws: Option<PosteriorDraws>,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self, CliError> {
        let bbox = BBox::new(cfg.grid.lo.clone(), cfg.grid.hi.clone()).map_err(config)?;
        let grid = build_grid(&bbox, &cfg.grid.counts).map_err(config)?;
        fs::create_dir_all(&out)?;
        Ok(Run { cfg, out, grid, outputs: BTreeMap::new() })
    }

    fn write_file(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.out.join(name), bytes)?;
        self.outputs.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> mvcage::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_file(name, &buf)
    }

    fn write_json(&mut self, name: &str, v: &impl serde::Serialize) -> Result<(), CliError> {
        self.write_with(name, |b| io::write_json(b, v))
    }

    /// Writes `manifest.json`: the resolved configuration and a checksum
    /// per output file. Rerunning with it as `--config` reproduces the
    /// outputs.
    pub fn finish(&mut self, command: &str) -> Result<(), CliError> {
        let mut cfg = self.cfg.clone();
        cfg.out = None;
        let manifest = json!({
            "tool": "mvcage",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": self.cfg.seed,
            "config": cfg,
            "outputs": self.outputs,
        });
        let mut buf = Vec::new();
        io::write_json(&mut buf, &manifest)?;
        fs::write(self.out.join("manifest.json"), buf)?;
        Ok(())
    }

    pub fn data(&self) -> Result<ReplicatedData, CliError> {
        let data = match &self.cfg.source {
            SourceSpec::Parametric { params, replications, noise_var } => {
                let cov = build_joint_cov(&self.grid, params)?;
                let clean = simulate_gp(&cov, *replications, self.cfg.seed)?;
                if *noise_var > 0.0 {
                    clean.with_noise(&vec![*noise_var; cov.n_proc()], self.cfg.seed)?
                } else {
                    clean
                }
            }
            SourceSpec::Data { path } => io::read_data_file(path)?,
        };
        if data.n() != self.grid.len() {
            return Err(CliError::Config(format!("data has {} cells but the grid has {}", data.n(), self.grid.len())));
        }
        Ok(data)
    }

    fn params_value(&self) -> Value {
        match &self.cfg.source {
            SourceSpec::Parametric { params, .. } => json!(params),
            SourceSpec::Data { path } => json!({ "path": path }),
        }
    }

    pub fn oc_basis(&self) -> Result<OcBasis, CliError> {
        let basis = match &self.cfg.basis {
            BasisSpec::Fourier { k } => fourier_basis(&self.grid, *k)?,
            BasisSpec::Rbf { knots, bandwidth } => {
                let k = regular_knots(self.grid.bbox(), knots)?;
                gaussian_rbf_basis(&self.grid, &k, *bandwidth)?
            }
        };
        Ok(oc_orthogonalize(&basis, &self.grid, OcOptions::default())?)
    }

    fn galerkin_system(&self, c: &JointCovariance, oc: &OcBasis) -> Result<MultivariateEigenSystem, CliError> {
        let rule = self.cfg.truncation;
        let systems = (0..c.n_proc())
            .map(|j| univariate_kle_galerkin(&c.block(j, j), oc, &self.grid, rule, j))
            .collect::<mvcage::Result<Vec<_>>>()?;
        let k = score_cov(c, &systems, &self.grid)?;
        Ok(multivariate_eigensystem(&k, &systems, rule)?)
    }

    pub fn eigen(&self, data: &ReplicatedData) -> Result<Eigen, CliError> {
        let oc = self.oc_basis()?;
        match self.cfg.route {
            Route::ScoreCov => {
                let SourceSpec::Parametric { params, .. } = &self.cfg.source else {
                    return Err(CliError::Config("route score-cov needs a parametric source".into()));
                };
                let c = build_joint_cov(&self.grid, params)?;
                Ok(Eigen { sys: self.galerkin_system(&c, &oc)?, oc, draws: None })
            }
            Route::Empirical => {
                let c = empirical_cross_cov(data, true)?;
                Ok(Eigen { sys: self.galerkin_system(&c, &oc)?, oc, draws: None })
            }
            Route::PosteriorEof => {
                let ocs = vec![oc.clone(); data.n_proc()];
                let draws = gibbs_fit(data, &ocs, &self.cfg.model)?;
                let sigma = posterior_coeff_cov(&draws)?;
                let sys = posterior_eof_eigensystem(&sigma, &ocs, self.cfg.truncation)?;
                Ok(Eigen { sys, oc, draws: Some(draws) })
            }
        }
    }

    fn per_draw_systems(&self, e: &Eigen) -> Result<Vec<MultivariateEigenSystem>, CliError> {
        let draws =
            e.draws.as_ref().ok_or_else(|| CliError::Config("per-draw scoring needs posterior draws".into()))?;
        let ocs = vec![e.oc.clone(); draws.n_proc()];
        let mut out = Vec::with_capacity(draws.draw_count());
        for d in 0..draws.draw_count() {
            let s = per_draw_coeff_cov(draws, d)?;
            out.push(posterior_eof_eigensystem(&s, &ocs, self.cfg.truncation)?);
        }
        Ok(out)
    }

    pub fn partition(&self) -> Result<Partition, CliError> {
        let p = match &self.cfg.cage.partition {
            PartitionSpec::Blocks { units } => Partition::index_blocks(&self.grid, *units).map_err(config)?,
            PartitionSpec::Singletons => Partition::singletons(&self.grid),
            PartitionSpec::Whole => Partition::whole(&self.grid),
            PartitionSpec::File { path } => io::read_partition_file(path, &self.grid)?,
        };
        Ok(p)
    }

    fn loss(&self) -> Result<LossKind, CliError> {
        LossKind::from_name(&self.cfg.cage.loss).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Per-cell estimates used as clustering features: the first
    /// replication, or for the posterior route its posterior-mean field.
    fn estimates(&self, data: &ReplicatedData, e: &Eigen) -> DMatrix<f64> {
        match &e.draws {
            Some(draws) => {
                let mut out = DMatrix::zeros(self.grid.len(), draws.n_proc());
                for j in 0..draws.n_proc() {
                    let nu = nalgebra::DVector::from_vec(draws.nu_mean_se(j, 0).0);
                    let field = e.oc.eval() * nu;
                    let mu = mvcage::stats::mean(draws.mu(j));
                    out.column_mut(j).copy_from(&field.add_scalar(mu));
                }
                out
            }
            None => data.replication(0),
        }
    }

    // ------------------------------------------------------------ commands

    pub fn cmd_simulate(&mut self) -> Result<ReplicatedData, CliError> {
        if !matches!(self.cfg.source, SourceSpec::Parametric { .. }) {
            return Err(CliError::Config("simulate needs a parametric source".into()));
        }
        let data = self.data()?;
        let (seed, params) = (self.cfg.seed, self.params_value());
        self.write_with("data.csv", |b| io::write_data_csv(b, &data))?;
        self.write_with("data.bin", |b| io::write_data_binary(b, &data, seed, params))?;
        let grid = GridFile::from(&self.grid);
        self.write_json("grid.json", &grid)?;
        Ok(data)
    }

    pub fn cmd_fit(&mut self, data: &ReplicatedData) -> Result<PosteriorDraws, CliError> {
        let oc = self.oc_basis()?;
        let ocs = vec![oc.clone(); data.n_proc()];
        let draws = gibbs_fit(data, &ocs, &self.cfg.model)?;
        let g_of = |obs: usize| self.cfg.model.g.unwrap_or(obs as f64);
        let mut processes = Vec::new();
        for j in 0..data.n_proc() {
            let z: Vec<f64> = (0..data.n()).map(|c| data.get(0, c, j)).collect();
            let observed = z.iter().filter(|v| !v.is_nan()).count();
            let pooled: Vec<f64> = (0..data.replications())
                .flat_map(|rep| (0..data.n()).map(move |c| data.get(rep, c, j)))
                .filter(|v| !v.is_nan())
                .collect();
            let center = mvcage::stats::mean(&pooled);
            let ols = mvcage::bayes::ols_coefficients_centered(&z, &oc, Some(center), g_of(observed))?;
            let (nu_mean, nu_se) = draws.nu_mean_se(j, 0);
            processes.push(json!({
                "process": j,
                "observed_cells": observed,
                "missing_cells": data.n() - observed,
                "nu_mean_rep0": nu_mean,
                "nu_se_rep0": nu_se,
                "nu_shrunk_ols_rep0": ols.nu_hat.iter().map(|v| v * g_of(observed) / (g_of(observed) + 1.0)).collect::<Vec<_>>(),
            }));
        }
        let summary = json!({ "posterior": draws.summary(), "processes": processes });
        self.write_json("summary.json", &summary)?;
        self.write_with("draws.csv", |b| io::write_draws_csv(b, &draws))?;
        self.write_with("draws.bin", |b| io::write_draws_binary(b, &draws))?;
        Ok(draws)
    }

    pub fn cmd_eigensystem(&mut self, data: &ReplicatedData) -> Result<Eigen, CliError> {
        let e = self.eigen(data)?;
        let meta = io::EigenSystemFile::from(&e.sys);
        self.write_json("eigensystem.json", &meta)?;
        self.write_with("eigenfunctions.csv", |b| io::write_eigenfunctions_csv(b, &e.sys))?;
        self.write_with("basis.csv", |b| io::write_basis_csv(b, e.oc.eval()))?;
        self.write_json("oc_transform.json", &io::OcTransformFile::from(&e.oc))?;
        let pts: Vec<(f64, f64)> =
            e.sys.eigenvalues().iter().enumerate().map(|(k, &l)| (k as f64 + 1.0, l.max(1e-300).log10())).collect();
        let plot = svg::line_chart(
            "Eigenvalues",
            "k",
            "log10 eigenvalue",
            &[svg::Series { label: "λ_k", color: "#1f4e9c", points: pts, step: false }],
        );
        self.write_file("eigenvalues.svg", plot.as_bytes())?;
        Ok(e)
    }

    pub fn cage_report(&self, e: &Eigen, part: &Partition) -> Result<CageReport, CliError> {
        let loss = self.loss()?;
        if self.cfg.cage.per_draw {
            let systems = self.per_draw_systems(e)?;
            Ok(posterior_mvcage(&systems, |s| Ok(s.clone()), part, &self.grid, &loss)?)
        } else {
            Ok(dmvcage(&e.sys, part, &self.grid, &loss)?)
        }
    }

    pub fn cmd_cage(&mut self, e: &Eigen) -> Result<CageReport, CliError> {
        let part = self.partition()?;
        let report = self.cage_report(e, &part)?;
        self.write_with("cage.csv", |b| io::write_cage_csv(b, &report))?;
        self.write_json(
            "cage.json",
            &json!({
                "total": report.total,
                "weighted_total": report.weighted_total,
                "per_unit": report.per_unit,
                "unit_areas": report.unit_areas,
                "mc_std_error": report.mc_std_error,
                "provenance": report.provenance,
                "loss": report.loss,
            }),
        )?;
        self.write_json("partition.json", &PartitionFile::from(&part))?;
        let geo = geojson::partition_collection(&self.grid, &part, |u| unit_props(&report, u));
        self.write_json("cage.geojson", &geo)?;
        self.write_cage_plot("cage.svg", &part, &report)?;
        Ok(report)
    }

    fn write_cage_plot(&mut self, name: &str, part: &Partition, report: &CageReport) -> Result<(), CliError> {
        let per_cell: Vec<f64> = part.labels().iter().map(|&u| report.per_unit[u]).collect();
        if let Some(plot) = svg::choropleth("Value of MVCAGE over the areal units", &self.grid, &per_cell) {
            self.write_file(name, plot.as_bytes())?;
        }
        Ok(())
    }

    pub fn cmd_regionalize(&mut self, data: &ReplicatedData, e: &Eigen) -> Result<RegionalizationResult, CliError> {
        let rcfg = self.cfg.regionalize.to_config(self.cfg.seed);
        let features = match rcfg.features {
            FeatureSource::ProcessEstimates => feature_matrix(&self.estimates(data, e), &self.grid, rcfg.gamma)?,
            FeatureSource::KleScores => kle_feature_matrix(&e.sys, &self.grid, rcfg.gamma)?,
        };
        let dendrogram = ward_hgc(&features)?;
        let loss = self.loss()?;
        let systems;
        let plug;
        let post;
        let scorer: &dyn PartitionScorer = if self.cfg.cage.per_draw {
            systems = self.per_draw_systems(e)?;
            post = PosteriorScorer { systems: &systems, grid: &self.grid, loss: loss.clone() };
            &post
        } else {
            plug = PlugInScorer { sys: &e.sys, grid: &self.grid, loss: loss.clone() };
            &plug
        };
        let result = match self.cfg.regionalize.mode {
            SearchMode::Epsilon => regionalize(scorer, &dendrogram, &self.grid, &rcfg)?,
            SearchMode::Argmin => regionalize_bounded(scorer, &dendrogram, &self.grid, &rcfg)?,
        };
        let report = self.cage_report(e, &result.partition)?;
        let raw_units = cut_dendrogram(&dendrogram, result.selected_j, &self.grid, false)?.partition.unit_count();
        self.write_with("labels.csv", |b| io::write_labels_csv(b, &result.partition))?;
        self.write_with("trace.csv", |b| io::write_trace_csv(b, &result.trace))?;
        self.write_json(
            "result.json",
            &json!({
                "selected_j": result.selected_j,
                "units": result.partition.unit_count(),
                "units_before_repair": raw_units,
                "stop": result.stop,
                "total": report.total,
                "weighted_total": report.weighted_total,
                "mode": self.cfg.regionalize.mode,
            }),
        )?;
        let geo = geojson::partition_collection(&self.grid, &result.partition, |u| unit_props(&report, u));
        self.write_json("regions.geojson", &geo)?;
        let trace_pts: Vec<(f64, f64)> = result.trace.iter().map(|t| (t.j as f64, t.total)).collect();
        let plot = svg::line_chart(
            "Total DMVCAGE by cluster count",
            "j",
            "MC_j",
            &[svg::Series { label: "MC_j", color: "#1f4e9c", points: trace_pts, step: false }],
        );
        self.write_file("trace.svg", plot.as_bytes())?;
        self.write_fields_plot(data, &result.partition)?;
        self.write_cage_plot("regions_cage.svg", &result.partition, &report)?;
        Ok(result)
    }

    /// Original versus unit-averaged first replication, one file per process.
    fn write_fields_plot(&mut self, data: &ReplicatedData, part: &Partition) -> Result<(), CliError> {
        let fields = data.replication(0);
        for j in 0..fields.ncols() {
            let z: Vec<f64> = fields.column(j).iter().copied().collect();
            let avg = areal_average_scalar(&z, part, &self.grid)?;
            let per_cell: Vec<f64> = part.labels().iter().map(|&u| avg[u]).collect();
            let name = format!("fields_process{j}.svg");
            if self.grid.dim() == 1 {
                let xs: Vec<f64> = self.grid.centers().map(|c| c[0]).collect();
                let orig = svg::Series {
                    label: "original",
                    color: "#1f4e9c",
                    points: xs.iter().copied().zip(z).collect(),
                    step: false,
                };
                let agg = svg::Series {
                    label: "aggregated",
                    color: "#c0392b",
                    points: xs.into_iter().zip(per_cell).collect(),
                    step: true,
                };
                let plot = svg::line_chart(&format!("Process {}", j + 1), "s", "value", &[orig, agg]);
                self.write_file(&name, plot.as_bytes())?;
            } else if let Some(plot) = svg::choropleth(&format!("Process {} aggregated", j + 1), &self.grid, &per_cell)
            {
                self.write_file(&name, plot.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_report(&mut self, lines: &[String]) -> Result<(), CliError> {
        let text = lines.join("\n") + "\n";
        self.write_file("report.md", text.as_bytes())
    }
}

fn unit_props(report: &CageReport, u: usize) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("dmvcage".into(), json!(report.per_unit[u]));
    let per: Vec<f64> = report.per_process.row(u).iter().copied().collect();
    m.insert("dmvcage_per_process".into(), json!(per));
    if let Some(se) = &report.mc_std_error {
        m.insert("mc_std_error".into(), json!(se[u]));
    }
    m
}

fn config(e: mvcage::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn default_out(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| Path::new("mvcage-out").join(command))
}
