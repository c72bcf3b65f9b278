//! Module and loss ablation grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Ablation, LossSwitches, RunConfig};
use crate::train::train;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    /// `modules` or `losses`.
    pub table: String,
    pub name: String,
    pub config: RunConfig,
}

fn modules(lsp: bool, spr: bool, pki: bool) -> Ablation {
    Ablation { use_lsp: lsp, use_spr: spr, use_pki: pki }
}

/// Six module configurations followed by the full model and four
/// single-loss removals. Each run writes into `base.output/<table>_<name>`.
pub fn ablation_grid(base: &RunConfig) -> Vec<GridRun> {
    let mut runs = Vec::new();
    let module_rows = [
        ("baseline", modules(false, false, false)),
        ("spr", modules(false, true, false)),
        ("spr_pki", modules(false, true, true)),
        ("lsp", modules(true, false, false)),
        ("lsp_spr", modules(true, true, false)),
        ("lsp_spr_pki", modules(true, true, true)),
    ];
    for (name, ablation) in module_rows {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        cfg.loss_switches = LossSwitches::default();
        runs.push(GridRun { table: "modules".into(), name: name.into(), config: cfg });
    }
    let all = LossSwitches::default();
    let loss_rows = [
        ("without_mpb", LossSwitches { mpb: false, ..all }),
        ("without_ipc", LossSwitches { ipc: false, ..all }),
        ("without_gdc", LossSwitches { gdc: false, ..all }),
        ("without_pso", LossSwitches { pso: false, ..all }),
        ("full", all),
    ];
    for (name, switches) in loss_rows {
        let mut cfg = base.clone();
        cfg.ablation = Ablation::default();
        cfg.loss_switches = switches;
        runs.push(GridRun { table: "losses".into(), name: name.into(), config: cfg });
    }
    for run in &mut runs {
        run.config.output = base.output.join(format!("{}_{}", run.table, run.name));
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub table: String,
    pub name: String,
    pub use_lsp: bool,
    pub use_spr: bool,
    pub use_pki: bool,
    pub ipc: bool,
    pub mpb: bool,
    pub gdc: bool,
    pub pso: bool,
    pub epochs: usize,
    pub final_total_loss: f64,
    /// Last evaluation accuracy, `None` without an eval split.
    pub accuracy: Option<f64>,
    pub background_fraction: Option<f64>,
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str =
    "table,name,use_lsp,use_spr,use_pki,ipc,mpb,gdc,pso,epochs,final_total_loss,accuracy,background_fraction,warnings";

impl GridResult {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.table,
            self.name,
            self.use_lsp,
            self.use_spr,
            self.use_pki,
            self.ipc,
            self.mpb,
            self.gdc,
            self.pso,
            self.epochs,
            self.final_total_loss,
            opt(self.accuracy),
            opt(self.background_fraction),
            self.warnings.len()
        )
    }
}

/// Trains every grid configuration and writes the CSV to `out`.
pub fn run_grid(base: &RunConfig, out: &Path) -> Result<Vec<GridResult>> {
    let mut results = Vec::new();
    for run in ablation_grid(base) {
        log::info!("ablation run {}/{}", run.table, run.name);
        let report = train(&run.config)?;
        let active = run.config.active_losses();
        results.push(GridResult {
            table: run.table,
            name: run.name,
            use_lsp: run.config.ablation.use_lsp,
            use_spr: run.config.ablation.use_spr,
            use_pki: run.config.ablation.use_pki,
            ipc: active.ipc,
            mpb: active.mpb,
            gdc: active.gdc,
            pso: active.pso,
            epochs: report.epochs.len(),
            final_total_loss: report.final_total().unwrap_or(f64::NAN),
            accuracy: report.final_eval_accuracy(),
            background_fraction: report.epochs.last().and_then(|e| e.background_fraction),
            warnings: report.warnings.clone(),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "{CSV_HEADER}")?;
    for r in &results {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(results)
}
