//! The design-choice grid: loss form, bottleneck placement and stop-gradient
//! variants, plus a run without the composition term.

use crate::metrics::{evaluate, EvalConfig, Evaluation, MetricValue, ModelLatent};
use crate::model::{AcForm, ModelConfig, ModelParams, Placement};
use crate::train::{train, Stability, TrainConfig};
use crate::world::Dataset;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Design {
    FdmPost,
    FdmPre,
    IdmNoSg,
    IdmSgZik,
    IdmSgSum,
    NoAc,
}

impl Design {
    pub const ALL: [Design; 6] = [
        Design::FdmPost,
        Design::FdmPre,
        Design::IdmNoSg,
        Design::IdmSgZik,
        Design::IdmSgSum,
        Design::NoAc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Design::FdmPost => "fdm-post",
            Design::FdmPre => "fdm-pre",
            Design::IdmNoSg => "idm-no-sg",
            Design::IdmSgZik => "idm-sg-zik",
            Design::IdmSgSum => "idm-sg-sum",
            Design::NoAc => "no-ac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Design::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn placement(self) -> Placement {
        match self {
            Design::FdmPre => Placement::PreVq,
            _ => Placement::PostVq,
        }
    }

    /// `base` with this design's loss form, placement and weight applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.placement = self.placement();
        cfg.ac_form = match self {
            Design::IdmNoSg => AcForm::IdmNoSg,
            Design::IdmSgZik => AcForm::IdmSgZik,
            Design::IdmSgSum => AcForm::IdmSgSum,
            _ => AcForm::Fdm,
        };
        if self == Design::NoAc {
            cfg.weights.lambda_ac = 0.0;
        } else if cfg.weights.lambda_ac == 0.0 {
            cfg.weights.lambda_ac = 1.0;
        }
        cfg
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One trained and (if stable) evaluated grid cell.
#[derive(Clone, Debug)]
pub struct Cell {
    pub design: Design,
    pub seed: u64,
    pub status: Stability,
    pub params: ModelParams<f32>,
    pub evaluation: Option<Evaluation>,
    /// Training or evaluation failure, recorded instead of aborting the grid.
    pub error: Option<String>,
}

impl Cell {
    pub fn metric(&self, f: impl Fn(&Evaluation) -> MetricValue) -> Option<f64> {
        self.evaluation.as_ref().and_then(|e| f(e).value())
    }
}

/// Shared inputs of every cell.
#[derive(Clone, Debug)]
pub struct GridConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub eval_seed: u64,
}

/// Trains `design` with training seed `seed` and evaluates it on the held-out
/// trajectories at the design's own placement.
pub fn run_cell(dataset: &Dataset, grid: &GridConfig, design: Design, seed: u64) -> Cell {
    let mut cfg = design.apply(&grid.train);
    cfg.seed = seed;
    let run = match train(dataset, &cfg, &grid.model) {
        Ok(run) => run,
        Err(e) => {
            return Cell {
                design,
                seed,
                status: Stability::Explode,
                params: ModelParams::init(&grid.model, seed),
                evaluation: None,
                error: Some(e.to_string()),
            }
        }
    };
    let mut cell = Cell {
        design,
        seed,
        status: run.status,
        params: run.params,
        evaluation: None,
        error: None,
    };
    if cell.status == Stability::Stable {
        let test = dataset.split(cfg.holdout).test;
        let f = ModelLatent::new(&cell.params, cfg.placement);
        match evaluate(&f, dataset, &test, &grid.eval, grid.eval_seed, cfg.placement) {
            Ok(e) => cell.evaluation = Some(e),
            Err(e) => cell.error = Some(e.to_string()),
        }
    }
    cell
}

/// Runs every `(design, seed)` cell. With `threads > 1` cells are spread over
/// worker threads; results are identical either way.
pub fn run_grid(
    dataset: &Dataset,
    grid: &GridConfig,
    designs: &[Design],
    seeds: &[u64],
    threads: usize,
    on_done: &(dyn Fn(&Cell) + Sync),
) -> Vec<Cell> {
    let jobs: Vec<(Design, u64)> = designs
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let workers = threads.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs
            .iter()
            .map(|&(d, s)| {
                let c = run_cell(dataset, grid, d, s);
                on_done(&c);
                c
            })
            .collect();
    }
    let mut slots: Vec<Option<Cell>> = vec![None; jobs.len()];
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<(usize, Design, u64)>> = (0..workers)
            .map(|w| {
                jobs.iter()
                    .enumerate()
                    .filter(|(k, _)| k % workers == w)
                    .map(|(k, &(d, s))| (k, d, s))
                    .collect()
            })
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(k, d, s)| {
                            let c = run_cell(dataset, grid, d, s);
                            on_done(&c);
                            (k, c)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, c) in h.join().expect("grid worker panicked") {
                slots[k] = Some(c);
            }
        }
    });
    slots.into_iter().map(|c| c.expect("every job ran")).collect()
}

pub const TABLE_HEADER: &str = "design,seed,norm_ac,pearson_r,stability";

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn severity(s: Stability) -> u8 {
    match s {
        Stability::Stable => 0,
        Stability::Collapse => 1,
        Stability::Explode => 2,
    }
}

/// Most frequent class over the seeds of one design; ties go to the less
/// stable class.
pub fn majority_status(cells: &[&Cell]) -> Stability {
    [Stability::Stable, Stability::Collapse, Stability::Explode]
        .into_iter()
        .max_by_key(|&s| (cells.iter().filter(|c| c.status == s).count(), severity(s)))
        .unwrap_or(Stability::Explode)
}

/// Seed-median of a metric over a design's evaluated cells.
pub fn design_median(
    cells: &[Cell],
    design: Design,
    f: impl Fn(&Evaluation) -> MetricValue + Copy,
) -> Option<f64> {
    let vals: Vec<f64> = cells
        .iter()
        .filter(|c| c.design == design)
        .filter_map(|c| c.metric(f))
        .collect();
    median(&vals)
}

fn cell_value(c: &Cell, f: impl Fn(&Evaluation) -> MetricValue) -> String {
    c.evaluation.as_ref().map(|e| f(e).to_string()).unwrap_or_default()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-seed rows followed by one median row per design.
pub fn table_csv(cells: &[Cell]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.design,
            c.seed,
            cell_value(c, |e| e.report.norm_ac),
            cell_value(c, |e| e.report.pearson_r),
            c.status
        );
    }
    for d in designs_in_order(cells) {
        let own: Vec<&Cell> = cells.iter().filter(|c| c.design == d).collect();
        let _ = writeln!(
            s,
            "{},median,{},{},{}",
            d,
            opt(design_median(cells, d, |e| e.report.norm_ac)),
            opt(design_median(cells, d, |e| e.report.pearson_r)),
            majority_status(&own)
        );
    }
    s
}

fn designs_in_order(cells: &[Cell]) -> Vec<Design> {
    let mut out: Vec<Design> = Vec::new();
    for c in cells {
        if !out.contains(&c.design) {
            out.push(c.design);
        }
    }
    out
}

/// A published direction next to what the grid observed.
#[derive(Clone, Debug, PartialEq)]
pub struct Expectation {
    pub claim: &'static str,
    pub expected: String,
    pub observed: String,
    /// `None` when the grid lacks the cells to decide.
    pub agrees: Option<bool>,
}

pub const EXPECTATION_HEADER: &str = "claim,expected,observed,agrees";

fn compare(
    cells: &[Cell],
    claim: &'static str,
    a: Design,
    b: Design,
    f: impl Fn(&Evaluation) -> MetricValue + Copy,
    a_higher: bool,
) -> Expectation {
    let (va, vb) = (design_median(cells, a, f), design_median(cells, b, f));
    let rel = if a_higher { '>' } else { '<' };
    Expectation {
        claim,
        expected: format!("{a} {rel} {b}"),
        observed: format!("{} vs {}", opt(va), opt(vb)),
        agrees: va.zip(vb).map(|(x, y)| if a_higher { x > y } else { x < y }),
    }
}

fn class_of(cells: &[Cell], claim: &'static str, d: Design, expected: Stability) -> Expectation {
    let own: Vec<&Cell> = cells.iter().filter(|c| c.design == d).collect();
    let observed = (!own.is_empty()).then(|| majority_status(&own));
    Expectation {
        claim,
        expected: expected.to_string(),
        observed: observed.map(|s| s.to_string()).unwrap_or_default(),
        agrees: observed.map(|s| s == expected),
    }
}

/// The directions the grid is expected to show.
pub fn expectations(cells: &[Cell]) -> Vec<Expectation> {
    vec![
        class_of(cells, "default stability", Design::FdmPost, Stability::Stable),
        compare(
            cells,
            "pre-vq correlation",
            Design::FdmPre,
            Design::FdmPost,
            |e| e.report.pearson_r,
            true,
        ),
        compare(
            cells,
            "pre-vq composition residual",
            Design::FdmPre,
            Design::FdmPost,
            |e| e.report.norm_ac,
            true,
        ),
        class_of(cells, "idm without stop-gradient", Design::IdmNoSg, Stability::Collapse),
        class_of(cells, "idm stop-gradient on the sum", Design::IdmSgSum, Stability::Explode),
    ]
}

pub fn expectations_csv(rows: &[Expectation]) -> String {
    let mut s = format!("{EXPECTATION_HEADER}\n");
    for r in rows {
        let agrees = match r.agrees {
            Some(true) => "yes",
            Some(false) => "no",
            None => "n/a",
        };
        let _ = writeln!(s, "{},{},{},{}", r.claim, r.expected, r.observed, agrees);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(design: Design, seed: u64, status: Stability) -> Cell {
        let mut m = ModelConfig::for_image(16, 16);
        m.idm_hidden = vec![4];
        m.fdm_hidden = vec![4];
        m.proprio_hidden = vec![4];
        Cell {
            design,
            seed,
            status,
            params: ModelParams::init(&m, 0),
            evaluation: None,
            error: None,
        }
    }

    #[test]
    fn names_round_trip() {
        for d in Design::ALL {
            assert_eq!(Design::parse(d.as_str()), Some(d));
        }
        assert_eq!(Design::parse("fdm"), None);
    }

    #[test]
    fn apply_sets_axes() {
        let base = TrainConfig::default();
        assert_eq!(Design::FdmPre.apply(&base).placement, Placement::PreVq);
        assert_eq!(Design::IdmSgSum.apply(&base).ac_form, AcForm::IdmSgSum);
        assert_eq!(Design::NoAc.apply(&base).weights.lambda_ac, 0.0);
        assert_eq!(Design::FdmPost.apply(&base), base);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
    }

    #[test]
    fn majority_breaks_ties_toward_instability() {
        let a = cell(Design::IdmNoSg, 0, Stability::Stable);
        let b = cell(Design::IdmNoSg, 1, Stability::Collapse);
        let c = cell(Design::IdmNoSg, 2, Stability::Explode);
        assert_eq!(majority_status(&[&a, &b, &c]), Stability::Explode);
        assert_eq!(majority_status(&[&a, &b]), Stability::Collapse);
        assert_eq!(majority_status(&[&a, &a, &c]), Stability::Stable);
    }

    #[test]
    fn table_has_one_median_row_per_design() {
        let cells: Vec<Cell> = [Design::FdmPost, Design::IdmSgSum]
            .into_iter()
            .flat_map(|d| (0..3).map(move |s| cell(d, s, Stability::Explode)))
            .collect();
        let csv = table_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TABLE_HEADER);
        assert_eq!(lines.len(), 1 + 6 + 2);
        assert_eq!(lines[7], "fdm-post,median,,,explode");
        let exp = expectations(&cells);
        assert_eq!(exp[0].agrees, Some(false));
        assert_eq!(exp[1].agrees, None);
        assert_eq!(exp[4].agrees, Some(true));
        assert!(expectations_csv(&exp).starts_with(EXPECTATION_HEADER));
    }
}
