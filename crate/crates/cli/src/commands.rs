use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use auxmtl::auxiliary::Genotype;
use auxmtl::data::{gen_synthetic_dir, load_dataset, Dataset, SceneConfig};
use auxmtl::mtl_net::{load_checkpoint, save_checkpoint, ModelConfig};
use auxmtl::search::{opstats_csv, search_loop, threads_from_env, EvalContext};
use auxmtl::tensor::ParamSet;
use auxmtl::train::{run_strategy, Metrics, RunOptions, RunOutcome, Strategy};
use auxmtl::{Error, Result};

use crate::config::{io_err, AuxMode, Config};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn gen_data(seed: u64, n: usize, out: &Path, h: usize, w: usize, classes: usize) -> Result<()> {
    let m = gen_synthetic_dir(out, seed, n, SceneConfig { h, w, classes })?;
    println!(
        "wrote {} samples ({}x{}, {} classes) to {}: train {}, val {}, test {}",
        m.n,
        m.h,
        m.w,
        m.k,
        out.display(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(())
}

/// Config, dataset and model shared by every command.
struct Setup {
    cfg: Config,
    data: Dataset,
    model: ModelConfig,
}

fn setup(config: &Path, out: Option<&Path>) -> Result<Setup> {
    let mut cfg = Config::load(config)?;
    if let Some(out) = out {
        cfg.output_dir = out.to_path_buf();
    }
    let data = load_dataset(&cfg.data.dir)?;
    cfg.resolve(&data.manifest);
    let model = cfg.model_config(&data.manifest);
    create_dir(&cfg.output_dir)?;
    cfg.write_resolved(&cfg.output_dir)?;
    Ok(Setup { cfg, data, model })
}

fn load_genotype(cfg: &Config) -> Result<Option<Genotype>> {
    let Some(path) = &cfg.aux.genotype_path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Genotype::from_json(text.trim()).map(Some)
}

fn strategy_for(cfg: &Config, name: &str) -> Result<Strategy> {
    let genotype = if name == "auxi-nas" {
        load_genotype(cfg)?
    } else {
        None
    };
    Strategy::parse(name, genotype)
}

/// Trains one model and writes its CSVs and checkpoint into `dir`.
fn run_into(
    s: &Setup,
    strategy: &Strategy,
    seed: u64,
    donor: Option<&ParamSet<f32>>,
    dir: &Path,
) -> Result<RunOutcome> {
    create_dir(dir)?;
    let train = auxmtl::train::TrainConfig {
        seed,
        ..s.cfg.train.clone()
    };
    let opts = RunOptions {
        agg: s.cfg.aux.agg,
        donor,
        ..Default::default()
    };
    let out = run_strategy(strategy, &s.data, &s.model, &train, &opts)?;
    out.record.write_csvs(dir)?;
    if !out.diverged {
        save_checkpoint(dir.join("model.ckpt"), &out.model.cfg, &out.params)?;
    }
    Ok(out)
}

pub fn train(
    config: &Path,
    strategy: Option<&str>,
    init_ckpt: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let s = setup(config, out)?;
    let name = match strategy {
        Some(n) => n,
        None => match s.cfg.aux.mode {
            AuxMode::None => "joint",
            AuxMode::Basic => "auxi-both",
            AuxMode::Genotype => "auxi-nas",
        },
    };
    let strategy = strategy_for(&s.cfg, name)?;
    let donor = match init_ckpt {
        Some(p) => Some(load_checkpoint::<f32>(p)?.1),
        None => None,
    };
    let out = run_into(
        &s,
        &strategy,
        s.cfg.train.seed,
        donor.as_ref(),
        &s.cfg.output_dir,
    )?;
    if out.diverged {
        return Err(Error::Diverged {
            iter: out.iters_done,
        });
    }
    let m = out.final_metrics.unwrap_or_default();
    let shown: Vec<String> = Metrics::IDS
        .iter()
        .filter_map(|&id| m.get(id).map(|v| format!("{id} {v:.4}")))
        .collect();
    println!(
        "{strategy}: {} iterations, val {}",
        out.iters_done,
        shown.join(", ")
    );
    Ok(())
}

pub fn search(config: &Path, out: Option<&Path>) -> Result<()> {
    let s = setup(config, out)?;
    let ctx = EvalContext {
        data: &s.data,
        model: &s.model,
        train: &s.cfg.train,
        short_iters: s.cfg.search.short_iters,
    };
    let dir = &s.cfg.output_dir;
    let log_path = dir.join("search.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let outcome = search_loop(&s.cfg.search, &ctx, threads_from_env(), |r| {
        writeln!(log, "{}", r.to_json_line())
            .and_then(|_| log.flush())
            .map_err(|e| io_err(&log_path, e))
    })?;
    drop(log);
    write_file(&dir.join("opstats.csv"), &opstats_csv(&outcome.opstats))?;
    if let Some((g, reward)) = &outcome.best {
        write_file(&dir.join("best.genotype.json"), &(g.to_json() + "\n"))?;
        println!("{} candidates, best reward {reward:.4}", outcome.log.len());
    } else {
        println!("no candidates evaluated");
    }
    if !outcome.log.is_empty() && outcome.log.iter().all(|r| r.diverged) {
        return Err(Error::NumericFailure {
            op: "search",
            path: "every candidate".into(),
        });
    }
    Ok(())
}

/// Result of one table cell.
#[derive(Clone)]
struct Cell {
    metrics: Option<Metrics>,
    /// `ok`, `diverged` or `error`.
    status: &'static str,
    params: Option<ParamSet<f32>>,
    code: i32,
    message: String,
}

impl Cell {
    fn failed(e: &Error) -> Self {
        Cell {
            metrics: None,
            status: if e.exit_code() == 4 {
                "diverged"
            } else {
                "error"
            },
            params: None,
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

fn run_cell(s: &Setup, name: &str, seed: u64, cells: &mut HashMap<(String, u64), Cell>) -> Cell {
    if let Some(c) = cells.get(&(name.to_string(), seed)) {
        return c.clone();
    }
    let cell = (|| -> std::result::Result<Cell, Cell> {
        let strategy = strategy_for(&s.cfg, name).map_err(|e| Cell::failed(&e))?;
        let donor = match strategy.donor_task(s.model.tasks.len()) {
            Some(d) => {
                let donor = run_cell(s, &format!("single-t{}", d + 1), seed, cells);
                match donor.params {
                    Some(p) => Some(p),
                    None => {
                        return Err(Cell {
                            message: format!("donor single-t{}: {}", d + 1, donor.message),
                            ..donor
                        })
                    }
                }
            }
            None => None,
        };
        let dir = s
            .cfg
            .output_dir
            .join("runs")
            .join(format!("{name}-s{seed}"));
        let out =
            run_into(s, &strategy, seed, donor.as_ref(), &dir).map_err(|e| Cell::failed(&e))?;
        if out.diverged {
            return Err(Cell::failed(&Error::Diverged {
                iter: out.iters_done,
            }));
        }
        Ok(Cell {
            metrics: out.final_metrics,
            status: "ok",
            params: Some(out.params),
            code: 0,
            message: String::new(),
        })
    })()
    .unwrap_or_else(|c| c);
    cells.insert((name.to_string(), seed), cell.clone());
    cell
}

fn metric_cells(s: &mut String, values: impl IntoIterator<Item = Option<f64>>) {
    for v in values {
        s.push(',');
        if let Some(v) = v {
            write!(s, "{v}").unwrap();
        }
    }
}

/// Rows `strategy,seed,status,miou,pixacc,rel,rms,angle` for every pair, then
/// one `strategy,mean,...` row per strategy averaging its successful seeds.
fn table_csv(strategies: &[String], seeds: &[u64], cells: &HashMap<(String, u64), Cell>) -> String {
    let mut s = String::from("strategy,seed,status");
    for id in Metrics::IDS {
        write!(s, ",{id}").unwrap();
    }
    s.push('\n');
    for name in strategies {
        for &seed in seeds {
            let c = &cells[&(name.clone(), seed)];
            write!(s, "{name},{seed},{}", c.status).unwrap();
            metric_cells(&mut s, c.metrics.unwrap_or_default().values());
            s.push('\n');
        }
    }
    for name in strategies {
        let ok: Vec<Metrics> = seeds
            .iter()
            .filter_map(|&seed| cells[&(name.clone(), seed)].metrics)
            .collect();
        let status = if ok.len() == seeds.len() {
            "ok"
        } else {
            "partial"
        };
        write!(s, "{name},mean,{status}").unwrap();
        let means = Metrics::IDS.iter().map(|id| {
            let v: Vec<f64> = ok.iter().filter_map(|m| m.get(id)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        });
        metric_cells(&mut s, means);
        s.push('\n');
    }
    s
}

pub fn compare(
    config: &Path,
    strategies: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<()> {
    let s = setup(config, out)?;
    for name in strategies {
        // reject unknown names before any training
        strategy_for(&s.cfg, name)?;
    }
    let mut cells = HashMap::new();
    for &seed in seeds {
        for name in strategies {
            let c = run_cell(&s, name, seed, &mut cells);
            println!("{name} seed {seed}: {}", c.status);
        }
    }
    let path: PathBuf = s.cfg.output_dir.join("table.csv");
    write_file(&path, &table_csv(strategies, seeds, &cells))?;
    let mut failed: Vec<&Cell> = strategies
        .iter()
        .flat_map(|n| seeds.iter().map(move |&seed| (n.clone(), seed)))
        .map(|k| &cells[&k])
        .filter(|c| c.code != 0)
        .collect();
    failed.sort_by_key(|c| std::cmp::Reverse(c.code));
    match failed.first() {
        None => Ok(()),
        Some(c) if c.code == 4 => Err(Error::Diverged { iter: 0 }),
        Some(c) if c.code == 3 => Err(Error::Io {
            path,
            source: std::io::Error::other(c.message.clone()),
        }),
        Some(c) => Err(Error::Config(format!("table is partial: {}", c.message))),
    }
}
