use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use relrep::dataset::{gen_synthetic, Dataset, Format, SyntheticSpec};
use relrep::embednet::EmbedNet;
use relrep::evalreport::{self, knn_accuracy};
use relrep::grouping::{calibrate_baseline, extract_groups, parse_member_lists, GroupSet, DEFAULT_H_MAX};
use relrep::neighbors::EmbeddedSet;
use relrep::partition::Partition;
use relrep::pipeline::{self, describe, PipelineConfig};
use relrep::targets::{build_target_space, pooled_pair_distances, slot_points};

#[derive(Parser)]
#[command(name = "relrep", version, about = "Representation learning from reliable relations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled Gaussian-cluster dataset.
    Gen {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.3)]
        std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `.csv` or `.bin`/`.f32` (raw little-endian f32).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train: φ_init followed by the configured number of iterations.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// key = value file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// kNN accuracy and group NMI of a checkpoint on labeled data.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Compactness percentile for the groups behind the NMI.
        #[arg(long, default_value_t = 3.0)]
        percentile: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write figure-data CSV files for a checkpoint.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Query sample for the sorted-distance and noise curves.
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long, default_value_t = 3.0)]
        percentile: f64,
        #[arg(long, default_value_t = DEFAULT_H_MAX)]
        h_max: usize,
        #[arg(long, default_value_t = 0.0025)]
        sigma2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory of a previous `run`, for the per-iteration figures.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<Dataset> {
    Dataset::load(path, Format::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

fn embed(data: &Dataset, checkpoint: &Path) -> Result<ndarray::Array2<f64>> {
    let net = EmbedNet::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(net.forward_batch(data.vectors())?)
}

fn extract(points: &ndarray::Array2<f64>, h_max: usize, percentile: f64, seed: u64) -> Result<(EmbeddedSet, GroupSet)> {
    let set = EmbeddedSet::new(points.clone())?;
    let baseline = calibrate_baseline(&set, h_max.min(set.len()), 1000, percentile, seed)?;
    let groups = extract_groups(&set, &baseline);
    Ok((set, groups))
}

fn write(dir: &Path, name: &str, contents: String) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen {
            classes,
            per_class,
            dim,
            std,
            seed,
            out,
        } => {
            let data = gen_synthetic(&SyntheticSpec {
                num_classes: classes,
                samples_per_class: per_class,
                dim,
                cluster_std: std,
                seed,
            })?;
            data.save(&out, Format::from_path(&out))?;
            eprintln!("wrote {} samples of dimension {} to {}", data.len(), data.dim(), out.display());
        }
        Command::Run {
            data,
            config,
            out_dir,
        } => {
            let dataset = load(&data)?;
            let config = match config {
                Some(path) => PipelineConfig::load(&path).with_context(|| format!("reading {}", path.display()))?,
                None => PipelineConfig::default(),
            };
            let labels = dataset.labels().map(<[u32]>::to_vec);
            let k = 10.min(dataset.len().saturating_sub(1)).max(1);
            let report = |net: &EmbedNet| -> Option<f64> {
                let labels = labels.as_ref()?;
                let emb = net.forward_batch(dataset.vectors()).ok()?;
                knn_accuracy(emb.view(), labels, k).ok()
            };
            pipeline::run_with(&dataset, &config, Some(&out_dir), |net, state| {
                let acc = report(net).map(|a| format!(", kNN({k}) accuracy {a:.4}")).unwrap_or_default();
                match state {
                    None => eprintln!("initial representation trained{acc}"),
                    Some(s) => eprintln!("{}{acc}", describe(&s.metrics)),
                }
            })?;
            eprintln!("outputs in {}", out_dir.display());
        }
        Command::Eval {
            data,
            checkpoint,
            k,
            percentile,
            seed,
        } => {
            let dataset = load(&data)?;
            let Some(labels) = dataset.labels() else {
                bail!("{} has no labels to evaluate against", data.display());
            };
            let emb = embed(&dataset, &checkpoint)?;
            println!("knn_accuracy(k={k}) = {:.6}", knn_accuracy(emb.view(), labels, k)?);
            let (_, groups) = extract(&emb, DEFAULT_H_MAX, percentile, seed)?;
            match evalreport::group_nmi(&groups, labels) {
                Ok(v) => println!(
                    "group_nmi = {v:.6} ({} groups, coverage {:.4})",
                    groups.len(),
                    groups.coverage()
                ),
                Err(e) => println!("group_nmi unavailable: {e}"),
            }
        }
        Command::Analyze {
            data,
            checkpoint,
            out_dir,
            query,
            percentile,
            h_max,
            sigma2,
            seed,
            run_dir,
        } => {
            let dataset = load(&data)?;
            fs::create_dir_all(&out_dir)?;
            let emb = embed(&dataset, &checkpoint)?;

            write(&out_dir, "fig2_ratio.csv", evalreport::fig2_csv(&evalreport::nn_ratio_curve(emb.view())?))?;
            let sorted = evalreport::sorted_similarity_curve(emb.view(), query)?;
            write(&out_dir, "fig3_sorted.csv", evalreport::fig3_csv(&sorted))?;
            let grid = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
            let flips = evalreport::rank_stability_under_noise(emb.view(), query, &grid, seed)?;
            write(&out_dir, "fig4_noise.csv", evalreport::fig4_csv(&sorted, &flips))?;

            let (set, groups) = extract(&emb, h_max, percentile, seed)?;
            if groups.is_empty() {
                eprintln!("no compact groups found; skipping fig5a and fig5b");
            } else {
                if let Some(labels) = dataset.labels() {
                    let rows = evalreport::correctness_coverage_by_size(&groups, labels, 1000, seed)?;
                    write(&out_dir, "fig5a_correctness_coverage.csv", evalreport::fig5a_csv(&rows))?;
                }
                let sizes: Vec<usize> = groups.groups.iter().map(|g| g.len()).collect();
                let space = build_target_space(&sizes, emb.ncols(), sigma2, seed)?;
                let unit_mean = |mut v: Vec<f64>| {
                    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
                    if mean > 0.0 {
                        v.iter_mut().for_each(|x| *x /= mean);
                    }
                    v
                };
                let data_d = unit_mean(pooled_pair_distances(slot_points(&set, &groups).view()));
                let target_d = unit_mean(pooled_pair_distances(space.view()));
                write(
                    &out_dir,
                    "fig5b_distances.csv",
                    evalreport::fig5b_csv(
                        &evalreport::thin(&data_d, 20_000, seed),
                        &evalreport::thin(&target_d, 20_000, seed + 1),
                    ),
                )?;
            }

            if let Some(run_dir) = run_dir {
                let Some(labels) = dataset.labels() else {
                    bail!("per-iteration figures need labels");
                };
                let (mut fig7, mut fig8) = (Vec::new(), Vec::new());
                for t in 1.. {
                    let gpath = run_dir.join(format!("groups_iter{t:02}.txt"));
                    if !gpath.exists() {
                        break;
                    }
                    let lists = parse_member_lists(&fs::read_to_string(&gpath)?)?;
                    let iter_groups = GroupSet::from_member_lists(&set, &lists)?;
                    let ppath = run_dir.join(format!("partition_iter{t:02}.txt"));
                    let partition = Partition::parse(&fs::read_to_string(&ppath)?, iter_groups.len())?;
                    let (overall, per) = evalreport::subset_coverage(&iter_groups, &partition);
                    fig8.push((t, overall, per.iter().sum::<f64>() / per.len().max(1) as f64));
                    fig7.push((t, evalreport::group_correctness(&iter_groups, labels)?));
                }
                write(&out_dir, "fig7_correctness.csv", evalreport::fig7_csv(&fig7))?;
                write(&out_dir, "fig8_coverage.csv", evalreport::fig8_csv(&fig8))?;
            }
        }
    }
    Ok(())
}
