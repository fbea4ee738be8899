//! Pipeline stages over a fixed output-directory layout.
//!
//! ```text
//! <root>/config.resolved.toml
//! <root>/data/{train,eval}/          features, utt2spk, utt2cond
//! <root>/data/eval/trials
//! <root>/systems/<name>/             model.ckpt train.log train.summary
//!                                    train.emb eval.emb backend.bin scores
//! <root>/report.txt, report.kv
//! <root>/det/<name>.csv, det.svg
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use axvec_core::backend::{
    extract_embeddings, fuse_scores, read_scores, write_scores, Backend, EmbeddingTable, Score,
};
use axvec_core::data::{generate_corpus, generate_trials, read_pairs, read_trials, write_trials, Condition, Corpus};
use axvec_core::metrics::{evaluate_system, Report};
use axvec_core::model::{ArchConfig, Model, Variant};
use axvec_core::records::write_atomic;
use axvec_core::training::{format_step, train, TrainConfig};
use axvec_core::{Error, Result};

use crate::config::RunConfig;
use crate::det;

pub const FUSION: &str = "fusion";

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("data").join("eval")
    }

    pub fn trials(&self) -> PathBuf {
        self.eval_data().join("trials")
    }

    pub fn system(&self, name: &str) -> PathBuf {
        self.root.join("systems").join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.system(name).join("model.ckpt")
    }

    pub fn scores(&self, name: &str) -> PathBuf {
        self.system(name).join("scores")
    }

    pub fn det_dir(&self) -> PathBuf {
        self.root.join("det")
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[axvec] {}", msg.as_ref());
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn write_resolved_config(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml();
    log(format!("resolved configuration:\n{text}"));
    write_text(&layout.root.join("config.resolved.toml"), &text)
}

pub fn gen_data(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    let train = generate_corpus(&cfg.corpus)?;
    train.save(&layout.train_data())?;
    let eval = generate_corpus(&cfg.eval_corpus)?;
    eval.save(&layout.eval_data())?;
    let trials = generate_trials(&eval, cfg.trials.seed, cfg.trials.n_target, cfg.trials.n_nontarget)?;
    write_trials(&layout.trials(), &trials)?;
    log(format!(
        "generated {} training and {} evaluation utterances, {} trials",
        train.utterances.len(),
        eval.utterances.len(),
        trials.len()
    ));
    Ok(())
}

pub struct TrainSummary {
    pub steps: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub last_epoch_accuracy: f64,
}

impl TrainSummary {
    pub fn to_kv(&self) -> String {
        format!(
            "steps={}\nfirst_epoch_loss={:.6}\nlast_epoch_loss={:.6}\nlast_epoch_accuracy={:.6}\n",
            self.steps, self.first_epoch_loss, self.last_epoch_loss, self.last_epoch_accuracy
        )
    }
}

/// Trains one system on the training corpus and writes its checkpoint,
/// per-step log and summary.
pub fn train_system(layout: &Layout, name: &str, arch: &ArchConfig, tc: &TrainConfig) -> Result<TrainSummary> {
    let corpus = Corpus::load(&layout.train_data())?;
    let labels = corpus.labels();
    let speakers = corpus.speakers().len();
    if speakers != arch.num_speakers {
        return Err(Error::Config(format!(
            "training corpus has {speakers} speakers, the network {} outputs",
            arch.num_speakers
        )));
    }
    let utts: Vec<_> = corpus.utterances.into_iter().map(|u| u.features).collect();
    let mut model = Model::build(arch, tc.seed)?;
    log(format!(
        "training {name}: {} parameters, {} steps",
        model.count_params(),
        tc.total_steps
    ));
    let dir = layout.system(name);
    let ckpt = layout.checkpoint(name);
    let mut lines = String::new();
    let mut epoch = usize::MAX;
    let result = train(
        &mut model,
        &utts,
        &labels,
        tc,
        |s| {
            lines.push_str(&format_step(s));
            if s.epoch != epoch {
                epoch = s.epoch;
                log(format!("{name} epoch {} step {} loss {:.4} acc {:.3}", s.epoch, s.step, s.loss, s.accuracy));
            }
        },
        |step, m| {
            log(format!("{name}: checkpoint at step {step}"));
            m.save(&ckpt)
        },
    );
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("train.log"), &lines)?;
    let log_data = result?;
    let epochs = log_data.epoch_means();
    let summary = TrainSummary {
        steps: log_data.steps.len(),
        first_epoch_loss: epochs[0].0,
        last_epoch_loss: epochs[epochs.len() - 1].0,
        last_epoch_accuracy: epochs[epochs.len() - 1].1,
    };
    write_text(&dir.join("train.summary"), &summary.to_kv())?;
    Ok(summary)
}

pub fn extract(layout: &Layout, name: &str) -> Result<()> {
    let model = Model::load(&layout.checkpoint(name))?;
    for (split, dir) in [("train", layout.train_data()), ("eval", layout.eval_data())] {
        let corpus = Corpus::load(&dir)?;
        let table = extract_embeddings(&model, &corpus)?;
        table.save(&layout.system(name).join(format!("{split}.emb")))?;
    }
    log(format!("{name}: embeddings extracted"));
    Ok(())
}

fn speaker_labels(ids: &[String], utt2spk: &[(String, String)]) -> Result<Vec<usize>> {
    let spk: BTreeMap<&str, &str> = utt2spk.iter().map(|(u, s)| (u.as_str(), s.as_str())).collect();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for s in spk.values() {
        let n = index.len();
        index.entry(s).or_insert(n);
    }
    ids.iter()
        .map(|id| {
            spk.get(id.as_str())
                .map(|s| index[s])
                .ok_or_else(|| Error::Missing(format!("speaker of {id} in utt2spk")))
        })
        .collect()
}

pub fn backend_fit(layout: &Layout, name: &str, cfg: &RunConfig) -> Result<()> {
    let table = EmbeddingTable::load(&layout.system(name).join("train.emb"))?;
    let labels = speaker_labels(&table.ids, &read_pairs(&layout.train_data().join("utt2spk"))?)?;
    let (backend, fit) = Backend::fit(&table, &labels, &cfg.backend)?;
    for w in &fit.warnings {
        log(format!("{name}: warning: {w}"));
    }
    backend.save(&layout.system(name).join("backend.bin"))?;
    log(format!(
        "{name}: backend fitted (LDA {} dims, PLDA log-likelihood {:.3} -> {:.3})",
        backend.preprocess.lda_dim(),
        fit.log_likelihood[0],
        fit.log_likelihood[fit.log_likelihood.len() - 1]
    ));
    Ok(())
}

pub fn score(layout: &Layout, name: &str) -> Result<Vec<Score>> {
    let backend = Backend::load(&layout.system(name).join("backend.bin"))?;
    let table = EmbeddingTable::load(&layout.system(name).join("eval.emb"))?;
    let trials = read_trials(&layout.trials())?;
    let scores = backend.score_trials(&table, &trials)?;
    write_scores(&layout.scores(name), &scores)?;
    Ok(scores)
}

pub fn fuse(inputs: &[PathBuf], output: &Path) -> Result<()> {
    let lists = inputs.iter().map(|p| read_scores(p)).collect::<Result<Vec<_>>>()?;
    write_scores(output, &fuse_scores(&lists)?)?;
    log(format!("fused {} score files into {}", inputs.len(), output.display()));
    Ok(())
}

pub fn read_utt2cond(path: &Path) -> Result<BTreeMap<String, Condition>> {
    read_pairs(path)?
        .into_iter()
        .map(|(u, c)| Ok((u, c.parse()?)))
        .collect()
}

/// A named score file.
#[derive(Clone, Debug)]
pub struct System {
    pub name: String,
    pub scores: PathBuf,
}

impl System {
    /// `name=path`, or a bare path named after its file stem.
    pub fn parse(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((name, path)) => Self {
                name: name.to_string(),
                scores: PathBuf::from(path),
            },
            None => {
                let scores = PathBuf::from(arg);
                let name = scores
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| arg.to_string());
                Self { name, scores }
            }
        }
    }
}

/// Systems of the run plan, plus fusion when there is something to fuse.
pub fn default_systems(layout: &Layout, cfg: &RunConfig) -> Vec<System> {
    let mut names: Vec<String> = cfg.run.systems.iter().map(|v| v.name().to_string()).collect();
    if cfg.run.fusion.len() > 1 {
        names.push(FUSION.into());
    }
    names
        .into_iter()
        .map(|name| System {
            scores: layout.scores(&name),
            name,
        })
        .collect()
}

pub fn evaluate(
    systems: &[System],
    trials: &Path,
    utt2cond: &Path,
    cfg: &RunConfig,
    out_prefix: Option<&Path>,
) -> Result<Report> {
    let trials = read_trials(trials)?;
    let cond = read_utt2cond(utt2cond)?;
    let mut report = Report::new(&cfg.metrics);
    for s in systems {
        let scores = read_scores(&s.scores)?;
        report
            .rows
            .extend(evaluate_system(&s.name, &scores, &trials, &cond, &cfg.metrics)?);
    }
    if let Some(prefix) = out_prefix {
        write_text(&prefix.with_extension("txt"), &report.to_text())?;
        write_text(&prefix.with_extension("kv"), &report.to_kv())?;
    }
    Ok(report)
}

pub fn det_export(systems: &[System], trials: &Path, out_dir: &Path) -> Result<()> {
    let trials = read_trials(trials)?;
    let mut curves = Vec::new();
    for s in systems {
        let scores = read_scores(&s.scores)?;
        let points = det::points_for(&scores, &trials)?;
        write_text(&out_dir.join(format!("{}.csv", s.name)), &det::to_csv(&points))?;
        curves.push((s.name.clone(), points));
    }
    write_text(&out_dir.join("det.svg"), &det::to_svg(&curves))?;
    log(format!("DET curves written to {}", out_dir.display()));
    Ok(())
}

/// Train, extract, fit and score one system.
pub fn system_pipeline(layout: &Layout, name: &str, arch: &ArchConfig, cfg: &RunConfig) -> Result<TrainSummary> {
    let summary = train_system(layout, name, arch, &cfg.train)?;
    extract(layout, name)?;
    backend_fit(layout, name, cfg)?;
    score(layout, name)?;
    Ok(summary)
}

/// The full experiment: data, every planned system, fusion, report and DET
/// export.
pub fn run_all(layout: &Layout, cfg: &RunConfig) -> Result<Report> {
    write_resolved_config(layout, cfg)?;
    gen_data(layout, cfg)?;
    for &v in &cfg.run.systems {
        let arch = ArchConfig {
            variant: v,
            ..cfg.arch.clone()
        };
        system_pipeline(layout, v.name(), &arch, cfg)?;
    }
    if cfg.run.fusion.len() > 1 {
        let inputs: Vec<PathBuf> = cfg.run.fusion.iter().map(|v| layout.scores(v.name())).collect();
        fuse(&inputs, &layout.scores(FUSION))?;
    }
    let systems = default_systems(layout, cfg);
    let report = evaluate(
        &systems,
        &layout.trials(),
        &layout.eval_data().join("utt2cond"),
        cfg,
        Some(&layout.root.join("report")),
    )?;
    det_export(&systems, &layout.trials(), &layout.det_dir())?;
    Ok(report)
}

/// Trains the sweep variant once per pool size and tabulates the results.
pub fn sweep_pool(layout: &Layout, cfg: &RunConfig, sizes: &[usize]) -> Result<String> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no pool sizes to sweep".into()));
    }
    write_resolved_config(layout, cfg)?;
    if !layout.trials().exists() {
        gen_data(layout, cfg)?;
    }
    let variant = cfg.run.sweep_variant;
    if !variant.uses_acnn() {
        return Err(Error::Config(format!("sweep variant {variant} has no filter pool")));
    }
    let mut table = String::new();
    let _ = write!(table, "{:<4}{:>12}{:>10}", "N", "params", "EER(%)");
    for p in &cfg.metrics.p_targets {
        let _ = write!(table, "{:>12}", format!("DCF({p:.0e})"));
    }
    let _ = writeln!(table, "{:>10}", "actDCF");
    for &n in sizes {
        let arch = ArchConfig {
            variant,
            pool_size: n,
            ..cfg.arch.clone()
        };
        let name = format!("{variant}-n{n}");
        system_pipeline(layout, &name, &arch, cfg)?;
        let params = Model::build(&arch, 0)?.count_params();
        let system = System {
            scores: layout.scores(&name),
            name: name.clone(),
        };
        let report = evaluate(&[system], &layout.trials(), &layout.eval_data().join("utt2cond"), cfg, None)?;
        let all = report
            .find(&name, "all")
            .ok_or_else(|| Error::Missing(format!("overall row for {name}")))?;
        let _ = write!(table, "{n:<4}{params:>12}{:>10.2}", 100.0 * all.eer);
        for v in &all.min_dcf {
            let _ = write!(table, "{v:>12.4}");
        }
        let _ = writeln!(table, "{:>10.4}", all.act_dcf.min(cfg.metrics.act_dcf_ceiling));
    }
    write_text(&layout.root.join("sweep.txt"), &table)?;
    Ok(table)
}

/// Parses a variant name given on the command line.
pub fn parse_variant(s: &str) -> Result<Variant> {
    s.parse()
}
