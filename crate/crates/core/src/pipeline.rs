//! Source pretraining and the round-based adaptation loop.
//!
//! Each round scores every target image with the current model, selects
//! confident images per class, derives entropy thresholds and filter maps,
//! cuts scale-invariant patches and then optimizes source cross-entropy plus
//! the adaptation loss for a fixed number of steps. Source batches are drawn
//! from `(seed, global step)`, so a round whose adaptation term vanishes is
//! exactly a continuation of source training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::entropy::{filter_from_labels, self_entropy, FilterMap, ThresholdVector};
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalReport};
use crate::losses::{adaptation_loss, ce_loss, LossConfig, Reduction};
use crate::model::{
    backward, forward, read_checkpoint, write_checkpoint, AdamConfig, ModelConfig, ModelParams,
    OptimizerState, Params,
};
use crate::par;
use crate::scale_examples::{generate_examples, write_archive, PatchConfig, ScaleExample, Source};
use crate::selection::{class_based_sorting, ImageId, SelectionConfig, SelectionRecord, SelectionResult};
use crate::synth::{DatasetManifest, Domain, CLASS_NAMES};
use crate::tensor::{argmax_labels, softmax, Image, LabelMap, ProbVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    /// Labelled target set used only for metric snapshots.
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_manifest: "data/source/manifest.json".into(),
            target_manifest: "data/target/manifest.json".into(),
            eval_manifest: None,
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub p0: f64,
    pub delta_p: f64,
    /// Replace every class threshold by this value (diagnostics; a negative
    /// value filters out every pixel).
    pub threshold_override: Option<f32>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            p0: 0.1,
            delta_p: 0.05,
            threshold_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub k: usize,
    /// Defaults to half the image height/width.
    pub patch_height: Option<usize>,
    pub patch_width: Option<usize>,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection {
            k: 4,
            patch_height: None,
            patch_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub source_steps: usize,
    pub source_per_step: usize,
    pub target_patches_per_step: usize,
    pub hidden: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            rounds: 4,
            steps_per_round: 150,
            source_steps: 600,
            source_per_step: 2,
            target_patches_per_step: 8,
            hidden: 16,
            seed: 0,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub selection: SelectionSection,
    pub patches: PatchSection,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            selection: SelectionSection::default(),
            patches: PatchSection::default(),
            loss: LossConfig {
                reduction: Reduction::Mean,
                ..LossConfig::default()
            },
            optim: AdamConfig::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if r.source_per_step == 0 {
            return Err(Error::Config("source_per_step must be >= 1".into()));
        }
        if r.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.patches.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        self.loss.validate()?;
        SelectionConfig {
            p0: self.selection.p0,
            delta_p: self.selection.delta_p,
            classes: 2,
            round: 0,
        }
        .validate()
    }

    pub fn patch_config(&self, height: usize, width: usize) -> PatchConfig {
        let mut p = PatchConfig::for_image(height, width, crate::seed::derive(self.run.seed, &[0xba7c]));
        p.k = self.patches.k;
        if let Some(h) = self.patches.patch_height {
            p.patch_height = h;
        }
        if let Some(w) = self.patches.patch_width {
            p.patch_width = w;
        }
        p
    }

    pub fn selection_config(&self, classes: usize, round: usize) -> SelectionConfig {
        SelectionConfig {
            p0: self.selection.p0,
            delta_p: self.selection.delta_p,
            classes,
            round,
        }
    }
}

/// One row of `losses.csv`. `round` is `None` during source pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub round: Option<usize>,
    pub step: u64,
    pub loss_src: f64,
    pub loss_ce: f64,
    pub loss_fl: f64,
    pub total: f64,
}

pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("round,step,loss_src,loss_ce,loss_fl,total\n");
    for r in rows {
        let round = r.round.map(|v| v.to_string()).unwrap_or_else(|| "source".into());
        writeln!(
            out,
            "{round},{},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.loss_src, r.loss_ce, r.loss_fl, r.total
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: usize,
    pub p: f64,
    pub thresholds: Vec<Option<f32>>,
    pub selected: Vec<ImageId>,
    pub examples: usize,
    pub checkpoint: Option<PathBuf>,
    pub target_miou: Option<f64>,
}

pub struct RoundOutput {
    pub selection: SelectionResult,
    pub examples: Vec<ScaleExample>,
    pub state: RoundState,
}

/// Sum per-image gradients, in order when deterministic.
fn sum_grads(grads: Vec<Params<f32>>, config: ModelConfig, deterministic: bool) -> Params<f32> {
    if deterministic || !par::is_parallel() {
        let mut acc = Params::zeros(config);
        for g in &grads {
            acc.add_assign(g);
        }
        acc
    } else {
        par::map_reduce_unordered(
            &grads,
            |g| g.clone(),
            Params::zeros(config),
            |mut a, b| {
                a.add_assign(&b);
                a
            },
        )
    }
}

/// Model, optimizer and step counter of a run.
pub struct Session {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub opt: OptimizerState,
    /// Optimizer steps taken so far, across pretraining and all rounds.
    pub step: u64,
    pub losses: Vec<LossRow>,
}

impl Session {
    pub fn new(cfg: RunConfig, classes: usize, height: usize, width: usize) -> Self {
        let config = ModelConfig {
            classes,
            hidden: cfg.run.hidden,
            height,
            width,
        };
        let params = Params::init(config, crate::seed::derive(cfg.run.seed, &[0x1417]));
        let opt = OptimizerState::new(&params, cfg.optim);
        Session {
            cfg,
            params,
            opt,
            step: 0,
            losses: Vec::new(),
        }
    }

    pub fn resume(cfg: RunConfig, params: ModelParams, opt: OptimizerState) -> Self {
        Session {
            step: opt.t,
            cfg,
            params,
            opt,
            losses: Vec::new(),
        }
    }

    fn source_batch(&self, n: usize) -> Vec<usize> {
        let mut rng = crate::seed::rng(self.cfg.run.seed, &[0x50c, self.step]);
        let k = self.cfg.run.source_per_step.min(n);
        index::sample(&mut rng, n, k).into_vec()
    }

    /// Mean cross-entropy over all labelled pixels of the batch, and its gradient.
    fn source_term(&self, batch: &[(&Image, &LabelMap)]) -> Result<(f64, Params<f32>)> {
        let config = self.params.config;
        let fwd = par::map(batch, |(x, y)| -> Result<_> {
            let (logits, cache) = forward(&self.params, x)?;
            let p = softmax(&logits)?;
            Ok((ce_loss(&p, y)?, cache))
        });
        let fwd: Vec<_> = fwd.into_iter().collect::<Result<_>>()?;
        let count: usize = fwd.iter().map(|(l, _)| l.count).sum();
        if count == 0 {
            return Ok((0.0, Params::zeros(config)));
        }
        let scale = 1.0 / count as f64;
        let loss = fwd.iter().map(|(l, _)| l.loss).sum::<f64>() * scale;
        let grads = par::map(&fwd, |(l, cache)| {
            let mut g = l.grad.clone();
            g.data.iter_mut().for_each(|v| *v *= scale as f32);
            backward(&self.params, cache, &g)
        });
        let grads: Vec<_> = grads.into_iter().collect::<Result<_>>()?;
        Ok((loss, sum_grads(grads, config, self.cfg.run.deterministic)))
    }

    fn adaptation_term(&self, batch: &[ScaleExample]) -> Result<(f64, f64, f64, Option<Params<f32>>)> {
        if batch.is_empty() {
            return Ok((0.0, 0.0, 0.0, None));
        }
        let fwd = par::map(batch, |ex| -> Result<_> {
            let (logits, cache) = forward(&self.params, &ex.image)?;
            Ok((softmax(&logits)?, cache))
        });
        let fwd: Vec<(ProbVolume<f32>, _)> = fwd.into_iter().collect::<Result<_>>()?;
        let (probs, caches): (Vec<_>, Vec<_>) = fwd.into_iter().unzip();
        let adapt = adaptation_loss(batch, &probs, &self.cfg.loss)?;
        if adapt.ce_count == 0 && (self.cfg.loss.beta == 0.0 || adapt.focal_count == 0) {
            return Ok((adapt.total, adapt.ce, adapt.focal, None));
        }
        let pairs: Vec<_> = caches.iter().zip(&adapt.grads).collect();
        let grads = par::map(&pairs, |(cache, g)| backward(&self.params, cache, g));
        let grads: Vec<_> = grads.into_iter().collect::<Result<_>>()?;
        let total = sum_grads(grads, self.params.config, self.cfg.run.deterministic);
        Ok((adapt.total, adapt.ce, adapt.focal, Some(total)))
    }

    /// One optimizer step on a source batch plus optional adaptation examples.
    fn step_on(
        &mut self,
        source: &[(Image, LabelMap)],
        examples: &[ScaleExample],
        round: Option<usize>,
    ) -> Result<LossRow> {
        let batch: Vec<(&Image, &LabelMap)> = self
            .source_batch(source.len())
            .into_iter()
            .map(|i| (&source[i].0, &source[i].1))
            .collect();
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFiniteLogit { .. } => Error::Diverged { step, loss: f64::NAN },
            e => e,
        };
        let (loss_src, mut grads) = self.source_term(&batch).map_err(diverged)?;
        let (adapt, ce, fl, adapt_grads) = self.adaptation_term(examples).map_err(diverged)?;
        if let Some(g) = adapt_grads {
            grads.add_assign(&g);
        }
        let total = loss_src + adapt;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: total,
            });
        }
        crate::model::adam_step(&mut self.params, &grads, &mut self.opt)?;
        let row = LossRow {
            round,
            step: self.step,
            loss_src,
            loss_ce: ce,
            loss_fl: fl,
            total,
        };
        self.step += 1;
        self.losses.push(row);
        Ok(row)
    }

    /// Supervised training on labelled source images.
    pub fn train_source(&mut self, source: &[(Image, LabelMap)], steps: usize) -> Result<()> {
        if source.is_empty() && steps > 0 {
            return Err(Error::Config("source set is empty".into()));
        }
        for _ in 0..steps {
            let row = self.step_on(source, &[], None)?;
            if row.step % 100 == 0 {
                log::debug!("source step {} loss {:.4}", row.step, row.total);
            }
        }
        Ok(())
    }

    /// Predictions of the current model on every target image.
    pub fn predict_all(&self, target: &[(ImageId, Image)]) -> Result<Vec<ProbVolume<f32>>> {
        par::map(target, |(_, x)| crate::model::predict(&self.params, x))
            .into_iter()
            .collect()
    }

    /// Select confident images and build their filter maps and patches.
    pub fn prepare_round(
        &self,
        target: &[(ImageId, Image)],
        round: usize,
    ) -> Result<(SelectionResult, Vec<ScaleExample>)> {
        let config = self.params.config;
        let probs = self.predict_all(target)?;
        let pairs: Vec<(ImageId, &ProbVolume<f32>)> =
            target.iter().zip(&probs).map(|((id, _), p)| (*id, p)).collect();
        let mut selection = class_based_sorting(&pairs, &self.cfg.selection_config(config.classes, round))?;
        if selection.selected.is_empty() {
            return Err(Error::EmptySelection { round });
        }
        if let Some(h) = self.cfg.selection.threshold_override {
            selection.thresholds = ThresholdVector::uniform(config.classes, h);
        }
        let resolved = selection.thresholds.resolved();
        let position: std::collections::HashMap<ImageId, usize> =
            target.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let chosen: Vec<usize> = selection.selected.iter().map(|id| position[id]).collect();
        let filters = par::map(&chosen, |&i| -> Result<FilterMap> {
            let p = &probs[i];
            Ok(filter_from_labels(&argmax_labels(p), &self_entropy(p)?, &resolved))
        });
        let filters: Vec<FilterMap> = filters.into_iter().collect::<Result<_>>()?;
        let sources: Vec<Source<'_>> = chosen
            .iter()
            .zip(&filters)
            .map(|(&i, f)| Source {
                id: target[i].0,
                image: &target[i].1,
                probs: &probs[i],
                filter: f,
            })
            .collect();
        let patch = self.cfg.patch_config(config.height, config.width);
        let examples = generate_examples(&sources, &patch, round)?;
        Ok((selection, examples))
    }

    /// Select, generate examples, then optimize for `steps_per_round` steps.
    pub fn adapt_round(
        &mut self,
        source: &[(Image, LabelMap)],
        target: &[(ImageId, Image)],
        round: usize,
    ) -> Result<RoundOutput> {
        if target.is_empty() {
            return Err(Error::EmptyTargetSet);
        }
        let (selection, examples) = self.prepare_round(target, round)?;
        let filtered: usize = examples.iter().map(|e| e.filter.count()).sum();
        log::info!(
            "round {round}: p={:.2} selected {} images, {} patches, {} trusted pixels",
            selection.p,
            selection.selected.len(),
            examples.len(),
            filtered
        );
        if filtered == 0 {
            log::warn!("round {round}: every pseudo-label was filtered out");
        }
        let per_step = self.cfg.run.target_patches_per_step.min(examples.len());
        for s in 0..self.cfg.run.steps_per_round {
            let mut rng = crate::seed::rng(self.cfg.run.seed, &[0x7a6, round as u64, s as u64]);
            let batch: Vec<ScaleExample> = index::sample(&mut rng, examples.len(), per_step)
                .into_iter()
                .map(|i| examples[i].clone())
                .collect();
            self.step_on(source, &batch, Some(round))?;
        }
        let state = RoundState {
            round,
            p: selection.p,
            thresholds: selection.thresholds.values.clone(),
            selected: selection.selected.clone(),
            examples: examples.len(),
            checkpoint: None,
            target_miou: None,
        };
        Ok(RoundOutput {
            selection,
            examples,
            state,
        })
    }

    pub fn evaluate(&self, pairs: &[(Image, LabelMap)]) -> Result<(evaluate::ConfusionMatrix, EvalReport)> {
        let refs: Vec<(&Image, &LabelMap)> = pairs.iter().map(|(x, y)| (x, y)).collect();
        evaluate::evaluate(&self.params, &refs)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serialisable") + "\n"))
}

fn strip_labels(pairs: Vec<(ImageId, Image, LabelMap)>) -> Vec<(Image, LabelMap)> {
    pairs.into_iter().map(|(_, x, y)| (x, y)).collect()
}

/// Datasets of a run, loaded once.
pub struct Data {
    pub source: Vec<(Image, LabelMap)>,
    /// Target images only; their labels are never loaded here.
    pub target: Vec<(ImageId, Image)>,
    pub eval: Option<Vec<(Image, LabelMap)>>,
    pub source_hash: String,
    pub target_hash: String,
}

impl Data {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let src = DatasetManifest::read(&cfg.source_manifest)?;
        let tgt = DatasetManifest::read(&cfg.target_manifest)?;
        if tgt.domain != Domain::Target {
            return Err(Error::LabelLeak(format!(
                "{} is not a target-domain manifest; adaptation would be able to read its labels",
                cfg.target_manifest.display()
            )));
        }
        let eval = match &cfg.eval_manifest {
            Some(p) => Some(strip_labels(DatasetManifest::read(p)?.eval_pairs()?)),
            None => None,
        };
        Ok(Data {
            source: strip_labels(src.labelled()?),
            target: tgt.images()?,
            eval,
            source_hash: src.spec_hash,
            target_hash: tgt.spec_hash,
        })
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (x, _) = self
            .source
            .first()
            .ok_or_else(|| Error::Config("source set is empty".into()))?;
        Ok((x.height(), x.width()))
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    config: &'a RunConfig,
    crate_version: &'static str,
    lst_version: u16,
    lsec_version: u16,
    source_spec_hash: &'a str,
    target_spec_hash: &'a str,
}

fn write_provenance(cfg: &RunConfig, data: &Data) -> Result<()> {
    write_json(
        &cfg.data.out_dir.join("run.json"),
        &Provenance {
            config: cfg,
            crate_version: env!("CARGO_PKG_VERSION"),
            lst_version: crate::lst::VERSION,
            lsec_version: crate::model::checkpoint::VERSION,
            source_spec_hash: &data.source_hash,
            target_spec_hash: &data.target_hash,
        },
    )
}

fn write_eval(dir: &Path, session: &Session, pairs: &[(Image, LabelMap)]) -> Result<EvalReport> {
    let (cm, report) = session.evaluate(pairs)?;
    evaluate::write_report(dir, &cm, &report, Some(&CLASS_NAMES[..session.params.config.classes.min(6)]))?;
    Ok(report)
}

/// Train on the source set and write `source/model.lsec`, `losses.csv` and
/// evaluation reports.
pub fn run_train_source(cfg: &RunConfig) -> Result<Session> {
    cfg.validate()?;
    let data = Data::load(&cfg.data)?;
    run_train_source_with(cfg, &data)
}

pub fn run_train_source_with(cfg: &RunConfig, data: &Data) -> Result<Session> {
    let (h, w) = data.dims()?;
    let out = cfg.data.out_dir.join("source");
    let mut session = Session::new(cfg.clone(), crate::synth::CLASS_NAMES.len(), h, w);
    session.train_source(&data.source, cfg.run.source_steps)?;
    write_checkpoint(out.join("model.lsec"), &session.params, &session.opt)?;
    write_text(&out.join("losses.csv"), &losses_csv(&session.losses))?;
    let src = write_eval(&out.join("eval_source"), &session, &data.source)?;
    log::info!("source-only: source mIoU {:.4}", src.miou);
    if let Some(eval) = &data.eval {
        let tgt = write_eval(&out.join("eval_target"), &session, eval)?;
        log::info!("source-only: target mIoU {:.4}", tgt.miou);
    }
    write_provenance(cfg, data)?;
    Ok(session)
}

/// Full adaptation run. Starts from `init` when given, otherwise pretrains on
/// the source set first.
pub fn run_adapt(cfg: &RunConfig, init: Option<&Path>) -> Result<Vec<RoundState>> {
    cfg.validate()?;
    let data = Data::load(&cfg.data)?;
    run_adapt_with(cfg, &data, init)
}

pub fn run_adapt_with(cfg: &RunConfig, data: &Data, init: Option<&Path>) -> Result<Vec<RoundState>> {
    let out = &cfg.data.out_dir;
    let mut session = match init {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            Session::resume(cfg.clone(), ck.params, ck.optimizer)
        }
        None => run_train_source_with(cfg, data)?,
    };
    session.losses.clear();
    let mut states = Vec::new();
    let mut history: Vec<SelectionRecord> = Vec::new();
    for round in 0..cfg.run.rounds {
        let dir = out.join(format!("round_{round}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut result = session.adapt_round(&data.source, &data.target, round)?;
        result.selection.write_json(dir.join("selection.json"))?;
        let patch = cfg.patch_config(session.params.config.height, session.params.config.width);
        write_archive(dir.join("examples"), &result.examples, &patch, round)?;
        let ck = dir.join("model.lsec");
        write_checkpoint(&ck, &session.params, &session.opt)?;
        result.state.checkpoint = Some(PathBuf::from(format!("round_{round}/model.lsec")));
        if let Some(eval) = &data.eval {
            let report = write_eval(&dir.join("eval"), &session, eval)?;
            log::info!("round {round}: target mIoU {:.4}", report.miou);
            result.state.target_miou = Some(report.miou);
        }
        write_json(&dir.join("state.json"), &result.state)?;
        history.push(result.selection.to_record());
        states.push(result.state);
    }
    write_text(&out.join("losses.csv"), &losses_csv(&session.losses))?;
    write_text(
        &out.join("selection_history.csv"),
        &evaluate::selection_report(&[(history_label(cfg), &history)]),
    )?;
    write_provenance(cfg, data)?;
    Ok(states)
}

/// Name of a run in `selection_history.csv`.
pub fn history_label(cfg: &RunConfig) -> &'static str {
    if cfg.loss.beta > 0.0 {
        "with_fl"
    } else {
        "without_fl"
    }
}
