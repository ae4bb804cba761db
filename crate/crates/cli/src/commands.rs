use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use vibra::dataset::{load_windows, make_splits, store_windows, DatasetIndex, GestureWindow, SessionKey, SplitPlan};
use vibra::detect::{annotate_corpus, apply_corrections, AnnotationJob, CorrectionManifest, EventAnnotation};
use vibra::model::checkpoint::{load_checkpoint, save_checkpoint};
use vibra::pipeline::{materialize, AnnotationSource};
use vibra::search::{run_search, RunControl, SearchSpace};
use vibra::synth::{generate_corpus, INDEX_FILE};
use vibra::train::{evaluate, train_plan, FoldReport, RunReport};
use vibra::{Gesture, GestureSet};

use crate::config::PipelineConfig;
use crate::report;
use crate::rundir::{write_atomic, Plan, RunDir, Step};
use crate::{Cli, Command, Status};

pub fn dispatch(cli: &Cli, mut cfg: PipelineConfig) -> Result<Status> {
    let (split, gestures) = match &cli.command {
        Command::Train { split, gestures, .. } | Command::Eval { split, gestures, .. } => (split.clone(), *gestures),
        Command::Search { gestures, .. } => (None, *gestures),
        _ => (None, None),
    };
    if let Some(s) = split {
        cfg.experiment.split = s;
    }
    if let Some(g) = gestures {
        cfg.experiment.gestures = g;
    }
    if let Command::Search {
        space: Some(path),
        budget,
        ..
    } = &cli.command
    {
        cfg.search.space = SearchSpace::load(path)?;
        if budget.is_some() {
            cfg.search.budget = *budget;
        }
    } else if let Command::Search { budget: Some(b), .. } = &cli.command {
        cfg.search.budget = Some(*b);
    }
    cfg.validate()?;

    let run = RunDir::open(&cli.out)?;
    let argv: Vec<String> = std::env::args().collect();
    let ctx = Ctx {
        run,
        cfg,
        argv,
        force: cli.force,
    };
    match &cli.command {
        Command::Synth { participants, sessions } => ctx.synth(*participants, *sessions),
        Command::Annotate { dataset } => ctx.annotate(dataset.as_deref()),
        Command::Window { dataset, source } => ctx.window(dataset.as_deref(), source.map(Into::into)),
        Command::Train { dataset, .. } => ctx.train(dataset.as_deref()),
        Command::Eval {
            dataset,
            checkpoint,
            fold,
            ..
        } => ctx.eval(dataset.as_deref(), checkpoint.as_deref(), fold.as_deref()),
        Command::Search {
            dataset, stop_after, ..
        } => ctx.search(dataset.as_deref(), *stop_after),
        Command::Report { dataset, plot } => ctx.report(dataset.as_deref(), plot.as_deref()),
    }
}

struct Ctx {
    run: RunDir,
    cfg: PipelineConfig,
    argv: Vec<String>,
    force: bool,
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

impl Ctx {
    fn index_path(&self, dataset: Option<&Path>) -> PathBuf {
        dataset.map_or_else(|| self.run.path("data").join(INDEX_FILE), Path::to_path_buf)
    }

    fn load_index(&self, dataset: Option<&Path>) -> Result<(PathBuf, DatasetIndex)> {
        let path = self.index_path(dataset);
        let index = DatasetIndex::load(&path)
            .with_context(|| format!("loading dataset index {} (run `vibra synth` first?)", path.display()))?;
        Ok((path, index))
    }

    fn record(&self, name: &str, stamp: serde_json::Value, outputs: Vec<String>, complete: bool) -> Result<()> {
        self.run.record(
            name,
            Step {
                command: self.argv.clone(),
                stamp,
                outputs,
                complete,
            },
        )
    }

    /// Stamp of an earlier step, so downstream steps rerun when it changes.
    fn upstream(&self, name: &str) -> Result<serde_json::Value> {
        Ok(self
            .run
            .manifest()?
            .steps
            .get(name)
            .map_or(json!(null), |s| s.stamp.clone()))
    }

    fn up_to_date(&self, name: &str, stamp: &serde_json::Value) -> Result<bool> {
        match self.run.plan(name, stamp, self.force)? {
            Plan::UpToDate => {
                println!("{name}: up to date");
                Ok(true)
            }
            Plan::Run => Ok(false),
        }
    }

    fn synth(&self, participants: u16, sessions: u16) -> Result<Status> {
        let stamp = json!({ "synth": self.cfg.synth, "participants": participants, "sessions": sessions });
        if self.up_to_date("synth", &stamp)? {
            return Ok(Status::Complete);
        }
        let staging = self.run.stage("data")?;
        generate_corpus(&self.cfg.synth, participants, sessions, &staging)?;
        let dest = self.run.publish(&staging, "data")?;
        write_atomic(
            &self.run.path("synth.toml"),
            toml::to_string(&self.cfg.synth)?.as_bytes(),
        )?;
        self.record("synth", stamp, vec!["data".into()], true)?;
        println!(
            "synth: {} recordings ({} participants x {} sessions, {} events each) in {}",
            participants as usize * sessions as usize,
            participants,
            sessions,
            self.cfg.synth.events_per_session(),
            dest.display()
        );
        Ok(Status::Complete)
    }

    fn annotate(&self, dataset: Option<&Path>) -> Result<Status> {
        let (index_path, mut index) = self.load_index(dataset)?;
        let expected = self.cfg.expected_count();
        let stamp = json!({
            "dataset": index_path,
            "detector": self.cfg.detector,
            "annotate": self.cfg.annotate,
            "expected": expected,
            "synth": self.upstream("synth")?,
            "recordings": index.recordings.iter().map(|e| (&e.recording, &e.ground_truth)).collect::<Vec<_>>(),
        });
        if self.up_to_date("annotate", &stamp)? {
            return Ok(Status::Complete);
        }
        let mut jobs = Vec::with_capacity(index.recordings.len());
        for entry in &index.recordings {
            let protocol = match (&entry.ground_truth, self.cfg.annotate.protocol_labels()) {
                (Some(gt), true) => Some(
                    EventAnnotation::load(&index.resolve(gt))?
                        .events
                        .iter()
                        .map(|e| {
                            e.label
                                .ok_or_else(|| anyhow!("unlabeled protocol event in {}", gt.display()))
                        })
                        .collect::<Result<Vec<Gesture>>>()?,
                ),
                _ => None,
            };
            jobs.push(AnnotationJob {
                recording_id: entry.id(),
                path: index.resolve(&entry.recording),
                protocol,
            });
        }
        let mut corpus = annotate_corpus(&jobs, &self.cfg.detector, Some(expected))?;

        if let Some(dir) = &self.cfg.annotate.corrections_dir {
            for (ann, file) in corpus.annotations.iter_mut().zip(&mut corpus.report.files) {
                let path = dir.join(format!("{}.json", ann.recording_id));
                if path.exists() {
                    *ann = apply_corrections(ann, &CorrectionManifest::load(&path)?, self.cfg.detector.lockout_ms)?;
                    file.detected = ann.events.len();
                    file.needs_review = file.detected != expected;
                }
            }
            let report = &mut corpus.report;
            report.automated = report.files.iter().filter(|f| !f.needs_review).count();
            report.automation_rate = report.automated as f64 / report.total.max(1) as f64;
        }

        let root = index.root().to_path_buf();
        let staging = stage_dir(&root, "annotations")?;
        for ann in &corpus.annotations {
            ann.save(&staging.join(format!("{}.json", ann.recording_id)))?;
        }
        publish_dir(&staging, &root.join("annotations"))?;
        for entry in &mut index.recordings {
            entry.annotation = Some(PathBuf::from("annotations").join(format!("{}.json", entry.id())));
        }
        write_atomic(&index_path, serde_json::to_string_pretty(&index)?.as_bytes())?;
        let report_path = self.run.path("annotate/automation.json");
        write_atomic(&report_path, serde_json::to_string_pretty(&corpus.report)?.as_bytes())?;
        self.record("annotate", stamp, vec!["annotate/automation.json".into()], true)?;

        let r = &corpus.report;
        for f in r.files.iter().filter(|f| f.needs_review) {
            println!(
                "  {}: {} events detected, {} expected -> needs review",
                f.recording_id, f.detected, expected
            );
        }
        println!(
            "annotate: {}/{} recordings automated ({:.1}%), report in {}",
            r.automated,
            r.total,
            100.0 * r.automation_rate,
            report_path.display()
        );
        Ok(Status::Complete)
    }

    fn window_stamp(&self, index_path: &Path, source: AnnotationSource) -> Result<serde_json::Value> {
        Ok(json!({
            "dataset": index_path,
            "preprocess": self.cfg.preprocess,
            "source": source,
            "synth": self.upstream("synth")?,
            "annotate": self.upstream("annotate")?,
        }))
    }

    fn window(&self, dataset: Option<&Path>, source: Option<AnnotationSource>) -> Result<Status> {
        let (index_path, index) = self.load_index(dataset)?;
        let source = source.unwrap_or(self.cfg.windows.source);
        let stamp = self.window_stamp(&index_path, source)?;
        if self.up_to_date("window", &stamp)? {
            return Ok(Status::Complete);
        }
        let windows = materialize(&index, &self.cfg.preprocess, GestureSet::All, source)?;
        let staging = self.run.stage("windows")?;
        store_windows(&windows, &staging.join("windows.vwin"))?;
        let mut per_class = BTreeMap::new();
        for w in &windows {
            *per_class.entry(w.label.name()).or_insert(0usize) += 1;
        }
        let (channels, len) = windows.first().map_or((0, 0), |w| (w.channels, w.len));
        let summary = json!({
            "count": windows.len(),
            "channels": channels,
            "len": len,
            "per_class": per_class,
            "preprocess": self.cfg.preprocess,
            "source": source,
        });
        fs::write(staging.join("windows.json"), serde_json::to_string_pretty(&summary)?)?;
        self.run.publish(&staging, "windows")?;
        self.record("window", stamp, vec!["windows/windows.vwin".into()], true)?;
        println!(
            "window: {} windows of {channels}x{len} in {}",
            windows.len(),
            self.run.path("windows").display()
        );
        Ok(Status::Complete)
    }

    /// Windows for training: the stored ones when they match the current
    /// pre-processing, otherwise freshly materialized.
    fn windows(&self, dataset: Option<&Path>, gestures: GestureSet) -> Result<(Vec<GestureWindow>, serde_json::Value)> {
        let (index_path, index) = self.load_index(dataset)?;
        let source = self.cfg.windows.source;
        let stamp = self.window_stamp(&index_path, source)?;
        let stored = self.run.path("windows/windows.vwin");
        let manifest = self.run.manifest()?;
        let windows = match manifest.steps.get("window") {
            Some(step) if step.complete && step.stamp == stamp && stored.exists() => load_windows(&stored)?,
            _ => materialize(&index, &self.cfg.preprocess, gestures, source)?,
        };
        let windows: Vec<GestureWindow> = windows.into_iter().filter(|w| gestures.contains(w.label)).collect();
        if windows.is_empty() {
            bail!("no labeled windows for the {}-gesture set", gestures.num_classes());
        }
        Ok((windows, stamp))
    }

    fn plan(&self, windows: &[GestureWindow]) -> Result<SplitPlan> {
        let mut keys: Vec<SessionKey> = windows.iter().map(GestureWindow::key).collect();
        keys.sort_unstable();
        keys.dedup();
        Ok(make_splits(&keys, self.cfg.split()?)?)
    }

    fn run_name(&self) -> Result<String> {
        Ok(format!(
            "{}_{}g",
            self.cfg.experiment.split.to_uppercase().replace(':', "-"),
            self.cfg.gestures()?.num_classes()
        ))
    }

    fn train(&self, dataset: Option<&Path>) -> Result<Status> {
        let gestures = self.cfg.gestures()?;
        let name = self.run_name()?;
        let step = format!("train/{name}");
        let (windows, window_stamp) = self.windows(dataset, gestures)?;
        let (channels, len) = (windows[0].channels, windows[0].len);
        let model = self.cfg.model.build(channels, len, gestures.num_classes());
        model.validate()?;
        let stamp = json!({
            "windows": window_stamp,
            "model": model,
            "train": self.cfg.train,
            "split": self.cfg.experiment.split,
            "gestures": gestures,
        });
        if self.up_to_date(&step, &stamp)? {
            return Ok(Status::Complete);
        }
        let plan = self.plan(&windows)?;
        println!(
            "train {name}: {} folds on {} windows, {} parameters",
            plan.folds.len(),
            windows.len(),
            model.parameter_count()
        );
        let folds = train_plan(&model, &windows, &plan, &self.cfg.train)?;

        let staging = self.run.stage(&step)?;
        fs::create_dir_all(staging.join("checkpoints"))?;
        fs::create_dir_all(staging.join("confusion"))?;
        let class_names: Vec<&str> = Gesture::ALL[..gestures.num_classes()]
            .iter()
            .map(|g| g.name())
            .collect();
        for (report, net) in &folds {
            save_checkpoint(net, &staging.join("checkpoints").join(format!("{}.ckpt", report.fold)))?;
            fs::write(
                staging.join("confusion").join(format!("{}.csv", report.fold)),
                report.metrics.confusion_csv(&class_names),
            )?;
        }
        let reports: Vec<FoldReport> = folds.into_iter().map(|(r, _)| r).collect();
        let run_report = RunReport::new(
            self.cfg.experiment.split.to_uppercase(),
            gestures.num_classes().to_string(),
            json!({ "model": model, "train": self.cfg.train, "preprocess": self.cfg.preprocess }),
            reports,
        );
        fs::write(staging.join("metrics.json"), serde_json::to_string_pretty(&run_report)?)?;
        fs::write(staging.join("split.json"), plan.to_json())?;
        fs::write(staging.join("config.toml"), self.cfg.to_toml())?;
        self.run.publish(&staging, &step)?;
        self.record(&step, stamp, vec![format!("{step}/metrics.json")], true)?;
        for f in &run_report.folds {
            println!(
                "  {:<12} acc {:.3}  prec {:.3}",
                f.fold, f.metrics.accuracy, f.metrics.macro_precision
            );
        }
        println!(
            "train {name}: accuracy {}  precision {}  -> {}",
            run_report.accuracy,
            run_report.macro_precision,
            self.run.path(&step).join("metrics.json").display()
        );
        Ok(Status::Complete)
    }

    fn eval(&self, dataset: Option<&Path>, checkpoint: Option<&Path>, fold: Option<&str>) -> Result<Status> {
        let gestures = self.cfg.gestures()?;
        let (windows, _) = self.windows(dataset, gestures)?;
        let name = self.run_name()?;
        let out = self.run.path(format!("eval/{name}.json"));
        let results: Vec<(String, vibra::train::FoldMetrics)> = match checkpoint {
            Some(path) => {
                let model = load_checkpoint(path)?;
                let test: Vec<&GestureWindow> = match fold {
                    Some(f) => {
                        let plan = self.plan(&windows)?;
                        let fold = plan
                            .folds
                            .iter()
                            .find(|x| x.name == f)
                            .ok_or_else(|| anyhow!("split {} has no fold '{f}'", self.cfg.experiment.split))?;
                        windows.iter().filter(|w| fold.test.contains(&w.key())).collect()
                    }
                    None => windows.iter().collect(),
                };
                vec![(fold.unwrap_or("all").to_string(), evaluate(&model, &test)?)]
            }
            None => {
                let dir = self.run.path(format!("train/{name}"));
                if !dir.join("metrics.json").exists() {
                    bail!(
                        "no finished training run at {} (run `vibra train` first)",
                        dir.display()
                    );
                }
                let plan = self.plan(&windows)?;
                plan.folds
                    .iter()
                    .map(|f| {
                        let model = load_checkpoint(&dir.join("checkpoints").join(format!("{}.ckpt", f.name)))?;
                        let test: Vec<&GestureWindow> = windows.iter().filter(|w| f.test.contains(&w.key())).collect();
                        Ok((f.name.clone(), evaluate(&model, &test)?))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let acc: Vec<f64> = results.iter().map(|(_, m)| m.accuracy).collect();
        let prec: Vec<f64> = results.iter().map(|(_, m)| m.macro_precision).collect();
        let summary = json!({
            "split": self.cfg.experiment.split,
            "gestures": gestures.num_classes(),
            "checkpoint": checkpoint,
            "folds": results.iter().map(|(n, m)| json!({ "fold": n, "metrics": m })).collect::<Vec<_>>(),
            "accuracy": vibra::train::MeanStd::of(&acc),
            "macro_precision": vibra::train::MeanStd::of(&prec),
        });
        write_atomic(&out, serde_json::to_string_pretty(&summary)?.as_bytes())?;
        self.record(
            &format!("eval/{name}"),
            json!(null),
            vec![rel(&out, &self.run.root)],
            true,
        )?;
        for (n, m) in &results {
            println!("  {n:<12} acc {:.3}  prec {:.3}", m.accuracy, m.macro_precision);
        }
        println!(
            "eval {name}: accuracy {}  precision {}  -> {}",
            vibra::train::MeanStd::of(&acc),
            vibra::train::MeanStd::of(&prec),
            out.display()
        );
        Ok(Status::Complete)
    }

    fn search(&self, dataset: Option<&Path>, stop_after: Option<usize>) -> Result<Status> {
        let (index_path, index) = self.load_index(dataset)?;
        let gestures = self.cfg.gestures()?;
        let options = self.cfg.search_options(gestures)?;
        let source = self.cfg.windows.source;
        let dir = self.run.path("search");
        fs::create_dir_all(&dir)?;
        let journal = dir.join("journal.jsonl");
        let space = &self.cfg.search.space;
        let stamp = json!({
            "dataset": index_path,
            "space": space,
            "options": options,
            "synth": self.upstream("synth")?,
            "annotate": self.upstream("annotate")?,
        });
        let previous = self.run.manifest()?.steps.get("search").map(|s| s.stamp.clone());
        if previous.as_ref().is_some_and(|p| p != &stamp) || self.force {
            if !self.force {
                bail!(
                    "search journal in {} belongs to other inputs; rerun with --force to start over",
                    dir.display()
                );
            }
            if journal.exists() {
                fs::remove_file(&journal)?;
            }
        }
        // recorded before any work so an interrupted search is recognized
        self.record("search", stamp.clone(), Vec::new(), false)?;
        fs::write(dir.join("space.toml"), space.to_toml())?;
        println!(
            "search: {} configs{}",
            space.len(),
            options.budget.map_or(String::new(), |b| format!(", budget {b}"))
        );
        let board = run_search(
            space,
            &options,
            index.sample_rate_hz as f64,
            |pre| materialize(&index, pre, gestures, source),
            &RunControl {
                journal: Some(&journal),
                stop_after,
            },
        )?;
        board.save(&dir)?;
        self.record(
            "search",
            stamp,
            vec!["search/leaderboard.csv".into(), "search/leaderboard.json".into()],
            board.is_complete(),
        )?;
        for r in board.results.iter().take(5) {
            println!(
                "  #{:<3} {}  acc {}  params {}",
                r.rank,
                r.config.key(),
                r.accuracy,
                r.param_count
            );
        }
        let skips: Vec<String> = board.skip_counts().iter().map(|(k, v)| format!("{v} {k}")).collect();
        println!(
            "search: {} evaluated, {} skipped ({}), {} pending -> {}",
            board.results.len(),
            board.skipped.len(),
            skips.join(", "),
            board.pending,
            dir.join("leaderboard.csv").display()
        );
        if board.is_complete() {
            Ok(Status::Complete)
        } else {
            Ok(Status::Incomplete(format!(
                "{} configs pending; rerun the same command to resume",
                board.pending
            )))
        }
    }

    fn report(&self, dataset: Option<&Path>, plot: Option<&str>) -> Result<Status> {
        let table = report::collect(&self.run.path("train"))?;
        let dir = self.run.path("report");
        fs::create_dir_all(&dir)?;
        let text = report::render_text(&table);
        write_atomic(&dir.join("table.txt"), text.as_bytes())?;
        write_atomic(&dir.join("table.csv"), report::render_csv(&table).as_bytes())?;
        let mut outputs = vec!["report/table.txt".to_string(), "report/table.csv".to_string()];
        print!("{text}");
        if let Some(id) = plot {
            let (_, index) = self.load_index(dataset)?;
            let entry = index
                .recordings
                .iter()
                .find(|e| e.id() == id)
                .ok_or_else(|| anyhow!("dataset has no recording '{id}'"))?;
            let rec = vibra::dataset::load_recording(&index.resolve(&entry.recording))?;
            let onsets = match &entry.annotation {
                Some(a) => EventAnnotation::load(&index.resolve(a))?.timestamps(),
                None => Vec::new(),
            };
            let band = self
                .cfg
                .preprocess
                .band_hz
                .unwrap_or([self.cfg.detector.low_cut_hz, self.cfg.detector.high_cut_hz]);
            let svg = report::signal_plot(&rec, band, &onsets)?;
            let path = dir.join(format!("{id}_signal.svg"));
            write_atomic(&path, svg.as_bytes())?;
            println!("plot: {}", path.display());
            outputs.push(rel(&path, &self.run.root));
        }
        self.record("report", json!(null), outputs, true)?;
        Ok(Status::Complete)
    }
}

fn stage_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let staging = root.join(format!("{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
    Ok(staging)
}

fn publish_dir(staging: &Path, dest: &Path) -> Result<()> {
    if dest.exists() {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(staging, dest).with_context(|| format!("publishing {}", dest.display()))?;
    Ok(())
}
