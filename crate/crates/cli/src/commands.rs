// SPDX-License-Identifier: MIT OR Apache-2.0

//! One adapter per subcommand: load inputs, call the library, write outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mifin_core::fin::{self, datasets, BiasScanParams, LabeledText, RagParams, SentimentExample, SteerScope, TreeParams};
use mifin_core::interp::{self, FeatureCatalog, LabelerConfig, SelfInterpretParams};
use mifin_core::lens;
use mifin_core::model::fixture::FixtureSpec;
use mifin_core::patching::{self, Direction, Granularity};
use mifin_core::sae::{self, Sae, SaeConfig, SteeringMode, TrainParams, ACTIVATION_EPSILON};
use mifin_core::store::{read_corpus, ActivationStore, Document, StoreOptions};
use mifin_core::{HookPoint, ModelBundle};
use serde_json::json;

use crate::args::*;
use crate::manifest::Run;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub struct Ctx<'a> {
    pub model_dir: Option<&'a Path>,
}

impl Ctx<'_> {
    fn model(&self, run: &mut Run) -> Result<ModelBundle> {
        let dir = self
            .model_dir
            .ok_or_else(|| CliError::Usage("--model-dir (or MIFIN_MODEL_DIR) is required".into()))?;
        let bundle = ModelBundle::load(dir)?;
        run.input_hash("model", &dir.display().to_string(), bundle.hash());
        Ok(bundle)
    }

    fn model_opt(&self, run: &mut Run) -> Result<Option<ModelBundle>> {
        self.model_dir.map(|_| self.model(run)).transpose()
    }
}

fn load_sae(run: &mut Run, dir: &Path) -> Result<Sae> {
    run.input("sae", dir)?;
    Ok(Sae::load(dir)?)
}

fn load_store(run: &mut Run, dir: &Path, bundle: Option<&ModelBundle>) -> Result<ActivationStore> {
    run.input("store", dir)?;
    Ok(ActivationStore::open(dir, bundle)?)
}

fn hook(s: &str) -> Result<HookPoint> {
    Ok(s.parse()?)
}

fn mode(m: ModeArg) -> SteeringMode {
    match m {
        ModeArg::AddDirection => SteeringMode::AddDirection,
        ModeArg::ReconstructReplace => SteeringMode::ReconstructReplace,
    }
}

fn pooling(p: PoolingArg) -> fin::Pooling {
    match p {
        PoolingArg::Max => fin::Pooling::Max,
        PoolingArg::Mean => fin::Pooling::Mean,
    }
}

fn corpus(run: &mut Run, a: &CorpusArgs) -> Result<Vec<Document>> {
    if let Some(p) = &a.corpus {
        run.input("corpus", p)?;
        return Ok(read_corpus(p)?);
    }
    let builtin = a.builtin.expect("clap requires corpus or builtin");
    Ok(match builtin {
        BuiltinCorpus::News => datasets::news_corpus(a.n_docs, a.p_general, a.corpus_seed),
        BuiltinCorpus::Loan => datasets::loan_texts(),
        BuiltinCorpus::Rag => datasets::rag_documents(),
        BuiltinCorpus::Headlines => datasets::labeled_headlines(a.n_docs, a.corpus_seed)
            .into_iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("headline-{i:05}"), t.text))
            .collect(),
        BuiltinCorpus::Sentiment => datasets::sentiment_sentences()
            .into_iter()
            .enumerate()
            .map(|(i, s)| Document::new(format!("sentence-{i:02}"), s.text))
            .collect(),
    })
}

fn feature_set(run: &mut Run, a: &FeatureSetArgs) -> Result<BTreeSet<usize>> {
    match &a.feature_set {
        Some(p) => {
            run.input("feature_set", p)?;
            Ok(fin::read_feature_set(p)?)
        }
        None => Ok(a.features.iter().copied().collect()),
    }
}

fn labeled(run: &mut Run, a: &LabeledDataArgs) -> Result<Vec<LabeledText>> {
    match &a.data {
        Some(p) => {
            run.input("data", p)?;
            Ok(fin::read_labeled_csv(p)?)
        }
        None => Ok(datasets::labeled_headlines(a.n, a.data_seed)),
    }
}

fn prefix_csv(condition: &str, csv: &str, with_header: bool) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        match i {
            0 if with_header => out.push_str(&format!("condition,{line}\n")),
            0 => {}
            _ => out.push_str(&format!("{condition},{line}\n")),
        }
    }
    out
}

pub fn run(cmd: &Command, ctx: &Ctx, run: &mut Run) -> Result<()> {
    match cmd {
        Command::Lens(a) => {
            let b = ctx.model(run)?;
            let ids = b.encode(&a.prompt);
            let grid = lens::logit_lens_grid(&b, &ids, a.top_k, !a.no_final_ln)?;
            run.write("lens.txt", grid.render_ascii())?;
            let csv = grid.to_csv()?;
            run.primary("lens", &grid, Some(csv))
        }
        Command::LogitDiff(a) => {
            let b = ctx.model(run)?;
            let mut prompts = a.prompt.clone();
            if let Some(p) = &a.prompts_file {
                run.input("prompts", p)?;
                let text = std::fs::read_to_string(p).map_err(|e| crate::load_error(p, e))?;
                prompts.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
            }
            let mut rows = Vec::new();
            for p in &prompts {
                let t = lens::logit_diff_trajectory(&b, &b.encode(p), &a.token_a, &a.token_b)?;
                rows.push(json!({ "prompt": p, "trajectory": t }));
            }
            let mean = lens::mean_trajectory(&b, &prompts, &a.token_a, &a.token_b)?;
            let mut csv = String::from("layer,mean");
            for i in 0..prompts.len() {
                csv.push_str(&format!(",prompt_{i}"));
            }
            csv.push('\n');
            for (l, m) in mean.iter().enumerate() {
                csv.push_str(&format!("{l},{m}"));
                for r in &rows {
                    csv.push_str(&format!(",{}", r["trajectory"][l]));
                }
                csv.push('\n');
            }
            let out = json!({ "token_a": a.token_a, "token_b": a.token_b, "prompts": rows, "mean": mean });
            run.primary("logit_diff", &out, Some(csv))
        }
        Command::PatchScan(a) => {
            let b = ctx.model(run)?;
            let set = match (&a.pairs, &a.corpus) {
                (Some(p), _) => {
                    run.input("pairs", p)?;
                    patching::load_pairs(&b, p)?
                }
                (None, Some(id)) => {
                    let text = patching::builtin_pairs(id)
                        .ok_or_else(|| CliError::Usage(format!("unknown built-in corpus {id:?}")))?;
                    patching::parse_pairs(&b, text.as_bytes())?
                }
                (None, None) => unreachable!("clap requires one"),
            };
            for r in &set.rejected {
                tracing::warn!(rejected = ?r, "pair rejected");
            }
            let granularity = match a.granularity {
                GranularityArg::Head => Granularity::LayerHead,
                GranularityArg::Position => Granularity::LayerPosition,
            };
            let direction = match a.direction {
                DirectionArg::Denoising => Direction::Denoising,
                DirectionArg::Noising => Direction::Noising,
            };
            let m = patching::patch_scan(&b, &set.pairs, granularity, direction)?;
            run.write("patch.txt", m.render_ascii())?;
            run.write_json("patch_rejected.json", &set.rejected)?;
            let csv = m.to_csv();
            run.primary("patch", &m, Some(csv))
        }
        Command::Resample(a) => {
            let b = ctx.model(run)?;
            let ids = b.encode(&a.prompt);
            let metric = (b.single_token(&a.token_a)?, b.single_token(&a.token_b)?);
            let r = patching::resample_ablation(&b, &ids, hook(&a.hook)?, a.seed, metric)?;
            run.primary("resample", &r, None)
        }
        Command::StoreBuild(a) => {
            let b = ctx.model(run)?;
            let docs = corpus(run, &a.corpus)?;
            let opts = StoreOptions {
                max_tokens_per_doc: a.max_tokens_per_doc,
                shuffle_seed: a.shuffle_seed,
                mean_center: a.mean_center,
            };
            let store = ActivationStore::build(&b, &docs, hook(&a.hook)?, &opts)?;
            store.save(&run.path("store"))?;
            run.record_dir("store")?;
            let summary = json!({
                "rows": store.row_count(),
                "d_in": store.d_in(),
                "hook": store.hook().to_string(),
                "documents": docs.len(),
                "manifest_hash": store.manifest_hash(),
            });
            run.primary("store_build", &summary, None)
        }
        Command::SaeTrain(a) => {
            let b = ctx.model_opt(run)?;
            let store = load_store(run, &a.store, b.as_ref())?;
            let cfg = SaeConfig {
                d_in: store.d_in(),
                d_hid: a.d_hid,
                alpha: a.alpha,
                seed: a.seed,
            };
            let tp = TrainParams {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                shuffle_seed: a.seed,
                holdout_fraction: a.holdout,
                ..TrainParams::default()
            };
            cfg.validate()?;
            tp.validate()?;
            let (params, report) = sae::train_sae(&store, &cfg, &tp)?;
            let trained = Sae::from_training(params, &store, cfg, tp, report.clone())?;
            trained.save(&run.path("sae"))?;
            run.record_dir("sae")?;
            let epochs = serde_json::to_value(&report.epochs)?;
            let csv = crate::manifest::flat_csv(&epochs)?;
            run.primary("train_report", &report, Some(csv))
        }
        Command::SaeMetrics(a) => {
            let b = ctx.model_opt(run)?;
            let s = load_sae(run, &a.sae)?;
            let store = load_store(run, &a.store, b.as_ref())?;
            let m = sae::sae_metrics(&s.params, store.data(), ACTIVATION_EPSILON)?;
            run.primary("sae_metrics", &m, None)
        }
        Command::TopActs(a) => {
            let b = ctx.model_opt(run)?;
            let s = load_sae(run, &a.sae)?;
            let store = load_store(run, &a.store, b.as_ref())?;
            let top = interp::top_activations(&s, &store, a.feature, a.k, a.window, b.as_ref())?;
            run.primary("top_acts", &top, None)
        }
        Command::AutoLabel(a) => {
            let b = ctx.model_opt(run)?;
            let s = load_sae(run, &a.sae)?;
            let store = load_store(run, &a.store, b.as_ref())?;
            let mut catalog = match &a.catalog {
                Some(p) => {
                    run.input("catalog", p)?;
                    FeatureCatalog::load(p, Some(&s))?
                }
                None => FeatureCatalog::new(&s, Some(&store))?,
            };
            let features: Vec<usize> = if a.features.is_empty() {
                (0..s.d_hid()).collect()
            } else {
                a.features.clone()
            };
            for &f in &features {
                s.params.check_feature(f)?;
            }
            let cfg = LabelerConfig::from_env();
            let mut outcomes = Vec::with_capacity(features.len());
            for f in features {
                let top = interp::top_activations(&s, &store, f, a.k, a.window, b.as_ref())?;
                let o = interp::auto_label(f, &top, &cfg);
                catalog.set_label(f, &o.label, o.source)?;
                outcomes.push(o);
            }
            run.write_json("catalog.json", &catalog)?;
            run.primary("labels", &outcomes, None)
        }
        Command::SelfInterp(a) => {
            let b = ctx.model(run)?;
            let s = Arc::new(load_sae(run, &a.sae)?);
            let params = SelfInterpretParams {
                placeholder: a.placeholder.clone(),
                max_new_tokens: a.max_new_tokens,
                mode: mode(a.mode),
            };
            let results = a
                .magnitude
                .iter()
                .map(|&m| interp::self_interpret(&b, &s, a.feature, m, &params))
                .collect::<mifin_core::Result<Vec<_>>>()?;
            run.primary("self_interp", &results, None)
        }
        Command::Cluster(a) => {
            let s = load_sae(run, &a.sae)?;
            let mut catalog = match &a.catalog {
                Some(p) => {
                    run.input("catalog", p)?;
                    Some(FeatureCatalog::load(p, Some(&s))?)
                }
                None => None,
            };
            let c = interp::cluster_features(&s.params, a.tau, catalog.as_ref())?;
            run.write("clusters.dot", c.to_dot())?;
            if let Some(cat) = catalog.as_mut() {
                cat.set_clusters(&c);
                run.write_json("catalog.json", cat)?;
            }
            let rows: Vec<_> = c
                .assignment
                .iter()
                .enumerate()
                .map(|(f, k)| json!({ "feature": f, "cluster": k }))
                .collect();
            let csv = crate::manifest::flat_csv(&serde_json::Value::Array(rows))?;
            run.primary("clusters", &c, Some(csv))
        }
        Command::Search(a) => {
            run.input("catalog", &a.catalog)?;
            let catalog = FeatureCatalog::load(&a.catalog, None)?;
            let hits = catalog.search(&a.query)?;
            run.primary("search", &hits, None)
        }
        Command::BiasScan(a) => {
            let b = ctx.model(run)?;
            let s = load_sae(run, &a.sae)?;
            let set = feature_set(run, &a.bias)?;
            let mut texts = a.text.clone();
            if let Some(p) = &a.texts {
                run.input("texts", p)?;
                texts.extend(read_corpus(p)?.into_iter().map(|d| d.text));
            }
            if a.builtin_loans {
                texts.extend(datasets::loan_texts().into_iter().map(|d| d.text));
            }
            if texts.is_empty() {
                return Err(CliError::Usage("pass --text, --texts or --builtin-loans".into()));
            }
            let params = BiasScanParams {
                theta: a.theta,
                weighting: match a.weighting {
                    WeightingArg::Count => fin::BiasWeighting::Count,
                    WeightingArg::Mass => fin::BiasWeighting::Mass,
                },
                ..BiasScanParams::default()
            };
            let results = texts
                .iter()
                .map(|t| fin::bias_scan(&b, &s, &set, t, &params))
                .collect::<mifin_core::Result<Vec<_>>>()?;
            run.primary("bias_scan", &results, None)
        }
        Command::RagIndex(a) => {
            let b = ctx.model(run)?;
            let docs = corpus(run, &a.corpus)?;
            let index = fin::build_chunk_index(&b, &docs, a.layer, a.window, a.stride)?;
            run.write_json("index.json", &index)?;
            let summary = json!({
                "chunks": index.chunks.len(),
                "documents": docs.len(),
                "layer": index.layer,
                "window": index.window,
                "stride": index.stride,
            });
            run.primary("rag_index", &summary, None)
        }
        Command::RagAnswer(a) => {
            let b = ctx.model(run)?;
            let s = load_sae(run, &a.sae)?;
            run.input("index", &a.index)?;
            let index = fin::ChunkIndex::load(&a.index)?;
            let params = RagParams {
                finance_set: feature_set(run, &a.finance)?,
                threshold: a.threshold,
                k: a.k,
                max_new_tokens: a.max_new_tokens,
            };
            let ans = fin::answer_with_gate(&b, &s, &index, &a.question, &params)?;
            run.primary("rag_answer", &ans, None)
        }
        Command::TreeTrain(a) => {
            if !(0.0..1.0).contains(&a.test_fraction) {
                return Err(CliError::Usage("--test-fraction must lie in [0, 1)".into()));
            }
            let params = TreeParams {
                max_depth: a.max_depth,
                min_samples_leaf: a.min_samples_leaf,
            };
            let b = ctx.model(run)?;
            let s = load_sae(run, &a.sae)?;
            let texts = labeled(run, &a.data)?;
            let ds = fin::build_feature_dataset(&b, &s, &texts, pooling(a.data.pooling))?;
            let (train, test) = if a.test_fraction > 0.0 {
                ds.split(a.test_fraction, a.seed)
            } else {
                (ds.clone(), ds)
            };
            let tree = fin::train_tree(&train, &params)?;
            run.write_json("tree.json", &tree)?;
            run.write("tree.dot", tree.to_dot())?;
            run.write_json("importance.json", &fin::feature_importance(&tree))?;
            let report = fin::evaluate_f1(&tree, &test)?;
            run.primary("tree_f1", &report, Some(f1_csv(&report)))
        }
        Command::TreeEval(a) => {
            run.input("tree", &a.tree)?;
            let text = std::fs::read_to_string(&a.tree).map_err(|e| crate::load_error(&a.tree, e))?;
            let tree: fin::DecisionTree = serde_json::from_str(&text)?;
            let b = ctx.model(run)?;
            let s = load_sae(run, &a.sae)?;
            let texts = labeled(run, &a.data)?;
            let ds = fin::build_feature_dataset(&b, &s, &texts, pooling(a.data.pooling))?;
            let report = fin::evaluate_f1(&tree, &ds)?;
            run.primary("tree_f1", &report, Some(f1_csv(&report)))
        }
        Command::SentimentEval(a) => {
            let b = ctx.model(run)?;
            let data: Vec<SentimentExample> = match &a.data {
                Some(p) => {
                    run.input("data", p)?;
                    SentimentExample::read_csv(p)?
                }
                None => datasets::sentiment_sentences(),
            };
            let steering = match (&a.sae, a.feature) {
                (Some(dir), Some(f)) => {
                    let s = Arc::new(load_sae(run, dir)?);
                    Some(sae::steering_vector(&s, f, a.magnitude, mode(a.mode))?)
                }
                _ => None,
            };
            let scope = match a.steer_scope {
                ScopeArg::All => SteerScope::All,
                ScopeArg::Prompt => SteerScope::Prompt,
                ScopeArg::Generated => SteerScope::Generated,
            };
            let unsteered = fin::sentiment_eval(&b, &data, &[], scope)?;
            run.write("confusion_unsteered.csv", unsteered.matrix.to_csv())?;
            let mut csv = prefix_csv("unsteered", &unsteered.matrix.to_csv(), true);
            let steered = match steering {
                Some(iv) => {
                    let e = fin::sentiment_eval(&b, &data, &[iv], scope)?;
                    run.write("confusion_steered.csv", e.matrix.to_csv())?;
                    csv.push_str(&prefix_csv("steered", &e.matrix.to_csv(), false));
                    Some(e)
                }
                None => None,
            };
            let out = json!({ "unsteered": unsteered, "steered": steered });
            run.primary("sentiment", &out, Some(csv))
        }
        Command::FixtureModel(a) => {
            let spec = FixtureSpec {
                n_layers: a.layers,
                n_heads: a.heads,
                d_model: a.d_model,
                d_mlp: a.d_mlp,
                context_len: a.context_len,
                seed: a.seed,
                explicit_head: a.explicit_head,
            };
            let bundle = spec.build()?;
            bundle.save(&run.out)?;
            run.record_files(&[
                mifin_core::model::CONFIG_FILE,
                mifin_core::model::WEIGHTS_FILE,
                mifin_core::model::VOCAB_FILE,
                mifin_core::model::MERGES_FILE,
            ])?;
            let summary = json!({ "hash": bundle.hash(), "config": bundle.config });
            run.primary("fixture", &summary, None)
        }
        Command::Serve(_) | Command::Replay(_) => unreachable!("handled by main"),
    }
}

fn f1_csv(r: &fin::F1Report) -> String {
    let mut s = String::from("label,f1\n");
    for (l, f) in &r.per_label {
        s.push_str(&format!("{l},{f}\n"));
    }
    s.push_str(&format!("macro,{}\naccuracy,{}\n", r.macro_f1, r.accuracy));
    s
}

/// Blocking entry for `serve`.
pub fn serve(a: &ServeArgs, ctx: &Ctx) -> Result<()> {
    let dir = ctx
        .model_dir
        .ok_or_else(|| CliError::Usage("--model-dir (or MIFIN_MODEL_DIR) is required".into()))?;
    if a.store.len() > a.sae.len() {
        return Err(CliError::Usage("more --store than --sae values".into()));
    }
    let bundle = ModelBundle::load(dir)?;
    let state = mifin_server::AppState::with_workers(Some(bundle), a.workers);
    let mut hashes = Vec::new();
    for (i, s) in a.sae.iter().enumerate() {
        let h = state.load_sae(s, None, a.store.get(i).map(PathBuf::as_path))?;
        tracing::info!(sae = %h, dir = %s.display(), "registered SAE");
        hashes.push(h);
    }
    let finance_set: BTreeSet<usize> = match &a.finance.feature_set {
        Some(p) => fin::read_feature_set(p)?,
        None => a.finance.features.iter().copied().collect(),
    };
    for spec in &a.index {
        let (id, file) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--index expects ID=FILE, got {spec:?}")))?;
        let sae = hashes
            .first()
            .ok_or_else(|| CliError::Usage("--index needs at least one --sae".into()))?;
        let index = fin::ChunkIndex::load(Path::new(file))?;
        state.register_index(
            id,
            mifin_server::IndexEntry {
                index,
                sae: sae.clone(),
                finance_set: finance_set.clone(),
            },
        );
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(mifin_server::serve(state, a.addr))?;
    Ok(())
}
