//! Stage orchestration.
//!
//! Each stage has an in-memory form and a file form. The file form reads
//! its inputs from the output directory, checks the sha256 every input
//! recorded for its own parents, and writes one artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::encoder::{pretrain_bpr, BprOutcome, EmbeddingTable, EncoderError};
use crate::graph::{
    build_dynamic, read_interactions, write_interactions, BipartiteGraph, DynamicGraph, GraphError, IdMaps, Interaction,
    SnapshotGraph,
};
use crate::labeling::{build_task_dataset, LabelError, TaskDataset};
use crate::library::{build_library, LibraryError, SubgraphLibrary};
use crate::metrics::{evaluate_snapshots, EvalReport};
use crate::retrieval::{finetune, FinetuneConfig, FinetuneOutcome, FusionConfig, Recommender, RetrievalError};
use crate::synth::{generate_synthetic, write_planted, SynthError};
use crate::tam::{pair_examples, pretrain_tam, write_training_log, TamEpochLog, TamError, TamParams};

pub const MANIFEST: &str = "manifest.toml";
pub const SNAPSHOTS: &str = "snapshots.csv";
pub const ID_MAPS: &str = "id_maps.csv";
pub const ENCODER: &str = "encoder.ckpt";
pub const LIBRARY: &str = "library.ckpt";
pub const DATASET: &str = "d_aware.csv";
pub const TAM: &str = "tam.ckpt";
pub const TAM_LOG: &str = "tam_log.csv";
pub const FINETUNE: &str = "finetune.ckpt";
pub const REPORT: &str = "report.toml";
pub const PLANTED: &str = "planted.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {artifact}; run the `{stage}` stage first")]
    Missing { artifact: String, stage: Stage },
    #[error("{artifact} changed since {recorded_in} was built: expected sha256 {expected}, found {found}")]
    Lineage {
        artifact: String,
        recorded_in: String,
        expected: String,
        found: String,
    },
    #[error("malformed {artifact}: {message}")]
    Malformed { artifact: String, message: String },
    #[error("unknown user id {0}")]
    UnknownUser(u64),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Tam(#[from] TamError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Pretrain,
    BuildLibrary,
    Label,
    TrainTam,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Pretrain,
        Stage::BuildLibrary,
        Stage::Label,
        Stage::TrainTam,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Pretrain => "pretrain",
            Stage::BuildLibrary => "build-library",
            Stage::Label => "label",
            Stage::TrainTam => "train-tam",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub format_version: u32,
    pub granularity: i64,
    pub split: usize,
    pub interactions: usize,
    pub interactions_sha256: String,
    pub users: usize,
    pub items: usize,
    pub edges: usize,
    pub time_indices: Vec<i64>,
    pub user_checksum: String,
    pub item_checksum: String,
    pub snapshots_sha256: String,
    pub id_maps_sha256: String,
}

/// Artifacts written by one stage, with their sha256.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub stage: String,
    pub artifacts: Vec<(String, String)>,
}

// ---- in-memory stages ----

/// Everything upstream of relevance-model training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub graph: DynamicGraph,
    pub maps: IdMaps,
    pub pretrained: BprOutcome,
    pub library: SubgraphLibrary,
    pub dataset: TaskDataset,
}

pub fn prepare(cfg: &RunConfig, interactions: &[Interaction]) -> Result<Prepared, PipelineError> {
    let (graph, maps) = build_dynamic(interactions, cfg.data.granularity, cfg.data.split)?;
    let pretrained = pretrain_bpr(&graph, &cfg.bpr(), cfg.seed)?;
    let enc_hash = sha256_hex(&pretrained.table.to_checkpoint().to_bytes());
    let library = build_library(&graph, &pretrained.table, &cfg.library(), cfg.seed, &enc_hash)?;
    let lib_hash = sha256_hex(&library.to_checkpoint().to_bytes());
    let dataset = build_task_dataset(
        &graph,
        &library,
        &cfg.library(),
        &pretrained.table,
        &cfg.labeling,
        cfg.seed,
        &lib_hash,
    )?;
    Ok(Prepared {
        graph,
        maps,
        pretrained,
        library,
        dataset,
    })
}

/// Relevance-model pretraining on the labeled pairs.
pub fn train_tam(
    library: &SubgraphLibrary,
    dataset: &TaskDataset,
    cfg: &RunConfig,
) -> Result<(TamParams, Vec<TamEpochLog>, usize), PipelineError> {
    let (examples, skipped) = pair_examples(dataset, library);
    if skipped > 0 {
        log::info!("train-tam skipped {skipped} rows without library entries");
    }
    let (params, log) = pretrain_tam(&examples, &cfg.tam(), &cfg.tam_train(), cfg.seed)?;
    Ok((params, log, skipped))
}

pub fn finetune_stage(p: &Prepared, tam: &TamParams, cfg: &RunConfig) -> Result<FinetuneOutcome, PipelineError> {
    Ok(finetune(
        &p.graph,
        &p.pretrained.table,
        &p.library,
        tam,
        &cfg.fusion(),
        &cfg.finetune(),
        cfg.seed,
    )?)
}

/// Tests every fine-tune state on the snapshot after it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    graph: &DynamicGraph,
    pretrained: &EmbeddingTable,
    library: &SubgraphLibrary,
    outcome: &FinetuneOutcome,
    fusion: &FusionConfig,
    ft: &FinetuneConfig,
    k: usize,
    seed: u64,
    label: &str,
) -> Result<EvalReport, PipelineError> {
    let recommenders = outcome
        .steps
        .iter()
        .map(|s| Recommender::new(graph, s, pretrained, library, fusion, ft.hop, ft.cap, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let tests: Vec<usize> = outcome.steps.iter().map(|s| s.t + 1).collect();
    let report = evaluate_snapshots(graph, &tests, k, seed, label, |t, user| -> Result<Vec<u32>, RetrievalError> {
        let r = recommenders.iter().find(|r| r.t + 1 == t).ok_or(RetrievalError::MissingStep(t - 1))?;
        Ok(r.recommend(user, k)?.items.into_iter().map(|(i, _)| i).collect())
    })?;
    Ok(report)
}

/// Relevance-model training, fine-tuning and evaluation for one variant.
pub fn run_variant(p: &Prepared, cfg: &RunConfig) -> Result<EvalReport, PipelineError> {
    let (tam, _, _) = train_tam(&p.library, &p.dataset, cfg)?;
    let outcome = finetune_stage(p, &tam, cfg)?;
    evaluate(
        &p.graph,
        &p.pretrained.table,
        &p.library,
        &outcome,
        &cfg.fusion(),
        &cfg.finetune(),
        cfg.eval.k,
        cfg.seed,
        cfg.ablation.label(),
    )
}

// ---- file helpers ----

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_artifact(dir: &Path, name: &str, stage: Stage) -> Result<Vec<u8>, PipelineError> {
    let path = dir.join(name);
    match std::fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::Missing {
            artifact: path.display().to_string(),
            stage,
        }),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> Result<(String, String), PipelineError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(io_err(&path))?;
    let sha = sha256_hex(bytes);
    log::info!("artifact={name} sha256={sha}");
    Ok((name.to_string(), sha))
}

fn expect_hash(artifact: &str, recorded_in: &str, expected: &str, found: &str) -> Result<(), PipelineError> {
    if expected != found {
        return Err(PipelineError::Lineage {
            artifact: artifact.to_string(),
            recorded_in: recorded_in.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn parent(ck: &Checkpoint, name: &str) -> Result<String, PipelineError> {
    Ok(ck.meta_str(&format!("parent.{name}"))?.to_string())
}

fn snapshots_bytes(graph: &DynamicGraph) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "snapshot,time_index,user,item").expect("memory write");
    for (t, s) in graph.snapshots().iter().enumerate() {
        for (u, i) in s.edges() {
            writeln!(out, "{t},{},{u},{i}", s.time_index).expect("memory write");
        }
    }
    out
}

fn parse_snapshots(bytes: &[u8], m: &DataManifest) -> Result<DynamicGraph, PipelineError> {
    let bad = |message: String| PipelineError::Malformed {
        artifact: SNAPSHOTS.to_string(),
        message,
    };
    let text = std::str::from_utf8(bytes).map_err(|e| bad(e.to_string()))?;
    let mut edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); m.time_indices.len()];
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
        if f.len() != 4 {
            return Err(bad(format!("line {}: expected 4 fields", n + 1)));
        }
        let t = parse(f[0])? as usize;
        let slot = edges.get_mut(t).ok_or_else(|| bad(format!("line {}: snapshot {t} out of range", n + 1)))?;
        slot.push((parse(f[2])? as u32, parse(f[3])? as u32));
    }
    let snapshots = edges
        .into_iter()
        .zip(&m.time_indices)
        .map(|(e, &ti)| Ok(SnapshotGraph::new(ti, BipartiteGraph::from_edges(m.users, m.items, e)?)))
        .collect::<Result<Vec<_>, GraphError>>()?;
    Ok(DynamicGraph::new(snapshots, m.split)?)
}

struct Loaded<T> {
    value: T,
    sha: String,
}

fn load_graph(dir: &Path) -> Result<(Loaded<DynamicGraph>, IdMaps), PipelineError> {
    let mbytes = read_artifact(dir, MANIFEST, Stage::Ingest)?;
    let manifest: DataManifest = toml::from_str(&String::from_utf8_lossy(&mbytes)).map_err(|e| PipelineError::Malformed {
        artifact: MANIFEST.into(),
        message: e.to_string(),
    })?;
    let sbytes = read_artifact(dir, SNAPSHOTS, Stage::Ingest)?;
    expect_hash(SNAPSHOTS, MANIFEST, &manifest.snapshots_sha256, &sha256_hex(&sbytes))?;
    let ibytes = read_artifact(dir, ID_MAPS, Stage::Ingest)?;
    expect_hash(ID_MAPS, MANIFEST, &manifest.id_maps_sha256, &sha256_hex(&ibytes))?;
    let graph = parse_snapshots(&sbytes, &manifest)?;
    let maps = IdMaps::read(ibytes.as_slice())?;
    Ok((
        Loaded {
            value: graph,
            sha: sha256_hex(&mbytes),
        },
        maps,
    ))
}

fn load_checkpoint(dir: &Path, name: &str, stage: Stage) -> Result<Loaded<Checkpoint>, PipelineError> {
    let bytes = read_artifact(dir, name, stage)?;
    Ok(Loaded {
        value: Checkpoint::from_bytes(&bytes)?,
        sha: sha256_hex(&bytes),
    })
}

fn load_encoder(dir: &Path, manifest_sha: &str) -> Result<Loaded<EmbeddingTable>, PipelineError> {
    let ck = load_checkpoint(dir, ENCODER, Stage::Pretrain)?;
    expect_hash(MANIFEST, ENCODER, &parent(&ck.value, "manifest")?, manifest_sha)?;
    Ok(Loaded {
        value: EmbeddingTable::from_checkpoint(&ck.value)?,
        sha: ck.sha,
    })
}

fn load_library(dir: &Path, encoder_sha: &str) -> Result<Loaded<SubgraphLibrary>, PipelineError> {
    let ck = load_checkpoint(dir, LIBRARY, Stage::BuildLibrary)?;
    let lib = SubgraphLibrary::from_checkpoint(&ck.value)?;
    expect_hash(ENCODER, LIBRARY, lib.source_hash(), encoder_sha)?;
    Ok(Loaded { value: lib, sha: ck.sha })
}

fn load_dataset(dir: &Path, library_sha: &str) -> Result<Loaded<TaskDataset>, PipelineError> {
    let bytes = read_artifact(dir, DATASET, Stage::Label)?;
    let ds = TaskDataset::read(bytes.as_slice())?;
    expect_hash(LIBRARY, DATASET, &ds.header.checkpoint_hash, library_sha)?;
    Ok(Loaded {
        value: ds,
        sha: sha256_hex(&bytes),
    })
}

fn load_tam(dir: &Path, dataset_sha: &str, library_sha: &str) -> Result<Loaded<TamParams>, PipelineError> {
    let ck = load_checkpoint(dir, TAM, Stage::TrainTam)?;
    expect_hash(DATASET, TAM, &parent(&ck.value, "d_aware")?, dataset_sha)?;
    expect_hash(LIBRARY, TAM, &parent(&ck.value, "library")?, library_sha)?;
    Ok(Loaded {
        value: TamParams::from_checkpoint(&ck.value)?,
        sha: ck.sha,
    })
}

/// Every upstream artifact with its lineage verified.
struct Upstream {
    graph: Loaded<DynamicGraph>,
    maps: IdMaps,
    encoder: Loaded<EmbeddingTable>,
    library: Loaded<SubgraphLibrary>,
}

fn load_upstream(dir: &Path) -> Result<Upstream, PipelineError> {
    let (graph, maps) = load_graph(dir)?;
    let encoder = load_encoder(dir, &graph.sha)?;
    let library = load_library(dir, &encoder.sha)?;
    Ok(Upstream {
        graph,
        maps,
        encoder,
        library,
    })
}

/// The fine-tune checkpoint plus the configuration it was trained with.
struct FinetuneArtifact {
    outcome: FinetuneOutcome,
    fusion: FusionConfig,
    ft: FinetuneConfig,
    label: String,
    seed: u64,
    sha: String,
}

fn load_finetune(dir: &Path, up: &Upstream) -> Result<FinetuneArtifact, PipelineError> {
    let ds = load_dataset(dir, &up.library.sha)?;
    let tam = load_tam(dir, &ds.sha, &up.library.sha)?;
    let ck = load_checkpoint(dir, FINETUNE, Stage::Finetune)?;
    expect_hash(TAM, FINETUNE, &parent(&ck.value, "tam")?, &tam.sha)?;
    expect_hash(LIBRARY, FINETUNE, &parent(&ck.value, "library")?, &up.library.sha)?;
    expect_hash(ENCODER, FINETUNE, &parent(&ck.value, "encoder")?, &up.encoder.sha)?;
    let malformed = |e: toml::de::Error| PipelineError::Malformed {
        artifact: FINETUNE.into(),
        message: e.to_string(),
    };
    Ok(FinetuneArtifact {
        outcome: FinetuneOutcome::from_checkpoint(&ck.value)?,
        fusion: toml::from_str(ck.value.meta_str("fusion")?).map_err(malformed)?,
        ft: toml::from_str(ck.value.meta_str("finetune")?).map_err(malformed)?,
        label: ck.value.meta_str("label")?.to_string(),
        seed: ck.value.meta_parse("seed")?,
        sha: ck.sha,
    })
}

// ---- file stages ----

/// Writes a synthetic interaction stream to `paths.interactions` and the
/// planted assignment next to the other artifacts. The run seed is used.
pub fn synth_stage(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    let data = generate_synthetic(&spec)?;
    let dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let target = &cfg.paths.interactions;
    if let Some(p) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(io_err(p))?;
    }
    let mut buf = Vec::new();
    write_interactions(&mut buf, &data.interactions).expect("memory write");
    std::fs::write(target, &buf).map_err(io_err(target))?;
    let mut planted = Vec::new();
    write_planted(&mut planted, &spec, &data).expect("memory write");
    let p = write_artifact(dir, PLANTED, &planted)?;
    Ok(StageOutput {
        stage: "synth".into(),
        artifacts: vec![(target.display().to_string(), sha256_hex(&buf)), p],
    })
}

fn ingest(cfg: &RunConfig, dir: &Path) -> Result<Vec<(String, String)>, PipelineError> {
    let path = &cfg.paths.interactions;
    let raw = std::fs::read(path).map_err(io_err(path))?;
    let records = read_interactions(raw.as_slice())?;
    let (graph, maps) = build_dynamic(&records, cfg.data.granularity, cfg.data.split)?;
    let snaps = snapshots_bytes(&graph);
    let mut ids = Vec::new();
    maps.write(&mut ids).expect("memory write");
    let manifest = DataManifest {
        format_version: 1,
        granularity: cfg.data.granularity,
        split: cfg.data.split,
        interactions: records.len(),
        interactions_sha256: sha256_hex(&raw),
        users: graph.user_count(),
        items: graph.item_count(),
        edges: graph.snapshots().iter().map(|s| s.edge_count()).sum(),
        time_indices: graph.snapshots().iter().map(|s| s.time_index).collect(),
        user_checksum: maps.user_checksum(),
        item_checksum: maps.item_checksum(),
        snapshots_sha256: sha256_hex(&snaps),
        id_maps_sha256: sha256_hex(&ids),
    };
    let text = toml::to_string(&manifest).expect("manifest is plain data");
    Ok(vec![
        write_artifact(dir, SNAPSHOTS, &snaps)?,
        write_artifact(dir, ID_MAPS, &ids)?,
        write_artifact(dir, MANIFEST, text.as_bytes())?,
    ])
}

fn join_losses(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(",")
}

/// Runs one stage against `cfg.paths.out_dir`.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    let dir: PathBuf = cfg.paths.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    log::info!("stage={stage} out_dir={}", dir.display());
    let artifacts = match stage {
        Stage::Ingest => ingest(cfg, &dir)?,
        Stage::Pretrain => {
            let (graph, _) = load_graph(&dir)?;
            let out = pretrain_bpr(&graph.value, &cfg.bpr(), cfg.seed)?;
            let ck = out
                .table
                .to_checkpoint()
                .with_meta("parent.manifest", &graph.sha)
                .with_meta("seed", cfg.seed)
                .with_meta("losses", join_losses(out.epoch_losses.iter().copied()));
            vec![write_artifact(&dir, ENCODER, &ck.to_bytes())?]
        }
        Stage::BuildLibrary => {
            let (graph, _) = load_graph(&dir)?;
            let enc = load_encoder(&dir, &graph.sha)?;
            let lib = build_library(&graph.value, &enc.value, &cfg.library(), cfg.seed, &enc.sha)?;
            let ck = lib
                .to_checkpoint()
                .with_meta("hop", cfg.retrieval.hop)
                .with_meta("cap", cfg.retrieval.cap)
                .with_meta("seed", cfg.seed);
            vec![write_artifact(&dir, LIBRARY, &ck.to_bytes())?]
        }
        Stage::Label => {
            let up = load_upstream(&dir)?;
            let ds = build_task_dataset(
                &up.graph.value,
                &up.library.value,
                &cfg.library(),
                &up.encoder.value,
                &cfg.labeling,
                cfg.seed,
                &up.library.sha,
            )?;
            vec![write_artifact(&dir, DATASET, &ds.to_bytes())?]
        }
        Stage::TrainTam => {
            let up = load_upstream(&dir)?;
            let ds = load_dataset(&dir, &up.library.sha)?;
            let (tam, log, skipped) = train_tam(&up.library.value, &ds.value, cfg)?;
            let ck = tam
                .to_checkpoint()
                .with_meta("parent.d_aware", &ds.sha)
                .with_meta("parent.library", &up.library.sha)
                .with_meta("skipped_rows", skipped)
                .with_meta("seed", cfg.seed);
            let mut log_bytes = Vec::new();
            write_training_log(&mut log_bytes, &log).expect("memory write");
            vec![
                write_artifact(&dir, TAM, &ck.to_bytes())?,
                write_artifact(&dir, TAM_LOG, &log_bytes)?,
            ]
        }
        Stage::Finetune => {
            let up = load_upstream(&dir)?;
            let ds = load_dataset(&dir, &up.library.sha)?;
            let tam = load_tam(&dir, &ds.sha, &up.library.sha)?;
            let (fusion, ft) = (cfg.fusion(), cfg.finetune());
            let outcome = finetune(
                &up.graph.value,
                &up.encoder.value,
                &up.library.value,
                &tam.value,
                &fusion,
                &ft,
                cfg.seed,
            )?;
            let mut ck = outcome
                .to_checkpoint()
                .with_meta("parent.tam", &tam.sha)
                .with_meta("parent.library", &up.library.sha)
                .with_meta("parent.encoder", &up.encoder.sha)
                .with_meta("fusion", toml::to_string(&fusion).expect("plain config"))
                .with_meta("finetune", toml::to_string(&ft).expect("plain config"))
                .with_meta("label", cfg.ablation.label())
                .with_meta("seed", cfg.seed);
            ck.meta.insert("k".into(), cfg.eval.k.to_string());
            vec![write_artifact(&dir, FINETUNE, &ck.to_bytes())?]
        }
        Stage::Evaluate => {
            let up = load_upstream(&dir)?;
            let ft = load_finetune(&dir, &up)?;
            let mut report = evaluate(
                &up.graph.value,
                &up.encoder.value,
                &up.library.value,
                &ft.outcome,
                &ft.fusion,
                &ft.ft,
                cfg.eval.k,
                ft.seed,
                &ft.label,
            )?;
            report.lineage.insert(FINETUNE.into(), ft.sha.clone());
            report.lineage.insert(ENCODER.into(), up.encoder.sha.clone());
            report.lineage.insert(LIBRARY.into(), up.library.sha.clone());
            vec![write_artifact(&dir, REPORT, report.to_toml().as_bytes())?]
        }
    };
    Ok(StageOutput {
        stage: stage.name().into(),
        artifacts,
    })
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageOutput>, PipelineError> {
    Stage::ALL.into_iter().map(|s| run_stage(s, cfg)).collect()
}

/// Ranked items for one raw user id after fine-tune step `step` (the
/// latest when `None`).
#[derive(Clone, Debug, PartialEq)]
pub struct RecommendOutput {
    pub meta: BTreeMap<String, String>,
    /// `(raw user, rank, raw item, score)`, rank starting at 1.
    pub rows: Vec<(u64, usize, u64, f64)>,
}

impl RecommendOutput {
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for (k, v) in &self.meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "user_id,rank,item_id,score")?;
        for (u, r, i, s) in &self.rows {
            writeln!(w, "{u},{r},{i},{s}")?;
        }
        Ok(())
    }
}

pub fn recommend(cfg: &RunConfig, raw_user: u64, step: Option<usize>, top_k: usize) -> Result<RecommendOutput, PipelineError> {
    let dir = &cfg.paths.out_dir;
    let up = load_upstream(dir)?;
    let ft = load_finetune(dir, &up)?;
    let user = up.maps.user_index(raw_user).ok_or(PipelineError::UnknownUser(raw_user))?;
    let state = match step {
        Some(t) => ft.outcome.step(t)?,
        None => ft.outcome.steps.last().ok_or(RetrievalError::MissingStep(0))?,
    };
    let rec = Recommender::new(
        &up.graph.value,
        state,
        &up.encoder.value,
        &up.library.value,
        &ft.fusion,
        ft.ft.hop,
        ft.ft.cap,
        ft.seed,
    )?;
    let out = rec.recommend(user, top_k)?;
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), ft.seed.to_string());
    meta.insert("snapshot".into(), state.t.to_string());
    meta.insert("encoder".into(), up.encoder.sha.clone());
    meta.insert("library".into(), up.library.sha.clone());
    meta.insert("finetune".into(), ft.sha.clone());
    meta.insert("top_k".into(), ft.fusion.top_k.to_string());
    meta.insert("top_m".into(), ft.fusion.top_m.to_string());
    meta.insert("beta".into(), format!("{:?}", state.beta));
    meta.insert("cold".into(), out.cold.to_string());
    let rows = out
        .items
        .iter()
        .enumerate()
        .map(|(r, &(i, s))| (raw_user, r + 1, up.maps.items[i as usize], s))
        .collect();
    Ok(RecommendOutput { meta, rows })
}
