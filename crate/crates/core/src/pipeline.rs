//! Batch orchestration: recording discovery, the staged feature run with an
//! on-disk cache, harness output files and summary tables.
//!
//! Input layout is `<keypoints_dir>/<participant>/<session>_<condition>.jsonl`
//! (or `.csv`), with event logs at `<events_dir>/<participant>/<session>_<condition>.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    align_series, build_template, head_channels, StabilizationMode, Template, TemplateScope,
};
use crate::dynamics::{auto_rqa, crqa, EmbeddingParams, RqaConfig, RQA_METRIC_NAMES};
use crate::error::{Error, Result};
use crate::features::{channel_set, kinematic_columns, window_features, Channel, WindowSpec};
use crate::ingest::{assemble_series, read_keypoint_file, KeypointSeries, LandmarkMap};
use crate::ml::{
    Condition, EvalConfig, EvalReport, FeatureMatrix, FeatureSelectConfig, ForestConfig,
    LearningCurve, LearningCurveConfig, LopoReport, MeanSd, RowMeta, Session, SplitReport,
};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::taskperf::{read_event_log, windowed_perf, PERF_COLUMNS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub keypoints_dir: PathBuf,
    pub events_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// One feature file is written per mode.
    pub stabilization: Vec<StabilizationMode>,
    pub landmarks: LandmarkMap,
    pub preprocess: PreprocessConfig,
    /// Window length, overlap and the sampling rate of the keypoint files.
    pub window: WindowSpec,
    pub embedding: EmbeddingParams,
    pub rqa: RqaConfig,
    pub crqa: RqaConfig,
    pub rqa_channels: Vec<String>,
    pub crqa_pairs: Vec<(String, String)>,
    pub forest: ForestConfig,
    pub select: FeatureSelectConfig,
    pub eval: EvalConfig,
    pub curve: LearningCurveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ch = |c: &[Channel]| c.iter().map(|c| c.name().to_string()).collect();
        Self {
            keypoints_dir: PathBuf::from("keypoints"),
            events_dir: None,
            output_dir: PathBuf::from("out"),
            stabilization: vec![StabilizationMode::Global],
            landmarks: LandmarkMap::default(),
            preprocess: PreprocessConfig::default(),
            window: WindowSpec::default(),
            embedding: EmbeddingParams::default(),
            rqa: RqaConfig::auto(),
            crqa: RqaConfig::cross(),
            rqa_channels: ch(&[
                Channel::Blink,
                Channel::Mouth,
                Channel::PupilX,
                Channel::PupilY,
                Channel::PupilMag,
                Channel::HeadTx,
                Channel::HeadTy,
                Channel::HeadRot,
                Channel::HeadMotion,
            ]),
            crqa_pairs: vec![(Channel::HeadTx.name().into(), Channel::PupilX.name().into())],
            forest: ForestConfig::default(),
            select: FeatureSelectConfig::default(),
            eval: EvalConfig::default(),
            curve: LearningCurveConfig::default(),
        }
    }
}

/// Parse a TOML value, falling back to a bare string.
fn toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set a dotted key such as `forest.n_trees` in a TOML table.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override '{key}': '{p}' is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), toml_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text` after applying `key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        Ok(table.try_into()?)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_toml_with(&fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn rqa_channel_list(&self) -> Result<Vec<Channel>> {
        self.rqa_channels.iter().map(|n| channel(n)).collect()
    }

    pub fn crqa_pair_list(&self) -> Result<Vec<(Channel, Channel)>> {
        self.crqa_pairs
            .iter()
            .map(|(a, b)| Ok((channel(a)?, channel(b)?)))
            .collect()
    }

    /// Checks nested configs only; paths are checked by [`RunConfig::validate`].
    pub fn validate_params(&self) -> Result<()> {
        self.window.validate()?;
        self.preprocess.validate(self.window.fps)?;
        self.embedding.validate()?;
        self.rqa.validate()?;
        self.crqa.validate()?;
        self.landmarks.validate()?;
        self.forest.validate()?;
        self.select.validate()?;
        self.curve.validate()?;
        if self.stabilization.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one stabilization mode is required".into(),
            ));
        }
        let modes: BTreeSet<&str> = self.stabilization.iter().map(|m| m.name()).collect();
        if modes.len() != self.stabilization.len() {
            return Err(Error::InvalidConfig(
                "stabilization modes must be distinct".into(),
            ));
        }
        self.rqa_channel_list()?;
        self.crqa_pair_list()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.keypoints_dir.is_dir() {
            return Err(Error::MissingPath(self.keypoints_dir.clone()));
        }
        if let Some(dir) = &self.events_dir {
            if !dir.is_dir() {
                return Err(Error::MissingPath(dir.clone()));
            }
        }
        self.validate_params()
    }

    /// SHA-256 over every field except the three directories; only the
    /// presence of an events directory counts. Input contents are hashed
    /// separately per cache entry.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for k in ["keypoints_dir", "events_dir", "output_dir"] {
                obj.remove(k);
            }
            obj.insert("with_events".into(), self.events_dir.is_some().into());
        }
        sha256_hex(v.to_string().as_bytes())
    }

    /// Feature columns of the emitted matrix, after the metadata columns.
    pub fn feature_columns(&self) -> Result<Vec<String>> {
        let mut cols = kinematic_columns();
        for ch in self.rqa_channel_list()? {
            cols.extend(RQA_METRIC_NAMES.iter().map(|m| format!("{ch}__rqa__{m}")));
        }
        for (a, b) in self.crqa_pair_list()? {
            cols.extend(
                RQA_METRIC_NAMES
                    .iter()
                    .map(|m| format!("{a}__{b}__crqa__{m}")),
            );
        }
        if self.events_dir.is_some() {
            cols.extend(PERF_COLUMNS.iter().map(|c| c.to_string()));
        }
        Ok(cols)
    }
}

fn channel(name: &str) -> Result<Channel> {
    Channel::from_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown channel '{name}'")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Write through a `.partial` sibling and rename on success.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = partial_path(path);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn matrix_csv(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    m.write_to(&mut w)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// One keypoint file with its labels and optional event log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recording {
    pub participant: String,
    pub session: Session,
    pub condition: Condition,
    pub keypoints: PathBuf,
    pub events: Option<PathBuf>,
}

impl Recording {
    /// Labels from a `<participant>/<session>_<condition>.<ext>` path.
    pub fn from_path(path: &Path) -> Option<Self> {
        let stem = path.file_stem()?.to_str()?;
        let (session, condition) = parse_stem(stem)?;
        let participant = path.parent()?.file_name()?.to_str()?.to_string();
        Some(Self {
            participant,
            session,
            condition,
            keypoints: path.to_path_buf(),
            events: None,
        })
    }

    pub fn stem(&self) -> String {
        format!(
            "{}_{}",
            self.session.name().to_ascii_lowercase(),
            self.condition.name().to_ascii_lowercase()
        )
    }

    pub fn key(&self) -> String {
        format!("{}/{}", self.participant, self.stem())
    }

    fn input_hash(&self) -> Result<String> {
        let kp = sha256_hex(&fs::read(&self.keypoints)?);
        let ev = match &self.events {
            Some(p) => sha256_hex(&fs::read(p)?),
            None => String::new(),
        };
        Ok(hash_parts(&[&kp, &ev]))
    }
}

fn parse_stem(stem: &str) -> Option<(Session, Condition)> {
    let (s, c) = stem.split_once('_')?;
    Some((s.parse().ok()?, c.parse().ok()?))
}

/// Every recognised recording, sorted by participant, session and condition.
pub fn discover(cfg: &RunConfig) -> Result<Vec<Recording>> {
    let root = &cfg.keypoints_dir;
    if !root.is_dir() {
        return Err(Error::MissingPath(root.clone()));
    }
    let mut recs = Vec::new();
    for entry in fs::read_dir(root)? {
        let dir = entry?.path();
        if !dir.is_dir() {
            continue;
        }
        let mut seen = BTreeSet::new();
        for file in fs::read_dir(&dir)? {
            let path = file?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or_default();
            if !matches!(ext, "jsonl" | "csv") {
                continue;
            }
            let Some(mut rec) = Recording::from_path(&path) else {
                log::warn!(
                    "skipping {}: name is not <session>_<condition>",
                    path.display()
                );
                continue;
            };
            if !seen.insert((rec.session, rec.condition)) {
                return Err(Error::InvalidConfig(format!(
                    "{}: two keypoint files for {} {}",
                    dir.display(),
                    rec.session,
                    rec.condition
                )));
            }
            if let Some(ev) = &cfg.events_dir {
                let p = ev
                    .join(&rec.participant)
                    .join(format!("{}.csv", rec.stem()));
                if p.is_file() {
                    rec.events = Some(p);
                } else {
                    log::warn!("no event log for {}", rec.key());
                }
            }
            recs.push(rec);
        }
    }
    if recs.is_empty() {
        return Err(Error::EmptyInput.in_stage("ingest", root, None));
    }
    recs.sort_by(|a, b| {
        (&a.participant, a.session, a.condition).cmp(&(&b.participant, b.session, b.condition))
    });
    Ok(recs)
}

fn frame_of(e: &Error) -> Option<usize> {
    match e {
        Error::DuplicateFrame(f) => Some(*f),
        Error::NonMonotonicIndex { found, .. } => Some(*found),
        _ => None,
    }
}

/// Ingest and preprocess one recording.
pub fn load_recording(rec: &Recording, cfg: &RunConfig) -> Result<KeypointSeries> {
    let path = &rec.keypoints;
    let frames = read_keypoint_file(path).map_err(|e| e.in_stage("ingest", path, None))?;
    let series = assemble_series(&frames, cfg.window.fps).map_err(|e| {
        let f = frame_of(&e);
        e.in_stage("ingest", path, f)
    })?;
    let (clean, report) =
        preprocess(&series, &cfg.preprocess).map_err(|e| e.in_stage("preprocess", path, None))?;
    log::debug!("{}: {report:?}", rec.key());
    Ok(clean)
}

/// Feature rows of one recording: kinematics, auto and cross RQA, then
/// task performance when an events directory is configured.
pub fn recording_rows(
    rec: &Recording,
    series: &KeypointSeries,
    template: &Template,
    mode: StabilizationMode,
    cfg: &RunConfig,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let path = &rec.keypoints;
    let aligned = align_series(series, template, mode != StabilizationMode::None);
    let head = head_channels(&aligned.poses);
    let set = channel_set(&aligned.aligned, &head, &cfg.landmarks);
    let kin = window_features(&set, &cfg.window).map_err(|e| e.in_stage("features", path, None))?;
    let starts = cfg
        .window
        .starts(set.len())
        .map_err(|e| e.in_stage("features", path, None))?;
    let len = cfg.window.len();
    let slice = |ch: Channel, start: usize| -> Vec<f64> {
        set.get(ch)[start..start + len]
            .iter()
            .map(|v| v.expect("retained windows have complete values"))
            .collect()
    };
    let channels = cfg.rqa_channel_list()?;
    let pairs = cfg.crqa_pair_list()?;
    let perf = match (&cfg.events_dir, &rec.events) {
        (None, _) => None,
        (Some(_), None) => Some(vec![[None; 6]; starts.len()]),
        (Some(_), Some(p)) => {
            let events = read_event_log(p).map_err(|e| e.in_stage("taskperf", p, None))?;
            let w = windowed_perf(&events, &cfg.window, starts.len())
                .map_err(|e| e.in_stage("taskperf", p, None))?;
            Some(w.iter().map(|w| w.values()).collect())
        }
    };
    kin.into_par_iter()
        .map(|(index, mut row)| {
            let start = starts[index];
            let dyn_err = |e: Error| e.in_stage("dynamics", path, Some(start));
            for &ch in &channels {
                let m = auto_rqa(&slice(ch, start), &cfg.embedding, &cfg.rqa).map_err(dyn_err)?;
                row.extend(m.to_array());
            }
            for &(a, b) in &pairs {
                let m = crqa(
                    &slice(a, start),
                    &slice(b, start),
                    &cfg.embedding,
                    &cfg.crqa,
                )
                .map_err(dyn_err)?;
                row.extend(m.to_array());
            }
            if let Some(perf) = &perf {
                row.extend(perf[index].iter().map(|v| v.unwrap_or(f64::NAN)));
            }
            Ok((index, row))
        })
        .collect()
}

fn rows_to_text(rows: &[(usize, Vec<f64>)]) -> String {
    let mut out = String::new();
    for (index, row) in rows {
        out.push_str(&index.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn rows_from_text(text: &str, width: usize) -> Option<Vec<(usize, Vec<f64>)>> {
    text.lines()
        .map(|line| {
            let mut it = line.split(',');
            let index = it.next()?.parse().ok()?;
            let row: Vec<f64> = it.map(|v| v.parse().ok()).collect::<Option<_>>()?;
            (row.len() == width).then_some((index, row))
        })
        .collect()
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    /// Entry key to the hash of everything the entry was computed from.
    entries: BTreeMap<String, String>,
}

/// One cache directory per stage with a manifest of config and input hashes.
struct StageCache {
    dir: PathBuf,
    manifest: Manifest,
    dirty: bool,
}

impl StageCache {
    fn open(root: &Path, stage: &str, config_hash: &str) -> Result<Self> {
        let dir = root.join(stage);
        let manifest = fs::read(dir.join("manifest.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .filter(|m| m.config_hash == config_hash)
            .unwrap_or_else(|| Manifest {
                config_hash: config_hash.to_string(),
                entries: BTreeMap::new(),
            });
        Ok(Self {
            dir,
            manifest,
            dirty: false,
        })
    }

    fn file(&self, key: &str) -> PathBuf {
        self.dir.join(key.replace(['/', '\\'], "__"))
    }

    fn get(&self, key: &str, input_hash: &str) -> Option<String> {
        if self.manifest.entries.get(key).map(String::as_str) != Some(input_hash) {
            return None;
        }
        fs::read_to_string(self.file(key)).ok()
    }

    fn put(&mut self, key: &str, input_hash: &str, content: &str) -> Result<()> {
        write_atomic(&self.file(key), content.as_bytes())?;
        self.manifest
            .entries
            .insert(key.to_string(), input_hash.to_string());
        self.dirty = true;
        Ok(())
    }

    fn save(&self) -> Result<()> {
        if self.dirty {
            write_atomic(
                &self.dir.join("manifest.json"),
                &serde_json::to_vec_pretty(&self.manifest)?,
            )?;
        }
        Ok(())
    }
}

/// What a run produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub recordings: usize,
    /// Feature file per mode with its row count.
    pub outputs: Vec<(PathBuf, usize)>,
    pub cache_hits: usize,
    pub computed: usize,
}

pub fn features_path(cfg: &RunConfig, mode: StabilizationMode) -> PathBuf {
    cfg.output_dir.join(format!("features_{}.csv", mode.name()))
}

fn template_key(mode: StabilizationMode, participant: &str) -> String {
    match mode {
        StabilizationMode::PerParticipant => format!("participant/{participant}"),
        _ => "global".to_string(),
    }
}

/// Execute every stage and write one feature CSV per stabilization mode.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let config_hash = cfg.config_hash();
    let recs = discover(cfg)?;
    let columns = cfg.feature_columns()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let input_hashes: Vec<String> = recs
        .par_iter()
        .map(|r| r.input_hash())
        .collect::<Result<_>>()?;
    let cache_root = cfg.output_dir.join("cache");
    let mut tcache = StageCache::open(&cache_root, "align", &config_hash)?;
    let mut fcache = StageCache::open(&cache_root, "features", &config_hash)?;

    // Template keys, each with the recordings it averages over.
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &mode in &cfg.stabilization {
        for (i, r) in recs.iter().enumerate() {
            groups
                .entry(template_key(mode, &r.participant))
                .or_default()
                .push(i);
        }
    }
    for members in groups.values_mut() {
        members.sort_unstable();
        members.dedup();
    }
    let group_hash = |members: &[usize]| {
        let parts: Vec<&str> = members.iter().map(|&i| input_hashes[i].as_str()).collect();
        hash_parts(&parts)
    };

    let mut templates: BTreeMap<String, Template> = BTreeMap::new();
    for (key, members) in &groups {
        if let Some(t) = tcache
            .get(key, &group_hash(members))
            .and_then(|t| Template::from_text(&t).ok())
        {
            templates.insert(key.clone(), t);
        }
    }

    // Feature entries not already cached, given the templates known so far.
    let entry_key = |mode: StabilizationMode, r: &Recording| format!("{}/{}", mode.name(), r.key());
    let entry_hash = |i: usize, t: &Template| hash_parts(&[&input_hashes[i], &t.to_text()]);
    let mut cached: BTreeMap<String, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    for &mode in &cfg.stabilization {
        for (i, r) in recs.iter().enumerate() {
            let Some(t) = templates.get(&template_key(mode, &r.participant)) else {
                continue;
            };
            let key = entry_key(mode, r);
            if let Some(rows) = fcache
                .get(&key, &entry_hash(i, t))
                .and_then(|s| rows_from_text(&s, columns.len()))
            {
                cached.insert(key, rows);
            }
        }
    }

    let mut needed: BTreeSet<usize> = BTreeSet::new();
    for (key, members) in &groups {
        if !templates.contains_key(key) {
            needed.extend(members);
        }
    }
    for &mode in &cfg.stabilization {
        for (i, r) in recs.iter().enumerate() {
            if !cached.contains_key(&entry_key(mode, r)) {
                needed.insert(i);
            }
        }
    }
    let needed: Vec<usize> = needed.into_iter().collect();
    let loaded: Vec<Result<KeypointSeries>> = needed
        .par_iter()
        .map(|&i| load_recording(&recs[i], cfg))
        .collect();
    let mut series: BTreeMap<usize, KeypointSeries> = BTreeMap::new();
    for (&i, s) in needed.iter().zip(loaded) {
        series.insert(i, s?);
    }

    for (key, members) in &groups {
        if templates.contains_key(key) {
            continue;
        }
        let refs: Vec<&KeypointSeries> = members.iter().map(|i| &series[i]).collect();
        let scope = if key == "global" {
            TemplateScope::Global
        } else {
            TemplateScope::PerParticipant
        };
        let t = build_template(&refs, cfg.landmarks.template, scope)
            .map_err(|e| e.in_stage("align", &recs[members[0]].keypoints, None))?;
        tcache.put(key, &group_hash(members), &t.to_text())?;
        templates.insert(key.clone(), t);
    }
    tcache.save()?;
    for (key, t) in &templates {
        let name = key.strip_prefix("participant/").unwrap_or(key);
        write_atomic(
            &cfg.output_dir.join("templates").join(format!("{name}.txt")),
            t.to_text().as_bytes(),
        )?;
    }

    let mut summary = RunSummary {
        config_hash,
        recordings: recs.len(),
        ..Default::default()
    };
    let mut failure = None;
    for &mode in &cfg.stabilization {
        let todo: Vec<usize> = (0..recs.len())
            .filter(|&i| !cached.contains_key(&entry_key(mode, &recs[i])))
            .collect();
        let computed: Vec<Result<Vec<(usize, Vec<f64>)>>> = todo
            .par_iter()
            .map(|&i| {
                let t = &templates[&template_key(mode, &recs[i].participant)];
                recording_rows(&recs[i], &series[&i], t, mode, cfg)
            })
            .collect();
        summary.computed += todo.len();
        summary.cache_hits += recs.len() - todo.len();
        for (&i, rows) in todo.iter().zip(computed) {
            match rows {
                Ok(rows) => {
                    let t = &templates[&template_key(mode, &recs[i].participant)];
                    fcache.put(
                        &entry_key(mode, &recs[i]),
                        &entry_hash(i, t),
                        &rows_to_text(&rows),
                    )?;
                    cached.insert(entry_key(mode, &recs[i]), rows);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        let mut m = FeatureMatrix::new(columns.clone());
        for r in &recs {
            let Some(rows) = cached.get(&entry_key(mode, r)) else {
                continue;
            };
            for (index, row) in rows {
                let meta = RowMeta {
                    participant: r.participant.clone(),
                    session: r.session,
                    condition: r.condition,
                    window_index: *index,
                };
                m.push_row(meta, row)?;
            }
        }
        let path = features_path(cfg, mode);
        let bytes = matrix_csv(&m)?;
        if failure.is_some() {
            fs::write(partial_path(&path), bytes)?;
            break;
        }
        write_atomic(&path, &bytes)?;
        summary.outputs.push((path, m.n_rows()));
    }
    fcache.save()?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Column family of a feature name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureGroup {
    Kinematic,
    Rqa,
    Crqa,
    Perf,
}

impl FeatureGroup {
    pub fn of(column: &str) -> Self {
        if column.starts_with("perf__") {
            Self::Perf
        } else if column.contains("__crqa__") {
            Self::Crqa
        } else if column.contains("__rqa__") {
            Self::Rqa
        } else {
            Self::Kinematic
        }
    }
}

/// A union of feature groups, parsed from names joined by `+`:
/// `kinematic`, `rqa`, `crqa`, `recurrence` (rqa and crqa), `perf`,
/// `pose` (everything but perf) and `all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSet(pub BTreeSet<FeatureGroup>);

impl FeatureSet {
    pub fn contains(&self, column: &str) -> bool {
        self.0.contains(&FeatureGroup::of(column))
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use FeatureGroup::*;
        let mut set = BTreeSet::new();
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "kinematic" | "linear" => set.insert(Kinematic),
                "rqa" => set.insert(Rqa),
                "crqa" => set.insert(Crqa),
                "recurrence" => {
                    set.extend([Rqa, Crqa]);
                    true
                }
                "perf" | "performance" => set.insert(Perf),
                "pose" => {
                    set.extend([Kinematic, Rqa, Crqa]);
                    true
                }
                "all" => {
                    set.extend([Kinematic, Rqa, Crqa, Perf]);
                    true
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown feature set '{other}'"
                    )))
                }
            };
        }
        Ok(Self(set))
    }
}

/// Read the columns of `set` from a feature CSV, dropping incomplete rows.
pub fn read_features(path: &Path, set: &FeatureSet) -> Result<FeatureMatrix> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let m = FeatureMatrix::read_csv_with(path, |c| set.contains(c))?;
    if m.n_cols() == 0 || m.n_rows() == 0 {
        return Err(Error::EmptyInput.in_stage("read features", path, None));
    }
    Ok(m)
}

const CLASS_NAMES: [&str; 3] = ["low", "moderate", "high"];

/// Header of a fold report table.
pub fn fold_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["fold", "balanced_accuracy", "weighted_f1", "kappa"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for metric in ["precision", "recall", "f1"] {
        cols.extend(CLASS_NAMES.iter().map(|c| format!("{metric}_{c}")));
    }
    cols
}

/// Element-wise mean of several reports of the same shape.
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let avg_vec = |f: &dyn Fn(&EvalReport) -> &Vec<f64>| -> Vec<f64> {
        (0..f(first).len())
            .map(|k| reports.iter().map(|r| f(r)[k]).sum::<f64>() / n)
            .collect()
    };
    Ok(EvalReport {
        balanced_accuracy: avg(&|r| r.balanced_accuracy),
        weighted_f1: avg(&|r| r.weighted_f1),
        kappa: avg(&|r| r.kappa),
        precision: avg_vec(&|r| &r.precision),
        recall: avg_vec(&|r| &r.recall),
        f1: avg_vec(&|r| &r.f1),
        support: first.support.clone(),
        confusion: (0..first.confusion.len())
            .map(|i| {
                (0..first.confusion[i].len())
                    .map(|j| reports.iter().map(|r| r.confusion[i][j]).sum::<f64>() / n)
                    .collect()
            })
            .collect(),
    })
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `<prefix>_folds.csv` with one row per fold and `<prefix>_confusion_<fold>.csv`
/// per fold (row = true class, percentages).
pub fn write_fold_reports(
    dir: &Path,
    prefix: &str,
    folds: &[(String, EvalReport)],
) -> Result<Vec<PathBuf>> {
    let rows: Vec<Vec<String>> = folds
        .iter()
        .map(|(name, r)| {
            let mut row = vec![
                name.clone(),
                r.balanced_accuracy.to_string(),
                r.weighted_f1.to_string(),
                r.kappa.to_string(),
            ];
            for v in [&r.precision, &r.recall, &r.f1] {
                row.extend(v.iter().map(|x| x.to_string()));
            }
            row
        })
        .collect();
    let folds_path = dir.join(format!("{prefix}_folds.csv"));
    write_atomic(&folds_path, &csv_bytes(&fold_columns(), &rows)?)?;
    let mut out = vec![folds_path];
    let header: Vec<String> = std::iter::once("true".to_string())
        .chain(CLASS_NAMES.iter().map(|c| c.to_string()))
        .collect();
    for (name, r) in folds {
        let rows: Vec<Vec<String>> = r
            .confusion
            .iter()
            .zip(CLASS_NAMES)
            .map(|(row, c)| {
                std::iter::once(c.to_string())
                    .chain(row.iter().map(|v| v.to_string()))
                    .collect()
            })
            .collect();
        let p = dir.join(format!("{prefix}_confusion_{name}.csv"));
        write_atomic(&p, &csv_bytes(&header, &rows)?)?;
        out.push(p);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_split_outputs(dir: &Path, report: &SplitReport) -> Result<Vec<PathBuf>> {
    let folds: Vec<(String, EvalReport)> = report
        .seeds
        .iter()
        .zip(&report.reports)
        .map(|(s, r)| (format!("seed{s}"), r.clone()))
        .collect();
    let mut out = write_fold_reports(dir, "split", &folds)?;
    let json = dir.join("split_report.json");
    write_json(&json, report)?;
    out.push(json);
    Ok(out)
}

/// One fold row per held-out participant, averaged over repeats.
pub fn write_lopo_outputs(dir: &Path, report: &LopoReport) -> Result<Vec<PathBuf>> {
    let folds: Vec<(String, EvalReport)> = report
        .participants
        .iter()
        .map(|p| Ok((p.participant.clone(), mean_report(&p.reports)?)))
        .collect::<Result<_>>()?;
    let mut out = write_fold_reports(dir, "lopo", &folds)?;
    let json = dir.join("lopo_report.json");
    write_json(&json, report)?;
    out.push(json);
    Ok(out)
}

/// `learning_curve.csv`: `participant,size,n,mean,sd`, with the population
/// rows under participant `population`.
pub fn write_curve_outputs(dir: &Path, curve: &LearningCurve) -> Result<Vec<PathBuf>> {
    let header: Vec<String> = ["participant", "size", "n", "mean", "sd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for p in &curve.participants {
        for pt in &p.points {
            let (n, mean, sd) = match &pt.accuracy {
                Some(a) => (a.n.to_string(), a.mean.to_string(), a.sd.to_string()),
                None => ("0".into(), String::new(), String::new()),
            };
            rows.push(vec![
                p.participant.clone(),
                pt.size.to_string(),
                n,
                mean,
                sd,
            ]);
        }
    }
    for (size, a) in &curve.population {
        rows.push(vec![
            "population".into(),
            size.to_string(),
            a.n.to_string(),
            a.mean.to_string(),
            a.sd.to_string(),
        ]);
    }
    let csv_path = dir.join("learning_curve.csv");
    write_atomic(&csv_path, &csv_bytes(&header, &rows)?)?;
    let json = dir.join("learning_curve.json");
    write_json(&json, curve)?;
    Ok(vec![csv_path, json])
}

/// One summary line of a report table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportLine {
    pub source: String,
    pub metric: String,
    pub stats: MeanSd,
}

/// Mean and sample sd of every numeric column of each fold table.
pub fn report(inputs: &[PathBuf]) -> Result<Vec<ReportLine>> {
    let mut lines = Vec::new();
    for path in inputs {
        if !path.exists() {
            return Err(Error::MissingPath(path.clone()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
        let mut numeric = vec![true; header.len()];
        for rec in r.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate().take(header.len()) {
                match field.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => cols[j].push(v),
                    Ok(_) => {}
                    Err(_) => numeric[j] = false,
                }
            }
        }
        let source = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        for (j, name) in header.iter().enumerate() {
            if numeric[j] && name != "fold" && !cols[j].is_empty() {
                lines.push(ReportLine {
                    source: source.clone(),
                    metric: name.to_string(),
                    stats: MeanSd::of(&cols[j]),
                });
            }
        }
    }
    Ok(lines)
}

/// CSV table `source,metric,n,mean,sd,summary`; summary reads `85.2% ± 1.5%`.
pub fn render_report(lines: &[ReportLine]) -> Result<String> {
    let header: Vec<String> = ["source", "metric", "n", "mean", "sd", "summary"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| {
            vec![
                l.source.clone(),
                l.metric.clone(),
                l.stats.n.to_string(),
                l.stats.mean.to_string(),
                l.stats.sd.to_string(),
                l.stats.percent(),
            ]
        })
        .collect();
    String::from_utf8(csv_bytes(&header, &rows)?).map_err(|e| Error::MalformedRecord(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_keys() {
        let cfg = RunConfig::from_toml_with(
            "[forest]\nn_trees = 10\n",
            &[
                ("forest.n_trees".into(), "25".into()),
                ("stabilization".into(), "[\"none\"]".into()),
                ("output_dir".into(), "results".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.forest.n_trees, 25);
        assert_eq!(cfg.stabilization, vec![StabilizationMode::None]);
        assert_eq!(cfg.output_dir, PathBuf::from("results"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[rqa]\nradius = 0.2\n").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig {
            events_dir: Some("ev".into()),
            ..Default::default()
        };
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let base = RunConfig::default();
        let moved = RunConfig {
            output_dir: "elsewhere".into(),
            keypoints_dir: "kp2".into(),
            ..Default::default()
        };
        assert_eq!(base.config_hash(), moved.config_hash());
        let mut changed = RunConfig::default();
        changed.rqa.radius_frac = 0.25;
        assert_ne!(base.config_hash(), changed.config_hash());
        let mut changed = RunConfig::default();
        changed.window.overlap = 0.25;
        assert_ne!(base.config_hash(), changed.config_hash());
        let mut changed = RunConfig::default();
        changed.forest.seed = 9;
        assert_ne!(base.config_hash(), changed.config_hash());
    }

    #[test]
    fn column_arity() {
        let cfg = RunConfig::default();
        let cols = cfg.feature_columns().unwrap();
        assert_eq!(cols.len(), 12 * 3 * 9 + 11 * 9 + 11);
        assert!(cols.contains(&"head_tx__pupil_x__crqa__det".to_string()));
        assert!(cols.contains(&"blink__rqa__rr".to_string()));
        let with_perf = RunConfig {
            events_dir: Some("ev".into()),
            ..Default::default()
        };
        assert_eq!(with_perf.feature_columns().unwrap().len(), cols.len() + 6);
    }

    #[test]
    fn feature_sets() {
        let pose: FeatureSet = "pose".parse().unwrap();
        assert!(pose.contains("blink__value__rms"));
        assert!(pose.contains("blink__rqa__det"));
        assert!(pose.contains("head_tx__pupil_x__crqa__rr"));
        assert!(!pose.contains("perf__comms__rt"));
        let kp: FeatureSet = "kinematic+perf".parse().unwrap();
        assert!(kp.contains("perf__comms__rt") && !kp.contains("mouth__rqa__rr"));
        assert!("nonsense".parse::<FeatureSet>().is_err());
    }

    #[test]
    fn cached_rows_round_trip_exactly() {
        let rows = vec![
            (0, vec![0.1, 1.0 / 3.0, f64::NAN, -2.5e-300]),
            (3, vec![1.0, 2.0, 3.0, 4.0]),
        ];
        let back = rows_from_text(&rows_to_text(&rows), 4).unwrap();
        assert_eq!(back[1], rows[1]);
        assert_eq!(back[0].1[1].to_bits(), rows[0].1[1].to_bits());
        assert!(back[0].1[2].is_nan());
        assert!(rows_from_text("0,1,2\n", 4).is_none());
    }

    #[test]
    fn mean_report_averages() {
        let a = crate::ml::eval_metrics(&[0, 1, 2], &[0, 1, 2]).unwrap();
        let b = crate::ml::eval_metrics(&[1, 1, 2], &[0, 1, 2]).unwrap();
        let m = mean_report(&[a.clone(), b.clone()]).unwrap();
        assert!(
            (m.balanced_accuracy - (a.balanced_accuracy + b.balanced_accuracy) / 2.0).abs() < 1e-15
        );
        assert!((m.confusion[0][0] - 50.0).abs() < 1e-12);
    }
}
