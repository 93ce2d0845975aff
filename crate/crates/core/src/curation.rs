//! Streaming curation: parse, filter, normalize, template, balance, shard.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bbox::{format_bbox_text, normalize_bbox, NormBBox};
use crate::error::{Error, Result};

pub const GLOBAL_QUESTION: &str = "Describe in detail what is shown in the image in one paragraph";
const B2C_PREFIX: &str = "Describe the content contained within the normalized bounding box coordinates ";
const B2C_SUFFIX: &str = " in no more than 10 words.";
const C2B_PREFIX: &str = "Please provide the bounding box coordinate of the region this sentence describes: ";

pub fn bbox2caption_question(b: &NormBBox) -> String {
    format!("{B2C_PREFIX}{}{B2C_SUFFIX}", format_bbox_text(b))
}

pub fn caption2bbox_question(caption: &str) -> String {
    format!("{C2B_PREFIX}{caption}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionAnnotation {
    pub bbox_abs: [f64; 4],
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub record_id: String,
    pub source: String,
    pub width_px: u32,
    pub height_px: u32,
    pub image_ref: String,
    pub global_caption: Option<String>,
    pub regions: Vec<RegionAnnotation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    GlobalCaption,
    Bbox2Caption,
    Caption2Bbox,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::GlobalCaption, Task::Bbox2Caption, Task::Caption2Bbox];

    pub fn name(self) -> &'static str {
        match self {
            Task::GlobalCaption => "GlobalCaption",
            Task::Bbox2Caption => "Bbox2Caption",
            Task::Caption2Bbox => "Caption2Bbox",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Task::GlobalCaption => "global",
            Task::Bbox2Caption => "b2c",
            Task::Caption2Bbox => "c2b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub record_id: String,
    pub task: Task,
    pub question: String,
    pub answer: String,
    pub bbox: Option<NormBBox>,
    #[serde(rename = "image")]
    pub image_ref: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub min_short_side_px: u32,
    pub aspect_ratio_range: (f64, f64),
    pub min_bbox_area_px2: f64,
    pub min_regions: usize,
    /// Sources absent from the map have weight 1.
    pub source_sampling_weights: BTreeMap<String, f64>,
    /// Number of QA samples to draw across sources; `None` keeps everything.
    pub balance_total: Option<usize>,
    pub shard_max_lines: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            min_short_side_px: 448,
            aspect_ratio_range: (1.0 / 3.0, 3.0),
            min_bbox_area_px2: 10_000.0,
            min_regions: 1,
            source_sampling_weights: BTreeMap::new(),
            balance_total: None,
            shard_max_lines: 10_000,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.aspect_ratio_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!("aspect_ratio_range ({lo}, {hi}) needs 0 < lo <= hi")));
        }
        if self.shard_max_lines == 0 {
            return Err(Error::config("shard_max_lines must be positive"));
        }
        if self.source_sampling_weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("source weights must be finite and non-negative"));
        }
        Ok(())
    }

    fn weight(&self, source: &str) -> f64 {
        self.source_sampling_weights.get(source).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Parse,
    DuplicateId,
    ShortSide,
    ImageAspectRatio,
    TooFewRegions,
    BboxBounds,
    BboxAspectRatio,
    BboxArea,
    EmptyCaption,
    /// Region dropped because its record was rejected.
    RecordRejected,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Parse => "parse",
            RejectReason::DuplicateId => "duplicate_id",
            RejectReason::ShortSide => "short_side",
            RejectReason::ImageAspectRatio => "image_aspect_ratio",
            RejectReason::TooFewRegions => "too_few_regions",
            RejectReason::BboxBounds => "bbox_bounds",
            RejectReason::BboxAspectRatio => "bbox_aspect_ratio",
            RejectReason::BboxArea => "bbox_area",
            RejectReason::EmptyCaption => "empty_caption",
            RejectReason::RecordRejected => "record_rejected",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationStats {
    pub records_in: usize,
    pub records_accepted: usize,
    pub regions_in: usize,
    pub regions_accepted: usize,
    pub rejects_by_reason: BTreeMap<String, usize>,
    pub qa_samples_emitted_by_task: BTreeMap<String, usize>,
}

impl CurationStats {
    fn reject(&mut self, reason: RejectReason, n: usize) {
        if n > 0 {
            *self.rejects_by_reason.entry(reason.as_str().to_string()).or_default() += n;
        }
    }
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

/// Image-level rules: short side strictly above the threshold, width/height
/// inside the inclusive aspect-ratio range.
pub fn validate_image(record: &RawRecord, cfg: &CurationConfig) -> Verdict {
    let (w, h) = (record.width_px, record.height_px);
    if w.min(h) <= cfg.min_short_side_px {
        return Verdict::Reject(RejectReason::ShortSide);
    }
    if !in_range(w as f64 / h as f64, cfg.aspect_ratio_range) {
        return Verdict::Reject(RejectReason::ImageAspectRatio);
    }
    Verdict::Accept
}

/// Region-level rules in order: bounds, aspect ratio, strict area, caption.
pub fn filter_region(region: &RegionAnnotation, width_px: u32, height_px: u32, cfg: &CurationConfig) -> Verdict {
    let [x1, y1, x2, y2] = region.bbox_abs;
    let in_bounds = region.bbox_abs.iter().all(|v| v.is_finite())
        && 0.0 <= x1
        && x1 < x2
        && x2 <= width_px as f64
        && 0.0 <= y1
        && y1 < y2
        && y2 <= height_px as f64;
    if !in_bounds {
        return Verdict::Reject(RejectReason::BboxBounds);
    }
    let (bw, bh) = (x2 - x1, y2 - y1);
    if !in_range(bw / bh, cfg.aspect_ratio_range) {
        return Verdict::Reject(RejectReason::BboxAspectRatio);
    }
    if bw * bh <= cfg.min_bbox_area_px2 {
        return Verdict::Reject(RejectReason::BboxArea);
    }
    if region.caption.trim().is_empty() {
        return Verdict::Reject(RejectReason::EmptyCaption);
    }
    Verdict::Accept
}

/// Templated QA samples for a record whose regions are already filtered.
///
/// Region indices in sample ids count accepted regions in input order.
pub fn reformat(record: &RawRecord) -> Result<Vec<QaSample>> {
    let mut out = Vec::with_capacity(1 + 2 * record.regions.len());
    let sample = |task: Task, idx: Option<usize>, question: String, answer: String, bbox| {
        let sample_id = match idx {
            Some(i) => format!("{}#{}-{i}", record.record_id, task.tag()),
            None => format!("{}#{}", record.record_id, task.tag()),
        };
        QaSample {
            sample_id,
            record_id: record.record_id.clone(),
            task,
            question,
            answer,
            bbox,
            image_ref: record.image_ref.clone(),
        }
    };
    if let Some(caption) = record.global_caption.as_deref().filter(|c| !c.trim().is_empty()) {
        out.push(sample(Task::GlobalCaption, None, GLOBAL_QUESTION.to_string(), caption.to_string(), None));
    }
    for (i, region) in record.regions.iter().enumerate() {
        let b = normalize_bbox(region.bbox_abs, record.width_px, record.height_px)?;
        out.push(sample(
            Task::Bbox2Caption,
            Some(i),
            bbox2caption_question(&b),
            region.caption.clone(),
            Some(b),
        ));
        out.push(sample(
            Task::Caption2Bbox,
            Some(i),
            caption2bbox_question(&region.caption),
            format_bbox_text(&b),
            Some(b),
        ));
    }
    Ok(out)
}

fn expect_keys(obj: &serde_json::Map<String, Value>, keys: &[&str], what: &str) -> std::result::Result<(), String> {
    let mut got: Vec<&str> = obj.keys().map(String::as_str).collect();
    got.sort_unstable();
    let mut want = keys.to_vec();
    want.sort_unstable();
    if got != want {
        return Err(format!("{what} keys {got:?}, expected {want:?}"));
    }
    Ok(())
}

fn dimension(v: &Value, key: &str) -> std::result::Result<u32, String> {
    v.as_u64()
        .filter(|d| (1..=u32::MAX as u64).contains(d))
        .map(|d| d as u32)
        .ok_or_else(|| format!("{key} must be a positive integer"))
}

/// Parses one input line. Errors are human-readable descriptions.
pub fn parse_record(line: &str) -> std::result::Result<RawRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("record is not an object")?;
    expect_keys(obj, &["id", "source", "width", "height", "image", "caption", "regions"], "record")?;
    let text = |k: &str| obj[k].as_str().map(str::to_string).ok_or(format!("{k} must be a string"));
    let record_id = text("id")?;
    if record_id.is_empty() {
        return Err("id must be non-empty".into());
    }
    let global_caption = match &obj["caption"] {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        _ => return Err("caption must be a string or null".into()),
    };
    let regions = obj["regions"]
        .as_array()
        .ok_or("regions must be a list")?
        .iter()
        .map(|r| {
            let r = r.as_object().ok_or("region is not an object")?;
            expect_keys(r, &["bbox", "caption"], "region")?;
            let coords = r["bbox"].as_array().filter(|a| a.len() == 4).ok_or("bbox must have 4 numbers")?;
            let mut bbox_abs = [0.0; 4];
            for (slot, c) in bbox_abs.iter_mut().zip(coords) {
                *slot = c.as_f64().ok_or("bbox coordinates must be numbers")?;
            }
            let caption = r["caption"].as_str().ok_or("region caption must be a string")?.to_string();
            Ok(RegionAnnotation { bbox_abs, caption })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(RawRecord {
        record_id,
        source: text("source")?,
        width_px: dimension(&obj["width"], "width")?,
        height_px: dimension(&obj["height"], "height")?,
        image_ref: text("image")?,
        global_caption,
        regions,
    })
}

/// Serializes a record back to the input line format.
pub fn record_to_line(r: &RawRecord) -> String {
    let regions: Vec<Value> = r
        .regions
        .iter()
        .map(|g| serde_json::json!({"bbox": g.bbox_abs, "caption": g.caption}))
        .collect();
    let v = serde_json::json!({
        "id": r.record_id,
        "source": r.source,
        "width": r.width_px,
        "height": r.height_px,
        "image": r.image_ref,
        "caption": r.global_caption,
        "regions": regions,
    });
    v.to_string()
}

/// Outcome of curating a single parsed record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordOutcome {
    pub verdict: Verdict,
    pub region_verdicts: Vec<Verdict>,
    pub samples: Vec<QaSample>,
}

pub fn curate_record(record: &RawRecord, cfg: &CurationConfig) -> Result<RecordOutcome> {
    let rejected = |reason| RecordOutcome {
        verdict: Verdict::Reject(reason),
        region_verdicts: vec![Verdict::Reject(RejectReason::RecordRejected); record.regions.len()],
        samples: Vec::new(),
    };
    if let Verdict::Reject(reason) = validate_image(record, cfg) {
        return Ok(rejected(reason));
    }
    let region_verdicts: Vec<Verdict> = record
        .regions
        .iter()
        .map(|r| filter_region(r, record.width_px, record.height_px, cfg))
        .collect();
    let kept: Vec<RegionAnnotation> = record
        .regions
        .iter()
        .zip(&region_verdicts)
        .filter(|(_, v)| **v == Verdict::Accept)
        .map(|(r, _)| r.clone())
        .collect();
    if kept.len() < cfg.min_regions {
        let region_verdicts = region_verdicts
            .into_iter()
            .map(|v| match v {
                Verdict::Accept => Verdict::Reject(RejectReason::RecordRejected),
                other => other,
            })
            .collect();
        return Ok(RecordOutcome {
            verdict: Verdict::Reject(RejectReason::TooFewRegions),
            region_verdicts,
            samples: Vec::new(),
        });
    }
    let filtered = RawRecord {
        regions: kept,
        ..record.clone()
    };
    Ok(RecordOutcome {
        verdict: Verdict::Accept,
        region_verdicts,
        samples: reformat(&filtered)?,
    })
}

/// Deterministic weighted interleave of per-source streams.
///
/// Each source draws `round(total · w / Σw)` items in its original order; the
/// rounding remainder goes to the largest-weight source. Quotas are capped at
/// stream length. The interleave picks a source with probability proportional
/// to its remaining quota.
pub fn balance_sample<T>(
    mut streams: BTreeMap<String, Vec<T>>,
    weights: &BTreeMap<String, f64>,
    total: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if total == 0 {
        return Ok(Vec::new());
    }
    if streams.values().all(Vec::is_empty) {
        return Err(Error::EmptyInput("balance_sample: all source streams are empty"));
    }
    let names: Vec<String> = streams.keys().cloned().collect();
    let w: Vec<f64> = names.iter().map(|n| weights.get(n).copied().unwrap_or(1.0)).collect();
    if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(Error::config("source weights must be finite and non-negative"));
    }
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Err(Error::config("at least one source weight must be positive"));
    }
    let mut quota: Vec<i64> = w.iter().map(|x| (total as f64 * x / sum).round() as i64).collect();
    let largest = (0..w.len())
        .fold(0, |best, i| if w[i] > w[best] { i } else { best });
    quota[largest] += total as i64 - quota.iter().sum::<i64>();
    let mut remaining: Vec<usize> = quota
        .iter()
        .zip(&names)
        .map(|(q, n)| ((*q).max(0) as usize).min(streams[n].len()))
        .collect();
    let mut iters: Vec<std::vec::IntoIter<T>> = names
        .iter()
        .map(|n| streams.remove(n).unwrap_or_default().into_iter())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(remaining.iter().sum());
    loop {
        let left: usize = remaining.iter().sum();
        if left == 0 {
            break;
        }
        let mut pick = rng.gen_range(0..left);
        let src = remaining
            .iter()
            .position(|&r| {
                if pick < r {
                    true
                } else {
                    pick -= r;
                    false
                }
            })
            .expect("pick below total remaining");
        remaining[src] -= 1;
        out.extend(iters[src].next());
    }
    Ok(out)
}

fn is_external_ref(r: &str) -> bool {
    r.contains("://") || r.starts_with("data:") || r.starts_with("inline:")
}

/// Re-expresses a shard-relative image path relative to `out_dir`.
fn rebase_image_ref(image_ref: &str, shard_dir: &Path, out_dir: &Path) -> Result<String> {
    if is_external_ref(image_ref) || Path::new(image_ref).is_absolute() {
        return Ok(image_ref.to_string());
    }
    let target = std::path::absolute(shard_dir.join(image_ref)).map_err(|e| Error::io(shard_dir, e))?;
    let base = std::path::absolute(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rel = pathdiff::diff_paths(&target, &base).unwrap_or(target);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

pub fn shard_name(prefix: &str, index: usize) -> String {
    format!("{prefix}-{index:05}.jsonl")
}

/// Writes `lines` to `dir/{prefix}-NNNNN.jsonl` shards of at most `max_lines`.
pub fn write_shards(dir: &Path, prefix: &str, lines: &[String], max_lines: usize) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (i, chunk) in lines.chunks(max_lines.max(1)).enumerate() {
        let path = dir.join(shard_name(prefix, i));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for line in chunk {
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn remove_stale_shards(dir: &Path, prefix: &str) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(&format!("{prefix}-")) && name.ends_with(".jsonl") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Runs the full pipeline over `inputs` and writes `qa-NNNNN.jsonl` shards
/// plus `stats.json` into `out_dir`.
///
/// Shards are filled in emission order (input order, then record order, then
/// region order), so output is a pure function of input bytes and config.
pub fn curate_corpus(inputs: &[PathBuf], cfg: &CurationConfig, out_dir: &Path) -> Result<CurationStats> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    remove_stale_shards(out_dir, "qa")?;

    let mut stats = CurationStats::default();
    let mut by_source: BTreeMap<String, Vec<QaSample>> = BTreeMap::new();
    let mut ordered: Vec<QaSample> = Vec::new();

    for input in inputs {
        let shard_dir = input.parent().unwrap_or(Path::new("."));
        let file = fs::File::open(input).map_err(|e| Error::io(input, e))?;
        let mut seen = HashSet::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(input, e))?;
            if line.trim().is_empty() {
                continue;
            }
            stats.records_in += 1;
            let Ok(mut record) = parse_record(&line) else {
                stats.reject(RejectReason::Parse, 1);
                continue;
            };
            stats.regions_in += record.regions.len();
            if !seen.insert(record.record_id.clone()) {
                stats.reject(RejectReason::DuplicateId, 1);
                stats.reject(RejectReason::RecordRejected, record.regions.len());
                continue;
            }
            record.image_ref = rebase_image_ref(&record.image_ref, shard_dir, out_dir)?;
            let outcome = curate_record(&record, cfg)?;
            for v in &outcome.region_verdicts {
                match v {
                    Verdict::Accept => stats.regions_accepted += 1,
                    Verdict::Reject(r) => stats.reject(*r, 1),
                }
            }
            match outcome.verdict {
                Verdict::Accept => stats.records_accepted += 1,
                Verdict::Reject(r) => stats.reject(r, 1),
            }
            if cfg.balance_total.is_some() {
                by_source.entry(record.source.clone()).or_default().extend(outcome.samples);
            } else {
                ordered.extend(outcome.samples);
            }
        }
    }

    let emitted = match cfg.balance_total {
        Some(total) if by_source.values().any(|s| !s.is_empty()) => {
            let weights = by_source
                .keys()
                .map(|k| (k.clone(), cfg.weight(k)))
                .collect();
            balance_sample(by_source, &weights, total, cfg.seed)?
        }
        _ => ordered,
    };

    for task in Task::ALL {
        stats.qa_samples_emitted_by_task.insert(task.name().to_string(), 0);
    }
    let mut lines = Vec::with_capacity(emitted.len());
    for s in &emitted {
        *stats.qa_samples_emitted_by_task.entry(s.task.name().to_string()).or_default() += 1;
        lines.push(serde_json::to_string(s).expect("QA sample serializes"));
    }
    write_shards(out_dir, "qa", &lines, cfg.shard_max_lines)?;

    let stats_path = out_dir.join("stats.json");
    let mut text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    text.push('\n');
    fs::write(&stats_path, text).map_err(|e| Error::io(&stats_path, e))?;
    Ok(stats)
}

/// Reads every QA sample from `qa-*.jsonl` shards in `dir`, in shard order.
pub fn read_qa_dir(dir: &Path) -> Result<Vec<QaSample>> {
    let mut shards: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("qa-") && n.ends_with(".jsonl"))
        })
        .collect();
    shards.sort();
    let mut out = Vec::new();
    for shard in shards {
        out.extend(read_qa_shard(&shard)?);
    }
    Ok(out)
}

pub fn read_qa_shard(path: &Path) -> Result<Vec<QaSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(w: u32, h: u32, regions: &[[f64; 4]], caption: Option<&str>) -> RawRecord {
        RawRecord {
            record_id: "r".into(),
            source: "natural".into(),
            width_px: w,
            height_px: h,
            image_ref: "img.png".into(),
            global_caption: caption.map(str::to_string),
            regions: regions
                .iter()
                .map(|b| RegionAnnotation {
                    bbox_abs: *b,
                    caption: "a thing".into(),
                })
                .collect(),
        }
    }

    fn region(b: [f64; 4]) -> RegionAnnotation {
        RegionAnnotation {
            bbox_abs: b,
            caption: "x".into(),
        }
    }

    #[test]
    fn image_rules() {
        let cfg = CurationConfig::default();
        assert_eq!(validate_image(&record(600, 800, &[], None), &cfg), Verdict::Accept);
        assert_eq!(
            validate_image(&record(400, 600, &[], None), &cfg),
            Verdict::Reject(RejectReason::ShortSide)
        );
        assert_eq!(
            validate_image(&record(500, 2000, &[], None), &cfg),
            Verdict::Reject(RejectReason::ImageAspectRatio)
        );
        assert_eq!(
            validate_image(&record(448, 900, &[], None), &cfg),
            Verdict::Reject(RejectReason::ShortSide)
        );
    }

    #[test]
    fn region_rules() {
        let cfg = CurationConfig::default();
        let f = |b| filter_region(&region(b), 600, 800, &cfg);
        assert_eq!(f([0.0, 0.0, 200.0, 200.0]), Verdict::Accept);
        assert_eq!(f([0.0, 0.0, 50.0, 150.0]), Verdict::Reject(RejectReason::BboxArea));
        assert_eq!(f([0.0, 0.0, 100.0, 450.0]), Verdict::Reject(RejectReason::BboxAspectRatio));
        assert_eq!(f([0.0, 0.0, 100.0, 100.0]), Verdict::Reject(RejectReason::BboxArea));
        assert_eq!(f([500.0, 0.0, 700.0, 200.0]), Verdict::Reject(RejectReason::BboxBounds));
        assert_eq!(f([10.0, 0.0, 10.0, 200.0]), Verdict::Reject(RejectReason::BboxBounds));
    }

    #[test]
    fn reformat_counts_and_templates() {
        let r = record(600, 800, &[[0.0, 0.0, 200.0, 200.0], [100.0, 100.0, 400.0, 500.0]], Some("a scene"));
        let s = reformat(&r).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].task, Task::GlobalCaption);
        assert_eq!(s[0].question, GLOBAL_QUESTION);
        assert_eq!(
            s[1].question,
            "Describe the content contained within the normalized bounding box coordinates [0.000, 0.000, 0.333, 0.250] in no more than 10 words."
        );
        assert_eq!(s[2].answer, "[0.000, 0.000, 0.333, 0.250]");
        assert_eq!(
            s[2].question,
            "Please provide the bounding box coordinate of the region this sentence describes: a thing"
        );
        let ids: Vec<&str> = s.iter().map(|q| q.sample_id.as_str()).collect();
        assert_eq!(ids, ["r#global", "r#b2c-0", "r#c2b-0", "r#b2c-1", "r#c2b-1"]);

        let ocr = record(1000, 1000, &[[0.0, 0.0, 200.0, 200.0]; 3], None);
        let s = reformat(&ocr).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|q| q.task != Task::GlobalCaption));
        assert!(reformat(&record(600, 800, &[], None)).unwrap().is_empty());
    }

    #[test]
    fn qa_sample_json_shape() {
        let r = record(1000, 1000, &[[100.0, 200.0, 300.0, 400.0]], None);
        let s = reformat(&r).unwrap();
        let line = serde_json::to_string(&s[0]).unwrap();
        assert!(line.starts_with(r#"{"sample_id":"r#b2c-0","record_id":"r","task":"Bbox2Caption","#));
        assert!(line.contains(r#""bbox":[0.1,0.2,0.3,0.4],"image":"img.png"}"#));
        let back: QaSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s[0]);
    }

    #[test]
    fn parse_record_strict_keys() {
        let good = r#"{"id":"a","source":"natural","width":600,"height":800,"image":"a.png","caption":null,"regions":[{"bbox":[0,0,200,200],"caption":"x"}]}"#;
        let r = parse_record(good).unwrap();
        assert_eq!(r.regions[0].bbox_abs, [0.0, 0.0, 200.0, 200.0]);
        assert_eq!(parse_record(&record_to_line(&r)).unwrap(), r);
        let extra = good.replace(r#""caption":null,"#, r#""caption":null,"extra":1,"#);
        assert!(parse_record(&extra).is_err());
        let missing = good.replace(r#""source":"natural","#, "");
        assert!(parse_record(&missing).is_err());
        assert!(parse_record(&good.replace("600", "0")).is_err());
        assert!(parse_record(&good.replace("[0,0,200,200]", r#"[0,"a",200,200]"#)).is_err());
    }

    #[test]
    fn balance_examples() {
        let streams = |a: usize, b: usize| {
            BTreeMap::from([
                ("natural".to_string(), (0..a).map(|i| format!("n{i}")).collect::<Vec<_>>()),
                ("ocr".to_string(), (0..b).map(|i| format!("o{i}")).collect()),
            ])
        };
        let w = |a: f64, b: f64| BTreeMap::from([("natural".to_string(), a), ("ocr".to_string(), b)]);
        let count = |v: &[String], p: char| v.iter().filter(|s| s.starts_with(p)).count();

        let out = balance_sample(streams(20, 20), &w(1.0, 1.0), 10, 0).unwrap();
        assert_eq!((count(&out, 'n'), count(&out, 'o')), (5, 5));
        let out = balance_sample(streams(20, 20), &w(1.0, 0.0), 10, 0).unwrap();
        assert_eq!((count(&out, 'n'), count(&out, 'o')), (10, 0));
        let out = balance_sample(streams(20, 20), &w(2.0, 1.0), 9, 7).unwrap();
        assert_eq!((count(&out, 'n'), count(&out, 'o')), (6, 3));
        assert_eq!(out, balance_sample(streams(20, 20), &w(2.0, 1.0), 9, 7).unwrap());
        // Original order within each source survives.
        let ns: Vec<&String> = out.iter().filter(|s| s.starts_with('n')).collect();
        assert_eq!(ns, ["n0", "n1", "n2", "n3", "n4", "n5"]);

        assert!(matches!(
            balance_sample(streams(0, 0), &w(1.0, 1.0), 3, 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn balance_remainder_goes_to_largest_weight() {
        let streams = BTreeMap::from([
            ("a".to_string(), vec![0; 10]),
            ("b".to_string(), vec![1; 10]),
            ("c".to_string(), vec![2; 10]),
        ]);
        let w = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 1.0), ("c".to_string(), 2.0)]);
        // Quotas 1.75, 1.75, 3.5 round to 2, 2, 4 = 8; one too many comes off c.
        let out = balance_sample(streams, &w, 7, 1).unwrap();
        let n = |v| out.iter().filter(|x| **x == v).count();
        assert_eq!((n(0), n(1), n(2)), (2, 2, 3));
    }
}
