//! Synthetic grounding-like benchmark.
//!
//! Each instance is a "caption" of `T` phrases and an "image" of `K`
//! candidate boxes in the unit square. Every phrase has a gold box; the
//! candidates are jittered copies of the golds plus uniform distractors.
//! Consecutive golds follow a planted spatial relation (left, right, above,
//! below at a fixed distance) with probability `relation_strength`, and the
//! context features between two phrases carry a noisy indicator of which
//! relation holds. Features are fixed random linear maps (shared by every
//! split of one seed) of box geometry plus Gaussian noise.
//!
//! Instance files are JSON lines: a header record followed by one instance
//! per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crf::SoftTargets;
use crate::error::{at_path, Error, Result};
use crate::geometry::{best_overlap, iou, targets_from_overlaps, BBox, TargetRule};

/// Spatial feature width: `[x_min, y_min, x_max, y_max, area]`.
pub const SPATIAL_DIM: usize = 5;

pub const FORMAT_NAME: &str = "slcrf-instances";
pub const FORMAT_VERSION: u32 = 1;

/// One caption-image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub candidate_boxes: Vec<BBox>,
    /// `K x d_vis`.
    pub region_feats: Array2<f64>,
    /// `T x d_text`.
    pub phrase_feats: Array2<f64>,
    /// `(T-1) x d_ctx`, one row per adjacent phrase pair.
    pub context_feats: Option<Array2<f64>>,
    pub gold_boxes: Vec<BBox>,
}

impl Instance {
    pub fn num_phrases(&self) -> usize {
        self.gold_boxes.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.candidate_boxes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Error::Schema(format!("instance {}: {field}: {msg}", self.id));
        let t = self.num_phrases();
        let k = self.num_candidates();
        if t == 0 {
            return Err(err("gold_boxes", "at least one phrase required".into()));
        }
        if k == 0 {
            return Err(err("candidate_boxes", "at least one candidate required".into()));
        }
        for (i, b) in self.candidate_boxes.iter().enumerate() {
            b.validate().map_err(|e| err("candidate_boxes", format!("[{i}] {e}")))?;
        }
        for (i, b) in self.gold_boxes.iter().enumerate() {
            b.validate().map_err(|e| err("gold_boxes", format!("[{i}] {e}")))?;
        }
        if self.region_feats.nrows() != k {
            return Err(err(
                "region_feats",
                format!("{} rows for {k} candidates", self.region_feats.nrows()),
            ));
        }
        if self.phrase_feats.nrows() != t {
            return Err(err(
                "phrase_feats",
                format!("{} rows for {t} phrases", self.phrase_feats.nrows()),
            ));
        }
        if let Some(ctx) = &self.context_feats {
            if ctx.nrows() != t - 1 {
                return Err(err("context_feats", format!("{} rows for {t} phrases", ctx.nrows())));
            }
            if !ctx.iter().all(|v| v.is_finite()) {
                return Err(err("context_feats", "non-finite entry".into()));
            }
        }
        if !self.region_feats.iter().all(|v| v.is_finite()) {
            return Err(err("region_feats", "non-finite entry".into()));
        }
        if !self.phrase_feats.iter().all(|v| v.is_finite()) {
            return Err(err("phrase_feats", "non-finite entry".into()));
        }
        Ok(())
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Mean of the truncated geometric phrase count.
    pub mean_phrases: f64,
    pub max_phrases: usize,
    /// Jittered copies of each gold box among the candidates.
    pub copies_per_gold: usize,
    pub distractors: usize,
    /// Relative std-dev of the center shift and log-size jitter of copies.
    pub jitter: f64,
    /// Relative std-dev of the annotation error: gold boxes are perturbed
    /// copies of the objects the phrases and candidates are built from.
    pub annotation_jitter: f64,
    /// Strength of an objectness cue in the appearance features: how well a
    /// candidate fits its best-matching object (IoU), along a fixed direction.
    pub objectness: f64,
    /// Probability that consecutive golds obey the planted relation.
    pub relation_strength: f64,
    /// Std-dev of the Gaussian noise added to every feature.
    pub noise: f64,
    pub d_text: usize,
    /// Appearance part of the region features; spatial features are appended.
    pub d_appearance: usize,
    pub d_ctx: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            mean_phrases: 2.76,
            max_phrases: 8,
            copies_per_gold: 6,
            distractors: 20,
            jitter: 0.17,
            annotation_jitter: 0.0,
            objectness: 2.0,
            relation_strength: 0.9,
            noise: 0.25,
            d_text: 16,
            d_appearance: 8,
            d_ctx: 8,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn d_vis(&self) -> usize {
        self.d_appearance + SPATIAL_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.relation_strength) {
            return bad("relation_strength must lie in [0, 1]");
        }
        if self.max_phrases == 0 || !(self.mean_phrases >= 1.0) || self.mean_phrases > self.max_phrases as f64 {
            return bad("mean_phrases must lie in [1, max_phrases]");
        }
        if self.copies_per_gold == 0 && self.distractors == 0 {
            return bad("no candidates would be generated");
        }
        let knobs = [self.jitter, self.noise, self.annotation_jitter, self.objectness];
        if !knobs.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return bad("jitter, annotation_jitter, objectness and noise must be finite and nonnegative");
        }
        if self.d_text == 0 || self.d_ctx == 0 {
            return bad("feature dimensions must be positive");
        }
        Ok(())
    }
}

/// Which stream an instance belongs to. Streams never share RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

// Planted relations; index 0 is "unrelated".
const RELATIONS: usize = 5;
const REL_OFFSETS: [(f64, f64); 4] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
const REL_DISTANCE: (f64, f64) = (0.2, 0.3);
const BOX_SIDE: (f64, f64) = (0.1, 0.3);
const GEOM_DIM: usize = 8;
const PHRASE_GEOM_DIM: usize = 5;

/// Deterministic instance generator. Instance `i` of a split depends only on
/// `(seed, split, i)`.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    geometric_p: f64,
    appearance_map: Array2<f64>,
    phrase_map: Array2<f64>,
    context_map: Array2<f64>,
    objectness_dir: Array1<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn truncated_geometric_mean(p: f64, max: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for n in 1..=max {
        let w = (1.0 - p).powi(n as i32 - 1) * p;
        num += n as f64 * w;
        den += w;
    }
    num / den
}

/// Success probability whose geometric law truncated to `1..=max` has the
/// requested mean.
fn solve_geometric_p(mean: f64, max: usize) -> f64 {
    if mean <= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (1e-9, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_geometric_mean(mid, max) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn geometry_descriptor(b: &BBox) -> [f64; GEOM_DIM] {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    [cx, cy, w, h, cx * cx, cy * cy, w * h, 1.0]
}

fn spatial_features(b: &BBox) -> [f64; SPATIAL_DIM] {
    [b.x_min, b.y_min, b.x_max, b.y_max, b.area()]
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let appearance_map = gaussian_matrix(&mut rng, GEOM_DIM, cfg.d_appearance, 1.0);
        let phrase_map = gaussian_matrix(&mut rng, PHRASE_GEOM_DIM, cfg.d_text, 1.0);
        let context_map = gaussian_matrix(&mut rng, RELATIONS, cfg.d_ctx, 1.0);
        let objectness_dir = gaussian_matrix(&mut rng, 1, cfg.d_appearance, 1.0).row(0).to_owned();
        let geometric_p = solve_geometric_p(cfg.mean_phrases, cfg.max_phrases);
        Ok(Generator {
            cfg,
            geometric_p,
            appearance_map,
            phrase_map,
            context_map,
            objectness_dir,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn rng_for(&self, split: Split, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream((split.stream() << 40) | index);
        rng
    }

    fn sample_len(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut n = 1;
        while n < self.cfg.max_phrases && rng.gen::<f64>() >= self.geometric_p {
            n += 1;
        }
        n
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let w = rng.gen_range(BOX_SIDE.0..BOX_SIDE.1);
        let h = rng.gen_range(BOX_SIDE.0..BOX_SIDE.1);
        let cx = rng.gen_range(0.5 * w..1.0 - 0.5 * w);
        let cy = rng.gen_range(0.5 * h..1.0 - 0.5 * h);
        BBox::from_center(cx, cy, w, h).expect("positive size")
    }

    /// A gold box related to `prev` by one of the feasible planted offsets.
    fn related_box(rng: &mut ChaCha8Rng, prev: &BBox) -> Option<(usize, BBox)> {
        let w = rng.gen_range(BOX_SIDE.0..BOX_SIDE.1);
        let h = rng.gen_range(BOX_SIDE.0..BOX_SIDE.1);
        let dist = rng.gen_range(REL_DISTANCE.0..REL_DISTANCE.1);
        let (px, py) = prev.center();
        let feasible: Vec<(usize, f64, f64)> = REL_OFFSETS
            .iter()
            .enumerate()
            .map(|(r, (ox, oy))| (r + 1, px + ox * dist, py + oy * dist))
            .filter(|&(_, cx, cy)| {
                cx - 0.5 * w >= 0.0 && cx + 0.5 * w <= 1.0 && cy - 0.5 * h >= 0.0 && cy + 0.5 * h <= 1.0
            })
            .collect();
        if feasible.is_empty() {
            return None;
        }
        let (rel, cx, cy) = feasible[rng.gen_range(0..feasible.len())];
        Some((rel, BBox::from_center(cx, cy, w, h).expect("positive size")))
    }

    fn jittered(rng: &mut ChaCha8Rng, gold: &BBox, j: f64) -> BBox {
        if j == 0.0 {
            return *gold;
        }
        let (cx, cy) = gold.center();
        let (w, h) = (gold.width(), gold.height());
        let n = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
        let ncx = cx + j * w * n(rng);
        let ncy = cy + j * h * n(rng);
        let nw = w * (j * n(rng)).exp();
        let nh = h * (j * n(rng)).exp();
        BBox::from_center(ncx, ncy, nw, nh).expect("positive size")
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.cfg.noise == 0.0 {
            0.0
        } else {
            self.cfg.noise * rng.sample::<f64, _>(StandardNormal)
        }
    }

    pub fn instance(&self, split: Split, index: u64) -> Instance {
        let cfg = &self.cfg;
        let mut rng = self.rng_for(split, index);
        let t = self.sample_len(&mut rng);

        let mut gold_boxes = Vec::with_capacity(t);
        let mut relations = Vec::with_capacity(t.saturating_sub(1));
        gold_boxes.push(Self::random_box(&mut rng));
        for i in 1..t {
            let related = if rng.gen::<f64>() < cfg.relation_strength {
                Self::related_box(&mut rng, &gold_boxes[i - 1])
            } else {
                None
            };
            match related {
                Some((rel, b)) => {
                    relations.push(rel);
                    gold_boxes.push(b);
                }
                None => {
                    relations.push(0);
                    gold_boxes.push(Self::random_box(&mut rng));
                }
            }
        }

        let mut candidate_boxes = Vec::with_capacity(t * cfg.copies_per_gold + cfg.distractors);
        for g in &gold_boxes {
            for _ in 0..cfg.copies_per_gold {
                candidate_boxes.push(Self::jittered(&mut rng, g, cfg.jitter));
            }
        }
        for _ in 0..cfg.distractors {
            candidate_boxes.push(Self::random_box(&mut rng));
        }
        // Fisher-Yates so candidate order carries no information.
        for i in (1..candidate_boxes.len()).rev() {
            let j = rng.gen_range(0..=i);
            candidate_boxes.swap(i, j);
        }

        let k = candidate_boxes.len();
        let d_vis = cfg.d_vis();
        let mut region_feats = Array2::zeros((k, d_vis));
        for (row, b) in candidate_boxes.iter().enumerate() {
            let geom = Array1::from(geometry_descriptor(b).to_vec());
            let mut app = geom.dot(&self.appearance_map);
            if cfg.objectness > 0.0 {
                let fit = gold_boxes.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
                app.scaled_add(cfg.objectness * fit, &self.objectness_dir);
            }
            for c in 0..cfg.d_appearance {
                region_feats[[row, c]] = app[c] + self.noise(&mut rng);
            }
            for (c, v) in spatial_features(b).iter().enumerate() {
                region_feats[[row, cfg.d_appearance + c]] = *v;
            }
        }

        let mut phrase_feats = Array2::zeros((t, cfg.d_text));
        for (row, g) in gold_boxes.iter().enumerate() {
            let (cx, cy) = g.center();
            let geom = Array1::from(vec![cx, cy, g.width(), g.height(), 1.0]);
            let p = geom.dot(&self.phrase_map);
            for c in 0..cfg.d_text {
                phrase_feats[[row, c]] = p[c] + self.noise(&mut rng);
            }
        }

        let mut context_feats = Array2::zeros((t - 1, cfg.d_ctx));
        for (row, &rel) in relations.iter().enumerate() {
            for c in 0..cfg.d_ctx {
                context_feats[[row, c]] = self.context_map[[rel, c]] + self.noise(&mut rng);
            }
        }

        // Everything above is built from the objects; the labels see them
        // through annotation error.
        if cfg.annotation_jitter > 0.0 {
            for g in gold_boxes.iter_mut() {
                *g = Self::jittered(&mut rng, g, cfg.annotation_jitter);
            }
        }

        Instance {
            id: format!("{}-{index:06}", split.name()),
            candidate_boxes,
            region_feats,
            phrase_feats,
            context_feats: Some(context_feats),
            gold_boxes,
        }
    }

    pub fn split(&self, split: Split, count: usize) -> Vec<Instance> {
        (0..count as u64).map(|i| self.instance(split, i)).collect()
    }
}

/// Convenience wrapper: one instance of the training stream.
pub fn generate_instance(cfg: &GeneratorConfig, index: u64) -> Result<Instance> {
    Ok(Generator::new(cfg.clone())?.instance(Split::Train, index))
}

/// Per-phrase soft targets and hard labels (best IoU, lowest index on ties).
pub fn build_targets(inst: &Instance, rule: &TargetRule) -> Result<(SoftTargets, Vec<usize>)> {
    let t = inst.num_phrases();
    let k = inst.num_candidates();
    let mut q = Array2::zeros((t, k));
    let mut hard = Vec::with_capacity(t);
    for (row, gold) in inst.gold_boxes.iter().enumerate() {
        let ious: Vec<f64> = inst.candidate_boxes.iter().map(|c| iou(c, gold)).collect();
        let dist = targets_from_overlaps(&ious, rule).ok_or_else(|| {
            Error::Config(format!(
                "instance {}: phrase {row} has no candidate above the IoU threshold",
                inst.id
            ))
        })?;
        q.row_mut(row).assign(&Array1::from(dist));
        hard.push(best_overlap(&inst.candidate_boxes, gold).expect("k >= 1").0);
    }
    Ok((SoftTargets::new(q)?, hard))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    t: usize,
    k: usize,
    candidate_boxes: Vec<[f64; 4]>,
    region_feats: Vec<Vec<f64>>,
    phrase_feats: Vec<Vec<f64>>,
    context_feats: Option<Vec<Vec<f64>>>,
    /// Context width, needed to restore an empty context matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_ctx: Option<usize>,
    gold_boxes: Vec<[f64; 4]>,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn matrix(id: &str, field: &str, rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let n = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Schema(format!("instance {id}: {field}: ragged rows")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, width), flat)
        .map_err(|e| Error::Schema(format!("instance {id}: {field}: {e}")))
}

fn to_box(b: [f64; 4]) -> BBox {
    BBox {
        x_min: b[0],
        y_min: b[1],
        x_max: b[2],
        y_max: b[3],
    }
}

fn from_box(b: &BBox) -> [f64; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

impl From<&Instance> for Record {
    fn from(inst: &Instance) -> Self {
        Record {
            id: inst.id.clone(),
            t: inst.num_phrases(),
            k: inst.num_candidates(),
            candidate_boxes: inst.candidate_boxes.iter().map(from_box).collect(),
            region_feats: rows(&inst.region_feats),
            phrase_feats: rows(&inst.phrase_feats),
            context_feats: inst.context_feats.as_ref().map(rows),
            d_ctx: inst.context_feats.as_ref().filter(|c| c.nrows() == 0).map(|c| c.ncols()),
            gold_boxes: inst.gold_boxes.iter().map(from_box).collect(),
        }
    }
}

impl Record {
    fn into_instance(self) -> Result<Instance> {
        let id = self.id;
        let inst = Instance {
            region_feats: matrix(&id, "region_feats", self.region_feats)?,
            phrase_feats: matrix(&id, "phrase_feats", self.phrase_feats)?,
            context_feats: self
                .context_feats
                .map(|c| match (c.is_empty(), self.d_ctx) {
                    (true, Some(d)) => Ok(Array2::zeros((0, d))),
                    _ => matrix(&id, "context_feats", c),
                })
                .transpose()?,
            candidate_boxes: self.candidate_boxes.into_iter().map(to_box).collect(),
            gold_boxes: self.gold_boxes.into_iter().map(to_box).collect(),
            id,
        };
        if inst.num_phrases() != self.t {
            return Err(Error::Schema(format!(
                "instance {}: t: declared {} but {} gold boxes",
                inst.id,
                self.t,
                inst.num_phrases()
            )));
        }
        if inst.num_candidates() != self.k {
            return Err(Error::Schema(format!(
                "instance {}: k: declared {} but {} candidates",
                inst.id,
                self.k,
                inst.num_candidates()
            )));
        }
        inst.validate()?;
        Ok(inst)
    }
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(at_path(path))?);
    let header = FileHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Schema(e.to_string()))?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut w, &Record::from(inst)).map_err(|e| Error::Schema(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let reader = BufReader::new(File::open(path).map_err(at_path(path))?);
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| Error::Schema(format!("{}:{lineno}: {e}", path.display()));
        if !header_seen {
            let h: FileHeader = serde_json::from_str(&line).map_err(|e| at(format!("bad header: {e}")))?;
            if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                return Err(at(format!(
                    "unsupported format {} v{} (expected {FORMAT_NAME} v{FORMAT_VERSION})",
                    h.format, h.version
                )));
            }
            header_seen = true;
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        out.push(rec.into_instance().map_err(|e| at(e.to_string()))?);
    }
    if !header_seen {
        return Err(Error::Schema(format!("{}: missing header line", path.display())));
    }
    Ok(out)
}
