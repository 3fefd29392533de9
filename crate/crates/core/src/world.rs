//! Synthetic multi-camera world generator and the embedding dump format.
//!
//! Each identity owns a latent prototype; a camera observes it through that
//! camera's affine style transform plus Gaussian noise. Identities appear as
//! temporally contiguous tracks on each camera's timeline and may re-enter
//! the same camera later, which is exactly the hazard the miner's
//! one-negative-per-fragment rule exists for.
//!
//! Target-train person ids are carried but flagged hidden: every read of a
//! hidden label bumps a global counter, so unsupervised runs can prove they
//! never touched ground truth.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::{CameraIndexer, Domain};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

static HIDDEN_LABEL_READS: AtomicU64 = AtomicU64::new(0);

/// Total hidden-label reads since process start. Compare before/after a
/// training run to prove label hygiene.
pub fn hidden_label_reads() -> u64 {
    HIDDEN_LABEL_READS.load(Ordering::Relaxed)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum PersonLabel {
    Visible(i64),
    Hidden(i64),
}

/// One observation: feature vector, domain, camera, temporal position and a
/// (possibly hidden) person identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub domain: Domain,
    pub camera_id: usize,
    pub frame_index: u64,
    label: PersonLabel,
}

impl Sample {
    pub fn new(
        feature: Vec<f64>,
        domain: Domain,
        camera_id: usize,
        frame_index: u64,
        person_id: i64,
        hidden: bool,
    ) -> Self {
        Sample {
            feature,
            domain,
            camera_id,
            frame_index,
            label: if hidden {
                PersonLabel::Hidden(person_id)
            } else {
                PersonLabel::Visible(person_id)
            },
        }
    }

    /// Ground-truth identity. Reading a hidden label is recorded.
    pub fn person_id(&self) -> i64 {
        match self.label {
            PersonLabel::Visible(v) => v,
            PersonLabel::Hidden(v) => {
                HIDDEN_LABEL_READS.fetch_add(1, Ordering::Relaxed);
                v
            }
        }
    }

    pub fn is_hidden(&self) -> bool {
        matches!(self.label, PersonLabel::Hidden(_))
    }

    /// Semi-supervised mode: make the label readable without counting.
    pub fn reveal(&mut self) {
        if let PersonLabel::Hidden(v) = self.label {
            self.label = PersonLabel::Visible(v);
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LabelVisibility {
    Visible,
    Hidden,
}

impl LabelVisibility {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(LabelVisibility::Visible),
            "hidden" => Ok(LabelVisibility::Hidden),
            other => Err(Error::Data(format!(
                "unknown label visibility `{other}` (expected visible|hidden)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelVisibility::Visible => "visible",
            LabelVisibility::Hidden => "hidden",
        }
    }
}

/// Knobs of the synthetic world.
///
/// `style_*` scale the random part of each camera's affine map, `offset_*`
/// scale its translation; the `within` knobs vary per camera while the
/// `cross` knobs are shared per domain, so the two discrepancy regimes can
/// be dialed independently.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub cameras_source: usize,
    pub cameras_target: usize,
    pub identities: usize,
    pub eval_identities: usize,
    pub feature_dim: usize,
    pub style_within: f64,
    pub style_cross: f64,
    pub offset_within: f64,
    pub offset_cross: f64,
    pub sigma: f64,
    pub track_min: usize,
    pub track_max: usize,
    pub reappear_prob: f64,
    pub appearance_prob: f64,
    pub query_fraction: f64,
    pub target_labels: LabelVisibility,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            cameras_source: 4,
            cameras_target: 4,
            identities: 32,
            eval_identities: 16,
            feature_dim: 16,
            style_within: 0.4,
            style_cross: 0.6,
            offset_within: 0.6,
            offset_cross: 1.0,
            sigma: 0.05,
            track_min: 3,
            track_max: 6,
            reappear_prob: 0.15,
            appearance_prob: 1.0,
            query_fraction: 0.3,
            target_labels: LabelVisibility::Hidden,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras_source < 1 || self.cameras_target < 1 {
            return Err(Error::InvalidConfig("camera counts must be >= 1".into()));
        }
        if self.identities < 1 {
            return Err(Error::InvalidConfig("identities must be >= 1".into()));
        }
        if self.feature_dim < 1 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.track_min < 1 || self.track_min > self.track_max {
            return Err(Error::InvalidConfig(format!(
                "track length range [{}, {}] invalid",
                self.track_min, self.track_max
            )));
        }
        for (name, v) in [
            ("reappear_prob", self.reappear_prob),
            ("appearance_prob", self.appearance_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be non-negative".into()));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "query_fraction = {} must lie strictly inside (0, 1)",
                self.query_fraction
            )));
        }
        Ok(())
    }

    pub fn indexer(&self) -> Result<CameraIndexer> {
        CameraIndexer::new(self.cameras_source, self.cameras_target)
    }
}

/// Splits of one generated or loaded world.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub indexer: CameraIndexer,
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_query: Vec<Sample>,
    pub target_gallery: Vec<Sample>,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Semi-supervised mode: expose target-train identities.
    pub fn reveal_target_labels(&mut self) {
        for s in &mut self.target_train {
            s.reveal();
        }
    }

    /// Indices of `samples` from `camera_id`, sorted by frame index.
    pub fn camera_timeline(samples: &[Sample], camera_id: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.camera_id == camera_id)
            .map(|(i, _)| i)
            .collect();
        idx.sort_by_key(|&i| samples[i].frame_index);
        idx
    }
}

/// Per-camera affine style: `x = matrix * z + offset (+ noise)`.
struct CameraStyle {
    matrix: Vec<f64>, // feature_dim x feature_dim, row-major
    offset: Vec<f64>,
}

impl CameraStyle {
    fn observe(&self, z: &[f64], out: &mut Vec<f64>) {
        let f = z.len();
        out.clear();
        for r in 0..f {
            let row = &self.matrix[r * f..(r + 1) * f];
            let mut v = self.offset[r];
            for c in 0..f {
                v += row[c] * z[c];
            }
            out.push(v);
        }
    }
}

fn camera_styles(config: &WorldConfig, seed: u64) -> Vec<CameraStyle> {
    let f = config.feature_dim;
    let normal = StandardNormal;
    let scale = 1.0 / (f as f64).sqrt();

    // Shared per-domain components.
    let mut domain_parts = Vec::new();
    for d in 0..2u64 {
        let mut rng = rng::stream_indexed(seed, "world-domain", d);
        let mat: Vec<f64> = (0..f * f)
            .map(|_| {
                let z: f64 = normal.sample(&mut rng);
                z * scale * config.style_cross
            })
            .collect();
        let off: Vec<f64> = (0..f)
            .map(|_| {
                let z: f64 = normal.sample(&mut rng);
                z * config.offset_cross
            })
            .collect();
        domain_parts.push((mat, off));
    }

    let indexer = config.indexer().expect("validated");
    (0..indexer.total())
        .map(|g| {
            let domain = indexer.domain_of(g).expect("in range");
            let (dmat, doff) = &domain_parts[match domain {
                Domain::Source => 0,
                Domain::Target => 1,
            }];
            let mut rng = rng::stream_indexed(seed, "world-camera", g as u64);
            let mut matrix = vec![0.0; f * f];
            for r in 0..f {
                matrix[r * f + r] = 1.0;
            }
            for (i, m) in matrix.iter_mut().enumerate() {
                let z: f64 = normal.sample(&mut rng);
                *m += z * scale * config.style_within + dmat[i];
            }
            let offset: Vec<f64> = (0..f)
                .map(|i| {
                    let z: f64 = normal.sample(&mut rng);
                    z * config.offset_within + doff[i]
                })
                .collect();
            CameraStyle { matrix, offset }
        })
        .collect()
}

struct Track {
    person_id: i64,
    features: Vec<Vec<f64>>,
}

/// Deterministic world generation: same `(config, seed)` gives a
/// bit-identical dataset.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let indexer = config.indexer()?;
    let styles = camera_styles(config, seed);
    let f = config.feature_dim;
    let normal = StandardNormal;

    // Identity blocks: source train, target train (disjoint ids), then
    // held-out target identities for evaluation.
    let n_train = config.identities as i64;
    let eval_base = 2 * n_train;

    // tracks[global_camera] in deterministic generation order.
    let mut tracks: Vec<Vec<Track>> = (0..indexer.total()).map(|_| Vec::new()).collect();

    let mut gen_identity = |person_id: i64, domain: Domain, force_appearance: bool| {
        let mut id_rng = rng::stream_indexed(seed, "world-identity", person_id as u64);
        let prototype: Vec<f64> = (0..f).map(|_| normal.sample(&mut id_rng)).collect();
        let mut observed = Vec::new();
        for g in indexer.range_of(domain) {
            let appears =
                force_appearance || config.appearance_prob >= 1.0 || id_rng.random_bool(config.appearance_prob);
            // Keep the stream aligned whether or not the identity appears.
            let mut n_tracks = if id_rng.random_bool(config.reappear_prob.min(1.0).max(0.0)) {
                2
            } else {
                1
            };
            if !appears {
                n_tracks = 0;
            }
            for _ in 0..n_tracks {
                let len = id_rng.random_range(config.track_min..=config.track_max);
                let mut features = Vec::with_capacity(len);
                for _ in 0..len {
                    styles[g].observe(&prototype, &mut observed);
                    if config.sigma > 0.0 {
                        for v in observed.iter_mut() {
                            let z: f64 = normal.sample(&mut id_rng);
                            *v += config.sigma * z;
                        }
                    }
                    features.push(observed.clone());
                }
                tracks[g].push(Track {
                    person_id,
                    features,
                });
            }
        }
    };

    for i in 0..n_train {
        gen_identity(i, Domain::Source, false);
    }
    for i in 0..n_train {
        gen_identity(n_train + i, Domain::Target, false);
    }
    for i in 0..config.eval_identities as i64 {
        gen_identity(eval_base + i, Domain::Target, true);
    }

    // Lay each camera's tracks onto its timeline in shuffled order.
    let mut source_train = Vec::new();
    let mut target_train = Vec::new();
    let mut eval_samples = Vec::new();
    let mut warnings = Vec::new();

    for g in 0..indexer.total() {
        let domain = indexer.domain_of(g)?;
        let cam_tracks = std::mem::take(&mut tracks[g]);
        let mut order: Vec<usize> = (0..cam_tracks.len()).collect();
        let mut layout_rng = rng::stream_indexed(seed, "world-layout", g as u64);
        // Fisher-Yates over track order.
        for i in (1..order.len()).rev() {
            let j = layout_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let camera_id = g - indexer.range_of(domain).start;
        let mut frame: u64 = 0;
        let mut train_count = 0usize;
        for &t in &order {
            let track = &cam_tracks[t];
            let is_eval = track.person_id >= eval_base;
            for feat in &track.features {
                let hidden = domain == Domain::Target
                    && !is_eval
                    && config.target_labels == LabelVisibility::Hidden;
                let sample = Sample::new(feat.clone(), domain, camera_id, frame, track.person_id, hidden);
                frame += 1;
                if is_eval {
                    eval_samples.push(sample);
                } else {
                    train_count += 1;
                    match domain {
                        Domain::Source => source_train.push(sample),
                        Domain::Target => target_train.push(sample),
                    }
                }
            }
        }
        // Smallest fragment batch the miner accepts is p = q = 2.
        if train_count < 4 {
            warnings.push(format!(
                "{} camera {camera_id} holds only {train_count} training samples; fragment batches need at least 4",
                domain.as_str()
            ));
        }
    }

    let (target_query, target_gallery, split_warnings) =
        split_query_gallery(&eval_samples, config.query_fraction, seed ^ 0x51A9)?;
    warnings.extend(split_warnings);

    Ok(Dataset {
        indexer,
        source_train,
        target_train,
        target_query,
        target_gallery,
        warnings,
    })
}

/// Per identity, at least one sample lands in each side; identities with a
/// single sample stay gallery-only with a warning.
pub fn split_query_gallery(
    samples: &[Sample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<String>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "query fraction {fraction} must lie strictly inside (0, 1)"
        )));
    }
    let mut by_identity: BTreeMap<i64, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_identity.entry(s.person_id()).or_default().push(s);
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut warnings = Vec::new();
    for (pid, group) in by_identity {
        if group.len() < 2 {
            warnings.push(format!(
                "identity {pid} has a single sample; kept in gallery, excluded from query"
            ));
            gallery.extend(group.into_iter().cloned());
            continue;
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        let mut rng = rng::stream_indexed(seed, "query-split", pid as u64);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_q = ((fraction * group.len() as f64).round() as usize).clamp(1, group.len() - 1);
        for (pos, &idx) in order.iter().enumerate() {
            if pos < n_q {
                query.push(group[idx].clone());
            } else {
                gallery.push(group[idx].clone());
            }
        }
    }
    Ok((query, gallery, warnings))
}

// ---- embedding dump format -------------------------------------------------
//
// UTF-8 text: header `#dim=<F> labels=<visible|hidden>`, then one row per
// sample: `domain,camera_id,frame_index,person_id,v1,...,vF`.
// Hidden files carry person_id -1.

/// Parsed embedding dump.
#[derive(Debug)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub visibility: LabelVisibility,
    pub samples: Vec<Sample>,
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::ParseLine {
            path: display.clone(),
            line: 1,
            msg: "empty file".into(),
        })?
        .1
        .map_err(|e| Error::io(&display, e))
        .map(|h| (0, h))?;
    let header = header.trim();
    let parse_header = || -> Option<(usize, LabelVisibility)> {
        let rest = header.strip_prefix("#dim=")?;
        let (dim_str, labels_part) = rest.split_once(' ')?;
        let dim = dim_str.parse::<usize>().ok()?;
        let vis = LabelVisibility::parse(labels_part.strip_prefix("labels=")?).ok()?;
        Some((dim, vis))
    };
    let (dim, visibility) = parse_header().ok_or_else(|| Error::ParseLine {
        path: display.clone(),
        line: 1,
        msg: format!("bad header `{header}`; expected `#dim=<F> labels=<visible|hidden>`"),
    })?;

    let mut samples = Vec::new();
    let mut seen: HashSet<(Domain, usize, u64)> = HashSet::new();
    for (lineno, line) in lines {
        let lineno = lineno + 1; // 1-based, header was line 1
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ParseLine {
            path: display.clone(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 + dim {
            return Err(err(format!(
                "expected {} comma-separated fields, got {}",
                4 + dim,
                fields.len()
            )));
        }
        let domain = Domain::parse(fields[0]).map_err(|e| err(e.to_string()))?;
        let camera_id: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("bad camera_id `{}`", fields[1])))?;
        let frame_index: u64 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad frame_index `{}`", fields[2])))?;
        let person_id: i64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad person_id `{}`", fields[3])))?;
        let mut feature = Vec::with_capacity(dim);
        for raw in &fields[4..] {
            let v: f64 = raw
                .parse()
                .map_err(|_| err(format!("non-numeric feature value `{raw}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite feature value `{raw}`")));
            }
            feature.push(v);
        }
        if !seen.insert((domain, camera_id, frame_index)) {
            return Err(err(format!(
                "duplicate (camera_id, frame_index) pair ({camera_id}, {frame_index}) within {} domain",
                domain.as_str()
            )));
        }
        samples.push(Sample::new(
            feature,
            domain,
            camera_id,
            frame_index,
            person_id,
            visibility == LabelVisibility::Hidden,
        ));
    }
    Ok(EmbeddingFile {
        dim,
        visibility,
        samples,
    })
}

/// Write samples (or externally computed `features` rows aligned with them)
/// in the dump format. Exporting hidden samples as `visible` is refused;
/// hidden exports write person_id -1 without reading the stored label.
pub fn save_embeddings(
    path: &Path,
    samples: &[Sample],
    features: Option<&Tensor>,
    visibility: LabelVisibility,
) -> Result<()> {
    let display = path.display().to_string();
    let dim = match features {
        Some(m) => {
            if m.rows() != samples.len() {
                return Err(Error::ShapeMismatch {
                    op: "save_embeddings",
                    lhs: m.shape().to_vec(),
                    rhs: vec![samples.len()],
                });
            }
            m.cols()
        }
        None => samples.first().map(|s| s.feature.len()).unwrap_or(0),
    };
    let mut out = String::new();
    out.push_str(&format!("#dim={dim} labels={}\n", visibility.as_str()));
    for (i, s) in samples.iter().enumerate() {
        let row: &[f64] = match features {
            Some(m) => m.row(i),
            None => {
                if s.feature.len() != dim {
                    return Err(Error::Data(format!(
                        "sample {i} has dimension {}, expected {dim}",
                        s.feature.len()
                    )));
                }
                &s.feature
            }
        };
        let pid = match visibility {
            LabelVisibility::Hidden => -1,
            LabelVisibility::Visible => {
                if s.is_hidden() {
                    return Err(Error::Data(
                        "refusing to export hidden labels as visible".into(),
                    ));
                }
                s.person_id()
            }
        };
        out.push_str(&format!(
            "{},{},{},{}",
            s.domain.as_str(),
            s.camera_id,
            s.frame_index,
            pid
        ));
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(&display, e))
}

/// Load the four split files written by the data generator.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let split = |name: &str| -> Result<Vec<Sample>> {
        Ok(load_embeddings(&dir.join(name))?.samples)
    };
    let source_train = split("source_train.csv")?;
    let target_train = split("target_train.csv")?;
    let target_query = split("target_query.csv")?;
    let target_gallery = split("target_gallery.csv")?;

    let max_cam = |samples: &[Sample], domain: Domain| -> usize {
        samples
            .iter()
            .filter(|s| s.domain == domain)
            .map(|s| s.camera_id + 1)
            .max()
            .unwrap_or(0)
    };
    let c_s = max_cam(&source_train, Domain::Source);
    let mut c_t = 0usize;
    for split in [&target_train, &target_query, &target_gallery] {
        c_t = c_t.max(max_cam(split, Domain::Target));
    }
    if c_s == 0 || c_t == 0 {
        return Err(Error::Data(
            "dataset needs at least one source and one target camera".into(),
        ));
    }
    Ok(Dataset {
        indexer: CameraIndexer::new(c_s, c_t)?,
        source_train,
        target_train,
        target_query,
        target_gallery,
        warnings: Vec::new(),
    })
}
