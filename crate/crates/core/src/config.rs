//! Flat `key = value` config files for the world generator and the trainer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::SchemeKind;
use crate::trainer::{TrainConfig, TripletMode};
use crate::world::{LabelVisibility, WorldConfig};

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, path: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ParseLine {
            path: path.to_string(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{raw}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur.push((prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Closest valid key within edit distance 2.
pub fn suggest(key: &str, valid: &[&str]) -> Option<String> {
    valid
        .iter()
        .map(|v| (levenshtein(key, v), *v))
        .min()
        .filter(|(d, _)| *d <= 2)
        .map(|(_, v)| v.to_string())
}

fn unknown_key(key: &str, valid: &[&str]) -> Error {
    Error::UnknownKey {
        key: key.to_string(),
        suggestion: suggest(key, valid),
        valid: valid.join(", "),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("key `{key}`: cannot parse `{value}`")))
}

const WORLD_KEYS: &[&str] = &[
    "cameras_source",
    "cameras_target",
    "identities",
    "eval_identities",
    "feature_dim",
    "style_within",
    "style_cross",
    "offset_within",
    "offset_cross",
    "sigma",
    "track_min",
    "track_max",
    "reappear_prob",
    "appearance_prob",
    "query_fraction",
    "target_labels",
];

/// World config from the documented keys; unknown keys name the closest one.
pub fn world_config_from_text(text: &str, path: &str) -> Result<WorldConfig> {
    let mut cfg = WorldConfig::default();
    for (k, v, _line) in parse_kv(text, path)? {
        match k.as_str() {
            "cameras_source" => cfg.cameras_source = parse_num(&k, &v)?,
            "cameras_target" => cfg.cameras_target = parse_num(&k, &v)?,
            "identities" => cfg.identities = parse_num(&k, &v)?,
            "eval_identities" => cfg.eval_identities = parse_num(&k, &v)?,
            "feature_dim" => cfg.feature_dim = parse_num(&k, &v)?,
            "style_within" => cfg.style_within = parse_num(&k, &v)?,
            "style_cross" => cfg.style_cross = parse_num(&k, &v)?,
            "offset_within" => cfg.offset_within = parse_num(&k, &v)?,
            "offset_cross" => cfg.offset_cross = parse_num(&k, &v)?,
            "sigma" => cfg.sigma = parse_num(&k, &v)?,
            "track_min" => cfg.track_min = parse_num(&k, &v)?,
            "track_max" => cfg.track_max = parse_num(&k, &v)?,
            "reappear_prob" => cfg.reappear_prob = parse_num(&k, &v)?,
            "appearance_prob" => cfg.appearance_prob = parse_num(&k, &v)?,
            "query_fraction" => cfg.query_fraction = parse_num(&k, &v)?,
            "target_labels" => cfg.target_labels = LabelVisibility::parse(&v)?,
            _ => return Err(unknown_key(&k, WORLD_KEYS)),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "iters_per_epoch",
    "batch_per_domain",
    "p",
    "q",
    "k",
    "k_n",
    "margin",
    "lambda1",
    "lambda2",
    "lr_backbone",
    "lr_new",
    "momentum",
    "weight_decay",
    "lr_decay_factor",
    "grl_lambda",
    "scheme",
    "triplets",
    "rerank_k1",
    "rerank_k2",
    "rerank_lambda",
    "backbone_hidden",
    "embed_dim",
    "disc_hidden",
    "eval_every",
    "offline_triplets_per_batch",
    "loss_on_reranked",
    "seed",
];

/// Train config from the documented keys.
pub fn train_config_from_text(text: &str, path: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v, _line) in parse_kv(text, path)? {
        match k.as_str() {
            "epochs" => cfg.epochs = parse_num(&k, &v)?,
            "iters_per_epoch" => cfg.iters_per_epoch = parse_num(&k, &v)?,
            "batch_per_domain" => cfg.batch_per_domain = parse_num(&k, &v)?,
            "p" => cfg.p = parse_num(&k, &v)?,
            "q" => cfg.q = parse_num(&k, &v)?,
            "k" => cfg.k = parse_num(&k, &v)?,
            "k_n" => cfg.k_n = parse_num(&k, &v)?,
            "margin" => cfg.margin = parse_num(&k, &v)?,
            "lambda1" => cfg.lambda1 = parse_num(&k, &v)?,
            "lambda2" => cfg.lambda2 = parse_num(&k, &v)?,
            "lr_backbone" => cfg.lr_backbone = parse_num(&k, &v)?,
            "lr_new" => cfg.lr_new = parse_num(&k, &v)?,
            "momentum" => cfg.momentum = parse_num(&k, &v)?,
            "weight_decay" => cfg.weight_decay = parse_num(&k, &v)?,
            "lr_decay_factor" => cfg.lr_decay_factor = parse_num(&k, &v)?,
            "grl_lambda" => cfg.grl_lambda = parse_num(&k, &v)?,
            "scheme" => cfg.scheme = SchemeKind::parse(&v)?,
            "triplets" => cfg.triplets = TripletMode::parse(&v)?,
            "rerank_k1" => cfg.rerank.k1 = parse_num(&k, &v)?,
            "rerank_k2" => cfg.rerank.k2 = parse_num(&k, &v)?,
            "rerank_lambda" => cfg.rerank.lambda = parse_num(&k, &v)?,
            "backbone_hidden" => {
                cfg.backbone_hidden = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(&k, s.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "embed_dim" => cfg.embed_dim = parse_num(&k, &v)?,
            "disc_hidden" => cfg.disc_hidden = parse_num(&k, &v)?,
            "eval_every" => cfg.eval_every = parse_num(&k, &v)?,
            "offline_triplets_per_batch" => {
                cfg.offline_triplets_per_batch = parse_num(&k, &v)?
            }
            "loss_on_reranked" => {
                cfg.loss_on_reranked = match v.as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "key `loss_on_reranked`: expected true|false, got `{other}`"
                        )))
                    }
                }
            }
            "seed" => cfg.seed = parse_num(&k, &v)?,
            _ => return Err(unknown_key(&k, TRAIN_KEYS)),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn world_config_from_file(path: &Path) -> Result<WorldConfig> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    world_config_from_text(&text, &display)
}

pub fn train_config_from_file(path: &Path) -> Result<TrainConfig> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    train_config_from_text(&text, &display)
}
