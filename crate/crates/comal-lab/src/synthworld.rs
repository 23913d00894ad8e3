//! Deterministic synthetic street-scene generator.
//!
//! Scenes are horizontal bands (sky / buildings / sidewalk / road) with
//! vehicles on the road, pedestrians on the sidewalk, and poles carrying
//! signs rising from the sidewalk. Band boundaries and 2x2-block objects are
//! aligned to even coordinates and poles sit on even columns, so stride-2
//! subsampling (the grid the flow and the structure network operate on)
//! preserves every structural rule.
//!
//! Source and target share label geometry per seed; only the rendering
//! differs (hue rotation, brightness offset, noise), so the appearance gap
//! is isolated from any label-distribution shift.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ndgrad::io;
use crate::rng::DetRng;
use crate::{Error, Real, Result, Tensor};

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "sky",
    "building",
    "road",
    "sidewalk",
    "vehicle",
    "pedestrian",
    "pole",
    "sign",
];

pub const SKY: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const SIDEWALK: u8 = 3;
pub const VEHICLE: u8 = 4;
pub const PEDESTRIAN: u8 = 5;
pub const POLE: u8 = 6;
pub const SIGN: u8 = 7;

/// The three rarest classes under the default configuration.
pub const TAIL_CLASSES: [usize; 3] = [PEDESTRIAN as usize, POLE as usize, SIGN as usize];

/// Hard class indices on an H x W grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<LabelMap> {
        if labels.len() != height * width {
            return Err(Error::InvalidArg(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArg(format!(
                "label {bad} out of range (classes: {NUM_CLASSES})"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> LabelMap {
        LabelMap::new(height, width, vec![class; height * width]).unwrap()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, class: u8) {
        self.labels[r * self.width + c] = class;
    }

    pub fn raw(&self) -> &[u8] {
        &self.labels
    }

    /// Per-pixel class indices as a flat vec of usize.
    pub fn indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Stride-2 subsample (even rows and columns).
    pub fn subsample2(&self) -> LabelMap {
        let h = self.height / 2;
        let w = self.width / 2;
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.get(2 * r, 2 * c));
            }
        }
        LabelMap::new(h, w, out).unwrap()
    }

    /// Encode as an (h, w) tensor for serialization.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<Real> = self.labels.iter().map(|&l| l as Real).collect();
        Tensor::from_vec(data, &[self.height, self.width]).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        if t.rank() != 2 {
            return Err(Error::InvalidArg(format!(
                "label tensor must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                let l = v as i64;
                if v.fract() != 0.0 || l < 0 || l as usize >= NUM_CLASSES {
                    Err(Error::InvalidArg(format!("bad label value {v}")))
                } else {
                    Ok(l as u8)
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelMap::new(t.shape()[0], t.shape()[1], labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Domain> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Parse(format!("unknown domain {other:?}"))),
        }
    }
}

/// Rendering parameters for one domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderParams {
    /// Per-class base colors, RGB in [0,1].
    pub base_colors: Vec<[Real; 3]>,
    /// Rotation around the gray axis, radians.
    pub hue_rot: Real,
    pub brightness: Real,
    pub noise_sigma: Real,
}

fn default_colors() -> Vec<[Real; 3]> {
    vec![
        [0.53, 0.81, 0.92], // sky
        [0.55, 0.35, 0.28], // building
        [0.26, 0.26, 0.30], // road
        [0.66, 0.63, 0.55], // sidewalk
        [0.82, 0.12, 0.12], // vehicle
        [0.95, 0.62, 0.20], // pedestrian
        [0.46, 0.46, 0.46], // pole
        [0.93, 0.86, 0.12], // sign
    ]
}

impl RenderParams {
    pub fn source_default() -> RenderParams {
        RenderParams {
            base_colors: default_colors(),
            hue_rot: 0.0,
            brightness: 0.0,
            noise_sigma: 0.02,
        }
    }

    pub fn target_default() -> RenderParams {
        RenderParams {
            base_colors: default_colors(),
            hue_rot: 1.4,
            brightness: 0.10,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Tail intensity; scales the expected pixel counts of
    /// pedestrian/pole/sign.
    pub tail_lambda: Real,
    pub source: RenderParams,
    pub target: RenderParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 32,
            width: 32,
            tail_lambda: 1.0,
            source: RenderParams::source_default(),
            target: RenderParams::target_default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArg(format!(
                "world grid must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::InvalidArg(
                "world grid extents must be even (layout is built on the half grid)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tail_lambda) {
            return Err(Error::InvalidArg(format!(
                "tail lambda must be in [0,1], got {}",
                self.tail_lambda
            )));
        }
        Ok(())
    }

    /// Stable hash of the geometry-relevant configuration.
    pub fn hash(&self) -> u64 {
        let repr = format!(
            "{}x{} lambda={:.6} src=({:.4},{:.4},{:.4}) tgt=({:.4},{:.4},{:.4})",
            self.height,
            self.width,
            self.tail_lambda,
            self.source.hue_rot,
            self.source.brightness,
            self.source.noise_sigma,
            self.target.hue_rot,
            self.target.brightness,
            self.target.noise_sigma,
        );
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in repr.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct DomainSample {
    pub image: Tensor, // (h, w, 3)
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

/// Deterministic scene synthesis for one (seed, domain) pair. The label
/// geometry depends only on (seed, cfg); the domain affects rendering only.
pub fn generate(seed: u64, domain: Domain, cfg: &WorldConfig) -> Result<DomainSample> {
    cfg.validate()?;
    let labels = generate_labels(seed, cfg);
    let image = render(&labels, seed, domain, cfg);
    Ok(DomainSample {
        image,
        labels,
        domain,
        seed,
    })
}

fn generate_labels(seed: u64, cfg: &WorldConfig) -> LabelMap {
    let mut rng = DetRng::new(seed).derive_str("layout");
    let hl = cfg.height / 2;
    let wl = cfg.width / 2;

    // band boundaries on the half grid
    let sky_end = (hl / 4 + rng.below(3)).clamp(1, hl.saturating_sub(4).max(1));
    let side_rows = (hl / 8).max(1);
    let min_road_start = (sky_end + side_rows + 1).min(hl - 1);
    let road_start = (3 * hl / 4 + rng.below(2)).clamp(min_road_start, hl - 1);
    let side_start = road_start - side_rows.min(road_start - sky_end - 1).max(1);

    let mut half = LabelMap::filled(hl, wl, BUILDING);
    for r in 0..hl {
        let class = if r < sky_end {
            SKY
        } else if r < side_start {
            BUILDING
        } else if r < road_start {
            SIDEWALK
        } else {
            ROAD
        };
        for c in 0..wl {
            half.set(r, c, class);
        }
    }

    // vehicles: 1-2 blocks inside the road band, keeping the bottom row road
    let road_rows = hl - road_start;
    if road_rows >= 2 {
        let n_vehicles = 1 + rng.below(2);
        for _ in 0..n_vehicles {
            let vw = (2 + rng.below(2)).min(wl);
            let vh = (1 + rng.below(2)).min(road_rows - 1);
            let top = road_start + rng.below(road_rows - vh);
            let left = rng.below(wl - vw + 1);
            for r in top..top + vh {
                for c in left..left + vw {
                    half.set(r, c, VEHICLE);
                }
            }
        }
    }

    let mut used_cols = vec![false; wl];

    // pedestrians on the sidewalk band, expected count scaled by lambda
    let side_span = road_start - side_start;
    for _ in 0..3 {
        if rng.uniform() < cfg.tail_lambda * 0.9 && side_span >= 1 {
            let c = rng.below(wl);
            let r = side_start + rng.below(side_span);
            if !used_cols[c] {
                used_cols[c.saturating_sub(1)] = true;
                used_cols[c] = true;
                used_cols[(c + 1).min(wl - 1)] = true;
                half.set(r, c, PEDESTRIAN);
            }
        }
    }

    // upscale the half grid 2x; poles and signs are drawn at full resolution
    let mut full = LabelMap::filled(cfg.height, cfg.width, BUILDING);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            full.set(r, c, half.get(r / 2, c / 2));
        }
    }

    // poles: 1-wide full-resolution columns at even x, rooted in the top
    // half of the sidewalk band; most carry a 2x2 sign under their tip
    if side_span >= 2 && side_start > sky_end + 1 {
        for _ in 0..2 {
            if rng.uniform() >= cfg.tail_lambda * 0.95 {
                continue;
            }
            let c = 2 * rng.below(wl);
            if used_cols[c / 2] {
                continue;
            }
            // keep pole/sign structures separated on the half grid too
            let lo = (c / 2).saturating_sub(2);
            let hi = (c / 2 + 2).min(wl - 1);
            for col in lo..=hi {
                used_cols[col] = true;
            }
            // tip within the building band, leaving sign room below the sky
            let min_top = 2 * (sky_end + 1);
            let max_top = 2 * side_start - 2;
            if min_top >= max_top {
                continue;
            }
            let top = (max_top - 2 * rng.below(3)).max(min_top);
            let bottom = 2 * side_start + 1;
            for r in top..=bottom {
                full.set(r, c, POLE);
            }
            if rng.uniform() < 0.9 {
                let sr = top - 2;
                let sc = if c + 1 < cfg.width { c } else { c - 2 };
                for r in sr..sr + 2 {
                    for cc in sc..sc + 2 {
                        if full.get(r, cc) == BUILDING {
                            full.set(r, cc, SIGN);
                        }
                    }
                }
            }
        }
    }

    full
}

/// Rotate an RGB color around the gray axis by `angle` radians.
fn hue_rotate(rgb: [Real; 3], angle: Real) -> [Real; 3] {
    if angle == 0.0 {
        return rgb;
    }
    let (s, c) = (angle as f64).sin_cos();
    let (s, c) = (s as Real, c as Real);
    let third: Real = 1.0 / 3.0;
    let sq3: Real = (3.0 as Real).sqrt();
    let mut out = [0.0; 3];
    // Rodrigues rotation about the unit gray axis (1,1,1)/sqrt(3)
    let dot: Real = (rgb[0] + rgb[1] + rgb[2]) * third;
    let inv = 1.0 / sq3;
    let cross = [
        inv * (rgb[2] - rgb[1]),
        inv * (rgb[0] - rgb[2]),
        inv * (rgb[1] - rgb[0]),
    ];
    for i in 0..3 {
        out[i] = rgb[i] * c + cross[i] * s + dot * (1.0 - c);
    }
    out
}

fn render(labels: &LabelMap, seed: u64, domain: Domain, cfg: &WorldConfig) -> Tensor {
    let params = match domain {
        Domain::Source => &cfg.source,
        Domain::Target => &cfg.target,
    };
    let tag = match domain {
        Domain::Source => "render-source",
        Domain::Target => "render-target",
    };
    let mut rng = DetRng::new(seed).derive_str(tag);
    let (h, w) = (labels.height, labels.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let class = labels.get(r, c) as usize;
            let base = hue_rotate(params.base_colors[class], params.hue_rot);
            for ch in 0..3 {
                let v = base[ch] + params.brightness + params.noise_sigma * rng.normal();
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(data, &[h, w, 3]).unwrap()
}

/// A broken structural rule with a witness pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at ({}, {})", self.rule, self.row, self.col)
    }
}

/// Check every structural rule; empty iff the map is a well-formed scene.
/// Each rule contributes at most one violation (with its first witness).
pub fn validate_structure(labels: &LabelMap) -> Vec<Violation> {
    let (h, w) = (labels.height, labels.width);
    let mut out = Vec::new();
    let hit = |rule: &'static str, r: usize, c: usize, out: &mut Vec<Violation>| {
        if !out.iter().any(|v: &Violation| v.rule == rule) {
            out.push(Violation { rule, row: r, col: c });
        }
    };

    for c in 0..w {
        if labels.get(0, c) != SKY {
            hit("no sky band", 0, c, &mut out);
            break;
        }
    }
    for c in 0..w {
        if labels.get(h - 1, c) != ROAD {
            hit("no road band", h - 1, c, &mut out);
            break;
        }
    }

    'sky: for c in 0..w {
        let mut seen_other = false;
        for r in 0..h {
            let l = labels.get(r, c);
            if l == SKY {
                if seen_other {
                    hit("sky below horizon", r, c, &mut out);
                    break 'sky;
                }
            } else {
                seen_other = true;
            }
        }
    }

    'road: for c in 0..w {
        let mut in_road = false;
        for r in 0..h {
            let l = labels.get(r, c);
            if matches!(l, ROAD | VEHICLE) {
                in_road = true;
            } else if in_road {
                hit("road interrupted", r, c, &mut out);
                break 'road;
            }
        }
    }

    'bld: for c in 0..w {
        let mut seen_side = false;
        for r in 0..h {
            let l = labels.get(r, c);
            if matches!(l, SIDEWALK | PEDESTRIAN) {
                seen_side = true;
            } else if l == BUILDING && seen_side {
                hit("building below sidewalk", r, c, &mut out);
                break 'bld;
            }
        }
    }

    'border: for c in 0..w {
        for r in 0..h {
            if matches!(labels.get(r, c), ROAD | VEHICLE) {
                if r == 0 || !matches!(labels.get(r - 1, c), SIDEWALK | PEDESTRIAN | POLE) {
                    let wr = if r == 0 { 0 } else { r - 1 };
                    hit("road not bordered by sidewalk", wr, c, &mut out);
                    break 'border;
                }
                break;
            }
        }
    }

    'veh: for r in 0..h {
        for c in 0..w {
            if labels.get(r, c) == VEHICLE {
                let below_ok = (r + 1..h).all(|rr| matches!(labels.get(rr, c), ROAD | VEHICLE));
                if !below_ok || labels.get(h - 1, c) != ROAD {
                    hit("vehicle off road", r, c, &mut out);
                    break 'veh;
                }
            }
        }
    }

    'ped: for r in 0..h {
        for c in 0..w {
            if labels.get(r, c) == PEDESTRIAN
                && !component_touches(labels, r, c, PEDESTRIAN, &[SIDEWALK])
            {
                hit("pedestrian off sidewalk", r, c, &mut out);
                break 'ped;
            }
        }
    }

    'wide: for r in 0..h {
        for c in 0..w {
            if labels.get(r, c) == POLE {
                let side_pole = (c > 0 && labels.get(r, c - 1) == POLE)
                    || (c + 1 < w && labels.get(r, c + 1) == POLE);
                if side_pole {
                    hit("pole too wide", r, c, &mut out);
                    break 'wide;
                }
            }
        }
    }

    'root: for c in 0..w {
        let mut r = 0;
        while r < h {
            if labels.get(r, c) == POLE {
                let mut bottom = r;
                while bottom + 1 < h && labels.get(bottom + 1, c) == POLE {
                    bottom += 1;
                }
                if bottom + 1 >= h || labels.get(bottom + 1, c) != SIDEWALK {
                    hit("pole floating", bottom, c, &mut out);
                    break 'root;
                }
                r = bottom + 1;
            } else {
                r += 1;
            }
        }
    }

    'sign: for r in 0..h {
        for c in 0..w {
            if labels.get(r, c) == SIGN {
                let near = neighbors4(r, c, h, w)
                    .into_iter()
                    .any(|(rr, cc)| matches!(labels.get(rr, cc), POLE | SIGN));
                if !near {
                    hit("sign detached", r, c, &mut out);
                    break 'sign;
                }
                // the connected sign block must touch a pole somewhere
                if !component_touches(labels, r, c, SIGN, &[POLE]) {
                    hit("sign detached", r, c, &mut out);
                    break 'sign;
                }
            }
        }
    }

    out
}

fn neighbors4(r: usize, c: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut n = Vec::with_capacity(4);
    if r > 0 {
        n.push((r - 1, c));
    }
    if r + 1 < h {
        n.push((r + 1, c));
    }
    if c > 0 {
        n.push((r, c - 1));
    }
    if c + 1 < w {
        n.push((r, c + 1));
    }
    n
}

/// Does the 4-connected `member` component containing (r0, c0) touch any of
/// `targets`?
fn component_touches(labels: &LabelMap, r0: usize, c0: usize, member: u8, targets: &[u8]) -> bool {
    let (h, w) = (labels.height, labels.width);
    let mut seen = vec![false; h * w];
    let mut stack = vec![(r0, c0)];
    seen[r0 * w + c0] = true;
    while let Some((r, c)) = stack.pop() {
        for (rr, cc) in neighbors4(r, c, h, w) {
            let l = labels.get(rr, cc);
            if targets.contains(&l) {
                return true;
            }
            if l == member && !seen[rr * w + cc] {
                seen[rr * w + cc] = true;
                stack.push((rr, cc));
            }
        }
    }
    false
}

/// Pixel frequency of each class over a dataset; sums to one.
pub fn class_histogram(maps: &[LabelMap]) -> Result<Vec<Real>> {
    if maps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0u64; NUM_CLASSES];
    let mut total = 0u64;
    for m in maps {
        for &l in m.raw() {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    Ok(counts
        .iter()
        .map(|&c| c as Real / total as Real)
        .collect())
}

// ---------------------------------------------------------------------------
// Dataset files: one NDGC container per sample plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub lambda: Real,
    pub domain: Domain,
    pub base_seed: u64,
    pub count: usize,
    pub config_hash: String,
    pub files: Vec<String>,
}

pub fn write_dataset(
    dir: &Path,
    cfg: &WorldConfig,
    base_seed: u64,
    count: usize,
    domain: Domain,
) -> Result<Manifest> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64);
        let sample = generate(seed, domain, cfg)?;
        let name = format!("sample_{i:05}.ndgc");
        io::save_container(
            dir.join(&name),
            &[
                ("image".to_string(), sample.image.clone()),
                ("labels".to_string(), sample.labels.to_tensor()),
            ],
        )?;
        files.push(name);
    }
    let manifest = Manifest {
        height: cfg.height,
        width: cfg.width,
        classes: NUM_CLASSES,
        lambda: cfg.tail_lambda,
        domain,
        base_seed,
        count,
        config_hash: format!("{:016x}", cfg.hash()),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<(Tensor, LabelMap)>)> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let items = io::load_container(dir.join(name))?;
        let image = items
            .iter()
            .find(|(n, _)| n == "image")
            .ok_or_else(|| Error::Parse(format!("{name}: missing image tensor")))?
            .1
            .clone();
        let labels = LabelMap::from_tensor(
            &items
                .iter()
                .find(|(n, _)| n == "labels")
                .ok_or_else(|| Error::Parse(format!("{name}: missing labels tensor")))?
                .1,
        )?;
        samples.push((image, labels));
    }
    Ok((manifest, samples))
}

/// In-memory dataset generation (no files).
pub fn generate_split(
    cfg: &WorldConfig,
    base_seed: u64,
    count: usize,
    domain: Domain,
) -> Result<Vec<DomainSample>> {
    (0..count)
        .map(|i| generate(base_seed.wrapping_add(i as u64), domain, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(0, Domain::Source, &cfg()).unwrap();
        let b = generate(0, Domain::Source, &cfg()).unwrap();
        assert_eq!(a.labels, b.labels);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.image), bits(&b.image));
    }

    #[test]
    fn domains_share_labels_but_not_images() {
        let s = generate(7, Domain::Source, &cfg()).unwrap();
        let t = generate(7, Domain::Target, &cfg()).unwrap();
        assert_eq!(s.labels, t.labels);
        assert_ne!(s.image.data(), t.image.data());
    }

    #[test]
    fn lambda_zero_has_no_tail_pixels() {
        let mut c = cfg();
        c.tail_lambda = 0.0;
        for seed in 0..20 {
            let s = generate(seed, Domain::Source, &c).unwrap();
            for &l in s.labels.raw() {
                assert!(
                    !matches!(l, PEDESTRIAN | POLE | SIGN),
                    "seed {seed}: tail class {l} present at lambda 0"
                );
            }
        }
    }

    #[test]
    fn generated_maps_pass_validation_at_both_resolutions() {
        for seed in 0..50 {
            let s = generate(seed, Domain::Source, &cfg()).unwrap();
            let v = validate_structure(&s.labels);
            assert!(v.is_empty(), "seed {seed}: {v:?}");
            let half = s.labels.subsample2();
            let vh = validate_structure(&half);
            assert!(vh.is_empty(), "seed {seed} (half): {vh:?}");
        }
    }

    #[test]
    fn all_sky_map_reports_missing_road() {
        let m = LabelMap::filled(8, 8, SKY);
        let v = validate_structure(&m);
        assert!(v.iter().any(|x| x.rule == "no road band"), "{v:?}");
    }

    #[test]
    fn vehicle_in_sky_is_flagged_with_witness() {
        let mut s = generate(3, Domain::Source, &cfg()).unwrap();
        s.labels.set(0, 5, VEHICLE);
        let v = validate_structure(&s.labels);
        let hit = v.iter().find(|x| x.rule == "vehicle off road").expect("rule fires");
        assert_eq!((hit.row, hit.col), (0, 5));
    }

    #[test]
    fn histogram_counts_and_normalizes() {
        let m = LabelMap::new(2, 2, vec![0, 0, 0, 1]).unwrap();
        let h = class_histogram(&[m]).unwrap();
        assert_eq!(h[0], 0.75);
        assert_eq!(h[1], 0.25);
        assert!(h[2..].iter().all(|&x| x == 0.0));
        assert!(class_histogram(&[]).is_err());
    }

    #[test]
    fn checkerboard_histogram_is_symmetric() {
        let mut labels = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                labels.push(((r + c) % 2) as u8);
            }
        }
        let m = LabelMap::new(4, 4, labels).unwrap();
        let h = class_histogram(&[m]).unwrap();
        assert_eq!((h[0], h[1]), (0.5, 0.5));
    }

    #[test]
    fn tail_mass_is_small_and_monotone_in_lambda() {
        let frac = |lambda: Real| {
            let mut c = cfg();
            c.tail_lambda = lambda;
            let maps: Vec<LabelMap> = (0..256)
                .map(|s| generate(s, Domain::Source, &c).unwrap().labels)
                .collect();
            let h = class_histogram(&maps).unwrap();
            TAIL_CLASSES.iter().map(|&i| h[i]).sum::<Real>()
        };
        let f_low = frac(0.25);
        let f_high = frac(1.0);
        assert!(f_high < 0.10, "tail fraction {f_high} should stay under 10%");
        assert!(f_low < f_high, "tail mass not monotone: {f_low} vs {f_high}");
        assert!(f_high > 0.0);
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let mut c = cfg();
        c.height = 6;
        assert!(generate(0, Domain::Source, &c).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = std::env::temp_dir().join(format!("synthworld-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = write_dataset(&dir, &cfg(), 100, 3, Domain::Target).unwrap();
        assert_eq!(manifest.count, 3);
        let (m2, samples) = load_dataset(&dir).unwrap();
        assert_eq!(m2.files, manifest.files);
        assert_eq!(samples.len(), 3);
        let direct = generate(101, Domain::Target, &cfg()).unwrap();
        assert_eq!(samples[1].1, direct.labels);
        assert_eq!(samples[1].0.data(), direct.image.data());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
