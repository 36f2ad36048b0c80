//! Procedural face renderer and paired-corpus builder.
//!
//! Faces are drawn pre-aligned on a fixed canvas. Geometry and skin tone are
//! functions of the [`IdentityLatent`] only; each attribute paints inside
//! its own declared region, so toggling one attribute never touches pixels
//! outside [`attribute_region`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::rng::{self, purpose};

/// Number of controllable attributes.
pub const ATTR_COUNT: usize = 6;
/// Identity latent dimension.
pub const IDENTITY_DIM: usize = 8;
/// Default canvas side length.
pub const DEFAULT_SIZE: usize = 64;

pub const ATTR_NAMES: [&str; ATTR_COUNT] = ["glasses", "smile", "hat", "darkHair", "beard", "blush"];

pub mod attr {
    pub const GLASSES: usize = 0;
    pub const SMILE: usize = 1;
    pub const HAT: usize = 2;
    pub const DARK_HAIR: usize = 3;
    pub const BEARD: usize = 4;
    pub const BLUSH: usize = 5;
}

/// Looks up an attribute index by name (case-insensitive).
pub fn attr_index(name: &str) -> Option<usize> {
    ATTR_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name))
}

/// Face-geometry parameters, each in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityLatent(Vec<f32>);

impl IdentityLatent {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != IDENTITY_DIM {
            return Err(Error::invalid(format!(
                "identity latent has {} components, expected {IDENTITY_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::invalid("identity components must be finite and within [-1, 1]"));
        }
        Ok(Self(values))
    }

    pub fn random(rng: &mut rng::SeededRng) -> Self {
        Self((0..IDENTITY_DIM).map(|_| rng.random_range(-1.0f32..=1.0)).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn distance(&self, other: &IdentityLatent) -> f32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }
}

/// Per-attribute confidences in `[0, 1]`; also the conditioning signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttrVector(Vec<f32>);

impl AttrVector {
    /// Builds a vector, clamping every value into `[0, 1]`.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("attribute values must be finite"));
        }
        Ok(Self(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
    }

    /// The attribute-neutral "template prompt": every coordinate at 0.5.
    pub fn template(k: usize) -> Self {
        Self(vec![0.5; k])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> f32 {
        self.0[k]
    }

    pub fn with(&self, k: usize, v: f32) -> Self {
        let mut out = self.clone();
        out.0[k] = v.clamp(0.0, 1.0);
        out
    }

    /// Attribute `k` is rendered iff its value is at least 0.5.
    pub fn present(&self, k: usize) -> bool {
        self.0[k] >= 0.5
    }

    pub fn check_len(&self, k: usize) -> Result<()> {
        if self.0.len() != k {
            return Err(Error::invalid(format!(
                "attribute vector has {} entries, expected {k}",
                self.0.len()
            )));
        }
        Ok(())
    }
}

/// Axis-aligned inclusive pixel box `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Canvas-space geometry derived from an identity (64-pixel units scaled to
/// the canvas).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    s: f32,
    cx: f32,
    cy: f32,
    face_a: f32,
    face_b: f32,
    eye_dx: f32,
    eye_y: f32,
    eye_r: f32,
    mouth_w: f32,
    mouth_y: f32,
    nose_len: f32,
    skin: [f32; 3],
}

impl Geometry {
    fn new(id: &IdentityLatent, size: usize) -> Self {
        let z = &id.0;
        let s = size as f32 / 64.0;
        let cy = 34.0 * s;
        let face_b = (19.0 + 3.0 * z[1]) * s;
        let light = [0.96, 0.82, 0.70];
        let dark = [0.50, 0.34, 0.24];
        let u = (z[5] + 1.0) / 2.0;
        let skin = [0, 1, 2].map(|c| light[c] + (dark[c] - light[c]) * u);
        Self {
            s,
            cx: 32.0 * s,
            cy,
            face_a: (15.0 + 3.0 * z[0]) * s,
            face_b,
            eye_dx: (7.5 + 2.0 * z[2]) * s,
            eye_y: cy + (-3.0 + 2.0 * z[3]) * s,
            eye_r: (2.6 + 0.8 * z[7]) * s,
            mouth_w: (5.5 + 2.5 * z[4]) * s,
            mouth_y: cy + 0.55 * face_b,
            nose_len: (5.0 + 2.0 * z[6]) * s,
            skin,
        }
    }

    fn hat_bottom(&self) -> f32 {
        self.cy - self.face_b + 7.0 * self.s
    }
}

/// Anti-aliased coverage for a signed distance in pixels.
#[inline]
fn coverage(d: f32) -> f32 {
    (0.5 - d).clamp(0.0, 1.0)
}

#[inline]
fn ellipse_sd(px: f32, py: f32, cx: f32, cy: f32, a: f32, b: f32) -> f32 {
    let nx = (px - cx) / a;
    let ny = (py - cy) / b;
    ((nx * nx + ny * ny).sqrt() - 1.0) * a.min(b)
}

#[inline]
fn segment_sd(px: f32, py: f32, (ax, ay): (f32, f32), (bx, by): (f32, f32), half: f32) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let t = (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (qx, qy) = (ax + t * vx - px, ay + t * vy - py);
    (qx * qx + qy * qy).sqrt() - half
}

struct Canvas<'a> {
    img: &'a mut Image,
}

impl Canvas<'_> {
    /// Alpha-blends `color` wherever `cov(x, y) > 0` inside `region`.
    fn paint(&mut self, region: Region, color: [f32; 3], opacity: f32, cov: impl Fn(f32, f32) -> f32) {
        for y in region.y0..=region.y1 {
            for x in region.x0..=region.x1 {
                let a = cov(x as f32 + 0.5, y as f32 + 0.5) * opacity;
                if a <= 0.0 {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let old = self.img.get(y, x, c);
                    self.img.set(y, x, c, old + (col - old) * a);
                }
            }
        }
    }
}

fn bbox(size: usize, x0: f32, y0: f32, x1: f32, y1: f32) -> Region {
    let lim = size as f32 - 1.0;
    Region {
        x0: x0.floor().clamp(0.0, lim) as usize,
        y0: y0.floor().clamp(0.0, lim) as usize,
        x1: x1.ceil().clamp(0.0, lim) as usize,
        y1: y1.ceil().clamp(0.0, lim) as usize,
    }
}

fn hair_shape(g: &Geometry) -> (f32, f32, f32, f32) {
    (g.cx, g.cy - 4.0 * g.s, g.face_a + 3.5 * g.s, g.face_b + 2.5 * g.s)
}

/// Pixel box that attribute `k` may modify for this identity.
pub fn attribute_region(identity: &IdentityLatent, k: usize, size: usize) -> Result<Region> {
    if k >= ATTR_COUNT {
        return Err(Error::IndexOutOfRange { index: k, len: ATTR_COUNT });
    }
    let g = Geometry::new(identity, size);
    let m = 2.0;
    let r = match k {
        attr::GLASSES => {
            let rr = g.eye_r + 3.0 * g.s;
            bbox(size, g.cx - g.eye_dx - rr - m, g.eye_y - rr - m, g.cx + g.eye_dx + rr + m, g.eye_y + rr + m)
        }
        attr::SMILE => bbox(
            size,
            g.cx - g.mouth_w - 2.0 * g.s - m,
            g.mouth_y - 2.0 * g.s - m,
            g.cx + g.mouth_w + 2.0 * g.s + m,
            g.mouth_y + 5.0 * g.s + m,
        ),
        attr::HAT => bbox(
            size,
            g.cx - g.face_a - 6.0 * g.s - m,
            0.0,
            g.cx + g.face_a + 6.0 * g.s + m,
            g.hat_bottom() + 1.5 * g.s + m,
        ),
        attr::DARK_HAIR => {
            let (hx, hy, ha, hb) = hair_shape(&g);
            bbox(size, hx - ha - m, hy - hb - m, hx + ha + m, g.cy + m)
        }
        attr::BEARD => bbox(
            size,
            g.cx - g.face_a - m,
            g.mouth_y - 4.0 * g.s - m,
            g.cx + g.face_a + m,
            g.cy + g.face_b + m,
        ),
        attr::BLUSH => {
            let r = 3.5 * g.s;
            let y = g.eye_y + 7.0 * g.s;
            let dx = g.eye_dx + 1.5 * g.s;
            bbox(size, g.cx - dx - r - m, y - r - m, g.cx + dx + r + m, y + r + m)
        }
        _ => unreachable!(),
    };
    Ok(r)
}

/// Square canvas renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Renderer {
    pub size: usize,
}

impl Default for Renderer {
    fn default() -> Self {
        Self { size: DEFAULT_SIZE }
    }
}

impl Renderer {
    pub fn new(size: usize) -> Result<Self> {
        if size < 16 {
            return Err(Error::invalid(format!("canvas size {size} below minimum 16")));
        }
        Ok(Self { size })
    }

    /// Renders an aligned face. Pure and deterministic.
    pub fn render(&self, identity: &IdentityLatent, attrs: &AttrVector) -> Result<Image> {
        if identity.0.len() != IDENTITY_DIM {
            return Err(Error::invalid(format!(
                "identity latent has {} components, expected {IDENTITY_DIM}",
                identity.0.len()
            )));
        }
        attrs.check_len(ATTR_COUNT)?;
        let size = self.size;
        let g = Geometry::new(identity, size);
        let mut img = Image::zeros(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let v = 0.62 - 0.12 * (y as f32 / size as f32);
                img.set(y, x, 0, v * 0.85);
                img.set(y, x, 1, v * 0.95);
                img.set(y, x, 2, v * 1.1);
            }
        }
        let full = Region { x0: 0, y0: 0, x1: size - 1, y1: size - 1 };
        let mut cv = Canvas { img: &mut img };

        // Hair (colour is the darkHair attribute), upper half only.
        let (hx, hy, ha, hb) = hair_shape(&g);
        let hair_col = if attrs.present(attr::DARK_HAIR) { [0.13, 0.09, 0.07] } else { [0.86, 0.72, 0.42] };
        let hair_region = attribute_region(identity, attr::DARK_HAIR, size)?;
        let cy = g.cy;
        cv.paint(hair_region, hair_col, 1.0, |px, py| {
            coverage(ellipse_sd(px, py, hx, hy, ha, hb)) * coverage(py - cy)
        });

        // Face oval.
        cv.paint(full, g.skin, 1.0, |px, py| coverage(ellipse_sd(px, py, g.cx, g.cy, g.face_a, g.face_b)));

        // Beard: lower face, under the mouth and glasses.
        if attrs.present(attr::BEARD) {
            let top = g.mouth_y - 4.0 * g.s;
            cv.paint(attribute_region(identity, attr::BEARD, size)?, [0.25, 0.16, 0.10], 0.9, |px, py| {
                coverage(ellipse_sd(px, py, g.cx, g.cy, g.face_a, g.face_b)) * coverage(top - py)
            });
        }

        // Eyes.
        for side in [-1.0f32, 1.0] {
            let ex = g.cx + side * g.eye_dx;
            let r = Region {
                x0: 0,
                y0: 0,
                x1: size - 1,
                y1: size - 1,
            };
            cv.paint(r, [0.97, 0.97, 0.97], 1.0, |px, py| coverage(ellipse_sd(px, py, ex, g.eye_y, g.eye_r, g.eye_r * 0.7)));
            cv.paint(r, [0.10, 0.12, 0.20], 1.0, |px, py| {
                coverage(ellipse_sd(px, py, ex, g.eye_y, g.eye_r * 0.5, g.eye_r * 0.5))
            });
            let by = g.eye_y - g.eye_r - 1.5 * g.s;
            cv.paint(r, [0.25, 0.18, 0.12], 1.0, |px, py| {
                coverage(segment_sd(px, py, (ex - g.eye_r, by), (ex + g.eye_r, by - 0.5 * g.s), 0.6 * g.s))
            });
        }

        // Nose.
        let ny = g.eye_y + 2.0 * g.s;
        let nose_col = g.skin.map(|c| c * 0.72);
        cv.paint(full, nose_col, 1.0, |px, py| {
            coverage(segment_sd(px, py, (g.cx, ny), (g.cx + 1.0 * g.s, ny + g.nose_len), 0.7 * g.s))
        });

        // Blush.
        if attrs.present(attr::BLUSH) {
            let r = 3.5 * g.s;
            let y = g.eye_y + 7.0 * g.s;
            let dx = g.eye_dx + 1.5 * g.s;
            cv.paint(attribute_region(identity, attr::BLUSH, size)?, [0.95, 0.35, 0.45], 0.75, |px, py| {
                coverage(ellipse_sd(px, py, g.cx - dx, y, r, r * 0.8)).max(coverage(ellipse_sd(px, py, g.cx + dx, y, r, r * 0.8)))
            });
        }

        // Mouth: a thin line, or an open smile with teeth.
        let mouth_region = attribute_region(identity, attr::SMILE, size)?;
        let lips = [0.62, 0.16, 0.18];
        if attrs.present(attr::SMILE) {
            let (w, my, s) = (g.mouth_w + 1.0 * g.s, g.mouth_y, g.s);
            let inside = move |px: f32, py: f32| {
                let u = (px - g.cx) / w;
                if u.abs() > 1.0 {
                    return 0.0;
                }
                let top = my - 1.5 * s * u * u;
                let bot = my - 1.5 * s + 5.0 * s * (1.0 - u * u);
                coverage(top - py) * coverage(py - bot)
            };
            cv.paint(mouth_region, lips, 1.0, |px, py| {
                let u = (px - g.cx) / (w + 1.0 * s);
                if u.abs() > 1.0 {
                    return 0.0;
                }
                let top = my - 1.0 * s - 1.5 * s * u * u;
                let bot = my - 1.0 * s + 6.0 * s * (1.0 - u * u);
                coverage(top - py) * coverage(py - bot)
            });
            cv.paint(mouth_region, [0.98, 0.96, 0.92], 1.0, inside);
        } else {
            cv.paint(mouth_region, lips, 1.0, |px, py| {
                coverage(segment_sd(px, py, (g.cx - g.mouth_w, g.mouth_y), (g.cx + g.mouth_w, g.mouth_y), 0.8 * g.s))
            });
        }

        // Glasses: rings around both eyes plus a bridge.
        if attrs.present(attr::GLASSES) {
            let rr = g.eye_r + 2.2 * g.s;
            let th = 0.75 * g.s;
            let (l, r) = (g.cx - g.eye_dx, g.cx + g.eye_dx);
            cv.paint(attribute_region(identity, attr::GLASSES, size)?, [0.06, 0.06, 0.08], 1.0, |px, py| {
                let ring = |ex: f32| {
                    let d = ((px - ex).powi(2) + (py - g.eye_y).powi(2)).sqrt() - rr;
                    coverage(d.abs() - th)
                };
                let bridge = coverage(segment_sd(px, py, (l + rr, g.eye_y), (r - rr, g.eye_y), th));
                ring(l).max(ring(r)).max(bridge)
            });
        }

        // Hat: crown plus brim over the top of the head.
        if attrs.present(attr::HAT) {
            let bottom = g.hat_bottom();
            let crown_a = g.face_a + 2.0 * g.s;
            let brim_a = g.face_a + 6.0 * g.s;
            cv.paint(attribute_region(identity, attr::HAT, size)?, [0.72, 0.14, 0.16], 1.0, |px, py| {
                let crown = coverage((px - g.cx).abs() - crown_a) * coverage(py - bottom) * coverage(bottom - 15.0 * g.s - py);
                let brim = coverage((px - g.cx).abs() - brim_a) * coverage((py - (bottom - 0.5 * g.s)).abs() - 2.0 * g.s);
                crown.max(brim)
            });
        }

        for v in img.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(img)
    }
}

/// Renders with the default 64×64 canvas.
pub fn render_face(identity: &IdentityLatent, attrs: &AttrVector) -> Result<Image> {
    Renderer::default().render(identity, attrs)
}

/// Two renders of one identity differing in a single attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub src_image: Image,
    pub tar_image: Image,
    pub src_attrs: AttrVector,
    pub tar_attrs: AttrVector,
    pub edited_index: usize,
    pub identity: IdentityLatent,
    pub seed: u64,
}

impl PairRecord {
    /// Checks the pair invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.src_attrs.len();
        if self.tar_attrs.len() != k || self.edited_index >= k {
            return Err(Error::invalid("pair attribute vectors are inconsistent"));
        }
        for i in 0..k {
            let (a, b) = (self.src_attrs.get(i), self.tar_attrs.get(i));
            if i == self.edited_index {
                if ((a - b).abs() - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("edited attribute {i} must flip between 0 and 1")));
                }
            } else if a != b {
                return Err(Error::invalid(format!("attribute {i} differs but is not the edited index")));
            }
        }
        self.src_image.check_same_shape(&self.tar_image)
    }
}

/// Identity and source attributes for a pair, without rendering.
pub fn sample_pair_spec(seed: u64, edited_index: usize) -> Result<(IdentityLatent, AttrVector, AttrVector)> {
    if edited_index >= ATTR_COUNT {
        return Err(Error::IndexOutOfRange { index: edited_index, len: ATTR_COUNT });
    }
    let mut r = rng::rng_from(seed);
    let identity = IdentityLatent::random(&mut r);
    let src: Vec<f32> = (0..ATTR_COUNT).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let src = AttrVector(src);
    let tar = src.with(edited_index, 1.0 - src.get(edited_index));
    Ok((identity, src, tar))
}

impl Renderer {
    /// Draws a pair whose identity and attributes derive from `seed`.
    pub fn sample_pair(&self, seed: u64, edited_index: usize) -> Result<PairRecord> {
        let (identity, src_attrs, tar_attrs) = sample_pair_spec(seed, edited_index)?;
        Ok(PairRecord {
            src_image: self.render(&identity, &src_attrs)?,
            tar_image: self.render(&identity, &tar_attrs)?,
            src_attrs,
            tar_attrs,
            edited_index,
            identity,
            seed,
        })
    }
}

pub fn sample_pair(seed: u64, edited_index: usize) -> Result<PairRecord> {
    Renderer::default().sample_pair(seed, edited_index)
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub src_png: String,
    pub tar_png: String,
    pub src_attrs: Vec<f32>,
    pub tar_attrs: Vec<f32>,
    pub edited_index: usize,
    pub identity: Vec<f32>,
    pub seed: u64,
    /// Present only in manifests produced by the forge filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc_scores: Option<QcScoresRecord>,
}

/// QC scores attached to forged pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcScoresRecord {
    pub attr_conf: f32,
    pub id_sim: f32,
    pub percep: f32,
}

/// A manifest plus the directory its relative PNG paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<CorpusRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let records = read_jsonl(&text, "corpus manifest")?;
        Ok(Self {
            dir: file.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST_FILE);
        write_jsonl(&path, &self.records)?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads the PNG pair and annotations of record `i`.
    pub fn load_pair(&self, i: usize) -> Result<PairRecord> {
        let r = self
            .records
            .get(i)
            .ok_or(Error::IndexOutOfRange { index: i, len: self.records.len() })?;
        let pair = PairRecord {
            src_image: Image::load_png(&self.dir.join(&r.src_png))?,
            tar_image: Image::load_png(&self.dir.join(&r.tar_png))?,
            src_attrs: AttrVector::new(r.src_attrs.clone())?,
            tar_attrs: AttrVector::new(r.tar_attrs.clone())?,
            edited_index: r.edited_index,
            identity: IdentityLatent::new(r.identity.clone())?,
            seed: r.seed,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn load_all_pairs(&self) -> Result<Vec<PairRecord>> {
        par::map_range(self.records.len(), |i| self.load_pair(i)).into_iter().collect()
    }

    /// True when every record's two attribute vectors differ in exactly the
    /// edited coordinate.
    pub fn is_paired(&self) -> bool {
        self.records.iter().all(|r| {
            r.src_attrs.len() == r.tar_attrs.len()
                && r.edited_index < r.src_attrs.len()
                && r.src_attrs.iter().zip(&r.tar_attrs).enumerate().all(|(i, (a, b))| {
                    if i == r.edited_index {
                        ((a - b).abs() - 1.0).abs() < 1e-6
                    } else {
                        a == b
                    }
                })
        })
    }
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(what, format!("line {}: {e}", n + 1))))
        .collect()
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format("jsonl", e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Summary returned by [`build_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub count: usize,
    pub per_edited_index: Vec<usize>,
    pub manifest_path: PathBuf,
}

/// Seed of record `i` in a corpus built from `seed`.
pub fn record_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, purpose::CORPUS, i as u64)
}

/// Renders `count` pairs (edited index cycling `0..K`) into `out_dir` as PNGs
/// plus `manifest.jsonl`.
pub fn build_corpus(count: usize, seed: u64, out_dir: &Path) -> Result<CorpusSummary> {
    Renderer::default().build_corpus(count, seed, out_dir)
}

impl Renderer {
    pub fn build_corpus(&self, count: usize, seed: u64, out_dir: &Path) -> Result<CorpusSummary> {
        if count == 0 {
            return Err(Error::invalid("corpus count must be positive"));
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let records = par::map_range(count, |i| -> Result<CorpusRecord> {
            let s = record_seed(seed, i);
            let pair = self.sample_pair(s, i % ATTR_COUNT)?;
            let src_png = format!("src_{i:06}.png");
            let tar_png = format!("tar_{i:06}.png");
            pair.src_image.save_png(&out_dir.join(&src_png))?;
            pair.tar_image.save_png(&out_dir.join(&tar_png))?;
            Ok(CorpusRecord {
                id: format!("{i:06}"),
                src_png,
                tar_png,
                src_attrs: pair.src_attrs.0,
                tar_attrs: pair.tar_attrs.0,
                edited_index: pair.edited_index,
                identity: pair.identity.0,
                seed: s,
                qc_scores: None,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut per = vec![0; ATTR_COUNT];
        for r in &records {
            per[r.edited_index] += 1;
        }
        let manifest = Manifest { dir: out_dir.to_path_buf(), records };
        let manifest_path = manifest.save()?;
        Ok(CorpusSummary { count, per_edited_index: per, manifest_path })
    }
}
