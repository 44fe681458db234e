//! Deterministic synthetic detection data: colored geometric shapes on
//! noisy gradient backgrounds, with tight ground-truth boxes.
//!
//! Images derive entirely from `(spec.seed, image index)`, so generation can
//! be partitioned or re-run with identical output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bbox::{self, Annotation, BBox};
use crate::error::{Error, Result};
use crate::model::{INPUT_CHANNELS, INPUT_SIZE};
use crate::rng;
use crate::tensor::{CountingReader, Tensor};

const DATASET_MAGIC: &[u8; 4] = b"RDD1";
const MAX_PLACEMENT_TRIES: usize = 100;
const MAX_PAIR_IOU: f32 = 0.3;
const MIN_EXTENT_PX: usize = 4;

/// Generation parameters for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    /// Foreground classes; the detector adds a background class on top.
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent as a fraction of the image, sampled per axis.
    pub size_range: (f32, f32),
    /// Peak amplitude of the per-pixel background value noise.
    pub noise_amp: f32,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 2000,
            classes: 4,
            min_objects: 1,
            max_objects: 4,
            size_range: (0.15, 0.5),
            noise_amp: 6.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(3..=6).contains(&self.classes) {
            return Err(Error::Invalid(format!(
                "dataset classes must lie in 3..=6, got {}",
                self.classes
            )));
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects || self.max_objects > 4 {
            return Err(Error::Invalid("objects per image must satisfy 1 <= min <= max <= 4".into()));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("bad size range [{lo}, {hi}]")));
        }
        if self.noise_amp < 0.0 || self.noise_amp > 64.0 {
            return Err(Error::Invalid("noise amplitude must lie in [0, 64]".into()));
        }
        Ok(())
    }
}

/// One image with its ground truth. Pixels are `[3, 64, 64]` in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

/// Counters reported alongside a generated dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenStats {
    /// Images that ended up with fewer objects than requested because
    /// placement kept colliding.
    pub shortfall_images: usize,
}

// Base colors are distinct but deliberately close, with wide per-instance
// jitter below; class identity needs shape cues as well as color, which
// keeps the classification task sensitive to small perturbations.
const PALETTE: [[f32; 3]; 6] = [
    [205.0, 90.0, 75.0],
    [175.0, 125.0, 70.0],
    [135.0, 160.0, 80.0],
    [95.0, 150.0, 135.0],
    [105.0, 115.0, 195.0],
    [160.0, 95.0, 175.0],
];
const COLOR_JITTER: f32 = 30.0;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

const SHAPES: [Shape; 6] = [
    Shape::Rectangle,
    Shape::Ellipse,
    Shape::Triangle,
    Shape::Cross,
    Shape::Diamond,
    Shape::Ring,
];

impl Shape {
    /// Membership test in box-local coordinates u, v in [-1, 1].
    fn contains(&self, u: f32, v: f32) -> bool {
        match self {
            Shape::Rectangle => true,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Triangle => v.abs() <= 1.0 && u.abs() <= (v + 1.0) * 0.5,
            Shape::Cross => u.abs() <= 1.0 / 3.0 || v.abs() <= 1.0 / 3.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.25..=1.0).contains(&r2)
            }
        }
    }
}

struct ObjectParams {
    class: usize,
    shape: Shape,
    /// Placement box in pixel coordinates (center, extents).
    cx: f32,
    cy: f32,
    w: f32,
    h: f32,
    color: [f32; 3],
}

/// Renders one object, returning its tight pixel bounds, or None if the
/// rendered mask is degenerate.
fn render_object(pixels: &mut [f32], obj: &ObjectParams) -> Option<(usize, usize, usize, usize)> {
    let s = INPUT_SIZE;
    let (x0, x1) = ((obj.cx - obj.w * 0.5).floor().max(0.0) as usize, ((obj.cx + obj.w * 0.5).ceil() as usize).min(s));
    let (y0, y1) = ((obj.cy - obj.h * 0.5).floor().max(0.0) as usize, ((obj.cy + obj.h * 0.5).ceil() as usize).min(s));
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for py in y0..y1 {
        for px in x0..x1 {
            let u = ((px as f32 + 0.5) - obj.cx) / (obj.w * 0.5);
            let v = ((py as f32 + 0.5) - obj.cy) / (obj.h * 0.5);
            if u.abs() > 1.0 || v.abs() > 1.0 || !obj.shape.contains(u, v) {
                continue;
            }
            for ch in 0..INPUT_CHANNELS {
                pixels[(ch * s + py) * s + px] = obj.color[ch];
            }
            bounds = Some(match bounds {
                None => (px, py, px, py),
                Some((ax0, ay0, ax1, ay1)) => (ax0.min(px), ay0.min(py), ax1.max(px), ay1.max(py)),
            });
        }
    }
    bounds
}

fn generate_image(spec: &DatasetSpec, index: usize) -> (LabeledImage, bool) {
    let s = INPUT_SIZE;
    let mut rng = rng::stream_rng(spec.seed, rng::STREAM_DATA, index as u64);

    // Background: per-channel base level, a linear luminance gradient, then
    // per-pixel value noise shared across channels.
    let base: [f32; 3] = [
        rng.random_range(70.0..170.0),
        rng.random_range(70.0..170.0),
        rng.random_range(70.0..170.0),
    ];
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let grad_amp: f32 = rng.random_range(5.0..30.0);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut pixels = vec![0.0f32; INPUT_CHANNELS * s * s];
    for py in 0..s {
        for px in 0..s {
            let t = (px as f32 * dx + py as f32 * dy) / s as f32;
            let g = grad_amp * (2.0 * t - (dx + dy).max(0.0));
            let noise: f32 = if spec.noise_amp > 0.0 {
                rng.random_range(-spec.noise_amp..=spec.noise_amp)
            } else {
                0.0
            };
            for ch in 0..INPUT_CHANNELS {
                pixels[(ch * s + py) * s + px] = (base[ch] + g + noise).clamp(0.0, 255.0);
            }
        }
    }

    let want = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    let mut shortfall = false;
    'objects: for _ in 0..want {
        for _try in 0..MAX_PLACEMENT_TRIES {
            let class = rng.random_range(0..spec.classes);
            let shape = SHAPES[class];
            let wf: f32 = rng.random_range(spec.size_range.0..=spec.size_range.1);
            let hf: f32 = rng.random_range(spec.size_range.0..=spec.size_range.1);
            let (w, h) = (wf * s as f32, hf * s as f32);
            let cx: f32 = rng.random_range(w * 0.5..(s as f32 - w * 0.5));
            let cy: f32 = rng.random_range(h * 0.5..(s as f32 - h * 0.5));
            let placement = BBox::new(cx / s as f32, cy / s as f32, wf, hf);
            if placed.iter().any(|p| bbox::iou(p, &placement) > MAX_PAIR_IOU) {
                continue;
            }
            let jitter = |rng: &mut ChaCha8Rng, v: f32| {
                (v + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 255.0)
            };
            let color = [
                jitter(&mut rng, PALETTE[class][0]),
                jitter(&mut rng, PALETTE[class][1]),
                jitter(&mut rng, PALETTE[class][2]),
            ];
            let obj = ObjectParams {
                class,
                shape,
                cx,
                cy,
                w,
                h,
                color,
            };
            // Tentative render into a copy so a degenerate mask can be
            // rejected without smearing the image.
            let mut trial = pixels.clone();
            let Some((bx0, by0, bx1, by1)) = render_object(&mut trial, &obj) else {
                continue;
            };
            if bx1 - bx0 + 1 < MIN_EXTENT_PX || by1 - by0 + 1 < MIN_EXTENT_PX {
                continue;
            }
            pixels = trial;
            placed.push(placement);
            annotations.push(Annotation {
                label: obj.class,
                bbox: BBox::from_corners(
                    bx0 as f32 / s as f32,
                    by0 as f32 / s as f32,
                    (bx1 + 1) as f32 / s as f32,
                    (by1 + 1) as f32 / s as f32,
                ),
            });
            continue 'objects;
        }
        shortfall = true;
        break;
    }

    let image = Tensor::new(vec![INPUT_CHANNELS, s, s], pixels).expect("rendered image");
    (
        LabeledImage { image, annotations },
        shortfall,
    )
}

/// Generates the full dataset. Images are independent given their index, so
/// generation parallelizes with output identical to the serial order.
pub fn generate(spec: &DatasetSpec) -> Result<(Vec<LabeledImage>, GenStats)> {
    spec.validate()?;
    let results: Vec<(LabeledImage, bool)> = (0..spec.count)
        .into_par_iter()
        .map(|i| generate_image(spec, i))
        .collect();
    let mut stats = GenStats::default();
    let mut images = Vec::with_capacity(spec.count);
    for (img, shortfall) in results {
        if shortfall {
            stats.shortfall_images += 1;
        }
        debug_assert!(!img.annotations.is_empty());
        images.push(img);
    }
    Ok((images, stats))
}

/// Writes a dataset: magic `RDD1`, LE u32 image count, then per image the
/// annotation count, annotations as `(u32 label, 4 x f32 box)`, and the
/// pixel tensor as an inline `RDT1` snapshot.
pub fn save(dataset: &[LabeledImage], path: &Path) -> Result<()> {
    let err = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    let inner = (|| -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(dataset.len() as u32).to_le_bytes())?;
        for img in dataset {
            w.write_all(&(img.annotations.len() as u32).to_le_bytes())?;
            for ann in &img.annotations {
                w.write_all(&(ann.label as u32).to_le_bytes())?;
                for v in [ann.bbox.cx, ann.bbox.cy, ann.bbox.w, ann.bbox.h] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            img.image.write_snapshot_to(&mut w)?;
        }
        w.flush()
    })();
    inner.map_err(err)
}

pub fn load(path: &Path) -> Result<Vec<LabeledImage>> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&name, e))?;
    let mut r = CountingReader::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    r.read_exact_or(&mut magic, &name)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(&name, 0, "bad dataset magic (want RDD1)"));
    }
    let count = r.read_u32(&name)? as usize;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let n_ann = r.read_u32(&name)? as usize;
        if n_ann > 64 {
            return Err(Error::format(
                &name,
                r.position() - 4,
                format!("implausible annotation count {n_ann}"),
            ));
        }
        let mut annotations = Vec::with_capacity(n_ann);
        for _ in 0..n_ann {
            let label = r.read_u32(&name)? as usize;
            let mut vals = [0.0f32; 4];
            for v in &mut vals {
                *v = f32::from_le_bytes(r.read_4(&name)?);
            }
            annotations.push(Annotation {
                label,
                bbox: BBox::new(vals[0], vals[1], vals[2], vals[3]),
            });
        }
        let image = Tensor::read_snapshot_from(&mut r, &name)?;
        if image.shape() != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
            return Err(Error::format(
                &name,
                r.position(),
                format!("unexpected image shape {:?}", image.shape()),
            ));
        }
        images.push(LabeledImage { image, annotations });
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            count: 10,
            seed: 42,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_spec_twice_is_byte_identical() {
        let (a, _) = generate(&small_spec()).unwrap();
        let (b, _) = generate(&small_spec()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.annotations, y.annotations);
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.image), bits(&y.image));
        }
    }

    #[test]
    fn boxes_and_pixels_stay_in_range() {
        let (images, _) = generate(&small_spec()).unwrap();
        for img in &images {
            assert!(!img.annotations.is_empty());
            assert!(img.image.values().iter().all(|&v| (0.0..=255.0).contains(&v)));
            for ann in &img.annotations {
                let (x0, y0, x1, y1) = ann.bbox.corners();
                assert!(x0 >= -1e-6 && y0 >= -1e-6 && x1 <= 1.0 + 1e-6 && y1 <= 1.0 + 1e-6);
                assert!(ann.bbox.w >= MIN_EXTENT_PX as f32 / INPUT_SIZE as f32 - 1e-6);
                assert!(ann.bbox.h >= MIN_EXTENT_PX as f32 / INPUT_SIZE as f32 - 1e-6);
                assert!(ann.label < 4);
            }
        }
    }

    #[test]
    fn class_frequencies_are_roughly_uniform() {
        let spec = DatasetSpec {
            count: 2000,
            seed: 9,
            ..DatasetSpec::default()
        };
        let (images, _) = generate(&spec).unwrap();
        let mut counts = vec![0usize; spec.classes];
        let mut total = 0usize;
        for img in &images {
            for ann in &img.annotations {
                counts[ann.label] += 1;
                total += 1;
            }
        }
        let expect = total as f64 / spec.classes as f64;
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - expect).abs() / expect;
            assert!(dev < 0.2, "class {c}: {n} of {total} deviates {dev:.3} from uniform");
        }
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rdd");
        let (images, _) = generate(&small_spec()).unwrap();
        save(&images, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(images.len(), back.len());
        for (a, b) in images.iter().zip(&back) {
            assert_eq!(a.annotations, b.annotations);
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.image), bits(&b.image));
        }
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.rdd");
        save(&[], &path).unwrap();
        assert!(load(&path).unwrap().is_empty());
    }

    #[test]
    fn flipped_magic_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rdd");
        let (images, _) = generate(&small_spec()).unwrap();
        save(&images[..2], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_dataset_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.rdd");
        let (images, _) = generate(&small_spec()).unwrap();
        save(&images[..2], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"), "msg: {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
