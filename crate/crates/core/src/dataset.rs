//! RGB-D sample directories and the synthetic scene generator.
//!
//! A dataset root holds `manifest.txt` (one sample id per line), a
//! `generator.txt` key/value provenance record when synthetic, and one
//! directory per sample:
//!
//! ```text
//! <id>/color.png   8-bit RGB
//! <id>/depth.png   16-bit grayscale, millimeters
//! <id>/labels.txt  one `class_id cx cy cz w h d` line per box
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::grid::{cell_of, GridSpec};
use crate::tensor::Tensor4;

/// Working depth range in meters.
pub const DEPTH_RANGE_M: f64 = 10.0;
pub const CLASS_NAMES: [&str; 2] = ["person", "object"];

pub const COLOR_FILE: &str = "color.png";
pub const DEPTH_FILE: &str = "depth.png";
pub const LABEL_FILE: &str = "labels.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const GENERATOR_FILE: &str = "generator.txt";

pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// One training example: `(1, 4, N, N)` input in R, G, B, depth order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor4,
    pub boxes: Vec<Box3D>,
    pub id: String,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.input.shape().width
    }

    /// Normalized depth plane.
    pub fn depth(&self) -> &[f64] {
        let s = self.input.shape();
        &self.input.data()[3 * s.plane()..4 * s.plane()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Resize to this square size; `None` keeps the stored size.
    pub input_size: Option<usize>,
    pub depth_range_m: f64,
    pub num_classes: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            input_size: None,
            depth_range_m: DEPTH_RANGE_M,
            num_classes: 2,
        }
    }
}

impl LoadOptions {
    pub fn sized(input_size: usize) -> Self {
        Self {
            input_size: Some(input_size),
            ..Self::default()
        }
    }
}

/// Millimeters to [0, 1] over the depth range, clamped.
pub fn normalize_depth_mm(mm: f64, depth_range_m: f64) -> f64 {
    (mm / (depth_range_m * 1000.0)).clamp(0.0, 1.0)
}

pub fn parse_labels(text: &str, num_classes: usize, path: &Path) -> Result<Vec<Box3D>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!(
                "expected `class_id cx cy cz w h d`, found {} fields",
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class_id >= num_classes {
            return Err(err(format!("class id {class_id} >= {num_classes}")));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad number {f:?}")))?;
        }
        if v[..3].iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(err("box center outside [0, 1]".into()));
        }
        if v[3..].iter().any(|&e| e < 0.0) {
            return Err(err("negative box extent".into()));
        }
        boxes.push(Box3D::labeled(class_id, num_classes, [v[0], v[1], v[2]], [v[3], v[4], v[5]]));
    }
    Ok(boxes)
}

pub fn format_labels(boxes: &[Box3D]) -> String {
    let mut out = String::new();
    for b in boxes {
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.class_id(),
            b.cx,
            b.cy,
            b.cz,
            b.w,
            b.h,
            b.d
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn resize_plane(plane: Vec<f32>, w: u32, h: u32, size: usize) -> Vec<f32> {
    if w as usize == size && h as usize == size {
        return plane;
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w, h, plane).expect("plane length matches image size");
    imageops::resize(&img, size as u32, size as u32, FilterType::Triangle).into_raw()
}

/// Reads `color.png`, `depth.png` and `labels.txt` from a sample directory.
pub fn load_sample(dir: &Path, opts: &LoadOptions) -> Result<Sample> {
    let color = open_image(&dir.join(COLOR_FILE))?.to_rgb8();
    let depth_path = dir.join(DEPTH_FILE);
    let depth = match open_image(&depth_path)? {
        DynamicImage::ImageLuma16(d) => d,
        other => {
            return Err(Error::Format(format!(
                "{}: depth must be 16-bit grayscale, found {:?}",
                depth_path.display(),
                other.color()
            )))
        }
    };
    if color.dimensions() != depth.dimensions() {
        return Err(Error::Format(format!(
            "{}: color is {:?} but depth is {:?}",
            dir.display(),
            color.dimensions(),
            depth.dimensions()
        )));
    }
    let (w, h) = color.dimensions();
    let size = opts.input_size.unwrap_or(w as usize);
    if opts.input_size.is_none() && w != h {
        return Err(Error::Format(format!(
            "{}: non-square {w}x{h} image needs an explicit input size",
            dir.display()
        )));
    }

    let label_path = dir.join(LABEL_FILE);
    let text = std::fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
    let boxes = parse_labels(&text, opts.num_classes, &label_path)?;

    let n = (w * h) as usize;
    let mut data = Vec::with_capacity(4 * size * size);
    for c in 0..3 {
        let plane: Vec<f32> = color.pixels().map(|p| p[c] as f32 / 255.0).collect();
        data.extend(resize_plane(plane, w, h, size).into_iter().map(f64::from));
    }
    let plane: Vec<f32> = depth
        .pixels()
        .map(|p| normalize_depth_mm(p[0] as f64, opts.depth_range_m) as f32)
        .collect();
    debug_assert_eq!(plane.len(), n);
    data.extend(
        resize_plane(plane, w, h, size)
            .into_iter()
            .map(|v| f64::from(v).clamp(0.0, 1.0)),
    );
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        input: Tensor4::new([1, 4, size, size], data)?,
        boxes,
        id,
    })
}

pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

/// Loads every sample listed in the manifest.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Vec<Sample>> {
    read_manifest(root)?
        .iter()
        .map(|id| load_sample(&root.join(id), opts))
        .collect()
}

/// Stacks samples into one `(batch, 4, N, N)` tensor.
pub fn batch_inputs(samples: &[&Sample]) -> Result<Tensor4> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("empty batch".into()))?
        .input
        .shape();
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        if s.input.shape() != first {
            return Err(Error::Dimension(format!(
                "sample {} has shape {}, batch expects {first}",
                s.id,
                s.input.shape()
            )));
        }
        data.extend_from_slice(s.input.data());
    }
    Tensor4::new([samples.len(), first.channels, first.height, first.width], data)
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub depth_range_m: f64,
    pub image_size: usize,
    /// Probability that an object is a person.
    pub person_fraction: f64,
    /// Grid sizes at which two objects of a scene may not share a cell.
    pub collision_grids: Vec<usize>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 16,
            min_objects: 1,
            max_objects: 5,
            depth_range_m: DEPTH_RANGE_M,
            image_size: 128,
            person_fraction: 0.5,
            collision_grids: vec![8, 26],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > 5 {
            return Err(Error::Config(format!(
                "object count range must lie within 1..=5, got {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.depth_range_m > 0.0) {
            return Err(Error::Config("depth_range_m must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.person_fraction) {
            return Err(Error::Config("person_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn provenance(&self) -> String {
        let grids: Vec<String> = self.collision_grids.iter().map(|g| g.to_string()).collect();
        format!(
            "generator = synthetic-cuboids\nversion = 1\nseed = {}\nscenes = {}\nmin_objects = {}\nmax_objects = {}\ndepth_range_m = {}\nimage_size = {}\nperson_fraction = {}\ncollision_grids = {}\n",
            self.seed,
            self.scenes,
            self.min_objects,
            self.max_objects,
            self.depth_range_m,
            self.image_size,
            self.person_fraction,
            grids.join(",")
        )
    }
}

/// A cuboid in normalized scene space with its flat render color.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn to_box(&self) -> Box3D {
        Box3D::labeled(self.class_id, CLASS_NAMES.len(), self.center, self.extent)
    }

    /// Normalized depth of the camera-facing face.
    pub fn front(&self) -> f64 {
        self.center[2] - self.extent[2] / 2.0
    }

    /// Pixel-center coverage test on an `size`×`size` image.
    pub fn covers(&self, u: usize, v: usize, size: usize) -> bool {
        let x = (u as f64 + 0.5) / size as f64;
        let y = (v as f64 + 0.5) / size as f64;
        let (x0, x1) = (self.center[0] - self.extent[0] / 2.0, self.center[0] + self.extent[0] / 2.0);
        let (y0, y1) = (self.center[1] - self.extent[1] / 2.0, self.center[1] + self.extent[1] / 2.0);
        x >= x0 && x < x1 && y >= y0 && y < y1
    }
}

/// The generator's geometry record for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub objects: Vec<SceneObject>,
    /// Normalized depth of the back wall.
    pub wall: f64,
}

impl SceneGeometry {
    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(SceneObject::to_box).collect()
    }
}

const WALL_DEPTH: f64 = 0.95;
const WALL_COLOR: [f64; 3] = [0.55, 0.55, 0.5];
const COLOR_NOISE: f64 = 0.04;

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn random_object<R: Rng>(rng: &mut R, spec: &SceneSpec) -> SceneObject {
    let person = rng.random_bool(spec.person_fraction);
    let (w, h, d) = if person {
        (
            rng.random_range(0.08..0.18),
            rng.random_range(0.25..0.5),
            rng.random_range(0.03..0.08),
        )
    } else {
        (
            rng.random_range(0.12..0.3),
            rng.random_range(0.08..0.2),
            rng.random_range(0.05..0.15),
        )
    };
    let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
    let cz = rng.random_range(0.1..0.8);
    let base = if person { [0.8, 0.3, 0.3] } else { [0.2, 0.4, 0.8] };
    let color = base.map(|b: f64| (b + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0));
    SceneObject {
        class_id: usize::from(!person),
        center: [cx, cy, cz].map(quantize),
        extent: [w, h, d].map(quantize),
        color,
    }
}

/// Draws a scene's objects; placements that would share a grid cell with an
/// earlier object are redrawn.
pub fn random_scene<R: Rng>(rng: &mut R, spec: &SceneSpec) -> SceneGeometry {
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let grids: Vec<GridSpec> = spec
        .collision_grids
        .iter()
        .filter_map(|&s| GridSpec::new(s, 2).ok())
        .collect();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 1000 {
        attempts += 1;
        let cand = random_object(rng, spec);
        let clash = objects.iter().any(|o| {
            grids.iter().any(|g| {
                cell_of(o.center, g).expect("centers lie in [0, 1]")
                    == cell_of(cand.center, g).expect("centers lie in [0, 1]")
            })
        });
        if !clash {
            objects.push(cand);
        }
    }
    SceneGeometry {
        objects,
        wall: WALL_DEPTH,
    }
}

/// Paints far-to-near: the nearest front face wins each pixel.
pub fn render_scene<R: Rng>(
    geom: &SceneGeometry,
    size: usize,
    depth_range_m: f64,
    rng: &mut R,
) -> (RgbImage, DepthImage) {
    let to_mm = |z: f64| (z * depth_range_m * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
    let mut order: Vec<&SceneObject> = geom.objects.iter().collect();
    order.sort_by(|a, b| b.front().total_cmp(&a.front()));

    let mut color = vec![WALL_COLOR; size * size];
    let mut depth = vec![to_mm(geom.wall); size * size];
    for obj in order {
        for v in 0..size {
            for u in 0..size {
                if obj.covers(u, v, size) {
                    color[v * size + u] = obj.color;
                    depth[v * size + u] = to_mm(obj.front());
                }
            }
        }
    }
    let rgb = RgbImage::from_fn(size as u32, size as u32, |u, v| {
        let c = color[v as usize * size + u as usize];
        Rgb(c.map(|x| {
            let noisy = x + rng.random_range(-COLOR_NOISE..COLOR_NOISE);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    let d = DepthImage::from_fn(size as u32, size as u32, |u, v| {
        Luma([depth[v as usize * size + u as usize]])
    });
    (rgb, d)
}

pub fn write_sample(dir: &Path, color: &RgbImage, depth: &DepthImage, boxes: &[Box3D]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cp = dir.join(COLOR_FILE);
    color
        .save(&cp)
        .map_err(|e| Error::io(&cp, std::io::Error::other(e)))?;
    let dp = dir.join(DEPTH_FILE);
    depth
        .save(&dp)
        .map_err(|e| Error::io(&dp, std::io::Error::other(e)))?;
    let lp = dir.join(LABEL_FILE);
    std::fs::write(&lp, format_labels(boxes)).map_err(|e| Error::io(&lp, e))
}

pub fn scene_id(index: usize) -> String {
    format!("scene{index:04}")
}

/// Writes a deterministic synthetic dataset and returns each scene's
/// geometry record in manifest order.
pub fn generate_synthetic(spec: &SceneSpec, out_dir: &Path) -> Result<Vec<SceneGeometry>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = String::new();
    let mut records = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let geom = random_scene(&mut rng, spec);
        let (color, depth) = render_scene(&geom, spec.image_size, spec.depth_range_m, &mut rng);
        let id = scene_id(i);
        write_sample(&out_dir.join(&id), &color, &depth, &geom.boxes())?;
        manifest.push_str(&id);
        manifest.push('\n');
        records.push(geom);
    }
    let mp = out_dir.join(MANIFEST_FILE);
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let gp = out_dir.join(GENERATOR_FILE);
    std::fs::write(&gp, spec.provenance()).map_err(|e| Error::io(&gp, e))?;
    Ok(records)
}

/// Resolves a sample directory: either the directory itself or `root/id`.
pub fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_normalization() {
        assert_eq!(normalize_depth_mm(5000.0, DEPTH_RANGE_M), 0.5);
        assert_eq!(normalize_depth_mm(65535.0, DEPTH_RANGE_M), 1.0);
        assert_eq!(normalize_depth_mm(0.0, DEPTH_RANGE_M), 0.0);
        // 16-bit millimeters survive the round trip
        for mm in [0u16, 1, 999, 4321, 9999, 10000] {
            let back = normalize_depth_mm(mm as f64, DEPTH_RANGE_M) * 10000.0;
            assert!((back - mm as f64).abs() <= 0.5);
        }
    }

    #[test]
    fn label_parsing() {
        let p = Path::new("labels.txt");
        let b = parse_labels("0 0.5 0.5 0.3 0.1 0.2 0.05\n", 2, p).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].class_id(), 0);
        assert_eq!((b[0].center(), b[0].extent()), ([0.5, 0.5, 0.3], [0.1, 0.2, 0.05]));

        let err = parse_labels("0 0.5 0.5 0.3 0.1 0.2 0.05\n1 0.5 oops 0.3 0.1 0.2 0.05\n", 2, p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_labels("0 1.5 0.5 0.3 0.1 0.2 0.05", 2, p).is_err());
        assert!(parse_labels("5 0.5 0.5 0.3 0.1 0.2 0.05", 2, p).is_err());
        assert!(parse_labels("0 0.5 0.5", 2, p).is_err());
    }

    #[test]
    fn label_text_round_trip() {
        let boxes = vec![Box3D::labeled(1, 2, [0.25, 0.5, 0.75], [0.125, 0.0625, 0.5])];
        let back = parse_labels(&format_labels(&boxes), 2, Path::new("x")).unwrap();
        assert_eq!(back, boxes);
    }

    #[test]
    fn scene_spec_validation() {
        assert!(SceneSpec::default().validate().is_ok());
        let bad = SceneSpec {
            min_objects: 0,
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SceneSpec {
            depth_range_m: 0.0,
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_scenes_avoid_cell_collisions() {
        let spec = SceneSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g = random_scene(&mut rng, &spec);
            assert!((1..=5).contains(&g.objects.len()));
            for &s in &spec.collision_grids {
                let grid = crate::grid::encode_targets(&g.boxes(), &GridSpec::new(s, 2).unwrap()).unwrap();
                assert_eq!(grid.collisions(), 0);
            }
        }
    }

    #[test]
    fn painter_order_keeps_nearest_face() {
        let near = SceneObject {
            class_id: 0,
            center: [0.4, 0.5, 0.2],
            extent: [0.3, 0.3, 0.1],
            color: [1.0, 0.0, 0.0],
        };
        let far = SceneObject {
            class_id: 1,
            center: [0.6, 0.5, 0.6],
            extent: [0.3, 0.3, 0.2],
            color: [0.0, 0.0, 1.0],
        };
        // far object listed last so insertion order would paint it on top
        let geom = SceneGeometry {
            objects: vec![near.clone(), far.clone()],
            wall: WALL_DEPTH,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let size = 40;
        let (_, depth) = render_scene(&geom, size, DEPTH_RANGE_M, &mut rng);
        let mm = |z: f64| (z * 10000.0).round() as u16;
        let mut overlap = 0;
        for v in 0..size {
            for u in 0..size {
                let d = depth.get_pixel(u as u32, v as u32)[0];
                let expected = match (near.covers(u, v, size), far.covers(u, v, size)) {
                    (true, true) => {
                        overlap += 1;
                        mm(near.front())
                    }
                    (true, false) => mm(near.front()),
                    (false, true) => mm(far.front()),
                    (false, false) => mm(WALL_DEPTH),
                };
                assert_eq!(d, expected, "pixel ({u}, {v})");
            }
        }
        assert!(overlap > 0);
        assert_eq!(geom.boxes().len(), 2);
    }
}
