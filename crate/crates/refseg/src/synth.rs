//! Deterministic generator of referring-segmentation samples: scenes of
//! colored shapes, expressions from a typed grammar, exact footprint masks,
//! and per-word type labels.
//!
//! Every sample is a pure function of (dataset seed, sample id). Expressions
//! are unique by construction: an independent brute-force checker verifies
//! that each emitted expression matches exactly one entity in its scene.

use crate::error::{RefsegError, Result};
use crate::pnm;
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tapegrad::{derive_seed, SplitMix64, Tensor};

// Word-type label indices, matching the classifier's output order.
pub const TYPE_ENTITY: usize = 0;
pub const TYPE_ATTRIBUTE: usize = 1;
pub const TYPE_RELATION: usize = 2;
pub const TYPE_UNNECESSARY: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl ColorKind {
    pub const ALL: [ColorKind; 5] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::White,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::White => "white",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            ColorKind::Red => [0.90, 0.15, 0.15],
            ColorKind::Green => [0.15, 0.80, 0.20],
            ColorKind::Blue => [0.20, 0.30, 0.90],
            ColorKind::Yellow => [0.95, 0.90, 0.20],
            ColorKind::White => [0.95, 0.95, 0.95],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn name(&self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Tokens with their word-type labels ("of" is an unnecessary word).
    pub fn tokens(&self) -> Vec<(&'static str, usize)> {
        match self {
            Relation::LeftOf => vec![("left", TYPE_RELATION), ("of", TYPE_UNNECESSARY)],
            Relation::RightOf => vec![("right", TYPE_RELATION), ("of", TYPE_UNNECESSARY)],
            Relation::Above => vec![("above", TYPE_RELATION)],
            Relation::Below => vec![("below", TYPE_RELATION)],
        }
    }

    /// Pinned semantics on pixel centers: "a left of b" means a's center
    /// column is smaller and the row offset does not dominate the column
    /// offset (and symmetrically for the other three).
    pub fn holds(&self, a: &Entity, b: &Entity) -> bool {
        let (ay, ax) = a.center();
        let (by, bx) = b.center();
        let (dy, dx) = ((ay - by).abs(), (ax - bx).abs());
        match self {
            Relation::LeftOf => ax < bx && dy <= dx,
            Relation::RightOf => ax > bx && dy <= dx,
            Relation::Above => ay < by && dx <= dy,
            Relation::Below => ay > by && dx <= dy,
        }
    }
}

/// One colored shape, anchored by the top-left corner of its size x size
/// bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Entity {
    /// (row, col) center in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        let half = (self.size as f64 - 1.0) / 2.0;
        (self.top as f64 + half, self.left as f64 + half)
    }

    /// Half-open bounding box (top, left, bottom, right).
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, self.top + self.size, self.left + self.size)
    }

    /// Exact rasterization test for pixel (row, col).
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (t, l, b, r) = self.bbox();
        if row < t || row >= b || col < l || col >= r {
            return false;
        }
        let s = self.size as f64;
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let (cy, cx) = self.center();
                let (dy, dx) = (row as f64 - cy, col as f64 - cx);
                let radius = s / 2.0;
                dy * dy + dx * dx <= radius * radius
            }
            ShapeKind::Triangle => {
                // Apex at the top row, full-width base at the bottom row.
                let k = (row - t) as f64;
                let (_, cx) = self.center();
                (col as f64 - cx).abs() <= k / 2.0
            }
        }
    }

    pub fn footprint(&self, image_size: usize) -> Vec<bool> {
        let mut mask = vec![false; image_size * image_size];
        let (t, l, b, r) = self.bbox();
        for row in t..b.min(image_size) {
            for col in l..r.min(image_size) {
                mask[row * image_size + col] = self.contains(row, col);
            }
        }
        mask
    }
}

fn bboxes_disjoint_with_gap(a: &Entity, b: &Entity, gap: usize) -> bool {
    let (at, al, ab, ar) = a.bbox();
    let (bt, bl, bb, br) = b.bbox();
    ab + gap <= bt || bb + gap <= at || ar + gap <= bl || br + gap <= al
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image_size: usize,
    pub entities: Vec<Entity>,
}

/// Semantic content of an expression, independent of its surface tokens.
/// This is what the brute-force uniqueness checker interprets.
#[derive(Clone, Debug, PartialEq)]
pub enum ExprSemantics {
    Attr {
        color: ColorKind,
        shape: ShapeKind,
    },
    Rel {
        color: ColorKind,
        shape: ShapeKind,
        relation: Relation,
        landmark_color: ColorKind,
        landmark_shape: ShapeKind,
    },
}

#[derive(Clone, Debug)]
pub struct Expression {
    pub semantics: ExprSemantics,
    pub tokens: Vec<String>,
    pub types: Vec<usize>,
    pub referent: usize,
}

impl Expression {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn template_name(&self) -> &'static str {
        match self.semantics {
            ExprSemantics::Attr { .. } => "attribute",
            ExprSemantics::Rel { .. } => "relational",
        }
    }
}

/// All entities an expression's semantics could denote — the independent
/// oracle used to enforce (and test) referent uniqueness.
pub fn matching_entities(scene: &Scene, sem: &ExprSemantics) -> Vec<usize> {
    match sem {
        ExprSemantics::Attr { color, shape } => scene
            .entities
            .iter()
            .enumerate()
            .filter(|(_, e)| e.color == *color && e.shape == *shape)
            .map(|(i, _)| i)
            .collect(),
        ExprSemantics::Rel { color, shape, relation, landmark_color, landmark_shape } => {
            let landmarks: Vec<&Entity> = scene
                .entities
                .iter()
                .filter(|e| e.color == *landmark_color && e.shape == *landmark_shape)
                .collect();
            // An ambiguous landmark leaves the expression without a unique
            // reading, so nothing matches.
            if landmarks.len() != 1 {
                return Vec::new();
            }
            scene
                .entities
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    e.color == *color && e.shape == *shape && relation.holds(e, landmarks[0])
                })
                .map(|(i, _)| i)
                .collect()
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;
const SAMPLE_RETRIES: u64 = 64;
const MIN_ENTITY_SIZE: usize = 8;
const MAX_ENTITY_SIZE: usize = 12;

fn place_entities(
    combos: &[(ColorKind, ShapeKind)],
    image_size: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<Entity>> {
    let mut entities: Vec<Entity> = Vec::with_capacity(combos.len());
    let mut attempts = 0;
    for &(color, shape) in combos {
        loop {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS {
                return Err(RefsegError::Generation(format!(
                    "no non-overlapping placement after {PLACEMENT_ATTEMPTS} attempts"
                )));
            }
            let size = MIN_ENTITY_SIZE + rng.below(MAX_ENTITY_SIZE - MIN_ENTITY_SIZE + 1);
            if size + 2 > image_size {
                continue;
            }
            let top = 1 + rng.below(image_size - size - 1);
            let left = 1 + rng.below(image_size - size - 1);
            let candidate = Entity { shape, color, top, left, size };
            if entities.iter().all(|e| bboxes_disjoint_with_gap(e, &candidate, 1)) {
                entities.push(candidate);
                break;
            }
        }
    }
    Ok(entities)
}

/// Sample a scene of 2-4 disjoint entities. Half the scenes contain a
/// duplicated (color, shape) pair so only a relational expression can
/// single out the referent; the other half keep all pairs distinct.
pub fn generate_scene(seed: u64, image_size: usize) -> Result<Scene> {
    let mut rng = SplitMix64::new(seed);
    let mut combos: Vec<(ColorKind, ShapeKind)> = ColorKind::ALL
        .iter()
        .flat_map(|&c| ShapeKind::ALL.iter().map(move |&s| (c, s)))
        .collect();
    rng.shuffle(&mut combos);

    let relational = rng.below(2) == 1;
    let picked: Vec<(ColorKind, ShapeKind)> = if relational {
        // Twin pair plus 1-2 distinct fillers (a landmark must exist).
        let n_others = 1 + rng.below(2);
        let mut picked = vec![combos[0], combos[0]];
        picked.extend_from_slice(&combos[1..1 + n_others]);
        picked
    } else {
        let n = 2 + rng.below(3);
        combos[..n].to_vec()
    };

    let entities = place_entities(&picked, image_size, &mut rng)?;
    Ok(Scene { image_size, entities })
}

/// Flat-color rendering over a dark background, plus per-entity exact
/// footprint masks.
pub fn render(scene: &Scene) -> (Tensor, Vec<Vec<bool>>) {
    let n = scene.image_size;
    let background = [0.08, 0.08, 0.09];
    let mut image = Tensor::zeros(&[n, n, 3]);
    for px in 0..n * n {
        image.data[px * 3..px * 3 + 3].copy_from_slice(&background);
    }
    let footprints: Vec<Vec<bool>> = scene.entities.iter().map(|e| e.footprint(n)).collect();
    for (entity, footprint) in scene.entities.iter().zip(&footprints) {
        let rgb = entity.color.rgb();
        for (px, &inside) in footprint.iter().enumerate() {
            if inside {
                image.data[px * 3..px * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    (image, footprints)
}

fn combo_count(scene: &Scene, color: ColorKind, shape: ShapeKind) -> usize {
    scene.entities.iter().filter(|e| e.color == color && e.shape == shape).count()
}

/// Pick a template and referent such that the expression identifies exactly
/// one entity. Relational candidates are preferred when they exist, since
/// duplicated pairs are only resolvable through a relation.
pub fn generate_expression(scene: &Scene, seed: u64) -> Result<Expression> {
    let mut rng = SplitMix64::new(seed);

    // (referent, relation, landmark) triples where the referent's
    // (color, shape) pair is duplicated, the landmark's is unique, and the
    // relation holds for exactly one of the duplicates.
    let mut rel_options: Vec<(usize, Relation, usize)> = Vec::new();
    for (li, landmark) in scene.entities.iter().enumerate() {
        if combo_count(scene, landmark.color, landmark.shape) != 1 {
            continue;
        }
        for relation in Relation::ALL {
            for (ri, referent) in scene.entities.iter().enumerate() {
                if ri == li || combo_count(scene, referent.color, referent.shape) < 2 {
                    continue;
                }
                let full = ExprSemantics::Rel {
                    color: referent.color,
                    shape: referent.shape,
                    relation,
                    landmark_color: landmark.color,
                    landmark_shape: landmark.shape,
                };
                let matches = matching_entities(scene, &full);
                if matches == [ri] {
                    rel_options.push((ri, relation, li));
                }
            }
        }
    }

    if !rel_options.is_empty() {
        let (referent, relation, landmark_idx) = rel_options[rng.below(rel_options.len())];
        let target = &scene.entities[referent];
        let landmark = &scene.entities[landmark_idx];
        let mut tokens = vec![
            ("the".to_string(), TYPE_UNNECESSARY),
            (target.color.name().to_string(), TYPE_ATTRIBUTE),
            (target.shape.name().to_string(), TYPE_ENTITY),
        ];
        tokens.extend(relation.tokens().into_iter().map(|(t, ty)| (t.to_string(), ty)));
        tokens.push(("the".to_string(), TYPE_UNNECESSARY));
        tokens.push((landmark.color.name().to_string(), TYPE_ATTRIBUTE));
        tokens.push((landmark.shape.name().to_string(), TYPE_ENTITY));
        let (words, types) = tokens.into_iter().unzip();
        return Ok(Expression {
            semantics: ExprSemantics::Rel {
                color: target.color,
                shape: target.shape,
                relation,
                landmark_color: landmark.color,
                landmark_shape: landmark.shape,
            },
            tokens: words,
            types,
            referent,
        });
    }

    // Attribute template: any entity whose (color, shape) pair is unique.
    let attr_options: Vec<usize> = (0..scene.entities.len())
        .filter(|&i| combo_count(scene, scene.entities[i].color, scene.entities[i].shape) == 1)
        .collect();
    if attr_options.is_empty() {
        return Err(RefsegError::Generation("no unambiguous referent expressible".into()));
    }
    let referent = attr_options[rng.below(attr_options.len())];
    let target = &scene.entities[referent];
    let sem = ExprSemantics::Attr { color: target.color, shape: target.shape };
    debug_assert_eq!(matching_entities(scene, &sem), vec![referent]);
    Ok(Expression {
        semantics: sem,
        tokens: vec!["the".into(), target.color.name().into(), target.shape.name().into()],
        types: vec![TYPE_UNNECESSARY, TYPE_ATTRIBUTE, TYPE_ENTITY],
        referent,
    })
}

/// One fully materialized sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    pub expression: Expression,
    pub image: Tensor,
    /// Binary referent footprint, [H, W] of 0/1.
    pub mask: Tensor,
    pub seed: u64,
}

/// Generate a sample, retrying with derived seeds when scene placement or
/// expression construction fails.
pub fn build_sample(seed: u64, image_size: usize) -> Result<Sample> {
    for attempt in 0..SAMPLE_RETRIES {
        let attempt_seed = derive_seed(seed, "attempt", attempt);
        let scene = match generate_scene(derive_seed(attempt_seed, "scene", 0), image_size) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let expression = match generate_expression(&scene, derive_seed(attempt_seed, "expr", 0)) {
            Ok(e) => e,
            Err(_) => continue,
        };
        let (image, footprints) = render(&scene);
        let mask_data: Vec<f64> = footprints[expression.referent]
            .iter()
            .map(|&b| f64::from(b))
            .collect();
        let mask = Tensor::new(vec![image_size, image_size], mask_data);
        return Ok(Sample { scene, expression, image, mask, seed });
    }
    Err(RefsegError::Generation(format!(
        "sample seed {seed}: exhausted {SAMPLE_RETRIES} retries"
    )))
}

// ── Dataset files ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntityMeta {
    pub shape: String,
    pub color: String,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub split: String,
    pub image: String,
    pub mask: String,
    pub expression: String,
    pub tokens: Vec<String>,
    pub oracle_types: Vec<usize>,
    pub seed: u64,
    pub template: String,
    pub referent: usize,
    pub entities: Vec<EntityMeta>,
}

/// Write images, masks, vocabulary, and the JSONL manifest for a dataset of
/// `n_train` + `n_val` samples with disjoint per-sample seed streams.
pub fn build_dataset(
    root: &Path,
    seed: u64,
    n_train: usize,
    n_val: usize,
    image_size: usize,
) -> Result<Vec<SampleRecord>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    std::fs::create_dir_all(&images_dir)
        .map_err(RefsegError::io(format!("creating {}", images_dir.display())))?;
    std::fs::create_dir_all(&masks_dir)
        .map_err(RefsegError::io(format!("creating {}", masks_dir.display())))?;
    Vocabulary::closed().save(&root.join("vocab.txt"))?;

    let mut records = Vec::with_capacity(n_train + n_val);
    let mut manifest = String::new();
    for id in 0..n_train + n_val {
        let split = if id < n_train { "train" } else { "val" };
        let sample_seed = derive_seed(seed, "sample", id as u64);
        let sample = build_sample(sample_seed, image_size)?;
        let image_rel = format!("images/{id:05}.ppm");
        let mask_rel = format!("masks/{id:05}.pgm");
        pnm::write_ppm(&root.join(&image_rel), &sample.image)?;
        pnm::write_mask_pgm(&root.join(&mask_rel), &sample.mask)?;
        let record = SampleRecord {
            id,
            split: split.to_string(),
            image: image_rel,
            mask: mask_rel,
            expression: sample.expression.text(),
            tokens: sample.expression.tokens.clone(),
            oracle_types: sample.expression.types.clone(),
            seed: sample_seed,
            template: sample.expression.template_name().to_string(),
            referent: sample.expression.referent,
            entities: sample
                .scene
                .entities
                .iter()
                .map(|e| EntityMeta {
                    shape: e.shape.name().to_string(),
                    color: e.color.name().to_string(),
                    top: e.top,
                    left: e.left,
                    size: e.size,
                })
                .collect(),
        };
        manifest.push_str(
            &serde_json::to_string(&record).map_err(RefsegError::json("manifest record"))?,
        );
        manifest.push('\n');
        records.push(record);
    }
    std::fs::write(root.join("manifest.jsonl"), manifest)
        .map_err(RefsegError::io(format!("writing {}", root.join("manifest.jsonl").display())))?;
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(RefsegError::io(format!("reading {}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(RefsegError::json("manifest line")))
        .collect()
}

/// A dataset on disk: manifest, vocabulary, and lazily loaded assets.
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub vocab: Vocabulary,
}

/// One sample loaded into tensors, ready for the model.
pub struct LoadedSample {
    pub id: usize,
    pub image: Tensor,
    pub mask: Tensor,
    pub token_ids: Vec<usize>,
    pub oracle_types: Vec<usize>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let records = load_manifest(&root.join("manifest.jsonl"))?;
        let vocab = Vocabulary::load(&root.join("vocab.txt"))?;
        Ok(Dataset { root: root.to_path_buf(), records, vocab })
    }

    pub fn split(&self, name: &str) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }

    pub fn load(&self, record: &SampleRecord) -> Result<LoadedSample> {
        let image = pnm::read_ppm(&self.root.join(&record.image))?;
        let mask = pnm::read_mask_pgm(&self.root.join(&record.mask))?;
        let token_ids = record
            .tokens
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(crate::vocab::UNK))
            .collect();
        Ok(LoadedSample {
            id: record.id,
            image,
            mask,
            token_ids,
            oracle_types: record.oracle_types.clone(),
        })
    }
}
