//! Small deterministic voters for desk-scale runs and tests.
//!
//! They look only at block-averaged colours, which makes them insensitive to
//! zero-mean high-frequency noise and sensitive to tone shifts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ConsistencyError, Detection, Task, TaskPrediction, VoterModel};
use crate::image::Image;

/// Per-cell mean RGB over a `grid x grid` partition, in [0, 255].
fn block_means(img: &Image, grid: u32) -> Vec<[f64; 3]> {
    let (w, h) = img.dimensions();
    let mut out = Vec::with_capacity((grid * grid) as usize);
    for gy in 0..grid {
        for gx in 0..grid {
            let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
            let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
            let mut acc = [0.0; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)).max(1) as f64;
            out.push(acc.map(|v| v / n));
        }
    }
    out
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Linear classifier over block-mean colours with seeded Gaussian weights.
#[derive(Debug, Clone)]
pub struct BlockClassifier {
    id: String,
    grid: u32,
    gain: f64,
    weights: Vec<Vec<f64>>,
}

impl BlockClassifier {
    pub fn new(id: impl Into<String>, seed: u64, grid: u32, classes: usize, gain: f64) -> Self {
        let n = (3 * grid * grid) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n as f64).sqrt();
        let weights = (0..classes.max(2))
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect()
            })
            .collect();
        Self {
            id: id.into(),
            grid: grid.max(1),
            gain,
            weights,
        }
    }
}

impl VoterModel for BlockClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn task(&self) -> Task {
        Task::Classification
    }

    fn predict(&self, img: &Image) -> Result<TaskPrediction, ConsistencyError> {
        let feats: Vec<f64> = block_means(img, self.grid)
            .into_iter()
            .flat_map(|p| p.map(|v| v / 255.0 - 0.5))
            .collect();
        let logits = self
            .weights
            .iter()
            .map(|w| self.gain * w.iter().zip(&feats).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(TaskPrediction::Classification { logits })
    }
}

/// Semantic map from quantized block luminance, painted at pixel resolution.
#[derive(Debug, Clone)]
pub struct BlockSegmenter {
    id: String,
    grid: u32,
    levels: u32,
}

impl BlockSegmenter {
    pub fn new(id: impl Into<String>, grid: u32, levels: u32) -> Self {
        Self {
            id: id.into(),
            grid: grid.max(1),
            levels: levels.max(2),
        }
    }
}

impl VoterModel for BlockSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn task(&self) -> Task {
        Task::SemanticSegmentation
    }

    fn predict(&self, img: &Image) -> Result<TaskPrediction, ConsistencyError> {
        let (w, h) = img.dimensions();
        let cells: Vec<u32> = block_means(img, self.grid)
            .into_iter()
            .map(|p| ((luma(p) / 256.0 * self.levels as f64) as u32).min(self.levels - 1))
            .collect();
        let mut classes = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            let gy = (y * self.grid / h).min(self.grid - 1);
            for x in 0..w {
                let gx = (x * self.grid / w).min(self.grid - 1);
                classes.push(cells[(gy * self.grid + gx) as usize]);
            }
        }
        Ok(TaskPrediction::SemanticMap {
            width: w,
            height: h,
            classes,
        })
    }
}

/// Boxes around 4-connected components of bright cells; the class is the
/// component's dominant channel.
#[derive(Debug, Clone)]
pub struct BlockDetector {
    id: String,
    grid: u32,
    threshold: f64,
}

impl BlockDetector {
    pub fn new(id: impl Into<String>, grid: u32, threshold: f64) -> Self {
        Self {
            id: id.into(),
            grid: grid.max(1),
            threshold,
        }
    }
}

impl VoterModel for BlockDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn task(&self) -> Task {
        Task::Detection
    }

    fn predict(&self, img: &Image) -> Result<TaskPrediction, ConsistencyError> {
        let g = self.grid as usize;
        let (w, h) = (img.width() as f64, img.height() as f64);
        let means = block_means(img, self.grid);
        let on: Vec<bool> = means.iter().map(|&p| luma(p) > self.threshold).collect();
        let mut seen = vec![false; g * g];
        let mut out = Vec::new();
        for start in 0..g * g {
            if !on[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let (mut x0, mut y0, mut x1, mut y1) = (g, g, 0, 0);
            let mut sum = [0.0; 3];
            let mut n = 0.0;
            while let Some(i) = stack.pop() {
                let (cx, cy) = (i % g, i / g);
                x0 = x0.min(cx);
                y0 = y0.min(cy);
                x1 = x1.max(cx + 1);
                y1 = y1.max(cy + 1);
                for c in 0..3 {
                    sum[c] += means[i][c];
                }
                n += 1.0;
                let mut push = |j: usize| {
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if cx > 0 {
                    push(i - 1);
                }
                if cx + 1 < g {
                    push(i + 1);
                }
                if cy > 0 {
                    push(i - g);
                }
                if cy + 1 < g {
                    push(i + g);
                }
            }
            let mean = sum.map(|v| v / n);
            let class_id = (0..3).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap_or(0) as u32;
            let confidence = (0.3 + (luma(mean) - self.threshold) / 100.0).clamp(0.3, 1.0);
            let sx = w / g as f64;
            let sy = h / g as f64;
            out.push(Detection::new(
                [x0 as f64 * sx, y0 as f64 * sy, x1 as f64 * sx, y1 as f64 * sy],
                class_id,
                confidence,
            ));
        }
        Ok(TaskPrediction::Detections(out))
    }
}

/// Returns a fixed prediction per image content hash. Test fixture.
#[derive(Debug, Clone)]
pub struct LookupVoter {
    id: String,
    task: Task,
    table: BTreeMap<String, TaskPrediction>,
}

impl LookupVoter {
    pub fn new(id: impl Into<String>, task: Task) -> Self {
        Self {
            id: id.into(),
            task,
            table: BTreeMap::new(),
        }
    }

    pub fn with(mut self, img: &Image, pred: TaskPrediction) -> Self {
        self.table.insert(img.content_hash(), pred);
        self
    }
}

impl VoterModel for LookupVoter {
    fn id(&self) -> &str {
        &self.id
    }

    fn task(&self) -> Task {
        self.task
    }

    fn predict(&self, img: &Image) -> Result<TaskPrediction, ConsistencyError> {
        self.table
            .get(&img.content_hash())
            .cloned()
            .ok_or_else(|| ConsistencyError::Voter(self.id.clone(), "image not in table".into()))
    }
}

/// One entry of a voter pool config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VoterSpec {
    BlockClassifier {
        id: String,
        seed: u64,
        #[serde(default = "default_grid")]
        grid: u32,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_gain")]
        gain: f64,
    },
    BlockSegmenter {
        id: String,
        #[serde(default = "default_grid")]
        grid: u32,
        #[serde(default = "default_levels")]
        levels: u32,
    },
    BlockDetector {
        id: String,
        #[serde(default = "default_grid")]
        grid: u32,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

fn default_grid() -> u32 {
    8
}
fn default_classes() -> usize {
    10
}
fn default_gain() -> f64 {
    8.0
}
fn default_levels() -> u32 {
    8
}
fn default_threshold() -> f64 {
    128.0
}

impl VoterSpec {
    pub fn build(&self) -> Box<dyn VoterModel> {
        match self {
            VoterSpec::BlockClassifier {
                id,
                seed,
                grid,
                classes,
                gain,
            } => Box::new(BlockClassifier::new(id.clone(), *seed, *grid, *classes, *gain)),
            VoterSpec::BlockSegmenter { id, grid, levels } => {
                Box::new(BlockSegmenter::new(id.clone(), *grid, *levels))
            }
            VoterSpec::BlockDetector {
                id,
                grid,
                threshold,
            } => Box::new(BlockDetector::new(id.clone(), *grid, *threshold)),
        }
    }
}

/// Voter pool config file: `[[voter]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterPoolConfig {
    #[serde(rename = "voter")]
    pub voters: Vec<VoterSpec>,
}

impl VoterPoolConfig {
    pub fn parse(text: &str) -> Result<Self, ConsistencyError> {
        toml::from_str(text).map_err(|e| ConsistencyError::InvalidPrediction(format!("voter config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConsistencyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConsistencyError::InvalidPrediction(format!("voter config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn build(&self) -> Vec<Box<dyn VoterModel>> {
        self.voters.iter().map(VoterSpec::build).collect()
    }

    /// Three voters used by the desk-scale pipeline run.
    pub fn desk() -> Self {
        Self {
            voters: vec![
                VoterSpec::BlockClassifier {
                    id: "block_cls_a".into(),
                    seed: 11,
                    grid: 4,
                    classes: 10,
                    gain: 8.0,
                },
                VoterSpec::BlockClassifier {
                    id: "block_cls_b".into(),
                    seed: 29,
                    grid: 8,
                    classes: 20,
                    gain: 12.0,
                },
                VoterSpec::BlockSegmenter {
                    id: "block_seg".into(),
                    grid: 4,
                    levels: 16,
                },
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::discrepancy;
    use crate::synthetic::reference_image;

    #[test]
    fn voters_are_deterministic_and_self_consistent() {
        let img = reference_image(64, 64, 3);
        let pool = VoterPoolConfig {
            voters: vec![
                VoterSpec::BlockClassifier {
                    id: "c".into(),
                    seed: 1,
                    grid: 4,
                    classes: 5,
                    gain: 8.0,
                },
                VoterSpec::BlockSegmenter {
                    id: "s".into(),
                    grid: 4,
                    levels: 8,
                },
                VoterSpec::BlockDetector {
                    id: "d".into(),
                    grid: 8,
                    threshold: 60.0,
                },
            ],
        };
        for v in pool.build() {
            let a = v.predict(&img).unwrap();
            assert_eq!(a, v.predict(&img).unwrap());
            match discrepancy(v.task(), &a, &a) {
                Ok(d) => assert_eq!(d, 0.0, "{}", v.id()),
                Err(ConsistencyError::EmptyReference) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn config_parses() {
        let cfg = VoterPoolConfig::parse(
            r#"
            [[voter]]
            kind = "block_classifier"
            id = "a"
            seed = 3
            [[voter]]
            kind = "block_detector"
            id = "b"
            threshold = 90.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.voters.len(), 2);
        assert_eq!(cfg.build()[1].task(), Task::Detection);
    }
}
