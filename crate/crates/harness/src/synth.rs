//! Synthetic heterogeneous domains: scenes of boxes, per-agent visibility and
//! seeded pseudo-backbones that turn occupancy into feature maps.

use mpda_core::autodiff::Tape;
use mpda_core::feature_core::FeatureMap;
use mpda_core::fusion_head::{BBox, BoxSet};
use mpda_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HarnessError, Result};

pub const HIDDEN_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: &'static str,
    pub domain_id: u32,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// +1 objects bright, -1 objects dark.
    pub polarity: f64,
    pub kernel_seed: u64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn source() -> Self {
        Self { name: "dom_S", domain_id: 0, h: 32, w: 88, c: 64, polarity: -1.0, kernel_seed: 11, noise_sigma: 0.05 }
    }

    pub fn target_train() -> Self {
        Self { name: "dom_T_train", domain_id: 1, h: 24, w: 64, c: 96, polarity: 1.0, kernel_seed: 23, noise_sigma: 0.05 }
    }

    pub fn target_test() -> Self {
        Self { name: "dom_T_test", domain_id: 2, h: 16, w: 56, c: 128, polarity: 1.0, kernel_seed: 37, noise_sigma: 0.05 }
    }

    pub fn validate(&self, divisor: usize) -> Result<()> {
        if self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(HarnessError::Validation(format!("{}: empty dimensions", self.name)));
        }
        if self.h % divisor != 0 || self.w % divisor != 0 {
            return Err(HarnessError::Validation(format!(
                "{}: {}x{} not divisible by {divisor}",
                self.name, self.h, self.w
            )));
        }
        if self.polarity.abs() != 1.0 || !(self.noise_sigma >= 0.0) {
            return Err(HarnessError::Validation(format!("{}: bad polarity or noise", self.name)));
        }
        Ok(())
    }
}

/// Scene layout. Coordinates are in cells of a `canvas_h x canvas_w` grid,
/// which is the ego (source) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Collaborator count drawn uniformly from this inclusive range.
    pub min_collaborators: usize,
    pub max_collaborators: usize,
    pub p_visible: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let s = DomainSpec::source();
        Self {
            canvas_h: s.h,
            canvas_w: s.w,
            min_boxes: 2,
            max_boxes: 8,
            min_size: 2.0,
            max_size: 4.0,
            min_collaborators: 1,
            max_collaborators: 3,
            p_visible: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub boxes: BoxSet,
    /// `visible[agent][box]`; agent 0 is the ego.
    pub visible: Vec<Vec<bool>>,
}

impl SceneSpec {
    pub fn collaborators(&self) -> usize {
        self.visible.len() - 1
    }

    pub fn visible_boxes(&self, agent: usize) -> Vec<BBox> {
        self.boxes.boxes.iter().zip(&self.visible[agent]).filter(|(_, &v)| v).map(|(b, _)| *b).collect()
    }
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    (a.cx - b.cx).abs() < (a.w + b.w) / 2.0 + 0.5 && (a.cy - b.cy).abs() < (a.h + b.h) / 2.0 + 0.5
}

pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < target || boxes.len() < cfg.min_boxes {
        attempts += 1;
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let cx = rng.random_range(w / 2.0..=cfg.canvas_w as f64 - w / 2.0);
        let cy = rng.random_range(h / 2.0..=cfg.canvas_h as f64 - h / 2.0);
        let b = BBox { cx, cy, w, h, score: 1.0 };
        if attempts < 1000 && boxes.iter().any(|o| overlaps(o, &b)) {
            continue;
        }
        boxes.push(b);
    }
    let n = rng.random_range(cfg.min_collaborators..=cfg.max_collaborators);
    let mut visible = vec![vec![false; boxes.len()]; n + 1];
    for k in 0..boxes.len() {
        for row in visible.iter_mut() {
            row[k] = rng.random_bool(cfg.p_visible);
        }
        if visible.iter().all(|row| !row[k]) {
            let agent = if n == 0 { 0 } else { rng.random_range(1..=n) };
            visible[agent][k] = true;
        }
    }
    SceneSpec { seed, canvas: (cfg.canvas_h, cfg.canvas_w), boxes: BoxSet::new(boxes), visible }
}

/// Fraction of each cell of an `h x w` grid covered by the boxes, after
/// scaling canvas coordinates onto the grid. Overlaps saturate at 1.
pub fn occupancy(boxes: &[BBox], canvas: (usize, usize), h: usize, w: usize) -> Tensor<f64> {
    let sy = h as f64 / canvas.0 as f64;
    let sx = w as f64 / canvas.1 as f64;
    let mut occ = vec![0.0; h * w];
    for b in boxes {
        let (x0, x1) = ((b.cx - b.w / 2.0) * sx, (b.cx + b.w / 2.0) * sx);
        let (y0, y1) = ((b.cy - b.h / 2.0) * sy, (b.cy + b.h / 2.0) * sy);
        for i in (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize) {
            let oy = (y1.min(i as f64 + 1.0) - y0.max(i as f64)).max(0.0);
            for j in (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize) {
                let ox = (x1.min(j as f64 + 1.0) - x0.max(j as f64)).max(0.0);
                let cell = &mut occ[i * w + j];
                *cell = (*cell + ox * oy).min(1.0);
            }
        }
    }
    Tensor::from_vec(&[1, h, w, 1], occ).expect("shape")
}

/// Fixed two-layer 3x3 convolution stack `1 -> 8 -> C` with ReLUs and
/// positive-mean weights, seeded by the domain's kernel seed.
#[derive(Debug, Clone)]
pub struct PseudoBackbone {
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
}

impl PseudoBackbone {
    pub fn new(dom: &DomainSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(dom.kernel_seed ^ 0x5eed_ba5e);
        let mut draw = |n: usize, mean: f64, std: f64| -> Vec<f64> {
            let d = Normal::new(mean, std).expect("std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let w1 = Tensor::from_vec(&[9, HIDDEN_CHANNELS], draw(9 * HIDDEN_CHANNELS, 0.25, 0.15)).expect("shape");
        let b1 = Tensor::from_vec(&[HIDDEN_CHANNELS], draw(HIDDEN_CHANNELS, 0.0, 0.02)).expect("shape");
        let fan = (9 * HIDDEN_CHANNELS) as f64;
        let w2 = Tensor::from_vec(&[9 * HIDDEN_CHANNELS, dom.c], draw(9 * HIDDEN_CHANNELS * dom.c, 1.0 / fan, 1.0 / fan))
            .expect("shape");
        let b2 = Tensor::from_vec(&[dom.c], draw(dom.c, 0.0, 0.02)).expect("shape");
        Self { w1, b1, w2, b2 }
    }

    pub fn apply(&self, occ: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let x = tape.constant(occ.clone());
        let (w1, b1) = (tape.constant(self.w1.clone()), tape.constant(self.b1.clone()));
        let (w2, b2) = (tape.constant(self.w2.clone()), tape.constant(self.b2.clone()));
        let h = tape.relu(tape.conv3x3(x, w1, Some(b1)).expect("conv1"));
        let y = tape.relu(tape.conv3x3(h, w2, Some(b2)).expect("conv2"));
        (*tape.value(y)).clone()
    }
}

/// Feature map of what `agent` sees in `scene`, rendered in domain `dom`.
/// Noise is seeded by scene seed, agent and domain.
pub fn extract_features<T: Real>(
    scene: &SceneSpec,
    dom: &DomainSpec,
    backbone: &PseudoBackbone,
    agent: usize,
) -> FeatureMap<T> {
    let occ = occupancy(&scene.visible_boxes(agent), scene.canvas, dom.h, dom.w);
    let mut y = backbone.apply(&occ).map(|v| v * dom.polarity);
    if dom.noise_sigma > 0.0 {
        let seed = scene.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((agent as u64) << 32) ^ dom.domain_id as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, dom.noise_sigma).expect("sigma");
        for v in y.data_mut() {
            *v += d.sample(&mut rng);
        }
    }
    FeatureMap::new(y.cast(), dom.domain_id, vec![agent as u32]).expect("one agent")
}

/// Stacked collaborator maps `[N, H, W, C]` for agents `1..=N`, or `None` when N = 0.
pub fn collaborator_features<T: Real>(
    scene: &SceneSpec,
    dom: &DomainSpec,
    backbone: &PseudoBackbone,
) -> Option<FeatureMap<T>> {
    let maps: Vec<FeatureMap<T>> = (1..=scene.collaborators()).map(|a| extract_features(scene, dom, backbone, a)).collect();
    if maps.is_empty() {
        None
    } else {
        Some(FeatureMap::stack(&maps).expect("same domain"))
    }
}

/// Naive alignment: bilinear resize to the ego grid, then keep a random sorted
/// subset of `c` channels (or repeat channels when there are too few).
pub fn naive_align<T: Real, R: Rng + ?Sized>(fm: &FeatureMap<T>, h: usize, w: usize, c: usize, rng: &mut R) -> FeatureMap<T> {
    let resized = mpda_core::feature_core::bilinear_resize(fm.data(), h, w, Default::default()).expect("resize");
    let c_t = fm.channels();
    let keep: Vec<usize> = if c_t >= c {
        let mut idx = rand::seq::index::sample(rng, c_t, c).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..c).map(|i| if i < c_t { i } else { rng.random_range(0..c_t) }).collect()
    };
    let data: Vec<T> = resized.data().chunks(c_t).flat_map(|px| keep.iter().map(move |&k| px[k])).collect();
    let (a, _, _, _) = fm.dims();
    let t = Tensor::from_vec(&[a, h, w, c], data).expect("shape");
    FeatureMap::new(t, fm.domain_id(), fm.agent_ids().to_vec()).expect("ids")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupancy_of_a_cell_aligned_box() {
        let b = BBox { cx: 2.0, cy: 1.0, w: 2.0, h: 2.0, score: 1.0 };
        let occ = occupancy(&[b], (4, 4), 4, 4);
        let ones: Vec<usize> = occ.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![1, 2, 5, 6]);
        assert_eq!(occ.sum(), 4.0);
        let half = occupancy(&[b], (4, 4), 2, 2);
        assert_eq!(half.data(), &[0.5, 0.5, 0.0, 0.0]);
    }
}
