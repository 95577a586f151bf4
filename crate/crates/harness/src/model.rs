//! The full trainable system: adapter G, fusion M, detection head and the
//! domain classifier, plus per-sample forward passes.

use mpda_core::adapter::{AdapterPipeline, ResizerConfig};
use mpda_core::adversary::{domain_loss, grl, DomainClassifier, GrlSetting};
use mpda_core::autodiff::Var;
use mpda_core::fax_attention::FaxConfig;
use mpda_core::feature_core::FeatureMap;
use mpda_core::fusion_head::{detection_loss, DetLossParts, DetectionHead, FocalParams, FusionModel, RasterTargets};
use mpda_core::nn::{Binding, ParamStore};
use mpda_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::synth::{
    collaborator_features, extract_features, gen_scene, naive_align, DomainSpec, PseudoBackbone, SceneConfig,
    SceneSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub source: DomainSpec,
    pub fax: FaxConfig,
    pub fusion_heads: usize,
    pub fusion_head_dim: usize,
    pub n_repeats: usize,
    pub r_blocks: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            source: DomainSpec::source(),
            fax: FaxConfig::default(),
            fusion_heads: 4,
            fusion_head_dim: 8,
            n_repeats: 4,
            r_blocks: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub adapter: AdapterPipeline,
    pub fusion: FusionModel,
    pub head: DetectionHead,
    pub clf: DomainClassifier,
}

impl Model {
    /// Builds every component into a fresh store. Parameter names are
    /// prefixed `adapter.`, `fusion.`, `head.` and `clf.`.
    pub fn build<T: Real>(arch: Arch, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &arch.source;
        let rcfg = ResizerConfig {
            n_repeats: arch.n_repeats,
            r_blocks: arch.r_blocks,
            fax: arch.fax,
            rng_seed: seed,
            ..ResizerConfig::new(s.h, s.w, s.c)
        };
        let adapter = AdapterPipeline::new(&mut store, "adapter", rcfg, &mut rng)?;
        let fusion = FusionModel::new(&mut store, "fusion", s.c, arch.fusion_heads, arch.fusion_head_dim, &mut rng);
        let head = DetectionHead::new(&mut store, "head", s.c, &mut rng);
        let clf = DomainClassifier::new(&mut store, "clf", s.c, &mut rng);
        Ok((Self { arch, adapter, fusion, head, clf }, store))
    }
}

/// How collaborator features reach the fusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollabMode {
    /// Ignore collaborators.
    None,
    /// Feed them as-is (homogeneous collaborators).
    Direct,
    /// Through the learned adapter G.
    Adapter,
    /// Pre-aligned by bilinear resize and random channel selection.
    Naive,
}

/// One scene rendered for the ego and its collaborators.
#[derive(Debug, Clone)]
pub struct Sample<T: Real> {
    pub scene: SceneSpec,
    pub ego: FeatureMap<T>,
    pub collab: Option<FeatureMap<T>>,
    pub targets: RasterTargets,
}

/// Ego and collaborator domains with their fixed pseudo-backbones.
#[derive(Debug, Clone)]
pub struct World {
    pub source: DomainSpec,
    pub collab: DomainSpec,
    pub scenes: SceneConfig,
    source_bb: PseudoBackbone,
    collab_bb: PseudoBackbone,
}

impl World {
    pub fn new(source: DomainSpec, collab: DomainSpec, scenes: SceneConfig) -> Self {
        let source_bb = PseudoBackbone::new(&source);
        let collab_bb = PseudoBackbone::new(&collab);
        Self { source, collab, scenes, source_bb, collab_bb }
    }

    /// Renders a scene. Naive mode pre-aligns collaborators with a scene-seeded draw.
    pub fn sample<T: Real>(&self, seed: u64, mode: CollabMode) -> Sample<T> {
        let scene = gen_scene(seed, &self.scenes);
        let ego = extract_features(&scene, &self.source, &self.source_bb, 0);
        let collab = match mode {
            CollabMode::None => None,
            _ => collaborator_features(&scene, &self.collab, &self.collab_bb),
        };
        let collab = match (mode, collab) {
            (CollabMode::Naive, Some(fm)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e61_6976);
                Some(naive_align(&fm, self.source.h, self.source.w, self.source.c, &mut rng))
            }
            (_, c) => c,
        };
        let targets = RasterTargets::new(self.source.h, self.source.w, &scene.boxes);
        Sample { scene, ego, collab, targets }
    }

    pub fn samples<T: Real>(&self, seeds: &[u64], mode: CollabMode) -> Vec<Sample<T>> {
        seeds.iter().map(|&s| self.sample(s, mode)).collect()
    }
}

/// Tape values of one sample's forward pass.
pub struct Forward {
    pub head_out: Var,
    pub fused_collab: Option<Var>,
    pub ego: Var,
}

impl Model {
    /// Ego + collaborators -> detection head output `[1, H, W, 5]`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        b: &Binding<'_, T>,
        sample: &Sample<T>,
        mode: CollabMode,
        rng: &mut R,
    ) -> Result<Forward> {
        let t = b.tape();
        let ego = t.constant(sample.ego.data().clone());
        let collab = match (mode, &sample.collab) {
            (CollabMode::None, _) | (_, None) => None,
            (CollabMode::Direct | CollabMode::Naive, Some(fm)) => Some(t.constant(fm.data().clone())),
            (CollabMode::Adapter, Some(fm)) => {
                let plan = self.adapter.resizer.plan(fm.channels(), rng);
                Some(self.adapter.forward(b, t.constant(fm.data().clone()), ego, &plan)?)
            }
        };
        let v = self.fusion.forward(b, ego, collab)?;
        let head_out = self.head.forward(b, v)?;
        Ok(Forward { head_out, fused_collab: collab, ego })
    }

    /// `(L_det, L_domain)` for one sample. The domain branch exists only when
    /// collaborators pass through G; its gradient into G is scaled by `-grl.lambda`.
    pub fn losses<T: Real, R: Rng + ?Sized>(
        &self,
        b: &Binding<'_, T>,
        sample: &Sample<T>,
        mode: CollabMode,
        grl_setting: GrlSetting,
        rng: &mut R,
    ) -> Result<(Var, DetLossParts, Option<Var>)> {
        let f = self.forward(b, sample, mode, rng)?;
        let t = b.tape();
        let (l_det, parts) = detection_loss(t, f.head_out, &sample.targets, FocalParams::default())?;
        let l_dom = match (mode, f.fused_collab) {
            (CollabMode::Adapter, Some(c)) => {
                let ls = self.clf.forward(b, f.ego)?;
                let lt = self.clf.forward(b, grl(t, c, grl_setting))?;
                Some(domain_loss(t, ls, lt)?)
            }
            _ => None,
        };
        Ok((l_det, parts, l_dom))
    }

    /// Collaborator maps as the fusion model sees them (adapted, direct or naive).
    pub fn collaborator_view<T: Real>(
        &self,
        store: &ParamStore<T>,
        sample: &Sample<T>,
        mode: CollabMode,
    ) -> Result<Option<FeatureMap<T>>> {
        match (mode, &sample.collab) {
            (CollabMode::Adapter, Some(fm)) => Ok(Some(self.adapter.adapt(store, fm, &sample.ego)?)),
            (CollabMode::None, _) | (_, None) => Ok(None),
            (_, Some(fm)) => Ok(Some(fm.clone())),
        }
    }
}

/// Parameter-name filter for G.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("adapter.")
}

/// Parameter-name filter for the fusion model and detection head.
pub fn is_task_param(name: &str) -> bool {
    name.starts_with("fusion.") || name.starts_with("head.")
}
