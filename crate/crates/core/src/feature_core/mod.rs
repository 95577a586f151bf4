//! Rank-4 BEV feature maps `[agents, height, width, channels]`, bilinear
//! resizing, channel-energy visualization and the FMAP exchange format.

pub(crate) mod io;
mod resize;
mod viz;

pub use io::{decode_fmap, encode_fmap, read_fmap, write_fmap, FMAP_MAGIC, FMAP_VERSION};
pub use resize::{bilinear_resize, bilinear_resize_var, ResizeMode, ResizePolicy};
pub use viz::{normalize_to_u8, viz_export, write_pgm};

use crate::error::{ensure, Result};
use crate::tensor::{Precision, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    data: Tensor<T>,
    domain_id: u32,
    agent_ids: Vec<u32>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>, domain_id: u32, agent_ids: Vec<u32>) -> Result<Self> {
        ensure!(data.rank() == 4, Shape, "feature map must be [A,H,W,C], got {:?}", data.shape());
        ensure!(
            data.shape().iter().all(|&d| d >= 1),
            Dimension,
            "feature map dims must be positive, got {:?}",
            data.shape()
        );
        ensure!(
            agent_ids.len() == data.shape()[0],
            InvalidArgument,
            "{} agent ids for {} agents",
            agent_ids.len(),
            data.shape()[0]
        );
        ensure!(data.is_finite(), NonFinite, "feature map (domain {domain_id})");
        Ok(Self { data, domain_id, agent_ids })
    }

    /// Agent ids default to `0..A`.
    pub fn from_tensor(data: Tensor<T>, domain_id: u32) -> Result<Self> {
        let a = data.shape().first().copied().unwrap_or(0);
        Self::new(data, domain_id, (0..a as u32).collect())
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn domain_id(&self) -> u32 {
        self.domain_id
    }

    pub fn agent_ids(&self) -> &[u32] {
        &self.agent_ids
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// `(A, H, W, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn agents(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// Single-agent slice `a`.
    pub fn agent(&self, a: usize) -> Result<Self> {
        let (n, h, w, c) = self.dims();
        ensure!(a < n, Dimension, "agent {a} out of range for {n} agents");
        let len = h * w * c;
        let data = Tensor::from_vec(&[1, h, w, c], self.data.data()[a * len..(a + 1) * len].to_vec())?;
        Ok(Self { data, domain_id: self.domain_id, agent_ids: vec![self.agent_ids[a]] })
    }

    /// Stacks single- or multi-agent maps of one domain along the agent axis.
    pub fn stack(maps: &[Self]) -> Result<Self> {
        ensure!(!maps.is_empty(), InvalidArgument, "stack of no feature maps");
        let (_, h, w, c) = maps[0].dims();
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for m in maps {
            let (_, mh, mw, mc) = m.dims();
            ensure!(
                (mh, mw, mc) == (h, w, c),
                Shape,
                "cannot stack {:?} with {:?}",
                m.data.shape(),
                maps[0].data.shape()
            );
            data.extend_from_slice(m.data.data());
            ids.extend_from_slice(&m.agent_ids);
        }
        let a = ids.len();
        Self::new(Tensor::from_vec(&[a, h, w, c], data)?, maps[0].domain_id, ids)
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap { data: self.data.cast(), domain_id: self.domain_id, agent_ids: self.agent_ids.clone() }
    }

    pub fn with_domain(mut self, domain_id: u32) -> Self {
        self.domain_id = domain_id;
        self
    }
}

/// `out[a, i, j] = sum_c |x[a, i, j, c]|`, shape `[A, H, W]`.
pub fn abs_channel_sum<T: Real>(fm: &FeatureMap<T>) -> Tensor<T> {
    let (a, h, w, c) = fm.dims();
    let data = fm.data.data().chunks(c).map(|px| px.iter().map(|v| v.abs()).sum()).collect();
    Tensor::from_vec(&[a, h, w], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_maps() {
        let t = Tensor::<f32>::zeros(&[2, 2, 2, 1]);
        assert!(FeatureMap::new(t.clone(), 0, vec![0]).is_err());
        assert!(FeatureMap::new(t.clone(), 0, vec![0, 1]).is_ok());
        let mut bad = t;
        bad.data_mut()[3] = f32::NAN;
        assert!(FeatureMap::new(bad, 0, vec![0, 1]).is_err());
        assert!(FeatureMap::from_tensor(Tensor::<f32>::zeros(&[1, 0, 2, 1]), 0).is_err());
    }

    #[test]
    fn abs_sum_examples() {
        let single = FeatureMap::from_tensor(
            Tensor::<f64>::from_vec(&[1, 2, 2, 1], vec![0.0, 1.5, 2.0, 7.0]).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(abs_channel_sum(&single).data(), &[0.0, 1.5, 2.0, 7.0]);

        let mut pm = Vec::new();
        for _ in 0..6 {
            pm.extend([1.0, -1.0]);
        }
        let two = FeatureMap::from_tensor(Tensor::<f64>::from_vec(&[1, 2, 3, 2], pm).unwrap(), 0).unwrap();
        assert!(abs_channel_sum(&two).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn abs_sum_matches_element_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let fm = FeatureMap::from_tensor(t.clone(), 0).unwrap();
        let out = abs_channel_sum(&fm);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += t.data()[(i * 2 + j) * 3 + c].abs();
                }
                assert_eq!(out.data()[i * 2 + j], acc);
            }
        }
    }
}
