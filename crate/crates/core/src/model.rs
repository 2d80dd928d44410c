//! The three networks trained together: generator `G`, discriminator `D`,
//! and the retrieval branch `R` (street encoder plus one aggregation module
//! per view).

use candle_core::{DType, Device, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::generator::Generator;
use crate::nn::{Mode, ParamStore};
use crate::raster::{RasterImage, ValueRange};
use crate::retrieval::{Descriptor, SpatialAggregation, StreetEncoder};

/// Images per forward pass when embedding or synthesizing outside training.
pub const INFERENCE_BATCH: usize = 16;

/// Parameter store names, in checkpoint order.
pub const STORE_NAMES: [&str; 3] = ["generator", "discriminator", "retrieval"];

pub struct Networks {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub street: StreetEncoder,
    pub sa_sat: SpatialAggregation,
    pub sa_street: SpatialAggregation,
    pub g_store: ParamStore,
    pub d_store: ParamStore,
    pub r_store: ParamStore,
}

/// Independent initialization seeds for G, D and R.
fn store_seeds(seed: u64) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.next_u64(), rng.next_u64(), rng.next_u64()]
}

impl Networks {
    pub fn new(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let [gs, ds, rs] = store_seeds(cfg.seed);
        let g_store = ParamStore::new(gs, dtype, device);
        let d_store = ParamStore::new(ds, dtype, device);
        let r_store = ParamStore::new(rs, dtype, device);

        let gen_cfg = cfg.generator();
        let generator = Generator::new(&g_store.root(), gen_cfg)?;
        let discriminator = Discriminator::new(&d_store.root(), cfg.discriminator())?;
        let r = r_store.root();
        let street = StreetEncoder::new(&r.pp("street"), cfg.street_encoder())?;
        let (_, h, w) = gen_cfg.bottleneck_shape();
        let sa_sat = SpatialAggregation::new(&r.pp("sa_sat"), &cfg.model.aggregation, h, w)?;
        let sa_street = SpatialAggregation::new(&r.pp("sa_street"), &cfg.model.aggregation, h, w)?;
        Ok(Self {
            generator,
            discriminator,
            street,
            sa_sat,
            sa_street,
            g_store,
            d_store,
            r_store,
        })
    }

    /// Networks with the weights stored in `ck`, built from its config.
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let nets = Self::new(&ck.meta.config, DType::F32, device)?;
        for (name, store) in nets.stores() {
            ck.restore_store(name, store)?;
        }
        Ok(nets)
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [
            (STORE_NAMES[0], &self.g_store),
            (STORE_NAMES[1], &self.d_store),
            (STORE_NAMES[2], &self.r_store),
        ]
    }

    pub fn dtype(&self) -> DType {
        self.g_store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.g_store.device()
    }

    /// Satellite-side descriptors `(N, D)` from polar images `(N, 3, H, W)`.
    pub fn satellite_descriptors(&self, polar: &Tensor, mode: Mode) -> Result<Tensor> {
        let enc = self.generator.encode(polar, mode)?;
        Ok(self.sa_sat.forward(&enc.bottleneck)?.descriptor)
    }

    /// Street-side descriptors `(N, D)` from panoramas `(N, 3, H, W)`.
    pub fn street_descriptors(&self, street: &Tensor, mode: Mode) -> Result<Tensor> {
        let features = self.street.forward(street, mode)?;
        Ok(self.sa_street.forward(&features)?.descriptor)
    }

    fn batched<T>(
        &self,
        images: &[RasterImage],
        mut f: impl FnMut(&Tensor) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_BATCH) {
            let refs: Vec<&RasterImage> = chunk.iter().collect();
            let x = RasterImage::stack(&refs, self.dtype(), self.device())?;
            out.extend(f(&x)?);
        }
        Ok(out)
    }

    /// Descriptors for `[-1, 1]` polar images, computed in eval mode.
    pub fn embed_satellites(&self, polar: &[RasterImage]) -> Result<Vec<Descriptor>> {
        self.batched(polar, |x| Descriptor::from_rows(&self.satellite_descriptors(x, Mode::Eval)?))
    }

    /// Descriptors for `[-1, 1]` street panoramas, computed in eval mode.
    pub fn embed_streets(&self, street: &[RasterImage]) -> Result<Vec<Descriptor>> {
        self.batched(street, |x| Descriptor::from_rows(&self.street_descriptors(x, Mode::Eval)?))
    }

    /// Generated panoramas in `[-1, 1]` for `[-1, 1]` polar images.
    pub fn synthesize(&self, polar: &[RasterImage]) -> Result<Vec<RasterImage>> {
        self.batched(polar, |x| {
            let (out, _) = self.generator.forward(x, Mode::Eval)?;
            RasterImage::unstack(&out, ValueRange::Signed)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polar::PolarParams;

    pub(crate) fn toy_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.geometry = PolarParams::new(32, 16, 88);
        c.batch_size = 2;
        c.model.generator_channels = 4;
        c.model.bottleneck_blocks = 2;
        c.model.discriminator_channels = 4;
        c.model.street_channels = 8;
        c.model.street_blocks = [1, 1, 1];
        c
    }

    #[test]
    fn descriptor_lengths_agree() {
        let cfg = toy_config();
        let nets = Networks::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((2, 3, 16, 88), DType::F32, &Device::Cpu).unwrap();
        let s = nets.satellite_descriptors(&x, Mode::Eval).unwrap();
        let t = nets.street_descriptors(&x, Mode::Eval).unwrap();
        assert_eq!(s.dims(), &[2, cfg.descriptor_len()]);
        assert_eq!(t.dims(), s.dims());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = toy_config();
        let a = Networks::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let b = Networks::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        for ((_, sa), (_, sb)) in a.stores().iter().zip(b.stores().iter()) {
            assert_eq!(sa.digest().unwrap(), sb.digest().unwrap());
        }
        assert_ne!(a.g_store.digest().unwrap(), a.r_store.digest().unwrap());
    }
}
