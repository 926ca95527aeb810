//! Model assembly. Trans-CBCT is encoder → fusion → head; Trans²-CBCT adds
//! the point transformer between fusion and head.

use std::fmt;
use std::str::FromStr;

use cbct_core::{ProjectionSet, ScannerGeometry};
use cbct_nn::{BatchStats, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, FEATURE_CHANNELS, FUSED_DIM};
use crate::fusion::{project_points, query_point_features, world_from_model, FeatureSet};
use crate::head::Head;
use crate::pointtrans::{Neighborhood, PointTransformer, PointTransformerConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelVariant {
    Trans,
    #[default]
    Trans2,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::Trans => "trans",
            ModelVariant::Trans2 => "trans2",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trans" => Ok(ModelVariant::Trans),
            "trans2" => Ok(ModelVariant::Trans2),
            _ => Err(Error::InvalidArgument(format!("unknown model '{s}' (expected trans or trans2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: EncoderConfig,
    pub features: FeatureSet,
    pub pointtrans: PointTransformerConfig,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::Trans2,
            encoder: EncoderConfig::default(),
            features: FeatureSet::Full,
            pointtrans: PointTransformerConfig::default(),
            head_hidden: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pointtrans: Option<PointTransformer>,
    pub head: Head,
}

/// Output of [`Model::predict`].
pub struct Prediction {
    /// `[N, 1]` attenuations in `(0,1)`.
    pub values: Var,
    pub batch_stats: Option<BatchStats>,
    pub invisible_points: usize,
}

impl Model {
    /// Builds a freshly initialized model; all randomness comes from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, cfg.encoder.clone())?;
        let dim = cfg.features.dim();
        let full: usize = FEATURE_CHANNELS.iter().sum();
        if full != FUSED_DIM || (cfg.features == FeatureSet::Full && dim != FUSED_DIM) {
            return Err(Error::Shape(format!("fused feature width {dim}, expected {FUSED_DIM}")));
        }
        let pointtrans = match cfg.variant {
            ModelVariant::Trans => None,
            ModelVariant::Trans2 => Some(PointTransformer::new(&mut store, &mut rng, cfg.pointtrans.clone(), dim)?),
        };
        if cfg.head_hidden == 0 {
            return Err(Error::InvalidArgument("head width must be positive".into()));
        }
        let head = Head::new(&mut store, &mut rng, dim, cfg.head_hidden);
        Ok(Self { cfg, store, encoder, pointtrans, head })
    }

    /// Width of the per-point feature fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.cfg.features.dim()
    }

    /// `[M,1,H,W]` stack of a projection set, divided by its global maximum.
    pub fn view_tensor(projections: &ProjectionSet) -> Result<Tensor> {
        let first = projections
            .images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty projection set".into()))?;
        let norm = projections.normalized();
        let (w, h) = (first.width, first.height);
        let data: Vec<f64> = norm.images.iter().flat_map(|im| im.data.iter().copied()).collect();
        Ok(Tensor::from_vec(&[projections.len(), 1, h, w], data))
    }

    pub fn encode(&self, g: &mut Graph, views: &Tensor) -> Result<FeaturePyramid> {
        self.encoder.check_input(views.shape())?;
        let x = g.input(views.clone());
        self.encoder.encode(g, &self.store, x)
    }

    /// Neighborhood of a point set for the point transformer (`None` for
    /// Trans-CBCT).
    pub fn neighborhood(&self, coords: &[[f64; 3]]) -> Result<Option<Neighborhood>> {
        match &self.pointtrans {
            None => Ok(None),
            Some(pt) => Ok(Some(Neighborhood::build(coords, pt.cfg.k, pt.cfg.sigma)?)),
        }
    }

    /// Predicts attenuation at `coords` (model coordinates) from encoded
    /// views. `nb` is required for Trans²-CBCT.
    pub fn predict(
        &self,
        g: &mut Graph,
        pyramid: &FeaturePyramid,
        geom: &ScannerGeometry,
        angles_deg: &[f64],
        coords: &[[f64; 3]],
        nb: Option<&Neighborhood>,
    ) -> Result<Prediction> {
        let world: Vec<[f64; 3]> = coords.iter().map(|&q| world_from_model(geom, q)).collect();
        let proj = project_points(geom, angles_deg, &world)?;
        let mut x = query_point_features(g, pyramid, &proj, self.cfg.features)?;
        if let Some(pt) = &self.pointtrans {
            let nb = nb.ok_or_else(|| Error::InvalidArgument("point transformer needs a neighborhood".into()))?;
            x = pt.forward(g, &self.store, coords, nb, x)?;
        }
        let (values, batch_stats) = self.head.forward(g, &self.store, x)?;
        Ok(Prediction { values, batch_stats, invisible_points: proj.invisible_everywhere })
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }
}
