use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{cosine_similarity, softmax, FeatureSource, FeatureVector, Linear, PerceptionError, WindowSample};

/// Projections and weighting for global/region feature fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub projection_global: Linear,
    pub projection_region: Linear,
    pub fusion_dim: usize,
    pub temperature: f64,
    /// Append the window's sound feature to the GRU input. Off by default.
    #[serde(default)]
    pub include_sound: bool,
}

impl FusionConfig {
    pub fn new(
        projection_global: Linear,
        projection_region: Linear,
        temperature: f64,
    ) -> Result<Self, PerceptionError> {
        let fusion_dim = projection_global.output_dim();
        if projection_region.output_dim() != fusion_dim {
            return Err(PerceptionError::DimensionMismatch {
                expected: fusion_dim,
                got: projection_region.output_dim(),
                context: "region projection output",
            });
        }
        if fusion_dim == 0 {
            return Err(PerceptionError::InvalidParameter("fusion_dim must be positive".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(PerceptionError::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(FusionConfig {
            projection_global,
            projection_region,
            fusion_dim,
            temperature,
            include_sound: false,
        })
    }
}

fn expect_source(v: &FeatureVector, expected: FeatureSource) -> Result<(), PerceptionError> {
    if v.source != expected {
        return Err(PerceptionError::WrongSource {
            expected,
            got: v.source,
        });
    }
    Ok(())
}

/// Weights for `[global, region_1, ..]`: softmax of cosine similarity to the
/// global feature over the temperature, with the global term fixed at 1.0.
pub fn fusion_weights(
    global: &FeatureVector,
    regions: &[FeatureVector],
    temperature: f64,
) -> Result<Vec<f64>, PerceptionError> {
    let mut logits = Vec::with_capacity(regions.len() + 1);
    logits.push(1.0 / temperature);
    for r in regions {
        if r.dims() != global.dims() {
            return Err(PerceptionError::DimensionMismatch {
                expected: global.dims(),
                got: r.dims(),
                context: "region vs global",
            });
        }
        let cos = cosine_similarity(&global.values, &r.values).ok_or(PerceptionError::ZeroNorm(
            if super::norm(&global.values) == 0.0 { "global" } else { "region" },
        ))?;
        logits.push(cos / temperature);
    }
    if regions.is_empty() && super::norm(&global.values) == 0.0 {
        return Err(PerceptionError::ZeroNorm("global"));
    }
    Ok(softmax(&logits))
}

/// Fuses one global feature with its region features into a `fusion_dim` vector.
pub fn fuse_features(
    global: &FeatureVector,
    regions: &[FeatureVector],
    cfg: &FusionConfig,
) -> Result<FeatureVector, PerceptionError> {
    expect_source(global, FeatureSource::Global)?;
    for r in regions {
        expect_source(r, FeatureSource::Region)?;
    }
    let weights = fusion_weights(global, regions, cfg.temperature)?;
    let mut out: DVector<f64> = cfg.projection_global.apply(&global.values)? * weights[0];
    for (r, w) in regions.iter().zip(&weights[1..]) {
        out += cfg.projection_region.apply(&r.values)? * *w;
    }
    FeatureVector::new(FeatureSource::Global, out.iter().copied().collect())
}

/// GRU input for a window: action feature, fused image feature and, when
/// enabled, the sound feature, concatenated in that order.
pub fn gru_input(window: &WindowSample, cfg: &FusionConfig) -> Result<Vec<f64>, PerceptionError> {
    let fused = fuse_features(&window.global_feature, &window.region_features, cfg)?;
    let mut x = window.action_feature.values.clone();
    x.extend_from_slice(&fused.values);
    if cfg.include_sound {
        let sound = window
            .sound_feature
            .as_ref()
            .ok_or(PerceptionError::Empty("sound feature"))?;
        x.extend_from_slice(&sound.values);
    }
    Ok(x)
}
