use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use super::{default_mapping, from_value, require, ConfigDocument, ConfigKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VizSpec {
    pub attribution: AttributionSpec,
    pub view: ViewSpec,
    pub benchmark: BenchmarkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum AttributionSpec {
    Upsampling(NoParams),
    Smoothgrad(SmoothGradParams),
    Backprop(NoParams),
    Prp(NoParams),
    Randgrads(RandGradsParams),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoParams {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothGradParams {
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_noise")]
    pub noise_ratio: f64,
}

fn default_samples() -> usize {
    10
}

fn default_noise() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandGradsParams {
    #[serde(default)]
    pub seed: u64,
}

impl AttributionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttributionSpec::Upsampling(_) => "upsampling",
            AttributionSpec::Smoothgrad(_) => "smoothgrad",
            AttributionSpec::Backprop(_) => "backprop",
            AttributionSpec::Prp(_) => "prp",
            AttributionSpec::Randgrads(_) => "randgrads",
        }
    }

    pub fn smoothgrad(num_samples: usize, noise_ratio: f64) -> Self {
        AttributionSpec::Smoothgrad(SmoothGradParams {
            num_samples,
            noise_ratio,
        })
    }

    pub fn randgrads(seed: u64) -> Self {
        AttributionSpec::Randgrads(RandGradsParams { seed })
    }

    fn from_yaml(value: Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            #[serde(rename = "type", default = "default_type")]
            kind: String,
            #[serde(default = "default_mapping")]
            params: Value,
        }
        fn default_type() -> String {
            "smoothgrad".to_string()
        }

        let raw: Raw = from_value(value, "attribution")?;
        let p = raw.params;
        let path = "attribution.params";
        Ok(match raw.kind.as_str() {
            "upsampling" => AttributionSpec::Upsampling(from_value(p, path)?),
            "backprop" => AttributionSpec::Backprop(from_value(p, path)?),
            "prp" => AttributionSpec::Prp(from_value(p, path)?),
            "randgrads" => AttributionSpec::Randgrads(from_value(p, path)?),
            "smoothgrad" => {
                let sg: SmoothGradParams = from_value(p, path)?;
                require(
                    sg.num_samples >= 1,
                    "attribution.params.num_samples",
                    "must be at least 1",
                )?;
                require(
                    sg.noise_ratio >= 0.0 && sg.noise_ratio.is_finite(),
                    "attribution.params.noise_ratio",
                    "must be nonnegative",
                )?;
                AttributionSpec::Smoothgrad(sg)
            }
            other => {
                return Err(Error::schema(
                    "attribution.type",
                    format!("unknown attribution method `{other}`"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Bbox,
    Crop,
    Heatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewParams {
    /// Pixels at or above this percentile of the map define the bounding box.
    #[serde(default = "default_percentile")]
    pub percentile: f64,
}

fn default_percentile() -> f64 {
    95.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    #[serde(rename = "type", default = "default_view")]
    pub kind: ViewKind,
    #[serde(default = "default_view_params")]
    pub params: ViewParams,
}

fn default_view() -> ViewKind {
    ViewKind::Heatmap
}

fn default_view_params() -> ViewParams {
    ViewParams {
        percentile: default_percentile(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    HueShift,
    GaussianBlur,
    GaussianNoise,
    Brightness,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::HueShift,
        PerturbationKind::GaussianBlur,
        PerturbationKind::GaussianNoise,
        PerturbationKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::HueShift => "hue_shift",
            PerturbationKind::GaussianBlur => "gaussian_blur",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::Brightness => "brightness",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether each output pixel depends only on the same input pixel.
    pub fn is_pixelwise(self) -> bool {
        !matches!(self, PerturbationKind::GaussianBlur)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Magnitudes {
    /// Degrees.
    #[serde(default = "m_hue")]
    pub hue_shift: f64,
    /// Kernel σ in pixels.
    #[serde(default = "m_blur")]
    pub gaussian_blur: f64,
    /// Noise σ in [0, 1] pixel units.
    #[serde(default = "m_noise")]
    pub gaussian_noise: f64,
    /// Relative brightness change.
    #[serde(default = "m_brightness")]
    pub brightness: f64,
}

fn m_hue() -> f64 {
    72.0
}

fn m_blur() -> f64 {
    3.0
}

fn m_noise() -> f64 {
    0.1
}

fn m_brightness() -> f64 {
    0.3
}

impl Default for Magnitudes {
    fn default() -> Self {
        Magnitudes {
            hue_shift: m_hue(),
            gaussian_blur: m_blur(),
            gaussian_noise: m_noise(),
            brightness: m_brightness(),
        }
    }
}

impl Magnitudes {
    pub fn get(&self, kind: PerturbationKind) -> f64 {
        match kind {
            PerturbationKind::HueShift => self.hue_shift,
            PerturbationKind::GaussianBlur => self.gaussian_blur,
            PerturbationKind::GaussianNoise => self.gaussian_noise,
            PerturbationKind::Brightness => self.brightness,
        }
    }
}

/// Parameters of the explanation benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Fraction of pixels in the relevance mask.
    #[serde(default = "default_q")]
    pub q: f64,
    /// Number of most-similar active prototypes probed per image.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<PerturbationKind>,
    #[serde(default)]
    pub magnitudes: Magnitudes,
}

fn default_q() -> f64 {
    0.1
}

fn default_top_k() -> usize {
    1
}

fn default_kinds() -> Vec<PerturbationKind> {
    PerturbationKind::ALL.to_vec()
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        from_value(default_mapping(), "benchmark").expect("defaults are valid")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawViz {
    #[serde(default = "default_mapping")]
    attribution: Value,
    #[serde(default = "default_mapping")]
    view: Value,
    #[serde(default = "default_mapping")]
    benchmark: Value,
}

impl ConfigDocument for VizSpec {
    const KIND: ConfigKind = ConfigKind::Viz;

    fn from_yaml(value: Value) -> Result<Self> {
        let raw: RawViz = from_value(value, "")?;
        let attribution = AttributionSpec::from_yaml(raw.attribution)?;
        let view: ViewSpec = from_value(raw.view, "view")?;
        require(
            (0.0..=100.0).contains(&view.params.percentile),
            "view.params.percentile",
            "must be in [0, 100]",
        )?;
        let benchmark: BenchmarkSpec = from_value(raw.benchmark, "benchmark")?;
        require(
            benchmark.q > 0.0 && benchmark.q < 1.0,
            "benchmark.q",
            "must be in (0, 1)",
        )?;
        require(benchmark.top_k >= 1, "benchmark.top_k", "must be at least 1")?;
        require(!benchmark.kinds.is_empty(), "benchmark.kinds", "must not be empty")?;
        let m = &benchmark.magnitudes;
        require(
            m.gaussian_blur > 0.0 && m.gaussian_noise >= 0.0 && m.hue_shift.is_finite() && m.brightness > -1.0,
            "benchmark.magnitudes",
            "blur sigma must be positive, noise nonnegative, brightness above -1",
        )?;
        Ok(VizSpec {
            attribution,
            view,
            benchmark,
        })
    }
}

impl Default for VizSpec {
    fn default() -> Self {
        VizSpec::from_yaml(default_mapping()).expect("empty visualization document is valid")
    }
}

impl VizSpec {
    pub fn with_attribution(mut self, attribution: AttributionSpec) -> Self {
        self.attribution = attribution;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_fully_defaulted() {
        let spec = VizSpec::parse("{}").unwrap();
        assert_eq!(spec.attribution, AttributionSpec::smoothgrad(10, 0.2));
        assert_eq!(spec.view.kind, ViewKind::Heatmap);
        assert_eq!(spec.view.params.percentile, 95.0);
        assert_eq!(spec.benchmark.q, 0.1);
        assert_eq!(spec.benchmark.magnitudes, Magnitudes::default());
    }

    #[test]
    fn params_checked_against_type() {
        let err = VizSpec::parse("attribution: {type: prp, params: {num_samples: 3}}").unwrap_err();
        assert!(
            matches!(err, Error::Schema { ref path, .. } if path == "attribution.params.num_samples")
        );
    }
}
