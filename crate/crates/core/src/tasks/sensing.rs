//! Turning a scene into network inputs: cropped wrist views for the fine
//! controller and padded full frames for the initialisation and end-to-end nets.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::domain_rand::{simulate_depth_artifacts, DepthArtifactConfig, RngStream};
use crate::geometry::CameraModel;
use crate::imaging::{pad_and_resize, Image};
use crate::policy::{normalize_depth, Modality};
use crate::renderer::{render_with, tool_pixel, PixelRegion, RenderOptions, Scene, SensorFrame};

/// Square crop around a point fixed below the ring, downsampled for the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineView {
    pub crop: usize,
    pub out: usize,
    /// Crop centre in the end-effector frame.
    pub anchor: [f64; 3],
}

impl Default for FineView {
    fn default() -> Self {
        Self {
            crop: 256,
            out: 64,
            anchor: [0.0, 0.0, -0.015],
        }
    }
}

pub fn crop_center(cam: &CameraModel, view: &FineView) -> Result<(f64, f64), TaskError> {
    let [x, y, z] = view.anchor;
    Ok(tool_pixel(cam, &Vector3::new(x, y, z))?)
}

/// Network inputs per modality plus the normalised perfect-depth target.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub images: Vec<(Modality, Image)>,
    pub depth_target: Option<Image>,
}

impl Observation {
    pub fn get(&self, m: Modality) -> Option<&Image> {
        self.images.iter().find(|(k, _)| *k == m).map(|(_, i)| i)
    }
}

fn needs_stereo(modalities: &[Modality]) -> bool {
    modalities.iter().any(|m| matches!(m, Modality::Depth | Modality::StereoIr))
}

fn extract(
    frame: &SensorFrame,
    modalities: &[Modality],
    depth_target: bool,
    depth_cfg: &DepthArtifactConfig,
    rng: &mut RngStream,
    shape: impl Fn(&Image) -> Image,
) -> Result<Observation, TaskError> {
    let mut images = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let img = match m {
            Modality::Rgb => shape(&frame.rgb),
            Modality::Grayscale => shape(&frame.gray),
            Modality::Depth => shape(&simulate_depth_artifacts(frame, depth_cfg, rng)?.map(normalize_depth)),
            Modality::StereoIr => {
                let l = frame.ir_left.as_ref().ok_or(crate::domain_rand::RandError::MissingEmitterMasks)?;
                let r = frame.ir_right.as_ref().ok_or(crate::domain_rand::RandError::MissingEmitterMasks)?;
                Image::concat_channels(&[&shape(l), &shape(r)]).expect("views share a size")
            }
        };
        images.push((m, img));
    }
    let depth_target = depth_target.then(|| shape(&frame.depth_perfect.map(normalize_depth)));
    Ok(Observation { images, depth_target })
}

/// Renders only the crop window around `center` and resamples it to the network size.
pub fn fine_observation(
    scene: &Scene,
    cam: &CameraModel,
    center: (f64, f64),
    view: &FineView,
    modalities: &[Modality],
    depth_target: bool,
    depth_cfg: &DepthArtifactConfig,
    rng: &mut RngStream,
) -> Result<Observation, TaskError> {
    let opts = RenderOptions {
        region: Some(PixelRegion::centered(center.0, center.1, view.crop)),
        stereo: needs_stereo(modalities),
    };
    let frame = render_with(scene, cam, &opts)?;
    extract(&frame, modalities, depth_target, depth_cfg, rng, |img| frame.crop(img, center, view.crop, view.out))
}

/// Whole field of view, rendered on a coarse pixel grid and padded to `out`×`out`.
pub fn full_frame_observation(
    scene: &Scene,
    cam: &CameraModel,
    out: usize,
    modalities: &[Modality],
    depth_cfg: &DepthArtifactConfig,
    rng: &mut RngStream,
) -> Result<Observation, TaskError> {
    let scale = out as f64 / cam.width.max(cam.height) as f64;
    let small = cam.scaled(scale);
    let opts = RenderOptions {
        region: None,
        stereo: needs_stereo(modalities),
    };
    let frame = render_with(scene, &small, &opts)?;
    extract(&frame, modalities, false, depth_cfg, rng, |img| pad_and_resize(img, out))
}
