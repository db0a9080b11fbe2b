//! The candidate pool of visual prompts and their rendering onto images.
//!
//! A visual prompt is a cheap image edit that highlights the localized
//! objects: an outline, a marker, selective blur, or a crop. The pool always
//! contains the identity prompt `none` so the unmodified image stays a
//! candidate.

use serde::{Deserialize, Serialize};

use crate::raster::{
    crop_region, draw_overlay, gaussian_blur, Color, ImageRaster, OverlayShape, RasterError,
    RectRegion,
};

#[derive(Debug, thiserror::Error)]
pub enum VpError {
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    None,
    BoundingBox,
    Circle,
    Arrow,
    CenterPoint,
    Blur,
    ReverseBlur,
    Crop,
}

impl PromptKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::None => "none",
            PromptKind::BoundingBox => "bounding_box",
            PromptKind::Circle => "circle",
            PromptKind::Arrow => "arrow",
            PromptKind::CenterPoint => "center_point",
            PromptKind::Blur => "blur",
            PromptKind::ReverseBlur => "reverse_blur",
            PromptKind::Crop => "crop",
        }
    }

    /// Kinds that draw on or around the localized object boxes. The global
    /// kinds (`none`, `blur`) render the same way with or without objects.
    fn needs_objects(&self) -> bool {
        !matches!(self, PromptKind::None | PromptKind::Blur)
    }
}

/// Rendering parameters; each field is set only when the prompt kind uses it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color: Option<Color>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stroke: Option<u32>,
    /// Blur strength as a fraction of the smaller image dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_frac: Option<f64>,
    /// Margin around the object union, as a fraction of the union's size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub id: String,
    pub kind: PromptKind,
    pub params: PromptParams,
}

/// A rendered prompt: the edited raster plus the identity of what produced it.
#[derive(Debug, Clone)]
pub struct PromptedImage {
    /// Digest of the source raster the prompt was applied to.
    pub source_digest: [u8; 32],
    pub prompt_id: String,
    pub raster: ImageRaster,
    /// True when the source image had no localized objects, in which case
    /// object-dependent prompts fall back to the identity rendering.
    pub degenerate: bool,
}

pub const DEFAULT_STROKE: u32 = 3;
pub const DEFAULT_COLOR: Color = Color::new(255, 0, 0);
pub const DEFAULT_SIGMA_FRAC: f64 = 0.02;
pub const DEFAULT_CROP_MARGIN: f64 = 0.1;

/// Pool-wide parameter overrides and member removal, as read from run config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Prompt ids to remove from the pool; `none` may never be dropped.
    pub drop: Vec<String>,
    pub stroke: Option<u32>,
    pub color: Option<Color>,
    pub sigma_frac: Option<f64>,
    pub crop_margin: Option<f64>,
}

/// Builds the candidate pool in its fixed order, applying config overrides.
pub fn default_pool(config: &PoolConfig) -> Result<Vec<VisualPrompt>, VpError> {
    let stroke = config.stroke.unwrap_or(DEFAULT_STROKE);
    let color = config.color.unwrap_or(DEFAULT_COLOR);
    let sigma_frac = config.sigma_frac.unwrap_or(DEFAULT_SIGMA_FRAC);
    let crop_margin = config.crop_margin.unwrap_or(DEFAULT_CROP_MARGIN);
    if stroke == 0 {
        return Err(VpError::InvalidConfig("stroke must be at least 1".into()));
    }
    if !sigma_frac.is_finite() || sigma_frac <= 0.0 {
        return Err(VpError::InvalidConfig(format!("sigma_frac must be positive, got {sigma_frac}")));
    }
    if !crop_margin.is_finite() || crop_margin < 0.0 {
        return Err(VpError::InvalidConfig(format!("crop_margin must be non-negative, got {crop_margin}")));
    }

    let outline = PromptParams { color: Some(color), stroke: Some(stroke), ..Default::default() };
    let blur = PromptParams { sigma_frac: Some(sigma_frac), ..Default::default() };
    let kinds = [
        (PromptKind::None, PromptParams::default()),
        (PromptKind::BoundingBox, outline.clone()),
        (PromptKind::Circle, outline.clone()),
        (PromptKind::Arrow, outline.clone()),
        (PromptKind::CenterPoint, outline),
        (PromptKind::Blur, blur.clone()),
        (PromptKind::ReverseBlur, blur),
        (PromptKind::Crop, PromptParams { crop_margin: Some(crop_margin), ..Default::default() }),
    ];

    for id in &config.drop {
        if id == "none" {
            return Err(VpError::InvalidConfig("the identity prompt `none` cannot be dropped".into()));
        }
        if !kinds.iter().any(|(k, _)| k.as_str() == id) {
            return Err(VpError::InvalidConfig(format!("unknown prompt id in drop list: {id}")));
        }
    }

    Ok(kinds
        .into_iter()
        .filter(|(kind, _)| !config.drop.iter().any(|d| d == kind.as_str()))
        .map(|(kind, params)| VisualPrompt { id: kind.as_str().to_string(), kind, params })
        .collect())
}

fn effective_sigma(prompt: &VisualPrompt, img: &ImageRaster) -> f64 {
    let frac = prompt.params.sigma_frac.unwrap_or(DEFAULT_SIGMA_FRAC);
    frac * img.width().min(img.height()) as f64
}

/// Square region of radius `2 * stroke` around a box center, clamped to the image.
fn center_marker_region(img: &ImageRaster, b: &RectRegion, stroke: u32) -> RectRegion {
    let cx = (b.x0 + b.x1) as f64 / 2.0;
    let cy = (b.y0 + b.y1) as f64 / 2.0;
    let r = 2.0 * stroke as f64;
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as u32).min(img.width()).max(x0 + 1);
    let y1 = ((cy + r).ceil() as u32).min(img.height()).max(y0 + 1);
    RectRegion::new(x0.min(img.width() - 1), y0.min(img.height() - 1), x1, y1)
}

/// Renders `prompt` over `img`, highlighting the given object boxes.
///
/// Every box must lie inside the image. With an empty `objects` list the
/// object-dependent kinds return the unmodified raster and the result is
/// flagged degenerate.
pub fn apply_prompt(
    img: &ImageRaster,
    prompt: &VisualPrompt,
    objects: &[RectRegion],
) -> Result<PromptedImage, VpError> {
    for b in objects {
        b.validate(img.width(), img.height())?;
    }
    let degenerate = objects.is_empty();
    let stroke = prompt.params.stroke.unwrap_or(DEFAULT_STROKE);
    let color = prompt.params.color.unwrap_or(DEFAULT_COLOR);

    let overlay_all = |shape: OverlayShape| -> Result<ImageRaster, VpError> {
        let mut out = img.clone();
        for b in objects {
            let region = if shape == OverlayShape::FilledDisc {
                center_marker_region(img, b, stroke)
            } else {
                *b
            };
            out = draw_overlay(&out, shape, &region, color, stroke)?;
        }
        Ok(out)
    };

    let raster = if degenerate && prompt.kind.needs_objects() {
        img.clone()
    } else {
        match prompt.kind {
            PromptKind::None => img.clone(),
            PromptKind::BoundingBox => overlay_all(OverlayShape::RectOutline)?,
            PromptKind::Circle => overlay_all(OverlayShape::EllipseOutline)?,
            PromptKind::Arrow => overlay_all(OverlayShape::Arrow)?,
            PromptKind::CenterPoint => overlay_all(OverlayShape::FilledDisc)?,
            PromptKind::Blur => gaussian_blur(img, effective_sigma(prompt, img))?,
            PromptKind::ReverseBlur => {
                let mut out = gaussian_blur(img, effective_sigma(prompt, img))?;
                for b in objects {
                    for y in b.y0..b.y1 {
                        for x in b.x0..b.x1 {
                            out.set(x, y, img.get(x, y));
                        }
                    }
                }
                out
            }
            PromptKind::Crop => {
                let mut union = objects[0];
                for b in &objects[1..] {
                    union = union.union(b);
                }
                let margin = prompt.params.crop_margin.unwrap_or(DEFAULT_CROP_MARGIN);
                let mx = margin * union.width() as f64;
                let my = margin * union.height() as f64;
                let grown = RectRegion::new(
                    (union.x0 as f64 - mx).floor().max(0.0) as u32,
                    (union.y0 as f64 - my).floor().max(0.0) as u32,
                    ((union.x1 as f64 + mx).ceil() as u32).min(img.width()),
                    ((union.y1 as f64 + my).ceil() as u32).min(img.height()),
                );
                crop_region(img, &grown)?
            }
        }
    };

    Ok(PromptedImage {
        source_digest: img.digest(),
        prompt_id: prompt.id.clone(),
        raster,
        degenerate,
    })
}
