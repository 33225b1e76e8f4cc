use super::RasterImage;
use crate::svg::SvgSource;
use resvg::{tiny_skia, usvg};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("could not parse svg: {0}")]
    Parse(String),
    #[error("unsupported svg feature: {0}")]
    Unsupported(String),
    #[error("invalid render spec: {0}")]
    InvalidSpec(String),
}

/// Output canvas for rendering. The canvas size always comes from the
/// reference image, never from the SVG being rendered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub ref_width: usize,
    pub ref_height: usize,
    #[serde(default = "white")]
    pub background: [f64; 3],
}

fn white() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            ref_width: 64,
            ref_height: 64,
            background: white(),
        }
    }
}

impl RenderSpec {
    pub fn new(ref_width: usize, ref_height: usize) -> Self {
        Self {
            ref_width,
            ref_height,
            background: white(),
        }
    }

    /// Canvas matching a reference image.
    pub fn for_image(img: &RasterImage) -> Self {
        Self::new(img.width(), img.height())
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.ref_width == 0 || self.ref_height == 0 {
            return Err(RenderError::InvalidSpec(format!(
                "canvas {}x{}",
                self.ref_width, self.ref_height
            )));
        }
        if self.ref_width > 16_384 || self.ref_height > 16_384 {
            return Err(RenderError::InvalidSpec(
                "canvas larger than 16384 pixels".into(),
            ));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(RenderError::InvalidSpec("background outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Anything that can turn SVG markup into pixels on a reference canvas.
///
/// Implementations must be callable from many threads at once.
pub trait Rasterizer: Send + Sync {
    fn render(&self, src: &SvgSource, spec: &RenderSpec) -> Result<RasterImage, RenderError>;
}

/// Static-SVG rasterizer backed by resvg.
///
/// Scripts, animation and references to anything other than in-document
/// fragments or `data:` URIs are rejected before rendering.
#[derive(Debug, Clone, Copy, Default)]
pub struct ResvgRasterizer;

const REJECTED_ELEMENTS: [&str; 6] = [
    "script",
    "animate",
    "animateMotion",
    "animateTransform",
    "set",
    "foreignObject",
];

fn check_supported(text: &str) -> Result<(), RenderError> {
    let opts = roxmltree::ParsingOptions {
        allow_dtd: true,
        ..Default::default()
    };
    let doc = roxmltree::Document::parse_with_options(text, opts)
        .map_err(|e| RenderError::Parse(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(RenderError::Parse(format!(
            "root element is <{}>, expected <svg>",
            root.tag_name().name()
        )));
    }
    for node in root.descendants().filter(|n| n.is_element()) {
        let name = node.tag_name().name();
        if REJECTED_ELEMENTS.contains(&name) {
            return Err(RenderError::Unsupported(format!("<{name}> element")));
        }
        for attr in node.attributes() {
            if attr.name() == "href" {
                let v = attr.value().trim();
                if !(v.starts_with('#') || v.starts_with("data:")) {
                    return Err(RenderError::Unsupported(format!(
                        "external reference {v:?}"
                    )));
                }
            }
        }
    }
    Ok(())
}

impl Rasterizer for ResvgRasterizer {
    fn render(&self, src: &SvgSource, spec: &RenderSpec) -> Result<RasterImage, RenderError> {
        spec.validate()?;
        check_supported(src.as_str())?;
        let opts = usvg::Options {
            resources_dir: None,
            ..Default::default()
        };
        let tree = usvg::Tree::from_str(src.as_str(), &opts)
            .map_err(|e| RenderError::Parse(e.to_string()))?;

        let (w, h) = (spec.ref_width as f32, spec.ref_height as f32);
        let size = tree.size();
        let scale = (w / size.width()).min(h / size.height());
        if !scale.is_finite() || scale <= 0.0 {
            return Err(RenderError::Parse(format!(
                "degenerate document size {}x{}",
                size.width(),
                size.height()
            )));
        }
        // Letterbox: content keeps its aspect ratio and is centered on the canvas.
        let dx = (w - size.width() * scale) / 2.0;
        let dy = (h - size.height() * scale) / 2.0;
        let transform = tiny_skia::Transform::from_row(scale, 0.0, 0.0, scale, dx, dy);

        let mut pixmap = tiny_skia::Pixmap::new(spec.ref_width as u32, spec.ref_height as u32)
            .ok_or_else(|| RenderError::InvalidSpec("could not allocate canvas".into()))?;
        let [r, g, b] = spec.background;
        pixmap.fill(
            tiny_skia::Color::from_rgba(r as f32, g as f32, b as f32, 1.0)
                .expect("validated background"),
        );
        resvg::render(&tree, transform, &mut pixmap.as_mut());

        // The background is opaque, so premultiplied and straight RGB coincide.
        let data = pixmap
            .data()
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .map(|v| v as f64 / 255.0)
            .collect();
        Ok(RasterImage::from_parts_unchecked(
            spec.ref_width,
            spec.ref_height,
            3,
            data,
        ))
    }
}

/// Renders with the default [`ResvgRasterizer`].
pub fn render_svg(src: &SvgSource, spec: &RenderSpec) -> Result<RasterImage, RenderError> {
    ResvgRasterizer.render(src, spec)
}
