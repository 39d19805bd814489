//! PNG renders of a session, shared by the `render` command and the service.

use convsplat_core::viz::{alpha_bytes, color_bytes, gray_png, label_bytes, rgb_png};
use convsplat_core::{Channels, Error, Result, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageChannel {
    Rgb,
    FeatViewPca,
    Mask,
    Alpha,
}

impl ImageChannel {
    pub const ALL: [ImageChannel; 4] = [Self::Rgb, Self::FeatViewPca, Self::Mask, Self::Alpha];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::FeatViewPca => "feat_v_pca",
            Self::Mask => "mask",
            Self::Alpha => "alpha",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Renders one channel of camera `cam`. `feat_v_pca` uses the session's
/// stored PCA basis and `mask` its cached masks; both must be prepared.
pub fn render_png(session: &Session, cam: usize, channel: ImageChannel) -> Result<Vec<u8>> {
    let camera = session
        .scene
        .cameras
        .get(cam)
        .ok_or_else(|| Error::Arg(format!("camera {cam} out of range")))?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    match channel {
        ImageChannel::Rgb => {
            let out = session.render(cam, Channels::COLOR)?;
            rgb_png(w, h, color_bytes(out.color.as_ref().unwrap()))
        }
        ImageChannel::Alpha => {
            let out = session.render(cam, Channels::COLOR)?;
            gray_png(w, h, alpha_bytes(&out.alpha))
        }
        ImageChannel::FeatViewPca => {
            let pca = session
                .state
                .pca
                .as_ref()
                .ok_or_else(|| Error::State("no PCA basis; call Session::pca first".into()))?;
            let out = session.render(cam, Channels::FEAT_VIEW)?;
            rgb_png(w, h, pca.colorize(out.feat_view.as_ref().unwrap(), &out.alpha)?)
        }
        ImageChannel::Mask => {
            let masks = session
                .cached_masks(cam)
                .ok_or_else(|| Error::State("no masks: scene has neither labels nor a trained identity stage".into()))?;
            rgb_png(w, h, label_bytes(&masks.labels))
        }
    }
}
