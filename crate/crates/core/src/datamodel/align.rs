use super::VisualTrack;
use crate::error::{Error, Result};
use crate::math::resample_linear;
use crate::numcore::Grid;

/// Face and lip features resampled onto the mel time base, `[channels × T_mel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedVisual {
    pub face: Grid,
    pub lip: Grid,
}

fn resample_channels(g: &Grid, t_mel: usize) -> Grid {
    let mut data = alloc::vec::Vec::with_capacity(g.rows() * t_mel);
    for c in 0..g.rows() {
        data.extend(resample_linear(g.row(c), t_mel));
    }
    Grid::new(alloc::vec![g.rows(), t_mel], data).expect("resampled shape")
}

/// Linear interpolation of every channel from the 25 fps grid to `t_mel`
/// frames; first and last video frames land on the first and last mel frames.
pub fn align_visual(track: &VisualTrack, t_mel: usize) -> Result<AlignedVisual> {
    if track.frames() < 2 {
        return Err(Error::TooShort {
            what: "align_visual",
            needed: 2,
            got: track.frames(),
        });
    }
    if t_mel == 0 {
        return Err(Error::Empty("align_visual target"));
    }
    Ok(AlignedVisual {
        face: resample_channels(track.face(), t_mel),
        lip: resample_channels(track.lip(), t_mel),
    })
}
