//! Single-level separable Haar analysis with averaging filters
//! `(a + b) / 2` and `(a - b) / 2`.

use crate::imaging::{RealField, Result};

/// The four half-resolution bands of one Haar level.
///
/// `lh` holds the high-pass-across-columns, low-pass-down-rows band, so it
/// responds to vertical edges; `hl` is its transpose counterpart and `hh`
/// the diagonal band.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarBands {
    pub ll: RealField,
    pub lh: RealField,
    pub hl: RealField,
    pub hh: RealField,
}

/// Decomposes `field`, replicating the last column/row when a side is odd.
pub fn haar_bands(field: &RealField) -> Result<HaarBands> {
    let bw = field.width().div_ceil(2);
    let bh = field.height().div_ceil(2);
    let mut ll = RealField::zeros(bw, bh)?;
    let mut lh = RealField::zeros(bw, bh)?;
    let mut hl = RealField::zeros(bw, bh)?;
    let mut hh = RealField::zeros(bw, bh)?;
    for by in 0..bh {
        for bx in 0..bw {
            let (x, y) = (2 * bx as i64, 2 * by as i64);
            let a = field.at_clamped(x, y);
            let b = field.at_clamped(x + 1, y);
            let c = field.at_clamped(x, y + 1);
            let d = field.at_clamped(x + 1, y + 1);
            // horizontal pass on both rows
            let (top_lo, top_hi) = ((a + b) / 2.0, (a - b) / 2.0);
            let (bot_lo, bot_hi) = ((c + d) / 2.0, (c - d) / 2.0);
            // vertical pass
            ll.set(bx, by, (top_lo + bot_lo) / 2.0);
            lh.set(bx, by, (top_hi + bot_hi) / 2.0);
            hl.set(bx, by, (top_lo - bot_lo) / 2.0);
            hh.set(bx, by, (top_hi - bot_hi) / 2.0);
        }
    }
    Ok(HaarBands { ll, lh, hl, hh })
}
