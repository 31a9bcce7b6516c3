//! Browser bindings for the demo page in `www/`.
//!
//! Three operations: the token schedule of a config, the FLOP curve as the
//! spatial reduction grows, and merge masks for a small planted clip.

use wasm_bindgen::prelude::*;

use testa::aggregation::Strategy;
use testa::config::EncoderConfig;
use testa::costmodel::flops_divided;
use testa::encoder::{encode, ModelWeights};
use testa::synthdata::{generate, score_purity, PlantedSpec};
use testa::trajectory::{recover_groups, render_masks};

fn to_js(e: testa::TestaError) -> JsError {
    JsError::new(&e.to_string())
}

fn schedule_config(frames: u32, blocks: u32, rt: u32, rs: u32) -> EncoderConfig {
    EncoderConfig {
        blocks: blocks as usize,
        rt: rt as usize,
        rs: rs as usize,
        clamp: true,
        ..EncoderConfig::default_for(frames as usize)
    }
}

/// `[frames, patches]` for the input and after every block, flattened, for
/// 224×224 frames in 16×16 patches. Reductions a block cannot honour are
/// clamped.
#[wasm_bindgen]
pub fn token_schedule(frames: u32, blocks: u32, rt: u32, rs: u32) -> Result<Vec<u32>, JsError> {
    let cfg = schedule_config(frames, blocks, rt, rs);
    cfg.validate().map_err(to_js)?;
    let mut out = vec![cfg.frames as u32, cfg.patches() as u32];
    for (t, l) in cfg.schedule() {
        out.extend([t as u32, l as u32]);
    }
    Ok(out)
}

/// GFLOPs at `rs = 0, 1, …, max_rs` for a ViT-B/16 sized encoder.
#[wasm_bindgen]
pub fn flop_curve(frames: u32, rt: u32, max_rs: u32) -> Result<Vec<f64>, JsError> {
    let base = schedule_config(frames, 12, rt, 0);
    base.validate().map_err(to_js)?;
    Ok((0..=max_rs)
        .map(|rs| {
            flops_divided(&EncoderConfig {
                rs: rs as usize,
                ..base.clone()
            })
            .gflops()
        })
        .collect())
}

/// A planted clip encoded with aggregation, rendered as one mask per final
/// frame.
#[wasm_bindgen]
pub struct MergeDemo {
    width: usize,
    height: usize,
    masks: Vec<Vec<u8>>,
    purity: f64,
    final_tokens: usize,
}

#[wasm_bindgen]
impl MergeDemo {
    /// 8 frames of 64×64 pixels in 8×8 patches, four blocks.
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u32,
        sigma: f32,
        rt: u32,
        rs: u32,
        importance: bool,
    ) -> Result<MergeDemo, JsError> {
        let seed = seed as u64;
        let spec = PlantedSpec::grid(8, 64, 64, 8, 2, (2, 2), sigma, seed).map_err(to_js)?;
        let video = generate(&spec, seed.wrapping_add(1)).map_err(to_js)?;
        let cfg = EncoderConfig {
            height: 64,
            width: 64,
            patch: 8,
            dim: 32,
            heads: 4,
            blocks: 4,
            rt: rt as usize,
            rs: rs as usize,
            strategy: if importance {
                Strategy::Importance
            } else {
                Strategy::Geometry
            },
            clamp: true,
            seed,
            ..EncoderConfig::default_for(8)
        };
        let mut weights = ModelWeights::init(&cfg).map_err(to_js)?;
        weights.zero_positional();
        let enc = encode(&video, &cfg, &weights).map_err(to_js)?;
        let groups = recover_groups(&enc.trajectory, cfg.frames, cfg.patches()).map_err(to_js)?;
        let masks = render_masks(&groups, cfg.height, cfg.width, cfg.patch, seed)
            .iter()
            .map(|m| m.to_rgba())
            .collect();
        Ok(MergeDemo {
            width: cfg.width,
            height: cfg.height,
            masks,
            purity: score_purity(&groups, &spec).map_err(to_js)?,
            final_tokens: enc.final_tokens(),
        })
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width as u32
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height as u32
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> u32 {
        self.masks.len() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn purity(&self) -> f64 {
        self.purity
    }

    #[wasm_bindgen(getter, js_name = finalTokens)]
    pub fn final_tokens(&self) -> u32 {
        self.final_tokens as u32
    }

    /// RGBA bytes of final frame `i`, ready for `ImageData`.
    pub fn mask(&self, i: u32) -> Vec<u8> {
        self.masks.get(i as usize).cloned().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_pairs() {
        let s = token_schedule(96, 12, 4, 8).unwrap();
        assert_eq!(&s[..4], &[96, 196, 92, 188]);
        assert_eq!(&s[s.len() - 2..], &[48, 100]);
        assert_eq!(s.len(), 2 * 13);
    }

    #[test]
    fn flop_curve_decreases() {
        let c = flop_curve(32, 1, 12).unwrap();
        assert_eq!(c.len(), 13);
        assert!(c.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn demo_masks() {
        let d = MergeDemo::new(3, 0.0, 1, 4, false).unwrap();
        assert_eq!(d.frames(), 4);
        assert_eq!(d.mask(0).len(), 64 * 64 * 4);
        assert!(d.mask(9).is_empty());
        assert_eq!(d.purity(), 1.0);
        assert_eq!(d.final_tokens(), 4 * 48);
    }
}
