//! Rendering of game states into the network's input format.
//!
//! A state is drawn on a conceptual native canvas (600x150 by default) with a
//! synthetic grayscale palette: sky 0.0, ground line 0.3, dino 0.6, obstacles
//! 1.0, with the dino drawn last. The canvas is downsampled to 80x80 by
//! nearest-neighbor sampling at destination pixel centers, and the last four
//! frames are stacked into the observation the Q-network consumes.

use crate::env::{EnvConfig, GameState};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

pub const FRAME_WIDTH: usize = 80;
pub const FRAME_HEIGHT: usize = 80;
pub const FRAME_PIXELS: usize = FRAME_WIDTH * FRAME_HEIGHT;
pub const STACK_DEPTH: usize = 4;
/// Length of one flattened observation (80 * 80 * 4, height-width-channel).
pub const INPUT_LEN: usize = FRAME_PIXELS * STACK_DEPTH;

pub const SKY: f32 = 0.0;
pub const GROUND: f32 = 0.3;
pub const DINO: f32 = 0.6;
pub const OBSTACLE: f32 = 1.0;

/// One 80x80 grayscale frame, row-major with row 0 at the top of the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Box<[f32]>,
}

impl Frame {
    pub fn from_pixels(pixels: Vec<f32>) -> Frame {
        assert_eq!(pixels.len(), FRAME_PIXELS, "frame must hold 6400 pixels");
        Frame { pixels: pixels.into_boxed_slice() }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * FRAME_WIDTH + x]
    }

    /// Encode as binary PGM (P5, maxval 255) with intensities scaled by 255
    /// and rounded half-up.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_PIXELS + 16);
        write!(out, "P5\n{FRAME_WIDTH} {FRAME_HEIGHT}\n255\n").expect("vec write");
        for &v in self.pixels.iter() {
            let byte = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            out.push(byte);
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_pgm())
    }
}

/// Native pixel index sampled by destination cell `i`: the native pixel whose
/// center is nearest to the destination cell's center mapped into native
/// space. Ties round half away from zero, which cannot occur for the default
/// 600x150 -> 80x80 mapping.
fn nearest_native_index(i: usize, native: usize, dest: usize) -> usize {
    let p = (i as f64 + 0.5) * native as f64 / dest as f64;
    let k = (p - 0.5).round() as isize;
    k.clamp(0, native as isize - 1) as usize
}

/// Render with an explicit choice of whether the dino is drawn. Skipping the
/// dino exposes the background and obstacle layers for inspection.
pub fn render_scene(state: &GameState, cfg: &EnvConfig, include_dino: bool) -> Frame {
    let native_w = cfg.canvas_width as usize;
    let native_h = cfg.canvas_height as usize;
    let xs: Vec<usize> = (0..FRAME_WIDTH)
        .map(|i| nearest_native_index(i, native_w, FRAME_WIDTH))
        .collect();
    let ys: Vec<usize> = (0..FRAME_HEIGHT)
        .map(|j| nearest_native_index(j, native_h, FRAME_HEIGHT))
        .collect();

    // Integer boxes in game coordinates (x right, y up from the ground line),
    // real-valued positions truncated toward minus infinity.
    let dino_x0 = cfg.dino_x.floor() as i64;
    let dino_x1 = dino_x0 + cfg.dino_w.floor() as i64;
    let dino_y0 = state.dino_y.floor() as i64;
    let dino_y1 = dino_y0 + cfg.dino_h.floor() as i64;
    let boxes: Vec<(i64, i64, i64, i64)> = state
        .obstacles
        .iter()
        .map(|o| {
            let x0 = o.x.floor() as i64;
            let y0 = o.y_bottom.floor() as i64;
            (x0, x0 + o.w.floor() as i64, y0, y0 + o.h.floor() as i64)
        })
        .collect();

    let mut pixels = vec![SKY; FRAME_PIXELS];
    for (j, &ny) in ys.iter().enumerate() {
        // Row 0 of the canvas is the top; game height counts up from row
        // native_h - 1.
        let gy = (native_h - 1 - ny) as i64;
        for (i, &nx) in xs.iter().enumerate() {
            let gx = nx as i64;
            let v = if include_dino
                && gx >= dino_x0
                && gx < dino_x1
                && gy >= dino_y0
                && gy < dino_y1
            {
                DINO
            } else if boxes
                .iter()
                .any(|&(x0, x1, y0, y1)| gx >= x0 && gx < x1 && gy >= y0 && gy < y1)
            {
                OBSTACLE
            } else if gy == 0 {
                GROUND
            } else {
                SKY
            };
            pixels[j * FRAME_WIDTH + i] = v;
        }
    }
    Frame { pixels: pixels.into_boxed_slice() }
}

/// Render the full scene, dino included.
pub fn render_frame(state: &GameState, cfg: &EnvConfig) -> Frame {
    render_scene(state, cfg, true)
}

/// Stack of the last four frames, oldest first. Frames are shared behind
/// `Arc`, so pushing is cheap and observations have value semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    frames: [Arc<Frame>; STACK_DEPTH],
}

impl Observation {
    /// Episode-start boundary fill: replicate one frame into all four slots.
    pub fn init_stack(f: Frame) -> Observation {
        let f = Arc::new(f);
        Observation {
            frames: [f.clone(), f.clone(), f.clone(), f],
        }
    }

    /// Drop the oldest frame and append `f` as the newest. `self` is left
    /// unchanged.
    pub fn push_frame(&self, f: Frame) -> Observation {
        Observation {
            frames: [
                self.frames[1].clone(),
                self.frames[2].clone(),
                self.frames[3].clone(),
                Arc::new(f),
            ],
        }
    }

    pub fn frames(&self) -> &[Arc<Frame>; STACK_DEPTH] {
        &self.frames
    }

    /// Flatten to the network's input layout: `out[(y * 80 + x) * 4 + c]`
    /// where channel `c` runs oldest to newest.
    pub fn write_input(&self, out: &mut [f32]) {
        assert_eq!(out.len(), INPUT_LEN);
        let planes: [&[f32]; STACK_DEPTH] = [
            self.frames[0].pixels(),
            self.frames[1].pixels(),
            self.frames[2].pixels(),
            self.frames[3].pixels(),
        ];
        for p in 0..FRAME_PIXELS {
            let base = p * STACK_DEPTH;
            out[base] = planes[0][p];
            out[base + 1] = planes[1][p];
            out[base + 2] = planes[2][p];
            out[base + 3] = planes[3][p];
        }
    }
}
