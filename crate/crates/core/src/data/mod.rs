//! Silhouette sequences, the synthetic gait generator, the on-disk dataset
//! format, and text-guidance vectors.

mod io;
mod synth;
mod text;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, read_pgm, save_dataset, write_pgm, ManifestEntry, MANIFEST};
pub use synth::{generate_dataset, generate_sequence, PhaseSpan, SwayProfile, SynthConfig, View};
pub use text::{load_text_embeddings, TaskTag, TextEmbedding, TextGuidance, BUNDLED_TEXT_SEED};

pub const FRAME_HEIGHT: usize = 128;
pub const FRAME_WIDTH: usize = 88;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Negative,
    /// Borderline cases between the two other classes.
    Neutral,
    Positive,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Negative, ClassLabel::Neutral, ClassLabel::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Negative => "negative",
            ClassLabel::Neutral => "neutral",
            ClassLabel::Positive => "positive",
        }
    }

    pub fn is_borderline(self) -> bool {
        self == ClassLabel::Neutral
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "negative" => Ok(ClassLabel::Negative),
            "neutral" => Ok(ClassLabel::Neutral),
            "positive" => Ok(ClassLabel::Positive),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// One binary silhouette frame, row-major, values in {0, 1}.
#[derive(Clone, PartialEq, Eq)]
pub struct Silhouette {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for Silhouette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Silhouette({}x{}, {} fg)", self.height, self.width, self.foreground())
    }
}

impl Silhouette {
    pub fn empty(height: usize, width: usize) -> Self {
        Silhouette { height, width, pixels: vec![0; height * width] }
    }

    /// Builds a frame from raw pixels; nonzero values count as foreground.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == height * width).then(|| Silhouette {
            height,
            width,
            pixels: pixels.into_iter().map(|p| u8::from(p != 0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.pixels[y * self.width + x] = u8::from(on);
    }

    pub fn foreground(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Mean column index of foreground pixels (pixel centers at `x + 0.5`).
    pub fn centroid_x(&self) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for row in self.pixels.chunks(self.width) {
            for (x, &p) in row.iter().enumerate() {
                if p != 0 {
                    total += x as f64 + 0.5;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| total / count as f64)
    }

    /// Average-pools by `factor` in both directions into `[0, 1]` intensities.
    pub fn downsample(&self, factor: usize) -> Vec<f64> {
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; h * w];
        for y in 0..h * factor {
            for x in 0..w * factor {
                out[(y / factor) * w + x / factor] += self.pixels[y * self.width + x] as f64;
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        out
    }
}

/// One subject's silhouette sequence and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub subject_id: String,
    pub label: ClassLabel,
    pub frames: Vec<Silhouette>,
    /// Generator parameters, present for synthetic sequences only.
    pub profile: Option<SwayProfile>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-class counts in `ClassLabel::index` order.
pub fn class_counts(ds: &[FrameSequence]) -> [usize; 3] {
    let mut counts = [0; 3];
    for s in ds {
        counts[s.label.index()] += 1;
    }
    counts
}
