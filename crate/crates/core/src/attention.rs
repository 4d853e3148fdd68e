//! Cross-attention map aggregation and prompt-region mask extraction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-sum slack for softmax attention rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Binary `h x w` mask; `true` marks prompt-related pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_dims(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    /// Nearest-neighbour resampling to `(height, width)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let mut values = Vec::with_capacity(height * width);
        for row in 0..height {
            let src_row = row * self.height / height;
            for col in 0..width {
                values.push(self.get(src_row, col * self.width / width));
            }
        }
        Mask {
            height,
            width,
            values,
        }
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(shape_err(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Attention weights of one layer: `n_tokens x height x width`, token-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    n_tokens: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionLayer {
    /// Validates nonnegativity and unit row sums over the token axis.
    pub fn new(n_tokens: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let layer = Self::new_unchecked(n_tokens, height, width, values)?;
        layer.validate()?;
        Ok(layer)
    }

    pub(crate) fn new_unchecked(
        n_tokens: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if n_tokens == 0 || values.len() != n_tokens * height * width {
            return Err(shape_err(format!(
                "attention layer {n_tokens}x{height}x{width} got {} values",
                values.len()
            )));
        }
        Ok(Self {
            n_tokens,
            height,
            width,
            values,
        })
    }

    /// Averages attention heads of identical shape.
    pub fn from_heads(heads: &[AttentionLayer]) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::InvalidArgument("no attention heads".into()))?;
        let mut values = vec![0.0; first.values.len()];
        for head in heads {
            if head.dims() != first.dims() {
                return Err(shape_err("attention heads differ in shape"));
            }
            for (acc, v) in values.iter_mut().zip(&head.values) {
                *acc += v;
            }
        }
        let scale = 1.0 / heads.len() as f64;
        values.iter_mut().for_each(|v| *v *= scale);
        Self::new_unchecked(first.n_tokens, first.height, first.width, values)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_tokens, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Spatial map of one token.
    pub fn token_map(&self, token: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.values[token * plane..(token + 1) * plane]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numerical(format!(
                "attention weight {v} is not a probability"
            )));
        }
        let plane = self.height * self.width;
        for p in 0..plane {
            let sum: f64 = (0..self.n_tokens).map(|o| self.values[o * plane + p]).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Numerical(format!(
                    "attention row at pixel {p} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    fn resize_nearest(&self, height: usize, width: usize) -> AttentionLayer {
        let mut values = Vec::with_capacity(self.n_tokens * height * width);
        for o in 0..self.n_tokens {
            let map = self.token_map(o);
            for row in 0..height {
                let src_row = row * self.height / height;
                for col in 0..width {
                    values.push(map[src_row * self.width + col * self.width / width]);
                }
            }
        }
        AttentionLayer {
            n_tokens: self.n_tokens,
            height,
            width,
            values,
        }
    }
}

/// Attention maps captured from every cross-attention layer of one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionMaps {
    pub layers: Vec<AttentionLayer>,
}

impl CrossAttentionMaps {
    pub fn new(layers: Vec<AttentionLayer>) -> Self {
        Self { layers }
    }

    /// Element-wise mean of several captures with identical layer structure.
    pub fn mean(captures: &[CrossAttentionMaps]) -> Result<CrossAttentionMaps> {
        let first = captures
            .first()
            .ok_or_else(|| Error::InvalidArgument("no attention captures to average".into()))?;
        let layers = (0..first.layers.len())
            .map(|l| {
                let heads = captures
                    .iter()
                    .map(|c| {
                        c.layers
                            .get(l)
                            .cloned()
                            .ok_or_else(|| shape_err("captures differ in layer count"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                AttentionLayer::from_heads(&heads)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossAttentionMaps { layers })
    }
}

/// Which layers feed the aggregated map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRule {
    /// Layers at `h/4 x w/4` of the latent resolution (UNet-style).
    #[default]
    QuarterResolution,
    /// Every layer, resampled to the finest layer resolution (DiT-style).
    AllLayers,
}

/// Object-token positions `O_c` within the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSelection(Vec<usize>);

impl TokenSelection {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("token selection is empty".into()));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Averages the layers selected by `rule` into a single map.
pub fn aggregate_layers(
    maps: &CrossAttentionMaps,
    target: (usize, usize),
    rule: LayerRule,
) -> Result<AttentionLayer> {
    let (height, width) = target;
    let selected: Vec<&AttentionLayer> = match rule {
        LayerRule::QuarterResolution => maps
            .layers
            .iter()
            .filter(|l| l.height * 4 == height && l.width * 4 == width)
            .collect(),
        LayerRule::AllLayers => maps.layers.iter().collect(),
    };
    let Some(finest) = selected.iter().max_by_key(|l| l.height * l.width) else {
        return Err(Error::InvalidArgument(format!(
            "no attention layer matches rule {rule:?} for target {height}x{width}"
        )));
    };
    let (n_tokens, h_a, w_a) = finest.dims();
    if selected.iter().any(|l| l.n_tokens != n_tokens) {
        return Err(shape_err("attention layers disagree on token count"));
    }
    let resampled: Vec<AttentionLayer> = selected
        .iter()
        .map(|l| {
            if l.height == h_a && l.width == w_a {
                (*l).clone()
            } else {
                l.resize_nearest(h_a, w_a)
            }
        })
        .collect();
    AttentionLayer::from_heads(&resampled)
}

/// Binary map of pixels whose attention exceeds the token map's spatial mean.
pub fn token_mask(map: &AttentionLayer, token: usize) -> Result<Mask> {
    if token >= map.n_tokens {
        return Err(Error::InvalidArgument(format!(
            "token index {token} out of range for {} tokens",
            map.n_tokens
        )));
    }
    let values = map.token_map(token);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Mask::from_values(map.height, map.width, values.iter().map(|&v| v > mean).collect())
}

/// OR of the above-mean masks of every selected token, upsampled to `target`.
pub fn extract_mask(
    map: &AttentionLayer,
    selection: &TokenSelection,
    target: (usize, usize),
) -> Result<Mask> {
    let mut mask = Mask::filled(map.height, map.width, false);
    for &token in selection.indices() {
        mask = mask.union(&token_mask(map, token)?)?;
    }
    Ok(mask.resize_nearest(target.0, target.1))
}

/// Intersection over union; two empty masks score 1.
pub fn iou(mask: &Mask, reference: &Mask) -> Result<f64> {
    mask.check_dims(reference)?;
    let (inter, union) = mask
        .values
        .iter()
        .zip(&reference.values)
        .fold((0usize, 0usize), |(i, u), (&a, &b)| {
            (i + usize::from(a && b), u + usize::from(a || b))
        });
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
