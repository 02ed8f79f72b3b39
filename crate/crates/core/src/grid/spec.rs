use serde::{Deserialize, Serialize};

use super::GridError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    /// Resolution halves and channels double going down the column.
    Sub,
    /// Resolution doubles and channels halve going up the column.
    Up,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Sum,
    /// Horizontal and vertical terms concatenated, then a 1x1 projection.
    Concat,
}

/// Hyperparameters of one grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_streams: usize,
    pub columns: Vec<ColumnKind>,
    pub base_features: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Probability that a residual mapping is kept during training.
    #[serde(default = "default_keep_prob")]
    pub keep_prob: f64,
    /// Scale residual mappings by `keep_prob` at evaluation time.
    #[serde(default)]
    pub rescale_eval: bool,
    #[serde(default)]
    pub fusion: Fusion,
    /// Add a parameter-free shortcut next to every vertical mapping.
    #[serde(default)]
    pub vertical_residual: bool,
    #[serde(default)]
    pub mask: MaskChoice,
}

fn default_in_channels() -> usize {
    3
}

fn default_keep_prob() -> f64 {
    0.9
}

impl GridSpec {
    /// `n_streams` streams, `n_sub` subsampling columns followed by `n_up`
    /// upsampling columns, all connections on.
    pub fn symmetric(n_streams: usize, n_sub: usize, n_up: usize, base_features: usize, num_classes: usize) -> Self {
        let mut columns = vec![ColumnKind::Sub; n_sub];
        columns.extend(std::iter::repeat_n(ColumnKind::Up, n_up));
        GridSpec {
            n_streams,
            columns,
            base_features,
            num_classes,
            in_channels: 3,
            keep_prob: default_keep_prob(),
            rescale_eval: false,
            fusion: Fusion::Sum,
            vertical_residual: false,
            mask: MaskChoice::default(),
        }
    }

    /// Five streams of 16..256 features, three subsampling then three
    /// upsampling columns.
    pub fn reference(num_classes: usize) -> Self {
        GridSpec::symmetric(5, 3, 3, 16, num_classes)
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn n_sub(&self) -> usize {
        self.columns.iter().filter(|c| **c == ColumnKind::Sub).count()
    }

    pub fn n_up(&self) -> usize {
        self.columns.iter().filter(|c| **c == ColumnKind::Up).count()
    }

    pub fn features(&self, stream: usize) -> usize {
        self.base_features << stream
    }

    /// Smallest input side keeping the deepest stream non-empty after
    /// `n_streams - 1` halvings.
    pub fn min_input_side(&self) -> usize {
        1 << self.n_streams.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |reason: String| Err(GridError::InvalidSpec(reason));
        if self.n_streams == 0 {
            return bad("at least one stream is required".into());
        }
        if self.n_streams > 16 {
            return bad(format!("{} streams is beyond any sensible grid", self.n_streams));
        }
        if self.base_features == 0 {
            return bad("base_features must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return bad(format!("keep_prob {} outside [0, 1]", self.keep_prob));
        }
        if let MaskChoice::Explicit(m) = &self.mask {
            if m.n_streams() != self.n_streams || m.n_columns() != self.n_columns() {
                return bad(format!(
                    "mask is {}x{} but the grid is {}x{}",
                    m.n_streams(),
                    m.n_columns(),
                    self.n_streams,
                    self.n_columns()
                ));
            }
        }
        Ok(())
    }

    pub fn connection_mask(&self) -> Result<ConnectionMask, GridError> {
        match &self.mask {
            MaskChoice::Preset(p) => preset_mask(*p, self),
            MaskChoice::Explicit(m) => Ok(m.clone()),
        }
    }
}

/// `(F_i, H_i, W_i)`: `F_0 * 2^i` channels and `i` ceiling halvings of the
/// input size.
pub fn stream_dims(spec: &GridSpec, stream: usize, input_hw: (usize, usize)) -> (usize, usize, usize) {
    let (mut h, mut w) = input_hw;
    for _ in 0..stream {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    (spec.features(stream), h, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskChoice {
    Preset(MaskPreset),
    Explicit(ConnectionMask),
}

impl Default for MaskChoice {
    fn default() -> Self {
        MaskChoice::Preset(MaskPreset::Full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPreset {
    /// Single down-then-up path.
    ConvDeconv,
    /// The conv-deconv path plus identity skips along every stream it leaves.
    UNet,
    /// Residual full-resolution stream 0 plus the conv-deconv path.
    Frrn,
    Full,
}

impl std::str::FromStr for MaskPreset {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv_deconv" => Ok(MaskPreset::ConvDeconv),
            "u_net" => Ok(MaskPreset::UNet),
            "frrn" => Ok(MaskPreset::Frrn),
            "full" => Ok(MaskPreset::Full),
            other => Err(GridError::InvalidSpec(format!("unknown mask preset {other:?}"))),
        }
    }
}

/// Per-block connection switches, indexed `[stream][column]`.
///
/// A horizontal step `X[i][j-1] -> X[i][j]` has two parts that are switched
/// separately: the identity carry and the residual mapping. The vertical
/// switch controls the subsampling or upsampling mapping into the block.
/// Masks only disable computation; parameters stay allocated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionMask {
    pub identity_on: Vec<Vec<bool>>,
    pub residual_on: Vec<Vec<bool>>,
    pub vertical_on: Vec<Vec<bool>>,
}

impl ConnectionMask {
    pub fn filled(n_streams: usize, n_columns: usize, on: bool) -> Self {
        let grid = vec![vec![on; n_columns]; n_streams];
        ConnectionMask {
            identity_on: grid.clone(),
            residual_on: grid.clone(),
            vertical_on: grid,
        }
    }

    pub fn n_streams(&self) -> usize {
        self.identity_on.len()
    }

    pub fn n_columns(&self) -> usize {
        self.identity_on.first().map_or(0, Vec::len)
    }

    pub fn horizontal_on(&self, i: usize, j: usize) -> bool {
        self.identity_on[i][j] || self.residual_on[i][j]
    }
}

/// Stream index visited by the down-then-up path at the end of each column,
/// or an error when the column order is not all-Sub-then-all-Up.
fn monotone_path(spec: &GridSpec) -> Result<Vec<(usize, usize)>, GridError> {
    let n_sub = spec.n_sub();
    let n_up = spec.n_up();
    let ordered = spec.columns[..n_sub].iter().all(|c| *c == ColumnKind::Sub);
    if !ordered {
        return Err(GridError::IncompatiblePreset(
            "preset needs every subsampling column before every upsampling column".into(),
        ));
    }
    let depth = spec.n_streams - 1;
    if depth > 0 && (n_sub == 0 || n_up == 0) {
        return Err(GridError::IncompatiblePreset(
            "preset needs at least one subsampling and one upsampling column".into(),
        ));
    }
    // Spread the descent over the Sub columns (earlier columns take the
    // remainder) and the ascent over the Up columns (later columns take it),
    // giving a symmetric path. Each entry is (entry stream, exit stream).
    let split = |levels: usize, cols: usize| -> Vec<usize> {
        if cols == 0 {
            return Vec::new();
        }
        (0..cols)
            .map(|k| levels / cols + usize::from(k < levels % cols))
            .collect()
    };
    let down = split(depth, n_sub);
    let mut up = split(depth, n_up);
    up.reverse();
    let mut path = Vec::with_capacity(spec.n_columns());
    let mut stream = 0;
    for d in down {
        path.push((stream, stream + d));
        stream += d;
    }
    for u in up {
        path.push((stream, stream - u));
        stream -= u;
    }
    Ok(path)
}

/// Builds one of the classical-architecture masks.
pub fn preset_mask(preset: MaskPreset, spec: &GridSpec) -> Result<ConnectionMask, GridError> {
    let (ns, nc) = (spec.n_streams, spec.n_columns());
    if preset == MaskPreset::Full {
        return Ok(ConnectionMask::filled(ns, nc, true));
    }
    let path = monotone_path(spec)?;
    let mut mask = ConnectionMask::filled(ns, nc, false);
    for (j, &(entry, exit)) in path.iter().enumerate() {
        mask.identity_on[entry][j] = true;
        let (lo, hi) = (entry.min(exit), entry.max(exit));
        for i in lo..=hi {
            if i != entry {
                mask.vertical_on[i][j] = true;
            }
        }
    }
    match preset {
        MaskPreset::ConvDeconv | MaskPreset::Full => {}
        MaskPreset::UNet => {
            // A stream left by the descent in column `a` is carried by
            // identity until the ascent returns to it in column `b`.
            for i in 0..ns {
                let leave = path.iter().position(|&(entry, exit)| entry <= i && i < exit);
                let back = path.iter().rposition(|&(entry, exit)| exit <= i && i < entry);
                if let (Some(a), Some(b)) = (leave, back) {
                    for row in mask.identity_on[i].iter_mut().take(b + 1).skip(a + 1) {
                        *row = true;
                    }
                }
            }
        }
        MaskPreset::Frrn => {
            for j in 0..nc {
                mask.identity_on[0][j] = true;
                mask.residual_on[0][j] = true;
            }
        }
    }
    Ok(mask)
}

/// Which blocks and connections exist structurally (all switches on).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub exists: Vec<Vec<bool>>,
    /// A horizontal predecessor exists (stem output for `(0, 0)`).
    pub has_horizontal: Vec<Vec<bool>>,
    pub has_vertical: Vec<Vec<bool>>,
}

impl Topology {
    pub fn of(spec: &GridSpec) -> Self {
        let all_on = ConnectionMask::filled(spec.n_streams, spec.n_columns(), true);
        let t = Topology {
            exists: Vec::new(),
            has_horizontal: Vec::new(),
            has_vertical: Vec::new(),
        };
        t.propagate(spec, &all_on)
    }

    /// Forward reachability from the stem under `mask`, restricted to the
    /// structural connections in `self` (when non-empty).
    pub(crate) fn propagate(&self, spec: &GridSpec, mask: &ConnectionMask) -> Topology {
        let (ns, nc) = (spec.n_streams, spec.n_columns());
        let mut exists = vec![vec![false; nc]; ns];
        let mut has_h = vec![vec![false; nc]; ns];
        let mut has_v = vec![vec![false; nc]; ns];
        let mut prev: Vec<bool> = (0..ns).map(|i| i == 0).collect();
        let structural = !self.exists.is_empty();
        for (j, kind) in spec.columns.iter().enumerate() {
            let order: Vec<usize> = match kind {
                ColumnKind::Sub => (0..ns).collect(),
                ColumnKind::Up => (0..ns).rev().collect(),
            };
            for i in order {
                let src = match kind {
                    ColumnKind::Sub => i.checked_sub(1),
                    ColumnKind::Up => (i + 1 < ns).then_some(i + 1),
                };
                let h = prev[i]
                    && mask.horizontal_on(i, j)
                    && (!structural || self.has_horizontal[i][j]);
                let v = src.is_some_and(|s| exists[s][j])
                    && mask.vertical_on[i][j]
                    && (!structural || self.has_vertical[i][j]);
                has_h[i][j] = h;
                has_v[i][j] = v;
                exists[i][j] = h || v;
            }
            prev = (0..ns).map(|i| exists[i][j]).collect();
        }
        Topology {
            exists,
            has_horizontal: has_h,
            has_vertical: has_v,
        }
    }
}
