//! Analytic floating-point operation counts. One multiply–add counts as two
//! flops. Elementwise adds, activations and resizes are not modeled.

use std::fmt::Write as _;

use crate::network::{FusionMode, NetConfig, PoolAxis};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FlopsError {
    #[error("invalid dims: {0}")]
    Dims(String),
}

pub type Result<T> = std::result::Result<T, FlopsError>;

pub const CONV_FORMULA: &str = "2*K^2*C_in*C_out*H_out*W_out";
pub const NORM_FORMULA: &str = "4*C*H*W";

/// Cost of a single layer or term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
    pub params: u64,
    pub formula: String,
}

impl LayerCost {
    fn new(name: impl Into<String>, flops: u64, params: u64, formula: impl Into<String>) -> Self {
        LayerCost {
            name: name.into(),
            flops,
            params,
            formula: formula.into(),
        }
    }
}

/// Ordered list of layer costs with totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostTable {
    pub rows: Vec<LayerCost>,
}

impl CostTable {
    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Sum of flops over rows whose name starts with `prefix`.
    pub fn flops_with_prefix(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.flops)
            .sum()
    }

    fn push(&mut self, row: LayerCost) {
        self.rows.push(row);
    }

    fn extend(&mut self, other: CostTable) {
        self.rows.extend(other.rows);
    }

    /// Tab-separated `name, flops, params, formula` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("name\tflops\tparams\tformula\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.name, r.flops, r.params, r.formula);
        }
        let _ = writeln!(s, "total\t{}\t{}\t", self.total_flops(), self.total_params());
        s
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["layer".len()])
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<name_w$}  {:>16}  {:>10}  formula\n", "layer", "flops", "params");
        for r in &self.rows {
            let _ = writeln!(s, "{:<name_w$}  {:>16}  {:>10}  {}", r.name, r.flops, r.params, r.formula);
        }
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>16}  {:>10}  ({:.4} GFLOPs)",
            "total",
            self.total_flops(),
            self.total_params(),
            self.total_flops() as f64 / 1e9
        );
        s
    }
}

/// `2·K²·C_in·C_out·H_out·W_out`.
pub fn flops_conv(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (k * k) as u64 * c_in as u64 * c_out as u64 * h_out as u64 * w_out as u64
}

/// Mean, variance, subtract and scale passes: `4·C·H·W`.
pub fn flops_norm(c: usize, h: usize, w: usize) -> u64 {
    4 * c as u64 * h as u64 * w as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    GeneralFusion,
    Ffdn,
    AttnConventional,
    AttnHorizontal,
    AttnVertical,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::GeneralFusion => "general_fusion",
            VariantKind::Ffdn => "ffdn",
            VariantKind::AttnConventional => "attn_conventional",
            VariantKind::AttnHorizontal => "attn_horizontal",
            VariantKind::AttnVertical => "attn_vertical",
        }
    }

    fn is_attention(self) -> bool {
        matches!(
            self,
            VariantKind::AttnConventional | VariantKind::AttnHorizontal | VariantKind::AttnVertical
        )
    }
}

/// Feature width `c`, reduced query/key width `c_hat`, finest map `h×w`
/// and number of pyramid levels (each level halves the previous one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub c: usize,
    pub c_hat: usize,
    pub h: usize,
    pub w: usize,
    pub levels: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.c_hat == 0 || self.h == 0 || self.w == 0 {
            return Err(FlopsError::Dims(format!("non-positive extent in {self:?}")));
        }
        if self.c_hat > self.c {
            return Err(FlopsError::Dims(format!("c_hat {} exceeds c {}", self.c_hat, self.c)));
        }
        Ok(())
    }

    fn level(&self, l: usize) -> (usize, usize) {
        (self.h.div_ceil(1 << l), self.w.div_ceil(1 << l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub dims: Dims,
}

impl VariantSpec {
    pub fn cost(&self) -> Result<CostTable> {
        if self.kind.is_attention() {
            flops_attention(self.kind, &self.dims)
        } else {
            flops_fusion(self.kind, &self.dims)
        }
    }
}

fn conv_row(name: String, k: usize, c_in: usize, c_out: usize, h: usize, w: usize, bias: bool) -> LayerCost {
    let params = (k * k * c_in * c_out + if bias { c_out } else { 0 }) as u64;
    LayerCost::new(name, flops_conv(k, c_in, c_out, h, w), params, CONV_FORMULA)
}

fn norm_row(name: String, c: usize, h: usize, w: usize) -> LayerCost {
    LayerCost::new(name, flops_norm(c, h, w), 2 * c as u64, NORM_FORMULA)
}

fn qkv_rows(t: &mut CostTable, prefix: &str, d: &Dims, h: usize, w: usize) {
    for (part, out) in [("query", d.c_hat), ("key", d.c_hat), ("value", d.c)] {
        t.push(conv_row(format!("{prefix}.{part}"), 1, d.c, out, h, w, true));
    }
}

/// Attention variants. Conventional attention forms an `HW×HW` affinity on
/// the full map; the axial variants pool one axis away first and tile the
/// attended result back.
pub fn flops_attention(kind: VariantKind, d: &Dims) -> Result<CostTable> {
    d.validate()?;
    let (c, ch) = (d.c as u64, d.c_hat as u64);
    let volume = c * d.h as u64 * d.w as u64;
    let mut t = CostTable::default();
    let prefix = kind.name();
    let len = match kind {
        VariantKind::AttnConventional => {
            qkv_rows(&mut t, prefix, d, d.h, d.w);
            (d.h * d.w) as u64
        }
        VariantKind::AttnVertical | VariantKind::AttnHorizontal => {
            let (h, w, len) = if kind == VariantKind::AttnVertical {
                (1, d.w, d.w)
            } else {
                (d.h, 1, d.h)
            };
            t.push(LayerCost::new(format!("{prefix}.pool"), volume, 0, "C*H*W"));
            qkv_rows(&mut t, prefix, d, h, w);
            len as u64
        }
        other => {
            return Err(FlopsError::Dims(format!("{} is not an attention variant", other.name())));
        }
    };
    let l2 = len * len;
    let l2_name = match kind {
        VariantKind::AttnConventional => "(HW)^2",
        VariantKind::AttnVertical => "W^2",
        _ => "H^2",
    };
    t.push(LayerCost::new(format!("{prefix}.affinity"), 2 * ch * l2, 0, format!("2*C_hat*{l2_name}")));
    t.push(LayerCost::new(format!("{prefix}.aggregation"), 2 * c * l2, 0, format!("2*C*{l2_name}")));
    if kind != VariantKind::AttnConventional {
        t.push(LayerCost::new(format!("{prefix}.tile"), volume, 0, "C*H*W"));
    }
    Ok(t)
}

/// Affinity plus aggregation flops only.
pub fn attention_core_flops(t: &CostTable) -> u64 {
    t.rows
        .iter()
        .filter(|r| r.name.ends_with(".affinity") || r.name.ends_with(".aggregation"))
        .map(|r| r.flops)
        .sum()
}

/// Fusion variants over `levels` pyramid levels of width `c`. Both project
/// every level with a 1×1 conv. FFDN then adds a layer norm and an instance
/// norm at the finest resolution; the general block instead runs a 1×1
/// conv-BN-ReLU, a global average pool, a 1×1 conv-BN-sigmoid on the
/// pooled vector and a channel gating multiply.
pub fn flops_fusion(kind: VariantKind, d: &Dims) -> Result<CostTable> {
    d.validate()?;
    let mut t = CostTable::default();
    if d.levels == 0 {
        return Ok(t);
    }
    let prefix = kind.name();
    for l in 0..d.levels {
        let (h, w) = d.level(l);
        t.push(conv_row(format!("{prefix}.proj{}", l + 1), 1, d.c, d.c, h, w, true));
    }
    let (c, h, w) = (d.c, d.h, d.w);
    let volume = (c * h * w) as u64;
    match kind {
        VariantKind::Ffdn => {
            t.push(norm_row(format!("{prefix}.layer_norm"), c, h, w));
            t.push(norm_row(format!("{prefix}.instance_norm"), c, h, w));
        }
        VariantKind::GeneralFusion => {
            t.push(conv_row(format!("{prefix}.block1.conv"), 1, c, c, h, w, false));
            t.push(norm_row(format!("{prefix}.block1.bn"), c, h, w));
            t.push(LayerCost::new(format!("{prefix}.pool"), volume, 0, "C*H*W"));
            t.push(conv_row(format!("{prefix}.block2.conv"), 1, c, c, 1, 1, false));
            t.push(norm_row(format!("{prefix}.block2.bn"), c, 1, 1));
            t.push(LayerCost::new(format!("{prefix}.gate"), volume, 0, "C*H*W"));
        }
        other => {
            return Err(FlopsError::Dims(format!("{} is not a fusion variant", other.name())));
        }
    }
    Ok(t)
}

/// Options for [`flops_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    pub height: usize,
    pub width: usize,
    /// Count the two auxiliary heads, which only run in training.
    pub include_aux: bool,
}

/// Per-layer cost of the segmentation network for one image, in forward
/// order. Batch norms are charged the full four passes.
pub fn flops_report(cfg: &NetConfig, opts: &ReportOptions) -> Result<CostTable> {
    let (h, w) = (opts.height, opts.width);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(FlopsError::Dims(format!("input {h}x{w} is not a positive multiple of 32")));
    }
    let c = cfg.backbone.stage_channels;
    if c.contains(&0) || cfg.backbone.blocks_per_stage == 0 || cfg.fpn_width == 0 || cfg.n_classes == 0 {
        return Err(FlopsError::Dims(format!("invalid network config {cfg:?}")));
    }
    let mut t = CostTable::default();
    let conv_block = |t: &mut CostTable, name: &str, cin: usize, cout: usize, k: usize, ho: usize, wo: usize| {
        t.push(conv_row(format!("{name}.conv"), k, cin, cout, ho, wo, false));
        t.push(norm_row(format!("{name}.bn"), cout, ho, wo));
    };

    let (mut hs, mut ws) = (h / 2, w / 2);
    conv_block(&mut t, "backbone.stem", 3, c[0], 3, hs, ws);
    let mut cin = c[0];
    let mut sizes = Vec::new();
    for (s, &cs) in c.iter().enumerate() {
        hs /= 2;
        ws /= 2;
        for i in 0..cfg.backbone.blocks_per_stage {
            let name = format!("backbone.stage{}.block{i}", s + 1);
            let bin = if i == 0 { cin } else { cs };
            conv_block(&mut t, &format!("{name}.conv1"), bin, cs, 3, hs, ws);
            conv_block(&mut t, &format!("{name}.conv2"), cs, cs, 3, hs, ws);
            if i == 0 {
                conv_block(&mut t, &format!("{name}.proj"), bin, cs, 1, hs, ws);
            }
        }
        sizes.push((hs, ws));
        cin = cs;
    }

    let d = cfg.fpn_width;
    for (i, (&cs, &(lh, lw))) in c.iter().zip(&sizes).enumerate() {
        t.push(conv_row(format!("fpn.lateral{}", i + 1), 1, cs, d, lh, lw, true));
    }
    for (i, &(lh, lw)) in sizes.iter().enumerate() {
        conv_block(&mut t, &format!("fpn.refine{}", i + 1), d, d, 3, lh, lw);
    }

    let (h1, w1) = sizes[0];
    for (i, &(lh, lw)) in sizes.iter().enumerate() {
        t.push(conv_row(format!("ffdn.proj{}", i + 1), 1, d, d, lh, lw, true));
    }
    // Norm parameters exist in every mode; only the active branches cost flops.
    let (ln_flops, in_flops) = match cfg.fusion {
        FusionMode::Both => (flops_norm(d, h1, w1), flops_norm(d, h1, w1)),
        FusionMode::LayerOnly => (flops_norm(d, h1, w1), 0),
        FusionMode::InstanceOnly => (0, flops_norm(d, h1, w1)),
        FusionMode::Plain => (0, 0),
    };
    t.push(LayerCost::new("ffdn.ln", ln_flops, 2 * d as u64, NORM_FORMULA));
    t.push(LayerCost::new("ffdn.in", in_flops, 2 * d as u64, NORM_FORMULA));

    if let Some(axis) = cfg.attention {
        let kind = match axis {
            PoolAxis::Vertical => VariantKind::AttnVertical,
            PoolAxis::Horizontal => VariantKind::AttnHorizontal,
        };
        let dims = Dims {
            c: d,
            c_hat: (d / 8).max(1),
            h: h1,
            w: w1,
            levels: 1,
        };
        let mut at = flops_attention(kind, &dims)?;
        for r in &mut at.rows {
            r.name = r.name.replacen(kind.name(), "attention", 1);
        }
        t.extend(at);
    }

    let head = |t: &mut CostTable, name: &str, lh: usize, lw: usize| {
        conv_block(t, &format!("{name}.block"), d, d, 3, lh, lw);
        t.push(conv_row(format!("{name}.classifier"), 1, d, cfg.n_classes, lh, lw, true));
    };
    head(&mut t, "head", h1, w1);
    if opts.include_aux {
        head(&mut t, "aux1", sizes[2].0, sizes[2].1);
        head(&mut t, "aux2", sizes[3].0, sizes[3].1);
    } else {
        // Auxiliary parameters are carried but never run at inference.
        for (name, (lh, lw)) in [("aux1", sizes[2]), ("aux2", sizes[3])] {
            let mut aux = CostTable::default();
            head(&mut aux, name, lh, lw);
            for mut r in aux.rows {
                r.flops = 0;
                t.push(r);
            }
        }
    }
    Ok(t)
}

/// Published totals the operating point is fitted against, in flops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Targets {
    pub attn_conventional: f64,
    pub attn_vertical: f64,
    pub general_fusion: f64,
    pub ffdn: f64,
    /// Input image `(H, W)` whose pyramid levels are searched.
    pub input: (usize, usize),
}

impl Default for Targets {
    fn default() -> Self {
        Targets {
            attn_conventional: 87.52e9,
            attn_vertical: 0.22e9,
            general_fusion: 1.08e9,
            ffdn: 0.54e9,
            input: (512, 1024),
        }
    }
}

impl Targets {
    pub fn attention_ratio(&self) -> f64 {
        self.attn_conventional / self.attn_vertical
    }

    pub fn fusion_ratio(&self) -> f64 {
        self.general_fusion / self.ffdn
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub dims: Dims,
    /// Output stride of the searched level.
    pub stride: usize,
    pub attn_conventional: u64,
    pub attn_vertical: u64,
    pub general_fusion: u64,
    pub ffdn: u64,
    pub score: f64,
}

impl OperatingPoint {
    pub fn attention_ratio(&self) -> f64 {
        self.attn_conventional as f64 / self.attn_vertical as f64
    }

    pub fn fusion_ratio(&self) -> f64 {
        self.general_fusion as f64 / self.ffdn as f64
    }

    /// Largest relative deviation of the four modeled totals from `t`.
    pub fn max_total_error(&self, t: &Targets) -> f64 {
        [
            (self.attn_conventional, t.attn_conventional),
            (self.attn_vertical, t.attn_vertical),
            (self.general_fusion, t.general_fusion),
            (self.ffdn, t.ffdn),
        ]
        .iter()
        .map(|&(m, p)| (m as f64 / p - 1.0).abs())
        .fold(0.0, f64::max)
    }
}

/// Exhaustive search over the pyramid levels of the target input (strides
/// 4 to 32), widths `C ∈ {8, 16, …, 512}` and `Ĉ ∈ {C/8, C/4, C/2, C}`,
/// with a four-level pyramid for fusion. Minimizes the squared log error of
/// the two cost ratios plus a small weight (1e-3) on the mean squared log
/// error of the four absolute totals, which breaks near-ties among points
/// with equal ratios. Ties on the full score keep the first point in
/// (stride, C, Ĉ) order.
pub fn fit_operating_point(t: &Targets) -> Result<OperatingPoint> {
    let (ih, iw) = t.input;
    let mut best: Option<OperatingPoint> = None;
    for stride in [4, 8, 16, 32] {
        let (h, w) = (ih / stride, iw / stride);
        if h == 0 || w == 0 {
            continue;
        }
        for c in (8..=512).step_by(8) {
            let mut hats = vec![(c / 8).max(1), c / 4, c / 2, c];
            hats.dedup();
            for c_hat in hats {
                let dims = Dims { c, c_hat, h, w, levels: 4 };
                let cost = |k| -> Result<u64> { Ok(VariantSpec { kind: k, dims }.cost()?.total_flops()) };
                let mut p = OperatingPoint {
                    dims,
                    stride,
                    attn_conventional: cost(VariantKind::AttnConventional)?,
                    attn_vertical: cost(VariantKind::AttnVertical)?,
                    general_fusion: cost(VariantKind::GeneralFusion)?,
                    ffdn: cost(VariantKind::Ffdn)?,
                    score: 0.0,
                };
                let sq = |a: f64, b: f64| (a / b).ln().powi(2);
                let totals = sq(p.attn_conventional as f64, t.attn_conventional)
                    + sq(p.attn_vertical as f64, t.attn_vertical)
                    + sq(p.general_fusion as f64, t.general_fusion)
                    + sq(p.ffdn as f64, t.ffdn);
                p.score = sq(p.attention_ratio(), t.attention_ratio())
                    + sq(p.fusion_ratio(), t.fusion_ratio())
                    + 1e-3 * totals / 4.0;
                if best.is_none_or(|b| p.score < b.score) {
                    best = Some(p);
                }
            }
        }
    }
    best.ok_or_else(|| FlopsError::Dims(format!("input {ih}x{iw} has no searchable level")))
}
