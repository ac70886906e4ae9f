//! The classification network: a four-stage SE-ResNet1D backbone with
//! optional feature-statistics mixing after early stages, per-stage
//! concentration heads fused into one vector, and an MLP classifier.
//!
//! Three ablation variants share one parameter plan:
//!
//! * `Baseline` — plain residual blocks (no SE), final-stage GAP only.
//! * `Intermediate` — adds the per-stage concentration pipeline.
//! * `Full` — adds SE channel gating and training-time statistics mixing.
//!
//! # Checkpoint state order
//!
//! Checkpoints store every [`ParamStore`] entry, flattened in registration
//! order:
//!
//! 1. `stem.conv.w/b`, `stem.bn.gamma/beta/stats`
//! 2. per stage `s` in 1..=4, per block `b`:
//!    `stage{s}.block{b}.conv1.w/b`, `.bn1.gamma/beta/stats`,
//!    `.conv2.w/b`, `.bn2.gamma/beta/stats`,
//!    `.se.w1/b1/w2/b2` (Full only),
//!    `.shortcut.w/b` (only when the block changes shape)
//! 3. `conc{s}.w/b` for s 1..=4 (Intermediate and Full)
//! 4. `head.fc1.w/b`, `head.fc2.w/b`
//!
//! `*.bn.stats` entries have shape `[2, C]`: running mean then running
//! variance. They are stored but not trained, so a checkpoint is fully
//! self-describing for evaluation.

use crate::nn::{Graph, Mode, NodeId, ParamStore, Scalar};
use crate::util;
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Ablation variant gating which subsystems are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Intermediate,
    Full,
}

impl Variant {
    pub fn uses_se(self) -> bool {
        matches!(self, Variant::Full)
    }
    pub fn uses_concentration(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
    pub fn uses_mixstyle(self) -> bool {
        matches!(self, Variant::Full)
    }
    /// Baseline trains with plain cross-entropy; the other variants smooth.
    pub fn uses_label_smoothing(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Intermediate => "intermediate",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "intermediate" => Ok(Variant::Intermediate),
            "full" => Ok(Variant::Full),
            other => Err(format!(
                "unknown variant '{other}' (expected baseline|intermediate|full)"
            )),
        }
    }
}

/// Training-time feature-statistics mixing configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixStyleConfig {
    /// Apply probability per batch.
    pub p: f64,
    /// Beta concentration for the mixing coefficient λ ~ Beta(α, α).
    pub alpha: f64,
    /// 1-based stages after which mixing is inserted.
    pub stages: Vec<usize>,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        MixStyleConfig {
            p: 0.3,
            alpha: 0.1,
            stages: vec![1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub se_ratio: usize,
    pub conc_width: usize,
    pub mixstyle: MixStyleConfig,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub conc_dropout: f64,
    pub n_classes: usize,
    pub in_leads: usize,
    pub window_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            stage_widths: [64, 128, 256, 256],
            blocks_per_stage: 1,
            stem_kernel: 7,
            block_kernel: 3,
            se_ratio: 8,
            conc_width: 64,
            mixstyle: MixStyleConfig::default(),
            head_hidden: 256,
            head_dropout: 0.5,
            conc_dropout: 0.1,
            n_classes: 7,
            in_leads: 12,
            window_len: 5000,
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const MIX_SIGMA_CLAMP: f64 = 1e-6;

impl ModelConfig {
    /// A small configuration that trains in seconds on a laptop CPU while
    /// keeping every architectural element of the default.
    pub fn desk_scale(variant: Variant) -> Self {
        ModelConfig {
            variant,
            stage_widths: [16, 32, 48, 64],
            conc_width: 16,
            head_hidden: 64,
            window_len: 1200,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_classes < 2 {
            return Err("n_classes must be >= 2".into());
        }
        if self.in_leads < 1 || self.window_len < self.stem_kernel {
            return Err("input shape too small for the stem kernel".into());
        }
        if self.blocks_per_stage < 1 {
            return Err("blocks_per_stage must be >= 1".into());
        }
        let min_width = *self.stage_widths.iter().min().unwrap();
        if self.se_ratio < 1 || min_width % self.se_ratio != 0 {
            return Err(format!(
                "SE ratio {} must divide the minimum stage width {}",
                self.se_ratio, min_width
            ));
        }
        if !(0.0..=1.0).contains(&self.mixstyle.p) || self.mixstyle.alpha <= 0.0 {
            return Err("mixstyle requires 0 <= p <= 1 and alpha > 0".into());
        }
        if self.mixstyle.stages.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err("mixstyle stages must be within 1..=4".into());
        }
        if !(0.0..1.0).contains(&self.head_dropout) || !(0.0..1.0).contains(&self.conc_dropout) {
            return Err("dropout rates must be in [0, 1)".into());
        }
        if self.head_input_width() == 0 {
            return Err("head input width is zero".into());
        }
        Ok(())
    }

    /// Width of the fused vector feeding the MLP head.
    pub fn head_input_width(&self) -> usize {
        if self.variant.uses_concentration() {
            4 * self.conc_width
        } else {
            self.stage_widths[3]
        }
    }

    /// Stride of the first block of each 1-based stage.
    fn stage_stride(stage: usize) -> usize {
        if stage == 1 {
            1
        } else {
            2
        }
    }

    /// Time lengths after the stem and after each stage, for an input of
    /// `window_len` samples.
    pub fn time_lengths(&self) -> [usize; 5] {
        let mut t = conv_out_len(self.window_len, self.stem_kernel, 2, self.stem_kernel / 2);
        let mut out = [t; 5];
        for s in 1..=4 {
            let stride = Self::stage_stride(s);
            t = conv_out_len(t, self.block_kernel, stride, self.block_kernel / 2);
            // remaining convs in the stage are stride 1 and length-preserving
            out[s] = t;
        }
        out
    }

    fn plan(&self) -> Vec<PlanEntry> {
        let mut plan = Vec::new();
        let conv = |name: String, cout: usize, cin: usize, k: usize, plan: &mut Vec<PlanEntry>| {
            plan.push(PlanEntry {
                name: format!("{name}.w"),
                shape: vec![cout, cin, k],
                init: Init::HeNormal { fan_in: cin * k },
                trainable: true,
                decay_exempt: false,
            });
            plan.push(PlanEntry {
                name: format!("{name}.b"),
                shape: vec![cout],
                init: Init::Zero,
                trainable: true,
                decay_exempt: true,
            });
        };
        let bn = |name: String, c: usize, plan: &mut Vec<PlanEntry>| {
            plan.push(PlanEntry {
                name: format!("{name}.gamma"),
                shape: vec![c],
                init: Init::One,
                trainable: true,
                decay_exempt: true,
            });
            plan.push(PlanEntry {
                name: format!("{name}.beta"),
                shape: vec![c],
                init: Init::Zero,
                trainable: true,
                decay_exempt: true,
            });
            plan.push(PlanEntry {
                name: format!("{name}.stats"),
                shape: vec![2, c],
                init: Init::BnStats,
                trainable: false,
                decay_exempt: true,
            });
        };
        let linear = |name: String, o: usize, f: usize, plan: &mut Vec<PlanEntry>| {
            plan.push(PlanEntry {
                name: format!("{name}.w"),
                shape: vec![o, f],
                init: Init::HeNormal { fan_in: f },
                trainable: true,
                decay_exempt: false,
            });
            plan.push(PlanEntry {
                name: format!("{name}.b"),
                shape: vec![o],
                init: Init::Zero,
                trainable: true,
                decay_exempt: true,
            });
        };

        conv("stem.conv".into(), self.stage_widths[0], self.in_leads, self.stem_kernel, &mut plan);
        bn("stem.bn".into(), self.stage_widths[0], &mut plan);

        let mut cin = self.stage_widths[0];
        for s in 1..=4 {
            let cout = self.stage_widths[s - 1];
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { Self::stage_stride(s) } else { 1 };
                let bcin = if b == 0 { cin } else { cout };
                let base = format!("stage{s}.block{b}");
                conv(format!("{base}.conv1"), cout, bcin, self.block_kernel, &mut plan);
                bn(format!("{base}.bn1"), cout, &mut plan);
                conv(format!("{base}.conv2"), cout, cout, self.block_kernel, &mut plan);
                bn(format!("{base}.bn2"), cout, &mut plan);
                if self.variant.uses_se() {
                    let cr = cout / self.se_ratio;
                    linear(format!("{base}.se.fc1"), cr, cout, &mut plan);
                    linear(format!("{base}.se.fc2"), cout, cr, &mut plan);
                }
                if stride != 1 || bcin != cout {
                    conv(format!("{base}.shortcut"), cout, bcin, 1, &mut plan);
                }
            }
            cin = cout;
        }

        if self.variant.uses_concentration() {
            for s in 1..=4 {
                conv(format!("conc{s}"), self.conc_width, self.stage_widths[s - 1], 1, &mut plan);
            }
        }

        linear("head.fc1".into(), self.head_hidden, self.head_input_width(), &mut plan);
        linear("head.fc2".into(), self.n_classes, self.head_hidden, &mut plan);
        plan
    }

    /// Total floats in a checkpoint for this config (parameters + running
    /// statistics).
    pub fn state_len(&self) -> usize {
        self.plan().iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    /// Trainable parameter count, the "Params" column of efficiency reports.
    pub fn trainable_params(&self) -> usize {
        self.plan()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    /// Receptive field (in input samples) of one output sample of the given
    /// 1-based stage tap (0 = stem output).
    pub fn receptive_field(&self, stage: usize) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        let conv = |k: usize, s: usize, rf: &mut usize, jump: &mut usize| {
            *rf += (k - 1) * *jump;
            *jump *= s;
        };
        conv(self.stem_kernel, 2, &mut rf, &mut jump);
        for st in 1..=stage.min(4) {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { Self::stage_stride(st) } else { 1 };
                conv(self.block_kernel, stride, &mut rf, &mut jump);
                conv(self.block_kernel, 1, &mut rf, &mut jump);
            }
        }
        rf
    }

    /// Analytic floating-point operations (2 × multiply-accumulates) of one
    /// batch-1 eval forward pass.
    pub fn flops_per_forward(&self) -> u64 {
        let t = self.time_lengths();
        let mut macs: u64 = 0;
        let conv_macs = |cout: usize, cin: usize, k: usize, t_out: usize| -> u64 {
            (cout * cin * k * t_out) as u64
        };
        macs += conv_macs(self.stage_widths[0], self.in_leads, self.stem_kernel, t[0]);
        let mut cin = self.stage_widths[0];
        for s in 1..=4 {
            let cout = self.stage_widths[s - 1];
            let t_in = t[s - 1];
            let t_out = t[s];
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { Self::stage_stride(s) } else { 1 };
                let bcin = if b == 0 { cin } else { cout };
                let (ti, to) = if b == 0 { (t_in, t_out) } else { (t_out, t_out) };
                let _ = ti;
                macs += conv_macs(cout, bcin, self.block_kernel, to);
                macs += conv_macs(cout, cout, self.block_kernel, to);
                if self.variant.uses_se() {
                    let cr = cout / self.se_ratio;
                    macs += (cout * cr * 2) as u64;
                }
                if stride != 1 || bcin != cout {
                    macs += conv_macs(cout, bcin, 1, to);
                }
            }
            cin = cout;
        }
        if self.variant.uses_concentration() {
            for s in 1..=4 {
                macs += conv_macs(self.conc_width, self.stage_widths[s - 1], 1, t[s]);
            }
        }
        macs += (self.head_hidden * self.head_input_width()) as u64;
        macs += (self.n_classes * self.head_hidden) as u64;
        2 * macs
    }
}

fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - k) / stride + 1
}

enum Init {
    Zero,
    One,
    HeNormal { fan_in: usize },
    /// Running mean zeros then running variance ones.
    BnStats,
}

struct PlanEntry {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
    decay_exempt: bool,
}

/// Test hook forcing the statistics-mixing draw: a fixed λ and batch
/// permutation instead of sampled ones.
#[derive(Clone, Debug)]
pub struct MixDraw {
    pub lambda: f64,
    pub perm: Vec<usize>,
}

/// Nodes of interest from one forward pass.
pub struct ForwardTrace {
    pub input: NodeId,
    pub stem: NodeId,
    /// Post-block (and post-mixing, in train mode) output of each stage.
    pub stages: [NodeId; 4],
    /// Fused feature vector entering the head.
    pub fusion: NodeId,
    pub logits: NodeId,
    /// Graph leaf per parameter-store entry, for gradient scatter-back.
    param_nodes: Vec<(usize, NodeId)>,
}

/// The network: configuration plus its parameter store.
#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. Initialization order equals
    /// registration order, so a given seed always yields the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = util::rng_from(&[seed, 0x6d6f64656c]);
        let mut params = ParamStore::new();
        for entry in config.plan() {
            let n: usize = entry.shape.iter().product();
            let values: Vec<T> = match entry.init {
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
                Init::BnStats => {
                    let c = n / 2;
                    let mut v = vec![T::zero(); n];
                    for slot in v.iter_mut().skip(c) {
                        *slot = T::one();
                    }
                    v
                }
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("valid normal");
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
            };
            params.register(&entry.name, &entry.shape, values, entry.trainable, entry.decay_exempt);
        }
        Model { config, params }
    }

    /// Restores a model from checkpoint state.
    pub fn from_state(config: ModelConfig, flat: &[f32]) -> Self {
        let mut model = Model::new(config, 0);
        model.params.load_f32(flat);
        model
    }

    /// Forward pass over a flat `[B, leads, L]` input batch.
    ///
    /// Train mode consumes `rng` for dropout masks and the mixing draw and
    /// updates batch-norm running statistics. `mix` forces the mixing
    /// coefficient and permutation (test hook); `None` samples them.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        batch: &[T],
        batch_size: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        mix: Option<&MixDraw>,
    ) -> ForwardTrace {
        let cfg = self.config.clone();
        assert_eq!(
            batch.len(),
            batch_size * cfg.in_leads * cfg.window_len,
            "forward: batch has wrong shape (expected {}x{}x{})",
            batch_size,
            cfg.in_leads,
            cfg.window_len
        );
        let x = g.constant(&[batch_size, cfg.in_leads, cfg.window_len], batch.to_vec());
        self.forward_from(g, x, 0, &[], mode, rng, mix)
    }

    /// Forward pass that starts at stage `start_stage + 1` from activation
    /// node `a` (a `[B, C, T]` tensor already on the graph), using
    /// `earlier_taps` as constant stage outputs for stages before it.
    /// `start_stage = 0` with `a` = raw input runs the whole network.
    ///
    /// The tail form exists so attribution code can treat an intermediate
    /// activation as the differentiation variable.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_from(
        &mut self,
        g: &mut Graph<T>,
        a: NodeId,
        start_stage: usize,
        earlier_taps: &[(Vec<usize>, Vec<T>)],
        mode: Mode,
        rng: &mut ChaCha8Rng,
        mix: Option<&MixDraw>,
    ) -> ForwardTrace {
        let cfg = self.config.clone();
        assert!(start_stage <= 4, "start_stage must be in 0..=4");
        assert_eq!(
            earlier_taps.len(),
            start_stage.saturating_sub(1),
            "forward_from: need one earlier tap per stage before the start"
        );

        // Bridge every parameter into the graph once.
        let mut param_nodes = Vec::with_capacity(self.params.entries().len());
        let mut node_of = std::collections::HashMap::new();
        for (idx, e) in self.params.entries().iter().enumerate() {
            let id = if e.trainable {
                g.leaf(&e.shape, e.values.clone())
            } else {
                continue;
            };
            param_nodes.push((idx, id));
            node_of.insert(e.name.clone(), id);
        }
        let p = |name: &str, node_of: &std::collections::HashMap<String, NodeId>| -> NodeId {
            *node_of
                .get(name)
                .unwrap_or_else(|| panic!("missing param node {name}"))
        };

        let batch_size = g.shape(a)[0];
        let mut stem = a;
        let mut cur = a;
        if start_stage == 0 {
            let w = p("stem.conv.w", &node_of);
            let b = p("stem.conv.b", &node_of);
            let c = g.conv1d(a, w, b, 2, cfg.stem_kernel / 2);
            let n = self.bn(g, c, "stem.bn", &node_of, mode);
            stem = g.relu(n);
            cur = stem;
        }

        let mut taps: Vec<NodeId> = Vec::with_capacity(4);
        for tap in earlier_taps {
            taps.push(g.constant(&tap.0, tap.1.clone()));
        }
        if start_stage >= 1 {
            // `a` stands in for the output of stage `start_stage`
            taps.push(cur);
        }
        for s in (start_stage + 1)..=4 {
            let cout = cfg.stage_widths[s - 1];
            for b in 0..cfg.blocks_per_stage {
                let stride = if b == 0 { ModelConfig::stage_stride(s) } else { 1 };
                let base = format!("stage{s}.block{b}");
                cur = self.res_block(g, cur, &base, cout, stride, mode, &node_of);
            }
            if cfg.variant.uses_mixstyle()
                && mode == Mode::Train
                && cfg.mixstyle.stages.contains(&s)
            {
                cur = self.mixstyle(g, cur, rng, mix);
            }
            taps.push(cur);
        }
        debug_assert_eq!(taps.len(), 4);
        let stages = [taps[0], taps[1], taps[2], taps[3]];

        // Fusion: per-stage concentration concatenated, or plain GAP of the
        // last stage for the baseline.
        let fusion = if cfg.variant.uses_concentration() {
            let mut hs = Vec::with_capacity(4);
            for s in 1..=4 {
                hs.push(self.concentration(g, stages[s - 1], s, mode, rng, &node_of));
            }
            g.concat_features(&hs)
        } else {
            g.global_avg_pool(stages[3])
        };

        let fc1w = p("head.fc1.w", &node_of);
        let fc1b = p("head.fc1.b", &node_of);
        let h = g.linear(fusion, fc1w, fc1b);
        let h = g.relu(h);
        let h = g.dropout(h, cfg.head_dropout, mode, rng);
        let fc2w = p("head.fc2.w", &node_of);
        let fc2b = p("head.fc2.b", &node_of);
        let logits = g.linear(h, fc2w, fc2b);
        debug_assert_eq!(g.shape(logits), &[batch_size, cfg.n_classes]);

        ForwardTrace {
            input: a,
            stem,
            stages,
            fusion,
            logits,
            param_nodes,
        }
    }

    fn bn(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        base: &str,
        node_of: &std::collections::HashMap<String, NodeId>,
        mode: Mode,
    ) -> NodeId {
        let gamma = node_of[&format!("{base}.gamma")];
        let beta = node_of[&format!("{base}.beta")];
        let stats = self.params.get_mut(&format!("{base}.stats"));
        let c = stats.shape[1];
        let (rm, rv) = stats.values.split_at_mut(c);
        g.batchnorm1d(
            x,
            gamma,
            beta,
            rm,
            rv,
            mode,
            T::of(BN_MOMENTUM),
            T::of(BN_EPS),
        )
    }

    fn res_block(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        base: &str,
        cout: usize,
        stride: usize,
        mode: Mode,
        node_of: &std::collections::HashMap<String, NodeId>,
    ) -> NodeId {
        let cfg = &self.config;
        let pad = cfg.block_kernel / 2;
        let cin = g.shape(x)[1];
        let use_se = cfg.variant.uses_se();

        let w1 = node_of[&format!("{base}.conv1.w")];
        let b1 = node_of[&format!("{base}.conv1.b")];
        let c1 = g.conv1d(x, w1, b1, stride, pad);
        let n1 = self.bn(g, c1, &format!("{base}.bn1"), node_of, mode);
        let a1 = g.relu(n1);
        let w2 = node_of[&format!("{base}.conv2.w")];
        let b2 = node_of[&format!("{base}.conv2.b")];
        let c2 = g.conv1d(a1, w2, b2, 1, pad);
        let n2 = self.bn(g, c2, &format!("{base}.bn2"), node_of, mode);

        let branch = if use_se {
            self.se_block(g, n2, &format!("{base}.se"), node_of)
        } else {
            n2
        };

        let shortcut = if stride != 1 || cin != cout {
            let ws = node_of[&format!("{base}.shortcut.w")];
            let bs = node_of[&format!("{base}.shortcut.b")];
            g.conv1d(x, ws, bs, stride, 0)
        } else {
            x
        };
        let sum = g.add(shortcut, branch);
        g.relu(sum)
    }

    /// Channel gate: `x` scaled per channel by `sigmoid(W2·relu(W1·GAP(x)))`.
    /// The gate is in (0, 1), so the output is elementwise bounded by the
    /// input.
    fn se_block(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        base: &str,
        node_of: &std::collections::HashMap<String, NodeId>,
    ) -> NodeId {
        let pooled = g.global_avg_pool(x);
        let w1 = node_of[&format!("{base}.fc1.w")];
        let b1 = node_of[&format!("{base}.fc1.b")];
        let h = g.linear(pooled, w1, b1);
        let h = g.relu(h);
        let w2 = node_of[&format!("{base}.fc2.w")];
        let b2 = node_of[&format!("{base}.fc2.b")];
        let s = g.linear(h, w2, b2);
        let s = g.sigmoid(s);
        g.channel_scale(x, s)
    }

    /// Concentration head for 1-based stage `s`:
    /// `GAP(dropout(relu(conv1x1(F_s))))`, one compressed vector per stage.
    fn concentration(
        &self,
        g: &mut Graph<T>,
        f_s: NodeId,
        s: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        node_of: &std::collections::HashMap<String, NodeId>,
    ) -> NodeId {
        let w = node_of[&format!("conc{s}.w")];
        let b = node_of[&format!("conc{s}.b")];
        let c = g.conv1d(f_s, w, b, 1, 0);
        let r = g.relu(c);
        let d = g.dropout(r, self.config.conc_dropout, mode, rng);
        g.global_avg_pool(d)
    }

    /// Training-time feature-statistics mixing over `[B, C, T]`.
    ///
    /// With probability `1 − p` (or batch size 1) this is the identity.
    /// Otherwise a coefficient λ ~ Beta(α, α) and a batch permutation blend
    /// per-(instance, channel) mean and standard deviation with a partner's,
    /// and the input is re-expressed under the mixed statistics. The
    /// statistics are treated as constants in backward. `forced` pins the
    /// draw for tests.
    pub fn mixstyle(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        rng: &mut ChaCha8Rng,
        forced: Option<&MixDraw>,
    ) -> NodeId {
        let shape = g.shape(x);
        let (bs, c, t) = (shape[0], shape[1], shape[2]);
        if bs < 2 {
            return x;
        }
        let (lambda, perm) = match forced {
            Some(d) => {
                assert_eq!(d.perm.len(), bs, "mix draw permutation length");
                (d.lambda, d.perm.clone())
            }
            None => {
                let fire: f64 = rng.random_range(0.0..1.0);
                if fire >= self.config.mixstyle.p {
                    return x;
                }
                let beta = Beta::new(self.config.mixstyle.alpha, self.config.mixstyle.alpha)
                    .expect("alpha > 0");
                let lambda: f64 = beta.sample(rng);
                let mut perm: Vec<usize> = (0..bs).collect();
                perm.shuffle(rng);
                (lambda, perm)
            }
        };

        let xv = g.value(x);
        let tf = T::of(t as f64);
        let mut mu = vec![T::zero(); bs * c];
        let mut sigma = vec![T::zero(); bs * c];
        for bc in 0..bs * c {
            let row = &xv[bc * t..(bc + 1) * t];
            let mut s = T::zero();
            for &v in row {
                s = s + v;
            }
            let m = s / tf;
            let mut ss = T::zero();
            for &v in row {
                let d = v - m;
                ss = ss + d * d;
            }
            mu[bc] = m;
            sigma[bc] = (ss / tf).sqrt().max(T::of(MIX_SIGMA_CLAMP));
        }
        let lam = T::of(lambda);
        let one_m = T::one() - lam;
        let mut scale = vec![T::zero(); bs * c];
        let mut shift = vec![T::zero(); bs * c];
        for b in 0..bs {
            let pb = perm[b];
            for ci in 0..c {
                let bc = b * c + ci;
                let pbc = pb * c + ci;
                let gamma_mix = lam * sigma[bc] + one_m * sigma[pbc];
                let beta_mix = lam * mu[bc] + one_m * mu[pbc];
                let sc = gamma_mix / sigma[bc];
                scale[bc] = sc;
                shift[bc] = beta_mix - mu[bc] * sc;
            }
        }
        g.channel_affine(x, scale, shift)
    }

    /// Adds the graph's parameter-leaf gradients into the store.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, trace: &ForwardTrace) {
        for &(idx, node) in &trace.param_nodes {
            if let Some(grad) = g.grad(node) {
                let entry = &mut self.params.entries_mut()[idx];
                for (acc, &gv) in entry.grad.iter_mut().zip(grad) {
                    *acc = *acc + gv;
                }
            }
        }
    }

    /// Eval-mode logits for a batch, as plain vectors (row per instance).
    pub fn infer(&mut self, batch: &[T], batch_size: usize) -> Vec<Vec<T>> {
        let mut g = Graph::new();
        let mut rng = util::rng_from(&[0]);
        let trace = self.forward(&mut g, batch, batch_size, Mode::Eval, &mut rng, None);
        let k = self.config.n_classes;
        let lv = g.value(trace.logits);
        (0..batch_size)
            .map(|b| lv[b * k..(b + 1) * k].to_vec())
            .collect()
    }
}

/// Efficiency summary for one configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub trainable_params: usize,
    pub flops_per_forward: u64,
    pub median_latency_ms: f64,
    pub runs: usize,
}

/// Measures inference latency (batch 1, eval mode) over `runs` forwards and
/// reports the median alongside the analytic counts.
pub fn count_params_flops(config: &ModelConfig, runs: usize) -> EfficiencyReport {
    assert!(runs >= 1, "need at least one timing run");
    let mut model: Model<f32> = Model::new(config.clone(), 0);
    let batch = vec![0.1f32; config.in_leads * config.window_len];
    let mut timings = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = std::time::Instant::now();
        let _ = model.infer(&batch, 1);
        timings.push(start.elapsed().as_secs_f64() * 1e3);
    }
    timings.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if runs % 2 == 1 {
        timings[runs / 2]
    } else {
        0.5 * (timings[runs / 2 - 1] + timings[runs / 2])
    };
    EfficiencyReport {
        trainable_params: config.trainable_params(),
        flops_per_forward: config.flops_per_forward(),
        median_latency_ms: median,
        runs,
    }
}
