use ldprune_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Op, OperatorGraph, OperatorNode, Param, Signature, SkipLink, Step};
use crate::error::{CoreError, Result};

/// Architecture hyper-parameters of the toy conditional U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub latent_channels: usize,
    /// Latents are square, `latent_size x latent_size`.
    pub latent_size: usize,
    pub base_width: usize,
    /// Width of level `l` is `base_width * channel_mult[l]`.
    pub channel_mult: Vec<usize>,
    /// Levels carrying BasicTransformerBlocks.
    pub attention_levels: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub cond_dim: usize,
    pub cond_tokens: usize,
    pub num_conditions: usize,
    pub ff_mult: usize,
    pub max_groups: usize,
}

impl Default for UNetSpec {
    /// Three levels over 4x16x16 latents, widths 32/64/128, attention on the
    /// two coarsest levels.
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            base_width: 32,
            channel_mult: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            res_blocks_per_level: 2,
            cond_dim: 32,
            cond_tokens: 4,
            num_conditions: 8,
            ff_mult: 2,
            max_groups: 8,
        }
    }
}

impl UNetSpec {
    /// Two levels over 4x8x8 latents, widths 16/32. Same operator kinds as
    /// the default, small enough for end-to-end runs on one CPU core.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            base_width: 16,
            channel_mult: vec![1, 2],
            attention_levels: vec![1],
            res_blocks_per_level: 2,
            cond_dim: 16,
            cond_tokens: 4,
            num_conditions: 4,
            ff_mult: 2,
            max_groups: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn latent_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.latent_channels, self.latent_size, self.latent_size]
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidSpec(m));
        if self.channel_mult.is_empty() {
            return bad("at least one resolution level is required".into());
        }
        if self.latent_channels == 0
            || self.base_width == 0
            || self.cond_dim == 0
            || self.cond_tokens == 0
            || self.num_conditions == 0
            || self.ff_mult == 0
            || self.max_groups == 0
            || self.res_blocks_per_level == 0
            || self.channel_mult.contains(&0)
        {
            return bad("all widths and counts must be positive".into());
        }
        if self.base_width % 2 != 0 {
            return bad("base_width must be even (sinusoidal embedding)".into());
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} outside 0..{}", self.levels()));
        }
        let factor = 1usize << (self.levels() - 1);
        if self.latent_size == 0 || self.latent_size % factor != 0 {
            return bad(format!(
                "latent_size {} not divisible by {factor} for {} levels",
                self.latent_size,
                self.levels()
            ));
        }
        Ok(())
    }

    pub(crate) fn groups_for(&self, channels: usize) -> usize {
        (1..=self.max_groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }
}

struct Builder<'a> {
    spec: &'a UNetSpec,
    rng: ChaCha8Rng,
    nodes: Vec<OperatorNode>,
}

impl Builder<'_> {
    fn push(
        &mut self,
        id: String,
        op: Op,
        params: Vec<(&str, Tensor)>,
        in_sig: Signature,
        out_sig: Signature,
        parent: Option<&str>,
    ) -> usize {
        if let Some(p) = parent {
            let pos = self.nodes.iter().rposition(|n| n.id == p).expect("parent pushed first");
            self.nodes[pos].children.push(id.clone());
        }
        self.nodes.push(OperatorNode {
            id,
            op,
            params: params
                .into_iter()
                .map(|(name, value)| Param {
                    name: name.to_string(),
                    value,
                })
                .collect(),
            in_sig,
            out_sig,
            parent: parent.map(str::to_string),
            children: Vec::new(),
            est_cost: 0.0,
            edit: None,
        });
        self.nodes.len() - 1
    }

    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        Tensor::uniform(shape, 1.0 / (fan_in as f32).sqrt(), &mut self.rng)
    }

    fn conv(&mut self, id: String, cin: usize, cout: usize, k: usize, sig: Signature, parent: Option<&str>) {
        let fan = cin * k * k;
        let w = self.uniform(vec![cout, cin, k, k], fan);
        let b = self.uniform(vec![cout], fan);
        self.push(
            id,
            Op::Conv {
                kernel: k,
                stride: 1,
                pad: k / 2,
            },
            vec![("weight", w), ("bias", b)],
            sig,
            Signature::new(cout, sig.height, sig.width),
            parent,
        );
    }

    fn norm(&mut self, id: String, sig: Signature, groups: usize, parent: Option<&str>) {
        let c = sig.channels;
        self.push(
            id,
            Op::GroupNorm { groups, eps: 1e-5 },
            vec![("gamma", Tensor::ones(vec![c])), ("beta", Tensor::zeros(vec![c]))],
            sig,
            sig,
            parent,
        );
    }

    fn act(&mut self, id: String, sig: Signature, parent: Option<&str>) {
        self.push(id, Op::Activation, vec![], sig, sig, parent);
    }

    fn linear(&mut self, id: String, sig: Signature, out: usize, parent: Option<&str>) {
        let w = self.uniform(vec![out, sig.channels], sig.channels);
        let b = self.uniform(vec![out], sig.channels);
        self.push(
            id,
            Op::Linear,
            vec![("weight", w), ("bias", b)],
            sig,
            Signature::new(out, sig.height, sig.width),
            parent,
        );
    }

    fn resblock(&mut self, id: &str, cin: usize, cout: usize, size: usize) {
        let sig_in = Signature::new(cin, size, size);
        let sig_out = Signature::new(cout, size, size);
        self.push(id.to_string(), Op::ResBlock, vec![], sig_in, sig_out, None);
        let temb = self.spec.time_embed_dim();
        let g_in = self.spec.groups_for(cin);
        let g_out = self.spec.groups_for(cout);
        self.norm(format!("{id}.norm1"), sig_in, g_in, Some(id));
        self.act(format!("{id}.act1"), sig_in, Some(id));
        self.conv(format!("{id}.conv1"), cin, cout, 3, sig_in, Some(id));
        self.linear(format!("{id}.temb_proj"), Signature::vector(temb), cout, Some(id));
        self.norm(format!("{id}.norm2"), sig_out, g_out, Some(id));
        self.act(format!("{id}.act2"), sig_out, Some(id));
        self.conv(format!("{id}.conv2"), cout, cout, 3, sig_out, Some(id));
        if cin != cout {
            self.conv(format!("{id}.skip"), cin, cout, 1, sig_in, Some(id));
        }
    }

    fn attention(&mut self, id: String, c: usize, size: usize, cross: bool, parent: &str) {
        let kv = if cross { self.spec.cond_dim } else { c };
        let q = self.uniform(vec![c, c], c);
        let k = self.uniform(vec![c, kv], kv);
        let v = self.uniform(vec![c, kv], kv);
        let o = self.uniform(vec![c, c], c);
        let ob = self.uniform(vec![c], c);
        let sig = Signature::new(c, size, size);
        self.push(
            id,
            Op::Attention { cross },
            vec![
                ("to_q", q),
                ("to_k", k),
                ("to_v", v),
                ("to_out", o),
                ("to_out_bias", ob),
            ],
            sig,
            sig,
            Some(parent),
        );
    }

    fn transformer(&mut self, id: &str, c: usize, size: usize) {
        let sig = Signature::new(c, size, size);
        self.push(id.to_string(), Op::BasicTransformerBlock, vec![], sig, sig, None);
        self.norm(format!("{id}.norm1"), sig, 1, Some(id));
        self.attention(format!("{id}.attn1"), c, size, false, id);
        self.norm(format!("{id}.norm2"), sig, 1, Some(id));
        self.attention(format!("{id}.attn2"), c, size, true, id);
        self.norm(format!("{id}.norm3"), sig, 1, Some(id));
        let hidden = c * self.spec.ff_mult;
        self.linear(format!("{id}.ff.0"), sig, hidden, Some(id));
        self.act(format!("{id}.ff.act"), Signature::new(hidden, size, size), Some(id));
        self.linear(format!("{id}.ff.2"), Signature::new(hidden, size, size), c, Some(id));
    }

    fn resample(&mut self, id: String, c: usize, size: usize, down: bool) {
        let w = self.uniform(vec![c, c, 3, 3], c * 9);
        let b = self.uniform(vec![c], c * 9);
        let (op, out) = if down {
            (Op::Downsample { factor: 2 }, size / 2)
        } else {
            (Op::Upsample { factor: 2 }, size * 2)
        };
        self.push(
            id,
            op,
            vec![("weight", w), ("bias", b)],
            Signature::new(c, size, size),
            Signature::new(c, out, out),
            None,
        );
    }
}

/// Builds the U-Net with weights drawn deterministically from `seed`.
pub fn build_unet(spec: &UNetSpec, seed: u64) -> Result<OperatorGraph> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
    };
    let levels = spec.levels();
    let temb = spec.time_embed_dim();

    // Time embedding MLP and condition table.
    b.linear("time_embed.lin1".into(), Signature::vector(spec.base_width), temb, None);
    b.act("time_embed.act".into(), Signature::vector(temb), None);
    b.linear("time_embed.lin2".into(), Signature::vector(temb), temb, None);
    let time_program = vec![
        "time_embed.lin1".to_string(),
        "time_embed.act".to_string(),
        "time_embed.lin2".to_string(),
    ];
    let table_width = spec.cond_tokens * spec.cond_dim;
    let table = Tensor::randn(vec![spec.num_conditions, table_width], 1.0, &mut b.rng);
    b.push(
        "cond_embed".into(),
        Op::Embedding {
            tokens: spec.cond_tokens,
            dim: spec.cond_dim,
        },
        vec![("table", table)],
        Signature::vector(1),
        Signature::new(spec.cond_dim, spec.cond_tokens, 1),
        None,
    );

    let mut program = Vec::new();
    let mut skip_links = Vec::new();
    let mut size = spec.latent_size;
    let lat = Signature::new(spec.latent_channels, size, size);
    b.conv("conv_in".into(), spec.latent_channels, spec.width(0), 3, lat, None);
    program.push(Step::Node("conv_in".into()));

    let mut ch = spec.width(0);
    let mut level_out = Vec::new();
    for l in 0..levels {
        let w = spec.width(l);
        for r in 0..spec.res_blocks_per_level {
            let id = format!("down.{l}.res.{r}");
            b.resblock(&id, ch, w, size);
            program.push(Step::Node(id.clone()));
            ch = w;
            let mut last = id;
            if spec.attention_levels.contains(&l) {
                let id = format!("down.{l}.attn.{r}");
                b.transformer(&id, w, size);
                program.push(Step::Node(id.clone()));
                last = id;
            }
            if r + 1 == spec.res_blocks_per_level {
                level_out.push(last);
            }
        }
        program.push(Step::Tap(format!("enc.{l}")));
        program.push(Step::SaveSkip(l));
        if l + 1 < levels {
            let id = format!("down.{l}.downsample");
            b.resample(id.clone(), w, size, true);
            program.push(Step::Node(id));
            size /= 2;
        }
    }

    b.resblock("mid.res.0", ch, ch, size);
    program.push(Step::Node("mid.res.0".into()));
    if spec.attention_levels.contains(&(levels - 1)) {
        b.transformer("mid.attn.0", ch, size);
        program.push(Step::Node("mid.attn.0".into()));
    }
    b.resblock("mid.res.1", ch, ch, size);
    program.push(Step::Node("mid.res.1".into()));
    program.push(Step::Tap("mid".into()));

    for l in (0..levels).rev() {
        let w = spec.width(l);
        program.push(Step::ConcatSkip(l));
        for r in 0..spec.res_blocks_per_level {
            let id = format!("up.{l}.res.{r}");
            let cin = if r == 0 { ch + w } else { ch };
            b.resblock(&id, cin, w, size);
            program.push(Step::Node(id.clone()));
            if r == 0 {
                skip_links.push(SkipLink {
                    level: l,
                    from: level_out[l].clone(),
                    to: id,
                });
            }
            ch = w;
            if spec.attention_levels.contains(&l) {
                let id = format!("up.{l}.attn.{r}");
                b.transformer(&id, w, size);
                program.push(Step::Node(id));
            }
        }
        program.push(Step::Tap(format!("dec.{l}")));
        if l > 0 {
            let id = format!("up.{l}.upsample");
            b.resample(id.clone(), w, size, false);
            program.push(Step::Node(id));
            size *= 2;
        }
    }

    let sig = Signature::new(ch, size, size);
    b.norm("norm_out".into(), sig, spec.groups_for(ch), None);
    program.push(Step::Node("norm_out".into()));
    b.act("act_out".into(), sig, None);
    program.push(Step::Node("act_out".into()));
    b.conv("conv_out".into(), ch, spec.latent_channels, 3, sig, None);
    program.push(Step::Node("conv_out".into()));

    let graph = OperatorGraph::from_parts(spec.clone(), b.nodes, program, time_program, skip_links)?;
    graph.infer_shapes()?;
    Ok(graph)
}
