//! Weight containers, deterministic initialization, registration on a tape,
//! and parameter counting.

use crate::degc::{self, DegcParams, DegcVars};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::numeric::{BnStats, Tape, Tensor, VarId};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// One stem convolution with its batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub stats: BnStats<F>,
    pub stride: usize,
}

pub struct ConvBnVars {
    pub w: VarId,
    pub b: VarId,
    pub gamma: VarId,
    pub beta: VarId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams<F: Scalar> {
    pub convs: Vec<ConvBn<F>>,
    pub final_w: Tensor<F>,
    pub final_b: Tensor<F>,
}

pub struct StemVars {
    pub convs: Vec<ConvBnVars>,
    pub final_w: VarId,
    pub final_b: VarId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrapherParams<F: Scalar> {
    pub cpe: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub degc: DegcParams<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

pub struct GrapherVars {
    pub cpe: VarId,
    pub w1: VarId,
    pub b1: VarId,
    pub degc: DegcVars,
    pub w2: VarId,
    pub b2: VarId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<F: Scalar> {
    pub w1p: Tensor<F>,
    pub b1p: Tensor<F>,
    pub w2p: Tensor<F>,
    pub b2p: Tensor<F>,
}

pub struct FfnVars {
    pub w1p: VarId,
    pub b1p: VarId,
    pub w2p: VarId,
    pub b2p: VarId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F: Scalar> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

pub struct HeadVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F: Scalar> {
    pub grapher: GrapherParams<F>,
    pub ffn: FfnParams<F>,
}

pub struct BlockVars {
    pub grapher: GrapherVars,
    pub ffn: FfnVars,
}

/// All weights of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub stem: StemParams<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub head: HeadParams<F>,
}

pub struct ModelVars {
    pub stem: StemVars,
    pub blocks: Vec<BlockVars>,
    pub head: HeadVars,
}

fn conv_init<F: Scalar>(cin: usize, cout: usize, rng: &mut SplitMix64) -> Tensor<F> {
    // receptive-field fans: 9*cin in, 9*cout out
    degc::glorot_flat(9 * cin, 9 * cout, vec![3, 3, cin, cout], rng)
}

impl<F: Scalar> ConvBn<F> {
    fn init(cin: usize, cout: usize, stride: usize, rng: &mut SplitMix64) -> Self {
        ConvBn {
            w: conv_init(cin, cout, rng),
            b: Tensor::zeros(vec![cout]),
            gamma: Tensor::full(vec![cout], F::one()),
            beta: Tensor::zeros(vec![cout]),
            stats: BnStats::identity(cout),
            stride,
        }
    }
}

/// Deterministic initialization: affine and conv weights uniform within
/// +-sqrt(6/(fan_in+fan_out)) from the seeded generator, biases 0, BN
/// gamma=1 beta=0, running stats (0, 1), epsilon=delta=0.
pub fn init_weights<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let c = config.c_iso;

    let mut convs = Vec::new();
    let mut cin = 3;
    for &cout in &config.stem.channels {
        convs.push(ConvBn::init(cin, cout, 2, &mut rng));
        cin = cout;
    }
    for _ in 0..config.stem.k_s {
        convs.push(ConvBn::init(c, c, 1, &mut rng));
    }
    let stem = StemParams {
        convs,
        final_w: conv_init(c, c, &mut rng),
        final_b: Tensor::zeros(vec![c]),
    };

    let blocks = (0..config.n_b)
        .map(|_| BlockParams {
            grapher: GrapherParams {
                cpe: degc::glorot_flat(9, 9, vec![3, 3, c], &mut rng),
                w1: degc::glorot(c, c, &mut rng),
                b1: Tensor::zeros(vec![c]),
                degc: DegcParams::init(config.variant, c, c, 2 * c, &mut rng),
                w2: degc::glorot(2 * c, c, &mut rng),
                b2: Tensor::zeros(vec![c]),
            },
            ffn: FfnParams {
                w1p: degc::glorot(c, 4 * c, &mut rng),
                b1p: Tensor::zeros(vec![4 * c]),
                w2p: degc::glorot(4 * c, c, &mut rng),
                b2p: Tensor::zeros(vec![c]),
            },
        })
        .collect();

    let head = HeadParams {
        w1: degc::glorot(c, config.head_hidden, &mut rng),
        b1: Tensor::zeros(vec![config.head_hidden]),
        w2: degc::glorot(config.head_hidden, config.num_classes, &mut rng),
        b2: Tensor::zeros(vec![config.num_classes]),
    };

    Ok(ModelParams {
        config: config.clone(),
        stem,
        blocks,
        head,
    })
}

impl<F: Scalar> ModelParams<F> {
    pub fn register(&self, tape: &mut Tape<F>) -> Result<ModelVars> {
        let mut stem_convs = Vec::new();
        for (i, cb) in self.stem.convs.iter().enumerate() {
            stem_convs.push(ConvBnVars {
                w: tape.param(&format!("stem.conv{i}.w"), &cb.w)?,
                b: tape.param(&format!("stem.conv{i}.b"), &cb.b)?,
                gamma: tape.param(&format!("stem.conv{i}.gamma"), &cb.gamma)?,
                beta: tape.param(&format!("stem.conv{i}.beta"), &cb.beta)?,
            });
        }
        let stem = StemVars {
            convs: stem_convs,
            final_w: tape.param("stem.final.w", &self.stem.final_w)?,
            final_b: tape.param("stem.final.b", &self.stem.final_b)?,
        };
        let mut blocks = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let g = &blk.grapher;
            let grapher = GrapherVars {
                cpe: tape.param(&format!("block{l}.grapher.cpe"), &g.cpe)?,
                w1: tape.param(&format!("block{l}.grapher.w1"), &g.w1)?,
                b1: tape.param(&format!("block{l}.grapher.b1"), &g.b1)?,
                degc: g.degc.register(tape, &format!("block{l}.grapher.degc"))?,
                w2: tape.param(&format!("block{l}.grapher.w2"), &g.w2)?,
                b2: tape.param(&format!("block{l}.grapher.b2"), &g.b2)?,
            };
            let f = &blk.ffn;
            let ffn = FfnVars {
                w1p: tape.param(&format!("block{l}.ffn.w1p"), &f.w1p)?,
                b1p: tape.param(&format!("block{l}.ffn.b1p"), &f.b1p)?,
                w2p: tape.param(&format!("block{l}.ffn.w2p"), &f.w2p)?,
                b2p: tape.param(&format!("block{l}.ffn.b2p"), &f.b2p)?,
            };
            blocks.push(BlockVars { grapher, ffn });
        }
        let head = HeadVars {
            w1: tape.param("head.w1", &self.head.w1)?,
            b1: tape.param("head.b1", &self.head.b1)?,
            w2: tape.param("head.w2", &self.head.w2)?,
            b2: tape.param("head.b2", &self.head.b2)?,
        };
        Ok(ModelVars { stem, blocks, head })
    }

    /// Visit every trainable tensor in registration order.
    pub fn for_each(&self, f: &mut impl FnMut(String, &Tensor<F>)) {
        for (i, cb) in self.stem.convs.iter().enumerate() {
            f(format!("stem.conv{i}.w"), &cb.w);
            f(format!("stem.conv{i}.b"), &cb.b);
            f(format!("stem.conv{i}.gamma"), &cb.gamma);
            f(format!("stem.conv{i}.beta"), &cb.beta);
        }
        f("stem.final.w".into(), &self.stem.final_w);
        f("stem.final.b".into(), &self.stem.final_b);
        for (l, blk) in self.blocks.iter().enumerate() {
            let g = &blk.grapher;
            f(format!("block{l}.grapher.cpe"), &g.cpe);
            f(format!("block{l}.grapher.w1"), &g.w1);
            f(format!("block{l}.grapher.b1"), &g.b1);
            g.degc.for_each(&format!("block{l}.grapher.degc"), f);
            f(format!("block{l}.grapher.w2"), &g.w2);
            f(format!("block{l}.grapher.b2"), &g.b2);
            let fp = &blk.ffn;
            f(format!("block{l}.ffn.w1p"), &fp.w1p);
            f(format!("block{l}.ffn.b1p"), &fp.b1p);
            f(format!("block{l}.ffn.w2p"), &fp.w2p);
            f(format!("block{l}.ffn.b2p"), &fp.b2p);
        }
        f("head.w1".into(), &self.head.w1);
        f("head.b1".into(), &self.head.b1);
        f("head.w2".into(), &self.head.w2);
        f("head.b2".into(), &self.head.b2);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        for (i, cb) in self.stem.convs.iter_mut().enumerate() {
            f(format!("stem.conv{i}.w"), &mut cb.w);
            f(format!("stem.conv{i}.b"), &mut cb.b);
            f(format!("stem.conv{i}.gamma"), &mut cb.gamma);
            f(format!("stem.conv{i}.beta"), &mut cb.beta);
        }
        f("stem.final.w".into(), &mut self.stem.final_w);
        f("stem.final.b".into(), &mut self.stem.final_b);
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            let g = &mut blk.grapher;
            f(format!("block{l}.grapher.cpe"), &mut g.cpe);
            f(format!("block{l}.grapher.w1"), &mut g.w1);
            f(format!("block{l}.grapher.b1"), &mut g.b1);
            g.degc.for_each_mut(&format!("block{l}.grapher.degc"), f);
            f(format!("block{l}.grapher.w2"), &mut g.w2);
            f(format!("block{l}.grapher.b2"), &mut g.b2);
            let fp = &mut blk.ffn;
            f(format!("block{l}.ffn.w1p"), &mut fp.w1p);
            f(format!("block{l}.ffn.b1p"), &mut fp.b1p);
            f(format!("block{l}.ffn.w2p"), &mut fp.w2p);
            f(format!("block{l}.ffn.b2p"), &mut fp.b2p);
        }
        f("head.w1".into(), &mut self.head.w1);
        f("head.b1".into(), &mut self.head.b1);
        f("head.w2".into(), &mut self.head.w2);
        f("head.b2".into(), &mut self.head.b2);
    }

    /// Running batch-norm statistics as named tensors (checkpoint state,
    /// not trainable parameters).
    pub fn for_each_state(&self, f: &mut impl FnMut(String, Tensor<F>)) {
        for (i, cb) in self.stem.convs.iter().enumerate() {
            let c = cb.stats.mean.len();
            f(
                format!("stem.conv{i}.running_mean"),
                Tensor::new(vec![c], cb.stats.mean.clone()).expect("stats shape"),
            );
            f(
                format!("stem.conv{i}.running_var"),
                Tensor::new(vec![c], cb.stats.var.clone()).expect("stats shape"),
            );
        }
    }

    /// Trainable scalar count; depends only on the config.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    /// Trainable scalars in the stem alone (for comparing presets that
    /// differ only by stem).
    pub fn stem_param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |name, t| {
            if name.starts_with("stem.") {
                n += t.len();
            }
        });
        n
    }

    /// Working copy of the stem batch-norm state for a forward pass.
    pub fn stem_stats(&self) -> Vec<BnStats<F>> {
        self.stem.convs.iter().map(|cb| cb.stats.clone()).collect()
    }

    pub fn set_stem_stats(&mut self, stats: Vec<BnStats<F>>) {
        assert_eq!(stats.len(), self.stem.convs.len());
        for (cb, s) in self.stem.convs.iter_mut().zip(stats) {
            cb.stats = s;
        }
    }
}
