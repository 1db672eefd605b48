use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use crate::agfd::AttentionStack;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{diff, BBox};
use crate::matrix::Matrix;
use crate::nn::{
    decoder_layer, encoder_layer, init_decoder_layer, init_encoder_layer, init_layer_norm, init_linear,
    layer_norm, linear, normal_tensor, sine_position_encoding, Bound, ParamStore,
};
use crate::selection::PredictionSet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Width of the hidden layer of the patch-embedding backbone.
    pub backbone_hidden: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub n_queries: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            backbone_hidden: 64,
            n_enc: 1,
            n_dec: 2,
            n_queries: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.ffn_dim == 0 || self.backbone_hidden == 0 {
            return fail("ffn_dim and backbone_hidden must be positive".into());
        }
        if self.n_dec == 0 {
            return fail("at least one decoder layer is required".into());
        }
        if self.n_queries == 0 {
            return fail("n_queries must be positive".into());
        }
        Ok(())
    }
}

/// Patch-embedding backbone, transformer encoder and decoder with learned
/// queries, a `K+1`-way class head and a sigmoid box head.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDetector {
    pub config: ModelConfig,
    pub scene: SceneSpec,
    pub params: ParamStore,
}

/// Outputs of one forward pass, recorded on the caller's tape.
pub struct Forward {
    /// `[N_q x K+1]`, rows summing to one; the last column is no-object.
    pub probs: Var,
    /// `[N_q x 4]` corner-form boxes.
    pub boxes: Var,
    /// Head-averaged cross-attention of the first decoder layer, `[N_q x P]`.
    pub cross_attention: Tensor,
    /// Encoder output, `[d x P]` channel-major.
    pub features: Var,
}

impl Forward {
    /// Plain-value view of the predictions, boxes clipped into the unit square.
    pub fn predictions(&self, t: &Tape) -> Result<PredictionSet> {
        let p = t.value(self.probs);
        let (n, k) = p.dims2()?;
        let boxes = (0..n)
            .map(|i| {
                let r = t.value(self.boxes).row(i);
                BBox {
                    x1: r[0],
                    y1: r[1],
                    x2: r[2],
                    y2: r[3],
                }
                .clipped_unit()
            })
            .collect();
        PredictionSet::new(Matrix::from_vec(n, k, p.data().to_vec()), boxes)
    }

    pub fn attention(&self) -> Result<AttentionStack> {
        AttentionStack::from_tensor(&self.cross_attention)
    }
}

impl ToyDetector {
    pub fn new(config: ModelConfig, scene: SceneSpec, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new();
        init_linear(&mut p, rng, "backbone.fc1", scene.patch_dim(), config.backbone_hidden);
        init_linear(&mut p, rng, "backbone.fc2", config.backbone_hidden, d);
        for l in 0..config.n_enc {
            init_encoder_layer(&mut p, rng, &format!("enc{l}"), d, config.ffn_dim, false);
        }
        init_layer_norm(&mut p, "enc_norm", d);
        p.insert("query", normal_tensor(rng, &[config.n_queries, d], 1.0));
        for l in 0..config.n_dec {
            init_decoder_layer(&mut p, rng, &format!("dec{l}"), d, config.ffn_dim);
        }
        init_layer_norm(&mut p, "dec_norm", d);
        init_linear(&mut p, rng, "class_head", d, scene.classes + 1);
        init_linear(&mut p, rng, "box_head.fc1", d, d);
        init_linear(&mut p, rng, "box_head.fc2", d, 4);
        Ok(ToyDetector {
            config,
            scene,
            params: p,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.scene.classes
    }

    /// Runs the detector on `[P x patch_dim]` patches.
    pub fn forward(&self, t: &mut Tape, p: &Bound, patches: &Tensor) -> Result<Forward> {
        let c = &self.config;
        let expect = [self.scene.num_positions(), self.scene.patch_dim()];
        if patches.shape() != expect {
            return Err(Error::Invalid(format!(
                "patch tensor {:?} does not match the scene layout {:?}",
                patches.shape(),
                expect
            )));
        }
        let (rows, cols) = self.scene.grid();
        let x = t.constant(patches.clone());
        let h = linear(t, p, "backbone.fc1", x)?;
        let h = t.relu(h)?;
        let mut x = linear(t, p, "backbone.fc2", h)?;

        let pos = t.constant(sine_position_encoding(rows, cols, c.d_model));
        for l in 0..c.n_enc {
            x = encoder_layer(t, p, &format!("enc{l}"), x, pos, c.heads)?;
        }
        let features = t.transpose(x)?;
        let memory = if c.n_enc > 0 {
            layer_norm(t, p, "enc_norm", x)?
        } else {
            x
        };

        let query = p.var("query")?;
        let mut tgt = t.constant(Tensor::zeros(&[c.n_queries, c.d_model]));
        let mut first_cross = None;
        for l in 0..c.n_dec {
            let (out, cross) = decoder_layer(t, p, &format!("dec{l}"), tgt, query, memory, pos, c.heads)?;
            tgt = out;
            first_cross.get_or_insert(cross);
        }
        let hs = layer_norm(t, p, "dec_norm", tgt)?;

        let logits = linear(t, p, "class_head", hs)?;
        let probs = t.softmax(logits, 1)?;
        let b = linear(t, p, "box_head.fc1", hs)?;
        let b = t.relu(b)?;
        let b = linear(t, p, "box_head.fc2", b)?;
        let center = t.sigmoid(b)?;
        let boxes = diff::center_to_corners(t, center)?;
        Ok(Forward {
            probs,
            boxes,
            cross_attention: first_cross.expect("at least one decoder layer"),
            features,
        })
    }

    /// Forward pass on a private tape with frozen parameters.
    pub fn predict(&self, patches: &Tensor) -> Result<(PredictionSet, AttentionStack, Tensor)> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let f = self.forward(&mut t, &p, patches)?;
        Ok((f.predictions(&t)?, f.attention()?, t.value(f.features).clone()))
    }
}
