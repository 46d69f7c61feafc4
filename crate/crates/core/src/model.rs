//! Encoder, backbone and forecasting heads bound to one parameter store.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::{backbone_forward, AttentionFlops, BackboneParams, RouterVars, RoutingRecord};
use crate::config::ModelConfig;
use crate::encoder::{encode, EncoderInput, EncoderParams};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::objective::HorizonHeads;

#[derive(Clone, Debug)]
pub struct TraceModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub heads: HorizonHeads,
}

/// Graph handles and routing of one forward pass.
pub struct Forward {
    /// `[C, n, d]` encoder output.
    pub encoded: Var,
    /// `[C, n, d]` final hidden state.
    pub hidden: Var,
    /// One `[C*n, rho*t]` prediction per horizon.
    pub preds: Vec<Var>,
    pub routing: RoutingRecord,
    pub router_vars: Vec<RouterVars>,
    pub flops: AttentionFlops,
}

/// Builds the model and a freshly initialised store; deterministic in `seed`.
pub fn init_params(config: &ModelConfig, horizons: &[usize], seed: u64) -> Result<(ParamStore, TraceModel)> {
    config.validate()?;
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::Config("horizons must be a non-empty list of positive integers".into()));
    }
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let encoder = EncoderParams::init(config, &mut init);
    let backbone = BackboneParams::init(config, &mut init);
    let heads = HorizonHeads::init(horizons, config.d, config.patch_len, &mut init);
    Ok((
        store,
        TraceModel {
            config: config.clone(),
            encoder,
            backbone,
            heads,
        },
    ))
}

impl TraceModel {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &EncoderInput) -> Result<Forward> {
        let encoded = encode(g, store, &self.encoder, &self.config, input)?;
        let out = backbone_forward(g, store, &self.backbone, &self.config, encoded)?;
        let preds = self.heads.forward(g, store, out.hidden)?;
        Ok(Forward {
            encoded,
            hidden: out.hidden,
            preds,
            routing: out.routing,
            router_vars: out.router_vars,
            flops: out.flops,
        })
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.heads.horizons()
    }
}
