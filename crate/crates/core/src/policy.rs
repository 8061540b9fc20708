//! The full hierarchical policy: perception → skill selection and high-level
//! transformer → low-level transformer → mixture head.

use crate::action::{GmmHead, GmmVars};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::env::ACTION_DIM;
use crate::error::{Error, Result};
use crate::nn::{Builder, Roles};
use crate::param::ParamStore;
use crate::perception::{EncoderBank, WindowBatch, MODALITIES};
use crate::seed;
use crate::skill::{SkillCodebook, SkillSelection};
use crate::tensor::Tensor;
use crate::transformer::{Conditioning, TemporalTransformer};

/// Adapter key used when every task shares one `(Q, λ)`.
pub const SHARED_KEY: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct Policy {
    pub cfg: ModelConfig,
    pub per_task_adapters: bool,
    pub store: ParamStore,
    pub roles: Roles,
    pub encoder: EncoderBank,
    pub codebook: SkillCodebook,
    pub high: Option<TemporalTransformer>,
    pub low: TemporalTransformer,
    pub head: GmmHead,
    seed: u64,
}

pub struct Forward {
    pub gmm: GmmVars,
    pub selections: Vec<SkillSelection>,
}

impl Policy {
    pub fn new(cfg: &ModelConfig, per_task_adapters: bool, seed: u64) -> Result<Self> {
        cfg.validate(0)?;
        let mut store = ParamStore::new();
        let mut roles = Roles::default();
        let mut rng = seed::rng(seed, &[0xb0d7]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let (d, h) = (cfg.d, cfg.heads);
        let encoder = EncoderBank::new(&mut b, d, cfg.window)?;
        let high = if cfg.ablate.hierarchy {
            None
        } else {
            Some(TemporalTransformer::new(&mut b, "high", d, h, cfg.blocks, cfg.mlp_hidden, cfg.cp_rank)?)
        };
        let low = TemporalTransformer::new(&mut b, "low", d, h, cfg.blocks, cfg.mlp_hidden, cfg.cp_rank)?;
        let head = GmmHead::new(&mut b, "head", d, cfg.gmm_components, ACTION_DIM)?;
        Ok(Policy {
            cfg: cfg.clone(),
            per_task_adapters,
            store,
            roles,
            encoder,
            codebook: SkillCodebook::new(d, cfg.skills_per_task),
            high,
            low,
            head,
            seed,
        })
    }

    pub fn adapter_key(&self, task_id: usize) -> usize {
        if self.per_task_adapters {
            task_id
        } else {
            SHARED_KEY
        }
    }

    /// Freeze every existing language row, then add one for `id`.
    pub fn add_language(&mut self, id: usize, freeze_previous: bool) -> Result<()> {
        if freeze_previous {
            for &row in self.encoder.language.values() {
                self.store.set_frozen(row, true);
            }
        }
        let mut rng = seed::rng(self.seed, &[0x1a6, id as u64]);
        let mut b = Builder {
            store: &mut self.store,
            roles: &mut self.roles,
            rng: &mut rng,
        };
        self.encoder.add_language(&mut b, id)
    }

    /// Per-task hooks: grow the codebook and register adapter factors.
    pub fn begin_task(&mut self, task_id: usize) -> Result<()> {
        let mut rng = seed::rng(self.seed, &[0x7a5c, task_id as u64]);
        let key = self.adapter_key(task_id);
        let ablate = self.cfg.ablate;
        let mut store = std::mem::take(&mut self.store);
        let mut roles = std::mem::take(&mut self.roles);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let mut res = Ok(());
        if !ablate.codebook {
            res = self.codebook.expand_for_task(&mut b, task_id);
        }
        if res.is_ok() && !ablate.adapters {
            'outer: for t in self.high.iter_mut().chain(std::iter::once(&mut self.low)) {
                for blk in &mut t.blocks {
                    if blk.adapter.factors.contains_key(&key) {
                        continue;
                    }
                    if let Err(e) = blk.adapter.add_task(&mut b, key) {
                        res = Err(e);
                        break 'outer;
                    }
                }
            }
        }
        self.store = store;
        self.roles = roles;
        res
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &WindowBatch, task_id: usize) -> Result<Forward> {
        let s_e = self.encoder.encode_window(g, store, batch)?;
        let (prefix, selections) = if self.cfg.ablate.codebook {
            (None, Vec::new())
        } else {
            let sel = self.codebook.select(g, store, s_e, self.cfg.top_c)?;
            let pair = self.codebook.synthesize(g, store, &sel)?;
            (Some(pair), sel.selections)
        };
        let cond = Conditioning {
            prefix,
            adapter_key: (!self.cfg.ablate.adapters).then(|| self.adapter_key(task_id)),
        };
        let z = match &self.high {
            Some(t) => t.forward(g, store, s_e, cond)?,
            None => s_e,
        };
        let y = self.low.forward(g, store, z, cond)?;
        let feat = self.center_feature(g, y)?;
        let gmm = self.head.forward(g, store, feat)?;
        Ok(Forward { gmm, selections })
    }

    /// Mean of the current step's five tokens.
    fn center_feature(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let c = self.cfg.center_slot() * MODALITIES;
        let tok = g.slice(y, 1, c, c + MODALITIES)?;
        g.mean_axis(tok, 1)
    }

    /// Mean mixture NLL of normalized `actions [B, 3]`.
    pub fn bc_loss(&self, g: &mut Graph, store: &ParamStore, batch: &WindowBatch, actions: &Tensor, task_id: usize) -> Result<Var> {
        if actions.shape()[0] != batch.len() {
            return Err(Error::shape("bc_loss", actions.shape(), &[batch.len()]));
        }
        let f = self.forward(g, store, batch, task_id)?;
        let nll = f.gmm.nll(g, actions)?;
        Ok(g.mean_all(nll))
    }

    pub fn num_tasks_registered(&self) -> usize {
        self.encoder.language.len()
    }

    /// All adapters, high level first.
    pub fn adapters(&self) -> impl Iterator<Item = &crate::adapter::CPAdapter> {
        self.high
            .iter()
            .chain(std::iter::once(&self.low))
            .flat_map(|t| t.blocks.iter().map(|b| &b.adapter))
    }
}
