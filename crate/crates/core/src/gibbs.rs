//! Block Gibbs sampling on the bipartite CRF and the persistent chain store
//! used for the PCD negative phase.

use std::collections::BTreeMap;

use bitvec::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{BiasPair, Dims, EnergyParams};
use crate::error::{check_len, Error, Result};
use crate::labels::{LabelMode, LabelVector};
use crate::math::{sigmoid, softmax_into};
use crate::rng::{stream, Domain};
use crate::stats::SuffStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    pub sweeps_per_update: usize,
    pub chains_per_instance: usize,
    pub rng_seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            sweeps_per_update: 100,
            chains_per_instance: 50,
            rng_seed: 0,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps_per_update == 0 || self.chains_per_instance == 0 {
            return Err(Error::InvalidArgument(
                "gibbs sweeps and chains per instance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One joint configuration `(y, ŷ, h)` of a chain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChainState {
    pub y: Vec<u8>,
    pub yhat: Vec<u8>,
    pub h: Vec<u8>,
}

impl ChainState {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            y: vec![0; dims.noisy],
            yhat: vec![0; dims.clean],
            h: vec![0; dims.hidden],
        }
    }

    pub fn from_labels(y: &LabelVector, yhat: &LabelVector, h: &LabelVector) -> Self {
        Self {
            y: y.bits().to_vec(),
            yhat: yhat.bits().to_vec(),
            h: h.bits().to_vec(),
        }
    }

    fn check(&self, dims: Dims) -> Result<()> {
        check_len("chain y", dims.noisy, self.y.len())?;
        check_len("chain ŷ", dims.clean, self.yhat.len())?;
        check_len("chain h", dims.hidden, self.h.len())
    }
}

/// Scratch space for repeated conditional evaluations.
pub(crate) struct Sampler<'a> {
    params: &'a EnergyParams,
    bias: &'a BiasPair,
    clean: Vec<f64>,
    hidden: Vec<f64>,
    noisy: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub(crate) fn new(params: &'a EnergyParams, bias: &'a BiasPair) -> Self {
        let d = params.dims;
        Self {
            params,
            bias,
            clean: vec![0.0; d.clean],
            hidden: vec![0.0; d.hidden],
            noisy: vec![0.0; d.noisy],
        }
    }

    /// Probabilities of `(ŷ, h)` given `y`, left in `self.clean`/`self.hidden`.
    pub(crate) fn clean_hidden_probs(&mut self, y: &[u8]) {
        self.params.clean_logits_into(&self.bias.a, y, &mut self.clean);
        self.params.hidden_logits_into(y, &mut self.hidden);
        to_probs(&mut self.clean, self.params.mode);
        to_probs(&mut self.hidden, LabelMode::Multilabel);
    }

    /// Probabilities of `y` given `(ŷ, h)`, left in `self.noisy`.
    pub(crate) fn noisy_probs(&mut self, yhat: &[u8], h: &[u8]) {
        self.params
            .noisy_logits_into(&self.bias.b, yhat, h, &mut self.noisy);
        to_probs(&mut self.noisy, self.params.mode);
    }

    pub(crate) fn sample_clean_hidden<R: Rng>(&mut self, state: &mut ChainState, rng: &mut R) {
        self.clean_hidden_probs(&state.y);
        draw(&self.clean, self.params.mode, &mut state.yhat, rng);
        draw(&self.hidden, LabelMode::Multilabel, &mut state.h, rng);
    }

    pub(crate) fn sample_noisy<R: Rng>(&mut self, state: &mut ChainState, rng: &mut R) {
        self.noisy_probs(&state.yhat, &state.h);
        draw(&self.noisy, self.params.mode, &mut state.y, rng);
    }

    pub(crate) fn sweep<R: Rng>(&mut self, state: &mut ChainState, rng: &mut R) {
        self.sample_clean_hidden(state, rng);
        self.sample_noisy(state, rng);
    }

    pub(crate) fn clean_probs(&self) -> &[f64] {
        &self.clean
    }

    pub(crate) fn hidden_probs(&self) -> &[f64] {
        &self.hidden
    }

    pub(crate) fn noisy_probs_slice(&self) -> &[f64] {
        &self.noisy
    }
}

fn to_probs(logits: &mut [f64], mode: LabelMode) {
    match mode {
        LabelMode::Multilabel => logits.iter_mut().for_each(|l| *l = sigmoid(*l)),
        LabelMode::Multiclass => {
            if !logits.is_empty() {
                let src = logits.to_vec();
                softmax_into(&src, logits);
            }
        }
    }
}

fn draw<R: Rng>(probs: &[f64], mode: LabelMode, out: &mut [u8], rng: &mut R) {
    match mode {
        LabelMode::Multilabel => {
            for (o, &p) in out.iter_mut().zip(probs) {
                *o = u8::from(rng.random::<f64>() < p);
            }
        }
        LabelMode::Multiclass => {
            out.iter_mut().for_each(|o| *o = 0);
            if out.is_empty() {
                return;
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = out.len() - 1;
            for (k, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            out[pick] = 1;
        }
    }
}

/// One block-Gibbs sweep: `(ŷ, h) ~ p(ŷ, h | y, x)` then `y ~ p(y | ŷ, h, x)`.
pub fn gibbs_sweep<R: Rng>(
    params: &EnergyParams,
    bias: &BiasPair,
    state: &ChainState,
    rng: &mut R,
) -> Result<ChainState> {
    bias.validate(params.dims)?;
    state.check(params.dims)?;
    let mut next = state.clone();
    Sampler::new(params, bias).sweep(&mut next, rng);
    Ok(next)
}

/// Runs `sweeps` sweeps from `init`, calling `visit` with the state after
/// each one. Returns the final state.
pub fn run_chain<R: Rng>(
    params: &EnergyParams,
    bias: &BiasPair,
    init: &ChainState,
    sweeps: usize,
    rng: &mut R,
    mut visit: impl FnMut(&ChainState),
) -> Result<ChainState> {
    bias.validate(params.dims)?;
    init.check(params.dims)?;
    let mut state = init.clone();
    let mut sampler = Sampler::new(params, bias);
    for _ in 0..sweeps {
        sampler.sweep(&mut state, rng);
        visit(&state);
    }
    Ok(state)
}

/// Which block of a chain is persisted between updates. The other block is
/// regenerated exactly by the first half-sweep of the next update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredSide {
    CleanHidden,
    Noisy,
}

impl StoredSide {
    /// The narrower side: `(ŷ, h)` when `C + H < N`, else `y`.
    pub fn for_dims(dims: Dims) -> Self {
        if dims.clean + dims.hidden < dims.noisy {
            StoredSide::CleanHidden
        } else {
            StoredSide::Noisy
        }
    }

    pub fn width(self, dims: Dims) -> usize {
        match self {
            StoredSide::CleanHidden => dims.clean + dims.hidden,
            StoredSide::Noisy => dims.noisy,
        }
    }
}

/// What to do when the negative phase meets an instance without chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Seed chains with the observed `y` plus `(ŷ, h) ~ p(ŷ, h | y, x)`.
    FromObserved,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InstanceChains {
    bits: BitVec<u64, Lsb0>,
    updates: u64,
}

/// Persistent chains keyed by training-instance id, bit-packed so that the
/// payload is exactly `instances × chains × width` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainStore {
    dims: Dims,
    mode: LabelMode,
    side: StoredSide,
    chains_per_instance: usize,
    policy: InitPolicy,
    chains: BTreeMap<u64, InstanceChains>,
}

/// One instance's request to the negative phase.
#[derive(Debug, Clone, Copy)]
pub struct NegativeItem<'a> {
    pub id: u64,
    pub bias: &'a BiasPair,
    pub observed_y: &'a LabelVector,
}

impl ChainStore {
    pub fn new(dims: Dims, mode: LabelMode, side: StoredSide, chains_per_instance: usize) -> Self {
        Self {
            dims,
            mode,
            side,
            chains_per_instance,
            policy: InitPolicy::FromObserved,
            chains: BTreeMap::new(),
        }
    }

    pub fn with_policy(mut self, policy: InitPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn side(&self) -> StoredSide {
        self.side
    }

    pub fn chains_per_instance(&self) -> usize {
        self.chains_per_instance
    }

    pub fn num_instances(&self) -> usize {
        self.chains.len()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.chains.contains_key(&id)
    }

    /// Number of update rounds the chains of `id` have been through.
    pub fn updates(&self, id: u64) -> Option<u64> {
        self.chains.get(&id).map(|c| c.updates)
    }

    /// Exact payload size in bits.
    pub fn state_bits(&self) -> usize {
        self.chains.values().map(|c| c.bits.len()).sum()
    }

    /// Closed form for [`Self::state_bits`].
    pub fn expected_bits(&self) -> usize {
        self.num_instances() * self.chains_per_instance * self.side.width(self.dims)
    }

    fn width(&self) -> usize {
        self.side.width(self.dims)
    }

    /// Decoded chain states of `id`. The side that is not stored is zero.
    pub fn chain_states(&self, id: u64) -> Option<Vec<ChainState>> {
        let inst = self.chains.get(&id)?;
        Some(
            (0..self.chains_per_instance)
                .map(|c| self.decode(&inst.bits, c))
                .collect(),
        )
    }

    fn decode(&self, bits: &BitSlice<u64, Lsb0>, chain: usize) -> ChainState {
        let w = self.width();
        let slot = &bits[chain * w..(chain + 1) * w];
        let mut state = ChainState::zeros(self.dims);
        match self.side {
            StoredSide::Noisy => {
                for (o, b) in state.y.iter_mut().zip(slot.iter()) {
                    *o = u8::from(*b);
                }
            }
            StoredSide::CleanHidden => {
                let (c, h) = slot.split_at(self.dims.clean);
                for (o, b) in state.yhat.iter_mut().zip(c.iter()) {
                    *o = u8::from(*b);
                }
                for (o, b) in state.h.iter_mut().zip(h.iter()) {
                    *o = u8::from(*b);
                }
            }
        }
        state
    }

    fn encode(&self, bits: &mut BitSlice<u64, Lsb0>, chain: usize, state: &ChainState) {
        let w = self.width();
        let slot = &mut bits[chain * w..(chain + 1) * w];
        let src: Box<dyn Iterator<Item = &u8>> = match self.side {
            StoredSide::Noisy => Box::new(state.y.iter()),
            StoredSide::CleanHidden => Box::new(state.yhat.iter().chain(&state.h)),
        };
        for (i, &v) in src.enumerate() {
            slot.set(i, v == 1);
        }
    }

    fn cold_start(
        &self,
        params: &EnergyParams,
        item: &NegativeItem<'_>,
        seed: u64,
    ) -> InstanceChains {
        let mut bits = bitvec![u64, Lsb0; 0; self.chains_per_instance * self.width()];
        let mut sampler = Sampler::new(params, item.bias);
        for chain in 0..self.chains_per_instance {
            let mut rng = stream(seed, Domain::ChainInit, &[item.id, chain as u64]);
            let mut state = ChainState::zeros(self.dims);
            state.y.copy_from_slice(item.observed_y.bits());
            sampler.sample_clean_hidden(&mut state, &mut rng);
            self.encode(&mut bits, chain, &state);
        }
        InstanceChains { bits, updates: 0 }
    }

    /// Serialized form: per instance its id, update count and packed words.
    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.chains.len() as u64).to_le_bytes());
        for (id, inst) in &self.chains {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&inst.updates.to_le_bytes());
            let words = inst.bits.as_raw_slice();
            out.extend_from_slice(&(words.len() as u64).to_le_bytes());
            for w in words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub(crate) fn from_bytes(
        dims: Dims,
        mode: LabelMode,
        side: StoredSide,
        chains_per_instance: usize,
        bytes: &[u8],
    ) -> Result<Self> {
        let mut store = Self::new(dims, mode, side, chains_per_instance);
        let nbits = chains_per_instance * side.width(dims);
        let mut r = crate::container::ByteReader::new(bytes);
        let count = r.u64()?;
        for _ in 0..count {
            let id = r.u64()?;
            let updates = r.u64()?;
            let nwords = r.u64()? as usize;
            let words = (0..nwords).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let mut bits = BitVec::<u64, Lsb0>::from_vec(words);
            if bits.len() < nbits {
                return Err(Error::Format("chain store record too short".into()));
            }
            bits.truncate(nbits);
            store.chains.insert(id, InstanceChains { bits, updates });
        }
        r.finish()?;
        Ok(store)
    }
}

/// Runs `sweeps_per_update` sweeps on every chain of every requested instance,
/// writes the final states back, and returns per-instance Monte Carlo
/// estimates of `E_p[ŷ], E_p[y], E_p[h], E_p[ŷyᵀ], E_p[hyᵀ]` averaged over
/// the instance's chains.
///
/// The block that is not sampled last is integrated out analytically
/// (Rao–Blackwellised) when forming the estimates.
pub fn negative_phase(
    params: &EnergyParams,
    store: &mut ChainStore,
    items: &[NegativeItem<'_>],
    config: &GibbsConfig,
) -> Result<Vec<SuffStats>> {
    config.validate()?;
    if params.dims != store.dims || params.mode != store.mode {
        return Err(Error::InvalidArgument(
            "chain store does not match model dimensions".into(),
        ));
    }
    if config.chains_per_instance != store.chains_per_instance {
        return Err(Error::InvalidArgument(format!(
            "chain store holds {} chains per instance, config asks for {}",
            store.chains_per_instance, config.chains_per_instance
        )));
    }
    items
        .iter()
        .map(|item| advance_instance(params, store, item, config))
        .collect()
}

fn advance_instance(
    params: &EnergyParams,
    store: &mut ChainStore,
    item: &NegativeItem<'_>,
    config: &GibbsConfig,
) -> Result<SuffStats> {
    item.bias.validate(params.dims)?;
    check_len("observed y", params.dims.noisy, item.observed_y.len())?;
    let mut inst = match store.chains.remove(&item.id) {
        Some(inst) => inst,
        None => match store.policy {
            InitPolicy::FromObserved => store.cold_start(params, item, config.rng_seed),
            InitPolicy::Reject => return Err(Error::UnknownChain(item.id)),
        },
    };

    let dims = params.dims;
    let mut stats = SuffStats::zeros(dims);
    let weight = 1.0 / store.chains_per_instance as f64;
    let mut sampler = Sampler::new(params, item.bias);
    let mut y_f = vec![0.0; dims.noisy];
    let mut c_f = vec![0.0; dims.clean];
    let mut h_f = vec![0.0; dims.hidden];

    for chain in 0..store.chains_per_instance {
        let mut rng = stream(
            config.rng_seed,
            Domain::ChainUpdate,
            &[item.id, chain as u64, inst.updates],
        );
        let mut state = store.decode(&inst.bits, chain);
        match store.side {
            StoredSide::Noisy => {
                for _ in 0..config.sweeps_per_update {
                    sampler.sweep(&mut state, &mut rng);
                }
                sampler.clean_hidden_probs(&state.y);
                fill_f64(&mut y_f, &state.y);
                stats.add_outer(sampler.clean_probs(), &y_f, sampler.hidden_probs(), weight);
            }
            StoredSide::CleanHidden => {
                for _ in 0..config.sweeps_per_update {
                    sampler.sample_noisy(&mut state, &mut rng);
                    sampler.sample_clean_hidden(&mut state, &mut rng);
                }
                sampler.noisy_probs(&state.yhat, &state.h);
                fill_f64(&mut c_f, &state.yhat);
                fill_f64(&mut h_f, &state.h);
                stats.add_outer(&c_f, sampler.noisy_probs_slice(), &h_f, weight);
            }
        }
        store.encode(&mut inst.bits, chain, &state);
    }
    inst.updates += 1;
    store.chains.insert(item.id, inst);
    Ok(stats)
}

fn fill_f64(dst: &mut [f64], bits: &[u8]) {
    for (d, &b) in dst.iter_mut().zip(bits) {
        *d = b as f64;
    }
}
