//! Local-global hierarchical encoder.
//!
//! Patch features are projected to `d_model` and cut into regions of
//! `region_size` patches, each followed by a shared learnable region token.
//! A region-level encoder runs inside every region, the region tokens are
//! gathered and mixed by a WSI-level encoder, the global-aware tokens go back
//! into their regions for a second region-level pass, and gated attention
//! pooling turns each region into one vector.

use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};
use crate::nn::{
    encode_stack, sinusoidal_encoding, EncoderLayer, Fwd, GatedAttentionPool, Init, Linear, Mask,
    Mat, ParamId, ParamStore, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub region_size: usize,
    pub d_model: usize,
    pub d_in: usize,
    /// Depth of the region-level encoder (applied twice, shared weights).
    pub local_layers: usize,
    pub global_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub use_positional_encoding: bool,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            region_size: 96,
            d_model: 512,
            d_in: 1024,
            local_layers: 1,
            global_layers: 1,
            heads: 8,
            ff_dim: 2048,
            use_positional_encoding: true,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.region_size < 1 {
            return Err(HistGenError::Config("region_size must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(HistGenError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_in == 0 || self.ff_dim == 0 {
            return Err(HistGenError::Config("d_in and ff_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HistGenError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Real-patch count of every region for `n` patches and region size `s`.
pub fn region_layout(n: usize, s: usize) -> Vec<usize> {
    let regions = n.div_ceil(s);
    (0..regions).map(|i| s.min(n - i * s)).collect()
}

/// A bag cut into regions. Each region is an `(S+1)×d_model` block whose
/// last row is the region token; `keep[i][j]` is false only for padding.
pub struct RegionPartition {
    pub regions: Vec<Var>,
    pub keep: Vec<Vec<bool>>,
    pub real: Vec<usize>,
    pub region_size: usize,
}

impl RegionPartition {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Self-attention mask of region `i`: padded slots are never attended.
    pub fn mask(&self, i: usize) -> Mask {
        let keep = &self.keep[i];
        Mask::from_shape_fn((keep.len(), keep.len()), |(_, c)| keep[c])
    }
}

/// Output of [`LghEncoder::forward`] on the tape.
pub struct LghOutput {
    /// `N×d_model` region representations.
    pub reps: Var,
    /// `1×(S+1)` pooling weights per region.
    pub pool_weights: Vec<Var>,
    /// Per region: first-pass and second-pass attention maps (layer, head).
    pub local_attention: Vec<[Vec<Vec<Var>>; 2]>,
    pub partition: RegionPartition,
}

/// Plain-matrix view of the encoder output, for inspection and export.
#[derive(Clone, Debug, Serialize)]
pub struct RegionRepresentations {
    pub reps: Vec<Vec<f64>>,
    pub pool_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LghEncoder {
    pub config: EncoderConfig,
    pub input_proj: Linear,
    pub region_token: ParamId,
    pub local: Vec<EncoderLayer>,
    pub global: Vec<EncoderLayer>,
    pub pool: GatedAttentionPool,
}

impl LghEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = |store: &mut ParamStore, kind: &str, i: usize| {
            EncoderLayer::new(store, &format!("{name}.{kind}.{i}"), d, config.heads, config.ff_dim)
        };
        Ok(Self {
            input_proj: Linear::new(store, &format!("{name}.input_proj"), config.d_in, d),
            region_token: store.add(&format!("{name}.region_token"), 1, d, Init::Normal(0.02)),
            local: (0..config.local_layers).map(|i| layer(store, "local", i)).collect(),
            global: (0..config.global_layers).map(|i| layer(store, "global", i)).collect(),
            pool: GatedAttentionPool::new(store, &format!("{name}.pool"), d, d),
            config: config.clone(),
        })
    }

    /// Projects `n×d_in` features to `n×d_model`.
    pub fn project(&self, f: &mut Fwd, features: Var) -> Result<Var> {
        let (n, d) = f.g.shape(features);
        if n == 0 {
            return Err(HistGenError::invalid("bag has no patches"));
        }
        if d != self.config.d_in {
            return Err(HistGenError::shape(format!(
                "features have {d} columns, encoder expects {}",
                self.config.d_in
            )));
        }
        Ok(self.input_proj.forward(f, features))
    }

    /// Splits projected `n×d_model` patches into regions, zero-pads the last
    /// one, and appends the region token to each.
    pub fn partition(&self, f: &mut Fwd, projected: Var) -> Result<RegionPartition> {
        let (n, d) = f.g.shape(projected);
        if n == 0 {
            return Err(HistGenError::invalid("cannot partition an empty bag"));
        }
        let s = self.config.region_size;
        let token = f.p(self.region_token);
        let real = region_layout(n, s);
        let mut regions = Vec::with_capacity(real.len());
        let mut keep = Vec::with_capacity(real.len());
        for (i, &count) in real.iter().enumerate() {
            let patches = f.g.slice_rows(projected, i * s, i * s + count);
            let mut parts = vec![patches];
            if count < s {
                parts.push(f.g.input(Mat::zeros((s - count, d))));
            }
            parts.push(token);
            regions.push(f.g.concat_rows(&parts));
            keep.push((0..=s).map(|j| j < count || j == s).collect());
        }
        Ok(RegionPartition {
            regions,
            keep,
            real,
            region_size: s,
        })
    }

    fn add_pe(&self, f: &mut Fwd, x: Var) -> Var {
        if !self.config.use_positional_encoding {
            return x;
        }
        let (rows, d) = f.g.shape(x);
        let pe = f.g.input(sinusoidal_encoding(rows, d));
        f.g.add(x, pe)
    }

    /// Region-level encoder over every region independently.
    pub fn encode_local(&self, f: &mut Fwd, x: Var, mask: &Mask) -> (Var, Vec<Vec<Var>>) {
        encode_stack(&self.local, f, x, Some(mask))
    }

    /// WSI-level encoder over the `N×d_model` region tokens (with positional
    /// encoding over the region index when enabled).
    pub fn encode_global(&self, f: &mut Fwd, tokens: Var) -> Result<Var> {
        if f.g.shape(tokens).0 == 0 {
            return Err(HistGenError::invalid("no region tokens"));
        }
        let x = self.add_pe(f, tokens);
        Ok(encode_stack(&self.global, f, x, None).0)
    }

    /// Full pipeline from `n×d_in` features to `N×d_model` region
    /// representations.
    pub fn forward(&self, f: &mut Fwd, features: Var) -> Result<LghOutput> {
        let projected = self.project(f, features)?;
        self.forward_projected(f, projected)
    }

    /// Pipeline from already projected patches; exposed so callers can take
    /// gradients with respect to the partition input.
    pub fn forward_projected(&self, f: &mut Fwd, projected: Var) -> Result<LghOutput> {
        let partition = self.partition(f, projected)?;
        let s = partition.region_size;
        let mut with_pe = Vec::with_capacity(partition.len());
        let mut first_maps = Vec::with_capacity(partition.len());
        let mut tokens = Vec::with_capacity(partition.len());
        for (i, &region) in partition.regions.iter().enumerate() {
            let x = self.add_pe(f, region);
            let (h, maps) = self.encode_local(f, x, &partition.mask(i));
            tokens.push(f.g.slice_rows(h, s, s + 1));
            with_pe.push(x);
            first_maps.push(maps);
        }
        let token_seq = f.g.concat_rows(&tokens);
        let global = self.encode_global(f, token_seq)?;

        let mut reps = Vec::with_capacity(partition.len());
        let mut pool_weights = Vec::with_capacity(partition.len());
        let mut local_attention = Vec::with_capacity(partition.len());
        for (i, (x, first)) in with_pe.into_iter().zip(first_maps).enumerate() {
            let patches = f.g.slice_rows(x, 0, s);
            let token = f.g.slice_rows(global, i, i + 1);
            let x2 = f.g.concat_rows(&[patches, token]);
            let (h, second) = self.encode_local(f, x2, &partition.mask(i));
            let pooled = self.pool.forward(f, h, Some(&partition.keep[i]));
            reps.push(pooled.output);
            pool_weights.push(pooled.weights);
            local_attention.push([first, second]);
        }
        let reps = f.g.concat_rows(&reps);
        Ok(LghOutput {
            reps,
            pool_weights,
            local_attention,
            partition,
        })
    }

    /// Evaluation-mode forward returning plain matrices.
    pub fn represent(&self, store: &ParamStore, features: &Mat) -> Result<RegionRepresentations> {
        let mut f = Fwd::eval(store);
        let x = f.g.input(features.clone());
        let out = self.forward(&mut f, x)?;
        let rows = |m: &Mat| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        Ok(RegionRepresentations {
            reps: rows(f.g.value(out.reps)),
            pool_weights: out
                .pool_weights
                .iter()
                .map(|&w| f.g.value(w).row(0).to_vec())
                .collect(),
        })
    }
}
