use crate::error::{invalid, Result};

/// Dimensions of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value heads; `n_heads` must be a multiple of it.
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("model config field {name} must be positive"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(invalid!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model,
                self.n_heads,
                self.d_head
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(invalid!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads,
                self.n_kv_heads
            ));
        }
        if u32::try_from(self.vocab_size).is_err() {
            return Err(invalid!("vocab_size {} does not fit token ids", self.vocab_size));
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Hidden width of the feed-forward block.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_head: self.d_head,
        }
    }
}

/// The attention geometry shared by real and planted activation sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadLayout {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl HeadLayout {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.d_head == 0 {
            return Err(invalid!("head layout dimensions must be positive: {self:?}"));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(invalid!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads,
                self.n_kv_heads
            ));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// KV head serving query head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Query heads served by KV head `kv_head`.
    pub fn query_heads_of(&self, kv_head: usize) -> core::ops::Range<usize> {
        let g = self.group_size();
        kv_head * g..(kv_head + 1) * g
    }
}
