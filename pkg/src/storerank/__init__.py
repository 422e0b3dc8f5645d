"""Token-based CTR ranking: semantic-ID tokenization of item embeddings,
orthogonal rotations of fused feature groups, and block-sparse attention,
all on a small numpy autodiff core."""

__version__ = "0.1.0"
