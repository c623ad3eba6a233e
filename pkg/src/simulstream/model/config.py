from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    frame_dim: int = 16
    d_model: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    enc_ffn: int = 128
    conv_kernel: int = 7
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ffn: int = 128
    t2u_layers: int = 2
    unit_dec_layers: int = 2
    upsample_rate: int = 10
    src_vocab: int = 20
    tgt_vocab: int = 20
    unit_vocab: int = 32
    w_s2ut: float = 1.0
    w_ar_s2tt: float = 8.0
    w_asr: float = 4.0
    w_nar_s2tt: float = 4.0
    chunk_mode: str = "multi"  # multi | fixed | offline
    fixed_chunk: int = 8
    g_rounding: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.upsample_rate < 1:
            raise ValueError("upsample_rate must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if min(self.w_s2ut, self.w_ar_s2tt, self.w_asr, self.w_nar_s2tt) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.chunk_mode not in ("multi", "fixed", "offline"):
            raise ValueError(f"unknown chunk_mode {self.chunk_mode!r}")
        if self.fixed_chunk < 1:
            raise ValueError("fixed_chunk must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
