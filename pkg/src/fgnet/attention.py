"""Non-local attention over the coarsest-stage feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class GlobalAttention:
    w_g1: ad.Tensor  # (L, C_mid)
    w_g2: ad.Tensor  # (L, C_mid)
    rowwise: bool = False

    @classmethod
    def create(cls, width: int, rng: np.random.Generator, c_mid: int = 1,
               rowwise: bool = False) -> GlobalAttention:
        if c_mid < 1:
            raise ValueError(f"c_mid must be >= 1, got {c_mid}")
        scale = 1.0 / np.sqrt(width)
        return cls(ad.parameter(rng.normal(scale=scale, size=(width, c_mid)), "w_g1"),
                   ad.parameter(rng.normal(scale=scale, size=(width, c_mid)), "w_g2"),
                   rowwise)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"w_g1": self.w_g1, "w_g2": self.w_g2}


def attention_scores(m_in: ad.Tensor, module: GlobalAttention) -> ad.Tensor:
    """S = softmax(M_1 M_2^T), normalised over the whole matrix unless ``rowwise``."""
    m1 = ad.matmul(m_in, module.w_g1)
    m2 = ad.matmul(m_in, module.w_g2)
    relevance = ad.matmul(m1, ad.transpose(m2))
    if module.rowwise:
        return ad.softmax(relevance, axis=1)
    return ad.full_matrix_softmax(relevance)


def global_attend(m_in: ad.Tensor, module: GlobalAttention) -> ad.Tensor:
    """M_out = S M_in + M_in."""
    if m_in.rows < 1:
        raise ValueError("global attention needs at least one row")
    s = attention_scores(m_in, module)
    return ad.add(ad.matmul(s, m_in), m_in)
