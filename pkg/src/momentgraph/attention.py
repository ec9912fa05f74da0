"""Frame-by-word co-attention.

All functions take frame reps ``V`` of shape (..., N, H) and word reps
``W`` of shape (..., Q, H); leading dims broadcast, which is how a whole
video x query grid is scored in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


@dataclass
class FbwTensors:
    s: Tensor
    a_word: Tensor
    a_frame: Tensor
    l: Tensor
    f: Tensor


def fbw_similarity(V, W):
    if V.shape[-1] != W.shape[-1]:
        raise DimensionError(
            f"frame width {V.shape[-1]} != word width {W.shape[-1]}; frame encoder output "
            "plus position block must equal the word hidden size"
        )
    return T.cosine_matrix(V, W)


def frame_specific_sentence(s, W):
    """l_i: word reps weighted by the row-normalized similarities of frame i."""
    return T.matmul(T.row_softmax(s, "rows"), W)


def word_specific_video(s, V):
    """f_j: frame reps weighted by the column-normalized similarities of word j."""
    return T.matmul(T.swap_last(T.row_softmax(s, "cols")), V)


def fbw(V, W):
    s = fbw_similarity(V, W)
    a_word = T.row_softmax(s, "rows")
    a_frame = T.row_softmax(s, "cols")
    l = T.matmul(a_word, W)
    f = T.matmul(T.swap_last(a_frame), V)
    return FbwTensors(s=s, a_word=a_word, a_frame=a_frame, l=l, f=f)
