"""Per-token representations: trainable embeddings through one bidirectional
tanh recurrence, concatenated to a (n, 2*hidden) matrix.

The recurrent scan is a single fused op with hand-rolled backprop through
time. A loader/saver pair supports swapping in externally precomputed
per-token vectors instead of the trainable stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DataError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
INIT_SCALE = 0.1


@dataclass(frozen=True)
class Vocabulary:
    """Token -> dense id map; id 0 is padding, id 1 the unknown token."""

    token_to_id: dict

    @classmethod
    def build(cls, token_lists) -> "Vocabulary":
        counts: dict[str, int] = {}
        for tokens in token_lists:
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
        mapping = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for tok in sorted(counts, key=lambda t: (-counts[t], t)):
            if tok not in mapping:
                mapping[tok] = len(mapping)
        return cls(mapping)

    @classmethod
    def from_id_order(cls, tokens: list[str]) -> "Vocabulary":
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise DataError("vocabulary list must start with the pad and unknown tokens")
        return cls({tok: i for i, tok in enumerate(tokens)})

    def id_order(self) -> list[str]:
        return sorted(self.token_to_id, key=self.token_to_id.get)

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def encode(self, tokens) -> np.ndarray:
        unk = self.token_to_id[UNK_TOKEN]
        return np.array([self.token_to_id.get(t, unk) for t in tokens], dtype=np.intp)


def init_encoder_params(vocab_size: int, emb_dim: int, hidden_dim: int,
                        rng: np.random.Generator) -> nc.ParamSet:
    """Uniform [-0.1, 0.1] init for embeddings and both recurrent directions."""
    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    p = nc.ParamSet()
    p["emb"] = u(vocab_size, emb_dim)
    for d in ("fwd", "bwd"):
        p[f"rnn_{d}_wx"] = u(emb_dim, hidden_dim)
        p[f"rnn_{d}_wh"] = u(hidden_dim, hidden_dim)
        p[f"rnn_{d}_b"] = u(hidden_dim)
    return p


def rnn_scan(x: nc.Tensor, wx: nc.Tensor, wh: nc.Tensor, b: nc.Tensor,
             reverse: bool = False) -> nc.Tensor:
    """tanh recurrence over the rows of x; output row t is the state at token t.

    Fused primitive: forward stores the states, the vjp runs BPTT manually.
    """
    n = x.data.shape[0]
    h_dim = wh.data.shape[0]
    order = list(range(n - 1, -1, -1)) if reverse else list(range(n))
    xw = x.data @ wx.data  # (n, h)
    hs = np.zeros((n, h_dim))
    h = np.zeros(h_dim)
    for t in order:
        h = np.tanh(xw[t] + h @ wh.data + b.data)
        hs[t] = h

    def vjp(g):
        gx = np.zeros_like(x.data)
        gwx = np.zeros_like(wx.data)
        gwh = np.zeros_like(wh.data)
        gb = np.zeros_like(b.data)
        carry = np.zeros(h_dim)
        for k in range(n - 1, -1, -1):
            t = order[k]
            prev = hs[order[k - 1]] if k > 0 else np.zeros(h_dim)
            dh = g[t] + carry
            da = dh * (1.0 - hs[t] * hs[t])
            gwx += np.outer(x.data[t], da)
            gx[t] = da @ wx.data.T
            gwh += np.outer(prev, da)
            gb += da
            carry = da @ wh.data.T
        return gx, gwx, gwh, gb

    return nc.record_op(hs, (x, wx, wh, b), vjp, "rnn_scan")


def encode(ids, params: nc.ParamSet, *, train: bool = False,
           dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> nc.Tensor:
    """ids (n,) -> representations (n, 2*hidden). Dropout hits embeddings only
    and only when `train` is set; masks come from `rng`."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise DataError("cannot encode an empty post")
    rows = params["emb"].data.shape[0]
    if ids.min() < 0 or ids.max() >= rows:
        raise DataError(f"token id out of range for vocabulary of {rows}")
    reps = nc.gather_rows(params["emb"], ids)
    if train and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        reps = nc.mul(reps, nc.dropout_mask(reps.data.shape, dropout_rate, rng))
    fwd = rnn_scan(reps, params["rnn_fwd_wx"], params["rnn_fwd_wh"], params["rnn_fwd_b"])
    bwd = rnn_scan(reps, params["rnn_bwd_wx"], params["rnn_bwd_wh"], params["rnn_bwd_b"],
                   reverse=True)
    return nc.concat([fwd, bwd], axis=1)


# ------------------------------------------- precomputed-representation path

def save_precomputed(reps_per_post: list[np.ndarray], path) -> None:
    """Text format: header 'dim=<d>', then one line per token:
    '<post-index> <token-index> <d floats>'. Floats use repr round-tripping."""
    if not reps_per_post:
        raise DataError("nothing to save")
    dim = reps_per_post[0].shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={dim}\n")
        for pi, mat in enumerate(reps_per_post):
            if mat.ndim != 2 or mat.shape[1] != dim:
                raise DataError(f"post {pi} has vectors of the wrong width")
            for ti in range(mat.shape[0]):
                row = " ".join(repr(float(v)) for v in mat[ti])
                fh.write(f"{pi} {ti} {row}\n")


def load_precomputed(path, post_lengths: list[int]) -> list[np.ndarray]:
    """Read vectors back, validating coverage against the expected lengths."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise DataError("precomputed file must start with a 'dim=<d>' header")
        try:
            dim = int(header[4:])
        except ValueError:
            raise DataError(f"bad dimension header {header!r}") from None
        out = [np.full((n, dim), np.nan) for n in post_lengths]
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 + dim:
                raise DataError(f"line {lineno}: expected {2 + dim} fields, got {len(parts)}")
            try:
                pi, ti = int(parts[0]), int(parts[1])
                vec = np.array([float(v) for v in parts[2:]])
            except ValueError:
                raise DataError(f"line {lineno}: unparseable entry") from None
            if not 0 <= pi < len(out):
                raise DataError(f"line {lineno}: post index {pi} out of range")
            if not 0 <= ti < out[pi].shape[0]:
                raise DataError(f"line {lineno}: token index {ti} out of range for post {pi}")
            out[pi][ti] = vec
    for pi, mat in enumerate(out):
        if np.isnan(mat).any():
            raise DataError(f"post {pi} is missing precomputed vectors for some tokens")
    return out
