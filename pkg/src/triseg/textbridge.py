"""Text-embedding ingestion and the dual-branch alignment math.

Branch 1 holds one label-prompt vector per class (drop-in replacement for
one-hot class identity); branch 2 holds long-description vectors aligned to
pooled visual features through a sigmoid contrastive loss. Both live in one
JSON container: {"dim": 512, "classes": [{"name", "prompt", "branch",
"embedding": [512 floats]}]}. The encoder that produces real vectors is a
separate offline tool; `synth_embeddings` keeps this package self-contained.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EMBED_DIM = 512


@dataclass
class TextEntry:
    class_name: str
    prompt: str
    vector: np.ndarray
    branch: int = 1


@dataclass
class TextEmbeddingSet:
    dim: int
    entries: list

    def class_names(self, branch=1):
        return [e.class_name for e in self.entries if e.branch == branch]

    def matrix(self, class_names, branch=1) -> np.ndarray:
        """(K, dim) matrix in the order of `class_names`; errors on gaps."""
        lookup = {e.class_name: e for e in self.entries if e.branch == branch}
        missing = [n for n in class_names if n not in lookup]
        if missing:
            raise ValueError(f"branch {branch} is missing classes: {missing}")
        return np.stack([lookup[n].vector for n in class_names]).astype(np.float64)


def _validate_entries(dim, entries):
    seen = set()
    for i, e in enumerate(entries):
        if e.vector.shape != (dim,):
            raise ValueError(f"class index {i} ({e.class_name!r}): embedding length {e.vector.shape[0]} != dim {dim}")
        if not np.all(np.isfinite(e.vector)):
            raise ValueError(f"class index {i} ({e.class_name!r}): non-finite embedding values")
        if e.branch not in (1, 2):
            raise ValueError(f"class index {i} ({e.class_name!r}): branch must be 1 or 2")
        key = (e.class_name, e.branch)
        if key in seen:
            raise ValueError(f"duplicate class name {e.class_name!r} in branch {e.branch}")
        seen.add(key)


def load_embeddings(path) -> TextEmbeddingSet:
    """Parse and validate an embedding container file."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: malformed JSON: {e}") from e
    if "dim" not in raw or "classes" not in raw:
        raise ValueError(f"{path}: container must declare 'dim' and 'classes'")
    dim = int(raw["dim"])
    entries = []
    for i, item in enumerate(raw["classes"]):
        for key in ("name", "prompt", "embedding"):
            if key not in item:
                raise ValueError(f"{path}: class index {i} missing key {key!r}")
        vec = np.asarray(item["embedding"], dtype=np.float64)
        entries.append(TextEntry(item["name"], item["prompt"], vec, int(item.get("branch", 1))))
    _validate_entries(dim, entries)
    for e in entries:
        if float(np.linalg.norm(e.vector)) == 0.0:
            warnings.warn(f"embedding for {e.class_name!r} (branch {e.branch}) is a zero vector")
    return TextEmbeddingSet(dim=dim, entries=entries)


def save_embeddings(emb: TextEmbeddingSet, path) -> None:
    _validate_entries(emb.dim, emb.entries)
    payload = {
        "dim": emb.dim,
        "classes": [
            {"name": e.class_name, "prompt": e.prompt, "branch": e.branch, "embedding": [float(x) for x in e.vector]}
            for e in emb.entries
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f)
        f.write("\n")


def synth_embeddings(class_names, seed, dim=EMBED_DIM, max_abs_cos=0.5, max_tries=200) -> TextEmbeddingSet:
    """Deterministic unit vectors per class and branch, pairwise well-separated.

    Rejection-resamples any vector whose |cos| against an accepted one reaches
    `max_abs_cos`; random 512-d directions make rejection rare for K <= 32.
    """
    entries = []
    for branch in (1, 2):
        rng = np.random.default_rng(np.random.SeedSequence([seed, branch]))
        accepted = []
        for name in class_names:
            for attempt in range(max_tries):
                v = rng.standard_normal(dim)
                v /= np.linalg.norm(v)
                if all(abs(float(v @ u)) < max_abs_cos for u in accepted):
                    break
            else:
                raise ValueError(
                    f"could not satisfy pairwise separation {max_abs_cos} for {len(class_names)} classes"
                )
            accepted.append(v)
            prompt = f"A photo of a {name}" if branch == 1 else f"synthetic description vector for {name}"
            entries.append(TextEntry(name, prompt, v, branch))
    return TextEmbeddingSet(dim=dim, entries=entries)


# -- similarity and losses -----------------------------------------------------------

NORM_EPS = 1e-12


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


def similarity_matrix(f_v, f_t) -> Tensor:
    """Row-normalized f_v (B, d) against row-normalized f_t (K, d) -> (B, K).

    Differentiable through the visual side; raises on zero-norm rows.
    """
    f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
    f_t = f_t if isinstance(f_t, Tensor) else Tensor(f_t)
    if np.any(np.linalg.norm(f_v.data, axis=1) == 0) or np.any(np.linalg.norm(f_t.data, axis=1) == 0):
        raise ValueError("zero-norm row passed to similarity_matrix")
    v_norm = T.sqrt(T.tsum(f_v * f_v, axis=1, keepdims=True)) + NORM_EPS
    t_norm = T.sqrt(T.tsum(f_t * f_t, axis=1, keepdims=True)) + NORM_EPS
    return T.matmul(f_v / v_norm, T.permute(f_t / t_norm, (1, 0)))


def _check_binary(y: np.ndarray):
    if not np.all(np.isin(np.unique(y), (0.0, 1.0))):
        raise ValueError("labels must be binary")


def contrastive_loss(s, y) -> Tensor:
    """Sigmoid cross-entropy on similarity logits, mean over B*K.

    Stabilized form max(s,0) - s*y + log(1 + e^{-|s|}); cosine-bounded logits
    keep each element inside [ln(1+e^-1), ln(1+e^1)].
    """
    s = s if isinstance(s, Tensor) else Tensor(s)
    y = np.asarray(y, dtype=np.float64)
    _check_binary(y)
    elementwise = T.relu(s) - s * Tensor(y.astype(s.dtype.type)) + T.softplus(-T.tabs(s))
    return T.tmean(elementwise)


def chunk_average(chunk_vectors) -> np.ndarray:
    """Arithmetic mean of per-chunk embeddings (normalization happens later).

    Warns when chunks cancel to a degenerate zero vector.
    """
    if len(chunk_vectors) == 0:
        raise ValueError("chunk_average needs at least one chunk vector")
    stacked = np.stack([np.asarray(c, dtype=np.float64) for c in chunk_vectors])
    mean = stacked.mean(axis=0)
    if float(np.linalg.norm(mean)) == 0.0 and float(np.abs(stacked).sum()) > 0.0:
        warnings.warn("chunk vectors cancelled to a zero embedding (degenerate description)")
    return mean
