"""Conditional autoregressive caption model.

A frozen-after-pretraining affine encoder maps object features to the initial
hidden state; trainable token embeddings, a gated recurrent cell, and an
output projection produce next-token distributions. Likelihood evaluation is
teacher-forced and batched (rows padded with EOS and masked), which also
powers the hand-derived gradients used throughout adaptation.

Checkpoints are a versioned JSON manifest plus a flat little-endian float64
payload; round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics
from .errors import ConfigurationError, InputError, TrainingError
from .numerics import Array, CellParams, cell_backward, cell_step, log_softmax, softmax
from .world import BOS_ID, EOS_ID, ObjectSpec, Vocabulary

TENSOR_NAMES = (
    "enc_w",
    "enc_b",
    "emb",
    "w_z",
    "u_z",
    "b_z",
    "w_r",
    "u_r",
    "b_r",
    "w_c",
    "u_c",
    "b_c",
    "out_w",
    "out_b",
)

ENCODER_TENSORS = ("enc_w", "enc_b")

CHECKPOINT_FORMAT = "refgame-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class CaptionerParams:
    """All model weights; `frozen` names are skipped by ascent updates."""

    vocab_size: int
    feature_dim: int
    embed_dim: int
    hidden_dim: int
    enc_w: Array
    enc_b: Array
    emb: Array
    cell: CellParams
    out_w: Array
    out_b: Array
    frozen: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.enc_w.shape != (self.feature_dim, self.hidden_dim):
            raise ConfigurationError("encoder matrix shape mismatch")
        if self.emb.shape != (self.vocab_size, self.embed_dim):
            raise ConfigurationError("embedding shape mismatch")
        if self.out_w.shape != (self.hidden_dim, self.vocab_size):
            raise ConfigurationError("output projection shape mismatch")
        if (self.cell.embed_dim, self.cell.hidden_dim) != (self.embed_dim, self.hidden_dim):
            raise ConfigurationError("cell dimensions inconsistent with captioner dims")

    @classmethod
    def random(
        cls,
        vocab_size: int,
        feature_dim: int,
        embed_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
        scale: float = 0.1,
    ) -> "CaptionerParams":
        return cls(
            vocab_size=vocab_size,
            feature_dim=feature_dim,
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            enc_w=rng.standard_normal((feature_dim, hidden_dim)) * scale,
            enc_b=np.zeros(hidden_dim),
            emb=rng.standard_normal((vocab_size, embed_dim)) * scale,
            cell=CellParams.random(embed_dim, hidden_dim, rng, scale),
            out_w=rng.standard_normal((hidden_dim, vocab_size)) * scale,
            out_b=np.zeros(vocab_size),
        )

    @classmethod
    def zeros(
        cls, vocab_size: int, feature_dim: int, embed_dim: int, hidden_dim: int
    ) -> "CaptionerParams":
        return cls(
            vocab_size=vocab_size,
            feature_dim=feature_dim,
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            enc_w=np.zeros((feature_dim, hidden_dim)),
            enc_b=np.zeros(hidden_dim),
            emb=np.zeros((vocab_size, embed_dim)),
            cell=CellParams.zeros(embed_dim, hidden_dim),
            out_w=np.zeros((hidden_dim, vocab_size)),
            out_b=np.zeros(vocab_size),
        )

    def tensors(self) -> dict[str, Array]:
        out = {"enc_w": self.enc_w, "enc_b": self.enc_b, "emb": self.emb}
        out.update(self.cell.tensors())
        out["out_w"] = self.out_w
        out["out_b"] = self.out_b
        return out

    def copy(self) -> "CaptionerParams":
        return replace(
            self,
            enc_w=self.enc_w.copy(),
            enc_b=self.enc_b.copy(),
            emb=self.emb.copy(),
            cell=self.cell.copy(),
            out_w=self.out_w.copy(),
            out_b=self.out_b.copy(),
        )

    def zero_grads(self) -> dict[str, Array]:
        return numerics.zero_grads(self.tensors())

    def digest(self) -> str:
        """SHA-256 over all tensor payloads in canonical order."""
        h = hashlib.sha256()
        tensors = self.tensors()
        for name in TENSOR_NAMES:
            h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class FrozenSnapshot:
    """Immutable pretrained parameter value; the regularization anchor."""

    params: CaptionerParams
    digest: str

    @classmethod
    def capture(cls, params: CaptionerParams) -> "FrozenSnapshot":
        frozen = params.copy()
        for arr in frozen.tensors().values():
            arr.flags.writeable = False
        return cls(params=frozen, digest=frozen.digest())

    def thaw(self) -> CaptionerParams:
        """A fresh mutable copy with the encoder frozen, ready to adapt."""
        out = self.params.copy()
        out.frozen = frozenset(ENCODER_TENSORS)
        return out


def validate_utterance(ids: Sequence[int], vocab_size: int, max_len: int | None = None) -> tuple[int, ...]:
    ids = tuple(int(i) for i in ids)
    if not ids:
        raise InputError("utterance must contain at least an EOS token")
    if ids[-1] != EOS_ID:
        raise InputError("utterance must be EOS-terminated")
    if any(i == BOS_ID for i in ids):
        raise InputError("utterance may not contain BOS")
    if any(not 0 <= i < vocab_size for i in ids):
        raise InputError("utterance token id out of range")
    if max_len is not None and len(ids) - 1 > max_len:
        raise InputError(f"utterance longer than {max_len} content tokens")
    return ids


def content_length(ids: Sequence[int]) -> int:
    """Content tokens only (EOS excluded); the efficiency statistic."""
    return sum(1 for i in ids if i != EOS_ID)


def encode(params: CaptionerParams, features: Array) -> Array:
    """tanh affine adapter from object features to the initial hidden state."""
    if features.shape[-1] != params.feature_dim:
        raise ConfigurationError(
            f"feature width {features.shape[-1]} != encoder input {params.feature_dim}"
        )
    return np.tanh(features @ params.enc_w + params.enc_b)


@dataclass
class TeacherCache:
    """Forward intermediates for one padded batch of teacher-forced rows."""

    feats: Array  # (B, F)
    h0: Array  # (B, H)
    inputs: Array  # (B, T) int64: BOS then targets[:-1]
    targets: Array  # (B, T) int64, EOS-padded
    mask: Array  # (B, T) float 0/1
    step_caches: list
    hs: Array  # (B, T, H)
    probs: Array  # (B, T, V)

    @property
    def row_logprobs(self) -> Array:
        b, t = self.targets.shape
        probs = self.probs[np.arange(b)[:, None], np.arange(t)[None, :], self.targets]
        with np.errstate(divide="ignore"):
            logs = np.log(probs)
        # padded positions may hold exact zeros; exclude them before summing
        return np.where(self.mask > 0, logs, 0.0).sum(axis=1)


def pad_rows(rows: Sequence[Sequence[int]]) -> tuple[Array, Array]:
    """Stack variable-length id rows into (targets, mask), padding with EOS."""
    t_max = max(len(r) for r in rows)
    targets = np.full((len(rows), t_max), EOS_ID, dtype=np.int64)
    mask = np.zeros((len(rows), t_max))
    for i, row in enumerate(rows):
        targets[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    return targets, mask


def forward_teacher(params: CaptionerParams, feats: Array, targets: Array, mask: Array) -> TeacherCache:
    """Teacher-forced forward over a padded batch.

    Position i conditions on BOS plus targets[:, :i]; padded positions still
    run (their inputs are EOS) but are excluded by the mask downstream.
    """
    b, t = targets.shape
    h0 = encode(params, feats)
    inputs = np.concatenate([np.full((b, 1), BOS_ID, dtype=np.int64), targets[:, :-1]], axis=1)
    h = h0
    hs = np.empty((b, t, params.hidden_dim))
    caches = []
    for i in range(t):
        x = params.emb[inputs[:, i]]
        h, cache = cell_step(params.cell, x, h)
        hs[:, i, :] = h
        caches.append(cache)
    logits = hs @ params.out_w + params.out_b
    probs = softmax(logits, axis=-1)
    return TeacherCache(
        feats=feats,
        h0=h0,
        inputs=inputs,
        targets=targets,
        mask=mask,
        step_caches=caches,
        hs=hs,
        probs=probs,
    )


def backward_teacher(params: CaptionerParams, cache: TeacherCache, dlogits: Array) -> dict[str, Array]:
    """Backprop a (B, T, V) logit gradient through the whole batch.

    The caller pre-weights and pre-masks dlogits; gradients come back summed
    over rows and positions, keyed like `params.tensors()`.
    """
    b, t, _ = dlogits.shape
    grads = params.zero_grads()
    grads["out_w"] = np.einsum("bth,btv->hv", cache.hs, dlogits)
    grads["out_b"] = dlogits.sum(axis=(0, 1))
    d_hs = dlogits @ params.out_w.T

    dh = np.zeros((b, params.hidden_dim))
    for i in reversed(range(t)):
        dh = dh + d_hs[:, i, :]
        cell_grads, dx, dh = cell_backward(params.cell, cache.step_caches[i], dh)
        for name, grad in cell_grads.items():
            grads[name] += grad
        np.add.at(grads["emb"], cache.inputs[:, i], dx)

    da0 = dh * (1.0 - cache.h0 * cache.h0)
    grads["enc_w"] = cache.feats.T @ da0
    grads["enc_b"] = da0.sum(axis=0)
    return grads


def xent_dlogits(cache: TeacherCache, row_weights: Array) -> Array:
    """d(sum_b w_b * logprob_b)/dlogits = w_b * (onehot - p) at unmasked
    positions."""
    b, t, v = cache.probs.shape
    d = -cache.probs.copy()
    d[np.arange(b)[:, None], np.arange(t)[None, :], cache.targets] += 1.0
    return d * (cache.mask * row_weights[:, None])[:, :, None]


def next_token_dist(params: CaptionerParams, features: Array, prefix: Sequence[int]) -> Array:
    """Distribution over the vocabulary for the next token given a prefix."""
    h = encode(params, features)
    prev = [BOS_ID, *prefix]
    for tok in prev:
        h, _ = cell_step(params.cell, params.emb[tok], h)
    return softmax(h @ params.out_w + params.out_b)


def utterance_logprob(params: CaptionerParams, features: Array, utterance: Sequence[int]) -> float:
    """Sum of next-token conditionals over the utterance, EOS included."""
    ids = validate_utterance(utterance, params.vocab_size)
    targets, mask = pad_rows([ids])
    cache = forward_teacher(params, features[None, :], targets, mask)
    return float(cache.row_logprobs[0])


def utterance_logprob_and_grad(
    params: CaptionerParams, features: Array, utterance: Sequence[int]
) -> tuple[float, dict[str, Array]]:
    ids = validate_utterance(utterance, params.vocab_size)
    targets, mask = pad_rows([ids])
    cache = forward_teacher(params, features[None, :], targets, mask)
    grads = backward_teacher(params, cache, xent_dlogits(cache, np.ones(1)))
    return float(cache.row_logprobs[0]), grads


def batch_mean_nll(params: CaptionerParams, feats: Array, targets: Array, mask: Array) -> tuple[float, dict[str, Array]]:
    """Mean per-sequence negative log-likelihood and its gradients."""
    b = targets.shape[0]
    cache = forward_teacher(params, feats, targets, mask)
    nll = -float(cache.row_logprobs.mean())
    grads = backward_teacher(params, cache, xent_dlogits(cache, np.full(b, -1.0 / b)))
    return nll, grads


def greedy_decode(params: CaptionerParams, features: Array, max_len: int) -> tuple[int, ...]:
    """Argmax decode (ties break to the lower id); EOS is forced at max_len."""
    if max_len < 1:
        raise InputError("max_len must be at least 1")
    h = encode(params, features)
    tokens: list[int] = []
    prev = BOS_ID
    while True:
        h, _ = cell_step(params.cell, params.emb[prev], h)
        logits = h @ params.out_w + params.out_b
        logits[BOS_ID] = -np.inf
        tok = int(np.argmax(logits))
        if tok == EOS_ID:
            tokens.append(EOS_ID)
            return tuple(tokens)
        tokens.append(tok)
        if len(tokens) >= max_len:
            tokens.append(EOS_ID)
            return tuple(tokens)
        prev = tok


def beam_decode(
    params: CaptionerParams, features: Array, width: int, max_len: int
) -> list[tuple[tuple[int, ...], float]]:
    """Beam search over next-token distributions.

    Every hypothesis terminates with EOS (forced once it reaches max_len
    content tokens). Completed hypotheses are all retained and returned
    sorted by descending length-normalized score (total logprob divided by
    the number of scored tokens, EOS included); remaining ties break on the
    token sequence for determinism.
    """
    if width < 1:
        raise InputError("beam width must be at least 1")
    if max_len < 1:
        raise InputError("max_len must be at least 1")
    h0 = encode(params, features)
    h, _ = cell_step(params.cell, params.emb[BOS_ID], h0)

    live_tokens: list[tuple[int, ...]] = [()]
    live_logp = np.zeros(1)
    live_h = h[None, :]
    completed: list[tuple[tuple[int, ...], float, float]] = []

    for depth in range(max_len + 1):
        step_logp = log_softmax(live_h @ params.out_w + params.out_b, axis=-1)
        step_logp[:, BOS_ID] = -np.inf
        if depth == max_len:
            # out of content budget: every live hypothesis takes a forced EOS
            for i, tokens in enumerate(live_tokens):
                total = float(live_logp[i] + step_logp[i, EOS_ID])
                full = tokens + (EOS_ID,)
                completed.append((full, total, total / len(full)))
            break
        # EOS competes with content tokens for beam slots; a hypothesis that
        # selects it completes (and its slot is spent)
        candidates = []
        for i, tokens in enumerate(live_tokens):
            for tok in range(params.vocab_size):
                if tok == BOS_ID:
                    continue
                candidates.append(
                    (float(live_logp[i] + step_logp[i, tok]), i, tokens + (tok,))
                )
        candidates.sort(key=lambda c: (-c[0], c[2]))
        selected = candidates[:width]
        next_rows = []
        for score, i, tokens in selected:
            if tokens[-1] == EOS_ID:
                completed.append((tokens, score, score / len(tokens)))
            else:
                next_rows.append((score, i, tokens))
        if not next_rows:
            break
        idx = [i for _, i, _ in next_rows]
        toks = np.array([t[-1] for _, _, t in next_rows], dtype=np.int64)
        live_h, _ = cell_step(params.cell, params.emb[toks], live_h[idx])
        live_tokens = [t for _, _, t in next_rows]
        live_logp = np.array([s for s, _, _ in next_rows])

    completed.sort(key=lambda c: (-c[2], c[0]))
    return [(tokens, norm) for tokens, _, norm in completed]


@dataclass
class PretrainConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    learning_rate: float = 0.5
    momentum: float = 0.9
    epochs: int = 60
    batch_size: int = 16
    val_fraction: float = 0.1
    patience: int = 8
    init_scale: float = 0.3

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def pretrain(
    corpus: Sequence[tuple[ObjectSpec, tuple[int, ...]]],
    vocab: Vocabulary,
    config: PretrainConfig,
    seed: int,
) -> tuple[CaptionerParams, FrozenSnapshot, dict]:
    """SGD-with-momentum pretraining on (object, caption) pairs.

    Minimizes mean per-caption cross-entropy, early-stops on a held-out
    split, and returns the best parameters, an immutable snapshot with the
    encoder frozen thereafter, and a small training report. Deterministic
    given (corpus, config, seed).
    """
    if not corpus:
        raise InputError("pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    feature_dim = corpus[0][0].features.shape[0]
    params = CaptionerParams.random(
        vocab_size=len(vocab),
        feature_dim=feature_dim,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        rng=rng,
        scale=config.init_scale,
    )

    order = rng.permutation(len(corpus))
    n_val = max(1, int(len(corpus) * config.val_fraction)) if len(corpus) > 1 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
        val_idx = order

    feats_all = np.stack([obj.features for obj, _ in corpus])
    rows = [ids for _, ids in corpus]

    def eval_mean_nll(indices: Array) -> float:
        targets, mask = pad_rows([rows[i] for i in indices])
        cache = forward_teacher(params, feats_all[indices], targets, mask)
        return -float(cache.row_logprobs.mean())

    velocity = params.zero_grads()
    tensors = params.tensors()
    best_val = np.inf
    best_params = params.copy()
    best_epoch = -1
    history = []
    stale = 0
    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start : start + config.batch_size]
            targets, mask = pad_rows([rows[i] for i in batch])
            nll, grads = batch_mean_nll(params, feats_all[batch], targets, mask)
            if not np.isfinite(nll):
                raise TrainingError(f"pretraining diverged at epoch {epoch} (loss={nll})")
            for name in velocity:
                velocity[name] = config.momentum * velocity[name] - grads[name]
            numerics.ascent_step(tensors, velocity, config.learning_rate)
        val_nll = eval_mean_nll(val_idx)
        history.append({"epoch": epoch, "val_nll": val_nll})
        if val_nll < best_val - 1e-9:
            best_val = val_nll
            best_params = params.copy()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    best_params.frozen = frozenset(ENCODER_TENSORS)
    snapshot = FrozenSnapshot.capture(best_params)
    report = {
        "epochs_run": len(history),
        "best_epoch": best_epoch,
        "best_val_nll": best_val,
        "history": history,
        "train_size": int(len(train_idx)),
        "val_size": int(len(val_idx)),
    }
    return snapshot.thaw(), snapshot, report


def save_checkpoint(params: CaptionerParams, vocab: Vocabulary, path: str | Path) -> Path:
    """Write `<path>.json` (manifest) and `<path>.bin` (little-endian f64)."""
    path = Path(path)
    tensors = params.tensors()
    payload = b"".join(
        np.ascontiguousarray(tensors[name], dtype="<f8").tobytes() for name in TENSOR_NAMES
    )
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "vocab_size": params.vocab_size,
            "feature_dim": params.feature_dim,
            "embed_dim": params.embed_dim,
            "hidden_dim": params.hidden_dim,
        },
        "frozen": sorted(params.frozen),
        "vocab": list(vocab.words),
        "tensors": [
            {"name": name, "shape": list(tensors[name].shape)} for name in TENSOR_NAMES
        ],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(payload)
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[CaptionerParams, Vocabulary]:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not manifest_path.exists():
        raise ConfigurationError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError("not a refgame checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {manifest.get('version')}")
    payload = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ConfigurationError("checkpoint payload hash mismatch")
    dims = manifest["dims"]
    arrays = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += count * 8
    cell = CellParams(
        dims["embed_dim"],
        dims["hidden_dim"],
        *(arrays[name] for name in numerics.CELL_TENSOR_NAMES),
    )
    params = CaptionerParams(
        vocab_size=dims["vocab_size"],
        feature_dim=dims["feature_dim"],
        embed_dim=dims["embed_dim"],
        hidden_dim=dims["hidden_dim"],
        enc_w=arrays["enc_w"],
        enc_b=arrays["enc_b"],
        emb=arrays["emb"],
        cell=cell,
        out_w=arrays["out_w"],
        out_b=arrays["out_b"],
        frozen=frozenset(manifest["frozen"]),
    )
    vocab = Vocabulary(tuple(manifest["vocab"]))
    return params, vocab
