"""Synthetic referent domain: attribute-typed objects, a caption grammar for
pretraining data, and context construction (k-means partition plus nearest
neighbors for challenging contexts, shape-diverse sampling for simple ones).

Objects carry four attribute slots (size, color, pattern, shape) encoded as
a concatenated one-hot feature vector. The caption grammar realizes
`the? size? color? pattern? shape`, with modifiers included independently per
slot mention probability; the pretraining corpus deliberately under-mentions
size and pattern words so that challenging contexts (whose members differ
chiefly in those slots) start out hard for the pretrained model.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

BOS_WORD, EOS_WORD, UNK_WORD = "<bos>", "<eos>", "<unk>"
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2

SLOT_NAMES = ("size", "color", "pattern", "shape")


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute slots plus per-slot caption mention probabilities.

    `mention_probs` has keys det/size/color/pattern; the shape slot (the head
    noun) is always mentioned.
    """

    sizes: tuple[str, ...] = ("small", "medium", "big")
    colors: tuple[str, ...] = (
        "red",
        "blue",
        "green",
        "yellow",
        "purple",
        "orange",
        "black",
        "white",
    )
    patterns: tuple[str, ...] = ("striped", "spotted", "plain", "checkered")
    shapes: tuple[str, ...] = (
        "square",
        "circle",
        "triangle",
        "star",
        "hexagon",
        "diamond",
        "oval",
        "cross",
    )
    mention_probs: dict[str, float] = field(
        default_factory=lambda: {"det": 0.8, "size": 0.15, "color": 0.75, "pattern": 0.15}
    )

    def __post_init__(self) -> None:
        words: list[str] = []
        for values in (self.sizes, self.colors, self.patterns, self.shapes):
            if not values:
                raise InputError("every attribute slot needs at least one value")
            words.extend(values)
        if len(set(words)) != len(words):
            raise InputError("attribute value lists must be disjoint")
        for key in ("det", "size", "color", "pattern"):
            prob = self.mention_probs.get(key)
            if prob is None or not 0.0 <= prob <= 1.0:
                raise InputError(f"mention probability for {key} must be in [0, 1]")
        if self.mention_probs.get("shape", 1.0) != 1.0:
            raise InputError("the head noun (shape) is always mentioned")

    def slot_values(self, slot: str) -> tuple[str, ...]:
        return {
            "size": self.sizes,
            "color": self.colors,
            "pattern": self.patterns,
            "shape": self.shapes,
        }[slot]

    @property
    def feature_dim(self) -> int:
        return len(self.sizes) + len(self.colors) + len(self.patterns) + len(self.shapes)

    @property
    def combination_count(self) -> int:
        return len(self.sizes) * len(self.colors) * len(self.patterns) * len(self.shapes)

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "colors": list(self.colors),
            "patterns": list(self.patterns),
            "shapes": list(self.shapes),
            "mention_probs": dict(self.mention_probs),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttributeSchema":
        return cls(
            sizes=tuple(data["sizes"]),
            colors=tuple(data["colors"]),
            patterns=tuple(data["patterns"]),
            shapes=tuple(data["shapes"]),
            mention_probs=dict(data["mention_probs"]),
        )


DEFAULT_SCHEMA = AttributeSchema()

FUNCTION_WORDS = ("the", "a", "with")


@dataclass(frozen=True)
class Vocabulary:
    """Closed token inventory: specials + function words + attribute words."""

    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.words[:3] != (BOS_WORD, EOS_WORD, UNK_WORD):
            raise InputError("vocabulary must start with <bos>, <eos>, <unk>")
        if len(set(self.words)) != len(self.words):
            raise InputError("vocabulary words must be unique")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def from_schema(cls, schema: AttributeSchema) -> "Vocabulary":
        words = (
            (BOS_WORD, EOS_WORD, UNK_WORD)
            + FUNCTION_WORDS
            + schema.sizes
            + schema.colors
            + schema.patterns
            + schema.shapes
        )
        return cls(words)

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def encode(self, words: Sequence[str]) -> tuple[int, ...]:
        return tuple(self._index.get(w, UNK_ID) for w in words)

    def to_utterance(self, words: Sequence[str]) -> tuple[int, ...]:
        """Encode content words and terminate with EOS."""
        return self.encode(words) + (EOS_ID,)

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        """Content words only; BOS/EOS are dropped."""
        return tuple(self.words[i] for i in ids if i not in (BOS_ID, EOS_ID))

    def tokenize_text(self, text: str) -> tuple[tuple[int, ...], tuple[str, ...]]:
        """Lowercase whitespace tokenization against the closed vocabulary.

        Returns (EOS-terminated ids, words that fell back to <unk>).
        """
        raw = [w for w in text.lower().split() if w]
        unknown = tuple(w for w in raw if w not in self._index)
        return self.to_utterance(raw), unknown


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    """One referent: an id, one value per slot, and its one-hot features."""

    object_id: int
    size: str
    color: str
    pattern: str
    shape: str
    features: np.ndarray

    def slot_value(self, slot: str) -> str:
        return getattr(self, slot)

    def attribute_words(self) -> frozenset[str]:
        return frozenset((self.size, self.color, self.pattern, self.shape))

    def to_dict(self) -> dict:
        return {
            "id": self.object_id,
            "size": self.size,
            "color": self.color,
            "pattern": self.pattern,
            "shape": self.shape,
        }


def encode_features(schema: AttributeSchema, size: str, color: str, pattern: str, shape: str) -> np.ndarray:
    parts = []
    for slot, value in zip(SLOT_NAMES, (size, color, pattern, shape)):
        values = schema.slot_values(slot)
        block = np.zeros(len(values))
        block[values.index(value)] = 1.0
        parts.append(block)
    out = np.concatenate(parts)
    out.flags.writeable = False
    return out


def make_object(schema: AttributeSchema, object_id: int, combo: tuple[str, str, str, str]) -> ObjectSpec:
    size, color, pattern, shape = combo
    return ObjectSpec(
        object_id=object_id,
        size=size,
        color=color,
        pattern=pattern,
        shape=shape,
        features=encode_features(schema, size, color, pattern, shape),
    )


@dataclass(frozen=True, eq=False)
class DomainPool:
    """The full referent domain the engine samples from."""

    schema: AttributeSchema
    objects: tuple[ObjectSpec, ...]
    seed: int

    def __post_init__(self) -> None:
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise InputError("object ids must be unique")
        object.__setattr__(self, "_by_id", {o.object_id: o for o in self.objects})
        features = np.stack([o.features for o in self.objects]) if self.objects else np.zeros((0, 0))
        features.flags.writeable = False
        object.__setattr__(self, "_features", features)

    def __len__(self) -> int:
        return len(self.objects)

    def by_id(self, object_id: int) -> ObjectSpec:
        return self._by_id[object_id]

    @property
    def features(self) -> np.ndarray:
        return self._features


def generate_domain(schema: AttributeSchema, n: int, seed: int) -> DomainPool:
    """n distinct attribute profiles drawn uniformly without replacement."""
    if n < 1:
        raise InputError("domain size must be at least 1")
    combos = list(itertools.product(schema.sizes, schema.colors, schema.patterns, schema.shapes))
    if n > len(combos):
        raise InputError(f"requested {n} objects but only {len(combos)} distinct profiles exist")
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(combos))[:n]
    objects = tuple(make_object(schema, i, combos[idx]) for i, idx in enumerate(chosen))
    return DomainPool(schema=schema, objects=objects, seed=seed)


def realize_captions(
    obj: ObjectSpec, schema: AttributeSchema, count: int, seed
) -> list[tuple[str, ...]]:
    """Caption realizations `the? size? color? pattern? shape` for one object.

    Modifiers are included independently per mention probability; the shape
    word is always present.
    """
    if count < 0:
        raise InputError("caption count must be non-negative")
    rng = np.random.default_rng(seed)
    probs = schema.mention_probs
    captions = []
    for _ in range(count):
        words = []
        if rng.random() < probs["det"]:
            words.append("the")
        if rng.random() < probs["size"]:
            words.append(obj.size)
        if rng.random() < probs["color"]:
            words.append(obj.color)
        if rng.random() < probs["pattern"]:
            words.append(obj.pattern)
        words.append(obj.shape)
        captions.append(tuple(words))
    return captions


def build_pretrain_corpus(
    pool: DomainPool, vocab: Vocabulary, captions_per_object: int, seed: int
) -> list[tuple[ObjectSpec, tuple[int, ...]]]:
    """(object, EOS-terminated caption ids) pairs over the whole pool."""
    corpus = []
    for obj in pool.objects:
        for caption in realize_captions(obj, pool.schema, captions_per_object, [seed, obj.object_id]):
            corpus.append((obj, vocab.to_utterance(caption)))
    return corpus


def kmeans_partition(pool: DomainPool, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding over the feature vectors.

    Ties in the assignment step break toward the lower centroid index. An
    emptied cluster is re-seeded at the point farthest from its centroid.
    """
    n = len(pool)
    if k < 1:
        raise InputError("k must be at least 1")
    if k > n:
        raise InputError(f"k={k} exceeds pool size {n}")
    x = pool.features
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                per_point = dists[np.arange(n), labels]
                centroids[j] = x[int(per_point.argmax())]
    return labels


def default_cluster_count(pool_size: int) -> int:
    """Pool/10 groups, mirroring the 100-group partition at full scale."""
    return max(1, pool_size // 10)


@dataclass(frozen=True)
class Context:
    """Four distinct referents shown together."""

    object_ids: tuple[int, int, int, int]
    kind: str  # "challenging" | "simple"

    def __post_init__(self) -> None:
        if len(self.object_ids) != 4 or len(set(self.object_ids)) != 4:
            raise InputError("a context holds exactly 4 distinct objects")
        if self.kind not in ("challenging", "simple"):
            raise InputError(f"unknown context kind {self.kind!r}")


def build_challenging_context(pool: DomainPool, labels: np.ndarray, seed: int) -> Context:
    """Sample one object from a cluster and add its 3 nearest neighbors in
    feature space (distance ties break toward the lower object id)."""
    if len(pool) < 4:
        raise InputError("need at least 4 objects to build a context")
    rng = np.random.default_rng(seed)
    cluster_ids = sorted(set(labels.tolist()))
    cluster = cluster_ids[int(rng.integers(len(cluster_ids)))]
    members = [o.object_id for o, lab in zip(pool.objects, labels) if lab == cluster]
    anchor_id = members[int(rng.integers(len(members)))]
    anchor = pool.by_id(anchor_id)
    ranked = sorted(
        (
            (float(((o.features - anchor.features) ** 2).sum()), o.object_id)
            for o in pool.objects
            if o.object_id != anchor_id
        ),
    )
    neighbors = [obj_id for _, obj_id in ranked[:3]]
    return Context(object_ids=(anchor_id, *neighbors), kind="challenging")


def build_simple_context(pool: DomainPool, seed: int) -> Context:
    """Four objects with pairwise-distinct shape values."""
    groups: dict[str, list[int]] = {}
    for o in pool.objects:
        groups.setdefault(o.shape, []).append(o.object_id)
    if len(groups) < 4:
        raise InputError("pool must contain at least 4 distinct shapes")
    rng = np.random.default_rng(seed)
    shapes = sorted(groups)
    chosen = rng.choice(len(shapes), size=4, replace=False)
    ids = []
    for idx in chosen:
        members = sorted(groups[shapes[int(idx)]])
        ids.append(members[int(rng.integers(len(members)))])
    return Context(object_ids=tuple(ids), kind="simple")


def slot_overlap(a: ObjectSpec, b: ObjectSpec) -> int:
    """Number of attribute slots on which two objects agree (0..4)."""
    return sum(a.slot_value(s) == b.slot_value(s) for s in SLOT_NAMES)


def pool_to_lines(pool: DomainPool) -> list[str]:
    """Line-delimited dump, one object per line."""
    return [json.dumps(o.to_dict(), separators=(",", ":")) for o in pool.objects]


def contexts_to_lines(contexts: Iterable[Context]) -> list[str]:
    return [
        json.dumps({"object_ids": list(c.object_ids), "kind": c.kind}, separators=(",", ":"))
        for c in contexts
    ]
