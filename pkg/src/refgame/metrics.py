"""Quantitative analyses over transcripts and parameter snapshots: accuracy
and utterance length by repetition (with seeded bootstrap intervals),
pairwise utterance overlap, likelihood-tracking curves, and the
catastrophic-forgetting evaluation. Everything here is a pure function of its
inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .agents import ListenerPolicy, ScriptedPartner, listener_choose
from .captioner import CaptionerParams, FrozenSnapshot, greedy_decode, utterance_logprob
from .errors import InputError
from .game import TranscriptRecord
from .world import DomainPool, ObjectSpec, Vocabulary, build_challenging_context, build_simple_context


def overlap(u1: Sequence[str], u2: Sequence[str]) -> float:
    """|set(u1) & set(u2)| / min(|set(u1)|, |set(u2)|) over content words.

    An inverse proxy for informativity: 1.0 when one description subsumes the
    other, 0.0 when they share no words.
    """
    s1 = {w for w in u1 if w != "<eos>"}
    s2 = {w for w in u2 if w != "<eos>"}
    if not s1 or not s2:
        raise InputError("overlap requires non-empty utterances")
    return len(s1 & s2) / min(len(s1), len(s2))


@dataclass(frozen=True)
class RepetitionSeries:
    """Per-repetition mean and bootstrap 95% interval across games."""

    repetitions: tuple[int, ...]
    means: tuple[float, ...]
    ci_low: tuple[float, ...]
    ci_high: tuple[float, ...]
    n_games: int

    def as_rows(self) -> list[dict]:
        return [
            {
                "repetition": r,
                "mean": m,
                "ci_low": lo,
                "ci_high": hi,
            }
            for r, m, lo, hi in zip(self.repetitions, self.means, self.ci_low, self.ci_high)
        ]


def bootstrap_interval(
    per_game: np.ndarray, resamples: int, seed, level: float = 0.95
) -> tuple[float, float]:
    """Percentile interval for the mean across games (seeded resampling)."""
    rng = np.random.default_rng(seed)
    n = len(per_game)
    draws = per_game[rng.integers(0, n, size=(resamples, n))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(draws, alpha)), float(np.quantile(draws, 1.0 - alpha))


def _series_from_games(
    games: Sequence[Sequence[TranscriptRecord]],
    statistic,
    resamples: int,
    seed,
) -> RepetitionSeries:
    if not games:
        raise InputError("no games supplied")
    reps = sorted({r.repetition_block for game in games for r in game})
    if reps != list(range(1, len(reps) + 1)):
        raise InputError("repetition blocks must be contiguous from 1")
    means, lows, highs = [], [], []
    for rep in reps:
        per_game = np.array(
            [
                np.mean([statistic(r) for r in game if r.repetition_block == rep])
                for game in games
            ]
        )
        means.append(float(per_game.mean()))
        if len(per_game) > 1:
            lo, hi = bootstrap_interval(per_game, resamples, [_seed_int(seed), rep])
        else:
            lo = hi = float(per_game.mean())
        lows.append(lo)
        highs.append(hi)
    return RepetitionSeries(
        repetitions=tuple(reps),
        means=tuple(means),
        ci_low=tuple(lows),
        ci_high=tuple(highs),
        n_games=len(games),
    )


def _seed_int(seed) -> int:
    if isinstance(seed, int):
        return seed
    return int(np.random.SeedSequence(seed).entropy)


def accuracy_by_repetition(
    games: Sequence[Sequence[TranscriptRecord]], resamples: int = 1000, seed: int = 0
) -> RepetitionSeries:
    """Mean correctness per repetition block; chance is 0.25 for 4-object
    contexts."""
    return _series_from_games(games, lambda r: float(r.correct), resamples, seed)


def length_by_repetition(
    games: Sequence[Sequence[TranscriptRecord]], resamples: int = 1000, seed: int = 0
) -> RepetitionSeries:
    """Mean content-token count per repetition block."""
    return _series_from_games(
        games, lambda r: float(len(r.utterance_tokens)), resamples, seed
    )


def likelihood_curves(
    snapshots: Sequence[CaptionerParams],
    targets: Sequence[ObjectSpec],
    initial_captions: dict[int, tuple[int, ...]],
    unseen: Sequence[tuple[ObjectSpec, tuple[int, ...]]],
    max_len: int = 12,
) -> dict[str, list[float]]:
    """Three likelihood curves over the course of adaptation.

    `snapshots[0]` must be the pre-game (frozen) parameters; entry t the
    parameters after trial t. Curves: mean log-likelihood of (a) the frozen
    model's captions for the adapting-context targets, (b) the frozen model's
    captions for unseen objects, and (c) the end-of-game greedy captions for
    the targets, evaluated retrospectively under every snapshot.
    """
    if not snapshots:
        raise InputError("likelihood curves require parameter snapshots")
    for obj in targets:
        if obj.object_id not in initial_captions:
            raise InputError(f"missing initial caption for target {obj.object_id}")
    final_params = snapshots[-1]
    final_captions = {
        obj.object_id: greedy_decode(final_params, obj.features, max_len) for obj in targets
    }
    curves = {"initial_targets": [], "unseen": [], "final_targets": []}
    for params in snapshots:
        curves["initial_targets"].append(
            float(
                np.mean(
                    [
                        utterance_logprob(params, o.features, initial_captions[o.object_id])
                        for o in targets
                    ]
                )
            )
        )
        curves["unseen"].append(
            float(np.mean([utterance_logprob(params, o.features, ids) for o, ids in unseen]))
        )
        curves["final_targets"].append(
            float(
                np.mean(
                    [
                        utterance_logprob(params, o.features, final_captions[o.object_id])
                        for o in targets
                    ]
                )
            )
        )
    return curves


@dataclass(frozen=True)
class HeldoutProbe:
    """One forgetting-evaluation item: a scripted utterance, its context, and
    the intended target."""

    utterance: tuple[int, ...]
    context: tuple[ObjectSpec, ...]
    target_id: int


def _nearest_ids(pool: DomainPool, anchor: ObjectSpec, exclude: set[int], k: int) -> list[int]:
    ranked = sorted(
        (float(((o.features - anchor.features) ** 2).sum()), o.object_id)
        for o in pool.objects
        if o.object_id != anchor.object_id and o.object_id not in exclude
    )
    return [obj_id for _, obj_id in ranked[:k]]


def build_heldout_probes(
    pool: DomainPool,
    vocab: Vocabulary,
    adapting_context_ids: Sequence[int],
    n_contexts: int,
    seed: int,
    labels=None,
    kind: str = "simple",
    repetition: int = 1,
) -> list[HeldoutProbe]:
    """Probes disjoint from the adapting context: each object of each held-out
    context serves once as target of its full scripted caption.

    `kind`: "simple" and "challenging" mirror the game context constructions;
    "nearby" anchors challenging-style contexts at the nearest non-adapting
    neighbors of the adapting context's members, which is where interference
    from adaptation concentrates. `repetition` picks the scripted reduction
    stage of the probe utterances; later stages have thinner margins.
    """
    partner = ScriptedPartner(vocab)
    adapting = set(adapting_context_ids)
    contexts: list[tuple[int, ...]] = []
    if kind == "nearby":
        rings = {
            m: _nearest_ids(pool, pool.by_id(m), adapting, 60) for m in adapting_context_ids
        }
        seen: set[tuple[int, ...]] = set()
        for rank in range(60):
            for member_ring in rings.values():
                if len(contexts) >= n_contexts:
                    break
                if rank >= len(member_ring):
                    continue
                anchor = pool.by_id(member_ring[rank])
                ids = (anchor.object_id, *_nearest_ids(pool, anchor, adapting, 3))
                if len(set(ids)) == 4 and ids not in seen:
                    seen.add(ids)
                    contexts.append(ids)
            if len(contexts) >= n_contexts:
                break
        if len(contexts) < n_contexts:
            raise InputError("could not assemble enough nearby probes")
    else:
        attempt = 0
        while len(contexts) < n_contexts:
            ctx_seed = [_seed_int(seed), 700 + attempt]
            if kind == "simple":
                context = build_simple_context(pool, ctx_seed)
            elif kind == "challenging":
                if labels is None:
                    raise InputError("challenging probes need the pool's cluster labels")
                context = build_challenging_context(pool, labels, ctx_seed)
            else:
                raise InputError(f"unknown context kind {kind!r}")
            attempt += 1
            if attempt > max(n_contexts * 50, 200):
                raise InputError("could not find enough disjoint held-out contexts")
            if set(context.object_ids) & adapting:
                continue
            contexts.append(context.object_ids)
    probes: list[HeldoutProbe] = []
    for ids in contexts:
        objs = tuple(pool.by_id(i) for i in ids)
        for target in objs:
            probes.append(
                HeldoutProbe(
                    utterance=partner.speak(target, objs, repetition=repetition),
                    context=objs,
                    target_id=target.object_id,
                )
            )
    return probes


def listener_accuracy(params: CaptionerParams, probes: Sequence[HeldoutProbe]) -> float:
    if not probes:
        raise InputError("no probes supplied")
    hits = 0
    policy = ListenerPolicy(params)
    for probe in probes:
        choice, _ = listener_choose(policy, probe.utterance, probe.context)
        hits += choice == probe.target_id
    return hits / len(probes)


def forgetting_eval(
    adapted: CaptionerParams,
    snapshot: FrozenSnapshot,
    probes: Sequence[HeldoutProbe],
    adapting_context_ids: Sequence[int],
) -> tuple[float, float]:
    """Held-out listener accuracy of the adapted vs the frozen parameters.

    The drop `baseline - adapted` measures interference from adaptation.
    """
    adapting = set(adapting_context_ids)
    for probe in probes:
        if {o.object_id for o in probe.context} & adapting:
            raise InputError("held-out probes overlap the adapting context")
    return listener_accuracy(adapted, probes), listener_accuracy(snapshot.params, probes)


def paired_bootstrap_pvalue(diffs: Sequence[float], resamples: int = 10000, seed: int = 0) -> float:
    """One-sided seeded bootstrap for mean(diffs) > 0: the fraction of
    resampled means that are <= 0 (a bootstrap sign test)."""
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size == 0:
        raise InputError("no paired differences supplied")
    rng = np.random.default_rng(seed)
    draws = diffs[rng.integers(0, diffs.size, size=(resamples, diffs.size))].mean(axis=1)
    return float(np.mean(draws <= 0.0))


def final_repetition_overlap(games: Sequence[Sequence[TranscriptRecord]]) -> float:
    """Mean pairwise overlap of the last repetition block's utterances,
    averaged within game first, then across games."""
    per_game = []
    for game in games:
        last = max(r.repetition_block for r in game)
        utts = [r.utterance_tokens for r in game if r.repetition_block == last]
        pairs = [
            overlap(utts[i], utts[j])
            for i in range(len(utts))
            for j in range(i + 1, len(utts))
        ]
        if pairs:
            per_game.append(float(np.mean(pairs)))
    if not per_game:
        raise InputError("no utterance pairs to compare")
    return float(np.mean(per_game))


def mean_length_by_repetition(games: Sequence[Sequence[TranscriptRecord]]) -> dict[int, float]:
    reps = sorted({r.repetition_block for game in games for r in game})
    out = {}
    for rep in reps:
        vals = [
            np.mean([len(r.utterance_tokens) for r in game if r.repetition_block == rep])
            for game in games
        ]
        out[rep] = float(np.mean(vals))
    return out


def series_to_tsv(series: RepetitionSeries, statistic_name: str) -> str:
    lines = [f"repetition\t{statistic_name}\tci_low\tci_high"]
    for row in series.as_rows():
        lines.append(
            f"{row['repetition']}\t{row['mean']:.6f}\t{row['ci_low']:.6f}\t{row['ci_high']:.6f}"
        )
    return "\n".join(lines) + "\n"
