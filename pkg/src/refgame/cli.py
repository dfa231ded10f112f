"""Single command-line entry point: pretrain, gradcheck, selfplay, replay,
ablate, eval-forgetting, metrics, serve, and play (a scripted thin client for
a running server).

Every run writes a resolved-config file with all effective values into its
output directory; existing artifact paths are never silently overwritten
(a numeric suffix is appended instead).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import benchmarks
from .adaptation import AdaptationConfig, build_map_cache
from .agents import DecodeConfig, RerankConfig, ScriptedPartner
from .captioner import (
    CaptionerParams,
    FrozenSnapshot,
    PretrainConfig,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    utterance_logprob,
    utterance_logprob_and_grad,
)
from .errors import InputError, RefgameError
from .game import (
    ROLE_AGENT_LISTENER,
    ROLE_AGENT_SPEAKER,
    SelfplayConfig,
    WorldBundle,
    read_transcript,
    replay,
    run_selfplay,
    write_transcript,
)
from .metrics import (
    accuracy_by_repetition,
    build_heldout_probes,
    forgetting_eval,
    length_by_repetition,
    paired_bootstrap_pvalue,
    series_to_tsv,
)
from .numerics import (
    CellParams,
    cell_backward,
    cell_step,
    finite_difference,
    max_relative_error,
)
from .world import AttributeSchema, Vocabulary, build_pretrain_corpus, generate_domain

GRADCHECK_TOLERANCE = 1e-4


def unique_path(path: Path) -> Path:
    """Never overwrite: append -1, -2, ... when the path exists."""
    if not path.exists():
        return path
    stem, suffix = path.stem, path.suffix
    for i in range(1, 10000):
        candidate = path.with_name(f"{stem}-{i}{suffix}")
        if not candidate.exists():
            return candidate
    raise InputError(f"could not find a free name for {path}")


def write_resolved_config(out_dir: Path, subcommand: str, payload: dict) -> Path:
    path = unique_path(out_dir / f"resolved-config-{subcommand}.json")
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")
    return path


def world_payload(bundle: WorldBundle, profile_name: str, adaptation: AdaptationConfig) -> dict:
    return {
        "world": {
            "schema": bundle.schema.to_dict(),
            "pool_n": len(bundle.pool),
            "pool_seed": bundle.pool.seed,
        },
        "adaptation": adaptation.to_dict(),
        "profile": profile_name,
    }


def load_world(path: Path) -> tuple[WorldBundle, AdaptationConfig]:
    data = json.loads(path.read_text())
    world = data["world"]
    schema = AttributeSchema.from_dict(world["schema"])
    bundle = WorldBundle.build(schema=schema, pool_n=world["pool_n"], pool_seed=world["pool_seed"])
    adaptation = AdaptationConfig.from_dict(data.get("adaptation", {}))
    return bundle, adaptation


def load_engine_inputs(checkpoint: str, world: str | None):
    ckpt_path = Path(checkpoint)
    if ckpt_path.suffix == ".json":
        ckpt_path = ckpt_path.with_suffix("")
    world_path = Path(world) if world else ckpt_path.parent / "world.json"
    if not world_path.exists():
        raise InputError(f"world manifest not found: {world_path}")
    params, vocab = load_checkpoint(ckpt_path)
    bundle, adaptation = load_world(world_path)
    if tuple(vocab.words) != tuple(bundle.vocab.words):
        raise InputError("checkpoint vocabulary does not match the world manifest")
    snapshot = FrozenSnapshot.capture(params)
    return snapshot, bundle, adaptation, ckpt_path, world_path


def apply_adaptation_flags(config: AdaptationConfig, args) -> AdaptationConfig:
    overrides = {}
    if getattr(args, "no_pragmatics", False):
        overrides["lambda_contrastive"] = 0.0
    if getattr(args, "no_rehearsal", False):
        overrides["lambda_rehearsal"] = 0.0
    if getattr(args, "no_kl", False):
        overrides["lambda_kl"] = 0.0
    if getattr(args, "no_augment", False):
        overrides["augment_enabled"] = False
    for flag, name in (
        ("lambda_utterance", "lambda_utterance"),
        ("lambda_contrastive", "lambda_contrastive"),
        ("lambda_kl", "lambda_kl"),
        ("lambda_rehearsal", "lambda_rehearsal"),
        ("learning_rate", "learning_rate"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    return replace(config, **overrides) if overrides else config


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = benchmarks.PROFILES[args.profile]()
    pre = profile.pretrain
    for flag, name in (
        ("epochs", "epochs"),
        ("learning_rate", "learning_rate"),
        ("embed_dim", "embed_dim"),
        ("hidden_dim", "hidden_dim"),
        ("init_scale", "init_scale"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            pre = replace(pre, **{name: value})
    bundle = WorldBundle.build(schema=profile.schema, pool_n=args.pool_n, pool_seed=args.pool_seed)
    corpus = build_pretrain_corpus(
        bundle.pool,
        bundle.vocab,
        args.captions_per_object or profile.captions_per_object,
        profile.corpus_seed,
    )
    started = time.time()
    _, snapshot, report = pretrain(corpus, bundle.vocab, pre, args.seed)
    ckpt = unique_path(out / "checkpoint.json").with_suffix("")
    save_checkpoint(snapshot.params, bundle.vocab, ckpt)
    world_path = unique_path(out / "world.json")
    world_path.write_text(
        json.dumps(world_payload(bundle, profile.name, profile.adaptation), indent=2) + "\n"
    )
    report_path = unique_path(out / "pretrain-report.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    write_resolved_config(
        out,
        "pretrain",
        {
            "profile": args.profile,
            "pretrain": pre.to_dict(),
            "pool_n": args.pool_n,
            "pool_seed": args.pool_seed,
            "captions_per_object": args.captions_per_object or profile.captions_per_object,
            "seed": args.seed,
            "checkpoint": str(ckpt.with_suffix(".json")),
            "world": str(world_path),
            "wall_seconds": round(time.time() - started, 2),
        },
    )
    print(f"checkpoint: {ckpt.with_suffix('.json')}")
    print(f"world: {world_path}")
    print(f"best validation NLL: {report['best_val_nll']:.4f} (epoch {report['best_epoch']})")
    return 0


def _gradcheck_cell(rng: np.random.Generator, hidden: int, embed: int, eps: float) -> float:
    cell = CellParams.random(embed, hidden, rng, 0.4)
    x = rng.standard_normal(embed)
    h = rng.standard_normal(hidden)
    probe = rng.standard_normal(hidden)

    def value() -> float:
        h_next, _ = cell_step(cell, x, h)
        return float(h_next @ probe)

    _, cache = cell_step(cell, x, h)
    grads, dx, dh = cell_backward(cell, cache, probe)
    worst = 0.0
    for name, grad in grads.items():
        worst = max(worst, max_relative_error(grad, finite_difference(value, getattr(cell, name), eps)))
    worst = max(worst, max_relative_error(dx, finite_difference(value, x, eps)))
    worst = max(worst, max_relative_error(dh, finite_difference(value, h, eps)))
    return worst


def _random_model(rng: np.random.Generator, hidden: int, embed: int, vocab_size: int):
    schema = AttributeSchema()
    pool = generate_domain(schema, 8, int(rng.integers(1 << 30)))
    params = CaptionerParams.random(vocab_size, schema.feature_dim, embed, hidden, rng, 0.3)
    obj = pool.objects[0]
    length = int(rng.integers(2, 5))
    tokens = tuple(int(t) for t in rng.integers(2, vocab_size, size=length)) + (1,)
    return schema, pool, params, obj, tokens


def _gradcheck_utterance(rng, hidden, embed, vocab_size, eps) -> float:
    _, _, params, obj, tokens = _random_model(rng, hidden, embed, vocab_size)
    _, grads = utterance_logprob_and_grad(params, obj.features, tokens)
    worst = 0.0
    for name, arr in params.tensors().items():
        fd = finite_difference(lambda: utterance_logprob(params, obj.features, tokens), arr, eps)
        worst = max(worst, max_relative_error(grads[name], fd))
    return worst


def _gradcheck_contrastive_kl(rng, hidden, embed, vocab_size, eps) -> float:
    from .adaptation import contrastive_loss, kl_regularizer, build_map_cache as build_cache

    _, pool, params, obj, tokens = _random_model(rng, hidden, embed, vocab_size)
    worst = 0.0
    context = list(pool.objects[:4])
    _, cgrads = contrastive_loss(params, tokens, obj, context)
    for name, arr in params.tensors().items():
        fd = finite_difference(
            lambda: contrastive_loss(params, tokens, obj, context)[0], arr, eps
        )
        worst = max(worst, max_relative_error(cgrads[name], fd))

    snapshot = FrozenSnapshot.capture(params)
    cache = build_cache(snapshot, pool, max_len=6)
    live = params.copy()
    for arr in live.tensors().values():
        arr += rng.standard_normal(arr.shape) * 0.05
    sample = list(pool.objects[:5])
    _, kgrads = kl_regularizer(live, snapshot, cache, sample)
    for name, arr in live.tensors().items():
        fd = finite_difference(
            lambda: kl_regularizer(live, snapshot, cache, sample)[0], arr, eps
        )
        worst = max(worst, max_relative_error(kgrads[name], fd))
    return worst


def run_gradcheck_suite(hidden: int, embed: int, vocab: int, seeds: int, eps: float) -> dict:
    """Cell Jacobians and utterance-likelihood gradients at `seeds` seeds each
    (every trainable tensor), plus contrastive/regularizer gradients at a
    twentieth of the seeds."""
    started = time.time()
    worst_cell = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 1])
        worst_cell = max(worst_cell, _gradcheck_cell(rng, hidden, embed, eps))
    worst_utt = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 2])
        worst_utt = max(worst_utt, _gradcheck_utterance(rng, hidden, embed, vocab, eps))
    worst_heavy = 0.0
    heavy_seeds = max(1, seeds // 20)
    for seed in range(heavy_seeds):
        rng = np.random.default_rng([seed, 3])
        worst_heavy = max(worst_heavy, _gradcheck_contrastive_kl(rng, hidden, embed, vocab, eps))
    worst = max(worst_cell, worst_utt, worst_heavy)
    return {
        "cell_max_rel_err": worst_cell,
        "utterance_max_rel_err": worst_utt,
        "contrastive_kl_max_rel_err": worst_heavy,
        "max_rel_err": worst,
        "seeds": seeds,
        "heavy_seeds": heavy_seeds,
        "tolerance": GRADCHECK_TOLERANCE,
        "runtime_seconds": time.time() - started,
        "pass": worst <= GRADCHECK_TOLERANCE,
    }


def cmd_gradcheck(args) -> int:
    report = run_gradcheck_suite(args.hidden, args.embed, args.vocab, args.seeds, args.eps)
    print(f"cell Jacobian        max rel err: {report['cell_max_rel_err']:.3e}  ({args.seeds} seeds)")
    print(f"utterance gradients  max rel err: {report['utterance_max_rel_err']:.3e}  ({args.seeds} seeds)")
    print(
        f"contrastive+KL grads max rel err: {report['contrastive_kl_max_rel_err']:.3e}  "
        f"({report['heavy_seeds']} seeds)"
    )
    print(f"tolerance: {GRADCHECK_TOLERANCE:.0e}   runtime: {report['runtime_seconds']:.1f}s")
    print("PASS" if report["pass"] else "FAIL")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        unique_path(out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
        write_resolved_config(out, "gradcheck", vars(args) | {"tolerance": GRADCHECK_TOLERANCE})
    return 0 if report["pass"] else 1


def cmd_selfplay(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot, bundle, adaptation, ckpt_path, world_path = load_engine_inputs(
        args.checkpoint, args.world
    )
    adaptation = apply_adaptation_flags(adaptation, args)
    rerank = RerankConfig(length_penalty=args.beta_w)
    map_cache = build_map_cache(snapshot, bundle.pool, adaptation.max_decode_len)
    games = []
    paths = []
    for i in range(args.games):
        seed = args.seed + i
        cfg = SelfplayConfig(
            seed=seed,
            role=args.role,
            context_kind=args.context_kind,
            pool_n=len(bundle.pool),
            pool_seed=bundle.pool.seed,
            adaptation=replace(adaptation),
            rerank=rerank,
            snapshots_enabled=args.snapshots,
            force_success_feedback=args.force_success,
        )
        header, records, _ = run_selfplay(snapshot, bundle, cfg, map_cache=map_cache)
        path = unique_path(out / f"transcript-{cfg.role}-{seed}.jsonl")
        write_transcript(path, header, records)
        paths.append(str(path))
        games.append(records)
    acc = accuracy_by_repetition(games, seed=args.seed)
    length = length_by_repetition(games, seed=args.seed)
    (out / "accuracy-by-repetition.tsv").write_text(series_to_tsv(acc, "accuracy"))
    (out / "length-by-repetition.tsv").write_text(series_to_tsv(length, "mean_content_tokens"))
    write_resolved_config(
        out,
        "selfplay",
        {
            "checkpoint": str(ckpt_path),
            "world": str(world_path),
            "games": args.games,
            "seed": args.seed,
            "role": args.role,
            "context_kind": args.context_kind,
            "adaptation": adaptation.to_dict(),
            "beta_w": args.beta_w,
            "force_success": args.force_success,
            "snapshots": args.snapshots,
            "transcripts": paths,
        },
    )
    print(f"wrote {len(paths)} transcripts to {out}")
    for row in acc.as_rows():
        print(
            f"repetition {row['repetition']}: accuracy {row['mean']:.3f} "
            f"[{row['ci_low']:.3f}, {row['ci_high']:.3f}]"
        )
    return 0


VARIANTS = {
    "full": {},
    "no-pragmatics": {"lambda_contrastive": 0.0},
    "no-rehearsal": {"lambda_rehearsal": 0.0},
    "no-kl": {"lambda_kl": 0.0},
}


def _collect_transcripts(args) -> list[Path]:
    paths = []
    for entry in args.transcripts:
        path = Path(entry)
        if path.is_dir():
            paths.extend(sorted(path.glob("transcript-*.jsonl")))
        else:
            paths.append(path)
    if not paths:
        raise InputError("no transcripts found")
    return paths


def cmd_replay(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot, bundle, _, ckpt_path, _ = load_engine_inputs(args.checkpoint, args.world)
    paths = _collect_transcripts(args)
    variants = [v for v in VARIANTS if getattr(args, v.replace("-", "_"), False)]
    if getattr(args, "full", False) and "full" not in variants:
        variants.insert(0, "full")
    if not variants:
        variants = ["full"]
    include_frozen = getattr(args, "frozen", False)
    rows = []
    for variant in variants + (["frozen"] if include_frozen else []):
        posts, accs = [], []
        for path in paths:
            header, records = read_transcript(path)
            if variant == "frozen":
                result = replay(header, records, snapshot, adapt=False)
            else:
                result = replay(header, records, snapshot, overrides=VARIANTS[variant] or None)
            posts.append(result.mean_target_posterior)
            accs.append(result.accuracy)
        rows.append(
            {
                "variant": variant,
                "mean_target_posterior": float(np.mean(posts)),
                "accuracy": float(np.mean(accs)),
                "games": len(paths),
            }
        )
    table = out / "variant-metrics.tsv"
    lines = ["variant\tmean_target_posterior\taccuracy\tgames"]
    for row in rows:
        lines.append(
            f"{row['variant']}\t{row['mean_target_posterior']:.6f}\t{row['accuracy']:.6f}\t{row['games']}"
        )
        print(lines[-1].replace("\t", "  "))
    unique_path(table).write_text("\n".join(lines) + "\n")
    write_resolved_config(
        out,
        "replay",
        {
            "checkpoint": str(ckpt_path),
            "transcripts": [str(p) for p in paths],
            "variants": variants + (["frozen"] if include_frozen else []),
        },
    )
    return 0


def cmd_eval_forgetting(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot, bundle, adaptation, ckpt_path, _ = load_engine_inputs(args.checkpoint, args.world)
    map_cache = build_map_cache(snapshot, bundle.pool, adaptation.max_decode_len)
    drops_kl, drops_nokl = [], []
    for i in range(args.games):
        seed = args.seed + i
        cfg = SelfplayConfig(
            seed=seed,
            role=ROLE_AGENT_LISTENER,
            context_kind=args.context_kind,
            pool_n=len(bundle.pool),
            pool_seed=bundle.pool.seed,
            adaptation=replace(adaptation),
        )
        header, records, session = run_selfplay(snapshot, bundle, cfg, map_cache=map_cache)
        probes = build_heldout_probes(
            bundle.pool,
            bundle.vocab,
            session.context.object_ids,
            n_contexts=args.probe_contexts,
            seed=seed,
            labels=bundle.labels,
            kind=args.probe_kind,
        )
        adapted_acc, baseline_acc = forgetting_eval(
            session.params, snapshot, probes, session.context.object_ids
        )
        no_kl = replay(header, records, snapshot, overrides={"lambda_kl": 0.0})
        nokl_acc, _ = forgetting_eval(
            no_kl.session.params, snapshot, probes, session.context.object_ids
        )
        drops_kl.append(baseline_acc - adapted_acc)
        drops_nokl.append(baseline_acc - nokl_acc)
    diffs = [n - k for k, n in zip(drops_kl, drops_nokl)]
    pvalue = paired_bootstrap_pvalue(diffs, seed=args.seed)
    lines = ["game_seed\tdrop_with_kl\tdrop_without_kl"]
    for i, (k, n) in enumerate(zip(drops_kl, drops_nokl)):
        lines.append(f"{args.seed + i}\t{k:.6f}\t{n:.6f}")
    unique_path(out / "forgetting-drops.tsv").write_text("\n".join(lines) + "\n")
    summary = {
        "mean_drop_with_kl": float(np.mean(drops_kl)),
        "mean_drop_without_kl": float(np.mean(drops_nokl)),
        "mean_paired_difference": float(np.mean(diffs)),
        "bootstrap_pvalue": pvalue,
        "games": args.games,
    }
    unique_path(out / "forgetting-summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_resolved_config(out, "eval-forgetting", vars(args) | {"checkpoint": str(ckpt_path)})
    print(json.dumps(summary, indent=2))
    return 0


def cmd_metrics(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _collect_transcripts(args)
    games = [read_transcript(p)[1] for p in paths]
    acc = accuracy_by_repetition(games, seed=args.seed)
    length = length_by_repetition(games, seed=args.seed)
    unique_path(out / "accuracy-by-repetition.tsv").write_text(series_to_tsv(acc, "accuracy"))
    unique_path(out / "length-by-repetition.tsv").write_text(
        series_to_tsv(length, "mean_content_tokens")
    )
    report = {
        "games": len(games),
        "accuracy": acc.as_rows(),
        "length": length.as_rows(),
        "chance_level": 0.25,
    }
    unique_path(out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    write_resolved_config(out, "metrics", {"transcripts": [str(p) for p in paths]})
    for row in acc.as_rows():
        print(f"repetition {row['repetition']}: accuracy {row['mean']:.3f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceSettings, create_app

    checkpoint = args.checkpoint or os.environ.get("REFGAME_CHECKPOINT")
    if not checkpoint:
        print("a checkpoint is required (--checkpoint or REFGAME_CHECKPOINT)", file=sys.stderr)
        return 2
    config = args.config or os.environ.get("REFGAME_CONFIG")
    data_dir = args.data_dir or os.environ.get("REFGAME_DATA_DIR", "refgame-data")
    seed = args.seed if args.seed is not None else int(os.environ.get("REFGAME_SEED", "0"))
    port = args.port or int(os.environ.get("REFGAME_PORT", "8000"))
    ckpt_path = Path(checkpoint)
    if ckpt_path.suffix == ".json":
        ckpt_path = ckpt_path.with_suffix("")
    if config is None:
        sibling = ckpt_path.parent / "world.json"
        config = str(sibling) if sibling.exists() else None
    settings = ServiceSettings.from_config_file(
        str(ckpt_path), config, data_dir=data_dir, seed=seed
    )
    app = create_app(settings)
    uvicorn.run(app, host=args.host, port=port, log_level="info")
    return 0


def cmd_play(args) -> int:
    """Scripted thin client: plays a full game against a live server over the
    HTTP move mirror."""
    import httpx

    base = args.url.rstrip("/")
    with httpx.Client(base_url=base, timeout=30.0) as client:
        created = client.post(
            "/sessions",
            json={"role": args.role, "seed": args.seed, "context_kind": args.context_kind},
        )
        created.raise_for_status()
        payload = created.json()
        session_id = payload["session_id"]
        state = payload["state"]
        rng = np.random.default_rng(args.seed)
        print(f"session {session_id}")
        while True:
            if state["type"] == "gameOver":
                print(
                    f"game over: accuracy {state['accuracy']:.3f}, "
                    f"mean length {state['mean_content_length']:.2f}"
                )
                return 0
            objects = {o["id"]: o for o in state["context"]}
            if state["awaiting"] == "utterance":
                target = objects[state["target_id"]]
                words = ["the", target["size"], target["color"], target["pattern"], target["shape"]]
                drop = max(0, min(state["repetition_block"] - 1, 3))
                move = {"type": "utterance", "text": " ".join(words[drop:])}
            else:
                tokens = set(state["agent_utterance"] or [])
                consistent = [
                    oid
                    for oid, o in objects.items()
                    if tokens & {o["size"], o["color"], o["pattern"], o["shape"]}
                    <= {o["size"], o["color"], o["pattern"], o["shape"]}
                    and all(
                        t in (o["size"], o["color"], o["pattern"], o["shape"], "the", "a", "with")
                        for t in tokens
                    )
                ]
                pick = consistent[0] if len(consistent) == 1 else int(rng.choice(list(objects)))
                move = {"type": "selection", "object_id": pick}
            result = client.post(f"/sessions/{session_id}/move", json=move)
            result.raise_for_status()
            frames = result.json()
            state = frames[-1]
            feedback = frames[0]
            if feedback.get("type") == "feedback":
                mark = "+" if feedback["correct"] else "-"
                print(
                    f"trial {feedback['trial_index']:2d} [{mark}] "
                    f"{' '.join(feedback['utterance_tokens'])}"
                )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refgame", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="pretrain a captioner and write a checkpoint")
    pre.add_argument("--out", default="runs/pretrain")
    pre.add_argument("--profile", choices=sorted(benchmarks.PROFILES), default="listener")
    pre.add_argument("--seed", type=int, default=7)
    pre.add_argument("--pool-n", type=int, default=200)
    pre.add_argument("--pool-seed", type=int, default=1000)
    pre.add_argument("--captions-per-object", type=int, default=None)
    pre.add_argument("--epochs", type=int, default=None)
    pre.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    pre.add_argument("--embed-dim", type=int, default=None, dest="embed_dim")
    pre.add_argument("--hidden-dim", type=int, default=None, dest="hidden_dim")
    pre.add_argument("--init-scale", type=float, default=None, dest="init_scale")
    pre.set_defaults(func=cmd_pretrain)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    grad.add_argument("--hidden", type=int, default=8)
    grad.add_argument("--embed", type=int, default=6)
    grad.add_argument("--vocab", type=int, default=12)
    grad.add_argument("--seeds", type=int, default=100)
    grad.add_argument("--eps", type=float, default=1e-5)
    grad.add_argument("--out", default=None)
    grad.set_defaults(func=cmd_gradcheck)

    play_common = argparse.ArgumentParser(add_help=False)
    play_common.add_argument("--checkpoint", required=True)
    play_common.add_argument("--world", default=None)

    self_p = sub.add_parser("selfplay", parents=[play_common], help="scripted-partner games")
    self_p.add_argument("--out", default="runs/selfplay")
    self_p.add_argument("--games", type=int, default=1)
    self_p.add_argument("--seed", type=int, default=0)
    self_p.add_argument("--role", choices=[ROLE_AGENT_LISTENER, ROLE_AGENT_SPEAKER], default=ROLE_AGENT_LISTENER)
    self_p.add_argument("--context-kind", choices=["challenging", "simple"], default="challenging")
    self_p.add_argument("--no-pragmatics", action="store_true")
    self_p.add_argument("--no-rehearsal", action="store_true")
    self_p.add_argument("--no-kl", action="store_true")
    self_p.add_argument("--no-augment", action="store_true")
    self_p.add_argument("--lambda-utterance", type=float, default=None, dest="lambda_utterance")
    self_p.add_argument("--lambda-contrastive", type=float, default=None, dest="lambda_contrastive")
    self_p.add_argument("--lambda-kl", type=float, default=None, dest="lambda_kl")
    self_p.add_argument("--lambda-rehearsal", type=float, default=None, dest="lambda_rehearsal")
    self_p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    self_p.add_argument("--beta-w", type=float, default=0.0, dest="beta_w")
    self_p.add_argument("--force-success", action="store_true")
    self_p.add_argument("--snapshots", action="store_true")
    self_p.set_defaults(func=cmd_selfplay)

    rep = sub.add_parser("replay", parents=[play_common], help="re-run recorded games under variants")
    rep.add_argument("transcripts", nargs="+")
    rep.add_argument("--out", default="runs/replay")
    rep.add_argument("--full", action="store_true")
    rep.add_argument("--no-pragmatics", action="store_true")
    rep.add_argument("--no-rehearsal", action="store_true")
    rep.add_argument("--no-kl", action="store_true")
    rep.add_argument("--frozen", action="store_true")
    rep.set_defaults(func=cmd_replay)

    abl = sub.add_parser("ablate", parents=[play_common], help="variant table over recorded games")
    abl.add_argument("transcripts", nargs="+")
    abl.add_argument("--out", default="runs/ablate")
    abl.add_argument("--full", action="store_true")
    abl.add_argument("--no-pragmatics", action="store_true")
    abl.add_argument("--no-rehearsal", action="store_true")
    abl.add_argument("--no-kl", action="store_true")
    abl.add_argument("--frozen", action="store_true")
    abl.set_defaults(func=cmd_replay)

    forg = sub.add_parser("eval-forgetting", parents=[play_common], help="paired held-out drop table")
    forg.add_argument("--out", default="runs/forgetting")
    forg.add_argument("--games", type=int, default=30)
    forg.add_argument("--seed", type=int, default=0)
    forg.add_argument("--context-kind", choices=["challenging", "simple"], default="challenging")
    forg.add_argument("--probe-contexts", type=int, default=10)
    forg.add_argument("--probe-kind", choices=["simple", "challenging", "nearby"], default="nearby")
    forg.set_defaults(func=cmd_eval_forgetting)

    met = sub.add_parser("metrics", help="accuracy/length by repetition from transcripts")
    met.add_argument("transcripts", nargs="+")
    met.add_argument("--out", default="runs/metrics")
    met.add_argument("--seed", type=int, default=0)
    met.set_defaults(func=cmd_metrics)

    srv = sub.add_parser("serve", help="run the live game service")
    srv.add_argument("--port", type=int, default=None)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--checkpoint", default=None)
    srv.add_argument("--config", default=None)
    srv.add_argument("--data-dir", default=None, dest="data_dir")
    srv.add_argument("--seed", type=int, default=None)
    srv.set_defaults(func=cmd_serve)

    ply = sub.add_parser("play", help="scripted thin client against a live server")
    ply.add_argument("--url", default="http://127.0.0.1:8000")
    ply.add_argument("--role", choices=[p for p in ("human_speaker", "human_listener")], default="human_speaker")
    ply.add_argument("--seed", type=int, default=0)
    ply.add_argument("--context-kind", choices=["challenging", "simple"], default="challenging")
    ply.set_defaults(func=cmd_play)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RefgameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
