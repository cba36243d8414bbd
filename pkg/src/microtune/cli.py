"""Command-line entry point.

One binary, six subcommands: prepare-data, train, eval, merge-adapter,
generate, presets. Every command that writes files drops a manifest.json
(command, resolved-config digest, seed, versions) next to its outputs, and
none of them touches its inputs. Training guards its output directory with
a lock file so two runs cannot interleave checkpoints.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import data as D
from . import eval as E
from .errors import ConfigError
from .lora import merged_weights
from .model import DecoderLM, generate
from .orchestrator import PipelineConfig, run_pipeline
from .presets import preset, preset_names

PREP_KINDS = ("chat", "preference", "grpo", "plain", "kg")
LOCK_NAME = ".train.lock"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _config_digest(resolved: dict) -> str:
    # where outputs land is not part of what ran
    resolved = {k: v for k, v in resolved.items() if k != "out_dir"}
    return _sha256(json.dumps(resolved, sort_keys=True).encode("utf-8"))


def write_manifest(out_dir: str, command: str, resolved_config: dict,
                   seed: int | None) -> dict:
    """The reproducibility record: what ran, on which config, with which
    seed, under which versions. Deliberately no timestamps, so identical
    runs produce identical manifests."""
    manifest = {
        "command": command,
        "config_digest": _config_digest(resolved_config),
        "seed": seed,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# ------------------------------------------------------------- prepare-data


def _document_paragraphs(raw: str) -> list[str]:
    """Split on blank lines (before cleaning collapses them), clean each
    paragraph, and cut the document at a bare reference heading."""
    out = []
    for para in raw.split("\n\n"):
        first = para.strip().split("\n", 1)[0].strip().lower()
        if first in D.REFERENCE_HEADINGS:
            break
        cleaned = D.clean_text(para)
        if cleaned:
            out.append(cleaned)
    return out


def _prep_plain(texts: list[str], spec: dict) -> tuple[list, int]:
    max_len = int(spec.get("max_seq_len", 256))
    stride = int(spec.get("stride", max_len // 2))
    dedup_hits = 0
    examples = []
    for text in texts:
        paragraphs = _document_paragraphs(text)
        kept = D.dedup_adjacent_paragraphs(paragraphs)
        dedup_hits += len(paragraphs) - len(kept)
        ids = D.tokenize("\n\n".join(kept))
        if len(ids) < 2:
            continue
        for w in D.window_sequence(ids, max_len, stride):
            ex = D.build_labels(w, None, False, source=spec.get("source", ""))
            if ex is not None:
                examples.append(ex)
    return examples, dedup_hits


def _prep_chat(records: list[D.ChatRecord], spec: dict) -> list:
    max_len = int(spec.get("max_seq_len", 256))
    stride = int(spec.get("stride", max_len // 2))
    responses_only = bool(spec.get("responses_only", True))
    examples = []
    for rec in records:
        ids, spans = D.tokenize_chat(rec)
        for w_ids, w_spans in D.window_with_spans(ids, spans, max_len, stride):
            ex = D.build_labels(w_ids, w_spans, responses_only,
                                source=spec.get("source", ""))
            if ex is not None:
                examples.append(ex)
    return examples


def cmd_prepare_data(args) -> int:
    if not args.config:
        raise ConfigError("prepare-data needs --config with a preparation spec")
    with open(args.config, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    kind = spec.get("kind")
    if kind not in PREP_KINDS:
        raise ConfigError(f"prep kind must be one of {PREP_KINDS}, got {kind!r}")
    if not args.out:
        raise ConfigError("prepare-data needs --out")
    in_path = spec["input"]

    stats = {"kind": kind, "records": 0, "dropped": 0, "dedup_hits": 0,
             "examples": 0}
    if kind == "kg":
        triplets = D.read_kg_triplets(in_path)
        with open(spec["labels"], "r", encoding="utf-8") as fh:
            labels = json.load(fh)
        inverses = {}
        if spec.get("inverses"):
            with open(spec["inverses"], "r", encoding="utf-8") as fh:
                inverses = json.load(fh)
        statements = D.kg_verbalize(triplets, labels, inverses)
        stats["records"] = len(triplets)
        stats["statements"] = len(statements)
        examples, _ = _prep_plain(statements, spec)
    elif kind == "plain":
        texts, bad = D.read_jsonl(in_path, kind="plain")
        stats["records"], stats["dropped"] = len(texts), len(bad)
        examples, stats["dedup_hits"] = _prep_plain(texts, spec)
    elif kind == "chat":
        records, bad = D.read_jsonl(in_path, kind="chat")
        stats["records"], stats["dropped"] = len(records), len(bad)
        examples = _prep_chat(records, spec)
    else:
        # preference/grpo records train from raw text; the cache stores the
        # validated records re-serialized, one per line
        records, bad = D.read_jsonl(in_path, kind=kind)
        stats["records"], stats["dropped"] = len(records), len(bad)
        examples = None

    os.makedirs(args.out, exist_ok=True)
    if examples is not None:
        stats["examples"] = len(examples)
        D.save_token_cache(os.path.join(args.out, "examples.mtcache"), examples,
                           meta={"kind": kind, "input": os.path.basename(in_path)})
    else:
        rows = [vars(r) for r in records]
        with open(os.path.join(args.out, "records.jsonl"), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        stats["examples"] = len(rows)
    with open(os.path.join(args.out, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    write_manifest(args.out, "prepare-data", spec, args.seed)
    print(" ".join(f"{k}={stats[k]}" for k in sorted(stats)))
    return 0


# -------------------------------------------------------------------- train


def resolve_train_config(args) -> PipelineConfig:
    """flag > config file > preset default, field by field."""
    base: dict | None = None
    if args.preset:
        base = preset(args.preset).to_dict()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            overlay = json.load(fh)
        if base is None:
            base = overlay
        else:
            base.update(overlay)
    if base is None:
        raise ConfigError("train needs --preset or --config")
    cfg = PipelineConfig.from_dict(base)
    if args.seed is not None:
        cfg.init_seed = args.seed
        for i, stage in enumerate(cfg.stages):
            stage.seed = args.seed * 1000 + i
            stage.mixture.seed = stage.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    cfg.validate()
    out = cfg.out_dir
    if not out:
        raise ConfigError("train needs --out (or out_dir in the config)")
    os.makedirs(out, exist_ok=True)
    lock_path = os.path.join(out, LOCK_NAME)
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        print(f"error: {out} is locked by another training run "
              f"(remove {lock_path} if it is stale)", file=sys.stderr)
        return 1
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        write_manifest(out, "train", cfg.to_dict(), args.seed)
        lineage = run_pipeline(cfg, out_dir=out, resume=args.resume, log=print)
    finally:
        os.unlink(lock_path)
    from .orchestrator import verify_lineage
    if not verify_lineage(lineage, out):
        print("error: lineage failed post-run verification", file=sys.stderr)
        return 1
    print(f"lineage verified: {out}/lineage.json")
    return 0


# --------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if not args.bench:
        raise ConfigError("eval needs --bench")
    items = E.load_benchmark(args.bench)
    lm = ckpt.load_model(args.checkpoint)
    responder = E.model_responder(lm, max_new=args.max_new,
                                  temperature=args.temperature,
                                  seed=args.seed or 0)
    bench_name = os.path.splitext(os.path.basename(args.bench))[0]
    report = E.evaluate(responder, items, protocol=args.protocol, k=args.k,
                        benchmark=bench_name)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report_path = os.path.join(args.out, f"eval_{bench_name}.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        write_manifest(args.out, "eval", {
            "checkpoint": os.path.basename(args.checkpoint),
            "bench": os.path.basename(args.bench), "protocol": args.protocol,
            "k": args.k, "max_new": args.max_new, "temperature": args.temperature,
        }, args.seed)
    print(f"benchmark={report.benchmark} acc={report.accuracy:.4f}")
    return 0


# ------------------------------------------------------------ merge-adapter


def cmd_merge_adapter(args) -> int:
    lm = ckpt.load_model(args.checkpoint)
    lm.adapters = ckpt.load_adapters(args.adapter)
    merged = merged_weights(lm)
    out_path = args.out
    if not out_path:
        raise ConfigError("merge-adapter needs --out")
    if os.path.isdir(out_path):
        out_path = os.path.join(out_path, "merged.mtckpt")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    ckpt.save_model(out_path, DecoderLM(lm.config, merged))
    write_manifest(os.path.dirname(os.path.abspath(out_path)), "merge-adapter", {
        "checkpoint": os.path.basename(args.checkpoint),
        "adapter": os.path.basename(args.adapter),
    }, args.seed)
    print(f"merged checkpoint: {out_path}")
    return 0


# ----------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    lm = ckpt.load_model(args.checkpoint)
    prompt = D.render_generation_prompt([{"role": "user", "content": args.prompt}])
    ids = D.tokenize(prompt)
    out = generate(lm, ids, max_new=args.max_new, temperature=args.temperature,
                   seed=args.seed or 0, stop_token=D.EOT_ID)
    text = D.detokenize_lossy(out)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "generation.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
        write_manifest(args.out, "generate", {
            "checkpoint": os.path.basename(args.checkpoint),
            "prompt": args.prompt, "max_new": args.max_new,
            "temperature": args.temperature,
        }, args.seed)
    print(text)
    return 0


def cmd_presets(args) -> int:
    for name in preset_names():
        cfg = preset(name)
        kinds = " -> ".join(s.kind for s in cfg.stages)
        print(f"{name:22s} {kinds}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microtune",
        description="desk-scale domain adaptation: train, align, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", default=None)

    p = sub.add_parser("prepare-data", help="clean/tokenize a dataset file")
    p.add_argument("--config", required=True, help="JSON preparation spec")
    common(p)
    p.set_defaults(fn=cmd_prepare_data)

    p = sub.add_parser("train", help="run a training pipeline")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--preset", default=None, help="named recipe (see presets)")
    p.add_argument("--resume", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a benchmark")
    p.add_argument("checkpoint")
    p.add_argument("--bench", required=True)
    p.add_argument("--protocol", choices=E.PROTOCOLS, default="fewshot-cot")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--max-new", type=int, default=48)
    p.add_argument("--temperature", type=float, default=0.0)
    common(p, seed_default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("merge-adapter", help="fold an adapter into a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("adapter")
    common(p)
    p.set_defaults(fn=cmd_merge_adapter)

    p = sub.add_parser("generate", help="sample a continuation from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("prompt")
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    common(p, seed_default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("presets", help="list named recipes")
    p.set_defaults(fn=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
