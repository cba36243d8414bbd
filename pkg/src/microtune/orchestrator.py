"""Multi-stage training runner.

A pipeline is a base model plus an ordered list of stages. Each stage
materializes its data mixture, trains with the objective its kind implies,
and hands a dense checkpoint to the next stage (adapters merge by default).
Every stage writes a report and a lineage entry whose digests chain, so a
finished run can be audited or resumed.
"""
from __future__ import annotations

import json
import math
import os
import random
import time
import warnings
from dataclasses import dataclass, field

from . import checkpoint as ckpt
from . import data as D
from . import lora as L
from . import objectives as O
from . import synth
from .data import GrpoRecord, MixtureEntry, MixtureSpec, PreferenceRecord, TokenizedExample
from .errors import ConfigError, ContractError
from .model import DecoderLM, DecoderWeights, ModelConfig, generate, toy_config
from .objectives import GrpoGroup
from .optim import AdamW, global_grad_norm, lr_at
from .tensor import Tensor, backward, scale

STAGE_KINDS = ("cop", "instruction_tuning", "sft", "dpo", "grpo", "dtft")
SUPERVISED_KINDS = ("cop", "instruction_tuning", "sft", "dtft")
PREFERENCE_KINDS = ("dpo", "grpo")

FULL_LR_DEFAULT = 3e-4
LORA_LR_DEFAULT = 1e-3


@dataclass
class StageConfig:
    name: str
    kind: str
    mixture: MixtureSpec
    epochs: int | None = None
    max_steps: int | None = None
    lora: L.LoraConfig | None = None
    train_on_responses_only: bool = True
    learning_rate: float | None = None  # default depends on lora presence
    warmup_steps: int = 10
    batch_size: int = 8
    grad_accum: int = 4
    seed: int = 0
    merge_adapter_at_end: bool = True
    weight_decay: float = 0.0
    dpo_beta: float = O.DPO_BETA_DEFAULT
    grpo_eps_clip: float = O.GRPO_EPS_CLIP_DEFAULT
    grpo_beta_kl: float = O.GRPO_BETA_KL_DEFAULT
    grpo_group_size: int = O.GRPO_GROUP_SIZE_DEFAULT
    grpo_max_new: int = 48
    grpo_temperature: float = 0.8

    def validate(self) -> None:
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"unknown stage kind {self.kind!r}; valid: {STAGE_KINDS}")
        if not self.name:
            raise ConfigError("stage needs a name")
        if (self.epochs is None) == (self.max_steps is None):
            raise ConfigError(
                f"stage {self.name!r}: exactly one of epochs/max_steps must be set")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"stage {self.name!r}: epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(
                f"stage {self.name!r}: max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError(f"stage {self.name!r}: batch_size and grad_accum must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError(f"stage {self.name!r}: warmup_steps must be >= 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError(f"stage {self.name!r}: learning_rate must be positive")
        if self.kind == "grpo" and self.grpo_group_size < 2:
            raise ConfigError(f"stage {self.name!r}: group size must be >= 2")
        if not self.mixture.entries:
            raise ConfigError(f"stage {self.name!r}: empty mixture")

    @property
    def resolved_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return LORA_LR_DEFAULT if self.lora else FULL_LR_DEFAULT

    def to_dict(self) -> dict:
        return {
            "name": self.name, "kind": self.kind, "mixture": self.mixture.to_dict(),
            "epochs": self.epochs, "max_steps": self.max_steps,
            "lora": self.lora.to_dict() if self.lora else None,
            "train_on_responses_only": self.train_on_responses_only,
            "learning_rate": self.learning_rate, "warmup_steps": self.warmup_steps,
            "batch_size": self.batch_size, "grad_accum": self.grad_accum,
            "seed": self.seed, "merge_adapter_at_end": self.merge_adapter_at_end,
            "weight_decay": self.weight_decay, "dpo_beta": self.dpo_beta,
            "grpo_eps_clip": self.grpo_eps_clip, "grpo_beta_kl": self.grpo_beta_kl,
            "grpo_group_size": self.grpo_group_size, "grpo_max_new": self.grpo_max_new,
            "grpo_temperature": self.grpo_temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        d["mixture"] = MixtureSpec.from_dict(d["mixture"])
        if d.get("lora"):
            d["lora"] = L.LoraConfig.from_dict(d["lora"])
        return cls(**d)


@dataclass
class PipelineConfig:
    name: str
    model: ModelConfig
    stages: list[StageConfig]
    base_checkpoint: str | None = None
    init_seed: int = 0
    data_scale: float = 1.0
    out_dir: str | None = None

    def validate(self) -> None:
        if not 0.0 < self.data_scale <= 1.0:
            raise ConfigError(f"data_scale must lie in (0, 1], got {self.data_scale}")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate stage names: {names}")
        for s in self.stages:
            s.validate()
        # each stage hands a dense model to the next; only the last stage may
        # keep its adapter unmerged (mergeable later from the adapter file)
        for s in self.stages[:-1]:
            if s.lora is not None and not s.merge_adapter_at_end:
                raise ConfigError(
                    f"stage {s.name!r} keeps its adapter unmerged but is not the "
                    "final stage; later stages need a dense starting model")
        supervised_seen = self.base_checkpoint is not None
        for s in self.stages:
            if s.kind in PREFERENCE_KINDS and not supervised_seen:
                warnings.warn(
                    f"stage {s.name!r} runs preference optimization on a raw "
                    "initialization; such runs tend to degrade without a "
                    "supervised stage or an instruction-tuned base first",
                    stacklevel=2)
            if s.kind in SUPERVISED_KINDS:
                supervised_seen = True

    def to_dict(self) -> dict:
        return {
            "name": self.name, "model": self.model.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
            "base_checkpoint": self.base_checkpoint, "init_seed": self.init_seed,
            "data_scale": self.data_scale, "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            name=d["name"], model=ModelConfig.from_dict(d["model"]),
            stages=[StageConfig.from_dict(s) for s in d["stages"]],
            base_checkpoint=d.get("base_checkpoint"), init_seed=d.get("init_seed", 0),
            data_scale=d.get("data_scale", 1.0), out_dir=d.get("out_dir"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class StageReport:
    name: str
    kind: str
    steps: int
    final_loss: float
    losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0  # informational only, never persisted


# --------------------------------------------------------------- data prep


def scaled_count(full: int, scale: float) -> int:
    return max(1, round(full * scale))


def _chat_examples(records, model_cfg: ModelConfig, responses_only: bool,
                   source: str) -> list[TokenizedExample]:
    max_len = model_cfg.max_seq_len
    out = []
    for rec in records:
        chat = rec if isinstance(rec, D.ChatRecord) else D.ChatRecord(rec["messages"])
        ids, spans = D.tokenize_chat(chat)
        for w_ids, w_spans in D.window_with_spans(ids, spans, max_len, max_len // 2):
            ex = D.build_labels(w_ids, w_spans, responses_only, source=source)
            if ex is not None:
                out.append(ex)
    return out


def _plain_examples(records, model_cfg: ModelConfig, source: str) -> list[TokenizedExample]:
    # pure next-token objective: no masking beyond the final position
    max_len = model_cfg.max_seq_len
    out = []
    for rec in records:
        ids = D.tokenize(D.clean_text(rec["text"]))
        if len(ids) < 2:
            continue
        for w in D.window_sequence(ids, max_len, max_len // 2):
            ex = D.build_labels(w, None, False, source=source)
            if ex is not None:
                out.append(ex)
    return out


def materialize_stage_data(stage: StageConfig, model_cfg: ModelConfig,
                           data_scale: float = 1.0) -> list:
    """Generate, tokenize, and mix every source the stage's mixture names.

    Supervised kinds yield TokenizedExamples (reasoning records pass through
    the chat template with their marked answer); dpo yields PreferenceRecords
    and grpo yields GrpoRecords for sampling at train time. Sizes and takes
    scale by data_scale.
    """
    sources: dict[str, list] = {}
    entries = []
    for entry in stage.mixture.entries:
        spec = synth.SOURCES.get(entry.source)
        if spec is None:
            raise ConfigError(f"stage {stage.name!r}: unknown source {entry.source!r}")
        n = scaled_count(spec.full_size, data_scale)
        records = synth.generate_records(entry.source, n, seed=stage.mixture.seed)
        if stage.kind in SUPERVISED_KINDS:
            if spec.kind == "chat":
                sources[entry.source] = _chat_examples(
                    records, model_cfg, stage.train_on_responses_only, entry.source)
            elif spec.kind == "grpo":
                chats = [D.grpo_as_chat(GrpoRecord(**r)) for r in records]
                sources[entry.source] = _chat_examples(
                    chats, model_cfg, stage.train_on_responses_only, entry.source)
            elif spec.kind == "plain":
                sources[entry.source] = _plain_examples(records, model_cfg, entry.source)
            else:
                raise ConfigError(
                    f"stage {stage.name!r}: source {entry.source!r} holds "
                    f"{spec.kind} records, unusable in a {stage.kind} stage")
        elif stage.kind == "dpo":
            if spec.kind != "preference":
                raise ConfigError(
                    f"stage {stage.name!r}: dpo needs preference sources, "
                    f"{entry.source!r} holds {spec.kind} records")
            sources[entry.source] = [PreferenceRecord(**r) for r in records]
        else:  # grpo
            if spec.kind != "grpo":
                raise ConfigError(
                    f"stage {stage.name!r}: grpo needs reasoning sources, "
                    f"{entry.source!r} holds {spec.kind} records")
            sources[entry.source] = [GrpoRecord(**r) for r in records]
        take = entry.take
        if take is not None:
            take = min(scaled_count(take, data_scale), len(sources[entry.source]))
        entries.append(MixtureEntry(entry.source, entry.factor, take))
    mixed = D.mix_datasets(MixtureSpec(entries, seed=stage.mixture.seed), sources)
    if not mixed:
        raise ConfigError(f"stage {stage.name!r}: materialized mixture is empty")
    return mixed


# ------------------------------------------------------------ train helpers


def _total_steps(stage: StageConfig, dataset_size: int) -> int:
    per_step = stage.batch_size * stage.grad_accum
    if stage.max_steps is not None:
        return stage.max_steps
    per_epoch = max(1, math.ceil(dataset_size / per_step))
    return stage.epochs * per_epoch


def _microbatches(dataset: list, stage: StageConfig):
    """Endless stream of batch_size chunks; each pass reshuffles."""
    epoch = 0
    while True:
        order = list(range(len(dataset)))
        random.Random(stage.seed * 7919 + epoch).shuffle(order)
        for i in range(0, len(order), stage.batch_size):
            yield [dataset[j] for j in order[i:i + stage.batch_size]]
        epoch += 1


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for t in losses[1:]:
        total = total + t
    return scale(total, 1.0 / len(losses))


def _prompt_ids(text: str) -> list[int]:
    return D.tokenize(D.render_generation_prompt([{"role": "user", "content": text}]))


def _response_ids(text: str, budget: int) -> list[int]:
    ids = D.tokenize(text) + [D.EOT_ID]
    return ids[:max(1, budget)]


def _dpo_dataset(pairs: list[PreferenceRecord], lm: DecoderLM, ref: DecoderLM):
    """Pre-tokenize pairs and cache the frozen-reference logprobs once."""
    max_len = lm.config.max_seq_len
    out = []
    for pair in pairs:
        p = _prompt_ids(pair.prompt)
        if len(p) >= max_len - 1:
            raise ConfigError(f"preference prompt of {len(p)} tokens fills the context")
        budget = max_len - len(p)
        c = _response_ids(pair.chosen, budget)
        r = _response_ids(pair.rejected, budget)
        rc = O.sequence_logprob(ref, p, c).value
        rl = O.sequence_logprob(ref, p, r).value
        out.append((p, c, r, rc, rl))
    return out


def _sample_group(lm: DecoderLM, record: GrpoRecord, stage: StageConfig,
                  counter: int) -> GrpoGroup:
    prompt = _prompt_ids(record.question)
    room = lm.config.max_seq_len - len(prompt)
    if room < 1:
        raise ConfigError(f"reasoning prompt of {len(prompt)} tokens fills the context")
    max_new = min(stage.grpo_max_new, room)
    responses, rewards, old_lps = [], [], []
    for g in range(stage.grpo_group_size):
        seed = stage.seed * 1_000_003 + counter * 131 + g
        resp = generate(lm, prompt, max_new=max_new,
                        temperature=stage.grpo_temperature, seed=seed,
                        stop_token=D.EOT_ID)
        if not resp:  # immediate stop: keep the group rectangular
            resp = [D.PAD_ID]
        responses.append(resp)
        rewards.append(O.exact_match_reward(D.detokenize_lossy(resp), record.answer))
        old_lps.append(O.sequence_logprob(lm, prompt, resp).value)
    return GrpoGroup(prompt, responses, rewards, old_lps)


# ---------------------------------------------------------------- run_stage


def run_stage(
    lm: DecoderLM,
    stage: StageConfig,
    data_scale: float = 1.0,
    report_path: str | None = None,
    dataset: list | None = None,
) -> tuple[DecoderLM, StageReport]:
    """Train one stage and return the resulting model.

    Pass dataset to skip materialization (tests). The returned model is
    dense when the stage merges its adapter, otherwise it carries the
    trained adapters.
    """
    stage.validate()
    t0 = time.monotonic()
    if dataset is None:
        dataset = materialize_stage_data(stage, lm.config, data_scale)

    if stage.lora is not None:
        adapters = L.attach_adapters(lm, stage.lora, seed=stage.seed)
        params = L.adapter_parameters(adapters)
    else:
        lm.weights.set_trainable(True)
        params = lm.weights.parameters()

    ref = lm.snapshot() if stage.kind in PREFERENCE_KINDS else None
    if stage.kind == "dpo":
        dataset = _dpo_dataset(dataset, lm, ref)

    total = _total_steps(stage, len(dataset))
    opt = AdamW(params, lr=stage.resolved_lr, weight_decay=stage.weight_decay)
    stream = _microbatches(dataset, stage)
    group_counter = 0
    losses: list[float] = []
    report_rows: list[dict] = []

    for step in range(total):
        lr = lr_at(step, total, stage.resolved_lr, stage.warmup_steps)
        opt.zero_grad()
        micro_losses: list[float] = []
        for _ in range(stage.grad_accum):
            batch = next(stream)
            if stage.kind in SUPERVISED_KINDS:
                loss = O.sft_loss(lm, batch)
            elif stage.kind == "dpo":
                per_pair = []
                for p, c, r, rc, rl in batch:
                    pc = O.sequence_logprob(lm, p, c).total
                    pl = O.sequence_logprob(lm, p, r).total
                    per_pair.append(O.dpo_loss(pc, pl, rc, rl, beta=stage.dpo_beta))
                loss = _mean_loss(per_pair)
            else:
                groups = []
                for record in batch:
                    groups.append(_sample_group(lm, record, stage, group_counter))
                    group_counter += 1
                loss = O.grpo_loss(lm, ref, groups, eps_clip=stage.grpo_eps_clip,
                                   beta_kl=stage.grpo_beta_kl)
            value = loss.item()
            if not math.isfinite(value):
                raise ContractError(
                    f"stage {stage.name!r}: non-finite loss {value} at step {step}")
            backward(scale(loss, 1.0 / stage.grad_accum))
            micro_losses.append(value)
        grad_norm = global_grad_norm(params)
        opt.step(lr=lr)
        step_loss = sum(micro_losses) / len(micro_losses)
        losses.append(step_loss)
        report_rows.append({"step": step, "loss": step_loss, "lr": lr,
                            "grad_norm": grad_norm})

    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            for row in report_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    if stage.lora is not None and stage.merge_adapter_at_end:
        merged = L.merged_weights(lm)
        merged.set_trainable(True)
        lm = DecoderLM(lm.config, merged)

    report = StageReport(
        name=stage.name, kind=stage.kind, steps=total,
        final_loss=losses[-1] if losses else float("nan"),
        losses=losses, wall_time_s=time.monotonic() - t0,
    )
    return lm, report


# -------------------------------------------------------------- run_pipeline


def _stage_ckpt_name(index: int, stage: StageConfig) -> str:
    return f"stage_{index + 1:02d}_{stage.name}.mtckpt"


def run_pipeline(cfg: PipelineConfig, out_dir: str | None = None,
                 resume: bool = False, log=None) -> dict:
    """Run every stage, persisting checkpoints and a digest-chained lineage.

    Returns the lineage dict (also written to lineage.json). With resume,
    stages whose outputs already exist with matching digests are skipped.
    """
    cfg.validate()
    out = out_dir or cfg.out_dir
    if out is None:
        raise ConfigError("pipeline needs an output directory")
    ckpt_dir = os.path.join(out, "checkpoints")
    report_dir = os.path.join(out, "reports")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(report_dir, exist_ok=True)
    lineage_path = os.path.join(out, "lineage.json")
    say = log if log is not None else (lambda msg: None)

    base_path = os.path.join(ckpt_dir, "stage_00_base.mtckpt")
    if cfg.base_checkpoint is not None:
        lm = ckpt.load_model(cfg.base_checkpoint)
        if lm.config.to_dict() != cfg.model.to_dict():
            raise ConfigError("base checkpoint model shape differs from pipeline config")
    else:
        lm = DecoderLM(cfg.model, DecoderWeights.init_random(cfg.model, cfg.init_seed))
    ckpt.save_model(base_path, lm)

    lineage: dict = {"pipeline": cfg.name, "stages": []}
    start_index = 0
    if resume and os.path.exists(lineage_path):
        with open(lineage_path, "r", encoding="utf-8") as fh:
            prior = json.load(fh)
        for i, entry in enumerate(prior.get("stages", [])):
            if i >= len(cfg.stages) or "error" in entry:
                break
            if entry.get("stage") != cfg.stages[i].name:
                break
            path = os.path.join(ckpt_dir, _stage_ckpt_name(i, cfg.stages[i]))
            if not os.path.exists(path) or ckpt.file_digest(path) != entry["output_digest"]:
                break
            lineage["stages"].append(entry)
            start_index = i + 1
        if start_index:
            last = os.path.join(ckpt_dir, _stage_ckpt_name(start_index - 1,
                                                           cfg.stages[start_index - 1]))
            lm = ckpt.load_model(last)
            say(f"resuming after {start_index} completed stage(s)")

    current_path = base_path if start_index == 0 else os.path.join(
        ckpt_dir, _stage_ckpt_name(start_index - 1, cfg.stages[start_index - 1]))

    for i in range(start_index, len(cfg.stages)):
        stage = cfg.stages[i]
        input_digest = ckpt.file_digest(current_path)
        report_path = os.path.join(report_dir, f"stage_{i + 1:02d}_{stage.name}.jsonl")
        say(f"stage {i + 1}/{len(cfg.stages)}: {stage.name} ({stage.kind})")
        try:
            lm, report = run_stage(lm, stage, data_scale=cfg.data_scale,
                                   report_path=report_path)
        except Exception as e:
            lineage["stages"].append({"stage": stage.name, "kind": stage.kind,
                                      "input_digest": input_digest, "error": str(e)})
            with open(lineage_path, "w", encoding="utf-8") as fh:
                json.dump(lineage, fh, indent=2, sort_keys=True)
            raise
        out_path = os.path.join(ckpt_dir, _stage_ckpt_name(i, stage))
        ckpt.save_model(out_path, lm)
        if lm.adapters:
            ckpt.save_adapters(out_path.replace(".mtckpt", ".adapter.mtckpt"), lm.adapters)
        lineage["stages"].append({
            "stage": stage.name, "kind": stage.kind,
            "input_digest": input_digest,
            "output_digest": ckpt.file_digest(out_path),
            "final_loss": report.final_loss, "steps": report.steps,
        })
        with open(lineage_path, "w", encoding="utf-8") as fh:
            json.dump(lineage, fh, indent=2, sort_keys=True)
        say(f"  {report.steps} steps, final loss {report.final_loss:.4f}, "
            f"{report.wall_time_s:.1f}s")
        current_path = out_path

    with open(lineage_path, "w", encoding="utf-8") as fh:
        json.dump(lineage, fh, indent=2, sort_keys=True)
    return lineage


def verify_lineage(lineage: dict, out_dir: str) -> bool:
    """True when every recorded digest matches its file and consecutive
    stages chain input to output."""
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    base = os.path.join(ckpt_dir, "stage_00_base.mtckpt")
    if not os.path.exists(base):
        return False
    expected_input = ckpt.file_digest(base)
    for i, entry in enumerate(lineage.get("stages", [])):
        if "error" in entry:
            return False
        if entry["input_digest"] != expected_input:
            return False
        path = os.path.join(ckpt_dir, f"stage_{i + 1:02d}_{entry['stage']}.mtckpt")
        if not os.path.exists(path) or ckpt.file_digest(path) != entry["output_digest"]:
            return False
        expected_input = entry["output_digest"]
    return True
