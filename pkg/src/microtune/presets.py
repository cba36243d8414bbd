"""Named training recipes.

Single-stage presets carry the published mixture factors, LoRA sizes, and
durations; the pipeline presets chain them in the published order. All of
them train the miniature model on the synthetic stand-in corpora at 1/20
of the original sizes, so a preset reproduces a recipe's shape, not its
scores.
"""
from __future__ import annotations

from .data import MixtureEntry, MixtureSpec
from .errors import ConfigError
from .lora import LoraConfig
from .model import toy_config
from .orchestrator import PipelineConfig, StageConfig
from .synth import SOURCES

DATA_SCALE_DEFAULT = 0.05  # 1/20 of the published corpus sizes

# factor tables keyed (defs, cot, grpo, finetome, gsm8k); 0 means unused
SFT_V3_ROWS: dict[str, tuple[tuple[int, int, int, int, int], bool, int]] = {
    "sft-v3.1": ((3, 1, 1, 1, 1), True, 3),
    "sft-v3.2": ((3, 2, 2, 1, 1), True, 3),
    "sft-v3.3": ((3, 1, 1, 1, 1), False, 3),
    "sft-v3.4": ((3, 2, 2, 0, 1), True, 3),
    "sft-v3.5": ((0, 0, 0, 0, 1), True, 1),
    "sft-v3.6": ((3, 1, 1, 0, 0), True, 1),
}
SFT_SOURCES = ("nouns_defs", "stat_cot", "stat_grpo", "finetome", "gsm8k_train")

GRPO_ROWS: dict[str, tuple[int, int]] = {  # name -> (rank_and_alpha, gsm8k take)
    "grpo-v1": (32, 4000),
    "grpo-v2": (8, 1000),
    "grpo-v3": (16, 1000),
}
GRPO_MAX_STEPS = 200  # duration is not published; conservative default

DTFT_ROWS: dict[str, tuple[int, int, dict, tuple[str, ...]]] = {
    # name -> (rank, alpha, duration kwargs, sources)
    "dtft-v1": (16, 32, {"epochs": 1}, ("cross_validated", "knowledge_graph")),
    "dtft-v2": (8, 16, {"max_steps": 150}, ("cross_validated", "knowledge_graph")),
    "dtft-v3": (8, 16, {"max_steps": 300}, ("cross_validated", "knowledge_graph")),
    "dtft-v4": (8, 16, {"max_steps": 180},
                ("cross_validated", "knowledge_graph", "stat_conversation")),
    "dtft-v5": (8, 16, {"max_steps": 300},
                ("cross_validated", "knowledge_graph", "stat_conversation")),
}


def _mix(entries: list[tuple], seed: int = 0) -> MixtureSpec:
    return MixtureSpec([MixtureEntry(*e) for e in entries], seed=seed)


def expected_full_total(mixture: MixtureSpec) -> int:
    """Mixture size with full-size sources: sum of factor * (take or size)."""
    total = 0
    for e in mixture.entries:
        if e.source not in SOURCES:
            raise ConfigError(f"unknown source {e.source!r}")
        total += e.factor * (e.take if e.take is not None else SOURCES[e.source].full_size)
    return total


def _sft_v3_stage(name: str, seed: int = 0) -> StageConfig:
    factors, responses_only, epochs = SFT_V3_ROWS[name]
    entries = [(src, f) for src, f in zip(SFT_SOURCES, factors) if f > 0]
    return StageConfig(
        name=name, kind="sft", mixture=_mix(entries, seed=seed), epochs=epochs,
        lora=LoraConfig(rank=32, alpha=32),
        train_on_responses_only=responses_only, seed=seed,
    )


def _sft_v2_stage(seed: int = 0) -> StageConfig:
    return StageConfig(
        name="sft-v2", kind="sft",
        mixture=_mix([(s, 1) for s in SFT_SOURCES], seed=seed), epochs=3,
        lora=LoraConfig(rank=32, alpha=32), seed=seed,
    )


def _cop_stage(seed: int = 0) -> StageConfig:
    return StageConfig(
        name="cop", kind="cop",
        mixture=_mix([("s2orc", 1), ("nouns_defs", 5)], seed=seed), epochs=2,
        lora=LoraConfig(rank=16, alpha=16),
        train_on_responses_only=False, seed=seed,
    )


def _it_stage(seed: int = 0) -> StageConfig:
    return StageConfig(
        name="instruction-tuning", kind="instruction_tuning",
        mixture=_mix([("dolly", 1), ("openhermes", 1)], seed=seed), epochs=1,
        lora=LoraConfig(rank=16, alpha=16), seed=seed,
    )


def _dpo_stage(seed: int = 0) -> StageConfig:
    return StageConfig(
        name="dpo", kind="dpo",
        mixture=_mix([("stat_dpo", 1), ("math_dpo", 1)], seed=seed), epochs=2,
        lora=LoraConfig(rank=16, alpha=16), seed=seed,
    )


def _grpo_stage(name: str, seed: int = 0) -> StageConfig:
    rank_alpha, take = GRPO_ROWS[name]
    return StageConfig(
        name=name, kind="grpo",
        mixture=_mix([("stat_grpo", 1), ("gsm8k_train", 1, take)], seed=seed),
        max_steps=GRPO_MAX_STEPS,
        lora=LoraConfig(rank=rank_alpha, alpha=rank_alpha), seed=seed,
        batch_size=2, grad_accum=2,  # each record costs group_size rollouts
    )


def _dtft_stage(name: str, seed: int = 0) -> StageConfig:
    rank, alpha, duration, srcs = DTFT_ROWS[name]
    return StageConfig(
        name=name, kind="dtft", mixture=_mix([(s, 1) for s in srcs], seed=seed),
        lora=LoraConfig(rank=rank, alpha=alpha), seed=seed, **duration,
    )


def _single(stage: StageConfig, preset_name: str) -> PipelineConfig:
    return PipelineConfig(name=preset_name, model=toy_config(), stages=[stage],
                          data_scale=DATA_SCALE_DEFAULT)


def _mini(stage: StageConfig, max_steps: int) -> StageConfig:
    """Shrink a faithful stage to pipeline-demo duration."""
    stage.epochs = None
    stage.max_steps = max_steps
    stage.batch_size = 4
    stage.grad_accum = 2
    stage.warmup_steps = 5
    return stage


def _pipeline1_mini() -> PipelineConfig:
    stages = [
        _mini(_cop_stage(seed=11), 40),
        _mini(_sft_v2_stage(seed=12), 40),
        _mini(_dpo_stage(seed=13), 30),
    ]
    return PipelineConfig(name="pipeline1-mini", model=toy_config(), stages=stages,
                          data_scale=DATA_SCALE_DEFAULT)


def _pipeline2_mini() -> PipelineConfig:
    stages = [
        _mini(_cop_stage(seed=21), 40),
        _mini(_it_stage(seed=22), 30),
        _mini(_sft_v2_stage(seed=23), 40),
        _mini(_dpo_stage(seed=24), 30),
    ]
    return PipelineConfig(name="pipeline2-mini", model=toy_config(), stages=stages,
                          data_scale=DATA_SCALE_DEFAULT)


def _pipeline3_mini() -> PipelineConfig:
    stages = [
        _mini(_sft_v3_stage("sft-v3.4", seed=31), 40),
        _mini(_dpo_stage(seed=32), 30),
        _mini(_dtft_stage("dtft-v2", seed=33), 30),
    ]
    return PipelineConfig(name="pipeline3-mini", model=toy_config(), stages=stages,
                          data_scale=DATA_SCALE_DEFAULT)


def _builders() -> dict:
    builders = {
        "cop": lambda: _single(_cop_stage(), "cop"),
        "instruction-tuning": lambda: _single(_it_stage(), "instruction-tuning"),
        "sft-v2": lambda: _single(_sft_v2_stage(), "sft-v2"),
        "dpo": lambda: _single(_dpo_stage(), "dpo"),
        "pipeline1-mini": _pipeline1_mini,
        "pipeline2-mini": _pipeline2_mini,
        "pipeline3-mini": _pipeline3_mini,
    }
    for name in SFT_V3_ROWS:
        builders[name] = lambda n=name: _single(_sft_v3_stage(n), n)
    for name in GRPO_ROWS:
        builders[name] = lambda n=name: _single(_grpo_stage(n), n)
    for name in DTFT_ROWS:
        builders[name] = lambda n=name: _single(_dtft_stage(n), n)
    return builders


def preset_names() -> list[str]:
    return sorted(_builders())


def preset(name: str) -> PipelineConfig:
    builders = _builders()
    if name not in builders:
        raise ConfigError(
            f"unknown preset {name!r}; valid presets: {', '.join(sorted(builders))}")
    return builders[name]()
