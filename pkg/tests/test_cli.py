"""CLI behaviors: exit codes, manifests, locking, idempotency, no mutation."""
import hashlib
import json
import os

import pytest

import microtune.checkpoint as ckpt
import microtune.cli as cli
import microtune.data as D
import microtune.lora as L
import microtune.synth as S
from microtune.data import MixtureEntry, MixtureSpec
from microtune.model import DecoderLM, DecoderWeights, ModelConfig
from microtune.orchestrator import PipelineConfig, StageConfig


def small_config() -> ModelConfig:
    return ModelConfig(vocab_size=512, d_model=32, n_layers=1, n_heads=2,
                       n_kv_heads=1, d_ff=64, max_seq_len=128)


def micro_pipeline(tmp_path, unmerged_final=False) -> str:
    stages = [
        StageConfig(name="warm", kind="sft",
                    mixture=MixtureSpec([MixtureEntry("nouns_defs", 1)], seed=0),
                    max_steps=2, batch_size=2, grad_accum=1, warmup_steps=1),
    ]
    if unmerged_final:
        stages.append(StageConfig(
            name="pref", kind="dpo",
            mixture=MixtureSpec([MixtureEntry("stat_dpo", 1)], seed=0),
            max_steps=1, batch_size=2, grad_accum=1, warmup_steps=0,
            lora=L.LoraConfig(rank=4, alpha=4), merge_adapter_at_end=False))
    cfg = PipelineConfig(name="micro", model=small_config(), stages=stages,
                         data_scale=0.005)
    path = tmp_path / "pipeline.json"
    path.write_text(cfg.to_json())
    return str(path)


def model_checkpoint(tmp_path, seed=0) -> str:
    cfg = small_config()
    lm = DecoderLM(cfg, DecoderWeights.init_random(cfg, seed))
    path = str(tmp_path / "model.mtckpt")
    ckpt.save_model(path, lm)
    return path


def sha(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ------------------------------------------------------------------ parsing


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["presets", "--frobnicate"])
    assert exc.value.code != 0


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        cli.main(["optimize"])


def test_presets_lists_all_names(capsys):
    assert cli.main(["presets"]) == 0
    out = capsys.readouterr().out
    for name in ("pipeline1-mini", "pipeline3-mini", "sft-v3.2", "dtft-v2"):
        assert name in out


# ------------------------------------------------------------------- train


def test_train_requires_config_or_preset(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path / "o")]) == 2
    assert "preset" in capsys.readouterr().err


def test_train_writes_manifest_and_verified_lineage(tmp_path):
    cfg_path = micro_pipeline(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest) == {"command", "config_digest", "seed", "versions"}
    assert manifest["command"] == "train"
    assert "time" not in json.dumps(manifest)
    assert (out / "lineage.json").exists()
    assert not (out / cli.LOCK_NAME).exists()  # lock released


def test_train_is_idempotent(tmp_path):
    cfg_path = micro_pipeline(tmp_path)
    hashes = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
        hashes.append((sha(out / "manifest.json"), sha(out / "lineage.json"),
                       sha(out / "checkpoints" / "stage_01_warm.mtckpt")))
    assert hashes[0] == hashes[1]
    # rerunning into the same directory rewrites the same bytes
    out = tmp_path / "a"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    assert (sha(out / "manifest.json"), sha(out / "lineage.json"),
            sha(out / "checkpoints" / "stage_01_warm.mtckpt")) == hashes[0]


def test_train_seed_flag_reproduces_lineage(tmp_path):
    cfg_path = micro_pipeline(tmp_path)
    digests = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert cli.main(["train", "--config", cfg_path, "--seed", "7",
                         "--out", str(out)]) == 0
        lineage = json.loads((out / "lineage.json").read_text())
        digests.append([e["output_digest"] for e in lineage["stages"]])
    assert digests[0] == digests[1]
    # and a different seed gives different weights
    out = tmp_path / "c"
    assert cli.main(["train", "--config", cfg_path, "--seed", "8",
                     "--out", str(out)]) == 0
    lineage = json.loads((out / "lineage.json").read_text())
    assert [e["output_digest"] for e in lineage["stages"]] != digests[0]


def test_train_lock_blocks_second_run(tmp_path, capsys):
    cfg_path = micro_pipeline(tmp_path)
    out = tmp_path / "run"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("12345")
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 1
    assert "locked" in capsys.readouterr().err
    (out / cli.LOCK_NAME).unlink()
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0


def test_train_does_not_mutate_config_file(tmp_path):
    cfg_path = micro_pipeline(tmp_path)
    before = sha(cfg_path)
    assert cli.main(["train", "--config", cfg_path,
                     "--out", str(tmp_path / "run")]) == 0
    assert sha(cfg_path) == before


def test_flag_beats_config_beats_preset(tmp_path):
    overlay = tmp_path / "overlay.json"
    overlay.write_text(json.dumps({"data_scale": 0.25}))

    class Args:
        preset = "sft-v2"
        config = str(overlay)
        seed = 9
        out = str(tmp_path / "o")

    cfg = cli.resolve_train_config(Args)
    assert cfg.data_scale == 0.25  # config file overrides the preset default
    assert cfg.init_seed == 9  # flag overrides both
    assert cfg.stages[0].seed == 9000
    assert cfg.stages[0].mixture.seed == 9000
    assert cfg.out_dir == Args.out
    # without the flag, preset defaults stand
    Args.seed = None
    Args.config = None
    cfg = cli.resolve_train_config(Args)
    assert cfg.data_scale == 0.05


def test_stage_duration_survives_cli_resolution():
    class Args:
        preset = "dtft-v2"
        config = None
        seed = None
        out = None

    cfg = cli.resolve_train_config(Args)
    assert cfg.stages[0].max_steps == 150


# -------------------------------------------------------------------- eval


def test_eval_prints_accuracy_line_and_report(tmp_path, capsys):
    bench = tmp_path / "mcq.jsonl"
    S.write_jsonl(bench, S.mcq_benchmark_items(6, seed=0))
    model = model_checkpoint(tmp_path)
    out = tmp_path / "ev"
    rc = cli.main(["eval", model, "--bench", str(bench), "--protocol", "mcq",
                   "--max-new", "4", "--out", str(out)])
    assert rc == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("benchmark=mcq acc=0.")
    assert len(line.split("acc=")[1]) == 6  # four decimal places
    report = json.loads((out / "eval_mcq.json").read_text())
    assert report["n_items"] == 6
    assert len(report["results"]) == 6
    assert (out / "manifest.json").exists()


def test_eval_missing_benchmark_no_partial_report(tmp_path, capsys):
    model = model_checkpoint(tmp_path)
    out = tmp_path / "ev"
    rc = cli.main(["eval", model, "--bench", str(tmp_path / "nope.jsonl"),
                   "--protocol", "mcq", "--out", str(out)])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")
    assert not out.exists()


def test_eval_protocol_mismatch_fails(tmp_path, capsys):
    bench = tmp_path / "num.jsonl"
    S.write_jsonl(bench, S.numeric_benchmark_items(4, seed=0))
    model = model_checkpoint(tmp_path)
    rc = cli.main(["eval", model, "--bench", str(bench), "--protocol", "mcq",
                   "--max-new", "2"])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_eval_is_deterministic(tmp_path, capsys):
    bench = tmp_path / "mcq.jsonl"
    S.write_jsonl(bench, S.mcq_benchmark_items(4, seed=1))
    model = model_checkpoint(tmp_path)
    reports = []
    for sub in ("e1", "e2"):
        out = tmp_path / sub
        assert cli.main(["eval", model, "--bench", str(bench), "--protocol",
                         "mcq", "--max-new", "4", "--out", str(out)]) == 0
        reports.append(sha(out / "eval_mcq.json"))
    capsys.readouterr()
    assert reports[0] == reports[1]


# ----------------------------------------------------------- merge-adapter


def test_merge_zero_b_adapter_bit_equal(tmp_path, capsys):
    model = model_checkpoint(tmp_path, seed=3)
    lm = ckpt.load_model(model)
    adapters = L.attach_adapters(lm, L.LoraConfig(rank=4, alpha=8), seed=0)
    adapter_path = str(tmp_path / "fresh.adapter.mtckpt")
    ckpt.save_adapters(adapter_path, adapters)
    out_path = str(tmp_path / "merged.mtckpt")
    rc = cli.main(["merge-adapter", model, adapter_path, "--out", out_path])
    capsys.readouterr()
    assert rc == 0
    assert open(out_path, "rb").read() == open(model, "rb").read()


def test_merge_trained_adapter_matches_adapted_forward(tmp_path, capsys):
    import numpy as np
    from microtune.model import forward

    model = model_checkpoint(tmp_path, seed=4)
    lm = ckpt.load_model(model)
    adapters = L.attach_adapters(lm, L.LoraConfig(rank=4, alpha=8), seed=1)
    rng = np.random.default_rng(0)
    for a in adapters.values():
        a.B.data[:] = rng.normal(0, 0.02, size=a.B.shape)
    adapter_path = str(tmp_path / "trained.adapter.mtckpt")
    ckpt.save_adapters(adapter_path, adapters)
    out_path = str(tmp_path / "merged.mtckpt")
    assert cli.main(["merge-adapter", model, adapter_path, "--out", out_path]) == 0
    capsys.readouterr()
    merged = ckpt.load_model(out_path)
    ids = list(range(10))
    adapted = forward(lm, ids).data
    dense = forward(merged, ids).data
    assert np.abs(adapted - dense).max() <= 1e-9


def test_merge_shape_mismatch_fails(tmp_path, capsys):
    model = model_checkpoint(tmp_path, seed=5)
    other_cfg = ModelConfig(vocab_size=512, d_model=16, n_layers=1, n_heads=2,
                            d_ff=32, max_seq_len=64)
    other = DecoderLM(other_cfg, DecoderWeights.init_random(other_cfg, 0))
    adapters = L.attach_adapters(other, L.LoraConfig(rank=2, alpha=2), seed=0)
    adapter_path = str(tmp_path / "wrong.adapter.mtckpt")
    ckpt.save_adapters(adapter_path, adapters)
    rc = cli.main(["merge-adapter", model, adapter_path,
                   "--out", str(tmp_path / "m.mtckpt")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------- generate


def test_generate_max_new_zero_empty_exit_zero(tmp_path, capsys):
    model = model_checkpoint(tmp_path)
    rc = cli.main(["generate", model, "hello", "--max-new", "0"])
    assert rc == 0
    assert capsys.readouterr().out == "\n"


def test_generate_deterministic_and_writes_out(tmp_path, capsys):
    model = model_checkpoint(tmp_path)
    outs = []
    for sub in ("g1", "g2"):
        out = tmp_path / sub
        rc = cli.main(["generate", model, "say something", "--max-new", "8",
                       "--temperature", "0.7", "--seed", "5",
                       "--out", str(out)])
        assert rc == 0
        outs.append((out / "generation.txt").read_text())
        assert (out / "manifest.json").exists()
    capsys.readouterr()
    assert outs[0] == outs[1]


# ------------------------------------------------------------ prepare-data


def prep_spec(tmp_path, **spec) -> str:
    path = tmp_path / "prep.json"
    path.write_text(json.dumps(spec))
    return str(path)


def test_prepare_data_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = prep_spec(tmp_path, kind="chat", input=str(empty))
    out = tmp_path / "o"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["records"] == 0 and stats["examples"] == 0
    examples, _ = D.load_token_cache(out / "examples.mtcache")
    assert examples == []
    capsys.readouterr()


def test_prepare_data_duplicate_paragraph_dedup_hit(tmp_path, capsys):
    doc = tmp_path / "doc.jsonl"
    S.write_jsonl(doc, [{"text": "alpha beta gamma.\n\nalpha beta gamma.\n\ndelta."}])
    cfg = prep_spec(tmp_path, kind="plain", input=str(doc), max_seq_len=64)
    out = tmp_path / "o"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["dedup_hits"] == 1
    capsys.readouterr()


def test_prepare_data_reference_section_cut(tmp_path, capsys):
    doc = tmp_path / "doc.jsonl"
    S.write_jsonl(doc, [{"text": "intro text.\n\nReferences\n\n[1] dropped."}])
    cfg = prep_spec(tmp_path, kind="plain", input=str(doc), max_seq_len=64)
    out = tmp_path / "o"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
    examples, _ = D.load_token_cache(out / "examples.mtcache")
    text = D.detokenize(examples[0].input_ids)
    assert "dropped" not in text and "intro text." in text
    capsys.readouterr()


def test_prepare_data_kg_six_statements(tmp_path, capsys):
    tsv, labels, inv = S.kg_fixture(tmp_path)
    cfg = prep_spec(tmp_path, kind="kg", input=tsv, labels=labels,
                    inverses=inv, max_seq_len=64)
    out = tmp_path / "o"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["statements"] == 6
    capsys.readouterr()


def test_prepare_data_malformed_skipped_then_abort(tmp_path, capsys):
    mixed = tmp_path / "mixed.jsonl"
    rows = [json.dumps(r, sort_keys=True)
            for r in S.generate_records("nouns_defs", 10, seed=0)]
    mixed.write_text("\n".join(rows + ["{not json"]) + "\n")
    cfg = prep_spec(tmp_path, kind="chat", input=str(mixed))
    out = tmp_path / "o"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["records"] == 10 and stats["dropped"] == 1

    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(rows[:2] + ["{oops"] * 3) + "\n")
    cfg = prep_spec(tmp_path, kind="chat", input=str(bad))
    assert cli.main(["prepare-data", "--config", cfg,
                     "--out", str(tmp_path / "o2")]) == 2
    capsys.readouterr()


def test_prepare_data_does_not_mutate_input(tmp_path, capsys):
    doc = tmp_path / "doc.jsonl"
    S.write_jsonl(doc, [{"text": "alpha.\n\nbeta."}])
    before = sha(doc)
    cfg = prep_spec(tmp_path, kind="plain", input=str(doc))
    assert cli.main(["prepare-data", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 0
    assert sha(doc) == before
    capsys.readouterr()


def test_prepare_data_idempotent(tmp_path, capsys):
    doc = tmp_path / "doc.jsonl"
    S.write_jsonl(doc, [{"text": "alpha beta.\n\ngamma delta."}])
    cfg = prep_spec(tmp_path, kind="plain", input=str(doc), max_seq_len=64)
    hashes = []
    for sub in ("p1", "p2"):
        out = tmp_path / sub
        assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
        hashes.append((sha(out / "examples.mtcache"), sha(out / "stats.json"),
                       sha(out / "manifest.json")))
    assert hashes[0] == hashes[1]
    capsys.readouterr()
