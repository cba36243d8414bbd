"""Benchmark evaluation: prompt construction, answer extraction, scoring.

Two protocols:
- "fewshot-cot": k worked examples ("Question: ...\\nAnswer: {rationale}
  #### {gold}\\n\\n") followed by the bare target question; answers are
  numeric and read from the final-answer marker.
- "mcq": zero-shot lettered options, answered with a single letter.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import ConfigError, ContractError, RecordError

LETTERS = "ABCDE"
ANSWER_MARKER = "####"
MCQ_INSTRUCTION = "Answer with only the letter of the correct choice."

PROTOCOLS = ("fewshot-cot", "mcq")


@dataclass
class BenchmarkItem:
    id: str
    question: str
    gold: str
    options: list[str] | None = None
    rationale: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkItem":
        try:
            return cls(
                id=str(d["id"]), question=d["question"], gold=str(d["gold"]),
                options=d.get("options"), rationale=d.get("rationale"),
            )
        except KeyError as e:
            raise RecordError(f"benchmark item missing {e.args[0]!r}") from None


@dataclass
class ItemResult:
    id: str
    output: str
    extracted: str | None
    verdict: str  # correct | incorrect | no-extract | overflow


@dataclass
class EvalReport:
    benchmark: str
    protocol: str
    n_items: int
    n_correct: int
    accuracy: float
    results: list[ItemResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "protocol": self.protocol,
            "n_items": self.n_items,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "results": [vars(r) for r in self.results],
        }


# ------------------------------------------------------------------- prompts


def build_fewshot_cot_prompt(item: BenchmarkItem, exemplars: list[BenchmarkItem], k: int) -> str:
    """k worked examples then the target question. Exemplars are taken in
    ascending id order; the target never appears as its own exemplar."""
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    pool = sorted((e for e in exemplars if e.id != item.id), key=lambda e: e.id)
    if k > len(pool):
        raise ContractError(f"need {k} exemplars, only {len(pool)} available")
    blocks = []
    for e in pool[:k]:
        if not e.rationale:
            raise RecordError(f"exemplar {e.id} has no rationale")
        blocks.append(f"Question: {e.question}\nAnswer: {e.rationale} {ANSWER_MARKER} {e.gold}\n\n")
    return "".join(blocks) + f"Question: {item.question}\nAnswer:"


def build_mcq_prompt(item: BenchmarkItem) -> str:
    if not item.options or len(item.options) < 2:
        raise RecordError(f"item {item.id} is not multiple-choice")
    if len(item.options) > len(LETTERS):
        raise RecordError(f"item {item.id} has more than {len(LETTERS)} options")
    lines = [item.question]
    lines += [f"({LETTERS[i]}) {opt}" for i, opt in enumerate(item.options)]
    lines.append(MCQ_INSTRUCTION)
    return "\n".join(lines)


# ---------------------------------------------------------------- extraction

_PAREN_LETTER = re.compile(r"\(([A-E])\)")
_ANSWER_IS = re.compile(r"answer\s+is:?\s*\(?([A-E])\)?", re.IGNORECASE)
_BARE_LETTER_LINE = re.compile(r"^\s*([A-E])\s*[.)]?\s*$", re.MULTILINE)
_NUMBER = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?")


def extract_letter(text: str) -> str | None:
    """Last standalone answer letter A-E: "(X)", "answer is X", or a line
    consisting of the letter alone. None when nothing matches."""
    best: tuple[int, str] | None = None
    for pattern in (_PAREN_LETTER, _ANSWER_IS, _BARE_LETTER_LINE):
        for m in pattern.finditer(text):
            pos = m.start(1)
            if best is None or pos >= best[0]:
                best = (pos, m.group(1).upper())
    return best[1] if best else None


def _normalize_number(token: str) -> str | None:
    token = token.strip().replace(",", "")
    while token.endswith("."):
        token = token[:-1]
    if not token:
        return None
    return token if _NUMBER.fullmatch(token) else None


def has_answer_marker(text: str) -> bool:
    """True when a final-answer marker is present and followed by a token."""
    idx = text.rfind(ANSWER_MARKER)
    if idx < 0:
        return False
    tail = text[idx + len(ANSWER_MARKER):].strip()
    return bool(tail.split())


def extract_number(text: str) -> str | None:
    """The token after the last final-answer marker, else the last number
    anywhere in the text. Commas and trailing periods are stripped."""
    idx = text.rfind(ANSWER_MARKER)
    if idx >= 0:
        tail = text[idx + len(ANSWER_MARKER):].strip().split()
        if tail:
            norm = _normalize_number(tail[0])
            if norm is not None:
                return norm
    matches = _NUMBER.findall(text)
    if matches:
        return _normalize_number(matches[-1])
    return None


def numbers_equal(a: str, b: str) -> bool:
    try:
        return float(a.replace(",", "")) == float(b.replace(",", ""))
    except ValueError:
        return a == b


# ----------------------------------------------------------------- evaluate


def evaluate(
    responder,
    items: list[BenchmarkItem],
    protocol: str,
    k: int = 8,
    exemplars: list[BenchmarkItem] | None = None,
    benchmark: str = "benchmark",
) -> EvalReport:
    """Score every item. responder is a callable (prompt, item) -> str; a
    ContractError from it (e.g. the prompt exceeds the model context) marks
    the item "overflow" and counts as incorrect."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; valid: {PROTOCOLS}")
    if not items:
        raise ContractError("benchmark has no items")
    if protocol == "fewshot-cot" and exemplars is None:
        exemplars = [it for it in items if it.rationale]
    results: list[ItemResult] = []
    n_correct = 0
    for item in sorted(items, key=lambda it: it.id):
        if protocol == "mcq":
            prompt = build_mcq_prompt(item)
        else:
            prompt = build_fewshot_cot_prompt(item, exemplars, k)
        try:
            output = responder(prompt, item)
        except ContractError:
            results.append(ItemResult(item.id, "", None, "overflow"))
            continue
        if protocol == "mcq":
            extracted = extract_letter(output)
            good = extracted is not None and extracted == item.gold.upper()
        else:
            extracted = extract_number(output)
            good = extracted is not None and numbers_equal(extracted, item.gold)
        if extracted is None:
            verdict = "no-extract"
        else:
            verdict = "correct" if good else "incorrect"
        n_correct += int(good)
        results.append(ItemResult(item.id, output, extracted, verdict))
    return EvalReport(
        benchmark=benchmark,
        protocol=protocol,
        n_items=len(items),
        n_correct=n_correct,
        accuracy=n_correct / len(items),
        results=results,
    )


def oracle_responder(prefix: str = "The answer is") -> callable:
    """Scripted responder that answers from the item's gold label; closes
    the loop for harness self-tests."""

    def respond(prompt: str, item: BenchmarkItem) -> str:
        if item.options is not None:
            return f"{prefix} ({item.gold.upper()})."
        return f"worked it out {ANSWER_MARKER} {item.gold}"

    return respond


def model_responder(lm, max_new: int = 48, temperature: float = 0.0, seed: int = 0,
                    chat_wrap: bool = False) -> callable:
    """Responder backed by a model checkpoint; greedy by default."""
    from . import data as D
    from .model import generate

    def respond(prompt: str, item: BenchmarkItem) -> str:
        text = prompt
        if chat_wrap:
            text = D.render_generation_prompt([{"role": "user", "content": prompt}])
        ids = D.tokenize(text)
        out = generate(lm, ids, max_new=max_new, temperature=temperature, seed=seed,
                       stop_token=D.EOT_ID)
        return D.detokenize_lossy(out)

    return respond


def load_benchmark(path) -> list[BenchmarkItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                items.append(BenchmarkItem.from_dict(json.loads(line)))
            except (json.JSONDecodeError, RecordError) as e:
                raise RecordError(f"{path} line {lineno}: {e}") from None
    ids = [it.id for it in items]
    if len(set(ids)) != len(ids):
        raise RecordError(f"{path}: duplicate item ids")
    return items
