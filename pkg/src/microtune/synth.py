"""Deterministic synthetic stand-in corpora.

The training recipes were built around domain corpora that cannot ship with
the code, so every named source has a generator that produces records of the
same kind and relative size, seeded and reproducible. Content is short on
purpose: the byte-level tokenizer makes every character a token.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .errors import ConfigError

ADJECTIVES = [
    "pooled", "robust", "ordinal", "marginal", "conditional", "empirical",
    "censored", "stratified", "weighted", "partial", "nested", "paired",
]
NOUNS = [
    "mean", "variance", "estimator", "quantile", "residual", "prior",
    "likelihood", "contrast", "design", "hazard", "moment", "score",
]
TOPICS = [
    "sampling error", "model fit", "group spread", "a trend", "an outlier",
    "bias", "uncertainty", "a confound", "noise", "drift",
]
DEF_TEMPLATES = [
    "a {term} summarizes {topic} in one number.",
    "the {term} measures {topic} across repeated samples.",
    "a {term} is the value that balances {topic} in a fitted model.",
    "the {term} tracks {topic} after adjusting for the design.",
]
QA_OPENERS = [
    "what is a {term}?", "define {term}.", "explain the {term} briefly.",
    "what does {term} mean?",
]


def _term(rng: random.Random) -> str:
    return f"{rng.choice(ADJECTIVES)} {rng.choice(NOUNS)}"


def _definition(rng: random.Random, term: str) -> str:
    return rng.choice(DEF_TEMPLATES).format(term=term, topic=rng.choice(TOPICS))


# ------------------------------------------------------------- arithmetic

OPS = ("mean", "sum", "difference", "product", "range", "median")


def _arith_problem(rng: random.Random) -> tuple[str, str, str]:
    """(question, reasoning, answer) with an exact integer answer."""
    op = rng.choice(OPS)
    if op == "mean":
        k = rng.randint(3, 5)
        m = rng.randint(2, 12)
        vals = [m] * k
        d = rng.randint(0, 3)
        vals[0] += d
        vals[1] -= d
        rng.shuffle(vals)
        q = f"what is the mean of {', '.join(map(str, vals))}?"
        s = sum(vals)
        return q, f"the values sum to {s}. {s} / {k} = {m}.", str(m)
    if op == "sum":
        a, b = rng.randint(3, 60), rng.randint(3, 60)
        return (f"what is {a} plus {b}?", f"adding gives {a} + {b} = {a + b}.",
                str(a + b))
    if op == "difference":
        a = rng.randint(20, 90)
        b = rng.randint(1, a - 1)
        return (f"what is {a} minus {b}?", f"subtracting gives {a} - {b} = {a - b}.",
                str(a - b))
    if op == "product":
        a, b = rng.randint(2, 12), rng.randint(2, 12)
        return (f"what is {a} times {b}?", f"multiplying gives {a} * {b} = {a * b}.",
                str(a * b))
    if op == "range":
        vals = rng.sample(range(1, 40), rng.randint(3, 5))
        q = f"what is the range of {', '.join(map(str, vals))}?"
        lo, hi = min(vals), max(vals)
        return q, f"the largest is {hi} and the smallest is {lo}. {hi} - {lo} = {hi - lo}.", str(hi - lo)
    vals = rng.sample(range(1, 40), rng.choice((3, 5)))
    q = f"what is the median of {', '.join(map(str, vals))}?"
    med = sorted(vals)[len(vals) // 2]
    return q, f"sorted, the middle value is {med}.", str(med)


# ------------------------------------------------------------- record kinds


def _chat(*turns: tuple[str, str]) -> dict:
    return {"messages": [{"role": r, "content": c} for r, c in turns]}


def definition_records(n: int, seed: int) -> list[dict]:
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        term = _term(rng)
        out.append(_chat(("user", rng.choice(QA_OPENERS).format(term=term)),
                         ("assistant", _definition(rng, term))))
    return out


def cot_records(n: int, seed: int) -> list[dict]:
    """Worked arithmetic as chat, answer flagged with the #### marker."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        q, reasoning, answer = _arith_problem(rng)
        out.append(_chat(("user", q), ("assistant", f"{reasoning} #### {answer}")))
    return out


def grpo_records(n: int, seed: int) -> list[dict]:
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        q, reasoning, answer = _arith_problem(rng)
        out.append({"question": q, "reasoning": reasoning, "answer": answer})
    return out


def preference_records(n: int, seed: int) -> list[dict]:
    """Chosen = correct arithmetic, rejected = same text with a corrupted
    final value."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        q, reasoning, answer = _arith_problem(rng)
        wrong = str(int(answer) + rng.choice((-3, -2, -1, 1, 2, 3)))
        out.append({
            "prompt": q,
            "chosen": f"{reasoning} #### {answer}",
            "rejected": f"{reasoning.replace(answer, wrong)} #### {wrong}",
        })
    return out


INSTRUCTION_POOLS = {
    "plain-tasks": [
        ("list two properties of a {term}.",
         "a {term} is {p1} and {p2}."),
        ("give one use of a {term}.",
         "a {term} helps when comparing {topic}."),
        ("is a {term} affected by {topic}? answer yes or no with a reason.",
         "yes, because {topic} shifts the values it is computed from."),
    ],
    "varied-tasks": [
        ("rewrite in plain words: the {term} captures {topic}.",
         "the {term} is a simple number that describes {topic}."),
        ("name the opposite concern of {topic}.",
         "the usual counterpart of {topic} is stability across samples."),
        ("complete the sentence: a larger {term} suggests ...",
         "a larger {term} suggests more {topic} in the data."),
    ],
    "short-tasks": [
        ("one sentence: why watch {topic}?",
         "because unchecked {topic} distorts every later estimate."),
        ("true or false: a {term} can be negative.",
         "true for centered quantities, false for squared ones."),
    ],
}
PROPERTIES = ["scale free", "easy to compute", "sensitive to outliers",
              "bounded", "unbiased under the design", "stable in large samples"]


def instruction_records(n: int, seed: int, pool: str) -> list[dict]:
    rng = random.Random(seed)
    templates = INSTRUCTION_POOLS[pool]
    out = []
    for _ in range(n):
        u, a = rng.choice(templates)
        slots = {
            "term": _term(rng), "topic": rng.choice(TOPICS),
            "p1": rng.choice(PROPERTIES), "p2": rng.choice(PROPERTIES),
        }
        out.append(_chat(("user", u.format(**slots)), ("assistant", a.format(**slots))))
    return out


def conversation_records(n: int, seed: int) -> list[dict]:
    """Two-exchange chats: a question, then a follow-up."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        term = _term(rng)
        out.append(_chat(
            ("user", f"what is a {term}?"),
            ("assistant", _definition(rng, term)),
            ("user", "when would it mislead?"),
            ("assistant", f"it misleads when {rng.choice(TOPICS)} dominates the sample."),
        ))
    return out


def forum_records(n: int, seed: int) -> list[dict]:
    """Question-and-answer pairs in a forum register."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        term = _term(rng)
        q = rng.choice([
            f"why does my {term} keep changing between runs?",
            f"how do i report a {term} honestly?",
            f"is it wrong to drop points before taking the {term}?",
        ])
        a = (f"{_definition(rng, term)} check {rng.choice(TOPICS)} first, "
             f"then recompute on the full sample.")
        out.append(_chat(("user", q), ("assistant", a)))
    return out


def corpus_records(n: int, seed: int) -> list[dict]:
    """Plain paragraphs in an abstract-like register."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        t1, t2 = _term(rng), _term(rng)
        sents = [
            f"we study the {t1} under {rng.choice(TOPICS)}.",
            _definition(rng, t1),
            f"comparisons against the {t2} show where the two disagree.",
            f"the gap widens as {rng.choice(TOPICS)} grows.",
        ]
        out.append({"text": " ".join(rng.sample(sents, len(sents)))})
    return out


def statement_records(n: int, seed: int) -> list[dict]:
    """Plain single-sentence facts in subject verb object form, the shape
    verbalized graph triplets take."""
    rng = random.Random(seed)
    rels = [
        "is a kind of", "is computed from", "is robust to",
        "is paired with", "feeds into",
    ]
    out = []
    for _ in range(n):
        out.append({"text": f"the {_term(rng)} {rng.choice(rels)} the {_term(rng)}."})
    return out


# ------------------------------------------------------------ source registry


@dataclass(frozen=True)
class SourceSpec:
    name: str
    kind: str  # chat | preference | grpo | plain
    full_size: int


SOURCES: dict[str, SourceSpec] = {s.name: s for s in [
    SourceSpec("nouns_defs", "chat", 1203),
    SourceSpec("stat_cot", "chat", 1207),
    SourceSpec("stat_grpo", "grpo", 2255),
    SourceSpec("finetome", "chat", 20000),
    SourceSpec("gsm8k_train", "grpo", 7473),
    SourceSpec("s2orc", "plain", 7496),
    SourceSpec("dolly", "chat", 15000),
    SourceSpec("openhermes", "chat", 100000),
    SourceSpec("stat_dpo", "preference", 2382),
    SourceSpec("math_dpo", "preference", 2393),
    SourceSpec("cross_validated", "chat", 9071),
    SourceSpec("knowledge_graph", "plain", 8414),
    SourceSpec("stat_conversation", "chat", 1054),
]}

_GENERATORS = {
    "nouns_defs": definition_records,
    "stat_cot": cot_records,
    "stat_grpo": grpo_records,
    "gsm8k_train": grpo_records,
    "finetome": lambda n, s: instruction_records(n, s, "varied-tasks"),
    "dolly": lambda n, s: instruction_records(n, s, "plain-tasks"),
    "openhermes": lambda n, s: instruction_records(n, s, "short-tasks"),
    "s2orc": corpus_records,
    "stat_dpo": preference_records,
    "math_dpo": preference_records,
    "cross_validated": forum_records,
    "knowledge_graph": statement_records,
    "stat_conversation": conversation_records,
}


def generate_records(source: str, n: int, seed: int) -> list[dict]:
    """n records for a named source; (source, n, seed) fully determine the
    output. Each source seeds its own stream so mixtures stay stable when
    one source's count changes."""
    if source not in _GENERATORS:
        raise ConfigError(f"unknown source {source!r}; valid: {sorted(_GENERATORS)}")
    if n < 1:
        raise ConfigError(f"record count must be >= 1, got {n}")
    stream = seed * 1000003 + len(source) * 101 + sum(source.encode())
    return _GENERATORS[source](n, stream)


# ------------------------------------------------------------- benchmarks


def mcq_benchmark_items(n: int, seed: int) -> list[dict]:
    """Multiple-choice items: half numeric, half definition matching."""
    rng = random.Random(seed)
    items = []
    for i in range(n):
        if i % 2 == 0:
            q, _, answer = _arith_problem(rng)
            correct = int(answer)
            opts = {correct}
            while len(opts) < 4:
                opts.add(correct + rng.choice((-4, -3, -2, -1, 1, 2, 3, 4)))
            options = [str(v) for v in rng.sample(sorted(opts), 4)]
            gold = "ABCD"[options.index(answer)]
        else:
            term = _term(rng)
            definition = _definition(rng, term).replace(term, "this quantity")
            q = f"which term is described as: {definition}"
            options = [term]
            while len(options) < 4:
                alt = _term(rng)
                if alt != term and alt not in options:
                    options.append(alt)
            rng.shuffle(options)
            gold = "ABCD"[options.index(term)]
        items.append({"id": f"mcq-{i:03d}", "question": q,
                      "gold": gold, "options": options})
    return items


def numeric_benchmark_items(n: int, seed: int) -> list[dict]:
    """Free-form numeric items with rationales, so any item can serve as a
    worked exemplar for the others."""
    rng = random.Random(seed)
    return [
        {"id": f"num-{i:03d}", "question": q, "gold": answer, "rationale": reasoning}
        for i, (q, reasoning, answer) in ((j, _arith_problem(rng)) for j in range(n))
    ]


def write_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# --------------------------------------------------------------- kg fixture


def kg_fixture(dir_path) -> tuple[str, str, str]:
    """A small triplet file with its label map and inverse rules, for
    exercising the graph-to-text path end to end."""
    import os

    triplets = [
        ("t_test", "is_a", "hyp_test"),
        ("anova", "is_a", "hyp_test"),
        ("t_test", "uses", "sample_mean"),
        ("anova", "uses", "group_variance"),
        ("t_test", "is_a", "hyp_test"),  # duplicate on purpose
    ]
    labels = {
        "t_test": "t-test", "anova": "analysis of variance",
        "hyp_test": "hypothesis test", "sample_mean": "sample mean",
        "group_variance": "group variance",
        "is_a": "is a", "uses": "uses", "has_subtype": "has subtype",
    }
    # inverse values are predicate identifiers, resolved via the label map
    inverses = {"is_a": "has_subtype"}
    tsv = os.path.join(dir_path, "triplets.tsv")
    with open(tsv, "w", encoding="utf-8") as fh:
        for s, p, o in triplets:
            fh.write(f"{s}\t{p}\t{o}\n")
    labels_path = os.path.join(dir_path, "labels.json")
    with open(labels_path, "w", encoding="utf-8") as fh:
        json.dump(labels, fh, sort_keys=True)
    inverses_path = os.path.join(dir_path, "inverses.json")
    with open(inverses_path, "w", encoding="utf-8") as fh:
        json.dump(inverses, fh, sort_keys=True)
    return tsv, labels_path, inverses_path
