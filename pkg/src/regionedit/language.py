"""Rule-based captioner, instruction writer and caption rewriter.

These replace the large language models of the editing recipe with
templates over a closed vocabulary, so that the text path and the scene
path of an edit can be checked against each other exactly.

Caption grammar::

    caption := "an empty gray canvas" | phrase ("and" phrase)*
    phrase  := "a" SIZE COLOR [ "crowned" | "collared" ] SHAPE

Instruction grammar::

    add a SIZE COLOR SHAPE [with a ACCESSORY]
    remove the COLOR SHAPE
    change the COLOR SHAPE to COLOR
    give the COLOR SHAPE a ACCESSORY
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    GrammarError,
    InfeasibleEditError,
    UnresolvedTargetError,
    VocabularyError,
)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink")
SIZES = ("small", "medium", "large")
ACCESSORIES = ("crown", "collar")
ACCESSORY_ADJ = {"crown": "crowned", "collar": "collared"}
_ADJ_ACCESSORY = {v: k for k, v in ACCESSORY_ADJ.items()}
OP_KINDS = ("add", "remove", "change", "give")

MAX_OBJECTS = 3
GRID = 4
MAX_TOKENS = 24
EMPTY_CAPTION = "an empty gray canvas"

PAD, START, END = "<pad>", "<start>", "<end>"
_WORDS = (
    [PAD, START, END]
    + ["a", "an", "and", "the", "with", "to", "empty", "gray", "canvas"]
    + list(OP_KINDS)
    + list(SIZES) + list(COLORS) + list(SHAPES) + list(ACCESSORIES)
    + list(ACCESSORY_ADJ.values())
)

PRODUCTIONS = (
    "add a <size> <color> <shape> [with a <accessory>]",
    "remove the <color> <shape>",
    "change the <color> <shape> to <color>",
    "give the <color> <shape> a <accessory>",
)


class Vocabulary:
    """Closed word list; a word's token id is its line number in the file."""

    def __init__(self, words: Sequence[str] = _WORDS):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        if len(self.words) > 256 + 3:
            raise ValueError("vocabulary exceeds 256 words")
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.index[PAD]
        self.start_id = self.index[START]
        self.end_id = self.index[END]

    def __len__(self):
        return len(self.words)

    def tokenize(self, text: str) -> list[int]:
        ids = [self.start_id]
        for w in text.split():
            if w not in self.index or w in (PAD, START, END):
                raise VocabularyError(f"out-of-vocabulary word {w!r}")
            ids.append(self.index[w])
        ids.append(self.end_id)
        if len(ids) > MAX_TOKENS:
            raise VocabularyError(f"text has {len(ids)} tokens, limit is {MAX_TOKENS}")
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        special = {self.pad_id, self.start_id, self.end_id}
        try:
            return " ".join(self.words[i] for i in ids if i not in special)
        except IndexError:
            raise VocabularyError("token id outside the vocabulary") from None

    def pad(self, ids: Sequence[int], length: int = MAX_TOKENS) -> np.ndarray:
        if len(ids) > length:
            raise VocabularyError(f"{len(ids)} tokens do not fit in {length}")
        out = np.full(length, self.pad_id, dtype=np.int64)
        out[: len(ids)] = ids
        return out

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path):
        return cls([w for w in Path(path).read_text().splitlines() if w])


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Phrase:
    size: str
    color: str
    shape: str
    accessory: str = "none"

    def render(self) -> str:
        adj = [ACCESSORY_ADJ[self.accessory]] if self.accessory != "none" else []
        return " ".join(["a", self.size, self.color, *adj, self.shape])


@dataclass(frozen=True)
class Caption:
    text: str
    token_ids: tuple

    @classmethod
    def from_text(cls, text: str) -> Caption:
        return cls(text, tuple(VOCAB.tokenize(text)))

    @classmethod
    def from_phrases(cls, phrases: Sequence[Phrase]) -> Caption:
        text = " and ".join(p.render() for p in phrases) if phrases else EMPTY_CAPTION
        return cls.from_text(text)

    def phrases(self) -> list[Phrase]:
        return parse_caption(self.text)


def parse_caption(text: str) -> list[Phrase]:
    if text == EMPTY_CAPTION:
        return []
    out = []
    for chunk in text.split(" and "):
        w = chunk.split()
        if len(w) == 5 and w[3] in _ADJ_ACCESSORY:
            acc = _ADJ_ACCESSORY[w[3]]
            w = w[:3] + w[4:]
        else:
            acc = "none"
        if len(w) != 4 or w[0] != "a" or w[1] not in SIZES or w[2] not in COLORS or w[3] not in SHAPES:
            raise GrammarError(f"not a caption phrase: {chunk!r}")
        out.append(Phrase(w[1], w[2], w[3], acc))
    return out


def describe(scene) -> Caption:
    """Template caption listing the scene's objects in order."""
    return Caption.from_phrases([Phrase(o.size, o.color, o.shape, o.accessory) for o in scene.objects])


@dataclass(frozen=True)
class Instruction:
    """A parsed editing instruction.

    ``color``/``shape`` name the target (or the new object for ``add``);
    ``size`` is only used by ``add``; ``new_color`` only by ``change``.
    """

    op: str
    color: str
    shape: str
    size: str | None = None
    new_color: str | None = None
    accessory: str = "none"

    def __post_init__(self):
        if self.op not in OP_KINDS:
            raise GrammarError(f"unknown edit kind {self.op!r}")

    @property
    def text(self) -> str:
        return render_instruction(self)


def render_instruction(ins: Instruction) -> str:
    if ins.op == "add":
        tail = f" with a {ins.accessory}" if ins.accessory != "none" else ""
        return f"add a {ins.size} {ins.color} {ins.shape}{tail}"
    if ins.op == "remove":
        return f"remove the {ins.color} {ins.shape}"
    if ins.op == "change":
        return f"change the {ins.color} {ins.shape} to {ins.new_color}"
    return f"give the {ins.color} {ins.shape} a {ins.accessory}"


def _grammar_error(text: str) -> GrammarError:
    listing = "; ".join(PRODUCTIONS)
    return GrammarError(f"cannot parse instruction {text!r}; expected one of: {listing}")


def parse_instruction(text: str) -> Instruction:
    w = text.strip().split()
    try:
        if w[0] == "add" and w[1] == "a" and w[2] in SIZES and w[3] in COLORS and w[4] in SHAPES:
            if len(w) == 5:
                return Instruction("add", w[3], w[4], size=w[2])
            if len(w) == 8 and w[5:7] == ["with", "a"] and w[7] in ACCESSORIES:
                return Instruction("add", w[3], w[4], size=w[2], accessory=w[7])
        elif len(w) >= 4 and w[1] == "the" and w[2] in COLORS and w[3] in SHAPES:
            if w[0] == "remove" and len(w) == 4:
                return Instruction("remove", w[2], w[3])
            if w[0] == "change" and len(w) == 6 and w[4] == "to" and w[5] in COLORS:
                return Instruction("change", w[2], w[3], new_color=w[5])
            if w[0] == "give" and len(w) == 6 and w[4] == "a" and w[5] in ACCESSORIES:
                return Instruction("give", w[2], w[3], accessory=w[5])
    except IndexError:
        pass
    raise _grammar_error(text)


def _find(phrases: list[Phrase], color: str, shape: str) -> int:
    for i, p in enumerate(phrases):
        if p.color == color and p.shape == shape:
            return i
    raise UnresolvedTargetError(f"no {color} {shape} in the description")


def apply_instruction(t_o: Caption, ins: Instruction) -> Caption:
    """Rewrite a caption so it describes the image after the edit."""
    phrases = t_o.phrases()
    if ins.op == "add":
        if len(phrases) >= MAX_OBJECTS:
            raise InfeasibleEditError("scene already holds the maximum number of objects")
        if any(p.color == ins.color and p.shape == ins.shape for p in phrases):
            raise InfeasibleEditError(f"a {ins.color} {ins.shape} is already present")
        phrases.append(Phrase(ins.size, ins.color, ins.shape, ins.accessory))
        return Caption.from_phrases(phrases)
    i = _find(phrases, ins.color, ins.shape)
    if ins.op == "remove":
        del phrases[i]
    elif ins.op == "change":
        if ins.new_color == ins.color or any(
            p.color == ins.new_color and p.shape == ins.shape for p in phrases
        ):
            raise InfeasibleEditError(f"cannot recolor to {ins.new_color}")
        phrases[i] = replace(phrases[i], color=ins.new_color)
    else:
        if phrases[i].accessory == ins.accessory:
            raise InfeasibleEditError(f"object already has a {ins.accessory}")
        phrases[i] = replace(phrases[i], accessory=ins.accessory)
    return Caption.from_phrases(phrases)


def feasible_instructions(scene) -> dict[str, list[Instruction]]:
    """Every instruction the grammar allows on ``scene``, grouped by kind."""
    objs = list(scene.objects)
    taken = {(o.color, o.shape) for o in objs}
    out: dict[str, list[Instruction]] = {k: [] for k in OP_KINDS}
    if len(objs) < MAX_OBJECTS and len(objs) < GRID * GRID:
        for size in SIZES:
            for color in COLORS:
                for shape in SHAPES:
                    if (color, shape) in taken:
                        continue
                    for acc in ("none",) + ACCESSORIES:
                        out["add"].append(Instruction("add", color, shape, size=size, accessory=acc))
    for o in objs:
        out["remove"].append(Instruction("remove", o.color, o.shape))
        for c in COLORS:
            if c != o.color and (c, o.shape) not in taken:
                out["change"].append(Instruction("change", o.color, o.shape, new_color=c))
        for acc in ACCESSORIES:
            if acc != o.accessory:
                out["give"].append(Instruction("give", o.color, o.shape, accessory=acc))
    return out


def propose_instruction(caption: Caption, scene, seed: int, op_kind: str | None = None) -> Instruction:
    """Pick a feasible instruction: a uniform edit kind, then uniform details."""
    if describe(scene).text != caption.text:
        raise UnresolvedTargetError("caption does not describe the given scene")
    options = feasible_instructions(scene)
    kinds = [k for k in OP_KINDS if options[k] and (op_kind is None or k == op_kind)]
    if not kinds:
        what = op_kind or "any"
        raise InfeasibleEditError(f"no feasible {what} instruction for this scene")
    rng = np.random.default_rng(seed)
    kind = kinds[rng.integers(len(kinds))]
    pool = options[kind]
    return pool[rng.integers(len(pool))]
