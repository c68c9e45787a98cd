"""Sentence/annotation types, JSON-lines IO, synthetic corpora, batching.

Dataset files are UTF-8 JSON lines, one sentence per line:

    {"tokens": ["w", ...], "entities": [{"start": 0, "end": 2, "type": "T"}, ...]}

with ``end`` inclusive. The companion meta file is ``{"types": [...]}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


class DatasetError(ValueError):
    """Malformed dataset file or record."""


class AnnotationError(ValueError):
    """Entity span or type outside the sentence/inventory bounds."""


@dataclass(frozen=True)
class EntityAnnotation:
    """One gold entity: inclusive word span plus type index."""

    left: int
    right: int
    type_id: int

    def __post_init__(self):
        if not (0 <= self.left <= self.right):
            raise AnnotationError(f"invalid span ({self.left}, {self.right})")
        if self.type_id < 0:
            raise AnnotationError(f"negative type id {self.type_id}")


@dataclass
class SentenceExample:
    """A token sequence with its (possibly nested, possibly empty) gold set."""

    tokens: list[str]
    entities: list[EntityAnnotation] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            raise DatasetError("sentence with no tokens")
        seen = set()
        for e in self.entities:
            if e.right >= len(self.tokens):
                raise AnnotationError(
                    f"span ({e.left}, {e.right}) exceeds sentence length {len(self.tokens)}"
                )
            triple = (e.left, e.right, e.type_id)
            if triple in seen:
                raise AnnotationError(f"duplicate entity triple {triple}")
            seen.add(triple)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DatasetMeta:
    """Ordered type inventory plus the token vocabulary."""

    types: list[str]
    vocab: dict[str, int]

    def __post_init__(self):
        if not self.types:
            raise DatasetError("empty type inventory")
        if len(set(self.types)) != len(self.types):
            raise DatasetError("duplicate type names")

    @property
    def type_count(self) -> int:
        return len(self.types)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def type_id(self, name: str) -> int:
        try:
            return self.types.index(name)
        except ValueError:
            raise AnnotationError(f"unknown entity type {name!r}") from None

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.vocab.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    @classmethod
    def build(cls, examples: list[SentenceExample], types: list[str] | None = None) -> "DatasetMeta":
        """Vocabulary and (when not given) type inventory in first-seen order."""
        vocab = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for ex in examples:
            for tok in ex.tokens:
                if tok not in vocab:
                    vocab[tok] = len(vocab)
        if types is None:
            raise DatasetError("type inventory required to build metadata")
        return cls(types=list(types), vocab=vocab)


def load_meta(path: str | Path) -> list[str]:
    """Read a {"types": [...]} meta file."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    types = payload.get("types")
    if not isinstance(types, list) or not all(isinstance(t, str) for t in types):
        raise DatasetError(f"{path}: meta file must contain a list of type names")
    return types


def save_meta(path: str | Path, types: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"types": list(types)}, fh)
        fh.write("\n")


def load_dataset(
    path: str | Path, meta: DatasetMeta | None = None
) -> tuple[list[SentenceExample], DatasetMeta]:
    """Parse a JSON-lines file; build or validate against the given metadata.

    Without ``meta``, the type inventory is collected in first-appearance
    order and the vocabulary is built from the file's tokens. With ``meta``,
    tokens map through its vocabulary (unknowns allowed) and unknown type
    names are rejected.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({err.msg})") from None
            if not isinstance(obj, dict) or "tokens" not in obj:
                raise DatasetError(f"{path}:{lineno}: record must carry a 'tokens' list")
            tokens = obj["tokens"]
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise DatasetError(f"{path}:{lineno}: 'tokens' must be a list of strings")
            entities = obj.get("entities", [])
            if not isinstance(entities, list):
                raise DatasetError(f"{path}:{lineno}: 'entities' must be a list")
            records.append((lineno, tokens, entities))

    if meta is None:
        type_names: list[str] = []
        for _, _, entities in records:
            for ent in entities:
                name = ent.get("type") if isinstance(ent, dict) else None
                if isinstance(name, str) and name not in type_names:
                    type_names.append(name)
        if not type_names:
            type_names = ["ENT"]
        resolved_types = type_names
    else:
        resolved_types = meta.types

    examples = []
    for lineno, tokens, entities in records:
        gold = []
        for ent in entities:
            if not isinstance(ent, dict) or not {"start", "end", "type"} <= set(ent):
                raise DatasetError(f"{path}:{lineno}: entity needs start/end/type")
            name = ent["type"]
            if name not in resolved_types:
                raise AnnotationError(f"{path}:{lineno}: unknown entity type {name!r}")
            try:
                gold.append(
                    EntityAnnotation(int(ent["start"]), int(ent["end"]), resolved_types.index(name))
                )
            except AnnotationError as err:
                raise AnnotationError(f"{path}:{lineno}: {err}") from None
        try:
            examples.append(SentenceExample(tokens=list(tokens), entities=gold))
        except (DatasetError, AnnotationError) as err:
            raise type(err)(f"{path}:{lineno}: {err}") from None

    if meta is None:
        meta = DatasetMeta.build(examples, types=resolved_types)
    return examples, meta


def save_dataset(path: str | Path, examples: list[SentenceExample], meta: DatasetMeta) -> None:
    """Write JSON lines in the external format (inclusive end indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {
                "tokens": ex.tokens,
                "entities": [
                    {"start": e.left, "end": e.right, "type": meta.types[e.type_id]}
                    for e in ex.entities
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False))
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic corpus generation


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic nested-span corpus."""

    sentences: int = 64
    vocab_size: int = 40
    min_length: int = 8
    max_length: int = 16
    type_count: int = 4
    nesting_ratio: float = 0.3
    max_entities: int = 4

    def validate(self) -> None:
        if min(self.sentences, self.vocab_size, self.min_length, self.max_length,
               self.type_count, self.max_entities) < 1:
            raise DatasetError("synthetic spec values must be positive")
        if not 0.0 <= self.nesting_ratio < 1.0:
            raise DatasetError(f"nesting ratio must be in [0, 1), got {self.nesting_ratio}")
        if self.min_length > self.max_length:
            raise DatasetError("min_length exceeds max_length")
        if self.max_entities > self.min_length:
            raise DatasetError("max_entities exceeds the shortest sentence length")
        if self.vocab_size < 3 * self.type_count + 2:
            raise DatasetError("vocab too small for type markers plus filler words")


def nesting_ratio(examples: list[SentenceExample]) -> float:
    """Share of entities strictly contained in another entity of the sentence."""
    total = nested = 0
    for ex in examples:
        for e in ex.entities:
            total += 1
            for other in ex.entities:
                if other is e:
                    continue
                if other.left <= e.left and e.right <= other.right and (
                    other.left < e.left or e.right < other.right
                ):
                    nested += 1
                    break
    return nested / total if total else 0.0


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[list[SentenceExample], DatasetMeta]:
    """Deterministic corpus with plantable nesting and type-marked boundaries.

    Every span of type t begins with marker word ``bt``/ends with ``et``
    (single-token spans use ``st``), so boundaries and types are decodable
    from token identity and the task is learnable by a small model. Each
    sentence plants the number of nested spans needed to keep the corpus-wide
    nesting ratio on target.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    types = [f"T{t}" for t in range(spec.type_count)]
    fillers = [f"w{j}" for j in range(spec.vocab_size - 3 * spec.type_count)]

    examples = []
    total_spans = 0
    nested_spans = 0
    for _ in range(spec.sentences):
        n = int(rng.integers(spec.min_length, spec.max_length + 1))
        tokens = [fillers[int(rng.integers(len(fillers)))] for _ in range(n)]
        want = int(rng.integers(1, spec.max_entities + 1))
        desired_nested = int(np.floor(spec.nesting_ratio * (total_spans + want) + 0.5))
        plan_nested = min(want - 1, max(0, desired_nested - nested_spans))
        placed: list[tuple[int, int, int, bool]] = []
        marked: set[int] = set()

        def place(left: int, right: int, nested: bool) -> None:
            type_id = int(rng.integers(spec.type_count))
            if left == right:
                tokens[left] = f"s{type_id}"
            else:
                tokens[left] = f"b{type_id}"
                tokens[right] = f"e{type_id}"
            marked.update((left, right))
            placed.append((left, right, type_id, nested))

        def top_level_span(min_len: int = 1, pref_len: int | None = None):
            # top-level spans stay disjoint from everything already placed
            occupied = np.zeros(n, dtype=bool)
            for l1, r1, _, _ in placed:
                occupied[l1 : r1 + 1] = True
            gaps = []
            start = None
            for j in range(n + 1):
                if j < n and not occupied[j]:
                    start = j if start is None else start
                elif start is not None:
                    gaps.append((start, j - 1))
                    start = None
            gaps = [g for g in gaps if g[1] - g[0] + 1 >= min_len]
            if not gaps:
                return None
            gl, gr = gaps[int(rng.integers(len(gaps)))]
            width = gr - gl + 1
            if pref_len is not None:
                length = min(width, pref_len)
            else:
                length = int(rng.integers(1, min(width, 5) + 1))
            lc = gl + int(rng.integers(0, width - length + 1))
            return (lc, lc + length - 1)

        def nested_span():
            hosts = [s for s in placed if s[1] - s[0] >= 2]
            rng.shuffle(hosts)
            for hl, hr, _, _ in hosts:
                for _ in range(30):
                    lc = int(rng.integers(hl + 1, hr))
                    rc = int(rng.integers(lc, hr))
                    interior = set(range(lc, rc + 1))
                    if {lc, rc} & marked:
                        continue
                    if any((l1, r1) == (lc, rc) for l1, r1, _, _ in placed):
                        continue
                    if any(l1 in interior or r1 in interior
                           for l1, r1, _, _ in placed if not (l1 <= lc and rc <= r1)):
                        continue
                    return (lc, rc)
            return None

        if plan_nested:
            host = top_level_span(min_len=3, pref_len=min(n, 2 * plan_nested + 3))
            if host is not None:
                place(host[0], host[1], nested=False)
                total_spans += 1
        while len(placed) < want:
            span = None
            nested_now = False
            if sum(1 for s in placed if s[3]) < plan_nested:
                span = nested_span()
                nested_now = span is not None
            if span is None:
                span = top_level_span()
            if span is None:
                break
            place(span[0], span[1], nested_now)
            total_spans += 1
            nested_spans += int(nested_now)

        entities = [EntityAnnotation(l, r, t) for l, r, t, _ in placed]
        examples.append(SentenceExample(tokens=tokens, entities=entities))

    meta = DatasetMeta.build(examples, types=types)
    return examples, meta


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded id matrix plus per-sentence lengths and gold annotations."""

    token_ids: np.ndarray
    lengths: list[int]
    entities: list[list[EntityAnnotation]]

    def __len__(self) -> int:
        return len(self.lengths)


def batch_pad(examples: list[SentenceExample], batch_size: int, meta: DatasetMeta) -> list[Batch]:
    """Group in order and pad each batch to its own max length with PAD_ID."""
    if not examples:
        raise DatasetError("cannot batch an empty dataset")
    if batch_size < 1:
        raise DatasetError("batch_size must be positive")
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        width = max(len(ex) for ex in chunk)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        lengths = []
        entities = []
        for row, ex in enumerate(chunk):
            encoded = meta.encode(ex.tokens)
            ids[row, : len(encoded)] = encoded
            lengths.append(len(encoded))
            entities.append(list(ex.entities))
        batches.append(Batch(token_ids=ids, lengths=lengths, entities=entities))
    return batches
