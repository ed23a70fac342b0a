"""Click-log sessionization: parsing, filtering, splitting, instance generation.

The pipeline is: parse raw logs into sessions -> filter rare items and
short sessions to a fixpoint (building the vocabulary) -> split train/test
by session end time -> expand each session into (prefix, next-item)
labeled instances.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace

from .errors import DataError

log = logging.getLogger("srgi.corpus")

TRAIN = "train"
TEST = "test"

FORMATS = ("event_tsv", "session_lines")


@dataclass
class Session:
    """One chronologically ordered interaction sequence.

    ``items`` holds raw tokens right after parsing and vocabulary indices
    once :func:`filter_corpus` has run.
    """

    id: int
    items: list
    end_time: int = 0
    split: str = TRAIN


@dataclass
class Vocabulary:
    index_of: dict
    token_of: list

    @property
    def size(self) -> int:
        return len(self.token_of)

    def index(self, token: str) -> int:
        try:
            return self.index_of[token]
        except KeyError:
            raise DataError(f"unknown item token: {token!r}") from None

    def token(self, index: int) -> str:
        return self.token_of[index]


@dataclass
class LabeledInstance:
    prefix: list
    label: int
    split: str = TRAIN


@dataclass
class CorpusStats:
    num_train: int
    num_test: int
    num_items: int
    avg_len: float          # mean (prefix + label) length over labeled instances
    avg_session_len: float  # mean raw session length, for comparison


def _decode(raw) -> str:
    if hasattr(raw, "read"):
        raw = raw.read()
    if isinstance(raw, bytes):
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"input is not valid UTF-8: {exc}") from None
    return raw


def parse_sessions(raw, fmt: str = "event_tsv") -> list[Session]:
    """Parse a raw interaction log into sessions with raw (unmapped) tokens.

    ``event_tsv`` lines are ``session_id<TAB>timestamp<TAB>item_token``;
    events are grouped by session id and ordered by timestamp, ties broken
    by file order. ``session_lines`` is one session per line of
    space-separated tokens; line position doubles as pseudo-time since the
    format carries no timestamps. Blank lines are skipped.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown corpus format: {fmt!r}")
    text = _decode(raw)

    if fmt == "session_lines":
        sessions = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            tokens = line.split()
            if not tokens:
                continue
            sid = len(sessions)
            sessions.append(Session(id=sid, items=tokens, end_time=sid))
        return sessions

    # event_tsv
    events = {}  # session token -> list of (timestamp, order, item)
    order_of = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise DataError(
                f"line {lineno}: expected 3 tab-separated fields, got {len(cols)}"
            )
        sid, ts_text, item = cols
        if not sid or not item:
            raise DataError(f"line {lineno}: empty session id or item token")
        try:
            ts = int(ts_text)
        except ValueError:
            raise DataError(f"line {lineno}: bad timestamp {ts_text!r}") from None
        if ts < 0:
            raise DataError(f"line {lineno}: negative timestamp {ts}")
        if sid not in events:
            order_of[sid] = len(order_of)
            events[sid] = []
        events[sid].append((ts, lineno, item))

    sessions = []
    for sid in sorted(events, key=order_of.get):
        evs = sorted(events[sid])  # timestamp, then file order
        items = [item for _, _, item in evs]
        sessions.append(Session(id=len(sessions), items=items, end_time=evs[-1][0]))
    return sessions


def filter_corpus(
    sessions: list[Session],
    min_item_count: int,
    min_session_len: int,
    max_session_len: int | None = None,
) -> tuple[list[Session], Vocabulary]:
    """Filter rare items and short sessions to a fixpoint, then build the vocabulary.

    Items below ``min_item_count`` occurrences are removed from all sessions
    and sessions below ``min_session_len`` are dropped, repeatedly, until
    stable (each removal can re-trigger the other). Sessions longer than
    ``max_session_len`` are then dropped outright. Surviving tokens are
    mapped to contiguous indices in first-occurrence order and sessions are
    rewritten in index space.
    """
    if min_item_count < 1:
        raise ValueError("min_item_count must be >= 1")
    if min_session_len < 2:
        raise ValueError("min_session_len must be >= 2")
    if max_session_len is not None and max_session_len < min_session_len:
        raise ValueError("max_session_len must be >= min_session_len")

    current = [s for s in sessions]
    while True:
        counts = Counter(item for s in current for item in s.items)
        keep = {item for item, c in counts.items() if c >= min_item_count}
        changed = False
        pruned = []
        for s in current:
            items = [it for it in s.items if it in keep]
            if len(items) != len(s.items):
                changed = True
            if len(items) >= min_session_len:
                pruned.append(replace(s, items=items))
            else:
                changed = True
        current = pruned
        if not changed:
            break

    if max_session_len is not None:
        current = [s for s in current if len(s.items) <= max_session_len]

    if not current:
        raise DataError("empty after filtering")

    index_of: dict = {}
    token_of: list = []
    for s in current:
        for item in s.items:
            if item not in index_of:
                index_of[item] = len(token_of)
                token_of.append(item)
    vocab = Vocabulary(index_of=index_of, token_of=token_of)
    remapped = [replace(s, items=[index_of[it] for it in s.items]) for s in current]
    return remapped, vocab


def temporal_split(
    sessions: list[Session], boundary: int
) -> tuple[list[Session], list[Session]]:
    """Tag sessions ending after ``boundary`` as test, the rest as train."""
    train, test = [], []
    for s in sessions:
        if s.end_time > boundary:
            test.append(replace(s, split=TEST))
        else:
            train.append(replace(s, split=TRAIN))
    if sessions and (not train or not test):
        side = "train" if not test else "test"
        log.warning("temporal split boundary %d left the %s side empty", boundary, side)
    return train, test


def split_sequences(session: Session) -> list[LabeledInstance]:
    """Expand a session of length n into its n-1 (prefix, next-item) instances."""
    items = session.items
    if len(items) < 2:
        return []
    return [
        LabeledInstance(prefix=list(items[:k]), label=items[k], split=session.split)
        for k in range(1, len(items))
    ]


def drop_cold_test_instances(
    train_instances: list[LabeledInstance], test_instances: list[LabeledInstance]
) -> tuple[list[LabeledInstance], int]:
    """Drop test instances whose label never occurs in the training split.

    Such targets have untrained embeddings and cannot be meaningfully
    ranked; the dropped count is logged.
    """
    seen = set()
    for inst in train_instances:
        seen.update(inst.prefix)
        seen.add(inst.label)
    kept = [inst for inst in test_instances if inst.label in seen]
    dropped = len(test_instances) - len(kept)
    if dropped:
        log.info("dropped %d test instances with labels unseen in training", dropped)
    return kept, dropped


def corpus_stats(sessions: list[Session]) -> CorpusStats:
    """Aggregate counts over split-tagged sessions (vocabulary already built)."""
    num_train = sum(len(s.items) - 1 for s in sessions if s.split == TRAIN)
    num_test = sum(len(s.items) - 1 for s in sessions if s.split == TEST)
    items = {it for s in sessions for it in s.items}
    total_inst = 0
    total_len = 0
    for s in sessions:
        n = len(s.items)
        total_inst += n - 1
        # instance lengths (prefix plus label) are 2..n
        total_len += n * (n + 1) // 2 - 1
    avg_len = round(total_len / total_inst, 2) if total_inst else 0.0
    avg_session = (
        round(sum(len(s.items) for s in sessions) / len(sessions), 2)
        if sessions
        else 0.0
    )
    return CorpusStats(
        num_train=num_train,
        num_test=num_test,
        num_items=len(items),
        avg_len=avg_len,
        avg_session_len=avg_session,
    )


def write_corpus(path, vocab: Vocabulary, instances: list[LabeledInstance]) -> None:
    """Write the preprocessed-corpus file.

    Line 1 is ``#vocab m``, followed by m token lines (index order), then one
    instance per line: ``train|test<TAB>prefix indices<TAB>label index``.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#vocab {vocab.size}\n")
        for token in vocab.token_of:
            fh.write(f"{token}\n")
        for inst in instances:
            prefix = " ".join(str(i) for i in inst.prefix)
            fh.write(f"{inst.split}\t{prefix}\t{inst.label}\n")


def read_corpus(path) -> tuple[Vocabulary, list[LabeledInstance]]:
    """Read a preprocessed-corpus file written by :func:`write_corpus`."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#vocab "):
            raise DataError(f"{path}: missing '#vocab' header")
        try:
            size = int(header.split(" ", 1)[1])
        except ValueError:
            raise DataError(f"{path}: bad vocabulary size in header") from None
        token_of = []
        for i in range(size):
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated vocabulary ({i} of {size} tokens)")
            token_of.append(line.rstrip("\n"))
        index_of = {tok: i for i, tok in enumerate(token_of)}
        if len(index_of) != size:
            raise DataError(f"{path}: duplicate tokens in vocabulary")
        vocab = Vocabulary(index_of=index_of, token_of=token_of)

        instances = []
        for lineno, line in enumerate(fh, start=size + 2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[0] not in (TRAIN, TEST):
                raise DataError(f"{path} line {lineno}: bad instance line")
            try:
                prefix = [int(t) for t in cols[1].split()]
                label = int(cols[2])
            except ValueError:
                raise DataError(f"{path} line {lineno}: bad index") from None
            if not prefix:
                raise DataError(f"{path} line {lineno}: empty prefix")
            for idx in prefix + [label]:
                if not 0 <= idx < size:
                    raise DataError(
                        f"{path} line {lineno}: index {idx} out of range"
                    )
            instances.append(LabeledInstance(prefix=prefix, label=label, split=cols[0]))
    return vocab, instances


def reconstruct_sessions(instances: list[LabeledInstance]) -> list[list[int]]:
    """Recover full item sequences from consecutively written split instances.

    Instances of one session appear contiguously with growing prefixes, so a
    line extends the running session exactly when its prefix equals the
    sequence accumulated so far (a fresh session starts with a length-1
    prefix, which can never match an accumulated sequence of length >= 2).
    """
    sessions: list[list[int]] = []
    current: list[int] | None = None
    for inst in instances:
        if current is not None and inst.prefix == current:
            current = current + [inst.label]
        else:
            if current is not None:
                sessions.append(current)
            current = list(inst.prefix) + [inst.label]
    if current is not None:
        sessions.append(current)
    return sessions
