"""Raw interaction logs -> filtered sessions, splits, vocabulary, samples.

Log format: UTF-8 text, one interaction per line,
``session_id<TAB>unix_timestamp<TAB>item_id``; lines starting with ``#`` are
ignored. Everything downstream works on dense 0-based item indices assigned
from the train split only.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    session_id: str
    timestamp: int
    item_id: str


@dataclass(frozen=True)
class LogFormat:
    sep: str = "\t"
    comment: str = "#"


@dataclass
class Session:
    """An ordered item sequence. Items are raw ids before preprocessing and
    dense indices after."""

    id: str
    items: list
    start_ts: int = 0

    @property
    def length(self) -> int:
        return len(self.items)


@dataclass
class Vocabulary:
    item_of: list                      # index -> item id
    index_of: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index_of:
            self.index_of = {item: i for i, item in enumerate(self.item_of)}

    @property
    def n(self) -> int:
        return len(self.item_of)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, item in enumerate(self.item_of):
                fh.write(f"{i}\t{item}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        items = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, item = line.split("\t")
                assert int(idx) == len(items), "vocabulary file out of order"
                items.append(item)
        return cls(item_of=items)


@dataclass
class SplitSpec:
    """Chronological split: either the last ``fraction`` of sessions or every
    session starting within ``period_s`` seconds of the latest start."""

    mode: str                 # "last-fraction" | "last-period"
    fraction: float = None
    period_s: int = None

    def __post_init__(self):
        if self.mode == "last-fraction":
            if self.fraction is None or self.period_s is not None:
                raise ValueError("last-fraction split needs exactly `fraction`")
            if not 0.0 <= self.fraction < 1.0:
                raise ValueError(f"fraction {self.fraction} outside [0, 1)")
        elif self.mode == "last-period":
            if self.period_s is None or self.fraction is not None:
                raise ValueError("last-period split needs exactly `period_s`")
            if self.period_s <= 0:
                raise ValueError("period must be positive")
        else:
            raise ValueError(f"unknown split mode {self.mode!r}")

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        """Accepts ``last:<fraction>``, ``days:<n>`` or ``seconds:<n>``."""
        kind, _, arg = text.partition(":")
        if kind == "last":
            return cls("last-fraction", fraction=float(arg))
        if kind == "days":
            return cls("last-period", period_s=int(float(arg) * 86400))
        if kind == "seconds":
            return cls("last-period", period_s=int(arg))
        raise ValueError(f"unknown split spec {text!r}")


@dataclass(frozen=True)
class Sample:
    """One training example: a session prefix and the item that followed."""

    session: Session
    target: int


def parse_log(stream, fmt: LogFormat = LogFormat()) -> list:
    """Parse an iterable of text lines into Interactions, preserving order."""
    out = []
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line or line.startswith(fmt.comment):
            continue
        parts = line.split(fmt.sep)
        if len(parts) != 3:
            raise ParseError(line_no, f"expected 3 fields, got {len(parts)}")
        sid, ts_text, item = parts
        if not sid:
            raise ParseError(line_no, "empty session id")
        if not item:
            raise ParseError(line_no, "empty item id")
        try:
            ts = int(ts_text)
        except ValueError:
            raise ParseError(line_no, f"bad timestamp {ts_text!r}") from None
        if ts < 0:
            raise ParseError(line_no, f"negative timestamp {ts}")
        out.append(Interaction(sid, ts, item))
    return out


def _collapse(items: list) -> list:
    out = []
    for v in items:
        if not out or out[-1] != v:
            out.append(v)
    return out


def sessionize(interactions, group_by_day: bool = False) -> list:
    """Group interactions into sessions, sort each by timestamp (stable, so
    ties keep input order) and collapse consecutive duplicate items."""
    groups = defaultdict(list)
    for it in interactions:
        key = f"{it.session_id}:{it.timestamp // 86400}" if group_by_day else it.session_id
        groups[key].append(it)
    sessions = []
    for key in sorted(groups):
        rows = sorted(groups[key], key=lambda it: it.timestamp)
        items = _collapse([it.item_id for it in rows])
        sessions.append(Session(id=key, items=items, start_ts=rows[0].timestamp))
    return sessions


def _chronological(sessions):
    return sorted(sessions, key=lambda s: (s.start_ts, s.id))


def preprocess(sessions, min_item_freq: int = 5, min_len: int = 2,
               max_len: int = None, split: SplitSpec = SplitSpec("last-fraction", fraction=0.2)):
    """Filter, split and index sessions.

    Items rarer than ``min_item_freq`` (counted once, over the whole input)
    are removed; sessions are re-collapsed, then dropped when shorter than
    ``min_len`` or longer than ``max_len``. The split is chronological on
    session start time. The vocabulary is built from train sessions only, in
    first-appearance order; test items outside it are removed and the length
    check is re-applied.

    Returns (train, test, vocab) with item indices densified.
    """
    if not sessions:
        raise DataError("empty dataset")
    freq = Counter()
    for s in sessions:
        freq.update(s.items)

    kept = []
    for s in sessions:
        items = _collapse([v for v in s.items if freq[v] >= min_item_freq])
        if len(items) < min_len:
            continue
        if max_len is not None and len(items) > max_len:
            continue
        kept.append(replace(s, items=items))
    if not kept:
        raise DataError("empty dataset")

    ordered = _chronological(kept)
    if split.mode == "last-fraction":
        n_test = int(len(ordered) * split.fraction)
        train, test = ordered[: len(ordered) - n_test], ordered[len(ordered) - n_test:]
    else:
        cutoff = max(s.start_ts for s in ordered) - split.period_s
        train = [s for s in ordered if s.start_ts <= cutoff]
        test = [s for s in ordered if s.start_ts > cutoff]
    if not train:
        raise DataError("empty dataset")

    item_of = []
    index_of = {}
    for s in train:
        for v in s.items:
            if v not in index_of:
                index_of[v] = len(item_of)
                item_of.append(v)
    vocab = Vocabulary(item_of=[str(v) for v in item_of],
                       index_of={v: i for v, i in index_of.items()})

    train_out = [replace(s, items=[index_of[v] for v in s.items]) for s in train]
    test_out = []
    for s in test:
        items = _collapse([index_of[v] for v in s.items if v in index_of])
        if len(items) >= min_len:
            test_out.append(replace(s, items=items))
    return train_out, test_out, vocab


def augment_prefixes(sessions) -> list:
    """Every session of length l yields l-1 (prefix, next-item) samples."""
    out = []
    for s in sessions:
        for k in range(1, len(s.items)):
            out.append(Sample(replace(s, items=s.items[:k]), s.items[k]))
    return out


def write_sessions(sessions, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(f"{s.id}\t{','.join(str(v) for v in s.items)}\n")


def read_sessions(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, items = line.split("\t")
            out.append(Session(id=sid, items=[int(v) for v in items.split(",")]))
    return out
