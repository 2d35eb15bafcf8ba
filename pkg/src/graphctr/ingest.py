"""Transaction logs: parsing, URL normalization, day splits and synthetic data.

Log lines are tab separated::

    timestamp_ms <TAB> user_id <TAB> banner_id <TAB> url <TAB> view|click

Impressions (``view``) are joined to clicks on ``(user_id, banner_id, url)``
within the same UTC day to produce labeled observations.
"""

from __future__ import annotations

import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

EVENTS = ("view", "click")
MS_PER_DAY = 86_400_000
MAX_MALFORMED_FRACTION = 0.5


class LogFormatError(ValueError):
    """Raised when a log looks like the wrong kind of file."""


class LeakageError(ValueError):
    """Raised when a transaction is dated after the test day."""


@dataclass(frozen=True, slots=True)
class Transaction:
    timestamp: int
    user_id: str
    banner_id: str
    url: str
    event: str

    def __post_init__(self):
        if self.event not in EVENTS:
            raise ValueError(f"event must be one of {EVENTS}, got {self.event!r}")
        if not self.url:
            raise ValueError("url is empty")

    @property
    def day(self) -> date:
        return utc_day(self.timestamp)


@dataclass(frozen=True, slots=True)
class LabeledObservation:
    user_id: str
    banner_id: str
    url: str
    label: int


@dataclass
class PlantedStructure:
    """Ground truth behind a synthetic log."""

    true_user_cluster: dict[str, int]
    true_url_cluster: dict[str, int]
    true_block_density: np.ndarray
    true_block_ctr: np.ndarray


@dataclass
class ParsedLog:
    transactions: list[Transaction] = field(default_factory=list)
    n_lines: int = 0
    n_malformed: int = 0

    def __iter__(self) -> Iterator[Transaction]:
        return iter(self.transactions)

    def __len__(self) -> int:
        return len(self.transactions)

    def __getitem__(self, i):
        return self.transactions[i]


def utc_day(timestamp_ms: int) -> date:
    return datetime.fromtimestamp(timestamp_ms / 1000.0, tz=timezone.utc).date()


def strip_query_string(url: str) -> str:
    """Drop everything from the first ``?`` onwards."""
    return url.split("?", 1)[0]


def _parse_line(line: str) -> Transaction | None:
    parts = line.split("\t")
    if len(parts) != 5:
        return None
    ts, user, banner, url, event = parts
    try:
        ts = int(ts)
    except ValueError:
        return None
    url = strip_query_string(url.strip())
    event = event.strip()
    if not user or not banner or not url or event not in EVENTS:
        return None
    return Transaction(ts, user, banner, url, event)


def parse_transactions(stream: IO[bytes] | IO[str] | Iterable[str | bytes]) -> ParsedLog:
    """Parse a TSV transaction log.

    Blank lines are ignored. Malformed lines are counted and skipped; if more
    than half the non-blank lines are malformed a :class:`LogFormatError` is
    raised since the input is most likely not a transaction log.
    """
    out = ParsedLog()
    for raw in stream:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        out.n_lines += 1
        txn = _parse_line(line)
        if txn is None:
            out.n_malformed += 1
        else:
            out.transactions.append(txn)
    if out.n_lines and out.n_malformed > MAX_MALFORMED_FRACTION * out.n_lines:
        raise LogFormatError(
            f"{out.n_malformed} of {out.n_lines} lines malformed; wrong file?"
        )
    if out.n_malformed:
        log.warning("skipped %d malformed lines", out.n_malformed)
    return out


def read_transactions(path) -> ParsedLog:
    with open(path, "rb") as fh:
        return parse_transactions(fh)


def format_transaction(t: Transaction) -> str:
    return f"{t.timestamp}\t{t.user_id}\t{t.banner_id}\t{t.url}\t{t.event}\n"


def write_transactions(transactions: Iterable[Transaction], path_or_stream) -> None:
    if isinstance(path_or_stream, io.IOBase):
        path_or_stream.writelines(format_transaction(t) for t in transactions)
        return
    with open(path_or_stream, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(format_transaction(t) for t in transactions)


def split_by_day(
    transactions: Iterable[Transaction], test_day: date
) -> tuple[list[Transaction], list[Transaction]]:
    """Hold out ``test_day``; everything strictly earlier is training data."""
    train, test = [], []
    for t in transactions:
        d = t.day
        if d < test_day:
            train.append(t)
        elif d == test_day:
            test.append(t)
        else:
            raise LeakageError(f"transaction on {d} is after test day {test_day}")
    return train, test


def last_day(transactions: Iterable[Transaction]) -> date:
    return utc_day(max(t.timestamp for t in transactions))


def label_impressions(transactions: Sequence[Transaction]) -> list[LabeledObservation]:
    """Join clicks to impressions by (user, banner, url, day).

    With ``c`` clicks and ``v`` impressions for a key, the ``min(c, v)``
    earliest impressions are labeled 1. Output follows impression order.
    """
    clicks: dict[tuple, int] = defaultdict(int)
    for t in transactions:
        if t.event == "click":
            clicks[(t.user_id, t.banner_id, t.url, t.day)] += 1

    views = [t for t in transactions if t.event == "view"]
    order = sorted(range(len(views)), key=lambda i: views[i].timestamp)
    labels = [0] * len(views)
    for i in order:
        t = views[i]
        key = (t.user_id, t.banner_id, t.url, t.day)
        if clicks.get(key, 0) > 0:
            clicks[key] -= 1
            labels[i] = 1
    return [
        LabeledObservation(t.user_id, t.banner_id, t.url, y) for t, y in zip(views, labels)
    ]


def _assign_clusters(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    while True:
        z = rng.integers(0, k, size=n)
        if np.bincount(z, minlength=k).min() > 0:
            return z


def user_name(i: int) -> str:
    return f"u{i:07d}"


def url_name(j: int) -> str:
    return f"http://s{j:06d}.example.com/p"


def generate_synthetic(
    n_users: int,
    n_urls: int,
    k_user: int,
    k_url: int,
    density_in: float,
    density_out: float,
    ctr_by_block,
    n_impressions: int,
    seed: int,
    *,
    n_banners: int = 4,
    n_days: int = 7,
    start_day: date = date(2013, 6, 1),
) -> tuple[list[Transaction], PlantedStructure]:
    """Draw a transaction log from a planted block model.

    Users and URLs get uniform cluster labels (no cluster left empty). A
    user-URL edge exists with probability ``density_in`` when the user and URL
    cluster indices coincide and ``density_out`` otherwise. Impressions pick an
    edge, a banner and a day uniformly; each is clicked with the CTR of its
    (user cluster, URL cluster) block.
    """
    ctr = np.asarray(ctr_by_block, dtype=float)
    if not (1 <= k_user <= n_users and 1 <= k_url <= n_urls):
        raise ValueError("need 1 <= k_user <= n_users and 1 <= k_url <= n_urls")
    if ctr.shape != (k_user, k_url):
        raise ValueError(f"ctr_by_block must be {k_user}x{k_url}, got {ctr.shape}")
    for name, p in (("density_in", density_in), ("density_out", density_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1]")
    if ctr.min() < 0 or ctr.max() > 1:
        raise ValueError("ctr_by_block entries must be in [0, 1]")

    rng = np.random.default_rng(seed)
    zu = _assign_clusters(rng, n_users, k_user)
    zv = _assign_clusters(rng, n_urls, k_url)

    block_density = np.full((k_user, k_url), density_out)
    for k in range(min(k_user, k_url)):
        block_density[k, k] = density_in

    # rows in chunks keep memory bounded for large graphs
    rows, cols = [], []
    chunk = max(1, 2_000_000 // max(n_urls, 1))
    for start in range(0, n_users, chunk):
        stop = min(n_users, start + chunk)
        p = block_density[zu[start:stop]][:, zv]
        r, c = np.nonzero(rng.random(p.shape) < p)
        rows.append(r + start)
        cols.append(c)
    eu = np.concatenate(rows)
    ev = np.concatenate(cols)
    if eu.size == 0 and n_impressions > 0:
        raise ValueError("no edges were drawn; raise the densities")

    pick = rng.integers(0, eu.size, size=n_impressions) if n_impressions else np.zeros(0, int)
    iu, iv = eu[pick], ev[pick]
    banner = rng.integers(0, n_banners, size=n_impressions)
    day = rng.integers(0, n_days, size=n_impressions)
    offset = rng.integers(0, MS_PER_DAY - 1000, size=n_impressions)
    clicked = rng.random(n_impressions) < ctr[zu[iu], zv[iv]]

    t0 = int(datetime(start_day.year, start_day.month, start_day.day, tzinfo=timezone.utc).timestamp() * 1000)
    ts = t0 + day * MS_PER_DAY + offset
    txns = []
    for n in np.argsort(ts, kind="stable"):
        user, url = user_name(int(iu[n])), url_name(int(iv[n]))
        b = f"b{int(banner[n])}"
        txns.append(Transaction(int(ts[n]), user, b, url, "view"))
        if clicked[n]:
            txns.append(Transaction(int(ts[n]) + 500, user, b, url, "click"))
    txns.sort(key=lambda t: t.timestamp)

    planted = PlantedStructure(
        true_user_cluster={user_name(i): int(z) for i, z in enumerate(zu)},
        true_url_cluster={url_name(j): int(z) for j, z in enumerate(zv)},
        true_block_density=block_density,
        true_block_ctr=ctr,
    )
    return txns, planted
