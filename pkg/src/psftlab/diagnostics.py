"""Post-hoc analysis of run logs: clipped-token reports and trace exports."""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

QUANTITIES = ("entropy", "grad_norm", "clip_fraction", "eval")
_RECORD_FIELD = {"entropy": "mean_entropy", "grad_norm": "grad_norm",
                 "clip_fraction": "clip_fraction"}


@dataclass
class ClipReport:
    """Per-token clip statistics over a window of clip events.

    ``rates[t]`` is clips per response-token occurrence of ``t``; ``top`` holds
    ``(token, rate, count)`` sorted by rate (descending) then token id.
    """

    window: tuple | None
    counts: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    total_fraction: float = 0.0
    top: list = field(default_factory=list)

    @property
    def n_clipped(self) -> int:
        return sum(self.counts.values())

    @property
    def n_tokens(self) -> int:
        return sum(self.totals.values())

    def top_ids(self):
        return [t for t, _, _ in self.top]

    def to_dict(self):
        return {"window": list(self.window) if self.window else None,
                "counts": {str(k): v for k, v in sorted(self.counts.items())},
                "totals": {str(k): v for k, v in sorted(self.totals.items())},
                "rates": {str(k): v for k, v in sorted(self.rates.items())},
                "total_fraction": self.total_fraction,
                "top": [list(x) for x in self.top]}


def load_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _in_window(ev, window, key):
    if window is None:
        return True
    lo, hi = window
    return lo <= ev[key] <= hi


def clip_report(events, window=None, key: str = "step", top_k: int = 5) -> ClipReport:
    """Aggregate clip events (as written to ``clip_events.jsonl``).

    Each event carries ``clipped`` ([token, ratio] pairs) and ``totals``
    (response-token occurrence counts). ``window`` is an inclusive
    ``(lo, hi)`` range over ``key`` ("step" or "epoch").
    """
    if key not in ("step", "epoch"):
        raise ValueError(f"window key must be 'step' or 'epoch', got {key!r}")
    counts, totals = {}, {}
    for ev in events:
        if not _in_window(ev, window, key):
            continue
        for tok, n in ev["totals"].items():
            totals[int(tok)] = totals.get(int(tok), 0) + int(n)
        for tok, _ in ev["clipped"]:
            counts[int(tok)] = counts.get(int(tok), 0) + 1
    report = ClipReport(tuple(window) if window is not None else None)
    if not totals:
        return report
    for tok in counts:
        if counts[tok] > totals.get(tok, 0):
            raise ValueError(f"token {tok} clipped more often than it occurs")
    report.counts = counts
    report.totals = totals
    report.rates = {t: counts.get(t, 0) / n for t, n in totals.items()}
    report.total_fraction = sum(counts.values()) / sum(totals.values())
    ranked = sorted(counts, key=lambda t: (-report.rates[t], t))
    report.top = [(t, report.rates[t], counts[t]) for t in ranked[:top_k]]
    return report


def clip_reports_by_epoch(events, top_k: int = 5) -> dict:
    epochs = sorted({ev["epoch"] for ev in events})
    return {e: clip_report(events, (e, e), key="epoch", top_k=top_k) for e in epochs}


# -- traces -----------------------------------------------------------------

def _as_dict(rec):
    return rec if isinstance(rec, dict) else {
        "step": rec.step, "epoch": rec.epoch, "mean_entropy": rec.mean_entropy,
        "grad_norm": rec.grad_norm, "clip_fraction": rec.clip_fraction, "eval": rec.eval}


def smooth(values, window: int | None):
    """Centered moving average; the window shrinks at the edges."""
    x = np.asarray(values, dtype=np.float64)
    if not window or window <= 1 or x.size == 0:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(x.size)
    lo = np.maximum(idx - (window - 1) // 2, 0)
    hi = np.minimum(idx + window // 2, x.size - 1) + 1
    return (c[hi] - c[lo]) / (hi - lo)


def trace_series(logs, quantity: str):
    """(steps, {column: values}) for one quantity."""
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
    if isinstance(logs, (str, Path)):
        logs = load_jsonl(logs)
    recs = [_as_dict(r) for r in logs]
    if quantity != "eval":
        return ([int(r["step"]) for r in recs],
                {"value": [float(r[_RECORD_FIELD[quantity]]) for r in recs]})
    recs = [r for r in recs if r.get("eval")]
    keys = sorted({k for r in recs for k in r["eval"]})
    cols = {k: [float(r["eval"].get(k, np.nan)) for r in recs] for k in keys}
    return [int(r["step"]) for r in recs], cols


def trace_export(logs, quantity: str, window: int | None = None, path=None) -> str:
    """CSV text of a quantity over steps, with a self-describing header.

    Smoothing (``window`` > 1) is a centered moving average and is recorded
    in the header so plots can be rebuilt from the file alone.
    """
    steps, cols = trace_series(logs, quantity)
    cols = {k: smooth(v, window) for k, v in cols.items()}
    buf = io.StringIO()
    buf.write(f"# quantity={quantity}\n")
    buf.write(f"# smoothing={'centered_moving_average' if window and window > 1 else 'none'}\n")
    buf.write(f"# window={int(window) if window and window > 1 else 1}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + list(cols))
    for i, s in enumerate(steps):
        w.writerow([s] + [repr(float(cols[k][i])) for k in cols])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_trace(text: str):
    """Inverse of ``trace_export``: (header dict, steps, {column: array})."""
    lines = text.splitlines()
    header = {}
    while lines and lines[0].startswith("#"):
        k, _, v = lines.pop(0)[1:].strip().partition("=")
        header[k] = v
    if "window" in header:
        header["window"] = int(header["window"])
    rows = list(csv.reader(lines))
    names = rows[0][1:]
    steps = [int(r[0]) for r in rows[1:]]
    cols = {n: np.array([float(r[i + 1]) for r in rows[1:]]) for i, n in enumerate(names)}
    return header, steps, cols
