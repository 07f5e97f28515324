"""Decoding, scoring and the per-condition WER tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import Fst, viterbi_words
from .loss import LossBreakdown, log_softmax
from .model import Model, strip_decoders

CONDITIONS = ("A", "B", "C", "D")


def decode(model: Model, noisy, spk_embed, graph: Fst) -> list[int]:
    """Viterbi word sequence from the senone log-softmax scores."""
    logits = strip_decoders(model).forward(noisy, spk_embed).senone_logits
    return decode_logits(logits, graph)


def decode_logits(logits, graph: Fst) -> list[int]:
    return viterbi_words(graph, log_softmax(np.asarray(logits, dtype=np.float64)))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Word error rate in percent."""
    if len(ref) == 0:
        raise ValueError("empty reference")
    return 100.0 * edit_distance(list(ref), list(hyp)) / len(ref)


def frame_accuracy(logits, labels) -> float:
    """Percent of frames whose argmax (lowest id on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits and labels differ in length")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def relative_change(baseline: float, system: float) -> float:
    """``(baseline - system) / baseline * 100``; positive means improvement."""
    if baseline == 0.0:
        return 0.0 if system == 0.0 else math.nan
    return (baseline - system) / baseline * 100.0


@dataclass
class ConditionReport:
    system: str
    wer: dict[str, float]
    counts: dict[str, int]
    unet: str = "-"
    rel_change: dict[str, float] = field(default_factory=dict)
    stored_average: float | None = None

    @property
    def average(self) -> float:
        if self.stored_average is not None:
            return self.stored_average
        n = sum(self.counts[c] for c in self.wer)
        return sum(self.wer[c] * self.counts[c] for c in self.wer) / n


def score_corpus(refs: Mapping[str, Sequence[int]], hyps: Mapping[str, Sequence[int]],
                 conditions: Mapping[str, str]) -> tuple[dict[str, float], dict[str, int]]:
    """Per-condition WER from utterance-level references and hypotheses.

    A condition's WER pools edit distances over its utterances and divides by
    its total reference length.
    """
    errs: dict[str, int] = {}
    words: dict[str, int] = {}
    counts: dict[str, int] = {}
    for uid, ref in refs.items():
        c = conditions[uid]
        errs[c] = errs.get(c, 0) + edit_distance(list(ref), list(hyps.get(uid, [])))
        words[c] = words.get(c, 0) + len(ref)
        counts[c] = counts.get(c, 0) + 1
    order = [c for c in CONDITIONS if c in errs] + sorted(set(errs) - set(CONDITIONS))
    return ({c: float(100.0 * errs[c] / words[c]) for c in order},
            {c: counts[c] for c in order})


def report(system: str, wers: Mapping[str, float], counts: Mapping[str, int],
           baseline: ConditionReport | None = None, unet: str = "-",
           average: float | None = None) -> ConditionReport:
    """Attach relative changes against ``baseline`` (when given).

    The average is weighted by utterance count per condition unless
    ``average`` supplies it directly.
    """
    rep = ConditionReport(system, dict(wers), dict(counts), unet, stored_average=average)
    if baseline is not None:
        missing = set(rep.wer) - set(baseline.wer)
        if missing:
            raise ValueError(f"baseline lacks conditions {sorted(missing)}")
        for c, w in rep.wer.items():
            rep.rel_change[c] = relative_change(baseline.wer[c], w)
        rep.rel_change["Average"] = relative_change(baseline.average, rep.average)
    return rep


def _cell(w: float, rel: float | None) -> str:
    if rel is None:
        return f"{w:.2f}"
    if math.isnan(rel):
        return f"{w:.2f} (n/a)"
    return f"{w:.2f} ({rel:.2f})"


def render_table(reports: Sequence[ConditionReport]) -> str:
    """Aligned text table with ``WER (rel)`` cells, one row per system."""
    conds = list(reports[0].wer) + ["Average"]
    header = ["System", "U-Net"] + conds
    rows = [header]
    for r in reports:
        cells = [r.system, r.unet]
        for c in conds:
            w = r.average if c == "Average" else r.wer[c]
            cells.append(_cell(w, r.rel_change.get(c)))
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip()
                     for row in rows) + "\n"


def report_csv(reports: Sequence[ConditionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "unet", "condition", "wer", "rel_change"])
    for r in reports:
        for c in list(r.wer) + ["Average"]:
            value = r.average if c == "Average" else r.wer[c]
            rel = r.rel_change.get(c)
            rel_s = "" if rel is None else ("n/a" if math.isnan(rel) else f"{rel:.2f}")
            w.writerow([r.system, r.unet, c, f"{value:.4f}", rel_s])
    return buf.getvalue()


def read_report_csv(text: str) -> list[ConditionReport]:
    """Rebuild reports (WERs only) from ``report_csv`` output.

    Utterance counts are not stored; the written Average row is kept instead.
    """
    out: dict[str, ConditionReport] = {}
    for row in csv.DictReader(io.StringIO(text)):
        rep = out.setdefault(row["system"], ConditionReport(row["system"], {}, {}, row["unet"]))
        if row["condition"] == "Average":
            rep.stored_average = float(row["wer"])
            continue
        rep.wer[row["condition"]] = float(row["wer"])
        rep.counts[row["condition"]] = 1
    return list(out.values())


# --------------------------------------------------------------------------
# SVG plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg(width, height, body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "\n".join(body) + "\n</svg>\n")


def loss_curves_svg(history: Sequence[LossBreakdown], width=480, height=300) -> str:
    """One polyline per loss field on a shared log-ish (symlog) scale."""
    m = 40
    fields = LossBreakdown.FIELDS
    vals = np.array([h.as_row() for h in history], dtype=float)
    scaled = np.sign(vals) * np.log10(1.0 + np.abs(vals))
    lo, hi = float(scaled.min(initial=0.0)), float(scaled.max(initial=1.0))
    hi = hi if hi > lo else lo + 1.0
    n = max(len(history) - 1, 1)
    body = [f'<rect x="{m}" y="{m / 2}" width="{width - 1.5 * m}" height="{height - 1.5 * m}" '
            'fill="none" stroke="#888"/>',
            f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle">epoch</text>']
    for k, name in enumerate(fields):
        pts = " ".join(
            f"{m + i / n * (width - 1.5 * m):.1f},"
            f"{height - m - (scaled[i, k] - lo) / (hi - lo) * (height - 1.5 * m):.1f}"
            for i in range(len(history)))
        color = _PALETTE[k % len(_PALETTE)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{width - m / 2 - 50}" y="{m / 2 + 14 * (k + 1)}" fill="{color}">'
                    f'{name}</text>')
    return _svg(width, height, body)


def wer_bars_svg(reports: Sequence[ConditionReport], width=480, height=300) -> str:
    m = 40
    conds = list(reports[0].wer)
    top = max([max(r.wer.values()) for r in reports] + [1e-9])
    group = (width - 1.5 * m) / max(len(conds), 1)
    bar = group / (len(reports) + 1)
    body = [f'<line x1="{m}" y1="{height - m}" x2="{width - m / 2}" y2="{height - m}" stroke="#888"/>']
    for ci, c in enumerate(conds):
        x0 = m + ci * group
        body.append(f'<text x="{x0 + group / 2:.1f}" y="{height - m + 14}" '
                    f'text-anchor="middle">{c}</text>')
        for ri, r in enumerate(reports):
            h = r.wer[c] / top * (height - 2 * m)
            body.append(f'<rect x="{x0 + (ri + 0.5) * bar:.1f}" y="{height - m - h:.1f}" '
                        f'width="{bar:.1f}" height="{h:.1f}" '
                        f'fill="{_PALETTE[ri % len(_PALETTE)]}"/>')
    for ri, r in enumerate(reports):
        body.append(f'<text x="{m}" y="{14 * (ri + 1)}" fill="{_PALETTE[ri % len(_PALETTE)]}">'
                    f'{r.system}</text>')
    return _svg(width, height, body)
