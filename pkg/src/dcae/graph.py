"""Chain-topology graphs and exact log-domain inference over them.

Every graph here is a weighted acceptor over senone ids. A phone ``p`` owns
two senones: ``2p`` is emitted on the frame that enters the phone and
``2p + 1`` on every further frame spent in it (the self-loop), so a phone can
be traversed in a single frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NEG_INF = -np.inf


class NoAcceptingPathError(ValueError):
    """Raised when a graph accepts no path of the requested length."""


@dataclass(frozen=True, eq=False)
class Fst:
    """Weighted acceptor with optional word output labels.

    Arcs are stored column-wise. ``olabel`` is ``-1`` where an arc emits no
    output symbol; only decoding graphs use it.
    """

    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    final: np.ndarray
    olabel: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.num_states
        if n < 1 or not 0 <= self.start < n:
            raise ValueError("invalid start state")
        if self.olabel is None:
            object.__setattr__(self, "olabel", np.full(len(self.src), -1, dtype=np.int64))
        for a in (self.src, self.dst, self.label, self.weight, self.olabel):
            a.setflags(write=False)
        self.final.setflags(write=False)
        if len(self.src) and (self.src.max() >= n or self.dst.max() >= n
                              or min(self.src.min(), self.dst.min()) < 0):
            raise ValueError("arc endpoint out of range")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("arc log-weights must be finite")
        if self.final.shape != (n,) or not np.any(np.isfinite(self.final)):
            raise ValueError("graph needs at least one final state")

    @classmethod
    def from_arcs(cls, num_states: int, start: int, arcs: Iterable[Sequence],
                  finals: dict[int, float]) -> "Fst":
        """Build from ``(src, dst, label, logweight[, olabel])`` tuples."""
        arcs = [tuple(a) for a in arcs]
        olab = [a[4] if len(a) > 4 else -1 for a in arcs]
        final = np.full(num_states, NEG_INF)
        for s, w in finals.items():
            final[s] = w
        return cls(
            num_states=num_states,
            start=start,
            src=np.array([a[0] for a in arcs], dtype=np.int64),
            dst=np.array([a[1] for a in arcs], dtype=np.int64),
            label=np.array([a[2] for a in arcs], dtype=np.int64),
            weight=np.array([a[3] for a in arcs], dtype=np.float64),
            final=final,
            olabel=np.array(olab, dtype=np.int64),
        )

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    def arcs(self):
        for i in range(self.num_arcs):
            yield (int(self.src[i]), int(self.dst[i]), int(self.label[i]), float(self.weight[i]))

    def finals(self) -> dict[int, float]:
        return {int(s): float(self.final[s]) for s in np.flatnonzero(np.isfinite(self.final))}

    def dump(self) -> str:
        """Text form: ``src dst senone logweight`` per arc, then ``state logweight``."""
        lines = [f"{s} {d} {l} {w!r}" for s, d, l, w in self.arcs()]
        lines += [f"{s} {w!r}" for s, w in self.finals().items()]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Topology:
    """The 2-pdf, 1-state chain topology for ``num_phones`` phones."""

    num_phones: int

    def __post_init__(self):
        if self.num_phones < 1:
            raise ValueError("num_phones must be >= 1")

    @property
    def num_senones(self) -> int:
        return 2 * self.num_phones

    @staticmethod
    def entry_pdf(phone: int) -> int:
        return 2 * phone

    @staticmethod
    def loop_pdf(phone: int) -> int:
        return 2 * phone + 1

    def phone_fst(self, phone: int) -> Fst:
        """Two states: enter on the forward pdf, then self-loop on the loop pdf."""
        if not 0 <= phone < self.num_phones:
            raise ValueError(f"phone {phone} out of range")
        arcs = [(0, 1, self.entry_pdf(phone), 0.0), (1, 1, self.loop_pdf(phone), 0.0)]
        return Fst.from_arcs(2, 0, arcs, {1: 0.0})


def build_topology(num_phones: int) -> Topology:
    return Topology(num_phones)


def senone_to_phone(senones) -> np.ndarray:
    return np.asarray(senones) // 2


def chain_alignment(alignment, factor: int) -> np.ndarray:
    """Map a full-rate senone alignment to the output frame rate.

    Output frame ``j`` sits at input frame ``j * factor``. Its senone is the
    entry pdf when a new phone segment started since the previous kept frame,
    otherwise the loop pdf. Every segment must span at least one kept frame,
    which holds whenever segments are at least ``factor`` frames long.
    """
    ali = np.asarray(alignment, dtype=np.int64)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if ali.size == 0:
        raise ValueError("empty alignment")
    seg = np.cumsum(ali % 2 == 0) - 1
    if ali[0] % 2 != 0:
        seg += 1  # alignment starting mid-phone
    kept = np.arange(0, len(ali), factor)
    kseg = seg[kept]
    if len(np.unique(kseg)) != seg[-1] + 1:
        raise ValueError(f"a phone segment is shorter than the subsampling factor {factor}")
    new = np.ones(len(kept), dtype=bool)
    new[1:] = kseg[1:] != kseg[:-1]
    phones = ali[kept] // 2
    return np.where(new, 2 * phones, 2 * phones + 1)


def alignment_phones(alignment) -> list[int]:
    """Phone sequence of a full-rate alignment (one entry per segment)."""
    ali = np.asarray(alignment, dtype=np.int64)
    starts = np.flatnonzero(ali % 2 == 0)
    if ali.size and ali[0] % 2:
        starts = np.concatenate([[0], starts])
    return [int(p) for p in ali[starts] // 2]


# --------------------------------------------------------------------------
# Bigram language models


@dataclass(frozen=True, eq=False)
class BigramLM:
    """Add-one smoothed bigram over ``size`` symbols.

    Row ``size`` of ``logprob`` is the begin history; column ``size`` is the
    end symbol. ``logprob[h, w]`` is ``log P(w | h)``.
    """

    size: int
    logprob: np.ndarray

    @property
    def bos(self) -> int:
        return self.size

    @property
    def eos(self) -> int:
        return self.size

    def row_sums(self) -> np.ndarray:
        return np.exp(self.logprob).sum(axis=1)


PhoneLM = BigramLM


def estimate_bigram(sequences: Iterable[Sequence[int]], size: int) -> BigramLM:
    seqs = [list(s) for s in sequences]
    if not seqs or not any(seqs):
        raise ValueError("cannot estimate a bigram from an empty corpus")
    counts = np.ones((size + 1, size + 1))
    counts[size, size] = 0.0  # empty sentences are not allowed
    for seq in seqs:
        if not seq:
            continue
        hist = size
        for sym in seq:
            if not 0 <= sym < size:
                raise ValueError(f"symbol {sym} out of range")
            counts[hist, sym] += 1
            hist = sym
        counts[hist, size] += 1
    with np.errstate(divide="ignore"):
        logprob = np.log(counts / counts.sum(axis=1, keepdims=True))
    return BigramLM(size, logprob)


def estimate_phone_lm(phone_sequences: Iterable[Sequence[int]], num_phones: int) -> PhoneLM:
    return estimate_bigram(phone_sequences, num_phones)


# --------------------------------------------------------------------------
# Graph construction


def build_numerator(alignment, denominator: Fst | None = None) -> Fst:
    """Linear chain accepting exactly ``alignment`` (senones at output rate).

    Without ``denominator`` all weights are 0. With it, each arc takes the
    weight of the unique matching denominator arc and the last state takes the
    denominator's final weight, i.e. the chain is intersected with the
    deterministic denominator graph.
    """
    seq = [int(s) for s in alignment]
    if not seq:
        raise ValueError("empty alignment")
    weights = np.zeros(len(seq))
    final_w = 0.0
    if denominator is not None:
        state = denominator.start
        for i, lab in enumerate(seq):
            hit = np.flatnonzero((denominator.src == state) & (denominator.label == lab))
            if len(hit) != 1:
                raise NoAcceptingPathError(
                    f"denominator has {len(hit)} arcs for senone {lab} from state {state}")
            weights[i] = denominator.weight[hit[0]]
            state = int(denominator.dst[hit[0]])
        final_w = float(denominator.final[state])
        if not np.isfinite(final_w):
            raise NoAcceptingPathError("alignment ends in a non-final denominator state")
    arcs = [(i, i + 1, lab, weights[i]) for i, lab in enumerate(seq)]
    return Fst.from_arcs(len(seq) + 1, 0, arcs, {len(seq): final_w})


def build_denominator(phone_lm: PhoneLM, topology: Topology) -> Fst:
    """Compose the bigram phone LM with the per-phone topologies.

    State 0 is the begin history. State ``p + 1`` means "inside phone p", which
    is also the LM history after p. Entering phone q from history h emits the
    entry pdf of q with ``log P(q | h)``; staying emits the loop pdf with
    weight 0. Every in-phone state is final with ``log P(</s> | p)``.
    Transitions and finals of probability zero are left out.
    """
    P = topology.num_phones
    if phone_lm.size != P:
        raise ValueError("phone LM and topology disagree on the phone count")
    arcs = []
    for h in range(P + 1):
        lm_row = phone_lm.bos if h == 0 else h - 1
        for q in range(P):
            w = phone_lm.logprob[lm_row, q]
            if np.isfinite(w):
                arcs.append((h, q + 1, topology.entry_pdf(q), w))
        if h > 0:
            arcs.append((h, h, topology.loop_pdf(h - 1), 0.0))
    finals = {p + 1: float(phone_lm.logprob[p, phone_lm.eos]) for p in range(P)
              if np.isfinite(phone_lm.logprob[p, phone_lm.eos])}
    return Fst.from_arcs(P + 1, 0, arcs, finals)


def build_decode_graph(lexicon: Sequence[Sequence[int]], word_lm: BigramLM,
                       topology: Topology) -> Fst:
    """Senone-to-word decoding graph scored by a word bigram.

    ``lexicon[w]`` is the phone sequence of word ``w``. States are numbered
    word by word, so lower word ids always own lower state numbers and Viterbi
    ties between homophones resolve to the lower word id.
    """
    if word_lm.size != len(lexicon):
        raise ValueError("word LM size does not match the lexicon")
    first = []
    n = 1
    for w, pron in enumerate(lexicon):
        if len(pron) == 0:
            raise ValueError(f"word {w} has no pronunciation")
        for p in pron:
            if not 0 <= p < topology.num_phones:
                raise ValueError(f"word {w} uses undefined phone {p}")
        first.append(n)
        n += len(pron)
    last = [first[w] + len(pron) - 1 for w, pron in enumerate(lexicon)]
    arcs = []
    for w, pron in enumerate(lexicon):
        entry = topology.entry_pdf(pron[0])
        for h, src in [(word_lm.bos, 0)] + [(v, last[v]) for v in range(len(lexicon))]:
            if np.isfinite(word_lm.logprob[h, w]):
                arcs.append((src, first[w], entry, word_lm.logprob[h, w], w))
        for k, p in enumerate(pron):
            s = first[w] + k
            arcs.append((s, s, topology.loop_pdf(p), 0.0, -1))
            if k + 1 < len(pron):
                arcs.append((s, s + 1, topology.entry_pdf(pron[k + 1]), 0.0, -1))
    finals = {last[w]: float(word_lm.logprob[w, word_lm.eos]) for w in range(len(lexicon))
              if np.isfinite(word_lm.logprob[w, word_lm.eos])}
    return Fst.from_arcs(n, 0, arcs, finals)


# --------------------------------------------------------------------------
# Inference


def _segment_logsumexp(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    m = np.full(n, NEG_INF)
    np.maximum.at(m, seg, values)
    ok = np.isfinite(m)
    shift = np.where(ok, m, 0.0)
    s = np.bincount(seg, weights=np.exp(values - shift[seg]), minlength=n)
    with np.errstate(divide="ignore"):
        return np.where(ok, shift + np.log(s), NEG_INF)


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v)
    if not np.isfinite(m):
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(v - m))))


def _check_loglik(fst: Fst, loglik) -> np.ndarray:
    ll = np.asarray(loglik, dtype=np.float64)
    if ll.ndim != 2 or ll.shape[0] < 1:
        raise ValueError("loglik must be a non-empty T x S matrix")
    if fst.num_arcs and fst.label.max() >= ll.shape[1]:
        raise ValueError("graph uses senone ids beyond the loglik width")
    if not np.all(np.isfinite(ll)):
        raise ValueError("loglik must be finite")
    return ll


def forward_scores(fst: Fst, loglik) -> tuple[np.ndarray, float]:
    """Forward pass only; returns ``(alpha, logZ)`` with alpha of shape (T+1, N)."""
    ll = _check_loglik(fst, loglik)
    T, n = ll.shape[0], fst.num_states
    alpha = np.full((T + 1, n), NEG_INF)
    alpha[0, fst.start] = 0.0
    base = fst.weight
    for t in range(T):
        sc = alpha[t, fst.src] + base + ll[t, fst.label]
        alpha[t + 1] = _segment_logsumexp(sc, fst.dst, n)
    return alpha, _logsumexp(alpha[T] + fst.final)


def forward_backward(fst: Fst, loglik) -> tuple[float, np.ndarray]:
    """Exact ``(logZ, gamma)`` over all accepting paths of length T.

    ``gamma[t, s]`` is the posterior probability that the arc crossed at frame
    ``t`` carries senone ``s``.

    Raises:
        NoAcceptingPathError: if no accepting path has exactly T arcs.
    """
    ll = _check_loglik(fst, loglik)
    alpha, logz = forward_scores(fst, ll)
    if not np.isfinite(logz):
        raise NoAcceptingPathError(f"no accepting path of length {ll.shape[0]}")
    T, n = ll.shape[0], fst.num_states
    beta = np.full((T + 1, n), NEG_INF)
    beta[T] = fst.final
    for t in range(T - 1, -1, -1):
        sc = beta[t + 1, fst.dst] + fst.weight + ll[t, fst.label]
        beta[t] = _segment_logsumexp(sc, fst.src, n)
    arc_scores = (alpha[:-1][:, fst.src] + fst.weight + ll[:, fst.label]
                  + beta[1:][:, fst.dst] - logz)
    post = np.exp(arc_scores)
    gamma = np.zeros_like(ll)
    for s in np.unique(fst.label):
        gamma[:, s] = post[:, fst.label == s].sum(axis=1)
    return logz, gamma


def viterbi_path(fst: Fst, loglik) -> tuple[np.ndarray, float]:
    """Best accepting path as an array of arc indices, plus its score.

    Ties go to the lowest-numbered predecessor state, then the lowest senone.
    """
    ll = _check_loglik(fst, loglik)
    T, n = ll.shape[0], fst.num_states
    order = np.lexsort((fst.label, fst.src, fst.dst))
    src, dst = fst.src[order], fst.dst[order]
    w, lab = fst.weight[order], fst.label[order]
    delta = np.full(n, NEG_INF)
    delta[fst.start] = 0.0
    back = np.full((T, n), -1, dtype=np.int64)
    for t in range(T):
        sc = delta[src] + w + ll[t, lab]
        best = np.full(n, NEG_INF)
        np.maximum.at(best, dst, sc)
        hit = np.flatnonzero((sc == best[dst]) & np.isfinite(sc))
        states, first = np.unique(dst[hit], return_index=True)
        new = np.full(n, NEG_INF)
        new[states] = best[states]
        back[t, states] = order[hit[first]]
        delta = new
    total = delta + fst.final
    end = int(np.argmax(total))
    score = float(total[end])
    if not np.isfinite(score):
        raise NoAcceptingPathError(f"no accepting path of length {T}")
    path = np.empty(T, dtype=np.int64)
    state = end
    for t in range(T - 1, -1, -1):
        a = back[t, state]
        path[t] = a
        state = int(fst.src[a])
    return path, score


def viterbi(fst: Fst, loglik) -> tuple[list[int], float]:
    """Best senone sequence and its score."""
    path, score = viterbi_path(fst, loglik)
    return [int(x) for x in fst.label[path]], score


def viterbi_words(fst: Fst, loglik) -> list[int]:
    path, _ = viterbi_path(fst, loglik)
    out = fst.olabel[path]
    return [int(x) for x in out[out >= 0]]
