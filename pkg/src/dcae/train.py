"""Training loop, per-utterance objective and finite-difference gradient check."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Utterance, phone_sequence
from .graph import (Fst, Topology, build_denominator, build_numerator, chain_alignment,
                    estimate_phone_lm)
from .loss import LossBreakdown, LossWeights, frame_ce, lfmmi, recon_error, restore_error, total_loss
from .model import Model, save_model
from .net import semi_orthogonal_step

log = logging.getLogger(__name__)

SEMI_ORTH_EVERY = 4
SEMI_ORTH_NU = 0.125


class TrainingFault(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 15
    warm_start_epochs: int = 0
    learning_rate: float = 0.005
    lr_decay: float = 0.9
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    alpha: float = 0.5
    beta: float = 0.5
    ce_weight: float = 5.0
    semi_orth_enabled: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warm_start_epochs < self.epochs:
            raise ValueError("warm_start_epochs must be smaller than epochs")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.jobs < 1:
            raise ValueError("batch_size and jobs must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.ce_weight)


@dataclass
class ChainTargets:
    """Per-utterance supervision at the output frame rate."""

    labels: np.ndarray
    numerator: Fst


@dataclass
class ChainSetup:
    topology: Topology
    denominator: Fst
    lexicon: list
    targets: dict[str, ChainTargets] = field(default_factory=dict)

    def targets_for(self, utt: Utterance, factor: int) -> ChainTargets:
        key = utt.id
        if key not in self.targets:
            labels = chain_alignment(utt.alignment, factor)
            self.targets[key] = ChainTargets(labels, build_numerator(labels, self.denominator))
        return self.targets[key]


def chain_setup(utts: Sequence[Utterance], lexicon, num_phones: int) -> ChainSetup:
    """Phone LM from the training transcripts and the resulting denominator graph."""
    topo = Topology(num_phones)
    lm = estimate_phone_lm([phone_sequence(u.transcript, lexicon) for u in utts], num_phones)
    return ChainSetup(topo, build_denominator(lm, topo), list(lexicon))


def utterance_objective(model: Model, utt: Utterance, targets: ChainTargets, denominator: Fst,
                        weights: LossWeights, recon_only: bool = False,
                        with_grads: bool = True):
    """Loss breakdown and parameter gradients for one utterance.

    Every term is a per-output-frame mean; the sequence term is ``-F / T'``.
    With ``recon_only`` the applied gradient covers only ``alpha*rc + beta*rs``
    while all terms are still reported.
    """
    cfg = model.config
    f = cfg.subsample_factor
    out = model.forward(utt.noisy, utt.spk_embed)
    logits = out.senone_logits
    if not np.all(np.isfinite(logits)):
        raise TrainingFault(f"non-finite senone logits for utterance {utt.id}")
    Tp = logits.shape[0]
    F, g_mmi = lfmmi(logits, targets.numerator, denominator)
    ce, g_ce = frame_ce(logits, targets.labels)
    rc = rs = 0.0
    g_rc = g_rs = None
    if out.recon_noisy is not None:
        rc, g_rc = recon_error(out.recon_noisy, utt.noisy[::f].astype(np.float64))
    if out.recon_clean is not None:
        rs, g_rs = restore_error(out.recon_clean, utt.clean[::f].astype(np.float64))
    parts = total_loss(-F / Tp, ce, rc, rs, weights)
    if not with_grads:
        return parts, None
    g_logits = None
    if not recon_only:
        g_logits = -g_mmi / Tp + weights.ce_weight * g_ce
    grads = model.backward(
        out, g_logits,
        weights.alpha * g_rc if g_rc is not None else None,
        weights.beta * g_rs if g_rs is not None else None)
    return parts, grads


def _shuffle(ids: list[str], seed: int, epoch: int) -> list[str]:
    rng = np.random.default_rng([seed, epoch])
    return [ids[i] for i in rng.permutation(len(ids))]


HISTORY_HEADER = ("epoch",) + LossBreakdown.FIELDS


def history_csv(history: Sequence[LossBreakdown]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for epoch, h in enumerate(history, start=1):
        w.writerow([epoch] + [repr(float(v)) for v in h.as_row()])
    return buf.getvalue()


def read_history(path) -> list[LossBreakdown]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [LossBreakdown(*(float(r[k]) for k in LossBreakdown.FIELDS)) for r in rows]


def train(model: Model, utts: Sequence[Utterance], schedule: TrainSchedule,
          setup: ChainSetup, out_dir=None,
          on_epoch: Callable[[int, LossBreakdown], None] | None = None):
    """SGD with momentum over ``utts``; returns ``(model, history)``.

    Epochs before ``warm_start_epochs`` apply the reconstruction-only
    objective; CE and the sequence term are still measured and logged. With
    ``out_dir`` the history and a checkpoint per epoch are written there.
    """
    if not utts:
        raise ValueError("cannot train on an empty corpus")
    cfg = model.config
    if schedule.warm_start_epochs and cfg.kind == "baseline":
        raise ValueError("baseline has no decoder to warm-start")
    for u in utts:
        if u.noisy.shape[1] != cfg.feat_dim or u.spk_embed.shape != (cfg.spk_dim,):
            raise ValueError(f"utterance {u.id} does not match the model dimensions")
    by_id = {u.id: u for u in utts}
    ids = sorted(by_id)
    for u in utts:
        setup.targets_for(u, cfg.subsample_factor)
    weights = schedule.weights
    names = sorted(model.params)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[LossBreakdown] = []
    step = 0
    pool = ThreadPoolExecutor(schedule.jobs) if schedule.jobs > 1 else None
    try:
        for epoch in range(schedule.epochs):
            recon_only = epoch < schedule.warm_start_epochs
            lr = schedule.learning_rate * schedule.lr_decay ** epoch
            order = _shuffle(ids, schedule.seed, epoch)
            sums = np.zeros(5)
            frames_seen = 0
            for start in range(0, len(order), schedule.batch_size):
                batch = sorted(order[start:start + schedule.batch_size])

                def run(uid):
                    u = by_id[uid]
                    tg = setup.targets_for(u, cfg.subsample_factor)
                    try:
                        return utterance_objective(model, u, tg, setup.denominator, weights,
                                                   recon_only)
                    except FloatingPointError as exc:
                        raise TrainingFault(
                            f"epoch {epoch + 1}, utterance {uid}: {exc}") from exc

                results = list(pool.map(run, batch)) if pool else [run(uid) for uid in batch]
                frames = np.array([len(setup.targets[uid].labels) for uid in batch], float)
                share = frames / frames.sum()
                grad = {k: np.zeros_like(v) for k, v in model.params.items()}
                for uid, (parts, g), s, n in zip(batch, results, share, frames):
                    row = np.array(parts.as_row())
                    if not np.all(np.isfinite(row)):
                        raise TrainingFault(f"non-finite loss at epoch {epoch + 1}, utterance {uid}")
                    sums += n * row
                    for k in names:
                        grad[k] += s * g[k]
                frames_seen += frames.sum()
                for k in names:
                    if not np.all(np.isfinite(grad[k])):
                        raise TrainingFault(f"non-finite gradient for {k} at epoch {epoch + 1}")
                    velocity[k] = schedule.momentum * velocity[k] - lr * grad[k]
                    model.params[k] += velocity[k]
                step += 1
                if schedule.semi_orth_enabled and step % SEMI_ORTH_EVERY == 0:
                    for k in names:
                        if k.endswith(".A"):
                            A = model.params[k]
                            model.params[k] = semi_orthogonal_step(A.T, SEMI_ORTH_NU).T
            mean = LossBreakdown(*(float(v) for v in sums / frames_seen))
            history.append(mean)
            log.info("epoch %d%s: %s", epoch + 1, " (warm)" if recon_only else "", mean)
            if out is not None:
                save_model(model, out / f"model.ep{epoch + 1}")
            if on_epoch is not None:
                on_epoch(epoch + 1, mean)
    finally:
        if pool:
            pool.shutdown()
    if out is not None:
        (out / "history.csv").write_text(history_csv(history))
        save_model(model, out / "final.mdl")
    return model, history


# --------------------------------------------------------------------------
# Gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return sorted(k for k, e in self.errors.items() if e > self.tolerance)

    def render(self) -> str:
        lines = [f"{k:16s} {e:.3e} {'ok' if e <= self.tolerance else 'FAIL'}"
                 for k, e in sorted(self.errors.items())]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} worst={self.worst[1]:.3e}"
                     f" ({self.worst[0]})")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two max magnitudes."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(model: Model, utt: Utterance, targets: ChainTargets, denominator: Fst,
               weights: LossWeights = LossWeights(), eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0,
               backward_hook: Callable[[dict], dict] | None = None) -> GradCheckReport:
    """Compare backprop with central differences of the full objective.

    Every coordinate is checked unless ``max_coords`` caps it (random subset,
    at least 200 recommended). ``backward_hook`` may rewrite the analytic
    gradients; tests use it to plant a defect.
    """
    if utt.num_frames > 9:
        raise ValueError("grad_check expects a short utterance (T <= 9)")
    _, analytic = utterance_objective(model, utt, targets, denominator, weights)
    if backward_hook is not None:
        analytic = backward_hook(analytic)
    rng = np.random.default_rng(seed)

    def value():
        parts, _ = utterance_objective(model, utt, targets, denominator, weights,
                                       with_grads=False)
        if not np.isfinite(parts.total):
            raise TrainingFault("non-finite loss during perturbation")
        return parts.total

    errors = {}
    for name in sorted(model.params):
        p = model.params[name]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        numeric = np.empty(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        errors[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
    return GradCheckReport(errors)


def grad_check_case(kind: str, unet_mode: str = "none", unet_weight: float = 0.5,
                    seed: int = 0, num_frames: int = 6, **overrides):
    """A tiny model, utterance and graphs for gradient checking.

    The utterance has distinct clean and noisy features so that both
    reconstruction terms are live. Returns ``(model, utt, targets, denominator)``.
    """
    from .corpus import Utterance
    from .model import ModelConfig
    from .net import CodeLayout, UNetMode

    rng = np.random.default_rng([seed, 7])
    num_phones = 3
    dims = dict(feat_dim=5, spk_dim=3, hidden_dim=6, bottleneck_dim=4, encoder_depth=4,
                decoder1_depth=2, decoder2_depth=2, subsample_factor=2)
    dims.update(overrides)
    layout = {"baseline": CodeLayout(4), "c_dcae": CodeLayout(4, 0, 3),
              "pc_dcae": CodeLayout(4, 3, 3), "hc_dcae": CodeLayout(4, 3, 3, 5)}[kind]
    cfg = ModelConfig(kind=kind, num_senones=2 * num_phones, code_layout=layout,
                      encoder2_depth=1 if kind == "hc_dcae" else 0,
                      unet=UNetMode(unet_mode, unet_weight), seed=seed, **dims)
    model = Model(cfg)
    f = cfg.subsample_factor
    # phones 0, 1, 2 with durations f, f, rest
    rest = num_frames - 2 * f
    if rest < 1:
        raise ValueError("utterance too short for three phones")
    ali = ([0] + [1] * (f - 1) + [2] + [3] * (f - 1) + [4] + [5] * (rest - 1))
    clean = rng.standard_normal((num_frames, cfg.feat_dim))
    noisy = clean + 0.5 * rng.standard_normal((num_frames, cfg.feat_dim))
    spk = rng.standard_normal(cfg.spk_dim)
    utt = Utterance("gc", "spk", "B", clean, noisy, ali, [0], spk)
    setup = ChainSetup(Topology(num_phones), build_denominator(
        estimate_phone_lm([[0, 1, 2], [2, 1], [1, 0, 2, 2]], num_phones), Topology(num_phones)),
        [])
    return model, utt, setup.targets_for(utt, f), setup.denominator
